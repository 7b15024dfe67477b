//! Irregular stroke masks for inpainting.
//!
//! Masks are generated as random-walk polylines rasterized with a circular
//! brush, then rejection-sampled until the missing-pixel fraction falls in
//! the configured band (0.30-0.50 by default). Mask generation is pure given
//! `(dims, spec, rng state)`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

/// Boolean missing-pixel grid; `true` marks a pixel to be inpainted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    grid: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, grid: Vec<bool>) -> Result<Self> {
        if grid.len() != h * w {
            return Err(Error::invalid(
                "mask",
                format!("expected {} cells, got {}", h * w, grid.len()),
            ));
        }
        Ok(Self { h, w, grid })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn is_missing(&self, y: usize, x: usize) -> bool {
        self.grid[y * self.w + x]
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }
}

/// Stroke-generation parameters. All ranges are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub strokes: (usize, usize),
    pub thickness: (usize, usize),
    pub segment_length: (usize, usize),
    pub segments_per_stroke: (usize, usize),
    pub fraction_bounds: (f64, f64),
    pub max_rejections: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            strokes: (4, 12),
            thickness: (8, 24),
            segment_length: (10, 40),
            segments_per_stroke: (4, 12),
            fraction_bounds: (0.30, 0.50),
            max_rejections: 200,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.fraction_bounds;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::invalid(
                "mask_spec",
                format!("fraction bounds must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"),
            ));
        }
        for (name, (a, b)) in [
            ("strokes", self.strokes),
            ("thickness", self.thickness),
            ("segment_length", self.segment_length),
            ("segments_per_stroke", self.segments_per_stroke),
        ] {
            if a == 0 || a > b {
                return Err(Error::invalid(
                    "mask_spec",
                    format!("{name} range must satisfy 1 <= lo <= hi, got ({a}, {b})"),
                ));
            }
        }
        if self.max_rejections == 0 {
            return Err(Error::invalid("mask_spec", "max_rejections must be at least 1"));
        }
        Ok(())
    }
}

/// Fraction of missing pixels.
pub fn missing_fraction(mask: &Mask) -> f64 {
    let missing = mask.grid.iter().filter(|&&m| m).count();
    missing as f64 / mask.grid.len() as f64
}

fn stamp_disc(grid: &mut [bool], h: usize, w: usize, cx: f64, cy: f64, radius: f64) {
    let y0 = ((cy - radius).floor().max(0.0)) as usize;
    let y1 = ((cy + radius).ceil().min((h - 1) as f64)) as usize;
    let x0 = ((cx - radius).floor().max(0.0)) as usize;
    let x1 = ((cx + radius).ceil().min((w - 1) as f64)) as usize;
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if dy * dy + dx * dx <= r2 {
                grid[y * w + x] = true;
            }
        }
    }
}

fn draw_candidate(h: usize, w: usize, spec: &MaskSpec, rng: &mut ChaCha8Rng) -> Mask {
    use std::f64::consts::{PI, TAU};
    let mut grid = vec![false; h * w];
    let n_strokes = rng.gen_range(spec.strokes.0..=spec.strokes.1);
    for _ in 0..n_strokes {
        let thickness = rng.gen_range(spec.thickness.0..=spec.thickness.1);
        let radius = thickness as f64 / 2.0;
        let mut x = rng.gen_range(0.0..w as f64);
        let mut y = rng.gen_range(0.0..h as f64);
        let mut heading = rng.gen_range(0.0..TAU);
        let n_segments = rng.gen_range(spec.segments_per_stroke.0..=spec.segments_per_stroke.1);
        stamp_disc(&mut grid, h, w, x, y, radius);
        for _ in 0..n_segments {
            heading += rng.gen_range(-PI / 3.0..=PI / 3.0);
            let length = rng.gen_range(spec.segment_length.0..=spec.segment_length.1) as f64;
            let (tx, ty) = (
                (x + length * heading.cos()).clamp(0.0, w as f64),
                (y + length * heading.sin()).clamp(0.0, h as f64),
            );
            // Sweep the brush along the segment densely enough that
            // consecutive discs overlap.
            let dist = ((tx - x).powi(2) + (ty - y).powi(2)).sqrt();
            let steps = (dist / (radius * 0.5).max(1.0)).ceil().max(1.0) as usize;
            for s in 1..=steps {
                let t = s as f64 / steps as f64;
                stamp_disc(&mut grid, h, w, x + (tx - x) * t, y + (ty - y) * t, radius);
            }
            x = tx;
            y = ty;
        }
    }
    Mask { h, w, grid }
}

/// Generate a mask whose missing fraction falls within
/// `spec.fraction_bounds`, rejection-sampling whole candidates.
pub fn generate_mask(h: usize, w: usize, spec: &MaskSpec, rng: &mut ChaCha8Rng) -> Result<Mask> {
    if h < 32 || w < 32 {
        return Err(Error::invalid(
            "generate_mask",
            format!("mask dims must be at least 32x32, got {h}x{w}"),
        ));
    }
    spec.validate()?;
    let (lo, hi) = spec.fraction_bounds;
    for _ in 0..spec.max_rejections {
        let mask = draw_candidate(h, w, spec, rng);
        let f = missing_fraction(&mask);
        if lo <= f && f <= hi {
            return Ok(mask);
        }
    }
    Err(Error::MaskRejectionLimit(spec.max_rejections))
}

/// Replace masked pixels with `fill` on all three channels; unmasked pixels
/// are copied bit-exactly.
pub fn apply_mask(img: &Image, mask: &Mask, fill: f32) -> Result<Image> {
    if img.height() != mask.h || img.width() != mask.w {
        return Err(Error::ShapeMismatch {
            op: "apply_mask",
            lhs: vec![img.height(), img.width()],
            rhs: vec![mask.h, mask.w],
        });
    }
    if !(0.0..=1.0).contains(&fill) {
        return Err(Error::invalid("apply_mask", format!("fill must be in [0, 1], got {fill}")));
    }
    let mut data = img.data().to_vec();
    for (i, &missing) in mask.grid.iter().enumerate() {
        if missing {
            data[i * 3..i * 3 + 3].fill(fill);
        }
    }
    Image::new(img.height(), img.width(), data)
}

// ---- PGM I/O ----------------------------------------------------------------

/// Write binary 8-bit PGM (`P5`); 255 marks missing pixels, 0 known ones.
pub fn write_pgm(mask: &Mask, writer: &mut impl Write) -> Result<()> {
    write!(writer, "P5\n{} {}\n255\n", mask.w, mask.h)?;
    let bytes: Vec<u8> = mask.grid.iter().map(|&m| if m { 255 } else { 0 }).collect();
    writer.write_all(&bytes)?;
    Ok(())
}

pub fn write_pgm_file(mask: &Mask, path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_pgm(mask, &mut f)
}

/// Read binary 8-bit PGM (`P5`); values of 128 and above count as missing.
pub fn read_pgm(reader: &mut impl BufRead) -> Result<Mask> {
    let (w, h) = crate::image::netpbm_header(reader, "P5")?;
    let mut bytes = vec![0u8; w * h];
    reader.read_exact(&mut bytes)?;
    Mask::new(h, w, bytes.iter().map(|&b| b >= 128).collect())
}

pub fn read_pgm_file(path: &std::path::Path) -> Result<Mask> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_pgm(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamKind};

    #[test]
    fn missing_fraction_trivial_cases() {
        let empty = Mask::new(4, 4, vec![false; 16]).unwrap();
        assert_eq!(missing_fraction(&empty), 0.0);
        let full = Mask::new(4, 4, vec![true; 16]).unwrap();
        assert_eq!(missing_fraction(&full), 1.0);
    }

    #[test]
    fn missing_fraction_counts_exactly() {
        // 224 x 224 grid with exactly half of the cells missing.
        let mut grid = vec![false; 224 * 224];
        for cell in grid.iter_mut().take(25_088) {
            *cell = true;
        }
        let mask = Mask::new(224, 224, grid).unwrap();
        assert_eq!(missing_fraction(&mask), 0.5);
    }

    #[test]
    fn apply_mask_noop_and_full_replacement() {
        let img = Image::constant(32, 32, [0.8, 0.4, 0.2]).unwrap();
        let none = Mask::new(32, 32, vec![false; 32 * 32]).unwrap();
        assert!(apply_mask(&img, &none, 0.0).unwrap().bits_eq(&img));

        let all = Mask::new(32, 32, vec![true; 32 * 32]).unwrap();
        let out = apply_mask(&img, &all, 0.0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_checkerboard_mean() {
        let img = Image::constant(32, 32, [0.8, 0.8, 0.8]).unwrap();
        let grid: Vec<bool> = (0..32 * 32).map(|i| (i / 32 + i % 32) % 2 == 0).collect();
        let mask = Mask::new(32, 32, grid).unwrap();
        let out = apply_mask(&img, &mask, 0.0).unwrap();
        let mean: f64 = out.data().iter().map(|&v| v as f64).sum::<f64>() / out.data().len() as f64;
        assert!((mean - 0.4).abs() < 1e-6);
    }

    #[test]
    fn apply_mask_rejects_dim_mismatch() {
        let img = Image::constant(32, 32, [0.5; 3]).unwrap();
        let mask = Mask::new(16, 32, vec![false; 16 * 32]).unwrap();
        assert!(apply_mask(&img, &mask, 0.0).is_err());
    }

    #[test]
    fn apply_mask_never_touches_known_pixels() {
        let mut rng = stream_rng(3, StreamKind::MaskGen, 0);
        let data: Vec<f32> = (0..64 * 64 * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
        let img = Image::new(64, 64, data).unwrap();
        let mask = generate_mask(64, 64, &MaskSpec::default(), &mut rng).unwrap();
        let out = apply_mask(&img, &mask, 0.3).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                if !mask.is_missing(y, x) {
                    let a = img.pixel(y, x);
                    let b = out.pixel(y, x);
                    assert_eq!(a[0].to_bits(), b[0].to_bits());
                    assert_eq!(a[1].to_bits(), b[1].to_bits());
                    assert_eq!(a[2].to_bits(), b[2].to_bits());
                }
            }
        }
    }

    #[test]
    fn generated_masks_respect_fraction_bounds() {
        let spec = MaskSpec::default();
        for seed in 0..20 {
            let mut rng = stream_rng(seed, StreamKind::MaskGen, 0);
            let mask = generate_mask(64, 64, &spec, &mut rng).unwrap();
            let f = missing_fraction(&mask);
            assert!((0.30..=0.50).contains(&f), "seed {seed} fraction {f}");
        }
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let spec = MaskSpec::default();
        let a = generate_mask(64, 64, &spec, &mut stream_rng(11, StreamKind::MaskGen, 7)).unwrap();
        let b = generate_mask(64, 64, &spec, &mut stream_rng(11, StreamKind::MaskGen, 7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_spec_hits_rejection_limit() {
        let spec = MaskSpec {
            strokes: (1, 1),
            thickness: (1, 1),
            segment_length: (1, 1),
            segments_per_stroke: (1, 1),
            fraction_bounds: (0.999, 0.9999),
            max_rejections: 20,
            ..MaskSpec::default()
        };
        let err = generate_mask(64, 64, &spec, &mut stream_rng(0, StreamKind::MaskGen, 0));
        assert!(matches!(err, Err(Error::MaskRejectionLimit(20))));
    }

    #[test]
    fn tiny_dims_rejected() {
        let mut rng = stream_rng(0, StreamKind::MaskGen, 0);
        assert!(generate_mask(16, 64, &MaskSpec::default(), &mut rng).is_err());
    }

    #[test]
    fn pgm_roundtrip_preserves_mask() {
        let mut rng = stream_rng(5, StreamKind::MaskGen, 1);
        let mask = generate_mask(64, 64, &MaskSpec::default(), &mut rng).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mask, &mut buf).unwrap();
        let back = read_pgm(&mut std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(mask, back);
    }
}
