//! RGB images, the pretext augmentations, and sample preparation.
//!
//! An [`Image`] holds `H x W x 3` floats in `[0, 1]`. The three pretext
//! tasks are quarter-turn rotation and the classic enhancement-style
//! saturation/sharpness adjustments, each discretized to four levels so a
//! classification head can predict which level was applied.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rec. 601 luma weights used for the grayscale degenerate.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Box-with-heavy-center smoothing kernel for the sharpness degenerate,
/// applied to interior pixels only; weights are `[[1,1,1],[1,5,1],[1,1,1]]/13`.
const SMOOTH_CENTER: f64 = 5.0;
const SMOOTH_NORM: f64 = 13.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>, // h * w * 3, row-major, RGB
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h < 8 || w < 8 {
            return Err(Error::invalid(
                "image",
                format!("dimensions must be at least 8x8, got {h}x{w}"),
            ));
        }
        if data.len() != h * w * 3 {
            return Err(Error::invalid(
                "image",
                format!("expected {} values, got {}", h * w * 3, data.len()),
            ));
        }
        if !data.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image", "values must lie in [0, 1]"));
        }
        Ok(Self { h, w, data })
    }

    pub fn constant(h: usize, w: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(h * w * 3);
        for _ in 0..h * w {
            data.extend_from_slice(&rgb);
        }
        Self::new(h, w, data)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// View as an `[H, W, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w, 3], self.data.clone()).expect("image is a valid tensor")
    }

    /// Rebuild from an `[H, W, 3]` tensor with values in `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w, 3] => Image::new(*h, *w, t.data().to_vec()),
            other => Err(Error::invalid(
                "image",
                format!("expected [H, W, 3] tensor, got {other:?}"),
            )),
        }
    }

    pub fn bits_eq(&self, other: &Image) -> bool {
        self.h == other.h
            && self.w == other.w
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

// ---- pretext task vocabulary ----------------------------------------------

/// The three augmentation-classification pretext tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TaskKind {
    Rotation,
    Saturation,
    Sharpness,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Rotation, TaskKind::Saturation, TaskKind::Sharpness];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Rotation => "rotation",
            TaskKind::Saturation => "saturation",
            TaskKind::Sharpness => "sharpness",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        match s {
            "rotation" => Some(TaskKind::Rotation),
            "saturation" => Some(TaskKind::Saturation),
            "sharpness" => Some(TaskKind::Sharpness),
            _ => None,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A pretext task and its four discretization levels.
///
/// Rotation levels are degrees; saturation/sharpness levels are enhancement
/// factors where `1.0` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextTaskSpec {
    pub task: TaskKind,
    pub levels: [f32; 4],
}

impl PretextTaskSpec {
    pub fn rotation() -> Self {
        Self {
            task: TaskKind::Rotation,
            levels: [0.0, 90.0, 180.0, 270.0],
        }
    }

    pub fn saturation() -> Self {
        Self {
            task: TaskKind::Saturation,
            levels: [0.0, 0.25, 0.75, 1.0],
        }
    }

    pub fn sharpness() -> Self {
        Self {
            task: TaskKind::Sharpness,
            levels: [0.0, 0.25, 0.75, 1.0],
        }
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Rotation => Self::rotation(),
            TaskKind::Saturation => Self::saturation(),
            TaskKind::Sharpness => Self::sharpness(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.levels.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::invalid(
                "pretext_task",
                format!("levels must be strictly increasing, got {:?}", self.levels),
            ));
        }
        Ok(())
    }
}

/// One training pair for pseudo-label classification: the augmented image
/// plus, per active task, the index of the level that was applied.
#[derive(Debug, Clone)]
pub struct PretextSample {
    pub augmented: Image,
    pub labels: BTreeMap<TaskKind, usize>,
}

// ---- augmentation operations ------------------------------------------------

/// Rotate a flat `h x w x c` grid counter-clockwise by one quarter turn.
/// Output is `w x h x c` with `out[r][col] = in[col][w - 1 - r]`.
fn rotate90_raw(h: usize, w: usize, c: usize, data: &[f32]) -> (usize, usize, Vec<f32>) {
    let mut out = vec![0.0f32; data.len()];
    for r in 0..w {
        for col in 0..h {
            let src = (col * w + (w - 1 - r)) * c;
            let dst = (r * h + col) * c;
            out[dst..dst + c].copy_from_slice(&data[src..src + c]);
        }
    }
    (w, h, out)
}

/// Counter-clockwise rotation by `k` quarter turns. Lossless pixel
/// permutation; odd `k` requires a square image so tensor shapes stay fixed.
pub fn rotate90(img: &Image, k: usize) -> Result<Image> {
    if k >= 4 {
        return Err(Error::invalid("rotate90", format!("k must be in [0, 4), got {k}")));
    }
    if k % 2 == 1 && img.h != img.w {
        return Err(Error::invalid(
            "rotate90",
            format!("odd quarter turns need a square image, got {}x{}", img.h, img.w),
        ));
    }
    let (mut h, mut w, mut data) = (img.h, img.w, img.data.clone());
    for _ in 0..k {
        let (nh, nw, nd) = rotate90_raw(h, w, 3, &data);
        h = nh;
        w = nw;
        data = nd;
    }
    Image::new(h, w, data)
}

/// Per-pixel Rec. 601 luma replicated to all three channels.
pub fn to_grayscale(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let l = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
        data.extend_from_slice(&[l, l, l]);
    }
    Image {
        h: img.h,
        w: img.w,
        data,
    }
}

/// `(1 - factor) * a + factor * b`, clamped to `[0, 1]`.
///
/// Computed in `f64` so that the `factor = 0`/`factor = 1` endpoints and the
/// `a == b` case reproduce their operand bit-for-bit after the final
/// rounding.
pub fn blend(a: &Image, b: &Image, factor: f32) -> Result<Image> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch {
            op: "blend",
            lhs: vec![a.h, a.w],
            rhs: vec![b.h, b.w],
        });
    }
    if !(0.0..=1.0).contains(&factor) {
        return Err(Error::invalid("blend", format!("factor must be in [0, 1], got {factor}")));
    }
    let f = factor as f64;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (((1.0 - f) * x as f64 + f * y as f64) as f32).clamp(0.0, 1.0))
        .collect();
    Ok(Image {
        h: a.h,
        w: a.w,
        data,
    })
}

/// Saturation adjustment: blend between the grayscale degenerate (factor 0)
/// and the original (factor 1).
pub fn adjust_saturation(img: &Image, factor: f32) -> Result<Image> {
    if !(0.0..=1.0).contains(&factor) {
        return Err(Error::invalid(
            "adjust_saturation",
            format!("factor must be in [0, 1], got {factor}"),
        ));
    }
    blend(&to_grayscale(img), img, factor)
}

fn smooth(img: &Image) -> Image {
    let mut out = img.data.clone();
    let (h, w) = (img.h, img.w);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for ch in 0..3 {
                let mut acc = 0.0f64;
                for dy in 0..3usize {
                    for dx in 0..3usize {
                        let wgt = if dy == 1 && dx == 1 { SMOOTH_CENTER } else { 1.0 };
                        acc += wgt * img.data[((y + dy - 1) * w + (x + dx - 1)) * 3 + ch] as f64;
                    }
                }
                out[(y * w + x) * 3 + ch] = (acc / SMOOTH_NORM) as f32;
            }
        }
    }
    Image {
        h,
        w,
        data: out,
    }
}

/// Sharpness adjustment: blend between a smoothed degenerate (factor 0,
/// border pixels kept from the original) and the original (factor 1).
pub fn adjust_sharpness(img: &Image, factor: f32) -> Result<Image> {
    if !(0.0..=1.0).contains(&factor) {
        return Err(Error::invalid(
            "adjust_sharpness",
            format!("factor must be in [0, 1], got {factor}"),
        ));
    }
    blend(&smooth(img), img, factor)
}

// ---- sample preparation ------------------------------------------------------

/// Bilinear resize to `size x size` (half-pixel-centre convention; an
/// identity when the source already is `size x size`).
fn resize_bilinear(img: &Image, size: usize) -> Image {
    if img.h == size && img.w == size {
        return img.clone();
    }
    let mut data = Vec::with_capacity(size * size * 3);
    let sy = img.h as f64 / size as f64;
    let sx = img.w as f64 / size as f64;
    for oy in 0..size {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..size {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..3 {
                let p = |y: usize, x: usize| img.data[(y * img.w + x) * 3 + ch] as f64;
                let v = (1.0 - wy) * ((1.0 - wx) * p(y0, x0) + wx * p(y0, x1))
                    + wy * ((1.0 - wx) * p(y1, x0) + wx * p(y1, x1));
                data.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    Image {
        h: size,
        w: size,
        data,
    }
}

/// Resize to `resize_to`^2 then take a uniformly random `crop_to`^2 crop.
/// Deterministic for a fixed RNG state.
pub fn prepare_sample(
    img: &Image,
    rng: &mut ChaCha8Rng,
    resize_to: usize,
    crop_to: usize,
) -> Result<Image> {
    if crop_to > resize_to {
        return Err(Error::invalid(
            "prepare_sample",
            format!("crop {crop_to} larger than resize {resize_to}"),
        ));
    }
    let resized = resize_bilinear(img, resize_to);
    let oy = rng.gen_range(0..=resize_to - crop_to);
    let ox = rng.gen_range(0..=resize_to - crop_to);
    if crop_to == resize_to {
        return Ok(resized);
    }
    let mut data = Vec::with_capacity(crop_to * crop_to * 3);
    for y in 0..crop_to {
        let row = ((oy + y) * resize_to + ox) * 3;
        data.extend_from_slice(&resized.data[row..row + crop_to * 3]);
    }
    Image::new(crop_to, crop_to, data)
}

/// Draw one level per active task and apply the augmentations in the fixed
/// order saturation, then sharpness, then rotation (rotation last keeps it a
/// pure permutation, so the colour-task labels are unaffected).
pub fn pretext_sample(
    img: &Image,
    tasks: &[PretextTaskSpec],
    rng: &mut ChaCha8Rng,
) -> Result<PretextSample> {
    if tasks.is_empty() || tasks.len() > 3 {
        return Err(Error::invalid(
            "pretext_sample",
            format!("need 1-3 tasks, got {}", tasks.len()),
        ));
    }
    for spec in tasks {
        spec.validate()?;
        if tasks.iter().filter(|t| t.task == spec.task).count() > 1 {
            return Err(Error::invalid(
                "pretext_sample",
                format!("duplicate task {}", spec.task),
            ));
        }
    }
    let mut labels = BTreeMap::new();
    let mut augmented = img.clone();
    for kind in [TaskKind::Saturation, TaskKind::Sharpness, TaskKind::Rotation] {
        let Some(spec) = tasks.iter().find(|t| t.task == kind) else {
            continue;
        };
        let level = rng.gen_range(0..4usize);
        labels.insert(kind, level);
        augmented = match kind {
            TaskKind::Saturation => adjust_saturation(&augmented, spec.levels[level])?,
            TaskKind::Sharpness => adjust_sharpness(&augmented, spec.levels[level])?,
            TaskKind::Rotation => {
                let quarter_turns = (spec.levels[level] / 90.0).round() as usize % 4;
                rotate90(&augmented, quarter_turns)?
            }
        };
    }
    Ok(PretextSample { augmented, labels })
}

// ---- PPM I/O -------------------------------------------------------------------

/// Write binary 8-bit PPM (`P6`); values map linearly to `[0, 255]` with
/// round-half-up.
pub fn write_ppm(img: &Image, writer: &mut impl Write) -> Result<()> {
    write!(writer, "P6\n{} {}\n255\n", img.w, img.h)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| (v * 255.0).round() as u8).collect();
    writer.write_all(&bytes)?;
    Ok(())
}

pub fn write_ppm_file(img: &Image, path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(img, &mut f)
}

/// Skip whitespace and `#` comments, then read one ASCII token.
fn read_token(reader: &mut impl BufRead) -> Result<String> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match reader.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof && !token.is_empty() => break,
            Err(e) => return Err(e.into()),
        }
        let c = byte[0];
        if in_comment {
            if c == b'\n' {
                in_comment = false;
            }
            continue;
        }
        if c == b'#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            break;
        }
        token.push(c as char);
    }
    Ok(token)
}

pub(crate) fn netpbm_header(reader: &mut impl BufRead, magic: &str) -> Result<(usize, usize)> {
    let got = read_token(reader)?;
    if got != magic {
        return Err(Error::Format(format!("expected {magic} header, got {got:?}")));
    }
    let w: usize = read_token(reader)?
        .parse()
        .map_err(|_| Error::Format("bad width".into()))?;
    let h: usize = read_token(reader)?
        .parse()
        .map_err(|_| Error::Format("bad height".into()))?;
    let maxval: usize = read_token(reader)?
        .parse()
        .map_err(|_| Error::Format("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit maxval 255 supported, got {maxval}")));
    }
    Ok((w, h))
}

/// Read binary 8-bit PPM (`P6`).
pub fn read_ppm(reader: &mut impl BufRead) -> Result<Image> {
    let (w, h) = netpbm_header(reader, "P6")?;
    let mut bytes = vec![0u8; w * h * 3];
    reader.read_exact(&mut bytes)?;
    let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
    Image::new(h, w, data)
}

pub fn read_ppm_file(path: &std::path::Path) -> Result<Image> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_ppm(&mut f)
}
