//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation computes its value eagerly and
//! appends a node recording its inputs and the rule used to push gradients
//! back through it. Tape order is construction order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//!
//! Values are `f32`. Reductions (convolution dot products, means, the fused
//! loss kernels) accumulate in `f64` and round once on write, and every
//! scalar-valued node additionally carries an `f64` shadow of its value so
//! that finite-difference checks can resolve gradients far below the `f32`
//! quantization step of the loss.
//!
//! Graphs are single-threaded and intended to be rebuilt per training step;
//! tensors are immutable after creation except the grad slot, which is
//! written only during [`Graph::backward`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Spatial padding mode for [`Graph::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output keeps the input's spatial size (odd kernels).
    SameZero,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

/// Normalized 2-D window for the fused structural-similarity node.
#[derive(Debug, Clone)]
pub struct Window2d {
    size: usize,
    weights: Vec<f64>,
}

impl Window2d {
    /// Gaussian window of odd `size` with standard deviation `sigma`,
    /// normalized to sum to one (in `f64`).
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if size < 3 || size % 2 == 0 {
            return Err(Error::invalid(
                "window",
                format!("size must be odd and >= 3, got {size}"),
            ));
        }
        if !(sigma > 0.0) {
            return Err(Error::invalid("window", "sigma must be positive"));
        }
        let half = (size / 2) as f64;
        let mut weights = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let dy = y as f64 - half;
                let dx = x as f64 - half;
                weights.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Ok(Self { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    ScalarMul(TensorId, f32),
    Abs(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Mean(TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        padding: Padding,
    },
    MaxPool2 {
        input: TensorId,
        argmax: Vec<u32>,
    },
    Upsample2(TensorId),
    ConcatChannels(TensorId, TensorId),
    Dense {
        x: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    SoftmaxCrossEntropy {
        logits: TensorId,
        label: usize,
        probs: Vec<f32>,
    },
    GlobalAvgPool(TensorId),
    LogCosh {
        pred: TensorId,
        target: TensorId,
        scale: f64,
    },
    Ssim {
        x: TensorId,
        y: TensorId,
        window: Window2d,
        c1: f64,
        c2: f64,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    shadow: Option<f64>,
    op: Op,
}

/// Reverse-mode autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a leaf that does not track gradients.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push_leaf(value, false)
    }

    /// Register a leaf that accumulates a gradient during backward.
    pub fn variable(&mut self, value: Tensor) -> TensorId {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        let shadow = value.is_scalar().then(|| value.data()[0] as f64);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            shadow,
            op: Op::Leaf,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of `id`, present after [`Graph::backward`] for every node
    /// with `requires_grad` (all-zero when the loss does not depend on it).
    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// High-precision readout of a scalar node.
    ///
    /// Scalar-producing reductions compute in `f64` internally; this returns
    /// that un-rounded value (falling back to the `f32` value for scalars
    /// produced by ops without a shadow).
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let node = &self.nodes[id.0];
        if !node.value.is_scalar() {
            return Err(Error::invalid(
                "scalar_value",
                format!("expected scalar, got shape {:?}", node.value.shape()),
            ));
        }
        Ok(node
            .shadow
            .unwrap_or_else(|| node.value.data()[0] as f64))
    }

    fn shadow_of(&self, id: TensorId) -> f64 {
        let node = &self.nodes[id.0];
        node.shadow
            .unwrap_or_else(|| node.value.data()[0] as f64)
    }

    fn push_op(&mut self, value: Tensor, requires_grad: bool, shadow: Option<f64>, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            shadow,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn check_finite(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    // ---- elementwise ops -------------------------------------------------

    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        make_op: impl Fn(TensorId, TensorId) -> Op,
    ) -> Result<TensorId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if va.shape() == vb.shape() {
            let data = va
                .data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x as f64, y as f64) as f32)
                .collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.is_scalar() {
            let x = va.data()[0] as f64;
            let data = vb.data().iter().map(|&y| f(x, y as f64) as f32).collect();
            Tensor::new(vb.shape().to_vec(), data)?
        } else if vb.is_scalar() {
            let y = vb.data()[0] as f64;
            let data = va.data().iter().map(|&x| f(x as f64, y) as f32).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        self.check_finite(op_name, &out)?;
        let shadow = out
            .is_scalar()
            .then(|| f(self.shadow_of(a), self.shadow_of(b)));
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push_op(out, rg, shadow, make_op(a, b)))
    }

    /// Elementwise sum; shapes must match or one operand must be scalar.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    /// Elementwise difference; shapes must match or one operand must be scalar.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product; shapes must match or one operand must be scalar.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Multiply every element by a compile-time constant.
    pub fn scalar_mul(&mut self, a: TensorId, c: f32) -> Result<TensorId> {
        if !c.is_finite() {
            return Err(Error::invalid("scalar_mul", "constant must be finite"));
        }
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.check_finite("scalar_mul", &out)?;
        let shadow = out.is_scalar().then(|| self.shadow_of(a) * c as f64);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(out, rg, shadow, Op::ScalarMul(a, c)))
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        make_op: impl Fn(TensorId) -> Op,
    ) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| f(x as f64) as f32).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.check_finite(op_name, &out)?;
        let shadow = out.is_scalar().then(|| f(self.shadow_of(a)));
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(out, rg, shadow, make_op(a)))
    }

    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("abs", a, f64::abs, Op::Abs)
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a.0].value.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::invalid("log", "input must be strictly positive"));
        }
        self.unary("log", a, f64::ln, Op::Log)
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.unary("sigmoid", a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let sum: f64 = va.data().iter().map(|&x| x as f64).sum();
        let m = sum / va.len() as f64;
        let out = Tensor::scalar(m as f32);
        self.check_finite("mean", &out)?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push_op(out, rg, Some(m), Op::Mean(a)))
    }

    // ---- structured ops --------------------------------------------------

    /// 2-D cross-correlation, stride 1.
    ///
    /// `input` is `[H, W, Cin]`, `kernel` is `[kh, kw, Cin, Cout]` with odd
    /// `kh`/`kw`, `bias` is `[Cout]`. Dot products accumulate in `f64`.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        padding: Padding,
    ) -> Result<TensorId> {
        let vi = &self.nodes[input.0].value;
        let vk = &self.nodes[kernel.0].value;
        let vb = &self.nodes[bias.0].value;
        let [h, w, cin] = dims3("conv2d", vi)?;
        if vk.shape().len() != 4 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be 4-d, got {:?}", vk.shape()),
            ));
        }
        let (kh, kw, kcin, cout) = (
            vk.shape()[0],
            vk.shape()[1],
            vk.shape()[2],
            vk.shape()[3],
        );
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel spatial dims must be odd, got {kh}x{kw}"),
            ));
        }
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vi.shape().to_vec(),
                rhs: vk.shape().to_vec(),
            });
        }
        if vb.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vb.shape().to_vec(),
                rhs: vec![cout],
            });
        }
        let (pad_y, pad_x, oh, ow) = match padding {
            Padding::SameZero => ((kh - 1) / 2, (kw - 1) / 2, h, w),
            Padding::Valid => {
                if kh > h || kw > w {
                    return Err(Error::invalid(
                        "conv2d",
                        format!("{kh}x{kw} kernel exceeds {h}x{w} input with valid padding"),
                    ));
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
        };

        let idata = vi.data();
        let kdata = vk.data();
        let bdata = vb.data();
        let mut out = vec![0.0f32; oh * ow * cout];
        let mut acc = vec![0.0f64; cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for (co, a) in acc.iter_mut().enumerate() {
                    *a = bdata[co] as f64;
                }
                for ky in 0..kh {
                    let iy = oy + ky;
                    if iy < pad_y || iy - pad_y >= h {
                        continue;
                    }
                    let iy = iy - pad_y;
                    for kx in 0..kw {
                        let ix = ox + kx;
                        if ix < pad_x || ix - pad_x >= w {
                            continue;
                        }
                        let ix = ix - pad_x;
                        let ipx = &idata[(iy * w + ix) * cin..][..cin];
                        let kbase = (ky * kw + kx) * cin * cout;
                        for (ci, &v) in ipx.iter().enumerate() {
                            let v = v as f64;
                            let krow = &kdata[kbase + ci * cout..][..cout];
                            for (co, &kv) in krow.iter().enumerate() {
                                acc[co] += v * kv as f64;
                            }
                        }
                    }
                }
                let obase = (oy * ow + ox) * cout;
                for co in 0..cout {
                    out[obase + co] = acc[co] as f32;
                }
            }
        }
        let out = Tensor::new(vec![oh, ow, cout], out)?;
        self.check_finite("conv2d", &out)?;
        let rg = self.nodes[input.0].requires_grad
            || self.nodes[kernel.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        Ok(self.push_op(
            out,
            rg,
            None,
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            },
        ))
    }

    /// 2x2 max pooling; spatial dims must be even. Gradient routes to the
    /// argmax of each block, first-in-row-major-scan on ties.
    pub fn maxpool2(&mut self, input: TensorId) -> Result<TensorId> {
        let vi = &self.nodes[input.0].value;
        let [h, w, c] = dims3("maxpool2", vi)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "maxpool2",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let idata = vi.data();
        let mut out = vec![0.0f32; oh * ow * c];
        let mut argmax = vec![0u32; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if idata[idx] > best {
                                best = idata[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = (oy * ow + ox) * c + ch;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let out = Tensor::new(vec![oh, ow, c], out)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push_op(out, rg, None, Op::MaxPool2 { input, argmax }))
    }

    /// Nearest-neighbour 2x upsampling; each pixel becomes a 2x2 block.
    pub fn upsample_nearest2(&mut self, input: TensorId) -> Result<TensorId> {
        let vi = &self.nodes[input.0].value;
        let [h, w, c] = dims3("upsample_nearest2", vi)?;
        let idata = vi.data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; oh * ow * c];
        for y in 0..h {
            for x in 0..w {
                let src = &idata[(y * w + x) * c..][..c];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = ((2 * y + dy) * ow + 2 * x + dx) * c;
                        out[dst..dst + c].copy_from_slice(src);
                    }
                }
            }
        }
        let out = Tensor::new(vec![oh, ow, c], out)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push_op(out, rg, None, Op::Upsample2(input)))
    }

    /// Stack `a`'s channels before `b`'s; spatial dims must match.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let [ha, wa, ca] = dims3("concat_channels", va)?;
        let [hb, wb, cb] = dims3("concat_channels", vb)?;
        if ha != hb || wa != wb {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let c = ca + cb;
        let mut out = vec![0.0f32; ha * wa * c];
        for p in 0..ha * wa {
            out[p * c..p * c + ca].copy_from_slice(&va.data()[p * ca..(p + 1) * ca]);
            out[p * c + ca..(p + 1) * c].copy_from_slice(&vb.data()[p * cb..(p + 1) * cb]);
        }
        let out = Tensor::new(vec![ha, wa, c], out)?;
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push_op(out, rg, None, Op::ConcatChannels(a, b)))
    }

    /// Fully connected layer `x . W + b` for 1-d `x`.
    pub fn dense(&mut self, x: TensorId, weight: TensorId, bias: TensorId) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[weight.0].value;
        let vb = &self.nodes[bias.0].value;
        if vx.shape().len() != 1 || vw.shape().len() != 2 {
            return Err(Error::invalid(
                "dense",
                format!(
                    "expected 1-d input and 2-d weight, got {:?} and {:?}",
                    vx.shape(),
                    vw.shape()
                ),
            ));
        }
        let (n, m) = (vw.shape()[0], vw.shape()[1]);
        if vx.len() != n || vb.shape() != [m] {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; m];
        for j in 0..m {
            let mut acc = vb.data()[j] as f64;
            for i in 0..n {
                acc += vx.data()[i] as f64 * vw.data()[i * m + j] as f64;
            }
            out[j] = acc as f32;
        }
        let out = Tensor::from_vec(out);
        self.check_finite("dense", &out)?;
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[weight.0].requires_grad
            || self.nodes[bias.0].requires_grad;
        Ok(self.push_op(out, rg, None, Op::Dense { x, weight, bias }))
    }

    /// Cross-entropy of `softmax(logits)` against a class index, computed
    /// with max-subtraction. Scalar output.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId> {
        let vl = &self.nodes[logits.0].value;
        if vl.shape().len() != 1 || vl.len() < 2 {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("logits must be 1-d with k >= 2, got {:?}", vl.shape()),
            ));
        }
        if label >= vl.len() {
            return Err(Error::invalid(
                "softmax_cross_entropy",
                format!("label {label} out of range for {} classes", vl.len()),
            ));
        }
        let max = vl.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut z = 0.0f64;
        for &l in vl.data() {
            z += (l as f64 - max).exp();
        }
        let loss = z.ln() - (vl.data()[label] as f64 - max);
        let probs: Vec<f32> = vl
            .data()
            .iter()
            .map(|&l| (((l as f64 - max).exp()) / z) as f32)
            .collect();
        let out = Tensor::scalar(loss as f32);
        self.check_finite("softmax_cross_entropy", &out)?;
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push_op(
            out,
            rg,
            Some(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Average over the spatial dims: `[H, W, C] -> [C]`.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let vi = &self.nodes[input.0].value;
        let [h, w, c] = dims3("global_avg_pool", vi)?;
        let mut acc = vec![0.0f64; c];
        for p in 0..h * w {
            for ch in 0..c {
                acc[ch] += vi.data()[p * c + ch] as f64;
            }
        }
        let inv = 1.0 / (h * w) as f64;
        let out = Tensor::from_vec(acc.iter().map(|&a| (a * inv) as f32).collect());
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push_op(out, rg, None, Op::GlobalAvgPool(input)))
    }

    // ---- fused loss kernels ----------------------------------------------

    /// Mean over elements of `(1/a) * log(cosh(a * (pred - target)))`,
    /// evaluated stably in `f64` (no overflow for `|a*t|` up to 1e4).
    pub fn logcosh_loss(&mut self, pred: TensorId, target: TensorId, scale: f64) -> Result<TensorId> {
        let vp = &self.nodes[pred.0].value;
        let vt = &self.nodes[target.0].value;
        if vp.shape() != vt.shape() {
            return Err(Error::ShapeMismatch {
                op: "logcosh_loss",
                lhs: vp.shape().to_vec(),
                rhs: vt.shape().to_vec(),
            });
        }
        if !(scale > 0.0) {
            return Err(Error::invalid("logcosh_loss", "scale must be positive"));
        }
        let mut sum = 0.0f64;
        for (&p, &t) in vp.data().iter().zip(vt.data()) {
            let u = scale * (p as f64 - t as f64);
            // log(cosh(u)) = |u| + log1p(exp(-2|u|)) - log(2)
            sum += (u.abs() + (-2.0 * u.abs()).exp().ln_1p() - std::f64::consts::LN_2) / scale;
        }
        let m = sum / vp.len() as f64;
        let out = Tensor::scalar(m as f32);
        self.check_finite("logcosh_loss", &out)?;
        let rg = self.nodes[pred.0].requires_grad || self.nodes[target.0].requires_grad;
        Ok(self.push_op(
            out,
            rg,
            Some(m),
            Op::LogCosh {
                pred,
                target,
                scale,
            },
        ))
    }

    /// Mean windowed structural similarity between two `[H, W, C]` tensors,
    /// with local statistics taken over `window` at valid positions.
    /// Scalar in `[-1, 1]`; differentiable with respect to both inputs.
    pub fn ssim(
        &mut self,
        x: TensorId,
        y: TensorId,
        window: &Window2d,
        c1: f64,
        c2: f64,
    ) -> Result<TensorId> {
        let vx = &self.nodes[x.0].value;
        let vy = &self.nodes[y.0].value;
        if vx.shape() != vy.shape() {
            return Err(Error::ShapeMismatch {
                op: "ssim",
                lhs: vx.shape().to_vec(),
                rhs: vy.shape().to_vec(),
            });
        }
        let [h, w, c] = dims3("ssim", vx)?;
        let k = window.size;
        if h < k || w < k {
            return Err(Error::invalid(
                "ssim",
                format!("{h}x{w} image smaller than {k}x{k} window"),
            ));
        }
        let mut total = 0.0f64;
        let mut count = 0usize;
        ssim_windows(vx.data(), vy.data(), h, w, c, window, c1, c2, |stats| {
            total += stats.map;
            count += 1;
        });
        let m = total / count as f64;
        let out = Tensor::scalar(m as f32);
        self.check_finite("ssim", &out)?;
        let rg = self.nodes[x.0].requires_grad || self.nodes[y.0].requires_grad;
        Ok(self.push_op(
            out,
            rg,
            Some(m),
            Op::Ssim {
                x,
                y,
                window: window.clone(),
                c1,
                c2,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates `grad` on every node with
    /// `requires_grad` (zero where the loss does not depend on the node);
    /// gradients accumulate additively across fan-out.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::invalid(
                "backward",
                "graph already swept; build a fresh graph per step",
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        self.backward_done = true;
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g.data_mut()[0] = 1.0;
        }
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].grad.is_none() {
                continue;
            }
            self.dispatch_backward(id)?;
        }
        for node in &self.nodes {
            if let Some(g) = &node.grad {
                if !g.all_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let g = self.nodes[id.0]
            .grad
            .as_mut()
            .expect("grad allocated before sweep");
        for (gi, &ci) in g.data_mut().iter_mut().zip(contrib) {
            *gi += ci as f32;
        }
    }

    /// Accumulate into a broadcast operand: if the operand is scalar but the
    /// incoming gradient is not, contributions are summed.
    fn add_grad_broadcast(&mut self, id: TensorId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        if self.nodes[id.0].value.is_scalar() && contrib.len() > 1 {
            let s: f64 = contrib.iter().sum();
            self.add_grad(id, &[s]);
        } else {
            self.add_grad(id, contrib);
        }
    }

    fn grad_out(&self, id: usize) -> Vec<f64> {
        self.nodes[id]
            .grad
            .as_ref()
            .expect("node has grad during sweep")
            .data()
            .iter()
            .map(|&g| g as f64)
            .collect()
    }

    fn values(&self, id: TensorId) -> &[f32] {
        self.nodes[id.0].value.data()
    }

    fn dispatch_backward(&mut self, id: usize) -> Result<()> {
        // Ops are matched by moving cheap copies of the ids out of the node;
        // aux buffers (argmax, probs) are cloned only for the ops that carry
        // them.
        let go = self.grad_out(id);
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad_broadcast(a, &go);
                self.add_grad_broadcast(b, &go);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad_broadcast(a, &go);
                let neg: Vec<f64> = go.iter().map(|g| -g).collect();
                self.add_grad_broadcast(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = self.values(a);
                let vb = self.values(b);
                let da: Vec<f64> = if vb.len() == go.len() {
                    go.iter().zip(vb).map(|(g, &y)| g * y as f64).collect()
                } else {
                    go.iter().map(|g| g * vb[0] as f64).collect()
                };
                let db: Vec<f64> = if va.len() == go.len() {
                    go.iter().zip(va).map(|(g, &x)| g * x as f64).collect()
                } else {
                    go.iter().map(|g| g * va[0] as f64).collect()
                };
                self.add_grad_broadcast(a, &da);
                self.add_grad_broadcast(b, &db);
            }
            Op::ScalarMul(a, c) => {
                let (a, c) = (*a, *c as f64);
                let da: Vec<f64> = go.iter().map(|g| g * c).collect();
                self.add_grad(a, &da);
            }
            Op::Abs(a) => {
                let a = *a;
                let va = self.values(a);
                let da: Vec<f64> = go
                    .iter()
                    .zip(va)
                    .map(|(g, &x)| g * (x as f64).signum() * if x == 0.0 { 0.0 } else { 1.0 })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Exp(a) => {
                let a = *a;
                let vy = self.values(TensorId(id));
                let da: Vec<f64> = go.iter().zip(vy).map(|(g, &y)| g * y as f64).collect();
                self.add_grad(a, &da);
            }
            Op::Log(a) => {
                let a = *a;
                let va = self.values(a);
                let da: Vec<f64> = go.iter().zip(va).map(|(g, &x)| g / x as f64).collect();
                self.add_grad(a, &da);
            }
            Op::Relu(a) => {
                let a = *a;
                let va = self.values(a);
                let da: Vec<f64> = go
                    .iter()
                    .zip(va)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let vy = self.values(TensorId(id));
                let da: Vec<f64> = go
                    .iter()
                    .zip(vy)
                    .map(|(g, &y)| g * y as f64 * (1.0 - y as f64))
                    .collect();
                self.add_grad(a, &da);
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.len() as f64;
                let da = vec![go[0] / n; n as usize];
                self.add_grad(a, &da);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                let (input, kernel, bias, padding) = (*input, *kernel, *bias, *padding);
                self.conv2d_backward(id, input, kernel, bias, padding, &go);
            }
            Op::MaxPool2 { input, argmax } => {
                let input = *input;
                let argmax = argmax.clone();
                let n = self.nodes[input.0].value.len();
                let mut da = vec![0.0f64; n];
                for (o, &src) in argmax.iter().enumerate() {
                    da[src as usize] += go[o];
                }
                self.add_grad(input, &da);
            }
            Op::Upsample2(a) => {
                let a = *a;
                let [h, w, c] = dims3("upsample_nearest2", &self.nodes[a.0].value)?;
                let ow = 2 * w;
                let mut da = vec![0.0f64; h * w * c];
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            let mut s = 0.0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    s += go[((2 * y + dy) * ow + 2 * x + dx) * c + ch];
                                }
                            }
                            da[(y * w + x) * c + ch] = s;
                        }
                    }
                }
                self.add_grad(a, &da);
            }
            Op::ConcatChannels(a, b) => {
                let (a, b) = (*a, *b);
                let ca = self.nodes[a.0].value.shape()[2];
                let cb = self.nodes[b.0].value.shape()[2];
                let c = ca + cb;
                let pixels = go.len() / c;
                let mut da = vec![0.0f64; pixels * ca];
                let mut db = vec![0.0f64; pixels * cb];
                for p in 0..pixels {
                    da[p * ca..(p + 1) * ca].copy_from_slice(&go[p * c..p * c + ca]);
                    db[p * cb..(p + 1) * cb].copy_from_slice(&go[p * c + ca..(p + 1) * c]);
                }
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Dense { x, weight, bias } => {
                let (x, weight, bias) = (*x, *weight, *bias);
                let vx: Vec<f64> = self.values(x).iter().map(|&v| v as f64).collect();
                let vw: Vec<f64> = self.values(weight).iter().map(|&v| v as f64).collect();
                let n = vx.len();
                let m = go.len();
                let mut dx = vec![0.0f64; n];
                let mut dw = vec![0.0f64; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i] += vw[i * m + j] * go[j];
                        dw[i * m + j] = vx[i] * go[j];
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(weight, &dw);
                self.add_grad(bias, &go);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                probs,
            } => {
                let logits = *logits;
                let label = *label;
                let g = go[0];
                let da: Vec<f64> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| g * (p as f64 - if i == label { 1.0 } else { 0.0 }))
                    .collect();
                self.add_grad(logits, &da);
            }
            Op::GlobalAvgPool(a) => {
                let a = *a;
                let [h, w, c] = dims3("global_avg_pool", &self.nodes[a.0].value)?;
                let inv = 1.0 / (h * w) as f64;
                let mut da = vec![0.0f64; h * w * c];
                for p in 0..h * w {
                    for ch in 0..c {
                        da[p * c + ch] = go[ch] * inv;
                    }
                }
                self.add_grad(a, &da);
            }
            Op::LogCosh {
                pred,
                target,
                scale,
            } => {
                let (pred, target, scale) = (*pred, *target, *scale);
                let vp = self.values(pred);
                let vt = self.values(target);
                let n = vp.len() as f64;
                let g = go[0];
                let mut dp = vec![0.0f64; vp.len()];
                let mut dt = vec![0.0f64; vp.len()];
                for (i, (&p, &t)) in vp.iter().zip(vt).enumerate() {
                    // d/dt of (1/a) log cosh(a t) is tanh(a t)
                    let d = (scale * (p as f64 - t as f64)).tanh() * g / n;
                    dp[i] = d;
                    dt[i] = -d;
                }
                self.add_grad(pred, &dp);
                self.add_grad(target, &dt);
            }
            Op::Ssim { x, y, window, c1, c2 } => {
                let (x, y) = (*x, *y);
                let window = window.clone();
                let (c1, c2) = (*c1, *c2);
                self.ssim_backward(x, y, &window, c1, c2, go[0]);
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &mut self,
        out_id: usize,
        input: TensorId,
        kernel: TensorId,
        bias: TensorId,
        padding: Padding,
        go: &[f64],
    ) {
        let vi = &self.nodes[input.0].value;
        let vk = &self.nodes[kernel.0].value;
        let [h, w, cin] = dims3("conv2d", vi).expect("validated at forward");
        let (kh, kw, cout) = (vk.shape()[0], vk.shape()[1], vk.shape()[3]);
        let (pad_y, pad_x, oh, ow) = match padding {
            Padding::SameZero => ((kh - 1) / 2, (kw - 1) / 2, h, w),
            Padding::Valid => (0, 0, h - kh + 1, w - kw + 1),
        };
        let idata: Vec<f64> = vi.data().iter().map(|&v| v as f64).collect();
        let kdata: Vec<f64> = vk.data().iter().map(|&v| v as f64).collect();
        let need_input = self.nodes[input.0].requires_grad;
        let need_kernel = self.nodes[kernel.0].requires_grad;
        let need_bias = self.nodes[bias.0].requires_grad;

        let mut dinput = vec![0.0f64; if need_input { idata.len() } else { 0 }];
        let mut dkernel = vec![0.0f64; if need_kernel { kdata.len() } else { 0 }];
        let mut dbias = vec![0.0f64; if need_bias { cout } else { 0 }];

        for oy in 0..oh {
            for ox in 0..ow {
                let gpx = &go[(oy * ow + ox) * cout..][..cout];
                if need_bias {
                    for co in 0..cout {
                        dbias[co] += gpx[co];
                    }
                }
                for ky in 0..kh {
                    let iy = oy + ky;
                    if iy < pad_y || iy - pad_y >= h {
                        continue;
                    }
                    let iy = iy - pad_y;
                    for kx in 0..kw {
                        let ix = ox + kx;
                        if ix < pad_x || ix - pad_x >= w {
                            continue;
                        }
                        let ix = ix - pad_x;
                        let ibase = (iy * w + ix) * cin;
                        let kbase = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let krow = &kdata[kbase + ci * cout..][..cout];
                            if need_input {
                                let mut s = 0.0;
                                for co in 0..cout {
                                    s += krow[co] * gpx[co];
                                }
                                dinput[ibase + ci] += s;
                            }
                            if need_kernel {
                                let v = idata[ibase + ci];
                                let drow = &mut dkernel[kbase + ci * cout..][..cout];
                                for co in 0..cout {
                                    drow[co] += v * gpx[co];
                                }
                            }
                        }
                    }
                }
            }
        }
        let _ = out_id;
        if need_input {
            self.add_grad(input, &dinput);
        }
        if need_kernel {
            self.add_grad(kernel, &dkernel);
        }
        if need_bias {
            self.add_grad(bias, &dbias);
        }
    }

    fn ssim_backward(
        &mut self,
        x: TensorId,
        y: TensorId,
        window: &Window2d,
        c1: f64,
        c2: f64,
        g: f64,
    ) {
        let vx = &self.nodes[x.0].value;
        let vy = &self.nodes[y.0].value;
        let [h, w, c] = dims3("ssim", vx).expect("validated at forward");
        let k = window.size;
        let (oh, ow) = (h - k + 1, w - k + 1);
        let scale = g / (oh * ow * c) as f64;
        let xd = vx.data().to_vec();
        let yd = vy.data().to_vec();
        let mut dx = vec![0.0f64; xd.len()];
        let mut dy = vec![0.0f64; yd.len()];
        {
            let weights = window.weights();
            for ch in 0..c {
                for u in 0..oh {
                    for v in 0..ow {
                        let s = window_stats(&xd, &yd, h, w, c, ch, u, v, k, weights, c1, c2);
                        // Partials of the per-window score through the four
                        // factors of (a1*a2)/(b1*b2).
                        let inv_bb = 1.0 / (s.b1 * s.b2);
                        let d_a1 = s.a2 * inv_bb;
                        let d_a2 = s.a1 * inv_bb;
                        let d_b1 = -s.map / s.b1;
                        let d_b2 = -s.map / s.b2;
                        let gx_const = 2.0 * (s.mu_y * d_a1 + s.mu_x * d_b1);
                        let gy_const = 2.0 * (s.mu_x * d_a1 + s.mu_y * d_b1);
                        for i in 0..k {
                            for j in 0..k {
                                let wgt = weights[i * k + j];
                                let idx = ((u + i) * w + (v + j)) * c + ch;
                                let xv = xd[idx] as f64;
                                let yv = yd[idx] as f64;
                                dx[idx] += scale
                                    * wgt
                                    * (gx_const
                                        + 2.0 * d_a2 * (yv - s.mu_y)
                                        + 2.0 * d_b2 * (xv - s.mu_x));
                                dy[idx] += scale
                                    * wgt
                                    * (gy_const
                                        + 2.0 * d_a2 * (xv - s.mu_x)
                                        + 2.0 * d_b2 * (yv - s.mu_y));
                            }
                        }
                    }
                }
            }
        }
        self.add_grad(x, &dx);
        self.add_grad(y, &dy);
    }
}

fn dims3(op: &'static str, t: &Tensor) -> Result<[usize; 3]> {
    match t.shape() {
        [h, w, c] => Ok([*h, *w, *c]),
        other => Err(Error::invalid(
            op,
            format!("expected [H, W, C] tensor, got {other:?}"),
        )),
    }
}

struct WindowStats {
    mu_x: f64,
    mu_y: f64,
    a1: f64,
    a2: f64,
    b1: f64,
    b2: f64,
    map: f64,
}

#[allow(clippy::too_many_arguments)]
fn window_stats(
    xd: &[f32],
    yd: &[f32],
    _h: usize,
    w: usize,
    c: usize,
    ch: usize,
    u: usize,
    v: usize,
    k: usize,
    weights: &[f64],
    c1: f64,
    c2: f64,
) -> WindowStats {
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let wgt = weights[i * k + j];
            let idx = ((u + i) * w + (v + j)) * c + ch;
            let xv = xd[idx] as f64;
            let yv = yd[idx] as f64;
            mx += wgt * xv;
            my += wgt * yv;
            sxx += wgt * xv * xv;
            syy += wgt * yv * yv;
            sxy += wgt * xv * yv;
        }
    }
    let var_x = sxx - mx * mx;
    let var_y = syy - my * my;
    let cov = sxy - mx * my;
    let a1 = 2.0 * mx * my + c1;
    let a2 = 2.0 * cov + c2;
    let b1 = mx * mx + my * my + c1;
    let b2 = var_x + var_y + c2;
    WindowStats {
        mu_x: mx,
        mu_y: my,
        a1,
        a2,
        b1,
        b2,
        map: (a1 * a2) / (b1 * b2),
    }
}

#[allow(clippy::too_many_arguments)]
fn ssim_windows(
    xd: &[f32],
    yd: &[f32],
    h: usize,
    w: usize,
    c: usize,
    window: &Window2d,
    c1: f64,
    c2: f64,
    mut visit: impl FnMut(&WindowStats),
) {
    let k = window.size;
    let weights = window.weights();
    for ch in 0..c {
        for u in 0..=h - k {
            for v in 0..=w - k {
                let stats = window_stats(xd, yd, h, w, c, ch, u, v, k, weights, c1, c2);
                visit(&stats);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(a).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mean_of_constant_tensor() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(vec![3, 3], 5.0));
        let m = g.mean(a).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 5.0);
    }

    #[test]
    fn binary_scalar_broadcast() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = g.constant(Tensor::scalar(10.0));
        let c = g.mul(a, s).unwrap();
        assert_eq!(g.value(c).data(), &[10.0, 20.0, 30.0]);
        let d = g.add(s, a).unwrap();
        assert_eq!(g.value(d).data(), &[11.0, 12.0, 13.0]);
    }

    #[test]
    fn binary_shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(g.log(a).is_err());
    }

    #[test]
    fn exp_overflow_is_hard_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1e5));
        assert!(matches!(g.exp(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn conv2d_scalar_product() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1], &[2.0]));
        let k = g.constant(t(&[1, 1, 1, 1], &[3.0]));
        let b = g.constant(Tensor::from_vec(vec![0.0]));
        let y = g.conv2d(x, k, b, Padding::SameZero).unwrap();
        assert_eq!(g.value(y).data(), &[6.0]);
    }

    #[test]
    fn conv2d_delta_kernel_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..25).map(|i| i as f32 * 0.13 - 1.0).collect();
        let x = g.constant(t(&[5, 5, 1], &data));
        let mut kdata = vec![0.0f32; 9];
        kdata[4] = 1.0;
        let k = g.constant(t(&[3, 3, 1, 1], &kdata));
        let b = g.constant(Tensor::from_vec(vec![0.0]));
        let y = g.conv2d(x, k, b, Padding::SameZero).unwrap();
        assert_eq!(g.value(y).data(), data.as_slice());
    }

    /// Independent oracle: direct quadruple-loop cross-correlation.
    fn conv_oracle(
        input: &[f32],
        h: usize,
        w: usize,
        cin: usize,
        kernel: &[f32],
        kh: usize,
        kw: usize,
        cout: usize,
        bias: &[f32],
        same: bool,
    ) -> Vec<f32> {
        let (pad_y, pad_x, oh, ow) = if same {
            ((kh - 1) / 2, (kw - 1) / 2, h, w)
        } else {
            (0, 0, h - kh + 1, w - kw + 1)
        };
        let mut out = vec![0.0f32; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = bias[co] as f64;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy as isize + ky as isize - pad_y as isize;
                            let ix = ox as isize + kx as isize - pad_x as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                acc += input[((iy as usize) * w + ix as usize) * cin + ci] as f64
                                    * kernel[((ky * kw + kx) * cin + ci) * cout + co] as f64;
                            }
                        }
                    }
                    out[(oy * ow + ox) * cout + co] = acc as f32;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_all_ones_matches_direct_loop_oracle() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, 3, 1], 1.0));
        let k = g.constant(Tensor::full(vec![3, 3, 1, 1], 1.0));
        let b = g.constant(Tensor::from_vec(vec![0.0]));
        let y = g.conv2d(x, k, b, Padding::SameZero).unwrap();
        let expected = conv_oracle(
            &[1.0; 9],
            3,
            3,
            1,
            &[1.0; 9],
            3,
            3,
            1,
            &[0.0],
            true,
        );
        assert_eq!(g.value(y).data(), expected.as_slice());
        // center 9, edge midpoints 6, corners 4
        assert_eq!(
            g.value(y).data(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv2d_random_matches_oracle_both_paddings() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (h, w, cin, cout) = (6, 5, 2, 3);
        let input: Vec<f32> = (0..h * w * cin).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernel: Vec<f32> = (0..9 * cin * cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for same in [true, false] {
            let mut g = Graph::new();
            let x = g.constant(t(&[h, w, cin], &input));
            let k = g.constant(t(&[3, 3, cin, cout], &kernel));
            let b = g.constant(Tensor::from_vec(bias.clone()));
            let pad = if same { Padding::SameZero } else { Padding::Valid };
            let y = g.conv2d(x, k, b, pad).unwrap();
            let expected = conv_oracle(&input, h, w, cin, &kernel, 3, 3, cout, &bias, same);
            for (a, e) in g.value(y).data().iter().zip(&expected) {
                assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_channel_mismatch_and_big_valid_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![4, 4, 2], 1.0));
        let k = g.constant(Tensor::full(vec![3, 3, 3, 1], 1.0));
        let b = g.constant(Tensor::from_vec(vec![0.0]));
        assert!(g.conv2d(x, k, b, Padding::SameZero).is_err());
        let k5 = g.constant(Tensor::full(vec![5, 5, 2, 1], 1.0));
        assert!(g.conv2d(x, k5, b, Padding::Valid).is_err());
        let keven = g.constant(Tensor::full(vec![2, 3, 2, 1], 1.0));
        assert!(g.conv2d(x, keven, b, Padding::SameZero).is_err());
    }

    #[test]
    fn maxpool_single_block() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn maxpool_sequential_values_enumerated_by_hand() {
        // 4x4 row-major 0..16 pools to the bottom-right of each block.
        let mut g = Graph::new();
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let x = g.constant(t(&[4, 4, 1], &data));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 1]);
        assert_eq!(g.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn maxpool_constant_halves_resolution() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![6, 4, 2], 0.7));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, 4, 1], 0.0));
        assert!(g.maxpool2(x).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_scan() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 2, 1], &[1.0, 1.0, 1.0, 1.0]));
        let y = g.maxpool2(x).unwrap();
        let m = g.mean(y).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_pixels() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1], &[7.0]));
        let y = g.upsample_nearest2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 1]);
        assert_eq!(g.value(y).data(), &[7.0; 4]);
    }

    #[test]
    fn upsample_then_maxpool_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 0.25).collect();
        let x = g.constant(t(&[2, 2, 3], &data));
        let up = g.upsample_nearest2(x).unwrap();
        let back = g.maxpool2(up).unwrap();
        assert_eq!(g.value(back).data(), data.as_slice());
    }

    #[test]
    fn upsample_backward_of_sum_gives_four_per_pixel() {
        let mut g = Graph::new();
        let x = g.variable(t(&[2, 2, 1], &[0.1, 0.2, 0.3, 0.4]));
        let y = g.upsample_nearest2(x).unwrap();
        let m = g.mean(y).unwrap();
        let sum = g.scalar_mul(m, 16.0).unwrap(); // mean * element count = sum
        g.backward(sum).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn concat_orders_channels() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(vec![2, 2, 1], 1.0));
        let b = g.constant(Tensor::full(vec![2, 2, 1], 2.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(vec![2, 2, 1], 1.0));
        let b = g.constant(Tensor::full(vec![2, 3, 1], 2.0));
        assert!(g.concat_channels(a, b).is_err());
    }

    #[test]
    fn dense_identity_and_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);

        let x2 = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
        let w2 = g.constant(t(&[2, 1], &[2.0, 3.0]));
        let b2 = g.constant(Tensor::from_vec(vec![1.0]));
        let y2 = g.dense(x2, w2, b2).unwrap();
        assert_eq!(g.value(y2).data(), &[6.0]);
    }

    #[test]
    fn dense_rejects_dimension_mismatch() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let w = g.constant(t(&[2, 2], &[1.0; 4]));
        let b = g.constant(Tensor::from_vec(vec![0.0, 0.0]));
        assert!(g.dense(x, w, b).is_err());
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_vec(vec![0.0; 4]));
        for label in 0..4 {
            let loss = g.softmax_cross_entropy(l, label).unwrap();
            let v = g.scalar_value(loss).unwrap();
            assert!((v - 4.0f64.ln()).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn softmax_ce_peaked_logits_match_high_precision_oracle() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_vec(vec![10.0, 0.0, 0.0, 0.0]));
        let loss = g.softmax_cross_entropy(l, 0).unwrap();
        let expected = (1.0f64 + 3.0 * (-10.0f64).exp()).ln();
        let v = g.scalar_value(loss).unwrap();
        assert!((v - expected).abs() / expected < 1e-3, "{v} vs {expected}");
    }

    #[test]
    fn softmax_ce_shift_invariant() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.5]));
        let shifted = g.constant(Tensor::from_vec(vec![100.3, 99.8 - 1.0, 102.0, 100.5]));
        let a = g.softmax_cross_entropy(l, 2).unwrap();
        let b = g.softmax_cross_entropy(shifted, 2).unwrap();
        let (va, vb) = (g.scalar_value(a).unwrap(), g.scalar_value(b).unwrap());
        assert!((va - vb).abs() < 1e-5, "{va} vs {vb}");
    }

    #[test]
    fn softmax_ce_rejects_bad_label_and_k1() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::from_vec(vec![0.0; 4]));
        assert!(g.softmax_cross_entropy(l, 4).is_err());
        let one = g.constant(Tensor::from_vec(vec![0.0]));
        assert!(g.softmax_cross_entropy(one, 0).is_err());
    }

    #[test]
    fn global_avg_pool_reduces_spatial_dims() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 2], &[1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]));
        let y = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5, 25.0]);
    }

    #[test]
    fn backward_mean_gives_uniform_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let m = g.mean(x).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn backward_quadratic_gives_two_x() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let m = g.mean(sq).unwrap();
        let sum = g.scalar_mul(m, 2.0).unwrap();
        g.backward(sum).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_leaves_unused_variable_with_zero_grad() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let unused = g.variable(Tensor::from_vec(vec![5.0, 5.0, 5.0]));
        let m = g.mean(x).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_over_fanout() {
        // loss = mean(x + x) so dl/dx = 2/n via two paths of 1/n each.
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let s = g.add(x, x).unwrap();
        let m = g.mean(s).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(1.0));
        let m = g.mean(x).unwrap();
        g.backward(m).unwrap();
        assert!(g.backward(m).is_err());
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(t(&[4, 4, 2], &(0..32).map(|i| (i as f32).sin()).collect::<Vec<_>>()));
            let k = g.constant(t(&[3, 3, 2, 2], &(0..36).map(|i| (i as f32).cos()).collect::<Vec<_>>()));
            let b = g.constant(Tensor::from_vec(vec![0.1, -0.2]));
            let c = g.conv2d(x, k, b, Padding::SameZero).unwrap();
            let r = g.relu(c).unwrap();
            let p = g.maxpool2(r).unwrap();
            let m = g.mean(p).unwrap();
            g.value(m).data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gaussian_window_normalized() {
        let w = Window2d::gaussian(11, 1.5).unwrap();
        let sum: f64 = w.weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(Window2d::gaussian(4, 1.5).is_err());
    }
}
