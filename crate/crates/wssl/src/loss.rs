//! Reconstruction losses and evaluation metrics.
//!
//! The downstream inpainting objective is a convex combination of a smooth
//! reconstruction term (log-cosh of the residual) and a perceptual term
//! (one minus windowed structural similarity), weighted `alpha` to
//! `1 - alpha` with `alpha = 0.84` by default. Pretext classification losses
//! combine as a task-weighted sum. All loss variants are differentiable
//! through [`crate::graph`]; PSNR is evaluation-only.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId, Window2d};
use crate::image::{Image, TaskKind};

/// Structural-similarity constants and window.
///
/// `c1 = (k1 * L)^2` and `c2 = (k2 * L)^2` stabilize the luminance and
/// contrast terms; the window is Gaussian and normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub window_size: usize,
    pub sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            window_size: 11,
            sigma: 1.5,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn window(&self) -> Result<Window2d> {
        if self.c1() <= 0.0 || self.c2() <= 0.0 {
            return Err(Error::invalid("ssim", "stabilizers c1 and c2 must be positive"));
        }
        Window2d::gaussian(self.window_size, self.sigma)
    }
}

/// Scale parameter of the log-cosh reconstruction loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LogCoshParams {
    pub a: f64,
}

impl Default for LogCoshParams {
    fn default() -> Self {
        Self { a: 1.0 }
    }
}

/// Mixing weight of the combined loss: `alpha` on log-cosh, `1 - alpha` on
/// the structural-similarity term.
#[derive(Debug, Clone, PartialEq)]
pub struct WsslLossParams {
    pub alpha: f64,
}

impl Default for WsslLossParams {
    fn default() -> Self {
        Self { alpha: 0.84 }
    }
}

impl WsslLossParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(
                "wssl_loss",
                format!("alpha must be in [0, 1], got {}", self.alpha),
            ));
        }
        Ok(())
    }
}

/// Per-task loss weights; each in `[0, 1]`, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskWeights {
    weights: BTreeMap<TaskKind, f64>,
}

impl TaskWeights {
    pub fn new(weights: BTreeMap<TaskKind, f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("task_weights", "at least one task required"));
        }
        for (task, &w) in &weights {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::invalid(
                    "task_weights",
                    format!("weight for {task} must be in [0, 1], got {w}"),
                ));
            }
        }
        let sum: f64 = weights.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "task_weights",
                format!("weights must sum to 1, got {sum}"),
            ));
        }
        Ok(Self { weights })
    }

    pub fn single(task: TaskKind) -> Self {
        Self {
            weights: BTreeMap::from([(task, 1.0)]),
        }
    }

    /// Pair tasks with weights positionally; weights must sum to one.
    pub fn from_pairs(pairs: &[(TaskKind, f64)]) -> Result<Self> {
        let map: BTreeMap<TaskKind, f64> = pairs.iter().cloned().collect();
        if map.len() != pairs.len() {
            return Err(Error::invalid("task_weights", "duplicate task"));
        }
        Self::new(map)
    }

    pub fn get(&self, task: TaskKind) -> Option<f64> {
        self.weights.get(&task).copied()
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskKind> + '_ {
        self.weights.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskKind, f64)> + '_ {
        self.weights.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// All downstream loss parameters in one place.
#[derive(Debug, Clone, Default)]
pub struct LossParams {
    pub ssim: SsimParams,
    pub logcosh: LogCoshParams,
    pub wssl: WsslLossParams,
}

// ---- differentiable losses ---------------------------------------------------

/// Mean windowed structural similarity, in `[-1, 1]`.
pub fn ssim(g: &mut Graph, x: TensorId, y: TensorId, p: &SsimParams) -> Result<TensorId> {
    let window = p.window()?;
    g.ssim(x, y, &window, p.c1(), p.c2())
}

/// `1 - ssim(x, y)`; zero iff the windowed statistics agree everywhere.
pub fn loss_ssim(g: &mut Graph, x: TensorId, y: TensorId, p: &SsimParams) -> Result<TensorId> {
    let s = ssim(g, x, y, p)?;
    let one = g.constant(crate::tensor::Tensor::scalar(1.0));
    g.sub(one, s)
}

/// Mean of `(1/a) * log(cosh(a * (pred - target)))` over elements.
pub fn loss_logcosh(
    g: &mut Graph,
    pred: TensorId,
    target: TensorId,
    p: &LogCoshParams,
) -> Result<TensorId> {
    g.logcosh_loss(pred, target, p.a)
}

/// Combined reconstruction loss:
/// `alpha * loss_logcosh + (1 - alpha) * loss_ssim`.
///
/// The `alpha = 1` and `alpha = 0` endpoints reproduce the respective
/// component bit-exactly.
pub fn loss_wssl(
    g: &mut Graph,
    pred: TensorId,
    target: TensorId,
    ssim_p: &SsimParams,
    logcosh_p: &LogCoshParams,
    w: &WsslLossParams,
) -> Result<TensorId> {
    w.validate()?;
    let lc = loss_logcosh(g, pred, target, logcosh_p)?;
    let ls = loss_ssim(g, pred, target, ssim_p)?;
    let alpha = w.alpha as f32;
    let a_term = g.scalar_mul(lc, alpha)?;
    let b_term = g.scalar_mul(ls, 1.0 - alpha)?;
    g.add(a_term, b_term)
}

/// Task-weighted sum of per-task scalar losses. The key sets of `losses`
/// and `weights` must match exactly.
pub fn weighted_pretext_loss(
    g: &mut Graph,
    losses: &BTreeMap<TaskKind, TensorId>,
    weights: &TaskWeights,
) -> Result<TensorId> {
    let loss_keys: Vec<TaskKind> = losses.keys().copied().collect();
    let weight_keys: Vec<TaskKind> = weights.tasks().collect();
    if loss_keys != weight_keys {
        return Err(Error::invalid(
            "weighted_pretext_loss",
            format!("task sets differ: losses {loss_keys:?} vs weights {weight_keys:?}"),
        ));
    }
    let mut total: Option<TensorId> = None;
    for (task, weight) in weights.iter() {
        let term = g.scalar_mul(losses[&task], weight as f32)?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(total.expect("weights validated non-empty"))
}

// ---- evaluation metrics ---------------------------------------------------------

/// Structural similarity of two images as a plain number, repeatedly usable
/// for evaluation; routes through the same differentiable kernel.
pub fn ssim_value(x: &Image, y: &Image, p: &SsimParams) -> Result<f64> {
    let mut g = Graph::new();
    let xi = g.constant(x.to_tensor());
    let yi = g.constant(y.to_tensor());
    let s = ssim(&mut g, xi, yi, p)?;
    g.scalar_value(s)
}

/// Peak signal-to-noise ratio in decibels: `10 * log10(peak^2 / MSE)` with
/// the mean squared error accumulated in `f64`. Identical images return
/// `f64::INFINITY`.
pub fn psnr(x: &Image, y: &Image, peak: f64) -> Result<f64> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: vec![x.height(), x.width()],
            rhs: vec![y.height(), y.width()],
        });
    }
    if !(peak > 0.0) {
        return Err(Error::invalid("psnr", "peak must be positive"));
    }
    let mut sum = 0.0f64;
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let d = a as f64 - b as f64;
        sum += d * d;
    }
    let mse = sum / x.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}
