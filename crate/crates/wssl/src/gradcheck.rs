//! Central-finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::tensor::Tensor;

/// Compare the analytic gradient of a scalar-valued graph against central
/// finite differences over every coordinate of every input.
///
/// `builder` must deterministically construct the graph from the given
/// inputs and return the scalar output node; non-determinism is detected by
/// evaluating twice and comparing the result bitwise. Returns the maximum of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// Callers probing piecewise ops (relu, max pooling) are responsible for
/// keeping inputs away from the decision boundaries relative to `eps`.
pub fn grad_check<F>(builder: F, inputs: &[Tensor], eps: f32) -> Result<f32>
where
    F: Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }

    let eval = |tensors: &[Tensor], want_grads: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = tensors
            .iter()
            .map(|t| {
                if want_grads {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = builder(&mut g, &ids)?;
        if !g.value(out).is_scalar() {
            return Err(Error::invalid(
                "grad_check",
                format!("builder output must be scalar, got {:?}", g.value(out).shape()),
            ));
        }
        let value = g.scalar_value(out)?;
        if want_grads {
            g.backward(out)?;
            let grads = ids
                .iter()
                .map(|&id| g.grad(id).cloned().expect("variable grad present"))
                .collect();
            Ok((value, Some(grads)))
        } else {
            Ok((value, None))
        }
    };

    let (base, grads) = eval(inputs, true)?;
    let grads = grads.expect("grads requested");
    let (replay, _) = eval(inputs, false)?;
    if base.to_bits() != replay.to_bits() {
        return Err(Error::invalid(
            "grad_check",
            "builder is not deterministic: repeated evaluation differs",
        ));
    }

    let mut max_rel = 0.0f32;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ci in 0..input.len() {
            let orig = input.data()[ci];
            let plus = orig + eps;
            let minus = orig - eps;

            work[ti].data_mut()[ci] = plus;
            let (f_plus, _) = eval(&work, false)?;
            work[ti].data_mut()[ci] = minus;
            let (f_minus, _) = eval(&work, false)?;
            work[ti].data_mut()[ci] = orig;

            // Use the actual realized step: `orig +/- eps` round to f32.
            let denom_step = plus as f64 - minus as f64;
            let numeric = (f_plus - f_minus) / denom_step;
            let analytic = grads[ti].data()[ci] as f64;
            let scale = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = ((analytic - numeric).abs() / scale) as f32;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
