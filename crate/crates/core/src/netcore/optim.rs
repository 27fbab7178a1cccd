use super::dense::ParamStore;
use crate::error::{Error, Result};

/// `params ← params − lr · grads`, where `grads` is already the mini-batch mean.
///
/// The update is all-or-nothing: a non-finite gradient anywhere rejects the step.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::InvalidParameter(format!("learning rate {lr}")));
    }
    for (name, g) in grads.iter() {
        let p = params.get(name).ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("`{name}`: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
    }
    for (name, g) in grads.iter() {
        if let Some(p) = params.get_mut(name) {
            p.axpy(-lr, g);
        }
    }
    Ok(())
}

/// Step-decay schedule: `base_lr · decay^⌊iter / step_size⌋`.
pub fn step_lr(base_lr: f64, iter: usize, step_size: usize, decay: f64) -> f64 {
    let step_size = step_size.max(1);
    base_lr * decay.powi((iter / step_size) as i32)
}

/// Rescales `grads` in place so that their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.as_slice().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for v in g.as_mut_slice() {
                *v *= s;
            }
        }
    }
    norm
}
