//! Central finite-difference utilities. The backward passes in this crate
//! are hand-derived, so every one of them is validated against these
//! numerical derivatives by the unit and acceptance suites.

use crate::error::Result;
use crate::keylock::Key;
use crate::model::{forward_backward, Model};
use crate::tensor::Tensor;

/// Full finite-difference gradient of a scalar objective with respect to the
/// coordinates of `base`. `loss` is evaluated with a perturbed copy
/// substituted for `base`; central differences with step `h`.
pub fn fd_grad_tensor(
    base: &Tensor,
    h: f64,
    mut loss: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        let v = base.get(i);
        probe.set(i, v + h)?;
        let up = loss(&probe)?;
        probe.set(i, v - h)?;
        let down = loss(&probe)?;
        probe.set(i, v)?;
        grad[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(base.shape().to_vec(), grad)
}

/// Worst relative error of a whole-model analytic gradient bundle against
/// finite differences of the loss, over every registry parameter.
pub fn model_grad_max_err(
    model: &Model,
    x: &Tensor,
    y: &Tensor,
    key: Option<&Key>,
    h: f64,
) -> Result<f64> {
    let out = forward_backward(model, x, y, key)?;
    let mut worst: f64 = 0.0;
    for info in model.registry() {
        let analytic = out
            .grads
            .get(&info.name)
            .expect("bundle covers the registry");
        let base = model.param(&info.name)?.clone();
        let fd = fd_grad_tensor(&base, h, |t| {
            let mut probe = model.clone();
            *probe.param_mut(&info.name)? = t.clone();
            Ok(forward_backward(&probe, x, y, key)?.loss)
        })?;
        worst = worst.max(rel_err(analytic, &fd));
    }
    Ok(worst)
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate: max-abs difference scaled by the larger of the two magnitudes.
/// The 1e-6 floor keeps exactly-zero gradients comparable: central
/// differences of a flat direction still carry ~1e-12 of rounding noise
/// (e.g. a pre-norm bias, which the batch mean absorbs).
pub fn rel_err(analytic: &Tensor, fd: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), fd.shape(), "gradient shape mismatch");
    let denom = analytic.max_abs().max(fd.max_abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    for (a, f) in analytic.data().iter().zip(fd.data()) {
        worst = worst.max((a - f).abs());
    }
    worst / denom
}
