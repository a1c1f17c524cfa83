//! Finite-difference gradient checking.
//!
//! These helpers compare analytic gradients from the graph against central
//! differences computed by re-evaluating the function with one element
//! nudged at a time. They exist for tests, which use them as an independent
//! oracle for every op's backward pass, but are exported because downstream
//! experiments occasionally want the same check on a full model.

use super::{Graph, Tensor};
use crate::error::{invalid, Result};

/// Check the gradient of `f` with respect to every element of every tensor
/// in `params`, returning the worst relative error.
///
/// The analytic pass tracks `params` on a fresh graph and runs backward; the
/// numeric pass evaluates `f` untracked with each element set to `x + h` and
/// `x - h` (the original bits are restored afterwards, so `params` are left
/// exactly as they were). The relative error of a pair `(a, n)` is
/// `|a - n| / max(|a|, |n|, 1e-3)`; the floor keeps tiny gradients from
/// blowing up the ratio.
pub fn finite_difference_check_params<F>(params: &[&Tensor], f: F, h: f64) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid!("step size must be positive and finite, got {h}"));
    }

    // Analytic gradients.
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        for p in params {
            p.zero_grad();
            g.track(p)?;
        }
        let loss = f()?;
        g.backward(&loss)?;
        params.iter().map(|p| p.grad_vec()).collect()
        // `g` drops here; params revert to plain value-only tensors.
    };

    let eval = || -> Result<f64> { f()?.item() };

    let mut worst = 0.0_f64;
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.numel() {
            let original = p.data()[i];
            p.set_element(i, original + h);
            let up = eval()?;
            p.set_element(i, original - h);
            let down = eval()?;
            p.set_element(i, original);

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Single-tensor convenience wrapper around
/// [`finite_difference_check_params`].
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    finite_difference_check_params(&[x], || f(x), h)
}
