//! Central finite-difference gradient checks.

use crate::error::TensorError;
use crate::tensor::{no_grad, Tensor};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between the reverse-mode gradient of `f` at `x`
/// and a central-difference estimate, over all coordinates of `x`.
pub fn gradient_check<F, E>(f: F, x: &Tensor) -> std::result::Result<f64, E>
where
    F: Fn(&Tensor) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    let leaf = Tensor::param(x.shape(), x.to_vec())?;
    f(&leaf)?.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);

    let _guard = no_grad();
    let base = x.to_vec();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus[i] += FD_STEP;
        let mut minus = base.clone();
        minus[i] -= FD_STEP;
        let fp = f(&Tensor::new(x.shape(), plus)?)?.item();
        let fm = f(&Tensor::new(x.shape(), minus)?)?.item();
        worst = worst.max(relative_error(a, (fp - fm) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}

/// Same check over every coordinate of a set of parameter leaves, which `f`
/// reads directly. Parameters are restored afterwards and their grads cleared.
pub fn gradient_check_params<F, E>(f: F, params: &[Tensor]) -> std::result::Result<f64, E>
where
    F: Fn() -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    params.iter().for_each(Tensor::zero_grad);
    f()?.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();
    params.iter().for_each(Tensor::zero_grad);

    let _guard = no_grad();
    let mut worst: f64 = 0.0;
    for (p, grads) in params.iter().zip(&analytic) {
        for (i, &a) in grads.iter().enumerate() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + FD_STEP;
            let fp = f()?.item();
            p.data_mut()[i] = orig - FD_STEP;
            let fm = f()?.item();
            p.data_mut()[i] = orig;
            worst = worst.max(relative_error(a, (fp - fm) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}
