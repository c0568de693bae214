//! Central finite differences, the reference used to check analytic gradients.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Central-difference gradient of the scalar function `f` at the leaf `x`.
///
/// `x` is perturbed in place one coordinate at a time and restored
/// afterwards, so `f` may either use its argument or capture `x` indirectly
/// (e.g. a model parameter). `f` reports in f64 so an oracle can evaluate
/// in double precision from the perturbed f32 inputs.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_at(f, x, &all, h)?;
    Tensor::from_vec(g.into_iter().map(|v| v as f32).collect(), x.shape())
}

/// Central differences for the listed coordinates of `x` only.
pub fn finite_diff_at<F>(mut f: F, x: &Tensor, coords: &[usize], h: f32) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff",
            msg: format!("step {h} must be positive"),
        });
    }
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = x.data()[i];
        x.update_data(|d| d[i] = orig + h)?;
        let up = f(x)?;
        x.update_data(|d| d[i] = orig - h)?;
        let down = f(x)?;
        x.update_data(|d| d[i] = orig)?;
        // the effective step is what f32 actually represents
        let step = (orig + h) as f64 - (orig - h) as f64;
        out.push((up - down) / step);
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor avoids dividing by ~0 when
/// both values vanish.
pub fn relative_error(a: f32, b: f32, floor: f32) -> f32 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
