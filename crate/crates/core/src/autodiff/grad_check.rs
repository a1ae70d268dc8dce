//! Central-difference validation of reverse-mode gradients.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest guarded relative error over all coordinates:
    /// `|ad - fd| / max(|ad|, |fd|, 1)`.
    pub max_rel_err: f64,
    pub pass: bool,
    /// Coordinate that produced a NaN on either side, if any.
    pub nan_coord: Option<usize>,
}

/// Compare the reverse-mode gradient of a scalar-valued `f` at `x0` against
/// central differences with step `h`. Run in `f64` for meaningful tolerances.
pub fn grad_check<S, F>(f: F, x0: &[S], shape: &[usize], h: f64, tol: f64) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<Tensor<S>>,
{
    let x = Tensor::leaf(x0.to_vec(), shape, true)?;
    let loss = f(&x)?;
    loss.backward()?;
    let analytic: Vec<f64> = x.grad_or_zeros().iter().map(|v| v.as_f64()).collect();

    let probe = Tensor::leaf(x0.to_vec(), shape, false)?;
    let mut max_rel = 0.0f64;
    let mut nan_coord = None;
    for i in 0..x0.len() {
        let orig = x0[i];
        let hp = S::from_f64(h);

        probe.set_coord(i, orig + hp);
        let up = f(&probe)?.item().as_f64();
        probe.set_coord(i, orig - hp);
        let down = f(&probe)?.item().as_f64();
        probe.set_coord(i, orig);

        let fd = (up - down) / (2.0 * h);
        let ad = analytic[i];
        if !fd.is_finite() || !ad.is_finite() {
            nan_coord = Some(i);
            max_rel = f64::INFINITY;
            break;
        }
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        pass: nan_coord.is_none() && max_rel <= tol,
        nan_coord,
    })
}

impl<S: Scalar> Tensor<S> {
    /// Overwrite one coordinate; used by the finite-difference probe.
    pub fn set_coord(&self, idx: usize, v: S) {
        self.data_mut()[idx] = v;
    }
}
