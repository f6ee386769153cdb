//! Central finite-difference validation of tape gradients.
//!
//! The checker is the independent oracle for every differentiable op:
//! it never consults the backward rules it verifies, only repeated
//! forward evaluations.

use super::error::{NumericsError, Result};
use super::tape::Tape;
use super::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_coord: usize,
    pub coords: usize,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (abs {:.3e}) at coord {} of {}, tol {:.1e}",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.max_abs_err,
            self.worst_coord,
            self.coords,
            self.tol
        )
    }
}

/// Relative error with a floor so near-zero gradients compare on an
/// absolute scale instead of amplifying finite-difference noise.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let tape = Tape::new();
    let out = f(&tape, x)?;
    let v = out.item()?;
    if !v.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" });
    }
    Ok(v)
}

/// Compares the tape gradient of a scalar function against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, coordinate by coordinate.
pub fn grad_check<F>(f: &F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    assert!(h > 0.0, "step size must be positive");

    // Analytic gradient from the tape.
    let tape = Tape::new();
    let watched = tape.watch(x);
    let loss = f(&tape, &watched)?;
    if !loss.item()?.is_finite() {
        return Err(NumericsError::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(&loss)?;
    let analytic = grads.get_or_zeros(&watched);

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = 0;
    let base = x.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = eval_scalar(f, &Tensor::from_vec(x.shape().to_vec(), plus)?)?;
        let fm = eval_scalar(f, &Tensor::from_vec(x.shape().to_vec(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = rel_err(a, numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        max_abs = max_abs.max(abs);
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        worst_coord: worst,
        coords: base.len(),
        tol,
        pass: max_rel <= tol,
    })
}
