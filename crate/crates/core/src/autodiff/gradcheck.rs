use serde::Serialize;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Comparison of analytic and central-difference gradients.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    /// Worst per-coordinate relative error (see [`check_gradients`]).
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Compare the tape gradient of `f` at `x` with central differences.
///
/// The relative error of coordinate `i` is `|a_i - n_i| / d_i` where
/// `d_i = max(|a_i|, |n_i|, 1e-3 * max_j |n_j|)`, so coordinates whose
/// gradient is negligible next to the largest one are judged on the scale
/// of the largest one.
pub fn check_gradients<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).expect("leaf gradient").data().to_vec();

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe.clone());
        let out = f(&mut t, v)?;
        t.value(out)
            .item()
            .ok_or(Error::Backward("loss must be a scalar"))
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut max_rel_error = 0.0;
    let mut worst_index = None;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-3 * scale);
        let err = if denom == 0.0 { 0.0 } else { (a - n).abs() / denom };
        if err > max_rel_error || worst_index.is_none() {
            max_rel_error = err;
            worst_index = Some(i);
        }
    }
    Ok(GradReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        tol,
        passed: max_rel_error < tol,
    })
}
