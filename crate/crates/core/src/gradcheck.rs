//! Central finite-difference checks of reverse-mode gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Relative tolerance on `|analytic - numeric| / max(|analytic|, |numeric|)`.
    pub rel_tol: f64,
    /// Absolute tolerance for components near zero.
    pub abs_tol: f64,
    /// Check at most this many coordinates per input, evenly strided.
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-3,
            abs_tol: 1e-5,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error, with the absolute floor folded into the denominator.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub coords_checked: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.rel_tol
    }
}

/// Compares the tape gradient of the scalar built by `build` against central
/// differences, perturbing every input coordinate (or a strided subset).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: GradCheck, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let root = build(&mut tape, &vars)?;
        let out = tape.value(root);
        if out.len() != 1 {
            return Err(Error::Contract("gradient check needs a scalar output".into()));
        }
        Ok(out.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let floor = cfg.abs_tol / cfg.rel_tol;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        coords_checked: 0,
        worst: None,
        rel_tol: cfg.rel_tol,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = inputs[idx].len();
        let stride = cfg.max_coords.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for c in (0..n).step_by(stride) {
            let orig = work[idx].data()[c];
            work[idx].data_mut()[c] = orig + cfg.step;
            let plus = eval(&work)?;
            work[idx].data_mut()[c] = orig - cfg.step;
            let minus = eval(&work)?;
            work[idx].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[c];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(floor);
            report.coords_checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((idx, c, a, numeric));
            }
        }
    }
    Ok(report)
}
