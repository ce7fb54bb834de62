//! Central finite-difference oracle for checking reverse-mode gradients.

use crate::{Tape, Tensor, Var};

/// Result of comparing analytic and numeric gradients for one input.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub input: usize,
    /// `|analytic - numeric| / (|analytic| + |numeric|)` in the 2-norm.
    pub rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// Compares the tape's gradient of the scalar `f(inputs)` with central
/// differences of step `eps` for every element of every input.
pub fn check<F>(inputs: &[Tensor], eps: f64, f: F) -> Vec<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars);
    assert_eq!(out.value().len(), 1, "gradient check needs a scalar output");
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).value().item()
    };

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let diff: f64 = a
            .data()
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let an = a.norm();
        let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = an + nn;
        reports.push(GradReport {
            input: i,
            rel_err: if denom < 1e-12 { diff } else { diff / denom },
            analytic_norm: an,
            numeric_norm: nn,
        });
    }
    reports
}

/// Largest relative error across all inputs.
pub fn max_rel_err(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.rel_err).fold(0.0, f64::max)
}
