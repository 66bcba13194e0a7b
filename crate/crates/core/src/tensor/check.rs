//! Central finite-difference gradient checking.
//!
//! The numerical side rebuilds the graph from perturbed copies of the
//! inputs, so it stays independent of the backward implementation it
//! verifies. Checks run in `f64`.

use super::{Graph, Tensor, Val};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-4;

/// Worst relative error between an analytic gradient and a central
/// finite-difference estimate.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Compare reverse-mode gradients of `build` against central differences.
///
/// `build` must construct the scalar loss from graph vars created from
/// `inputs`, in order. Relative error uses `|a - n| / max(1, |a|, |n|)` so
/// near-zero gradients are compared absolutely.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Val]) -> Result<Val>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Val> = tensors.iter().map(|t| g.var(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    // analytic pass
    let mut g = Graph::new();
    let vars: Vec<Val> = inputs.iter().map(|t| g.var(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).len()])
        })
        .collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked })
}

/// Assert helper used across test suites.
pub fn assert_gradients<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Graph<f64>, &[Val]) -> Result<Val>,
{
    let report = check_gradients(inputs, FD_STEP, build).expect("gradcheck build failed");
    assert!(
        report.max_rel_err < FD_REL_TOL,
        "gradient check failed: max rel err {} over {} entries",
        report.max_rel_err,
        report.checked
    );
}
