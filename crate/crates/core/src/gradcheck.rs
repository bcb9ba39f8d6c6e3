//! Central finite-difference gradient oracle for test suites.
//!
//! Independent of the tape's backward pass: it only evaluates forward
//! losses at perturbed parameter values. Enabled for this crate's own
//! tests and, via the `testutil` feature, for downstream test targets.

use crate::tape::Tape;
use crate::tensor::Tensor2D;

/// Elementwise comparison outcome for one parameter tensor.
#[derive(Debug)]
pub struct GradMismatch {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Central finite differences of `loss_fn` with respect to every entry of
/// `params`. `loss_fn` must evaluate the scalar loss from scratch at the
/// given parameter values.
pub fn finite_difference_grads(
    params: &[Tensor2D],
    h: f64,
    mut loss_fn: impl FnMut(&[Tensor2D]) -> f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor2D> = params.to_vec();
    for p in 0..params.len() {
        let n = params[p].len();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = loss_fn(&work);
            work[p].data_mut()[i] = orig - h;
            let down = loss_fn(&work);
            work[p].data_mut()[i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Compares analytic gradients against `numeric` ones elementwise.
/// Tolerance rule: relative error below `rel_tol`, falling back to an
/// absolute tolerance of `abs_tol` where the gradient magnitude is tiny
/// (below 1e-3).
pub fn compare_grads(
    analytic: &[Vec<f64>],
    numeric: &[Vec<f64>],
    rel_tol: f64,
    abs_tol: f64,
) -> Vec<GradMismatch> {
    let mut mismatches = Vec::new();
    for (p, (a_vec, n_vec)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a_vec.len(), n_vec.len(), "parameter {p} length mismatch");
        for (i, (&a, &n)) in a_vec.iter().zip(n_vec).enumerate() {
            let scale = a.abs().max(n.abs());
            let diff = (a - n).abs();
            let ok = if scale < 1e-3 {
                diff <= abs_tol
            } else {
                diff / scale <= rel_tol
            };
            if !ok {
                mismatches.push(GradMismatch {
                    param: p,
                    index: i,
                    analytic: a,
                    numeric: n,
                    rel_err: if scale > 0.0 { diff / scale } else { diff },
                });
            }
        }
    }
    mismatches
}

/// Runs a full check of the tape's analytic gradients for a graph built by
/// `build` over the given leaf parameters. `build` receives a fresh tape
/// plus the node ids of the registered parameters and must return the
/// scalar loss node.
pub fn check_tape_gradients(
    params: &[Tensor2D],
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
    mut build: impl FnMut(&mut Tape, &[crate::tape::NodeId]) -> crate::tape::NodeId,
) -> Vec<GradMismatch> {
    // analytic pass
    let mut tape = Tape::new();
    let ids: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss, false).expect("backward failed");
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    // numeric oracle
    let numeric = finite_difference_grads(params, h, |vals| {
        let mut t = Tape::new();
        let ids: Vec<_> = vals.iter().map(|p| t.param(p.clone())).collect();
        let l = build(&mut t, &ids);
        t.value(l).get(0, 0)
    });

    compare_grads(&analytic, &numeric, rel_tol, abs_tol)
}
