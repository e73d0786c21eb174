//! Finite-difference verification of tape gradients.
//!
//! The reference route never touches the backward machinery: the caller's
//! closure is re-run with each parameter element nudged by ±h and the central
//! difference of the forward loss value stands in for the derivative.
//! Backward is compared against that estimate elementwise.

use crate::tensor::{Tape, Tensor, TensorId};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// One gradient element whose analytic and numeric values disagree.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Relative error with the denominator floored, so near-zero pairs compare
/// absolutely instead of blowing up.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Checks dLoss/dParam for every parameter against central differences.
///
/// `build` records the loss for the current parameter values on a fresh tape
/// and returns the tape, the scalar loss id, and one leaf id per entry of
/// `params` (same order). It must be deterministic in the parameter values;
/// it is invoked once for the analytic pass and twice per parameter element
/// for the numeric probes.
pub fn check_tape_gradients<B>(
    params: &mut Vec<(String, Tensor)>,
    mut build: B,
    step: f64,
    tolerance: f64,
) -> GradReport
where
    B: FnMut(&[(String, Tensor)]) -> (Tape, TensorId, Vec<TensorId>),
{
    let (mut tape, loss, leaf_ids) = build(params);
    assert_eq!(leaf_ids.len(), params.len(), "one leaf id per parameter");
    tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Vec<f64>> = leaf_ids
        .iter()
        .zip(params.iter())
        .map(|(&id, (name, t))| {
            let g = tape
                .grad(id)
                .unwrap_or_else(|| panic!("parameter {name} received no gradient"));
            assert_eq!(g.len(), t.numel(), "gradient length mismatch for {name}");
            g.to_vec()
        })
        .collect();
    drop(tape);

    let loss_of = |params: &[(String, Tensor)], build: &mut B| -> f64 {
        let (tape, loss, _) = build(params);
        tape.value(loss)[0]
    };

    let mut report = GradReport {
        checked: 0,
        max_rel_error: 0.0,
        mismatches: Vec::new(),
    };

    for p in 0..params.len() {
        for i in 0..params[p].1.numel() {
            let orig = params[p].1.data()[i];
            params[p].1.data_mut()[i] = orig + step;
            let up = loss_of(params, &mut build);
            params[p].1.data_mut()[i] = orig - step;
            let down = loss_of(params, &mut build);
            params[p].1.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[p][i];
            let err = rel_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if err > tolerance {
                report.mismatches.push(GradMismatch {
                    param: params[p].0.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    report
}
