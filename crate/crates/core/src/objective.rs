//! Loss bookkeeping shared by the MIM and DML objectives.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Bound, Network};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Per-term breakdown of one loss evaluation. Terms carry their
/// coefficients, so `total = mi_term + prior_term + smooth_term`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    pub step: usize,
    pub mi_term: f64,
    pub prior_term: f64,
    pub smooth_term: f64,
    pub total: f64,
}

impl ObjectiveReport {
    /// Average of several reports, stamped with `step`.
    pub fn mean(reports: &[ObjectiveReport], step: usize) -> Self {
        let n = reports.len().max(1) as f64;
        let mut out = ObjectiveReport { step, ..Default::default() };
        for r in reports {
            out.mi_term += r.mi_term / n;
            out.prior_term += r.prior_term / n;
            out.smooth_term += r.smooth_term / n;
            out.total += r.total / n;
        }
        out
    }
}

/// Tape nodes of a loss and its weighted parts.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub mi: Var,
    pub prior: Option<Var>,
    pub smooth: Option<Var>,
}

impl LossParts {
    pub fn report<S: Scalar>(&self, tape: &Tape<S>, step: usize) -> ObjectiveReport {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).item().as_f64()).unwrap_or(0.0);
        ObjectiveReport {
            step,
            mi_term: get(Some(self.mi)),
            prior_term: get(self.prior),
            smooth_term: get(self.smooth),
            total: get(Some(self.total)),
        }
    }
}

/// Result of building an objective on a tape.
#[derive(Clone, Debug)]
pub struct Evaluation<S: Scalar = f64> {
    pub parts: LossParts,
    /// Batch-norm statistics from the clean training-mode forward pass.
    pub stats: Vec<(usize, BatchStats<S>)>,
}

/// A training objective evaluated on one mini-batch.
pub trait Objective<S: Scalar> {
    fn name(&self) -> &'static str;

    /// Records the loss for `x` on `tape`. `rng` feeds any stochastic term.
    fn build(
        &mut self,
        tape: &mut Tape<S>,
        net: &Network<S>,
        bound: &Bound,
        x: &Tensor<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Evaluation<S>>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_mean() {
        let a = ObjectiveReport { step: 1, mi_term: 1.0, prior_term: 2.0, smooth_term: 0.0, total: 3.0 };
        let b = ObjectiveReport { step: 2, mi_term: 3.0, prior_term: 0.0, smooth_term: 2.0, total: 5.0 };
        let m = ObjectiveReport::mean(&[a, b], 9);
        assert_eq!(m, ObjectiveReport { step: 9, mi_term: 2.0, prior_term: 1.0, smooth_term: 1.0, total: 4.0 });
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.starts_with("{\"step\":9,\"mi_term\""));
    }
}
