//! Posterior, prior and conditional-density weights derived from a single
//! softmax head.
//!
//! With `L(x)` the softmax output, the posterior is `p(z=k|x) = L_k(x)`, the
//! prior is `p(z=k) = E_x[L_k(x)]` and the class conditional satisfies
//! `p(x|z=k) / p(x) = L_k(x) / p(z=k)`. Expectations over `x` are batch means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const ROW_SUM_TOL: f64 = 1e-9;

/// `B x K` row-stochastic matrix of posteriors.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorBatch<S: Scalar = f64> {
    values: Tensor<S>,
}

impl<S: Scalar> PosteriorBatch<S> {
    pub fn new(values: Tensor<S>) -> Result<Self> {
        let (b, k) = values.matrix_dims("PosteriorBatch")?;
        if b == 0 || k == 0 {
            return Err(Error::arg("posterior batch must be non-empty"));
        }
        let tol = S::of(ROW_SUM_TOL);
        for i in 0..b {
            let row = values.row(i);
            if let Some(j) = row.iter().position(|&v| !(v >= -tol && v <= S::one() + tol)) {
                return Err(Error::domain("PosteriorBatch", format!("entry ({i}, {j}) = {} outside [0, 1]", row[j])));
            }
            let s: S = row.iter().copied().sum();
            if (s - S::one()).abs() > tol {
                return Err(Error::domain("PosteriorBatch", format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { values })
    }

    /// A binary head's `L(x)` as the two-column matrix `[L, 1 - L]`.
    pub fn from_binary(l: &[S]) -> Result<Self> {
        let mut data = Vec::with_capacity(2 * l.len());
        for &v in l {
            data.extend([v, S::one() - v]);
        }
        Self::new(Tensor::new(vec![l.len(), 2], data)?)
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn states(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn column(&self, k: usize) -> Vec<S> {
        (0..self.batch()).map(|i| self.values.at(i, k)).collect()
    }
}

/// Batch estimate of `p(z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorEstimate<S: Scalar = f64> {
    pub values: Vec<S>,
    pub sample_count: usize,
}

impl<S: Scalar> PriorEstimate<S> {
    /// Validates a user-supplied prior: entries in `[0, 1]` summing to one.
    pub fn new(values: Vec<S>, sample_count: usize) -> Result<Self> {
        let tol = S::of(ROW_SUM_TOL);
        if values.iter().any(|&v| !(v >= S::zero() && v <= S::one())) {
            return Err(Error::domain("PriorEstimate", "entries must lie in [0, 1]"));
        }
        let s: S = values.iter().copied().sum();
        if (s - S::one()).abs() > tol {
            return Err(Error::domain("PriorEstimate", format!("entries sum to {s}")));
        }
        Ok(Self { values, sample_count })
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    fn interior(&self, k: usize) -> Result<S> {
        let v = self.values[k];
        if v <= S::zero() || v >= S::one() {
            return Err(Error::DegeneratePrior { index: k, value: v.as_f64() });
        }
        Ok(v)
    }
}

/// Column means of the posterior matrix, accumulated as offsets from the
/// first row so identical rows reproduce that row exactly.
pub fn prior_estimate<S: Scalar>(p: &PosteriorBatch<S>) -> PriorEstimate<S> {
    let b = p.batch();
    let first = p.values.row(0);
    let mut offsets = vec![S::zero(); p.states()];
    for i in 1..b {
        for ((acc, &v), &f) in offsets.iter_mut().zip(p.values.row(i)).zip(first) {
            *acc += v - f;
        }
    }
    let n = S::of(b as f64);
    let values = first.iter().zip(&offsets).map(|(&f, &o)| f + o / n).collect();
    PriorEstimate { values, sample_count: b }
}

/// `f_k = L_k / prior_k` and `fbar_k = (1 - L_k) / (1 - prior_k)`.
pub fn conditional_weights<S: Scalar>(
    p: &PosteriorBatch<S>,
    prior: &PriorEstimate<S>,
    k: usize,
) -> Result<(Vec<S>, Vec<S>)> {
    if k >= p.states() || prior.k() != p.states() {
        return Err(Error::dim("conditional_weights", format!("state {k} of {} (prior has {})", p.states(), prior.k())));
    }
    let pk = prior.interior(k)?;
    let l = p.column(k);
    let f = l.iter().map(|&v| v / pk).collect();
    let fbar = l.iter().map(|&v| (S::one() - v) / (S::one() - pk)).collect();
    Ok((f, fbar))
}

/// Matrix of `p(x_i | z=k) / p(x_i) = L_k(x_i) / prior_k`.
pub fn density_ratio<S: Scalar>(p: &PosteriorBatch<S>, prior: &PriorEstimate<S>) -> Result<Tensor<S>> {
    if prior.k() != p.states() {
        return Err(Error::dim("density_ratio", "prior length differs from state count"));
    }
    if let Some(k) = prior.values.iter().position(|v| v.is_zero()) {
        return Err(Error::DegeneratePrior { index: k, value: 0.0 });
    }
    let k = p.states();
    let data = p
        .values
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v / prior.values[i % k])
        .collect();
    Ok(Tensor::from_parts(p.values.shape().to_vec(), data))
}

/// Source of the prior used inside objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PriorMode {
    /// Live mean of the current mini-batch.
    #[default]
    Batch,
    /// Exponential moving average across mini-batches, combined with the live
    /// batch mean as `decay * ema + (1 - decay) * batch`.
    Ema { decay: f64 },
}

/// Running prior for [`PriorMode::Ema`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriorTracker {
    ema: Option<Vec<f64>>,
}

impl PriorTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self) -> Option<&[f64]> {
        self.ema.as_deref()
    }

    /// Folds a new batch mean into the average and returns the history term
    /// that should be blended with the live mean, if any.
    pub fn observe(&mut self, batch_mean: &[f64], decay: f64) -> Option<Vec<f64>> {
        let previous = self.ema.clone();
        self.ema = Some(match &self.ema {
            None => batch_mean.to_vec(),
            Some(e) => e.iter().zip(batch_mean).map(|(&a, &b)| decay * a + (1.0 - decay) * b).collect(),
        });
        previous
    }
}

/// Supplies the prior node used inside objectives, keeping one tracker per
/// prior slot (state or partition head).
#[derive(Clone, Debug, Default)]
pub struct PriorBlender {
    mode: PriorMode,
    trackers: Vec<PriorTracker>,
}

impl PriorBlender {
    pub fn new(mode: PriorMode) -> Self {
        Self { mode, trackers: Vec::new() }
    }

    pub fn mode(&self) -> PriorMode {
        self.mode
    }

    /// Returns the prior for `slot` given its live batch mean.
    pub fn prior<S: Scalar>(&mut self, tape: &mut Tape<S>, slot: usize, live: Var) -> Result<Var> {
        let PriorMode::Ema { decay } = self.mode else { return Ok(live) };
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay {decay} must lie in [0, 1)")));
        }
        if self.trackers.len() <= slot {
            self.trackers.resize_with(slot + 1, PriorTracker::new);
        }
        let observed = tape.value(live).to_f64_vec();
        let Some(history) = self.trackers[slot].observe(&observed, decay) else { return Ok(live) };
        if history.len() != observed.len() {
            return Err(Error::dim("PriorBlender", "prior size changed between mini-batches"));
        }
        let shape = tape.shape(live).to_vec();
        let h = tape.constant(Tensor::from_f64(shape, &history)?);
        let h = tape.mul_scalar(h, S::of(decay));
        let l = tape.mul_scalar(live, S::of(1.0 - decay));
        tape.add(l, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>]) -> PosteriorBatch {
        PosteriorBatch::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn validation() {
        assert!(PosteriorBatch::new(Tensor::from_rows(&[vec![0.6, 0.6]]).unwrap()).is_err());
        assert!(PosteriorBatch::new(Tensor::from_rows(&[vec![1.2, -0.2]]).unwrap()).is_err());
        assert!(PriorEstimate::new(vec![0.5, 0.6], 1).is_err());
        let b = PosteriorBatch::from_binary(&[0.25, 1.0]).unwrap();
        assert_eq!(b.values().row(0), &[0.25, 0.75]);
    }

    #[test]
    fn prior_examples() {
        assert_eq!(prior_estimate(&batch(&[vec![0.3, 0.7], vec![0.3, 0.7]])).values, vec![0.3, 0.7]);
        let p = prior_estimate(&batch(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        assert_eq!(p.values, vec![0.5, 0.5]);
        assert_eq!(p.sample_count, 2);
    }

    #[test]
    fn conditional_weight_examples() {
        let p = batch(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let (f, fb) = conditional_weights(&p, &prior_estimate(&p), 0).unwrap();
        assert_eq!((f, fb), (vec![1.0, 1.0], vec![1.0, 1.0]));
        let p = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (f, fb) = conditional_weights(&p, &prior_estimate(&p), 0).unwrap();
        assert_eq!((f, fb), (vec![2.0, 0.0], vec![0.0, 2.0]));
        let p = batch(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!(matches!(
            conditional_weights(&p, &prior_estimate(&p), 1),
            Err(Error::DegeneratePrior { index: 1, .. })
        ));
    }

    #[test]
    fn density_ratio_examples() {
        let p = batch(&[vec![0.25; 4], vec![0.25; 4]]);
        let r = density_ratio(&p, &prior_estimate(&p)).unwrap();
        assert!(r.data().iter().all(|&v| v == 1.0));
        let single = batch(&[vec![0.1, 0.2, 0.7]]);
        let r = density_ratio(&single, &prior_estimate(&single)).unwrap();
        assert!(r.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let p = batch(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!(density_ratio(&p, &prior_estimate(&p)).is_err());
    }

    #[test]
    fn ema_tracker() {
        let mut t = PriorTracker::new();
        assert_eq!(t.observe(&[0.2, 0.8], 0.99), None);
        let prev = t.observe(&[0.4, 0.6], 0.99).unwrap();
        assert_eq!(prev, vec![0.2, 0.8]);
        let v = t.value().unwrap();
        assert!((v[0] - (0.99 * 0.2 + 0.01 * 0.4)).abs() < 1e-15);
    }

    #[test]
    fn blender_batch_mode_is_identity_and_ema_blends() {
        let mut tape = Tape::<f64>::new();
        let live = tape.constant(Tensor::from_vec(vec![0.4, 0.6]).unwrap());
        let mut batch = PriorBlender::new(PriorMode::Batch);
        assert_eq!(batch.prior(&mut tape, 0, live).unwrap(), live);
        let mut ema = PriorBlender::new(PriorMode::Ema { decay: 0.5 });
        assert_eq!(ema.prior(&mut tape, 0, live).unwrap(), live);
        let next = tape.constant(Tensor::from_vec(vec![0.2, 0.8]).unwrap());
        let p = ema.prior(&mut tape, 0, next).unwrap();
        assert!((tape.value(p).data()[0] - 0.3).abs() < 1e-15);
    }
}
