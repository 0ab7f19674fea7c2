//! Disjoint manifold labeling.
//!
//! A head `L(x)` induces the conditionals `q1(x) ∝ L(x) p(x)` and
//! `q0(x) ∝ (1 - L(x)) p(x)`; their Jensen-Shannon divergence is written in
//! terms of `f1 = L / E[L]` and `f0 = (1 - L) / (1 - E[L])`. Maximizing it
//! assigns a distinct label to each connected component of the data support,
//! provided `L` is smooth, which [`smoothness_penalty`] encourages.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bayes::{PriorBlender, PriorMode};
use crate::error::{Error, Result};
use crate::nn::{Bound, Mode, Network};
use crate::objective::{Evaluation, LossParts, Objective};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MIN_ZETA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmlConfig {
    pub partitions: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub noise_sigma: f64,
    pub prior_mode: PriorMode,
}

impl Default for DmlConfig {
    fn default() -> Self {
        Self { partitions: 2, beta: 1.0, epsilon: 1e-7, noise_sigma: 0.1, prior_mode: PriorMode::Batch }
    }
}

impl DmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.partitions < 2 {
            return Err(Error::Config(format!("need at least 2 partitions, got {}", self.partitions)));
        }
        if !(self.epsilon > 0.0) || !(self.noise_sigma > 0.0) {
            return Err(Error::Config("epsilon and noise_sigma must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        Ok(())
    }
}

fn xlogy_ratio<S: Scalar>(f: S, total: S) -> S {
    if f > S::zero() {
        f * (f / total).ln()
    } else {
        S::zero()
    }
}

fn check_prior<S: Scalar>(index: usize, p: S) -> Result<()> {
    if p > S::zero() && p < S::one() {
        Ok(())
    } else {
        Err(Error::DegeneratePrior { index, value: p.as_f64() })
    }
}

/// `(1/2) mean[f1 log(f1/(f1+f0))] + (1/2) mean[f0 log(f0/(f1+f0))] + log 2`,
/// with zero weights contributing nothing.
pub fn dml_binary_objective<S: Scalar>(l: &[S], prior: S) -> Result<S> {
    if l.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    check_prior(0, prior)?;
    let half = S::of(0.5);
    let mut acc = S::zero();
    for &v in l {
        let f1 = v / prior;
        let f0 = (S::one() - v) / (S::one() - prior);
        acc += half * (xlogy_ratio(f1, f1 + f0) + xlogy_ratio(f0, f1 + f0));
    }
    Ok(acc / S::of(l.len() as f64) + S::of(std::f64::consts::LN_2))
}

/// Batch mean of a slice.
pub fn batch_mean<S: Scalar>(l: &[S]) -> S {
    l.iter().copied().sum::<S>() / S::of(l.len() as f64)
}

/// Plain evaluation of the training loss with an explicit prior.
pub fn dml_binary_loss_value<S: Scalar>(l: &[S], prior: S, eps: S) -> S {
    let half = S::of(0.5);
    let mut acc = S::zero();
    for &v in l {
        let f1 = v / prior + eps;
        let f0 = (S::one() - v) / (S::one() - prior) + eps;
        acc += half * (f1 * (S::one() + f0 / f1).ln() + f0 * (S::one() + f1 / f0).ln());
    }
    acc / S::of(l.len() as f64)
}

/// Training loss for a binary head `l` (`[B]` or `[B, 1]`) with the live
/// batch-mean prior.
pub fn dml_binary_loss<S: Scalar>(tape: &mut Tape<S>, l: Var, eps: S) -> Result<Var> {
    let l = flat_head(tape, l)?;
    let prior = tape.mean_all(l);
    binary_loss_with_prior(tape, l, prior, eps)
}

fn flat_head<S: Scalar>(tape: &mut Tape<S>, l: Var) -> Result<Var> {
    match *tape.shape(l) {
        [b] if b >= 2 => Ok(l),
        [b, 1] if b >= 2 => tape.reshape(l, vec![b]),
        ref s => Err(Error::dim("dml_binary_loss", format!("expected [B] or [B, 1] with B >= 2, got {s:?}"))),
    }
}

fn binary_loss_with_prior<S: Scalar>(tape: &mut Tape<S>, l: Var, prior: Var, eps: S) -> Result<Var> {
    check_prior(0, tape.value(prior).item())?;
    let f1 = tape.div(l, prior)?;
    let f1 = tape.add_scalar(f1, eps);
    let nl = tape.rsub_scalar(S::one(), l);
    let np = tape.rsub_scalar(S::one(), prior);
    let f0 = tape.div(nl, np)?;
    let f0 = tape.add_scalar(f0, eps);
    let a = one_plus_ratio_term(tape, f1, f0)?;
    let b = one_plus_ratio_term(tape, f0, f1)?;
    let s = tape.add(a, b)?;
    let m = tape.mean_all(s);
    Ok(tape.mul_scalar(m, S::of(0.5)))
}

/// `f log(1 + g/f)`.
fn one_plus_ratio_term<S: Scalar>(tape: &mut Tape<S>, f: Var, g: Var) -> Result<Var> {
    let r = tape.div(g, f)?;
    let r = tape.add_scalar(r, S::one());
    let lr = tape.log(r)?;
    tape.mul(f, lr)
}

/// Multi-partition loss for a `[B, K]` softmax head: minus the average over
/// partitions of the divergence between each partition and the rest.
pub fn dml_multi_loss<S: Scalar>(tape: &mut Tape<S>, l: Var, eps: S) -> Result<Var> {
    let prior = tape.mean_rows(l)?;
    multi_loss_with_prior(tape, l, prior, eps)
}

fn multi_loss_with_prior<S: Scalar>(tape: &mut Tape<S>, l: Var, prior: Var, eps: S) -> Result<Var> {
    let (b, k) = tape.value(l).matrix_dims("dml_multi_loss")?;
    if k < 2 || b < 1 {
        return Err(Error::arg(format!("multi-partition loss needs K >= 2 and B >= 1, got [{b}, {k}]")));
    }
    for (i, &p) in tape.value(prior).data().iter().enumerate() {
        check_prior(i, p)?;
    }
    let f = tape.div(l, prior)?;
    let f = tape.add_scalar(f, eps);
    let nl = tape.rsub_scalar(S::one(), l);
    let np = tape.rsub_scalar(S::one(), prior);
    let fb = tape.div(nl, np)?;
    let fb = tape.add_scalar(fb, eps);
    let total = tape.add(f, fb)?;
    let lt = tape.log(total)?;
    let lf = tape.log(f)?;
    let lfb = tape.log(fb)?;
    let da = tape.sub(lf, lt)?;
    let db = tape.sub(lfb, lt)?;
    let ta = tape.mul(f, da)?;
    let tb = tape.mul(fb, db)?;
    let both = tape.add(ta, tb)?;
    let m = tape.mean_all(both);
    let js = tape.mul_scalar(m, S::of(0.5));
    let js = tape.add_scalar(js, S::of(std::f64::consts::LN_2));
    Ok(tape.neg(js))
}

/// Perturbation for the smoothness penalty: unit directions in the span of
/// the batch and one scale shared by the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothnessSample<S: Scalar = f64> {
    /// Same shape as the batch; every sample has unit norm.
    pub directions: Tensor<S>,
    pub zeta: S,
}

/// Draws `delta_i = sum_j v_ij x_j` with `v_ij ~ N(0, 1)`, normalizes each
/// direction, then draws `zeta ~ N(0, sigma^2)`, redrawing while
/// `|zeta| < 1e-4`.
pub fn sample_smoothness<S: Scalar>(x: &Tensor<S>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<SmoothnessSample<S>> {
    let b = x.rows();
    let n = x.row_len();
    if x.data().iter().all(|v| v.is_zero()) {
        return Err(Error::arg("perturbation directions are undefined for an all-zero batch"));
    }
    let v: Vec<S> = (0..b * b).map(|_| S::of(rng.sample::<f64, _>(StandardNormal))).collect();
    let mut d = vec![S::zero(); b * n];
    S::gemm(b, b, n, S::one(), &v, (b as isize, 1), x.data(), (n as isize, 1), S::zero(), &mut d, (n as isize, 1));
    for (i, row) in d.chunks_mut(n).enumerate() {
        let norm = row.iter().map(|&t| t * t).sum::<S>().sqrt();
        if !(norm > S::zero()) {
            return Err(Error::arg(format!("perturbation direction {i} has zero norm")));
        }
        for t in row {
            *t /= norm;
        }
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let zeta = loop {
        let z: f64 = rng.sample(normal);
        if z.abs() >= MIN_ZETA {
            break z;
        }
    };
    Ok(SmoothnessSample { directions: Tensor::from_parts(x.shape().to_vec(), d), zeta: S::of(zeta) })
}

/// `(1/B) sum_i ||clean_i - g(x_i + zeta d_i)||^2 / zeta^2`, where `forward`
/// records `g` for the perturbed batch and `clean` is `g(x)`.
pub fn smoothness_penalty<S: Scalar, F>(
    tape: &mut Tape<S>,
    x: &Tensor<S>,
    clean: Var,
    sample: &SmoothnessSample<S>,
    forward: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape<S>, Var) -> Result<Var>,
{
    if sample.directions.shape() != x.shape() {
        return Err(Error::dim("smoothness_penalty", "directions do not match the batch"));
    }
    let b = x.rows();
    let shifted = x.zip_map(&sample.directions, |a, d| a + sample.zeta * d)?;
    let xp = tape.constant(shifted);
    let pert = forward(tape, xp)?;
    let diff = tape.sub(clean, pert)?;
    let sq = tape.square(diff);
    let s = tape.sum_all(sq);
    Ok(tape.mul_scalar(s, S::one() / (S::of(b as f64) * sample.zeta * sample.zeta)))
}

/// Smoothness of a network's output on `x`, evaluated with batch statistics
/// and without touching running estimates.
pub fn network_smoothness<S: Scalar>(net: &Network<S>, x: &Tensor<S>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<S> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let clean = net.forward_bound(&mut tape, &bound, xv, Mode::TrainFrozenStats)?.output;
    let sample = sample_smoothness(x, sigma, rng)?;
    let pen = smoothness_penalty(&mut tape, x, clean, &sample, |t, xp| {
        Ok(net.forward_bound(t, &bound, xp, Mode::TrainFrozenStats)?.output)
    })?;
    Ok(tape.value(pen).item())
}

/// DML training objective for a softmax-headed network. Two partitions use
/// the binary loss on the first output column; more use the multi loss.
#[derive(Clone, Debug)]
pub struct DmlObjective {
    pub cfg: DmlConfig,
    blender: PriorBlender,
}

impl DmlObjective {
    pub fn new(cfg: DmlConfig) -> Result<Self> {
        cfg.validate()?;
        let blender = PriorBlender::new(cfg.prior_mode);
        Ok(Self { cfg, blender })
    }

    /// Head used by both the loss and the smoothness term.
    fn head<S: Scalar>(&self, tape: &mut Tape<S>, out: Var) -> Result<Var> {
        let (_, k) = tape.value(out).matrix_dims("dml head")?;
        if k != self.cfg.partitions {
            return Err(Error::dim("dml head", format!("network emits {k} columns for {} partitions", self.cfg.partitions)));
        }
        if k == 2 {
            tape.column(out, 0)
        } else {
            Ok(out)
        }
    }
}

impl<S: Scalar> Objective<S> for DmlObjective {
    fn name(&self) -> &'static str {
        if self.cfg.partitions == 2 {
            "dml-binary"
        } else {
            "dml-multi"
        }
    }

    fn build(
        &mut self,
        tape: &mut Tape<S>,
        net: &Network<S>,
        bound: &Bound,
        x: &Tensor<S>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Evaluation<S>> {
        let eps = S::of(self.cfg.epsilon);
        let xv = tape.constant(x.clone());
        let fwd = net.forward_bound(tape, bound, xv, Mode::Train)?;
        let head = self.head(tape, fwd.output)?;
        let mi = if self.cfg.partitions == 2 {
            let live = tape.mean_all(head);
            let prior = self.blender.prior(tape, 0, live)?;
            binary_loss_with_prior(tape, head, prior, eps)?
        } else {
            let live = tape.mean_rows(head)?;
            let prior = self.blender.prior(tape, 0, live)?;
            multi_loss_with_prior(tape, head, prior, eps)?
        };
        let mut total = mi;
        let mut smooth = None;
        if self.cfg.beta > 0.0 {
            let sample = sample_smoothness(x, self.cfg.noise_sigma, rng)?;
            let rc = smoothness_penalty(tape, x, head, &sample, |t, xp| {
                let f = net.forward_bound(t, bound, xp, Mode::TrainFrozenStats)?;
                self.head(t, f.output)
            })?;
            let s = tape.mul_scalar(rc, S::of(self.cfg.beta));
            total = tape.add(total, s)?;
            smooth = Some(s);
        }
        Ok(Evaluation { parts: LossParts { total, mi, prior: None, smooth }, stats: fwd.stats })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::f64::consts::LN_2;

    fn binary_loss(l: &[f64]) -> f64 {
        let mut t = Tape::new();
        let v = t.constant(Tensor::from_vec(l.to_vec()).unwrap());
        let loss = dml_binary_loss(&mut t, v, 1e-7).unwrap();
        t.value(loss).item()
    }

    #[test]
    fn objective_examples() {
        assert!(dml_binary_objective(&[0.5f64; 6], 0.5).unwrap().abs() < 1e-15);
        let l = [1.0, 0.0, 1.0, 0.0, 0.0];
        assert!((dml_binary_objective(&l, batch_mean(&l)).unwrap() - LN_2).abs() < 1e-12);
        assert!(matches!(dml_binary_objective(&[1.0, 1.0], 1.0), Err(Error::DegeneratePrior { .. })));
    }

    #[test]
    fn loss_examples() {
        assert!((binary_loss(&[0.5; 8]) - LN_2).abs() < 1e-6);
        assert!(binary_loss(&[1.0, 0.0, 0.0, 1.0, 1.0]) <= 1e-5);
        let l = [0.1, 0.7, 0.35, 0.9, 0.02, 0.66];
        let obj = dml_binary_objective(&l, batch_mean(&l)).unwrap();
        assert!((binary_loss(&l) + obj - LN_2).abs() < 1e-5);
        assert!((dml_binary_loss_value(&l, batch_mean(&l), 1e-7) - binary_loss(&l)).abs() < 1e-12);
    }

    #[test]
    fn multi_loss_examples() {
        let mut t = Tape::<f64>::new();
        let u = t.constant(Tensor::full(vec![4, 3], 1.0 / 3.0));
        let lu = dml_multi_loss(&mut t, u, 1e-7).unwrap();
        assert!(t.value(lu).item().abs() < 1e-6);
        let eye = t.constant(
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap(),
        );
        let le = dml_multi_loss(&mut t, eye, 1e-7).unwrap();
        assert!((t.value(le).item() + LN_2).abs() < 1e-5);
        let l = [0.2, 0.9, 0.4, 0.75, 0.05];
        let rows: Vec<Vec<f64>> = l.iter().map(|&v| vec![v, 1.0 - v]).collect();
        let two = t.constant(Tensor::from_rows(&rows).unwrap());
        let lm = dml_multi_loss(&mut t, two, 1e-7).unwrap();
        assert!((t.value(lm).item() - (binary_loss(&l) - LN_2)).abs() < 1e-9);
        let dead = t.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap());
        assert!(matches!(dml_multi_loss(&mut t, dead, 1e-7), Err(Error::DegeneratePrior { index: 2, .. })));
    }

    #[test]
    fn smoothness_of_constant_and_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 0.5], vec![-1.0, 0.3, 2.0], vec![0.4, -0.7, 1.1]]).unwrap();
        let sample: SmoothnessSample = sample_smoothness(&x, 0.1, &mut rng).unwrap();
        assert!(sample.zeta.abs() >= MIN_ZETA);
        for i in 0..3 {
            let n: f64 = sample.directions.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let mut t = Tape::new();
        let c = t.constant(Tensor::full(vec![3, 2], 0.25));
        let pen = smoothness_penalty(&mut t, &x, c, &sample, |t, _| Ok(t.constant(Tensor::full(vec![3, 2], 0.25)))).unwrap();
        assert_eq!(t.value(pen).item(), 0.0);

        let w = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -0.3]]).unwrap();
        let wt = w.transpose().unwrap();
        let xv = t.constant(x.clone());
        let wv = t.constant(wt.clone());
        let clean = t.matmul(xv, wv).unwrap();
        let pen = smoothness_penalty(&mut t, &x, clean, &sample, |t, xp| {
            let wv = t.constant(wt.clone());
            t.matmul(xp, wv)
        })
        .unwrap();
        let wd = sample.directions.matmul(&wt).unwrap();
        let want = wd.data().iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((t.value(pen).item() - want).abs() < 1e-9);
        assert!(sample_smoothness(&Tensor::<f64>::zeros(vec![2, 2]), 0.1, &mut rng).is_err());
    }
}
