//! Mutual-information maximization between inputs and a discrete latent.
//!
//! For a batch of posteriors `L` with prior `p = mean_rows(L)`, the mutual
//! information between the input atoms and the latent is
//! `(1/B) sum_i sum_k L_ik log(L_ik / p_k)`. Its gradient equals the gradient
//! of the same expression with both logarithm arguments held fixed, which is
//! what [`mim_v1_loss`] records. [`mim_v2_loss`] swaps the entropy-of-prior
//! term for the cross-entropy penalty [`uniform_prior_penalty_v2`] and adds
//! a smoothness term.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{PosteriorBatch, PriorBlender, PriorMode};
use crate::dml::{sample_smoothness, smoothness_penalty};
use crate::error::{Error, Result};
use crate::nn::{Bound, Mode, Network};
use crate::objective::{Evaluation, LossParts, Objective};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which uniform-prior penalty the objective uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorPenalty {
    /// Negative entropy of the prior.
    V1,
    /// Cross-entropy against the uniform distribution.
    #[default]
    V2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimConfig {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub use_scales: bool,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub penalty: PriorPenalty,
    pub noise_sigma: f64,
    pub prior_mode: PriorMode,
}

impl Default for MimConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            epsilon: 1e-7,
            use_scales: false,
            pool_kernel: 2,
            pool_stride: 2,
            penalty: PriorPenalty::V2,
            noise_sigma: 0.1,
            prior_mode: PriorMode::Batch,
        }
    }
}

impl MimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
        if self.pool_kernel == 0 || self.pool_stride == 0 {
            return Err(Error::Config("pooling kernel and stride must be positive".into()));
        }
        if !(self.noise_sigma > 0.0) {
            return Err(Error::Config("noise_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// One softmaxed state: `groups` blocks of `rows / groups` samples, one block
/// per spatial location (a single block for flat states).
#[derive(Clone, Debug, PartialEq)]
pub struct StateEntry {
    pub id: String,
    /// `[groups * B, K]` posterior node.
    pub posterior: Var,
    pub groups: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StateCollection {
    pub entries: Vec<StateEntry>,
}

impl StateCollection {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Posterior batch of one spatial location of one state.
    pub fn posterior_batch<S: Scalar>(&self, tape: &Tape<S>, entry: usize, location: usize) -> Result<PosteriorBatch<S>> {
        let e = &self.entries[entry];
        let v = tape.value(e.posterior);
        let per = v.rows() / e.groups;
        let idx: Vec<usize> = (location * per..(location + 1) * per).collect();
        PosteriorBatch::new(v.select_rows(&idx))
    }
}

/// `(1/B) sum_i sum_k L_ik log((L_ik + guard) / (p_k + guard))`, skipping
/// zero entries.
pub fn mi_closed_form<S: Scalar>(p: &PosteriorBatch<S>, guard: S) -> S {
    let prior = crate::bayes::prior_estimate(p).values;
    let k = p.states();
    let mut total = S::zero();
    for (j, &l) in p.values().data().iter().enumerate() {
        if l > S::zero() {
            total += l * ((l + guard) / (prior[j % k] + guard)).ln();
        }
    }
    total / S::of(p.batch() as f64)
}

/// `-(1/N) sum L log<L + eps>` over the rows of a posterior node.
fn entropy_term<S: Scalar>(tape: &mut Tape<S>, l: Var, eps: S) -> Result<Var> {
    let rows = tape.shape(l)[0];
    let lg = tape.log_guarded(l, eps)?;
    let frozen = tape.stop_gradient(lg);
    let prod = tape.mul(l, frozen)?;
    let s = tape.sum_all(prod);
    Ok(tape.mul_scalar(s, -S::one() / S::of(rows as f64)))
}

/// Single-state loss: `-(1/B) sum L log<L + eps> + sum_k p_k log<p_k + eps>`.
/// Its value is `-MI` up to the guard and its gradient that of `-MI`.
pub fn mim_v1_loss<S: Scalar>(tape: &mut Tape<S>, l: Var, eps: S) -> Result<Var> {
    let ent = entropy_term(tape, l, eps)?;
    let prior = tape.mean_rows(l)?;
    let pen = uniform_prior_penalty_v1(tape, prior, eps)?;
    tape.add(ent, pen)
}

fn prior_groups<S: Scalar>(tape: &Tape<S>, prior: Var) -> usize {
    match tape.shape(prior) {
        [_, _] => tape.shape(prior)[0],
        _ => 1,
    }
}

/// `sum_k p_k log<p_k + eps>`, averaged over rows for a `[G, K]` prior.
pub fn uniform_prior_penalty_v1<S: Scalar>(tape: &mut Tape<S>, prior: Var, eps: S) -> Result<Var> {
    let g = prior_groups(tape, prior);
    let lg = tape.log_guarded(prior, eps)?;
    let frozen = tape.stop_gradient(lg);
    let prod = tape.mul(prior, frozen)?;
    let s = tape.sum_all(prod);
    Ok(tape.mul_scalar(s, S::one() / S::of(g as f64)))
}

/// `-sum_k [(1/K) log(p_k + eps) + ((K-1)/K) log(1 - p_k + eps)]`, averaged
/// over rows for a `[G, K]` prior.
pub fn uniform_prior_penalty_v2<S: Scalar>(tape: &mut Tape<S>, prior: Var, eps: S) -> Result<Var> {
    let g = prior_groups(tape, prior);
    let k = *tape.shape(prior).last().expect("prior has a state axis");
    let kf = S::of(k as f64);
    let lp = tape.log_guarded(prior, eps)?;
    let q = tape.rsub_scalar(S::one(), prior);
    let lq = tape.log_guarded(q, eps)?;
    let a = tape.mul_scalar(lp, S::one() / kf);
    let b = tape.mul_scalar(lq, (kf - S::one()) / kf);
    let ab = tape.add(a, b)?;
    let s = tape.sum_all(ab);
    Ok(tape.mul_scalar(s, -S::one() / S::of(g as f64)))
}

/// Plain evaluation of [`uniform_prior_penalty_v2`] for a single prior vector.
pub fn uniform_prior_penalty_v2_value<S: Scalar>(prior: &[S], eps: S) -> S {
    let kf = S::of(prior.len() as f64);
    -prior
        .iter()
        .map(|&p| (p + eps).ln() / kf + (kf - S::one()) / kf * (S::one() - p + eps).ln())
        .sum::<S>()
}

/// Softmaxes every tap along its channel axis. Spatial taps become one
/// posterior per location; with `use_scales` each spatial tap also
/// contributes an average-pooled copy.
pub fn collect_states<S: Scalar>(tape: &mut Tape<S>, states: &[Var], cfg: &MimConfig) -> Result<StateCollection> {
    let mut entries = Vec::new();
    let mut pooled = Vec::new();
    for (i, &h) in states.iter().enumerate() {
        entries.push(softmax_state(tape, h, format!("h{i}"))?);
        if cfg.use_scales && tape.shape(h).len() == 4 {
            let p = tape.avg_pool2d(h, cfg.pool_kernel, cfg.pool_stride)?;
            pooled.push((i, p));
        }
    }
    for (i, p) in pooled {
        entries.push(softmax_state(tape, p, format!("h{}", i + states.len()))?);
    }
    Ok(StateCollection { entries })
}

fn softmax_state<S: Scalar>(tape: &mut Tape<S>, h: Var, id: String) -> Result<StateEntry> {
    let shape = tape.shape(h).to_vec();
    let (rows, groups) = match shape.as_slice() {
        [_, _] => (h, 1),
        [_, _, hh, ww] => (tape.spatial_rows(h)?, hh * ww),
        s => return Err(Error::dim("collect_states", format!("state shape {s:?}"))),
    };
    let posterior = tape.softmax_rows(rows)?;
    Ok(StateEntry { id, posterior, groups })
}

/// Entropy and prior terms averaged over states, plus `beta * rc`.
pub fn mim_v2_loss<S: Scalar>(
    tape: &mut Tape<S>,
    sc: &StateCollection,
    cfg: &MimConfig,
    rc: Option<Var>,
) -> Result<LossParts> {
    let cfg = MimConfig { penalty: PriorPenalty::V2, ..cfg.clone() };
    mim_loss(tape, sc, &cfg, rc, &mut PriorBlender::new(PriorMode::Batch))
}

/// Multi-state loss honoring `cfg.penalty` and the blender's prior source.
pub fn mim_loss<S: Scalar>(
    tape: &mut Tape<S>,
    sc: &StateCollection,
    cfg: &MimConfig,
    rc: Option<Var>,
    blender: &mut PriorBlender,
) -> Result<LossParts> {
    cfg.validate()?;
    if sc.is_empty() {
        return Err(Error::arg("objective needs at least one state"));
    }
    let eps = S::of(cfg.epsilon);
    let inv = S::one() / S::of(sc.len() as f64);
    let mut ent_sum: Option<Var> = None;
    let mut pen_sum: Option<Var> = None;
    for (slot, e) in sc.entries.iter().enumerate() {
        let ent = entropy_term(tape, e.posterior, eps)?;
        let live = tape.mean_rows_grouped(e.posterior, e.groups)?;
        let prior = blender.prior(tape, slot, live)?;
        let pen = match cfg.penalty {
            PriorPenalty::V1 => uniform_prior_penalty_v1(tape, prior, eps)?,
            PriorPenalty::V2 => uniform_prior_penalty_v2(tape, prior, eps)?,
        };
        ent_sum = Some(match ent_sum {
            None => ent,
            Some(acc) => tape.add(acc, ent)?,
        });
        pen_sum = Some(match pen_sum {
            None => pen,
            Some(acc) => tape.add(acc, pen)?,
        });
    }
    let mi = tape.mul_scalar(ent_sum.expect("non-empty"), inv);
    let prior = tape.mul_scalar(pen_sum.expect("non-empty"), inv * S::of(1.0 + cfg.alpha));
    let mut total = tape.add(mi, prior)?;
    let smooth = match rc {
        Some(rc) => {
            let s = tape.mul_scalar(rc, S::of(cfg.beta));
            total = tape.add(total, s)?;
            Some(s)
        }
        None => None,
    };
    Ok(LossParts { total, mi, prior: Some(prior), smooth })
}

/// Multipliers of `d p_k / d theta` in the gradients of the two prior
/// penalties: `(log p_k, -(1/K)(1/p_k - (K-1)/(1-p_k)))`.
pub fn prior_gradient_strength(prior_k: f64, k: usize) -> Result<(f64, f64)> {
    if !(prior_k > 0.0 && prior_k < 1.0) {
        return Err(Error::domain("prior_gradient_strength", format!("prior {prior_k} not in (0, 1)")));
    }
    if k < 2 {
        return Err(Error::arg("need at least two states"));
    }
    let kf = k as f64;
    Ok((prior_k.ln(), -(1.0 / kf) * (1.0 / prior_k - (kf - 1.0) / (1.0 - prior_k))))
}

/// State whose smoothness is penalized: the last tap, average pooled when
/// spatial.
fn smoothness_state<S: Scalar>(tape: &mut Tape<S>, states: &[Var], cfg: &MimConfig) -> Result<Var> {
    let last = *states.last().ok_or_else(|| Error::arg("network has no taps"))?;
    if tape.shape(last).len() == 4 {
        let p = tape.avg_pool2d(last, cfg.pool_kernel, cfg.pool_stride)?;
        let s = tape.shape(p).to_vec();
        tape.reshape(p, vec![s[0], s[1..].iter().product()])
    } else {
        Ok(last)
    }
}

/// MIM training objective over every tap of a network.
#[derive(Clone, Debug)]
pub struct MimObjective {
    pub cfg: MimConfig,
    blender: PriorBlender,
}

impl MimObjective {
    pub fn new(cfg: MimConfig) -> Result<Self> {
        cfg.validate()?;
        let blender = PriorBlender::new(cfg.prior_mode);
        Ok(Self { cfg, blender })
    }
}

impl<S: Scalar> Objective<S> for MimObjective {
    fn name(&self) -> &'static str {
        match self.cfg.penalty {
            PriorPenalty::V1 => "mim-v1",
            PriorPenalty::V2 => "mim-v2",
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
        let xv = tape.constant(x.clone());
        let fwd = net.forward_bound(tape, bound, xv, Mode::Train)?;
        let sc = collect_states(tape, &fwd.states, &self.cfg)?;
        let rc = if self.cfg.beta > 0.0 {
            let clean = smoothness_state(tape, &fwd.states, &self.cfg)?;
            let sample = sample_smoothness(x, self.cfg.noise_sigma, rng)?;
            let cfg = self.cfg.clone();
            Some(smoothness_penalty(tape, x, clean, &sample, |t, xp| {
                let f = net.forward_bound(t, bound, xp, Mode::TrainFrozenStats)?;
                smoothness_state(t, &f.states, &cfg)
            })?)
        } else {
            None
        };
        let parts = mim_loss(tape, &sc, &self.cfg, rc, &mut self.blender)?;
        Ok(Evaluation { parts, stats: fwd.stats })
    }
}
