//! Optimization: Adam, the mini-batch / accumulation-window training loop,
//! linear probes and clustering accuracy.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ManifoldDataset, Standardizer};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Mode, Network, NetworkSpec};
use crate::objective::{Objective, ObjectiveReport};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, GradientMap, ParamId, Tape};
use crate::tensor::Tensor;

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S: Scalar = f64> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    first: Vec<Tensor<S>>,
    second: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.second
    }
}

/// Applies one Adam update to `params`, whose gradients are keyed by their
/// position (`ParamId(i)` for `params[i]`).
pub fn adam_step<S: Scalar>(params: &mut [&mut Tensor<S>], grads: &GradientMap<S>, state: &mut AdamState<S>) -> Result<()> {
    if state.first.is_empty() {
        state.first = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::dim("adam_step", format!("state has {} moments, got {} parameters", state.first.len(), params.len())));
    }
    for (i, p) in params.iter().enumerate() {
        let g = grads.get(ParamId(i)).ok_or_else(|| Error::arg(format!("missing gradient for parameter {i}")))?;
        if g.shape() != p.shape() || state.first[i].shape() != p.shape() {
            return Err(Error::dim("adam_step", format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(state.beta1), S::of(state.beta2));
    let c1 = S::one() - S::of(state.beta1.powi(t));
    let c2 = S::one() - S::of(state.beta2.powi(t));
    let (lr, eps) = (S::of(state.lr), S::of(state.eps));
    let decay = S::one() - S::of(state.lr * state.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.get(ParamId(i)).expect("checked above");
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j];
            m[j] = b1 * m[j] + (S::one() - b1) * gj;
            v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
            if state.weight_decay > 0.0 {
                *w *= decay;
            }
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Mini-batch size, accumulation window and epoch count.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccumulationSchedule {
    pub mbs: usize,
    pub bs: usize,
    pub epochs: usize,
}

impl AccumulationSchedule {
    pub fn new(mbs: usize, bs: usize, epochs: usize) -> Result<Self> {
        let s = AccumulationSchedule { mbs, bs, epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mbs == 0 {
            return Err(Error::Config("mini-batch size must be at least 1".into()));
        }
        if self.bs < self.mbs || !self.bs.is_multiple_of(self.mbs) {
            return Err(Error::Config(format!(
                "batch size {} must be a multiple of the mini-batch size {}",
                self.bs, self.mbs
            )));
        }
        Ok(())
    }

    /// Mini-batches averaged into one update.
    pub fn window(&self) -> usize {
        self.bs / self.mbs
    }
}

/// Per-update loss reports plus the run's identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub config: serde_json::Value,
    pub reports: Vec<ObjectiveReport>,
    /// Excluded from the JSON-lines output so logs stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Serialize)]
struct LogHeader<'a> {
    seed: u64,
    config: &'a serde_json::Value,
}

impl TrainLog {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        TrainLog { seed, config, reports: Vec::new(), wall_clock_secs: 0.0 }
    }

    /// Header line with seed and config, then one line per update.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &LogHeader { seed: self.seed, config: &self.config })?;
        writeln!(w)?;
        for r in &self.reports {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean total loss of the last `n` updates.
    pub fn tail_loss(&self, n: usize) -> Option<f64> {
        let tail: Vec<f64> = self.reports.iter().rev().take(n.max(1)).map(|r| r.total).collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }

    /// Long-format `step,term,value` table.
    pub fn write_metrics_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "term", "value"])?;
        for r in &self.reports {
            for (term, v) in [("mi", r.mi_term), ("prior", r.prior_term), ("smooth", r.smooth_term), ("total", r.total)] {
                w.write_record([r.step.to_string(), term.to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// What a hook asks the training loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Batch statistics of one batch-norm layer, keyed by layer position.
pub type LayerStats<S> = (usize, BatchStats<S>);

/// Callback run after every epoch of [`train_objective`].
pub type EpochHook<'a, S> = dyn FnMut(usize, &Network<S>, &TrainLog) -> Result<Control> + 'a;

/// Gradient and report of `objective` on one mini-batch. Batch-norm
/// statistics of the clean pass are returned for the running estimates.
pub fn minibatch_gradient<S: Scalar>(
    net: &Network<S>,
    objective: &mut dyn Objective<S>,
    x: &Tensor<S>,
    rng: &mut ChaCha8Rng,
) -> Result<(GradientMap<S>, ObjectiveReport, Vec<LayerStats<S>>)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let eval = objective.build(&mut tape, net, &bound, x, rng)?;
    let report = eval.parts.report(&tape, 0);
    if !report.total.is_finite() {
        return Err(Error::NonFinite { context: format!("{} loss", objective.name()), value: report.total });
    }
    let grads = tape.backward(eval.parts.total)?;
    Ok((grads, report, eval.stats))
}

/// Rows `idx` of `data` shaped for the network's input layer.
fn input_batch<S: Scalar>(net: &Network<S>, data: &ManifoldDataset, idx: &[usize]) -> Result<Tensor<S>> {
    let input = &net.spec().input_shape;
    if input.iter().product::<usize>() != data.dim() {
        return Err(Error::dim("network input", format!("network expects {input:?} per sample, data rows have {}", data.dim())));
    }
    let mut shape = vec![idx.len()];
    shape.extend(input);
    data.points.select_rows(idx).cast::<S>().reshape(shape)
}

/// Trains `net` on `data` with the mini-batch / accumulation-window scheme.
///
/// Each epoch visits a seeded shuffle of the data in mini-batches of `mbs`
/// samples, dropping the incomplete tail. Gradients of `bs / mbs` consecutive
/// mini-batches are averaged before every Adam update; the window may span
/// an epoch boundary. `on_epoch` runs after every epoch and may stop early.
pub fn train_objective<S: Scalar>(
    net: &mut Network<S>,
    data: &ManifoldDataset,
    objective: &mut dyn Objective<S>,
    sched: &AccumulationSchedule,
    opt: &mut AdamState<S>,
    seed: u64,
    config: serde_json::Value,
    on_epoch: &mut EpochHook<'_, S>,
) -> Result<TrainLog> {
    sched.validate()?;
    let n = data.len();
    if n < sched.mbs {
        return Err(Error::Config(format!("{n} samples cannot fill a mini-batch of {}", sched.mbs)));
    }
    let start = Instant::now();
    let mut log = TrainLog::new(seed, config);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let window = sched.window();
    let scale = S::one() / S::of(window as f64);
    let mut acc = GradientMap::new();
    let mut pending = Vec::with_capacity(window);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..sched.epochs {
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks_exact(sched.mbs) {
            let x = input_batch(net, data, idx)?;
            let (g, report, stats) = minibatch_gradient(net, objective, &x, &mut noise_rng)?;
            net.update_running_stats(&stats)?;
            acc.accumulate(&g)?;
            pending.push(report);
            if pending.len() == window {
                acc.scale(scale);
                adam_step(&mut net.params_mut(), &acc, opt)?;
                log.reports.push(ObjectiveReport::mean(&pending, log.reports.len() + 1));
                acc = GradientMap::new();
                pending.clear();
            }
        }
        if on_epoch(epoch, net, &log)? == Control::Stop {
            break;
        }
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// How many independent runs to try and when a run is good enough to stop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartPolicy {
    pub max_runs: usize,
    /// Stop once a run's final loss is at or below this value.
    pub target_loss: Option<f64>,
}

/// Outcome of [`best_of_restarts`].
#[derive(Clone, Debug)]
pub struct RestartOutcome<T> {
    pub best_run: usize,
    pub best_loss: f64,
    pub losses: Vec<f64>,
    pub best: T,
}

/// Calls `run(i)` for `i = 0, 1, ...` and keeps the result with the lowest
/// returned loss. Runs with a non-finite loss never win.
pub fn best_of_restarts<T>(policy: &RestartPolicy, mut run: impl FnMut(usize) -> Result<(f64, T)>) -> Result<RestartOutcome<T>> {
    if policy.max_runs == 0 {
        return Err(Error::Config("at least one run is required".into()));
    }
    let mut best: Option<(usize, f64, T)> = None;
    let mut losses = Vec::new();
    for i in 0..policy.max_runs {
        let (loss, value) = run(i)?;
        losses.push(loss);
        if loss.is_finite() && best.as_ref().is_none_or(|b| loss < b.1) {
            best = Some((i, loss, value));
        }
        if policy.target_loss.is_some_and(|t| loss <= t) {
            break;
        }
    }
    let (best_run, best_loss, best) =
        best.ok_or_else(|| Error::NonFinite { context: "every restart".into(), value: f64::NAN })?;
    Ok(RestartOutcome { best_run, best_loss, losses, best })
}

/// Hook that never stops training.
pub fn no_hook<S: Scalar>(_: usize, _: &Network<S>, _: &TrainLog) -> Result<Control> {
    Ok(Control::Continue)
}

/// Eval-mode activations of `tap` (`"hN"`, `"last"` or `"output"`) for every
/// sample, flattened to `[N, d]` and returned in `f64`.
pub fn extract_features<S: Scalar>(net: &Network<S>, data: &ManifoldDataset, tap: &str, chunk: usize) -> Result<Tensor<f64>> {
    let which = if tap == "output" { None } else { Some(net.spec().tap_index(tap)?) };
    let mut out = Vec::new();
    let mut width = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk.max(1)) {
        let (output, states) = net.forward_with_states(&input_batch(net, data, part)?, Mode::Eval)?;
        let t = match which {
            None => output,
            Some(i) => states.into_iter().nth(i).expect("tap index validated"),
        };
        width = t.len() / part.len();
        out.extend(t.data().iter().map(|v| v.as_f64()));
    }
    Tensor::new([data.len(), width], out)
}

/// Replaces every batch-norm running estimate with statistics of the whole
/// dataset, processed in chunks and averaged.
pub fn calibrate_batch_norm<S: Scalar>(net: &mut Network<S>, data: &ManifoldDataset, chunk: usize) -> Result<()> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(chunk.max(2)).filter(|c| c.len() >= 2).collect();
    let mut sums: Vec<(usize, BatchStats<S>)> = Vec::new();
    for part in &chunks {
        let mut tape = Tape::new();
        let x = tape.constant(input_batch(net, data, part)?);
        let f = net.forward(&mut tape, x, Mode::Train)?;
        if sums.is_empty() {
            sums = f.stats;
        } else {
            for ((_, acc), (_, s)) in sums.iter_mut().zip(&f.stats) {
                acc.mean.iter_mut().zip(&s.mean).for_each(|(a, &b)| *a += b);
                acc.var.iter_mut().zip(&s.var).for_each(|(a, &b)| *a += b);
            }
        }
    }
    let k = S::of(chunks.len() as f64);
    for (i, s) in &sums {
        if let Some(crate::nn::Layer::BatchNorm(bn)) = net.layers_mut().get_mut(*i) {
            bn.running_mean.data_mut().iter_mut().zip(&s.mean).for_each(|(r, &m)| *r = m / k);
            bn.running_var.data_mut().iter_mut().zip(&s.var).for_each(|(r, &v)| *r = v / k);
        }
    }
    Ok(())
}

/// Settings of the probe classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Hidden units; 0 gives a purely linear classifier.
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { hidden: 200, epochs: 30, lr: 1e-3, batch: 128, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn check_labels(features: &Tensor<f64>, labels: &[usize]) -> Result<usize> {
    let (n, _) = features.matrix_dims("linear_probe")?;
    if n != labels.len() {
        return Err(Error::dim("linear_probe", format!("{n} feature rows but {} labels", labels.len())));
    }
    Ok(n)
}

fn argmax_rows(t: &Tensor<f64>) -> Vec<usize> {
    (0..t.rows())
        .map(|i| t.row(i).iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0)
        .collect()
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Trains a one-hidden-layer softmax classifier on frozen features and
/// reports accuracy on the training and held-out sets. Features are
/// standardized with training-set statistics.
pub fn linear_probe(
    train: (&Tensor<f64>, &[usize]),
    test: (&Tensor<f64>, &[usize]),
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let n = check_labels(train.0, train.1)?;
    check_labels(test.0, test.1)?;
    let d = train.0.row_len();
    if test.0.row_len() != d {
        return Err(Error::dim("linear_probe", format!("train features have {d} columns, test {}", test.0.row_len())));
    }
    let classes = train.1.iter().chain(test.1).max().map_or(1, |m| m + 1).max(2);
    let st = Standardizer::fit(train.0)?;
    let (xtr, xte) = (st.apply(train.0)?, st.apply(test.0)?);
    let layers = if cfg.hidden == 0 {
        vec![LayerSpec::Dense { inputs: d, outputs: classes }]
    } else {
        vec![
            LayerSpec::Dense { inputs: d, outputs: cfg.hidden },
            LayerSpec::Relu,
            LayerSpec::Dense { inputs: cfg.hidden, outputs: classes },
        ]
    };
    let mut net = Network::<f64>::new(NetworkSpec { input_shape: vec![d], layers, taps: vec![], seed: cfg.seed })?;
    let mut opt = AdamState::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch.max(1)) {
            let mut tape = Tape::new();
            let x = tape.constant(xtr.select_rows(idx));
            let f = net.forward(&mut tape, x, Mode::Train)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.1[i]).collect();
            let loss = tape.softmax_cross_entropy(f.output, &labels)?;
            let g = tape.backward(loss)?;
            adam_step(&mut net.params_mut(), &g, &mut opt)?;
        }
    }
    let predict = |x: &Tensor<f64>| -> Result<Vec<usize>> { Ok(argmax_rows(&net.forward_with_states(x, Mode::Eval)?.0)) };
    Ok(ProbeResult {
        train_accuracy: accuracy(&predict(&xtr)?, train.1),
        test_accuracy: accuracy(&predict(&xte)?, test.1),
    })
}

/// Hard labels from posterior rows: argmax, or a 0.5 threshold for a single
/// column.
pub fn assign_labels(l: &Tensor<f64>) -> Vec<usize> {
    if l.row_len() == 1 {
        l.data().iter().map(|&v| usize::from(v >= 0.5)).collect()
    } else {
        argmax_rows(l)
    }
}

/// Best agreement between `pred` and `truth` over all relabelings of `pred`.
pub fn cluster_accuracy(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if k > 8 {
        return Err(Error::arg(format!("cluster_accuracy supports k <= 8, got {k}")));
    }
    if pred.len() != truth.len() {
        return Err(Error::dim("cluster_accuracy", format!("{} predictions, {} labels", pred.len(), truth.len())));
    }
    if let Some(bad) = pred.iter().chain(truth).find(|&&v| v >= k) {
        return Err(Error::arg(format!("label {bad} outside 0..{k}")));
    }
    let mut counts = vec![0usize; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p * k + t] += 1;
    }
    let best = (0..k)
        .permutations(k)
        .map(|perm| perm.iter().enumerate().map(|(p, &t)| counts[p * k + t]).sum::<usize>())
        .max()
        .unwrap_or(0);
    Ok(if pred.is_empty() { 0.0 } else { best as f64 / pred.len() as f64 })
}
