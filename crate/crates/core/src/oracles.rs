//! Brute-force reference computations used to cross-check the main
//! implementations.
//!
//! Nothing here calls into the objective code. The finite-difference side of
//! [`theorem1_check`] runs its own plain forward pass over a copy of the
//! network weights, so the analytic gradients from the tape are compared
//! against an independent evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bayes::PosteriorBatch;
use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, LayerSpec, Mode, Network, NetworkSpec};
use crate::tape::{GradientMap, ParamId, Tape};
use crate::tensor::Tensor;

/// Joint probabilities `p(x_i, z = k)` over a finite set of atoms.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    rows: usize,
    cols: usize,
    cells: Vec<f64>,
}

impl JointTable {
    pub fn new(rows: usize, cols: usize, cells: Vec<f64>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::dim("JointTable", format!("{} cells for {rows}x{cols}", cells.len())));
        }
        if cells.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::domain("JointTable", "negative or NaN probability"));
        }
        let total: f64 = cells.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::domain("JointTable", format!("cells sum to {total}")));
        }
        Ok(JointTable { rows, cols, cells })
    }

    /// Uniform weight on each posterior row: `p(x_i, k) = L_k(x_i) / B`.
    pub fn from_posterior(p: &PosteriorBatch) -> Result<Self> {
        let b = p.batch() as f64;
        let cells = p.values().data().iter().map(|&l| l / b).collect();
        Self::new(p.batch(), p.states(), cells)
    }

    pub fn cell(&self, i: usize, k: usize) -> f64 {
        self.cells[i * self.cols + k]
    }

    /// Mutual information between the row and column variables. Sums run
    /// over sorted terms, so the result does not depend on atom order.
    pub fn mutual_information(&self) -> f64 {
        let px: Vec<f64> = (0..self.rows).map(|i| (0..self.cols).map(|k| self.cell(i, k)).sum()).collect();
        let pz: Vec<f64> = (0..self.cols).map(|k| sorted_sum((0..self.rows).map(|i| self.cell(i, k)).collect())).collect();
        let mut terms = Vec::with_capacity(self.rows * self.cols);
        for (k, &zk) in pz.iter().enumerate() {
            for (i, &xi) in px.iter().enumerate() {
                let j = self.cell(i, k);
                if j > 0.0 {
                    terms.push(j * (j / (xi * zk)).ln());
                }
            }
        }
        sorted_sum(terms)
    }
}

fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Mutual information of the joint table implied by a posterior batch.
pub fn brute_force_mi(p: &PosteriorBatch) -> Result<f64> {
    Ok(JointTable::from_posterior(p)?.mutual_information())
}

fn check_simplex(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::domain("js_divergence_discrete", format!("{name} has a negative or NaN entry")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::domain("js_divergence_discrete", format!("{name} sums to {s}")));
    }
    Ok(())
}

/// Jensen-Shannon divergence between two distributions on the same atoms,
/// in nats.
pub fn js_divergence_discrete(w0: &[f64], w1: &[f64]) -> Result<f64> {
    if w0.len() != w1.len() {
        return Err(Error::dim("js_divergence_discrete", format!("{} vs {} atoms", w0.len(), w1.len())));
    }
    check_simplex("w0", w0)?;
    check_simplex("w1", w1)?;
    let kl_part = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut total = 0.0;
    for (&a, &b) in w0.iter().zip(w1) {
        let m = 0.5 * (a + b);
        total += 0.5 * (kl_part(a, m) + kl_part(b, m));
    }
    Ok(total)
}

/// Central finite-difference gradient of `loss` with respect to every entry
/// of `params`, keyed by position.
pub fn finite_diff_grad<F>(mut loss: F, params: &[Tensor<f64>], h: f64) -> Result<GradientMap<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::arg(format!("step size must be positive, got {h}")));
    }
    let mut work = params.to_vec();
    let mut out = GradientMap::new();
    for (p, param) in params.iter().enumerate() {
        let mut g = vec![0.0; param.len()];
        for j in 0..param.len() {
            let orig = param.data()[j];
            let mut eval = |v: f64, sign: &str| -> Result<f64> {
                work[p].data_mut()[j] = v;
                let f = loss(&work);
                if !f.is_finite() {
                    return Err(Error::NonFinite { context: format!("parameter {p}, entry {j}, {sign}h"), value: f });
                }
                Ok(f)
            };
            let up = eval(orig + h, "+")?;
            let down = eval(orig - h, "-")?;
            work[p].data_mut()[j] = orig;
            g[j] = (up - down) / (2.0 * h);
        }
        out.insert(ParamId(p), Tensor::new(param.shape().to_vec(), g)?);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum PlainLayer {
    Dense { w: usize, b: usize, inputs: usize, outputs: usize },
    Tanh,
    Relu,
    Softmax,
}

/// Row-major forward pass over raw weights; `params` follow the network's
/// parameter order.
fn plain_forward(layers: &[PlainLayer], params: &[Tensor<f64>], x: &[f64], batch: usize) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in layers {
        h = match *layer {
            PlainLayer::Dense { w, b, inputs, outputs } => {
                let (w, b) = (params[w].data(), params[b].data());
                let mut out = vec![0.0; batch * outputs];
                for i in 0..batch {
                    for o in 0..outputs {
                        let mut s = b[o];
                        for c in 0..inputs {
                            s += w[o * inputs + c] * h[i * inputs + c];
                        }
                        out[i * outputs + o] = s;
                    }
                }
                out
            }
            PlainLayer::Tanh => h.iter().map(|v| v.tanh()).collect(),
            PlainLayer::Relu => h.iter().map(|v| v.max(0.0)).collect(),
            PlainLayer::Softmax => {
                let k = h.len() / batch;
                let mut out = h.clone();
                for row in out.chunks_mut(k) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= z;
                    }
                }
                out
            }
        };
    }
    h
}

fn plain_layers(net: &Network<f64>) -> Result<Vec<PlainLayer>> {
    let mut next = 0;
    let mut out = Vec::new();
    for (spec, layer) in net.spec().layers.iter().zip(net.layers()) {
        out.push(match (spec, layer) {
            (LayerSpec::Dense { inputs, outputs }, Layer::Dense(_)) => {
                next += 2;
                PlainLayer::Dense { w: next - 2, b: next - 1, inputs: *inputs, outputs: *outputs }
            }
            (LayerSpec::Tanh, _) => PlainLayer::Tanh,
            (LayerSpec::Relu, _) => PlainLayer::Relu,
            (LayerSpec::Softmax, _) => PlainLayer::Softmax,
            (other, _) => {
                return Err(Error::arg(format!("theorem1_check supports dense, tanh, relu and softmax layers, found {other:?}")))
            }
        });
    }
    if !matches!(out.last(), Some(PlainLayer::Softmax)) {
        return Err(Error::arg("theorem1_check needs a softmax output"));
    }
    Ok(out)
}

/// `-(1/B) sum_i sum_k L_ik log(L_ik / mean_i L_ik)` evaluated directly.
fn live_objective(l: &[f64], batch: usize) -> f64 {
    let k = l.len() / batch;
    let mut prior = vec![0.0; k];
    for row in l.chunks(k) {
        for (p, &v) in prior.iter_mut().zip(row) {
            *p += v;
        }
    }
    prior.iter_mut().for_each(|p| *p /= batch as f64);
    let mut total = 0.0;
    for row in l.chunks(k) {
        for (&v, &p) in row.iter().zip(&prior) {
            total += v * (v / p).ln();
        }
    }
    -total / batch as f64
}

/// Which factor of the objective is detached on the analytic side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopBranch {
    /// Detach the log argument: the simplified objective.
    LogArgument,
    /// Detach the posterior factor in front of the log. Its gradient is
    /// identically zero, so the check must fail.
    LiveFactor,
}

/// Maximum over parameters of `|a - f| / max(1, |a|)`, where `a` is the tape
/// gradient of the detached objective and `f` the central difference of the
/// fully live objective, both on the full batch `x`.
pub fn theorem1_check(net: &Network<f64>, x: &Tensor<f64>, branch: StopBranch) -> Result<f64> {
    let layers = plain_layers(net)?;
    let batch = x.rows();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let l = net.forward(&mut tape, xv, Mode::Eval)?.output;
    if let Some(bad) = tape.value(l).data().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::domain(
            "theorem1_check",
            format!("posterior entry {bad} is {}; the check needs strictly positive posteriors", tape.value(l).data()[bad]),
        ));
    }
    let prior = tape.mean_rows(l)?;
    let ratio = tape.div(l, prior)?;
    let loss = match branch {
        StopBranch::LogArgument => {
            let detached = tape.stop_gradient(ratio);
            let lr = tape.log(detached)?;
            tape.mul(l, lr)?
        }
        StopBranch::LiveFactor => {
            let lr = tape.log(ratio)?;
            let detached = tape.stop_gradient(l);
            tape.mul(detached, lr)?
        }
    };
    let total = tape.sum_all(loss);
    let j_hat = tape.mul_scalar(total, -1.0 / batch as f64);
    let analytic = tape.backward(j_hat)?;

    let params: Vec<Tensor<f64>> = net.params().into_iter().cloned().collect();
    let numeric = finite_diff_grad(|p| live_objective(&plain_forward(&layers, p, x.data(), batch), batch), &params, 1e-5)?;
    Ok(analytic.max_rel_diff(&numeric))
}

/// A random small tanh network with a softmax head and a random input batch.
pub fn random_theorem1_case(seed: u64) -> Result<(Network<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(1..=3);
    let input = rng.random_range(2..=8);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=32)).collect();
    let k = rng.random_range(2..=8);
    let batch = rng.random_range(2..=64);
    let spec = NetworkSpec::mlp(input, &hidden, Some(k), false, Activation::Tanh, rng.random());
    let mut net = Network::new(spec)?;
    for p in net.params_mut() {
        let is_bias = p.ndim() == 1;
        for v in p.data_mut() {
            *v = if is_bias { 0.5 * rng.sample::<f64, _>(StandardNormal) } else { 2.0 * *v };
        }
    }
    let x: Vec<f64> = (0..batch * input).map(|_| rng.sample(StandardNormal)).collect();
    Ok((net, Tensor::new([batch, input], x)?))
}

/// A strictly interior posterior batch with `B <= max_b`, `K <= max_k`.
pub fn random_posterior_batch(rng: &mut ChaCha8Rng, max_b: usize, max_k: usize) -> PosteriorBatch {
    let b = rng.random_range(1..=max_b);
    let k = rng.random_range(2..=max_k);
    let scale = rng.random_range(0.1..4.0);
    let mut rows = Vec::with_capacity(b);
    for _ in 0..b {
        let logits: Vec<f64> = (0..k).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        rows.push(e.iter().map(|v| v / z).collect::<Vec<f64>>());
    }
    PosteriorBatch::new(Tensor::from_rows(&rows).expect("rectangular")).expect("rows are distributions")
}

/// One line of the verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub case_id: String,
    pub max_rel_diff: f64,
    pub pass: bool,
}

impl GradcheckCase {
    fn new(case_id: String, diff: f64, tol: f64) -> Self {
        GradcheckCase { case_id, max_rel_diff: diff, pass: diff <= tol }
    }
}

/// Settings of [`run_suite`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub seed: u64,
    pub cases: usize,
    /// Run the gradient check with the wrong branch detached; those cases
    /// are expected to fail.
    pub negative_control: bool,
}

/// Runs the oracle comparisons: closed-form against brute-force mutual
/// information, gradient equality on random networks, the binary manifold
/// objective against the Jensen-Shannon divergence, and softmax
/// cross-entropy gradients against finite differences.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<GradcheckCase>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for c in 0..opts.cases {
        let case_seed: u64 = rng.random();
        let mut case_rng = ChaCha8Rng::seed_from_u64(case_seed);

        let p = random_posterior_batch(&mut case_rng, 64, 8);
        let diff = (crate::mim::mi_closed_form(&p, 0.0) - brute_force_mi(&p)?).abs();
        out.push(GradcheckCase::new(format!("mi-{c}"), diff, 1e-10));

        let (net, x) = random_theorem1_case(case_seed)?;
        let branch = if opts.negative_control { StopBranch::LiveFactor } else { StopBranch::LogArgument };
        let diff = theorem1_check(&net, &x, branch)?;
        let id = if opts.negative_control { format!("theorem1-control-{c}") } else { format!("theorem1-{c}") };
        out.push(GradcheckCase::new(id, diff, 1e-4));

        let b = case_rng.random_range(2..=64);
        let l: Vec<f64> = (0..b).map(|_| case_rng.random_range(0.01..0.99)).collect();
        let prior = l.iter().sum::<f64>() / b as f64;
        let w1: Vec<f64> = l.iter().map(|v| v / (b as f64 * prior)).collect();
        let w0: Vec<f64> = l.iter().map(|v| (1.0 - v) / (b as f64 * (1.0 - prior))).collect();
        let s1: f64 = w1.iter().sum();
        let s0: f64 = w0.iter().sum();
        let w1: Vec<f64> = w1.iter().map(|v| v / s1).collect();
        let w0: Vec<f64> = w0.iter().map(|v| v / s0).collect();
        let js = js_divergence_discrete(&w0, &w1)?;
        let diff = (crate::dml::dml_binary_objective(&l, prior)? - js).abs();
        out.push(GradcheckCase::new(format!("js-{c}"), diff, 1e-10));

        let (rows, cols) = (case_rng.random_range(1..=6), case_rng.random_range(2..=6));
        let logits = Tensor::new([rows, cols], (0..rows * cols).map(|_| case_rng.sample(StandardNormal)).collect())?;
        let labels: Vec<usize> = (0..rows).map(|_| case_rng.random_range(0..cols)).collect();
        let mut tape = Tape::new();
        let z = tape.param(logits.clone(), ParamId(0));
        let loss = tape.softmax_cross_entropy(z, &labels)?;
        let analytic = tape.backward(loss)?;
        let numeric = finite_diff_grad(|p| plain_cross_entropy(&p[0], &labels), std::slice::from_ref(&logits), 1e-5)?;
        out.push(GradcheckCase::new(format!("fd-xent-{c}"), analytic.max_rel_diff(&numeric), 1e-6));
    }
    Ok(out)
}

fn plain_cross_entropy(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let k = logits.row_len();
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[Vec<f64>]) -> PosteriorBatch {
        PosteriorBatch::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn mi_examples() {
        let constant = batch(&[vec![0.2, 0.8], vec![0.2, 0.8], vec![0.2, 0.8]]);
        assert!(brute_force_mi(&constant).unwrap().abs() < 1e-15);
        let eye = batch(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!((brute_force_mi(&eye).unwrap() - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn js_examples() {
        let w = [0.25, 0.25, 0.5];
        assert_eq!(js_divergence_discrete(&w, &w).unwrap(), 0.0);
        let a = [0.5, 0.5, 0.0, 0.0];
        let b = [0.0, 0.0, 0.3, 0.7];
        assert!((js_divergence_discrete(&a, &b).unwrap() - 2f64.ln()).abs() < 1e-15);
        let c = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(js_divergence_discrete(&a, &c).unwrap(), js_divergence_discrete(&c, &a).unwrap());
        assert!(js_divergence_discrete(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence_discrete(&[-0.5, 1.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn finite_differences() {
        let theta = [Tensor::from_vec(vec![3.0]).unwrap()];
        let g = finite_diff_grad(|p| p[0].data()[0].powi(2), &theta, 1e-5).unwrap();
        assert!((g.get(ParamId(0)).unwrap().data()[0] - 6.0).abs() < 1e-8);
        for h in [1e-1, 1e-3, 1.0] {
            let g = finite_diff_grad(|p| 4.0 * p[0].data()[0] - 1.0, &theta, h).unwrap();
            assert!((g.get(ParamId(0)).unwrap().data()[0] - 4.0).abs() < 1e-12);
        }
        let err = finite_diff_grad(|p| if p[0].data()[0] > 3.0 { f64::NAN } else { 0.0 }, &theta, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref context, .. } if context.contains("entry 0")), "{err}");
    }

    #[test]
    fn cross_entropy_gradient_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::new([3, 4], (0..12).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        let labels = [0, 3, 1];
        let g = finite_diff_grad(|p| plain_cross_entropy(&p[0], &labels), std::slice::from_ref(&logits), 1e-5).unwrap();
        let g = g.get(ParamId(0)).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                let want = (row[j].exp() / z - if j == y { 1.0 } else { 0.0 }) / 3.0;
                assert!((g.at(i, j) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn theorem1_on_random_nets() {
        for seed in 0..5 {
            let (net, x) = random_theorem1_case(seed).unwrap();
            let d = theorem1_check(&net, &x, StopBranch::LogArgument).unwrap();
            assert!(d <= 1e-4, "seed {seed}: {d}");
            let bad = theorem1_check(&net, &x, StopBranch::LiveFactor).unwrap();
            assert!(bad > 1e-2, "seed {seed}: {bad}");
        }
    }

    #[test]
    fn theorem1_single_sample() {
        let (net, x) = random_theorem1_case(11).unwrap();
        let one = x.select_rows(&[0]);
        assert!(theorem1_check(&net, &one, StopBranch::LogArgument).unwrap() <= 1e-4);
    }

    #[test]
    fn theorem1_rejects_unsupported_layers() {
        let spec = NetworkSpec::mlp(2, &[3], Some(2), true, Activation::Relu, 0);
        let net = Network::new(spec).unwrap();
        assert!(theorem1_check(&net, &Tensor::zeros([2, 2]), StopBranch::LogArgument).is_err());
    }

    #[test]
    fn suite_passes() {
        let cases = run_suite(&SuiteOptions { seed: 1, cases: 3, negative_control: false }).unwrap();
        assert_eq!(cases.len(), 12);
        assert!(cases.iter().all(|c| c.pass), "{cases:?}");
        let control = run_suite(&SuiteOptions { seed: 1, cases: 3, negative_control: true }).unwrap();
        let (wrong, rest): (Vec<_>, Vec<_>) = control.iter().partition(|c| c.case_id.starts_with("theorem1-control"));
        assert!(wrong.iter().all(|c| !c.pass && c.max_rel_diff > 1e-2), "{wrong:?}");
        assert!(rest.iter().all(|c| c.pass));
    }
}
