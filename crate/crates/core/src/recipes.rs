//! Ready-made training protocols shared by the command-line tool and the
//! test suites: the fully connected DML labeler with seeded restarts and the
//! MIM encoder.

use serde::{Deserialize, Serialize};

use crate::data::ManifoldDataset;
use crate::dml::{batch_mean, dml_binary_objective, DmlConfig, DmlObjective};
use crate::error::{Error, Result};
use crate::mim::{MimConfig, MimObjective};
use crate::nn::{Activation, Network, NetworkSpec};
use crate::scalar::Scalar;
use crate::train::{
    assign_labels, best_of_restarts, cluster_accuracy, extract_features, no_hook, train_objective, AccumulationSchedule,
    AdamState, RestartPolicy, TrainLog,
};

/// Lowest reachable DML training loss: 0 for the binary loss, `-log 2` for
/// the multi-partition loss.
pub fn optimal_dml_loss(partitions: usize) -> f64 {
    if partitions == 2 {
        0.0
    } else {
        -std::f64::consts::LN_2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmlRecipe {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub objective: DmlConfig,
    pub mbs: usize,
    pub bs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs of every restart.
    pub epochs: usize,
    pub restarts: usize,
    /// Training loss that ends the restart loop early. `None` means
    /// `optimal_dml_loss + 0.02`.
    pub target_loss: Option<f64>,
    /// Updates averaged into a run's final loss.
    pub tail: usize,
}

impl Default for DmlRecipe {
    fn default() -> Self {
        DmlRecipe {
            hidden: vec![400; 4],
            batch_norm: true,
            objective: DmlConfig::default(),
            mbs: 400,
            bs: 400,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 100,
            restarts: 5,
            target_loss: None,
            tail: 25,
        }
    }
}

impl DmlRecipe {
    pub fn total_epochs(&self) -> usize {
        self.epochs * self.restarts
    }

    fn target(&self) -> f64 {
        self.target_loss.unwrap_or(optimal_dml_loss(self.objective.partitions) + 0.02)
    }
}

/// Result of [`fit_dml`].
#[derive(Clone, Debug)]
pub struct DmlFit {
    pub net: Network<f64>,
    pub log: TrainLog,
    pub best_run: usize,
    /// Final training loss of every run that was tried.
    pub run_losses: Vec<f64>,
}

/// Trains the DML labeler up to `recipe.restarts` times from different
/// seeds and keeps the run with the lowest final training loss. No labels
/// are consulted.
pub fn fit_dml(ds: &ManifoldDataset, recipe: &DmlRecipe, seed: u64) -> Result<DmlFit> {
    let k = recipe.objective.partitions;
    let sched = AccumulationSchedule::new(recipe.mbs, recipe.bs, recipe.epochs)?;
    let policy = RestartPolicy { max_runs: recipe.restarts, target_loss: Some(recipe.target()) };
    let outcome = best_of_restarts(&policy, |run| {
        let run_seed = seed.wrapping_add(run as u64);
        let spec = NetworkSpec::mlp(ds.dim(), &recipe.hidden, Some(k), recipe.batch_norm, Activation::Relu, run_seed);
        let mut net = Network::<f64>::new(spec)?;
        let mut obj = DmlObjective::new(recipe.objective.clone())?;
        let mut opt = AdamState::new(recipe.lr).with_weight_decay(recipe.weight_decay);
        let config = serde_json::json!({ "recipe": recipe, "run": run });
        let log = train_objective(&mut net, ds, &mut obj, &sched, &mut opt, run_seed, config, &mut no_hook)?;
        let loss = log.tail_loss(recipe.tail).unwrap_or(f64::INFINITY);
        Ok((loss, (net, log)))
    })?;
    let (net, log) = outcome.best;
    Ok(DmlFit { net, log, best_run: outcome.best_run, run_losses: outcome.losses })
}

/// Labels and scores of a trained DML head on a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmlEvaluation {
    pub labels: Vec<usize>,
    pub accuracy: f64,
    /// Jensen-Shannon objective of the first output column; only defined
    /// for binary heads.
    pub binary_objective: Option<f64>,
}

pub fn evaluate_dml<S: Scalar>(net: &Network<S>, ds: &ManifoldDataset) -> Result<DmlEvaluation> {
    let l = extract_features(net, ds, "output", 1000)?;
    let labels = assign_labels(&l);
    let k = l.row_len().max(2);
    let accuracy = cluster_accuracy(&labels, &ds.components, k)?;
    let binary_objective = if l.row_len() == 2 {
        let col: Vec<f64> = (0..l.rows()).map(|i| l.at(i, 0)).collect();
        Some(dml_binary_objective(&col, batch_mean(&col))?)
    } else {
        None
    };
    Ok(DmlEvaluation { labels, accuracy, binary_objective })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MimRecipe {
    /// Compact architecture such as `C(32,3,1,0)-P(2,2,0,max)-FC(200)`; when
    /// absent a fully connected encoder with `hidden` widths is used.
    pub arch: Option<String>,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub objective: MimConfig,
    pub mbs: usize,
    pub bs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for MimRecipe {
    fn default() -> Self {
        MimRecipe {
            arch: None,
            hidden: vec![500; 3],
            batch_norm: false,
            objective: MimConfig::default(),
            mbs: 500,
            bs: 2000,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 20,
        }
    }
}

/// Untrained encoder of the recipe's architecture.
pub fn mim_encoder<S: Scalar>(ds: &ManifoldDataset, recipe: &MimRecipe, seed: u64) -> Result<Network<S>> {
    if let Some(arch) = &recipe.arch {
        return Network::new(NetworkSpec::parse(arch, &ds.sample_shape, seed)?);
    }
    if recipe.hidden.is_empty() {
        return Err(Error::Config("the encoder needs at least one hidden layer".into()));
    }
    Network::new(NetworkSpec::mlp(ds.dim(), &recipe.hidden, None, recipe.batch_norm, Activation::Relu, seed))
}

/// Trains an encoder with the MIM objective applied to every tapped layer.
pub fn fit_mim<S: Scalar>(ds: &ManifoldDataset, recipe: &MimRecipe, seed: u64) -> Result<(Network<S>, TrainLog)> {
    let mut net = mim_encoder::<S>(ds, recipe, seed)?;
    let sched = AccumulationSchedule::new(recipe.mbs, recipe.bs, recipe.epochs)?;
    let mut obj = MimObjective::new(recipe.objective.clone())?;
    let mut opt = AdamState::new(recipe.lr).with_weight_decay(recipe.weight_decay);
    let config = serde_json::json!({ "recipe": recipe, "scalar": S::NAME });
    let log = train_objective(&mut net, ds, &mut obj, &sched, &mut opt, seed, config, &mut no_hook)?;
    Ok((net, log))
}

/// Softmax prior of the last hidden layer over the whole dataset, and the
/// fraction of its units whose prior is below `1 / (10 K)`.
pub fn dead_unit_fraction<S: Scalar>(net: &Network<S>, ds: &ManifoldDataset) -> Result<(Vec<f64>, f64)> {
    let f = extract_features(net, ds, "last", 1000)?;
    let (n, k) = f.matrix_dims("dead_unit_fraction")?;
    let mut prior = vec![0.0; k];
    for i in 0..n {
        let row = f.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for (p, v) in prior.iter_mut().zip(&e) {
            *p += v / z;
        }
    }
    prior.iter_mut().for_each(|p| *p /= n as f64);
    let cutoff = 1.0 / (10.0 * k as f64);
    let dead = prior.iter().filter(|&&p| p < cutoff).count() as f64 / k as f64;
    Ok((prior, dead))
}

/// Fraction of last-layer units that are exactly zero on every sample.
pub fn silent_unit_fraction<S: Scalar>(net: &Network<S>, ds: &ManifoldDataset) -> Result<f64> {
    let f = extract_features(net, ds, "last", 1000)?;
    let (n, k) = f.matrix_dims("silent_unit_fraction")?;
    let silent = (0..k).filter(|&j| (0..n).all(|i| f.at(i, j) == 0.0)).count();
    Ok(silent as f64 / k as f64)
}
