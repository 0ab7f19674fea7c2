use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use neural_bayes::data::ManifoldDataset;
use neural_bayes::dml::{batch_mean, dml_binary_loss_value, dml_multi_loss};
use neural_bayes::mim::{collect_states, PriorPenalty};
use neural_bayes::nn::{Mode, Network};
use neural_bayes::recipes::{dead_unit_fraction, evaluate_dml, fit_dml, fit_mim, DmlRecipe, MimRecipe};
use neural_bayes::tape::Tape;
use neural_bayes::train::{extract_features, TrainLog};
use neural_bayes::Scalar;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::data_cmd::load_standardized;
use crate::error::{CliError, Result};
use crate::output::OutputDir;

/// Runs `f` once with the `--config` file, or once per entry of `--sweep`
/// with outputs in numbered subdirectories.
fn each_config<C: DeserializeOwned + Default>(
    config_path: Option<&Path>,
    sweep: Option<&Path>,
    out_dir: &Path,
    mut f: impl FnMut(C, &Path) -> Result<()>,
) -> Result<()> {
    let Some(sweep) = sweep else {
        return f(config::load(config_path)?, out_dir);
    };
    if config_path.is_some() {
        return Err(CliError::Usage("--config and --sweep cannot be combined".into()));
    }
    for (i, entry) in config::sweep_entries(sweep)?.into_iter().enumerate() {
        let dir = out_dir.join(format!("run-{i:03}"));
        f(config::from_value(entry, sweep)?, &dir)?;
    }
    Ok(())
}

fn save_run<S: Scalar>(out: &mut OutputDir, net: &Network<S>, log: &TrainLog) -> Result<()> {
    net.save(out.path("checkpoint.json"))?;
    out.record("checkpoint.json");
    out.record("checkpoint.bin");
    log.write_jsonl(out.path("log.jsonl"))?;
    out.record("log.jsonl");
    log.write_metrics_csv(out.path("metrics.csv"))?;
    out.record("metrics.csv");
    Ok(())
}

fn required(path: &Option<PathBuf>) -> Result<&Path> {
    path.as_deref().ok_or_else(|| CliError::Usage("--data is required (flag or config key \"data\")".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DmlPreset {
    /// Batch 5000, beta 1, 100 epochs, a single run.
    LargeBatch,
}

#[derive(Args, Debug)]
pub struct TrainDmlArgs {
    /// CSV dataset, or IDX images together with --labels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Number of partitions (output units).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub mbs: Option<usize>,
    #[arg(long)]
    pub bs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs per restart.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long, value_enum)]
    pub preset: Option<DmlPreset>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON array of configs run one after another.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainDmlConfig {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub seed: Option<u64>,
    pub recipe: DmlRecipe,
}

fn resolve_dml(mut cfg: TrainDmlConfig, args: &TrainDmlArgs) -> Result<TrainDmlConfig> {
    let r = &mut cfg.recipe;
    if args.preset == Some(DmlPreset::LargeBatch) {
        r.mbs = 5000;
        r.bs = 5000;
        r.objective.beta = 1.0;
        r.epochs = 100;
        r.restarts = 1;
    }
    if let Some(k) = args.k {
        r.objective.partitions = k;
    }
    r.objective.beta = args.beta.unwrap_or(r.objective.beta);
    r.mbs = args.mbs.unwrap_or(r.mbs);
    r.bs = args.bs.unwrap_or(r.bs);
    r.lr = args.lr.unwrap_or(r.lr);
    r.epochs = args.epochs.unwrap_or(r.epochs);
    r.restarts = args.restarts.unwrap_or(r.restarts);
    if args.data.is_some() {
        cfg.data = args.data.clone();
    }
    if args.labels.is_some() {
        cfg.labels = args.labels.clone();
    }
    cfg.seed = Some(config::resolve_seed(args.seed, cfg.seed)?);
    Ok(cfg)
}

#[derive(Serialize)]
struct DmlSummary {
    accuracy: f64,
    /// Training loss of the trained head on the full dataset.
    loss: f64,
    /// Jensen-Shannon objective of a binary head on the full dataset.
    objective: Option<f64>,
    train_loss: Option<f64>,
    best_run: usize,
    run_losses: Vec<f64>,
    updates: usize,
}

fn full_data_loss(net: &Network<f64>, ds: &ManifoldDataset, eps: f64) -> Result<f64> {
    let l = extract_features(net, ds, "output", 1000)?;
    if l.row_len() == 2 {
        let col: Vec<f64> = (0..l.rows()).map(|i| l.at(i, 0)).collect();
        return Ok(dml_binary_loss_value(&col, batch_mean(&col), eps));
    }
    let mut tape = Tape::new();
    let v = tape.constant(l);
    let loss = dml_multi_loss(&mut tape, v, eps)?;
    Ok(tape.value(loss).item())
}

pub fn run_train_dml(args: &TrainDmlArgs) -> Result<()> {
    each_config(args.config.as_deref(), args.sweep.as_deref(), &args.out_dir, |file: TrainDmlConfig, dir| {
        let cfg = resolve_dml(file, args)?;
        train_dml(&cfg, dir)
    })
}

fn train_dml(cfg: &TrainDmlConfig, dir: &Path) -> Result<()> {
    let ds = load_standardized(required(&cfg.data)?, cfg.labels.as_deref())?;
    let seed = cfg.seed.unwrap_or(0);
    let beta = cfg.recipe.objective.beta;
    if !(0.5..=6.0).contains(&beta) {
        eprintln!("note: beta {beta} is outside the usual range [0.5, 6]");
    }
    let fit = fit_dml(&ds, &cfg.recipe, seed)?;
    let eval = evaluate_dml(&fit.net, &ds)?;
    let summary = DmlSummary {
        accuracy: eval.accuracy,
        loss: full_data_loss(&fit.net, &ds, cfg.recipe.objective.epsilon)?,
        objective: eval.binary_objective,
        train_loss: fit.log.tail_loss(cfg.recipe.tail),
        best_run: fit.best_run,
        run_losses: fit.run_losses.clone(),
        updates: fit.log.reports.len(),
    };
    let mut out = OutputDir::create(dir)?;
    save_run(&mut out, &fit.net, &fit.log)?;
    let mut labels = String::from("index,component,label\n");
    for (i, (c, l)) in ds.components.iter().zip(&eval.labels).enumerate() {
        writeln!(labels, "{i},{c},{l}").expect("writing to a String");
    }
    out.write("labels.csv", labels.as_bytes())?;
    out.write_json("summary.json", &summary)?;
    out.write_json("config.json", cfg)?;
    out.finish("train-dml")?;
    println!(
        "cluster accuracy {:.4}, loss {:.6}, objective {}",
        summary.accuracy,
        summary.loss,
        summary.objective.map_or("n/a".to_string(), |o| format!("{o:.6}"))
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Args, Debug)]
pub struct TrainMimArgs {
    /// CSV dataset, or IDX images together with --labels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub mbs: Option<usize>,
    #[arg(long)]
    pub bs: Option<usize>,
    /// Also apply the objective to average-pooled copies of spatial states.
    #[arg(long, value_enum)]
    pub scales: Option<Switch>,
    /// Use the negative-entropy prior penalty instead of the cross-entropy one.
    #[arg(long)]
    pub v1: bool,
    /// Compact architecture, e.g. "C(32,3,1,0)-P(2,2,0,max)-C(64,3,1,0)".
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// JSON array of configs run one after another.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainMimConfig {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub seed: Option<u64>,
    pub precision: Precision,
    pub recipe: MimRecipe,
}

fn resolve_mim(mut cfg: TrainMimConfig, args: &TrainMimArgs) -> Result<TrainMimConfig> {
    let r = &mut cfg.recipe;
    r.objective.alpha = args.alpha.unwrap_or(r.objective.alpha);
    r.objective.beta = args.beta.unwrap_or(r.objective.beta);
    if let Some(s) = args.scales {
        r.objective.use_scales = s == Switch::On;
    }
    if args.v1 {
        r.objective.penalty = PriorPenalty::V1;
    }
    if args.arch.is_some() {
        r.arch = args.arch.clone();
    }
    r.mbs = args.mbs.unwrap_or(r.mbs);
    r.bs = args.bs.unwrap_or(r.bs);
    r.lr = args.lr.unwrap_or(r.lr);
    r.epochs = args.epochs.unwrap_or(r.epochs);
    cfg.precision = args.precision.unwrap_or(cfg.precision);
    if args.data.is_some() {
        cfg.data = args.data.clone();
    }
    if args.labels.is_some() {
        cfg.labels = args.labels.clone();
    }
    cfg.seed = Some(config::resolve_seed(args.seed, cfg.seed)?);
    Ok(cfg)
}

#[derive(Serialize)]
struct MimSummary {
    final_loss: Option<f64>,
    updates: usize,
    /// Posterior states the objective is applied to.
    states: usize,
    /// Fraction of last-layer units whose prior falls below 1/(10K); only
    /// reported for fully connected encoders.
    dead_unit_fraction: Option<f64>,
}

pub fn run_train_mim(args: &TrainMimArgs) -> Result<()> {
    each_config(args.config.as_deref(), args.sweep.as_deref(), &args.out_dir, |file: TrainMimConfig, dir| {
        let cfg = resolve_mim(file, args)?;
        match cfg.precision {
            Precision::F32 => train_mim::<f32>(&cfg, dir),
            Precision::F64 => train_mim::<f64>(&cfg, dir),
        }
    })
}

fn state_count<S: Scalar>(net: &Network<S>, ds: &ManifoldDataset, cfg: &TrainMimConfig) -> Result<usize> {
    let mut shape = vec![2];
    shape.extend(&net.spec().input_shape);
    let x = ds.points.select_rows(&[0, 1]).cast::<S>().reshape(shape)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let f = net.forward(&mut tape, xv, Mode::Train)?;
    Ok(collect_states(&mut tape, &f.states, &cfg.recipe.objective)?.len())
}

fn train_mim<S: Scalar>(cfg: &TrainMimConfig, dir: &Path) -> Result<()> {
    let ds = load_standardized(required(&cfg.data)?, cfg.labels.as_deref())?;
    if ds.len() < 2 {
        return Err(CliError::Usage("the dataset needs at least two samples".into()));
    }
    let (net, log) = fit_mim::<S>(&ds, &cfg.recipe, cfg.seed.unwrap_or(0))?;
    let dead = if cfg.recipe.arch.is_none() { Some(dead_unit_fraction(&net, &ds)?.1) } else { None };
    let summary = MimSummary {
        final_loss: log.tail_loss(5),
        updates: log.reports.len(),
        states: state_count(&net, &ds, cfg)?,
        dead_unit_fraction: dead,
    };
    let mut out = OutputDir::create(dir)?;
    save_run(&mut out, &net, &log)?;
    out.write_json("summary.json", &summary)?;
    out.write_json("config.json", cfg)?;
    out.finish("train-mim")?;
    println!(
        "final loss {}, {} updates, {} states",
        summary.final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}")),
        summary.updates,
        summary.states
    );
    Ok(())
}
