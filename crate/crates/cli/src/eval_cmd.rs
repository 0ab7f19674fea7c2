use std::path::{Path, PathBuf};

use clap::Args;
use neural_bayes::data::{split, ManifoldDataset, Standardizer};
use neural_bayes::nn::Network;
use neural_bayes::oracles::{run_suite, GradcheckCase, SuiteOptions};
use neural_bayes::tensor::Tensor;
use neural_bayes::train::{extract_features, linear_probe, ProbeConfig};
use serde::Serialize;

use crate::config;
use crate::data_cmd::load_raw;
use crate::error::{CliError, Result};

/// A checkpoint loaded in the precision it was trained in.
pub enum AnyNetwork {
    F32(Network<f32>),
    F64(Network<f64>),
}

impl AnyNetwork {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = config::read_json(path)?;
        match manifest.get("scalar").and_then(|s| s.as_str()) {
            Some("f32") => Ok(AnyNetwork::F32(Network::load(path)?)),
            _ => Ok(AnyNetwork::F64(Network::load(path)?)),
        }
    }

    /// Validates `tap` against the architecture without running anything.
    pub fn check_tap(&self, tap: &str) -> Result<()> {
        if tap != "output" {
            match self {
                AnyNetwork::F32(n) => n.spec().tap_index(tap)?,
                AnyNetwork::F64(n) => n.spec().tap_index(tap)?,
            };
        }
        Ok(())
    }

    pub fn features(&self, ds: &ManifoldDataset, tap: &str) -> Result<Tensor<f64>> {
        Ok(match self {
            AnyNetwork::F32(n) => extract_features(n, ds, tap, 1000)?,
            AnyNetwork::F64(n) => extract_features(n, ds, tap, 1000)?,
        })
    }
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV dataset, or IDX images together with --labels.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Tap to read features from: h0, h1, ..., last or output.
    #[arg(long, default_value = "last")]
    pub layer: String,
    /// Hidden units of the probe; 0 trains a linear classifier.
    #[arg(long, default_value_t = 200)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of samples used to train the probe.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
}

#[derive(Serialize)]
struct ProbeReport {
    layer: String,
    features: usize,
    train_samples: usize,
    test_samples: usize,
    train_accuracy: f64,
    test_accuracy: f64,
}

pub fn run_probe(args: &ProbeArgs) -> Result<()> {
    if !(args.split > 0.0 && args.split < 1.0) {
        return Err(CliError::Usage(format!("--split must lie strictly between 0 and 1, got {}", args.split)));
    }
    let net = AnyNetwork::load(&args.checkpoint)?;
    net.check_tap(&args.layer)?;
    let seed = config::resolve_seed(args.seed, None)?;
    let ds = load_raw(&args.data, args.labels.as_deref())?;
    let parts = split(&ds, &[args.split, 1.0 - args.split], seed)?;
    let st = Standardizer::fit_dataset(&parts[0])?;
    let (train, test) = (&st.apply_to(&parts[0])?, &st.apply_to(&parts[1])?);
    let (ftr, fte) = (net.features(train, &args.layer)?, net.features(test, &args.layer)?);
    let cfg = ProbeConfig { hidden: args.hidden, epochs: args.epochs, lr: args.lr, seed, ..ProbeConfig::default() };
    let result = linear_probe((&ftr, &train.components), (&fte, &test.components), &cfg)?;
    let report = ProbeReport {
        layer: args.layer.clone(),
        features: ftr.row_len(),
        train_samples: train.len(),
        test_samples: test.len(),
        train_accuracy: result.train_accuracy,
        test_accuracy: result.test_accuracy,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("plain data serializes"));
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 50)]
    pub cases: usize,
    /// Detach the wrong branch in the gradient comparison; those cases fail.
    #[arg(long)]
    pub negative_control: bool,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Serialize)]
struct GradcheckReport<'a> {
    seed: u64,
    negative_control: bool,
    passed: usize,
    failed: Vec<&'a str>,
    cases: &'a [GradcheckCase],
}

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    if args.cases == 0 {
        return Err(CliError::Usage("--cases must be at least 1".into()));
    }
    let seed = config::resolve_seed(args.seed, None)?;
    let cases = run_suite(&SuiteOptions { seed, cases: args.cases, negative_control: args.negative_control })?;
    let failed: Vec<&str> = cases.iter().filter(|c| !c.pass).map(|c| c.case_id.as_str()).collect();
    let report = GradcheckReport {
        seed,
        negative_control: args.negative_control,
        passed: cases.len() - failed.len(),
        failed: failed.clone(),
        cases: &cases,
    };
    let text = serde_json::to_string_pretty(&report).expect("plain data serializes");
    if let Some(path) = &args.report {
        std::fs::write(path, text.clone() + "\n").map_err(|e| CliError::io(path, e))?;
    }
    println!("{text}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} of {} cases: {}", failed.len(), cases.len(), failed.join(", "))))
    }
}
