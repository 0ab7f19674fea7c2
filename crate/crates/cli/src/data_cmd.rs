use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use neural_bayes::data::{
    lift_and_rotate, load_idx, make_blobs, make_circles, make_two_moons, read_dataset, standardize, write_dataset,
    ManifoldDataset,
};
use serde::{Deserialize, Serialize};

use crate::config;
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Moons,
    Circles,
    Blobs,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Points per component.
    #[arg(long)]
    pub n: Option<usize>,
    /// Gaussian noise scale; defaults to 0.05 for moons and circles, 0.5 for blobs.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Ambient dimension; values above 2 apply a seeded lift and rotation.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Vertical gap between the moons.
    #[arg(long)]
    pub gap: Option<f64>,
    /// Comma-separated circle radii.
    #[arg(long, value_delimiter = ',')]
    pub radii: Option<Vec<f64>>,
    /// Number of blobs.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output CSV; metadata goes next to it with a `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub kind: Kind,
    pub n: usize,
    pub noise: Option<f64>,
    pub dim: usize,
    pub seed: Option<u64>,
    pub gap: f64,
    pub radii: Vec<f64>,
    pub k: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig { kind: Kind::Moons, n: 500, noise: None, dim: 2, seed: None, gap: 0.0, radii: vec![1.0, 3.0], k: 3 }
    }
}

fn resolve(args: &GenDataArgs) -> Result<GenDataConfig> {
    let mut cfg: GenDataConfig = config::load(args.config.as_deref())?;
    if let Some(k) = args.kind {
        cfg.kind = k;
    }
    cfg.n = args.n.unwrap_or(cfg.n);
    cfg.noise = args.noise.or(cfg.noise).or(Some(if cfg.kind == Kind::Blobs { 0.5 } else { 0.05 }));
    cfg.dim = args.dim.unwrap_or(cfg.dim);
    cfg.seed = Some(config::resolve_seed(args.seed, cfg.seed)?);
    cfg.gap = args.gap.unwrap_or(cfg.gap);
    if let Some(r) = &args.radii {
        cfg.radii = r.clone();
    }
    cfg.k = args.k.unwrap_or(cfg.k);
    Ok(cfg)
}

pub fn generate(cfg: &GenDataConfig) -> Result<ManifoldDataset> {
    let (seed, noise) = (cfg.seed.unwrap_or(0), cfg.noise.unwrap_or(0.05));
    let base = match cfg.kind {
        Kind::Moons => make_two_moons(cfg.n, cfg.gap, noise, seed)?,
        Kind::Circles => make_circles(cfg.n, &cfg.radii, noise, seed)?,
        Kind::Blobs => make_blobs(cfg.k, cfg.n, None, noise, seed)?,
    };
    Ok(if cfg.dim > base.dim() { lift_and_rotate(&base, cfg.dim, seed)? } else { base })
}

pub fn run_gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let ds = generate(&cfg)?;
    write_dataset(&ds, &args.out)?;
    let resolved = args.out.with_extension("config.json");
    let text = serde_json::to_string_pretty(&cfg).map_err(|source| CliError::Json { path: resolved.clone(), source })?;
    std::fs::write(&resolved, text + "\n").map_err(|e| CliError::io(&resolved, e))?;
    println!("wrote {} points in {} dimensions to {}", ds.len(), ds.dim(), args.out.display());
    Ok(())
}

/// Loads a CSV dataset, or IDX images with `labels`, and standardizes it.
pub fn load_standardized(data: &Path, labels: Option<&Path>) -> Result<ManifoldDataset> {
    Ok(standardize(&load_raw(data, labels)?)?)
}

pub fn load_raw(data: &Path, labels: Option<&Path>) -> Result<ManifoldDataset> {
    if data.extension().is_some_and(|e| e == "csv") {
        return Ok(read_dataset(data)?);
    }
    let labels = labels.ok_or_else(|| CliError::Usage(format!("{} is not a CSV file; IDX images need --labels", data.display())))?;
    Ok(load_idx(data, labels)?)
}
