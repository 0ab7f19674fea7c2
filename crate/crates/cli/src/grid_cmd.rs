use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use neural_bayes::data::{read_dataset, standardize, DatasetMeta, ManifoldDataset, Standardizer};
use neural_bayes::tensor::Tensor;
use neural_bayes::train::assign_labels;

use crate::error::{CliError, Result};
use crate::eval_cmd::AnyNetwork;

#[derive(Args, Debug)]
pub struct ExportGridArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CSV dataset the checkpoint was trained on.
    #[arg(long)]
    pub data: PathBuf,
    /// Grid points along each axis.
    #[arg(long, default_value_t = 200)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate at the dataset's own points instead of a grid.
    #[arg(long)]
    pub at_data: bool,
}

fn linspace(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
    (0..n).map(move |i| lo + step * i as f64)
}

/// Row-major grid over the bounding box of `base`, `x` varying fastest.
fn grid(base: &Tensor<f64>, resolution: usize) -> Result<Tensor<f64>> {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for i in 0..base.rows() {
        for (j, &v) in base.row(i).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let mut cells = Vec::with_capacity(resolution * resolution * 2);
    for y in linspace(lo[1], hi[1], resolution) {
        for x in linspace(lo[0], hi[0], resolution) {
            cells.extend([x, y]);
        }
    }
    Ok(Tensor::new([resolution * resolution, 2], cells)?)
}

pub fn run_export_grid(args: &ExportGridArgs) -> Result<()> {
    if args.resolution < 2 && !args.at_data {
        return Err(CliError::Usage("--resolution must be at least 2".into()));
    }
    if args.data.extension().is_none_or(|e| e != "csv") {
        return Err(CliError::Usage(format!("{} is not a CSV dataset", args.data.display())));
    }
    let raw = read_dataset(&args.data)?;
    let base = raw.frame_points()?;
    if base.row_len() != 2 {
        return Err(CliError::Usage(format!(
            "decision grids need two-dimensional base data, {} has {}",
            args.data.display(),
            base.row_len()
        )));
    }
    let net = AnyNetwork::load(&args.checkpoint)?;
    let (coords, inputs) = if args.at_data {
        (base, standardize(&raw)?)
    } else {
        let coords = grid(&base, args.resolution)?;
        let st = Standardizer::fit_dataset(&raw)?;
        let frame = st.apply(&coords)?;
        let points = match &raw.meta.lift {
            Some(info) => info.lift(&frame)?,
            None => frame,
        };
        let n = points.rows();
        let meta = DatasetMeta { lift: raw.meta.lift.clone(), ..DatasetMeta::default() };
        (coords, ManifoldDataset::new(points, vec![0; n], raw.seed, meta)?)
    };
    let probs = net.features(&inputs, "output")?;
    let labels = assign_labels(&probs);
    let mut csv = String::from("x,y,argmax_label,max_prob\n");
    for (i, label) in labels.iter().enumerate() {
        let row = probs.row(i);
        let max_prob = if row.len() == 1 { row[0].max(1.0 - row[0]) } else { row.iter().copied().fold(f64::NEG_INFINITY, f64::max) };
        let p = coords.row(i);
        writeln!(csv, "{},{},{label},{max_prob}", p[0], p[1]).expect("writing to a String");
    }
    std::fs::write(&args.out, csv).map_err(|e| CliError::io(&args.out, e))?;
    println!("wrote {} rows to {}", labels.len(), args.out.display());
    Ok(())
}
