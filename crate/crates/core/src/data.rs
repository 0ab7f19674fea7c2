//! Point-cloud datasets: synthetic manifolds, lifting, normalization, IDX
//! and CSV input/output, and seeded splits.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::orthogonal_init;
use crate::tensor::Tensor;

/// Standard deviations below this are treated as constant dimensions.
pub const STD_FLOOR: f64 = 1e-8;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Record of a zero-pad plus rotation applied to a low-dimensional dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftInfo {
    pub base_dim: usize,
    pub dim: usize,
    pub seed: u64,
}

impl LiftInfo {
    /// The `dim x dim` rotation applied to padded row vectors (`x R`).
    pub fn rotation(&self) -> Tensor<f64> {
        orthogonal_init(self.dim, self.dim, self.seed)
    }

    /// Maps base-space rows into the lifted space.
    pub fn lift(&self, base: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (n, d) = base.matrix_dims("lift")?;
        if d != self.base_dim {
            return Err(Error::dim("lift", format!("expected {} columns, got {d}", self.base_dim)));
        }
        let mut padded = vec![0.0; n * self.dim];
        for i in 0..n {
            padded[i * self.dim..i * self.dim + d].copy_from_slice(base.row(i));
        }
        Tensor::new([n, self.dim], padded)?.matmul(&self.rotation())
    }

    /// Inverse of [`LiftInfo::lift`], keeping the first `base_dim` coordinates.
    pub fn unlift(&self, lifted: &Tensor<f64>) -> Result<Tensor<f64>> {
        let full = lifted.matmul(&self.rotation().transpose()?)?;
        let n = full.rows();
        let mut out = Vec::with_capacity(n * self.base_dim);
        for i in 0..n {
            out.extend_from_slice(&full.row(i)[..self.base_dim]);
        }
        Tensor::new([n, self.base_dim], out)
    }
}

/// Provenance carried with a dataset and written next to its CSV.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: String,
    pub params: serde_json::Value,
    pub lift: Option<LiftInfo>,
}

/// Labeled point cloud with its normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldDataset {
    /// `[N, n]`.
    pub points: Tensor<f64>,
    pub components: Vec<usize>,
    pub num_components: usize,
    /// Shape of one sample as fed to a network (`[n]` or `[C, H, W]`).
    pub sample_shape: Vec<usize>,
    /// Statistics mapping normalized points back to raw ones.
    pub mean: Tensor<f64>,
    pub std: Tensor<f64>,
    pub seed: u64,
    pub meta: DatasetMeta,
}

impl ManifoldDataset {
    pub fn new(points: Tensor<f64>, components: Vec<usize>, seed: u64, meta: DatasetMeta) -> Result<Self> {
        let (n, d) = points.matrix_dims("dataset")?;
        if components.len() != n {
            return Err(Error::dim("dataset", format!("{n} points but {} labels", components.len())));
        }
        let num_components = components.iter().max().map_or(0, |m| m + 1);
        Ok(ManifoldDataset {
            points,
            components,
            num_components,
            sample_shape: vec![d],
            mean: Tensor::zeros([d]),
            std: Tensor::ones([d]),
            seed,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.row_len()
    }

    /// Rows `idx` as a batch shaped `[idx.len(), sample_shape..]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f64> {
        let mut shape = vec![idx.len()];
        shape.extend(&self.sample_shape);
        self.points.select_rows(idx).reshape(shape).expect("sample shape matches row length")
    }

    /// Subset of rows, keeping statistics and metadata.
    pub fn select(&self, idx: &[usize]) -> Self {
        ManifoldDataset {
            points: self.points.select_rows(idx),
            components: idx.iter().map(|&i| self.components[i]).collect(),
            ..self.clone()
        }
    }

    /// The same samples presented as flat vectors.
    pub fn flattened(&self) -> Self {
        ManifoldDataset { sample_shape: vec![self.dim()], ..self.clone() }
    }

    /// Coordinates in which normalization statistics live: the base space
    /// for lifted data, the stored points otherwise.
    pub fn frame_points(&self) -> Result<Tensor<f64>> {
        match &self.meta.lift {
            Some(info) => info.unlift(&self.points),
            None => Ok(self.points.clone()),
        }
    }

    fn lift_frame(&self, frame: Tensor<f64>) -> Result<Tensor<f64>> {
        match &self.meta.lift {
            Some(info) => info.lift(&frame),
            None => Ok(frame),
        }
    }

    /// Points mapped back through the stored normalization.
    pub fn raw_points(&self) -> Result<Tensor<f64>> {
        let mut frame = self.frame_points()?;
        let d = frame.row_len();
        if self.mean.len() != d || self.std.len() != d {
            return Err(Error::dim("raw_points", format!("statistics of length {} for {d} columns", self.mean.len())));
        }
        for row in frame.data_mut().chunks_mut(d) {
            for ((v, &m), &s) in row.iter_mut().zip(self.mean.data()).zip(self.std.data()) {
                *v = *v * s + m;
            }
        }
        self.lift_frame(frame)
    }
}

fn check_n_per(n_per: usize) -> Result<()> {
    if n_per == 0 {
        return Err(Error::arg("n_per must be at least 1"));
    }
    Ok(())
}

fn component_rng(seed: u64, component: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(component as u64 + 1);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Smallest Euclidean distance between points with different labels.
pub fn min_inter_component_distance(points: &Tensor<f64>, components: &[usize]) -> f64 {
    let n = components.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let a = points.row(i);
        for j in i + 1..n {
            if components[i] == components[j] {
                continue;
            }
            let d2: f64 = a.iter().zip(points.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.min(d2);
        }
    }
    best.sqrt()
}

fn assemble(
    parts: Vec<Vec<[f64; 2]>>,
    noise: f64,
    seed: u64,
    kind: &str,
    params: serde_json::Value,
) -> Result<ManifoldDataset> {
    let mut data = Vec::new();
    let mut components = Vec::new();
    for (c, pts) in parts.iter().enumerate() {
        for p in pts {
            data.extend_from_slice(p);
            components.push(c);
        }
    }
    let n = components.len();
    let points = Tensor::new([n, 2], data)?;
    let gap = min_inter_component_distance(&points, &components);
    if gap <= 4.0 * noise {
        return Err(Error::Generation(format!(
            "{kind}: components are {gap:.4} apart, which is not more than 4 x noise = {:.4}; use a smaller noise",
            4.0 * noise
        )));
    }
    let meta = DatasetMeta { kind: kind.to_string(), params, lift: None };
    ManifoldDataset::new(points, components, seed, meta)
}

/// Two interleaved half circles. `gap` moves the lower moon further down.
pub fn make_two_moons(n_per: usize, gap: f64, noise: f64, seed: u64) -> Result<ManifoldDataset> {
    check_n_per(n_per)?;
    let parts = (0..2)
        .map(|c| {
            let mut rng = component_rng(seed, c);
            (0..n_per)
                .map(|_| {
                    let t = rng.random::<f64>() * std::f64::consts::PI;
                    let (x, y) = if c == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin() - gap)
                    };
                    [x + noise * gaussian(&mut rng), y + noise * gaussian(&mut rng)]
                })
                .collect()
        })
        .collect();
    let params = serde_json::json!({ "n_per": n_per, "gap": gap, "noise": noise });
    assemble(parts, noise, seed, "moons", params)
}

/// Concentric circles, one component per radius.
pub fn make_circles(n_per: usize, radii: &[f64], noise: f64, seed: u64) -> Result<ManifoldDataset> {
    check_n_per(n_per)?;
    if radii.len() < 2 || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::arg("circles need at least two positive radii"));
    }
    let parts = radii
        .iter()
        .enumerate()
        .map(|(c, &r)| {
            let mut rng = component_rng(seed, c);
            (0..n_per)
                .map(|_| {
                    let t = rng.random::<f64>() * std::f64::consts::TAU;
                    [r * t.cos() + noise * gaussian(&mut rng), r * t.sin() + noise * gaussian(&mut rng)]
                })
                .collect()
        })
        .collect();
    let params = serde_json::json!({ "n_per": n_per, "radii": radii, "noise": noise });
    assemble(parts, noise, seed, "circles", params)
}

/// Isotropic Gaussian blobs. Without explicit centers, the `k` centers sit
/// evenly on a circle of radius 5.
pub fn make_blobs(k: usize, n_per: usize, centers: Option<&[[f64; 2]]>, noise: f64, seed: u64) -> Result<ManifoldDataset> {
    check_n_per(n_per)?;
    if k < 2 {
        return Err(Error::arg("blobs need k >= 2"));
    }
    let centers: Vec<[f64; 2]> = match centers {
        Some(c) if c.len() == k => c.to_vec(),
        Some(c) => return Err(Error::arg(format!("{} centers given for k = {k}", c.len()))),
        None => (0..k)
            .map(|c| {
                let t = std::f64::consts::TAU * c as f64 / k as f64;
                [5.0 * t.cos(), 5.0 * t.sin()]
            })
            .collect(),
    };
    let parts = centers
        .iter()
        .enumerate()
        .map(|(c, m)| {
            let mut rng = component_rng(seed, c);
            (0..n_per)
                .map(|_| [m[0] + noise * gaussian(&mut rng), m[1] + noise * gaussian(&mut rng)])
                .collect()
        })
        .collect();
    let params = serde_json::json!({ "k": k, "n_per": n_per, "centers": centers, "noise": noise });
    assemble(parts, noise, seed, "blobs", params)
}

/// Appends zero coordinates up to `dim` and applies a seeded random rotation.
/// Normalization statistics carry over and keep referring to the original
/// coordinates.
pub fn lift_and_rotate(ds: &ManifoldDataset, dim: usize, seed: u64) -> Result<ManifoldDataset> {
    if ds.meta.lift.is_some() {
        return Err(Error::arg("dataset is already lifted"));
    }
    let n = ds.dim();
    if dim < n {
        return Err(Error::arg(format!("cannot lift {n}-dimensional data to {dim} dimensions")));
    }
    let info = LiftInfo { base_dim: n, dim, seed };
    let points = info.lift(&ds.points)?;
    let mut meta = ds.meta.clone();
    meta.lift = Some(info);
    let mut out = ManifoldDataset::new(points, ds.components.clone(), ds.seed, meta)?;
    out.mean = ds.mean.clone();
    out.std = ds.std.clone();
    Ok(out)
}

/// Per-dimension affine normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of the rows of `points`, with the standard
    /// deviation floored at [`STD_FLOOR`].
    pub fn fit(points: &Tensor<f64>) -> Result<Self> {
        let (n, d) = points.matrix_dims("standardize")?;
        if n < 2 {
            return Err(Error::arg("standardize needs at least two points"));
        }
        let first = points.row(0).to_vec();
        let mut offset = vec![0.0; d];
        for i in 1..n {
            for ((o, &v), &f) in offset.iter_mut().zip(points.row(i)).zip(&first) {
                *o += v - f;
            }
        }
        let mean: Vec<f64> = first.iter().zip(&offset).map(|(f, o)| f + o / n as f64).collect();
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(points.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, points: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (_, d) = points.matrix_dims("standardize")?;
        if d != self.mean.len() {
            return Err(Error::dim("standardize", format!("fitted on {} columns, got {d}", self.mean.len())));
        }
        let mut out = points.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    /// Normalizes `ds` in its frame (see [`ManifoldDataset::frame_points`])
    /// and folds these statistics into its stored ones.
    pub fn apply_to(&self, ds: &ManifoldDataset) -> Result<ManifoldDataset> {
        let points = ds.lift_frame(self.apply(&ds.frame_points()?)?)?;
        if ds.mean.len() != self.mean.len() {
            return Err(Error::dim("standardize", format!("stored statistics have length {}", ds.mean.len())));
        }
        let mean = ds
            .mean
            .data()
            .iter()
            .zip(ds.std.data())
            .zip(&self.mean)
            .map(|((m0, s0), m1)| m0 + s0 * m1)
            .collect::<Vec<_>>();
        let std = ds.std.data().iter().zip(&self.std).map(|(s0, s1)| s0 * s1).collect::<Vec<_>>();
        let d = mean.len();
        Ok(ManifoldDataset { points, mean: Tensor::new([d], mean)?, std: Tensor::new([d], std)?, ..ds.clone() })
    }

    /// Statistics of `ds` in its frame.
    pub fn fit_dataset(ds: &ManifoldDataset) -> Result<Self> {
        Self::fit(&ds.frame_points()?)
    }
}

/// Zero-mean, unit-variance version of `ds` using its own statistics.
///
/// Lifted datasets are normalized in their original coordinates and lifted
/// again, so the result stays an isometric image of normalized base data.
pub fn standardize(ds: &ManifoldDataset) -> Result<ManifoldDataset> {
    Standardizer::fit_dataset(ds)?.apply_to(ds)
}

/// Seeded shuffled partition into consecutive chunks of the given fractions.
pub fn split(ds: &ManifoldDataset, fractions: &[f64], seed: u64) -> Result<Vec<ManifoldDataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::arg("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split fractions sum to {total}, not 1")));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        out.push(ds.select(&order[start..end]));
        start = end;
    }
    Ok(out)
}

/// An IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

impl IdxArray {
    /// Parses an IDX byte buffer holding `u8` data.
    pub fn parse(bytes: &[u8], expected_magic: u32) -> Result<Self> {
        let word = |at: usize| -> Result<u32> {
            bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]])).ok_or(Error::Format {
                offset: bytes.len() as u64,
                detail: format!("header truncated: expected at least {} bytes, found {}", at + 4, bytes.len()),
            })
        };
        let magic = word(0)?;
        if magic != expected_magic {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"),
            });
        }
        let ndim = (magic & 0xff) as usize;
        let dims = (0..ndim).map(|i| word(4 + 4 * i).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let header = 4 + 4 * ndim;
        let count: usize = dims.iter().product();
        let expected = header + count;
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                detail: format!("expected {expected} bytes, found {}", bytes.len()),
            });
        }
        Ok(IdxArray { dims, data: bytes[header..].to_vec() })
    }

    pub fn read(path: impl AsRef<Path>, expected_magic: u32) -> Result<Self> {
        Self::parse(&read_bytes(path.as_ref())?, expected_magic)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&(0x0800u32 | self.dims.len() as u32).to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    /// Writes the array, gzip-compressed when the path ends in `.gz`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        let mut file = File::create(path)?;
        if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = GzEncoder::new(file, Compression::default());
            enc.write_all(&bytes)?;
            enc.finish()?;
        } else {
            file.write_all(&bytes)?;
        }
        Ok(())
    }
}

/// Reads an IDX image file and its label file. Pixels are scaled to
/// `[0, 1]`; samples are shaped `[1, rows, cols]`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<ManifoldDataset> {
    let images = IdxArray::read(images_path, IDX_IMAGES_MAGIC)?;
    let labels = IdxArray::read(labels_path, IDX_LABELS_MAGIC)?;
    let n = images.dims[0];
    if labels.dims[0] != n {
        return Err(Error::Format {
            offset: 4,
            detail: format!("{n} images but {} labels", labels.dims[0]),
        });
    }
    let (rows, cols) = (images.dims[1], images.dims[2]);
    let data = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    let points = Tensor::new([n, rows * cols], data)?;
    let components = labels.data.iter().map(|&b| b as usize).collect();
    let meta = DatasetMeta { kind: "idx".into(), params: serde_json::json!({ "rows": rows, "cols": cols }), lift: None };
    let mut ds = ManifoldDataset::new(points, components, 0, meta)?;
    ds.sample_shape = vec![1, rows, cols];
    Ok(ds)
}

/// Writes raw (unnormalized) points of an image dataset as IDX files,
/// quantizing pixels with `round(v * 255)`.
pub fn write_idx(ds: &ManifoldDataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = match ds.sample_shape.as_slice() {
        [1, r, c] => (*r, *c),
        [r, c] => (*r, *c),
        other => return Err(Error::arg(format!("sample shape {other:?} is not an image"))),
    };
    let raw = ds.raw_points()?;
    let data = raw.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    IdxArray { dims: vec![ds.len(), rows, cols], data }.write(images_path)?;
    let labels = ds
        .components
        .iter()
        .map(|&c| u8::try_from(c).map_err(|_| Error::arg(format!("label {c} does not fit in a byte"))))
        .collect::<Result<Vec<_>>>()?;
    IdxArray { dims: vec![ds.len()], data: labels }.write(labels_path)
}

/// Writes `x0,...,x{n-1},component` rows.
pub fn write_csv(ds: &ManifoldDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let d = ds.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("component".into());
    w.write_record(&header)?;
    for (i, c) in ds.components.iter().enumerate() {
        let mut rec: Vec<String> = ds.points.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(c.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_csv`].
pub fn read_csv(path: impl AsRef<Path>) -> Result<ManifoldDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let d = headers.len().checked_sub(1).filter(|&d| d > 0).ok_or(Error::Format {
        offset: 0,
        detail: "CSV needs at least one coordinate column and a component column".into(),
    })?;
    if headers.get(d) != Some("component") {
        return Err(Error::Format { offset: 0, detail: "last CSV column must be `component`".into() });
    }
    let mut data = Vec::new();
    let mut components = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |what: &str| Error::Format { offset, detail: format!("unparsable {what}") };
        for j in 0..d {
            data.push(rec[j].trim().parse::<f64>().map_err(|_| bad("coordinate"))?);
        }
        components.push(rec[d].trim().parse::<usize>().map_err(|_| bad("component"))?);
    }
    let n = components.len();
    ManifoldDataset::new(Tensor::new([n, d], data)?, components, 0, DatasetMeta::default())
}

/// Sidecar path holding a CSV dataset's metadata: `d.csv` -> `d.json`.
pub fn metadata_path(csv_path: &Path) -> std::path::PathBuf {
    csv_path.with_extension("json")
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    seed: u64,
    n: usize,
    dim: usize,
    components: usize,
    meta: DatasetMeta,
}

/// Writes the raw points as CSV plus a JSON metadata sidecar.
pub fn write_dataset(ds: &ManifoldDataset, csv_path: impl AsRef<Path>) -> Result<()> {
    let path = csv_path.as_ref();
    let raw = ManifoldDataset { points: ds.raw_points()?, ..ds.clone() };
    write_csv(&raw, path)?;
    let file = MetaFile { seed: ds.seed, n: ds.len(), dim: ds.dim(), components: ds.num_components, meta: ds.meta.clone() };
    std::fs::write(metadata_path(path), serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

/// Reads a CSV dataset and, when present, its metadata sidecar.
pub fn read_dataset(csv_path: impl AsRef<Path>) -> Result<ManifoldDataset> {
    let path = csv_path.as_ref();
    let mut ds = read_csv(path)?;
    let meta_path = metadata_path(path);
    if meta_path.exists() {
        let file: MetaFile = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)?;
        if file.n != ds.len() || file.dim != ds.dim() {
            return Err(Error::Format {
                offset: 0,
                detail: format!("metadata describes {}x{} points, CSV holds {}x{}", file.n, file.dim, ds.len(), ds.dim()),
            });
        }
        if let Some(info) = &file.meta.lift {
            if info.dim != ds.dim() {
                return Err(Error::Format { offset: 0, detail: format!("lift targets {} dimensions", info.dim) });
            }
            ds.mean = Tensor::zeros([info.base_dim]);
            ds.std = Tensor::ones([info.base_dim]);
        }
        ds.seed = file.seed;
        ds.meta = file.meta;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairwise(p: &Tensor<f64>) -> Vec<f64> {
        let n = p.rows();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                out.push(p.row(i).iter().zip(p.row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
            }
        }
        out
    }

    #[test]
    fn blob_separation() {
        let ds = make_blobs(2, 200, Some(&[[5.0, 0.0], [-5.0, 0.0]]), 0.1, 3).unwrap();
        assert!(min_inter_component_distance(&ds.points, &ds.components) > 4.0);
        assert_eq!(ds.num_components, 2);
        assert_eq!(ds.len(), 400);
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(make_two_moons(50, 0.0, 0.05, 1).unwrap(), make_two_moons(50, 0.0, 0.05, 1).unwrap());
        assert_ne!(make_two_moons(50, 0.0, 0.05, 1).unwrap().points, make_two_moons(50, 0.0, 0.05, 2).unwrap().points);
        assert!(matches!(make_circles(0, &[1.0, 2.0], 0.05, 1), Err(Error::Argument(_))));
        assert!(matches!(make_blobs(3, 0, None, 0.1, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn overlapping_components_rejected() {
        assert!(matches!(make_two_moons(300, 0.0, 0.3, 4), Err(Error::Generation(_))));
        assert!(matches!(make_circles(300, &[1.0, 1.1], 0.1, 4), Err(Error::Generation(_))));
    }

    #[test]
    fn lift_is_isometric() {
        let ds = make_two_moons(40, 0.0, 0.05, 5).unwrap();
        let lifted = lift_and_rotate(&ds, 512, 9).unwrap();
        assert_eq!(lifted.dim(), 512);
        assert_eq!(lifted.components, ds.components);
        let (a, b) = (pairwise(&ds.points), pairwise(&lifted.points));
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
        let back = lifted.meta.lift.as_ref().unwrap().unlift(&lifted.points).unwrap();
        assert!(back.max_abs_diff(&ds.points) < 1e-9);
        assert!(matches!(lift_and_rotate(&lifted, 3, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn rotation_is_orthogonal() {
        let r = LiftInfo { base_dim: 2, dim: 64, seed: 4 }.rotation();
        let rtr = r.transpose().unwrap().matmul(&r).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((rtr.at(i, j) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_dim_lift_keeps_distances() {
        let ds = make_blobs(3, 10, None, 0.2, 2).unwrap();
        let lifted = lift_and_rotate(&ds, 2, 0).unwrap();
        let worst = pairwise(&ds.points).iter().zip(pairwise(&lifted.points)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12);
    }

    #[test]
    fn standardize_moments_and_floor() {
        let points = Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 3.0], vec![6.0, 3.0], vec![-4.0, 3.0]]).unwrap();
        let ds = ManifoldDataset::new(points, vec![0, 1, 0, 1], 0, DatasetMeta::default()).unwrap();
        let s = standardize(&ds).unwrap();
        let st = Standardizer::fit(&s.points).unwrap();
        assert!(st.mean[0].abs() < 1e-9 && (st.std[0] - 1.0).abs() < 1e-9);
        assert!(s.points.data().iter().skip(1).step_by(2).all(|&v| v == 0.0));
        let again = standardize(&s).unwrap();
        assert!(again.points.max_abs_diff(&s.points) < 1e-9);
        assert!(s.raw_points().unwrap().max_abs_diff(&ds.points) < 1e-12);
        assert!(again.raw_points().unwrap().max_abs_diff(&ds.points) < 1e-12);
    }

    #[test]
    fn lifted_standardize_in_base_frame() {
        let ds = make_blobs(2, 30, Some(&[[4.0, 1.0], [-2.0, 1.0]]), 0.3, 8).unwrap();
        let a = lift_and_rotate(&standardize(&ds).unwrap(), 16, 3).unwrap();
        let b = standardize(&lift_and_rotate(&ds, 16, 3).unwrap()).unwrap();
        assert!(a.points.max_abs_diff(&b.points) < 1e-12);
        assert!(a.mean.max_abs_diff(&b.mean) < 1e-12 && a.std.max_abs_diff(&b.std) < 1e-12);
        assert!(b.raw_points().unwrap().max_abs_diff(&lift_and_rotate(&ds, 16, 3).unwrap().points) < 1e-12);
        let base = b.frame_points().unwrap();
        let st = Standardizer::fit(&base).unwrap();
        assert!(st.mean.iter().all(|m| m.abs() < 1e-9) && st.std.iter().all(|s| (s - 1.0).abs() < 1e-9));
    }

    #[test]
    fn split_sizes_and_coverage() {
        let ds = make_blobs(2, 50, None, 0.1, 0).unwrap();
        let parts = split(&ds, &[0.9, 0.1], 7).unwrap();
        assert_eq!((parts[0].len(), parts[1].len()), (90, 10));
        let again = split(&ds, &[0.9, 0.1], 7).unwrap();
        assert_eq!(parts, again);
        let mut rows: Vec<Vec<u64>> = parts
            .iter()
            .flat_map(|p| (0..p.len()).map(move |i| p.points.row(i).iter().map(|v| v.to_bits()).collect()))
            .collect();
        let mut orig: Vec<Vec<u64>> = (0..ds.len()).map(|i| ds.points.row(i).iter().map(|v| v.to_bits()).collect()).collect();
        rows.sort();
        orig.sort();
        assert_eq!(rows, orig);
        assert!(split(&ds, &[0.5, 0.4], 0).is_err());
        assert!(split(&ds, &[1.2, -0.2], 0).is_err());
    }

    #[test]
    fn idx_single_zero_image() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        IdxArray { dims: vec![1, 28, 28], data: vec![0; 784] }.write(&img).unwrap();
        IdxArray { dims: vec![1], data: vec![7] }.write(&lab).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        assert_eq!(ds.points.shape(), &[1, 784]);
        assert!(ds.points.data().iter().all(|&v| v == 0.0));
        assert_eq!(ds.components, vec![7]);
        assert_eq!(ds.batch(&[0]).shape(), &[1, 1, 28, 28]);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let mut bytes = IdxArray { dims: vec![2, 2, 2], data: vec![1; 8] }.to_bytes();
        bytes.truncate(bytes.len() - 3);
        match IdxArray::parse(&bytes, IDX_IMAGES_MAGIC) {
            Err(Error::Format { offset, detail }) => {
                assert_eq!(offset, 21);
                assert!(detail.contains("expected 24") && detail.contains("found 21"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(IdxArray::parse(&bytes, IDX_LABELS_MAGIC), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(IdxArray::parse(&[0, 0], IDX_LABELS_MAGIC), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_round_trip_gz() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u8> = (0..3 * 16).map(|i| (i * 5) as u8).collect();
        let (img, lab) = (dir.path().join("i.gz"), dir.path().join("l.gz"));
        IdxArray { dims: vec![3, 4, 4], data: data.clone() }.write(&img).unwrap();
        IdxArray { dims: vec![3], data: vec![0, 1, 2] }.write(&lab).unwrap();
        let ds = load_idx(&img, &lab).unwrap();
        let (img2, lab2) = (dir.path().join("i2.gz"), dir.path().join("l2.gz"));
        write_idx(&ds, &img2, &lab2).unwrap();
        assert_eq!(IdxArray::read(&img2, IDX_IMAGES_MAGIC).unwrap().data, data);
        assert_eq!(load_idx(&img2, &lab2).unwrap(), ds);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let ds = make_circles(20, &[1.0, 2.0], 0.05, 3).unwrap();
        write_csv(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x0,x1,component\n"));
        let back = read_csv(&path).unwrap();
        assert_eq!(back.points, ds.points);
        assert_eq!(back.components, ds.components);

        let lifted = lift_and_rotate(&ds, 5, 1).unwrap();
        write_dataset(&standardize(&lifted).unwrap(), &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.meta, lifted.meta);
        assert!(back.points.max_abs_diff(&lifted.points) < 1e-12);
        assert_eq!(back.mean.len(), 2);
    }
}
