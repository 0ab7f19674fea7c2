//! Layers, parameter initialization and the reference architectures.
//!
//! A [`Network`] is described by a serializable [`NetworkSpec`] and owns its
//! parameter tensors plus batch-norm running statistics. The forward pass
//! never mutates the network; statistics observed in [`Mode::Train`] are
//! returned in [`Forward::stats`] and applied with
//! [`Network::update_running_stats`].

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, ParamId, PoolWindow, Tape, Var};
use crate::tensor::Tensor;

/// Variance floor used by every batch-norm layer.
pub const BN_VAR_FLOOR: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Serializable layer description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_channels: usize, filters: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm { features: usize, momentum: f64 },
    Relu,
    Tanh,
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Softmax,
}

/// Architecture plus initialization seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Per-sample input shape, e.g. `[2]` or `[3, 32, 32]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Indices of layers whose outputs are exported as hidden states.
    pub taps: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl NetworkSpec {
    /// Fully connected network. Each hidden block is `Dense -> [BatchNorm] ->
    /// activation`, tapped after the activation. With `head = Some(k)` a
    /// final `Dense(k) -> Softmax` is appended.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        head: Option<usize>,
        batch_norm: bool,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut width = input;
        for &h in hidden {
            layers.push(LayerSpec::Dense { inputs: width, outputs: h });
            if batch_norm {
                layers.push(LayerSpec::BatchNorm { features: h, momentum: BN_MOMENTUM });
            }
            layers.push(match activation {
                Activation::Relu => LayerSpec::Relu,
                Activation::Tanh => LayerSpec::Tanh,
            });
            taps.push(layers.len() - 1);
            width = h;
        }
        if let Some(k) = head {
            layers.push(LayerSpec::Dense { inputs: width, outputs: k });
            layers.push(LayerSpec::Softmax);
        }
        Self { input_shape: vec![input], layers, taps, seed }
    }

    /// Parses the compact notation `C(filters,kernel,stride,pad)`,
    /// `P(kernel,stride,pad,max|avg)` and `FC(units)` joined by `-`.
    /// Convolutions and fully connected blocks get batch norm and ReLU and
    /// are tapped after the ReLU.
    pub fn parse(arch: &str, input_shape: &[usize], seed: u64) -> Result<Self> {
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut shape = input_shape.to_vec();
        for token in arch.split('-').map(str::trim).filter(|t| !t.is_empty()) {
            let open = token.find('(').ok_or_else(|| Error::Config(format!("missing '(' in {token:?}")))?;
            if !token.ends_with(')') {
                return Err(Error::Config(format!("missing ')' in {token:?}")));
            }
            let name = &token[..open];
            let args: Vec<&str> = token[open + 1..token.len() - 1].split(',').map(str::trim).collect();
            let num = |i: usize| -> Result<usize> {
                args.get(i)
                    .ok_or_else(|| Error::Config(format!("{token:?}: missing argument {i}")))?
                    .parse()
                    .map_err(|_| Error::Config(format!("{token:?}: argument {i} is not an integer")))
            };
            match name {
                "C" => {
                    let [c, _, _] = shape[..] else {
                        return Err(Error::Config(format!("{token:?} needs a [C, H, W] input, have {shape:?}")));
                    };
                    let filters = num(0)?;
                    layers.push(LayerSpec::Conv2d {
                        in_channels: c,
                        filters,
                        kernel: num(1)?,
                        stride: num(2)?,
                        padding: num(3)?,
                    });
                    layers.push(LayerSpec::BatchNorm { features: filters, momentum: BN_MOMENTUM });
                    layers.push(LayerSpec::Relu);
                    taps.push(layers.len() - 1);
                }
                "P" => {
                    if num(2)? != 0 {
                        return Err(Error::Config(format!("{token:?}: padded pooling is not supported")));
                    }
                    let (kernel, stride) = (num(0)?, num(1)?);
                    match args.get(3).copied().unwrap_or("max") {
                        "max" => layers.push(LayerSpec::MaxPool2d { kernel, stride }),
                        "avg" => layers.push(LayerSpec::AvgPool2d { kernel, stride }),
                        other => return Err(Error::Config(format!("unknown pooling type {other:?}"))),
                    }
                }
                "FC" => {
                    if shape.len() > 1 {
                        layers.push(LayerSpec::Flatten);
                    }
                    let units = num(0)?;
                    let inputs = shape.iter().product();
                    layers.push(LayerSpec::Dense { inputs, outputs: units });
                    layers.push(LayerSpec::BatchNorm { features: units, momentum: BN_MOMENTUM });
                    layers.push(LayerSpec::Relu);
                    taps.push(layers.len() - 1);
                }
                other => return Err(Error::Config(format!("unknown layer token {other:?}"))),
            }
            shape = infer_shapes(input_shape, &layers)?.pop().unwrap_or_else(|| input_shape.to_vec());
        }
        let spec = Self { input_shape: input_shape.to_vec(), layers, taps, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Per-sample output shape of every layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        infer_shapes(&self.input_shape, &self.layers)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.layer_shapes()?.pop().unwrap_or_else(|| self.input_shape.clone()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid input shape {:?}", self.input_shape)));
        }
        if let Some(&t) = self.taps.iter().find(|&&t| t >= self.layers.len()) {
            return Err(Error::Config(format!("tap {t} references a missing layer ({} layers)", self.layers.len())));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("taps must be strictly increasing".into()));
        }
        self.layer_shapes().map(|_| ())
    }

    /// Tap names, `h0` for the first declared tap.
    pub fn tap_names(&self) -> Vec<String> {
        (0..self.taps.len()).map(|i| format!("h{i}")).collect()
    }

    /// Resolves `hN`, `last` or `output` to a tap position.
    pub fn tap_index(&self, name: &str) -> Result<usize> {
        let n = self.taps.len();
        let found = match name {
            "last" | "output" if n > 0 => Some(n - 1),
            _ => name.strip_prefix('h').and_then(|d| d.parse::<usize>().ok()).filter(|&i| i < n),
        };
        found.ok_or_else(|| {
            Error::Config(format!("unknown tap {name:?}; available: {}, last", self.tap_names().join(", ")))
        })
    }
}

fn infer_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shape = input.to_vec();
    let mut out = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let bad = |detail: String| Error::Config(format!("layer {i} ({layer:?}): {detail}"));
        shape = match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                if shape != [inputs] {
                    return Err(bad(format!("expects [{inputs}], receives {shape:?}")));
                }
                vec![outputs]
            }
            LayerSpec::Conv2d { in_channels, filters, kernel, stride, padding } => {
                let [c, h, w] = shape[..] else { return Err(bad(format!("expects [C, H, W], receives {shape:?}"))) };
                if c != in_channels {
                    return Err(bad(format!("expects {in_channels} channels, receives {c}")));
                }
                if stride == 0 || kernel == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(bad(format!("kernel does not fit {shape:?}")));
                }
                vec![filters, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1]
            }
            LayerSpec::BatchNorm { features, momentum } => {
                if shape.first() != Some(&features) || !(0.0..1.0).contains(&momentum) || momentum == 0.0 {
                    return Err(bad(format!("{features} features over {shape:?}")));
                }
                shape
            }
            LayerSpec::Relu | LayerSpec::Tanh => shape,
            LayerSpec::Softmax => {
                if shape.len() != 1 {
                    return Err(bad("softmax expects a flat feature vector".into()));
                }
                shape
            }
            LayerSpec::MaxPool2d { kernel, stride } | LayerSpec::AvgPool2d { kernel, stride } => {
                let [c, h, w] = shape[..] else { return Err(bad(format!("expects [C, H, W], receives {shape:?}"))) };
                if kernel == 0 || stride == 0 {
                    return Err(bad("zero kernel or stride".into()));
                }
                let (oh, ow) = PoolWindow::fit(kernel, stride, h, w).output_hw(h, w);
                vec![c, oh, ow]
            }
            LayerSpec::GlobalAvgPool => {
                let [c, _, _] = shape[..] else { return Err(bad(format!("expects [C, H, W], receives {shape:?}"))) };
                vec![c, 1, 1]
            }
            LayerSpec::Flatten => vec![shape.iter().product()],
        };
        out.push(shape.clone());
    }
    Ok(out)
}

/// Orthogonal matrix of shape `rows x cols` drawn from a seeded Gaussian.
///
/// Rows are orthonormal when `rows <= cols`, columns otherwise.
pub fn orthogonal_init<S: Scalar>(rows: usize, cols: usize, seed: u64) -> Tensor<S> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // short column vectors of length tall
    let mut q: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..tall).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for j in 0..short {
        for _pass in 0..2 {
            for i in 0..j {
                let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
                let qi = q[i].clone();
                for (v, u) in q[j].iter_mut().zip(&qi) {
                    *v -= dot * u;
                }
            }
        }
        let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut q[j] {
            *v /= norm;
        }
    }
    let mut data = vec![S::zero(); rows * cols];
    for (j, col) in q.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            if rows >= cols {
                data[i * cols + j] = S::of(v);
            } else {
                data[j * cols + i] = S::of(v);
            }
        }
    }
    Tensor::from_parts(vec![rows, cols], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<S: Scalar = f64> {
    /// `[out, in]`.
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer<S: Scalar = f64> {
    /// `[out, in, k, k]`.
    pub kernels: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer<S: Scalar = f64> {
    pub scale: Tensor<S>,
    pub shift: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: S,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<S: Scalar = f64> {
    Dense(DenseLayer<S>),
    Conv2d(Conv2dLayer<S>),
    BatchNorm(BatchNormLayer<S>),
    Relu,
    Tanh,
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    Softmax,
}

/// How batch norm behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; observed statistics are reported for a running update.
    Train,
    /// Batch statistics, nothing reported.
    TrainFrozenStats,
    /// Running statistics.
    Eval,
}

/// Parameter nodes of one network on one tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct Forward<S: Scalar = f64> {
    pub output: Var,
    /// One entry per declared tap, in network order.
    pub states: Vec<Var>,
    /// `(layer index, statistics)` for batch-norm layers run in [`Mode::Train`].
    pub stats: Vec<(usize, BatchStats<S>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<S: Scalar = f64> {
    spec: NetworkSpec,
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> Network<S> {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let seed: u64 = seeds.random();
                match *l {
                    LayerSpec::Dense { inputs, outputs } => Layer::Dense(DenseLayer {
                        weight: orthogonal_init(outputs, inputs, seed),
                        bias: Tensor::zeros(vec![outputs]),
                    }),
                    LayerSpec::Conv2d { in_channels, filters, kernel, stride, padding } => {
                        let w = orthogonal_init::<S>(filters, in_channels * kernel * kernel, seed);
                        Layer::Conv2d(Conv2dLayer {
                            kernels: Tensor::from_parts(vec![filters, in_channels, kernel, kernel], w.into_data()),
                            bias: Tensor::zeros(vec![filters]),
                            stride,
                            padding,
                        })
                    }
                    LayerSpec::BatchNorm { features, momentum } => Layer::BatchNorm(BatchNormLayer {
                        scale: Tensor::ones(vec![features]),
                        shift: Tensor::zeros(vec![features]),
                        running_mean: Tensor::zeros(vec![features]),
                        running_var: Tensor::ones(vec![features]),
                        momentum: S::of(momentum),
                    }),
                    LayerSpec::Relu => Layer::Relu,
                    LayerSpec::Tanh => Layer::Tanh,
                    LayerSpec::MaxPool2d { kernel, stride } => Layer::MaxPool2d { kernel, stride },
                    LayerSpec::AvgPool2d { kernel, stride } => Layer::AvgPool2d { kernel, stride },
                    LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                    LayerSpec::Flatten => Layer::Flatten,
                    LayerSpec::Softmax => Layer::Softmax,
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<S>] {
        &mut self.layers
    }

    /// Trainable tensors in [`ParamId`] order.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
                Layer::Conv2d(c) => out.extend([&c.kernels, &c.bias]),
                Layer::BatchNorm(b) => out.extend([&b.scale, &b.shift]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                Layer::Conv2d(c) => out.extend([&mut c.kernels, &mut c.bias]),
                Layer::BatchNorm(b) => out.extend([&mut b.scale, &mut b.shift]),
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        let vars = self.params().into_iter().enumerate().map(|(i, t)| tape.param(t.clone(), ParamId(i))).collect();
        Bound { vars }
    }

    pub fn forward(&self, tape: &mut Tape<S>, x: Var, mode: Mode) -> Result<Forward<S>> {
        let bound = self.bind(tape);
        self.forward_bound(tape, &bound, x, mode)
    }

    /// Forward pass reusing parameter nodes bound earlier, so that several
    /// passes contribute to the same gradients.
    pub fn forward_bound(&self, tape: &mut Tape<S>, bound: &Bound, x: Var, mode: Mode) -> Result<Forward<S>> {
        let shape = tape.shape(x);
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::dim(
                "forward",
                format!("input {shape:?} does not match [B, {:?}]", self.spec.input_shape),
            ));
        }
        let floor = S::of(BN_VAR_FLOOR);
        let mut h = x;
        let mut next_param = 0;
        let mut take = || {
            next_param += 2;
            (bound.vars[next_param - 2], bound.vars[next_param - 1])
        };
        let mut states = Vec::with_capacity(self.spec.taps.len());
        let mut stats = Vec::new();
        let mut taps = self.spec.taps.iter().peekable();
        for (i, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Dense(_) => {
                    let (w, b) = take();
                    tape.linear(h, w, Some(b))?
                }
                Layer::Conv2d(c) => {
                    let (w, b) = take();
                    tape.conv2d(h, w, b, c.stride, c.padding)?
                }
                Layer::BatchNorm(bn) => {
                    let (g, b) = take();
                    match mode {
                        Mode::Eval => tape.batch_norm_eval(
                            h,
                            g,
                            b,
                            bn.running_mean.data(),
                            bn.running_var.data(),
                            floor,
                        )?,
                        Mode::Train | Mode::TrainFrozenStats => {
                            let (y, s) = tape.batch_norm_train(h, g, b, floor)?;
                            if mode == Mode::Train {
                                stats.push((i, s));
                            }
                            y
                        }
                    }
                }
                Layer::Relu => tape.relu(h),
                Layer::Tanh => tape.tanh(h),
                Layer::MaxPool2d { kernel, stride } => tape.max_pool2d(h, *kernel, *stride)?,
                Layer::AvgPool2d { kernel, stride } => tape.avg_pool2d(h, *kernel, *stride)?,
                Layer::GlobalAvgPool => {
                    let s = tape.shape(h);
                    let k = s[2].max(s[3]);
                    tape.avg_pool2d(h, k, k)?
                }
                Layer::Flatten => {
                    let s = tape.shape(h);
                    let flat = vec![s[0], s[1..].iter().product()];
                    tape.reshape(h, flat)?
                }
                Layer::Softmax => tape.softmax_rows(h)?,
            };
            if taps.peek() == Some(&&i) {
                taps.next();
                states.push(h);
            }
        }
        Ok(Forward { output: h, states, stats })
    }

    /// Evaluates the network on `x`, returning the output and every tap.
    pub fn forward_with_states(&self, x: &Tensor<S>, mode: Mode) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, xv, mode)?;
        let states = f.states.iter().map(|&s| tape.value(s).clone()).collect();
        Ok((tape.value(f.output).clone(), states))
    }

    /// Blends observed batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<S>)]) -> Result<()> {
        for (i, s) in stats {
            let Some(Layer::BatchNorm(bn)) = self.layers.get_mut(*i) else {
                return Err(Error::arg(format!("layer {i} is not a batch-norm layer")));
            };
            let m = bn.momentum;
            let keep = S::one() - m;
            for (r, &v) in bn.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + m * v;
            }
            for (r, &v) in bn.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + m * v;
            }
        }
        Ok(())
    }

    /// Every stored tensor (parameters, then running statistics per layer)
    /// in checkpoint order, with names.
    fn stored(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.push((format!("{i}.weight"), &d.weight));
                    out.push((format!("{i}.bias"), &d.bias));
                }
                Layer::Conv2d(c) => {
                    out.push((format!("{i}.kernels"), &c.kernels));
                    out.push((format!("{i}.bias"), &c.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("{i}.scale"), &b.scale));
                    out.push((format!("{i}.shift"), &b.shift));
                    out.push((format!("{i}.running_mean"), &b.running_mean));
                    out.push((format!("{i}.running_var"), &b.running_var));
                }
                _ => {}
            }
        }
        out
    }

    fn stored_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
                Layer::Conv2d(c) => out.extend([&mut c.kernels, &mut c.bias]),
                Layer::BatchNorm(b) => {
                    out.extend([&mut b.scale, &mut b.shift, &mut b.running_mean, &mut b.running_var])
                }
                _ => {}
            }
        }
        out
    }

    /// Writes `<path>` (JSON manifest) and a sibling `.bin` file holding all
    /// values as little-endian `f64`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bin = binary_path(path);
        let mut tensors = Vec::new();
        let mut bytes = Vec::new();
        let mut offset = 0;
        for (name, t) in self.stored() {
            tensors.push(StoredTensor { name, shape: t.shape().to_vec(), offset });
            offset += t.len();
            for v in t.data() {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            scalar: S::NAME.to_string(),
            spec: self.spec.clone(),
            binary: bin.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            values: offset,
            tensors,
        };
        fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::File::create(&bin)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format { offset: 0, detail: format!("unknown checkpoint format {:?}", manifest.format) });
        }
        let mut net = Self::new(manifest.spec)?;
        let bin = path.with_file_name(&manifest.binary);
        let mut bytes = Vec::new();
        fs::File::open(&bin)?.read_to_end(&mut bytes)?;
        if bytes.len() != manifest.values * 8 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                detail: format!("expected {} bytes of values, found {}", manifest.values * 8, bytes.len()),
            });
        }
        let slots = net.stored_mut();
        if slots.len() != manifest.tensors.len() {
            return Err(Error::Format { offset: 0, detail: "tensor count does not match the architecture".into() });
        }
        for (slot, entry) in slots.into_iter().zip(&manifest.tensors) {
            if slot.shape() != entry.shape.as_slice() {
                return Err(Error::Format {
                    offset: (entry.offset * 8) as u64,
                    detail: format!("{}: shape {:?} vs architecture {:?}", entry.name, entry.shape, slot.shape()),
                });
            }
            for (k, v) in slot.data_mut().iter_mut().enumerate() {
                let at = (entry.offset + k) * 8;
                let raw: [u8; 8] = bytes[at..at + 8].try_into().expect("eight bytes");
                *v = S::of(f64::from_le_bytes(raw));
            }
        }
        Ok(net)
    }
}

const CHECKPOINT_FORMAT: &str = "neural-bayes-checkpoint/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    scalar: String,
    spec: NetworkSpec,
    binary: String,
    values: usize,
    tensors: Vec<StoredTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Binary companion of a checkpoint manifest.
pub fn binary_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_deviation(w: &Tensor) -> f64 {
        let (r, c) = (w.shape()[0], w.shape()[1]);
        let g = if r <= c { w.matmul(&w.transpose().unwrap()) } else { w.transpose().unwrap().matmul(w) }.unwrap();
        let n = r.min(c);
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.at(i, j) - want).abs());
            }
        }
        worst
    }

    #[test]
    fn orthogonal_init_properties() {
        let one = orthogonal_init::<f64>(1, 1, 3);
        assert!((one.item().abs() - 1.0).abs() < 1e-15);
        for (r, c) in [(4, 4), (3, 7), (9, 2), (64, 64)] {
            assert!(gram_deviation(&orthogonal_init(r, c, 11)) < 1e-6);
        }
        assert_eq!(orthogonal_init::<f64>(5, 3, 9), orthogonal_init::<f64>(5, 3, 9));
        assert_ne!(orthogonal_init::<f64>(5, 3, 9), orthogonal_init::<f64>(5, 3, 10));
    }

    #[test]
    fn identity_network_passes_input_through() {
        let spec = NetworkSpec { input_shape: vec![3], layers: vec![], taps: vec![], seed: 0 };
        let net = Network::<f64>::new(spec).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let (y, states) = net.forward_with_states(&x, Mode::Eval).unwrap();
        assert_eq!(y, x);
        assert!(states.is_empty());
    }

    #[test]
    fn mlp_state_shapes() {
        let net = Network::<f64>::new(NetworkSpec::mlp(2, &[500], Some(3), false, Activation::Relu, 1)).unwrap();
        let x = Tensor::from_f64(vec![4, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let (y, states) = net.forward_with_states(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[4, 3]);
        assert_eq!(states.len(), 1);
        assert_eq!(states[0].shape(), &[4, 500]);
        assert!(matches!(
            net.forward_with_states(&Tensor::zeros(vec![4, 3]), Mode::Eval),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn cnn_shorthand_shapes() {
        let spec = NetworkSpec::parse(
            "C(200,3,1,0)-P(2,2,0,max)-C(500,3,1,0)-C(700,3,1,0)-P(2,2,0,max)-C(1000,3,1,0)",
            &[3, 32, 32],
            0,
        )
        .unwrap();
        assert_eq!(spec.taps.len(), 4);
        let shapes = spec.layer_shapes().unwrap();
        let last = &shapes[*spec.taps.last().unwrap()];
        assert_eq!(last, &vec![1000, 3, 3]);
        assert!(NetworkSpec::parse("C(4,3,1,0)-Q(1)", &[1, 8, 8], 0).is_err());
    }

    #[test]
    fn tap_lookup() {
        let spec = NetworkSpec::mlp(2, &[4, 4, 4], None, true, Activation::Relu, 0);
        assert_eq!(spec.tap_index("h1").unwrap(), 1);
        assert_eq!(spec.tap_index("last").unwrap(), 2);
        let err = spec.tap_index("h9").unwrap_err().to_string();
        assert!(err.contains("h0, h1, h2"));
    }

    #[test]
    fn batch_norm_train_normalizes_and_eval_is_pure() {
        let spec = NetworkSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::BatchNorm { features: 2, momentum: 0.1 }],
            taps: vec![],
            seed: 0,
        };
        let mut net = Network::<f64>::new(spec).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 4.0], vec![2.0, 4.0], vec![6.0, 4.0], vec![-3.0, 4.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = net.forward(&mut tape, xv, Mode::Train).unwrap();
        let y = tape.value(f.output);
        let col0: Vec<f64> = (0..4).map(|i| y.at(i, 0)).collect();
        let mean = col0.iter().sum::<f64>() / 4.0;
        let var = col0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6);
        assert!((0..4).all(|i| y.at(i, 1) == 0.0));
        net.update_running_stats(&f.stats).unwrap();
        let a = net.forward_with_states(&x, Mode::Eval).unwrap().0;
        let b = net.forward_with_states(&x, Mode::Eval).unwrap().0;
        assert_eq!(a, b);
        assert!(a.max_abs_diff(tape.value(f.output)) > 1e-3);
        let single = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(net.forward_with_states(&single, Mode::Train), Err(Error::Argument(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = NetworkSpec::parse("C(3,3,1,1)-P(2,2,0,max)-FC(5)", &[2, 6, 6], 42).unwrap();
        let mut net = Network::<f64>::new(spec).unwrap();
        for (i, p) in net.params_mut().into_iter().enumerate() {
            for (j, v) in p.data_mut().iter_mut().enumerate() {
                *v += (i as f64 + 1.0) * 1e-3 * (j as f64).sin();
            }
        }
        if let Layer::BatchNorm(bn) = &mut net.layers_mut()[1] {
            bn.running_var.data_mut()[0] = 0.123456789;
        }
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        let back = Network::<f64>::load(&path).unwrap();
        assert_eq!(back, net);
        let mut raw = fs::read(binary_path(&path)).unwrap();
        raw.pop();
        fs::write(binary_path(&path), raw).unwrap();
        assert!(matches!(Network::<f64>::load(&path), Err(Error::Format { .. })));
    }
}
