//! The three subnetworks: radiance (J), transmission (T), and the variational
//! airlight network (A).
//!
//! A network is a flat list of [`Layer`]s interpreted in order, plus the named
//! parameter tensors those layers own. Parameters live outside any graph; each
//! optimization step binds them into a fresh [`Graph`] as leaves.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Padding, Real, Tensor, Var};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_EPS: f64 = 1e-5;
/// Hidden width of the radiance and transmission networks.
pub const HIDDEN_WIDTH: usize = 64;
/// Number of conv/norm/activation blocks before the output layer.
pub const HIDDEN_DEPTH: usize = 4;
/// Encoder channel ladder of the airlight network.
pub const ANET_CHANNELS: [usize; 4] = [16, 32, 64, 128];
/// Decoder output channels per block.
pub const ANET_DECODER: [usize; 4] = [64, 32, 16, 16];
/// Spatial reduction of the airlight encoder.
pub const ANET_STRIDE: usize = 16;

const SNAPSHOT_MAGIC: &str = "hazesplit-params";
const SNAPSHOT_VERSION: u32 = 1;

/// Deterministic generator used for initialization and latent sampling.
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    JNet,
    TNet,
    ANet,
    /// Free-form parameter set with no forward pass.
    Custom,
}

impl NetKind {
    fn tag(self) -> &'static str {
        match self {
            NetKind::JNet => "jnet",
            NetKind::TNet => "tnet",
            NetKind::ANet => "anet",
            NetKind::Custom => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Same-padded, stride-1 convolution with bias.
    Conv { cin: usize, cout: usize, k: usize },
    BatchNorm { channels: usize },
    LeakyRelu { slope: f64 },
    Relu,
    MaxPool2,
    Upsample2,
    Sigmoid,
    /// Two 1x1 conv heads producing the mean and log-variance of a spatial
    /// Gaussian latent, followed by reparameterized sampling.
    Gaussian { channels: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Layer {
            name: name.into(),
            kind,
        }
    }

    /// Parameter names and shapes owned by this layer, in binding order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let n = &self.name;
        match self.kind {
            LayerKind::Conv { cin, cout, k } => vec![
                (format!("{n}.weight"), vec![cout, cin, k, k]),
                (format!("{n}.bias"), vec![cout]),
            ],
            LayerKind::BatchNorm { channels } => vec![
                (format!("{n}.gamma"), vec![channels]),
                (format!("{n}.beta"), vec![channels]),
            ],
            LayerKind::Gaussian { channels } => vec![
                (format!("{n}.mu.weight"), vec![channels, channels, 1, 1]),
                (format!("{n}.mu.bias"), vec![channels]),
                (format!("{n}.log_var.weight"), vec![channels, channels, 1, 1]),
                (format!("{n}.log_var.bias"), vec![channels]),
            ],
            _ => Vec::new(),
        }
    }
}

/// Layer list of the radiance/transmission family: `depth` blocks of
/// conv3x3 -> batch norm -> leaky relu at full resolution, then a conv3x3 to
/// `out_channels` and a sigmoid.
fn plain_layers(out_channels: usize) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for i in 0..HIDDEN_DEPTH {
        layers.push(Layer::new(
            format!("block{i}.conv"),
            LayerKind::Conv {
                cin,
                cout: HIDDEN_WIDTH,
                k: 3,
            },
        ));
        layers.push(Layer::new(format!("block{i}.bn"), LayerKind::BatchNorm { channels: HIDDEN_WIDTH }));
        layers.push(Layer::new(format!("block{i}.act"), LayerKind::LeakyRelu { slope: LEAKY_SLOPE }));
        cin = HIDDEN_WIDTH;
    }
    layers.push(Layer::new(
        "out.conv",
        LayerKind::Conv {
            cin,
            cout: out_channels,
            k: 3,
        },
    ));
    layers.push(Layer::new("out.act", LayerKind::Sigmoid));
    layers
}

fn anet_layers() -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (i, &cout) in ANET_CHANNELS.iter().enumerate() {
        layers.push(Layer::new(format!("enc{i}.conv"), LayerKind::Conv { cin, cout, k: 3 }));
        layers.push(Layer::new(format!("enc{i}.act"), LayerKind::Relu));
        layers.push(Layer::new(format!("enc{i}.pool"), LayerKind::MaxPool2));
        cin = cout;
    }
    layers.push(Layer::new("latent", LayerKind::Gaussian { channels: cin }));
    for (i, &cout) in ANET_DECODER.iter().enumerate() {
        layers.push(Layer::new(format!("dec{i}.up"), LayerKind::Upsample2));
        layers.push(Layer::new(format!("dec{i}.conv"), LayerKind::Conv { cin, cout, k: 3 }));
        layers.push(Layer::new(format!("dec{i}.bn"), LayerKind::BatchNorm { channels: cout }));
        layers.push(Layer::new(format!("dec{i}.act"), LayerKind::Relu));
        cin = cout;
    }
    layers.push(Layer::new("out.conv", LayerKind::Conv { cin, cout: 3, k: 3 }));
    layers.push(Layer::new("out.act", LayerKind::Sigmoid));
    layers
}

/// Learnable parameters of one network together with their gradients.
#[derive(Clone, Debug)]
pub struct NetworkParams<T> {
    kind: NetKind,
    layers: Vec<Layer>,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

pub fn build_jnet<T: Real>(seed: u64) -> NetworkParams<T> {
    NetworkParams::init(NetKind::JNet, plain_layers(3), seed)
}

pub fn build_tnet<T: Real>(seed: u64) -> NetworkParams<T> {
    NetworkParams::init(NetKind::TNet, plain_layers(1), seed)
}

pub fn build_anet<T: Real>(seed: u64) -> NetworkParams<T> {
    NetworkParams::init(NetKind::ANet, anet_layers(), seed)
}

impl<T: Real> NetworkParams<T> {
    /// Kaiming-normal (fan-in) conv kernels, zero biases, unit gamma, zero beta.
    /// Initial values are drawn in `f64` so both precisions start identically.
    fn init(kind: NetKind, layers: Vec<Layer>, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let mut names = Vec::new();
        let mut values = Vec::new();
        for layer in &layers {
            for (name, shape) in layer.param_shapes() {
                let len: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
                } else if name.ends_with(".gamma") {
                    vec![1.0; len]
                } else {
                    vec![0.0; len]
                };
                values.push(Tensor::from_f64(&shape, &data).expect("layer shapes are positive"));
                names.push(name);
            }
        }
        let grads = values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        NetworkParams {
            kind,
            layers,
            names,
            values,
            grads,
        }
    }

    /// A parameter set without layers, e.g. for exercising the optimizer.
    pub fn custom(params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut values = Vec::new();
        for (name, value) in params {
            if names.contains(&name) {
                return Err(Error::invalid("params", format!("duplicate name `{name}`")));
            }
            names.push(name);
            values.push(value);
        }
        let grads = values.iter().map(|v: &Tensor<T>| Tensor::zeros(v.shape())).collect();
        Ok(NetworkParams {
            kind: NetKind::Custom,
            layers: Vec::new(),
            names,
            values,
            grads,
        })
    }

    pub fn kind(&self) -> NetKind {
        self.kind
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.values[i])
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>, &mut Tensor<T>)> {
        self.names
            .iter()
            .zip(self.values.iter_mut())
            .zip(self.grads.iter_mut())
            .map(|((n, v), g)| (n.as_str(), v, g))
    }

    /// Adds every parameter to the graph as a tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        BoundParams {
            vars: self.values.iter().map(|v| g.param(v.clone())).collect(),
        }
    }

    /// Accumulates the graph's gradients for the bound parameters.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &BoundParams) {
        for (slot, &v) in self.grads.iter_mut().zip(&bound.vars) {
            let gv = g.grad(v);
            for (s, &d) in slot.data_mut().iter_mut().zip(gv.data()) {
                *s = *s + d;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    /// Runs the layer list on `x`. The latent mode only matters for networks
    /// with a Gaussian layer.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        bound: &BoundParams,
        x: Var,
        mut latent: LatentMode<'_>,
    ) -> Result<(Var, Option<LatentGaussian>)> {
        if self.kind == NetKind::ANet {
            let s = g.shape(x);
            if s.len() != 4 || s[2] % ANET_STRIDE != 0 || s[3] % ANET_STRIDE != 0 {
                return Err(Error::invalid(
                    "forward_anet",
                    format!("spatial dims must be divisible by {ANET_STRIDE}, got {s:?}"),
                ));
            }
        }
        let mut vars = bound.vars.iter().copied();
        let mut next = || vars.next().expect("bound params match layer list");
        let mut h = x;
        let mut gaussian = None;
        for layer in &self.layers {
            h = match layer.kind {
                LayerKind::Conv { .. } => {
                    let (w, b) = (next(), next());
                    g.conv2d(h, w, Some(b), 1, Padding::Same)?
                }
                LayerKind::BatchNorm { .. } => {
                    let (gamma, beta) = (next(), next());
                    g.batch_norm(h, gamma, beta, T::of(BN_EPS))?
                }
                LayerKind::LeakyRelu { slope } => g.leaky_relu(h, T::of(slope))?,
                LayerKind::Relu => g.relu(h),
                LayerKind::MaxPool2 => g.max_pool2(h)?,
                LayerKind::Upsample2 => g.upsample_nearest2(h)?,
                LayerKind::Sigmoid => g.sigmoid(h),
                LayerKind::Gaussian { .. } => {
                    let (mw, mb, lw, lb) = (next(), next(), next(), next());
                    let mu = g.conv2d(h, mw, Some(mb), 1, Padding::Valid)?;
                    let log_var = g.conv2d(h, lw, Some(lb), 1, Padding::Valid)?;
                    gaussian = Some(LatentGaussian { mu, log_var });
                    reparameterize(g, mu, log_var, &mut latent)?
                }
            };
        }
        Ok((h, gaussian))
    }

    /// Writes a versioned text snapshot: a header line, the network kind, then
    /// one `param <name> <dims...>` line followed by a line of values per tensor.
    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}\nnet {}\n", self.kind.tag());
        for (name, value) in self.names.iter().zip(&self.values) {
            let dims: Vec<String> = value.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "param {name} {}", dims.join(" "));
            let vals: Vec<String> = value.to_f64().iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a snapshot written by [`NetworkParams::save_snapshot`]. Built-in
    /// network kinds are checked against their architecture.
    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Format {
            what: "parameter snapshot",
            reason,
        };
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header != format!("{SNAPSHOT_MAGIC} {SNAPSHOT_VERSION}") {
            return Err(bad(format!("unrecognized header `{header}`")));
        }
        let kind = match lines.next().and_then(|l| l.strip_prefix("net ")) {
            Some("jnet") => NetKind::JNet,
            Some("tnet") => NetKind::TNet,
            Some("anet") => NetKind::ANet,
            Some("custom") => NetKind::Custom,
            other => return Err(bad(format!("unknown network kind {other:?}"))),
        };
        let mut entries = Vec::new();
        while let Some(line) = lines.next() {
            let mut parts = line.split_whitespace();
            if parts.next() != Some("param") {
                return Err(bad(format!("expected a param line, got `{line}`")));
            }
            let name = parts.next().ok_or_else(|| bad("missing name".into()))?.to_string();
            let shape = parts
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            let values = lines
                .next()
                .ok_or_else(|| bad(format!("missing values for {name}")))?
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(e.to_string()))?;
            entries.push((name, Tensor::from_f64(&shape, &values)?));
        }
        let mut params = match kind {
            NetKind::JNet => build_jnet(0),
            NetKind::TNet => build_tnet(0),
            NetKind::ANet => build_anet(0),
            NetKind::Custom => return Self::custom(entries),
        };
        if entries.len() != params.names.len() {
            return Err(bad(format!("expected {} tensors, found {}", params.names.len(), entries.len())));
        }
        for (i, (name, value)) in entries.into_iter().enumerate() {
            if name != params.names[i] || value.shape() != params.values[i].shape() {
                return Err(bad(format!("tensor {i} `{name}` does not match the architecture")));
            }
            params.values[i] = value;
        }
        Ok(params)
    }
}

/// Graph handles of a network's parameters for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    /// Wraps graph handles bound by the caller, in the network's parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Mean and log-variance of the airlight network's latent code.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: Var,
    pub log_var: Var,
}

/// How the latent code is formed from `(mu, log_var)`.
pub enum LatentMode<'a> {
    /// `z = mu + exp(log_var / 2) * eps`, `eps ~ N(0, I)` drawn from the generator.
    Sample(&'a mut SeededRng),
    /// `z = mu`, the zero-variance limit.
    Mean,
}

fn reparameterize<T: Real>(g: &mut Graph<T>, mu: Var, log_var: Var, mode: &mut LatentMode<'_>) -> Result<Var> {
    match mode {
        LatentMode::Mean => Ok(mu),
        LatentMode::Sample(rng) => {
            let shape = g.shape(mu).to_vec();
            let len: usize = shape.iter().product();
            let eps: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let eps = g.constant(Tensor::from_f64(&shape, &eps)?);
            let half = g.mul_scalar(log_var, T::of(0.5));
            let std = g.exp(half);
            let noise = g.mul(std, eps)?;
            g.add(mu, noise)
        }
    }
}

/// Forward pass of the airlight network, returning its output and latent.
pub fn forward_anet<T: Real>(
    params: &NetworkParams<T>,
    g: &mut Graph<T>,
    bound: &BoundParams,
    x: Var,
    latent: LatentMode<'_>,
) -> Result<(Var, LatentGaussian)> {
    if params.kind != NetKind::ANet {
        return Err(Error::invalid("forward_anet", "not an airlight network"));
    }
    let (out, gaussian) = params.forward(g, bound, x, latent)?;
    Ok((out, gaussian.expect("airlight network has a latent layer")))
}
