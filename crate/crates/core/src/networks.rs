//! The five learnable networks plus cluster centroids, as dense stacks.
//!
//! All parameters live in one [`ParamStore`]; networks hold [`ParamId`]s into
//! it. The source/target head and the multi-target head both read the same
//! trunk parameters, so the two discriminators share their trunk by
//! construction.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Matrix, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Softmax,
    Linear,
}

/// How the adversarial minimax is optimized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One descent step on all networks through a gradient-reversal node.
    #[default]
    Joint,
    /// GAN-style: discriminator step, then generator step.
    Alternating,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Joint => "joint",
            Mode::Alternating => "alternating",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    Feature,
    Classifier,
    Trunk,
    SourceHead,
    MultiHead,
    Encoder,
    Decoder,
    Centroids,
    /// Per-column mean and std of the meta-learner inputs; set from data,
    /// never trained.
    MetaScale,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::Feature,
        Group::Classifier,
        Group::Trunk,
        Group::SourceHead,
        Group::MultiHead,
        Group::Encoder,
        Group::Decoder,
        Group::Centroids,
        Group::MetaScale,
    ];
    pub const GENERATOR: [Group; 2] = [Group::Feature, Group::Classifier];
    pub const DISCRIMINATOR: [Group; 3] = [Group::Trunk, Group::SourceHead, Group::MultiHead];
    pub const META: [Group; 3] = [Group::Encoder, Group::Decoder, Group::Centroids];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Matrix) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in<'a>(&'a self, groups: &'a [Group]) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |id| groups.contains(&self.params[id.0].group))
    }

    /// FNV-1a over the bit patterns of every parameter in `groups`.
    pub fn checksum(&self, groups: &[Group]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for id in self.ids_in(groups) {
            for v in self.get(id).data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Parameters registered in a graph for one pass; unbound parameters are
/// left out of the graph entirely.
#[derive(Clone, Debug)]
pub struct Bound {
    tensors: Vec<Option<Tensor>>,
}

impl Bound {
    /// Registers every parameter of `groups` in `g`; those in `trainable`
    /// accumulate gradients, the rest are constants.
    pub fn new(g: &mut Graph, store: &ParamStore, groups: &[Group], trainable: &[Group]) -> Result<Self> {
        let mut tensors = vec![None; store.len()];
        for (i, p) in store.params.iter().enumerate() {
            if groups.contains(&p.group) || trainable.contains(&p.group) {
                tensors[i] = Some(if trainable.contains(&p.group) {
                    g.variable(&p.value)?
                } else {
                    g.constant(&p.value)?
                });
            }
        }
        Ok(Self { tensors })
    }

    pub fn get(&self, id: ParamId) -> Result<Tensor> {
        self.tensors[id.0].ok_or_else(|| Error::contract(format!("parameter {} is not bound", id.0)))
    }

    /// Gradients of every bound variable, in parameter order.
    pub fn grads(&self, g: &Graph) -> Vec<(ParamId, Matrix)> {
        self.tensors
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.filter(|t| g.requires_grad(*t)).map(|t| (ParamId(i), g.grad_matrix(t))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    fn build(store: &mut ParamStore, name: &str, group: Group, specs: Vec<LayerSpec>, rng: &mut Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut prev = specs.first().map(|s| s.in_dim);
        for (i, spec) in specs.into_iter().enumerate() {
            if prev != Some(spec.in_dim) || spec.in_dim == 0 || spec.out_dim == 0 {
                return Err(Error::config(format!("{name} layer {i}: dims do not chain")));
            }
            if !(0.0..1.0).contains(&spec.dropout) {
                return Err(Error::config(format!("{name} layer {i}: dropout must be in [0, 1)")));
            }
            prev = Some(spec.out_dim);
            let weight = store.add(format!("{name}.{i}.weight"), group, glorot(spec.in_dim, spec.out_dim, rng));
            let bias = store.add(format!("{name}.{i}.bias"), group, Matrix::zeros(1, spec.out_dim));
            layers.push(Dense { spec, weight, bias });
        }
        Ok(Self { layers })
    }

    fn reinit(&self, store: &mut ParamStore, rng: &mut Rng) {
        for l in &self.layers {
            *store.get_mut(l.weight) = glorot(l.spec.in_dim, l.spec.out_dim, rng);
            *store.get_mut(l.bias) = Matrix::zeros(1, l.spec.out_dim);
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Forward pass. Dropout masks are drawn from `dropout_rng` when given;
    /// without it dropout is off and the pass is deterministic.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Tensor, mut dropout_rng: Option<&mut Rng>) -> Result<Tensor> {
        let [_, cols] = g.shape(x);
        if cols != self.in_dim() {
            return Err(Error::Dimension { op: "mlp input", left: g.shape(x), right: [1, self.in_dim()] });
        }
        let mut h = x;
        for layer in &self.layers {
            let w = b.get(layer.weight)?;
            let bias = b.get(layer.bias)?;
            let z = g.matmul(h, w)?;
            let z = g.add(z, bias)?;
            h = match layer.spec.activation {
                Activation::Relu => g.relu(z),
                Activation::LeakyRelu(s) => g.leaky_relu(z, s),
                Activation::Sigmoid => g.sigmoid(z),
                Activation::Softmax => g.softmax(z),
                Activation::Linear => z,
            };
            if layer.spec.dropout > 0.0 {
                if let Some(rng) = dropout_rng.as_deref_mut() {
                    let [rows, cols] = g.shape(h);
                    let keep = 1.0 - layer.spec.dropout;
                    let mask: Vec<f64> = (0..rows * cols)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    let mask = g.constant(&Matrix::new(rows, cols, mask)?)?;
                    h = g.mul(h, mask)?;
                }
            }
        }
        Ok(h)
    }
}

fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let half = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-half..half)).collect();
    Matrix::new(fan_in, fan_out, data).expect("shape matches")
}

/// Layer sizes of a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub input_dim: usize,
    pub classes: usize,
    /// Number of meta-sub-targets `k`.
    pub subtargets: usize,
    pub feature_dim: usize,
    pub feature_hidden: Vec<usize>,
    pub trunk_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub feature_dropout: f64,
    pub mode: Mode,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dim: 2,
            classes: 4,
            subtargets: 2,
            feature_dim: 64,
            feature_hidden: vec![64],
            trunk_dim: 100,
            encoder_hidden: vec![500, 1000],
            decoder_hidden: vec![1000, 1000],
            feature_dropout: 0.0,
            mode: Mode::Joint,
        }
    }
}

impl Architecture {
    /// Width of the meta-learner input `[x | F(x) | C(F(x))]`.
    pub fn meta_input_dim(&self) -> usize {
        self.input_dim + self.feature_dim + self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 || self.feature_dim == 0 || self.trunk_dim == 0 {
            return Err(Error::config("input_dim, classes, feature_dim and trunk_dim must be >= 1"));
        }
        if self.subtargets < 2 {
            return Err(Error::config(format!(
                "subtargets k = {} but the multi-target discriminator needs k >= 2",
                self.subtargets
            )));
        }
        if self.feature_hidden.iter().chain(&self.encoder_hidden).chain(&self.decoder_hidden).any(|&w| w == 0) {
            return Err(Error::config("hidden widths must be >= 1"));
        }
        Ok(())
    }
}

fn stack(input: usize, hidden: &[usize], output: usize, hidden_act: Activation, out_act: Activation, dropout: f64) -> Vec<LayerSpec> {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    let last = dims.len() - 2;
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| LayerSpec {
            in_dim: w[0],
            out_dim: w[1],
            activation: if i == last { out_act } else { hidden_act },
            dropout: if i == last { 0.0 } else { dropout },
        })
        .collect()
}

/// F, C, the discriminator trunk and its two heads, the meta-learner
/// encoder/decoder, and the `k x k` centroid matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub arch: Architecture,
    pub store: ParamStore,
    pub feature: Mlp,
    pub classifier: Mlp,
    pub trunk: Mlp,
    pub source_head: Mlp,
    pub multi_head: Mlp,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub centroids: ParamId,
    pub meta_mean: ParamId,
    pub meta_std: ParamId,
    /// Whether the encoder and centroids hold a fitted clustering.
    pub meta_fitted: bool,
}

impl ModelBundle {
    pub fn build(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut store = ParamStore::default();
        let a = arch;
        let leaky = Activation::LeakyRelu(LEAKY_SLOPE);
        let feature = Mlp::build(
            &mut store,
            "feature",
            Group::Feature,
            stack(a.input_dim, &a.feature_hidden, a.feature_dim, leaky, leaky, a.feature_dropout),
            &mut rng,
        )?;
        let classifier = Mlp::build(
            &mut store,
            "classifier",
            Group::Classifier,
            stack(a.feature_dim, &[], a.classes, Activation::Relu, Activation::Softmax, 0.0),
            &mut rng,
        )?;
        let trunk = Mlp::build(
            &mut store,
            "trunk",
            Group::Trunk,
            stack(a.feature_dim, &[], a.trunk_dim, Activation::Relu, Activation::Relu, 0.0),
            &mut rng,
        )?;
        let (st_out, st_act) = match a.mode {
            Mode::Joint => (2, Activation::Softmax),
            Mode::Alternating => (1, Activation::Sigmoid),
        };
        let source_head = Mlp::build(
            &mut store,
            "source_head",
            Group::SourceHead,
            stack(a.trunk_dim, &[], st_out, Activation::Relu, st_act, 0.0),
            &mut rng,
        )?;
        let multi_head = Mlp::build(
            &mut store,
            "multi_head",
            Group::MultiHead,
            stack(a.trunk_dim, &[], a.subtargets, Activation::Relu, Activation::Softmax, 0.0),
            &mut rng,
        )?;
        let encoder = Mlp::build(
            &mut store,
            "encoder",
            Group::Encoder,
            stack(a.meta_input_dim(), &a.encoder_hidden, a.subtargets, Activation::Relu, Activation::Linear, 0.0),
            &mut rng,
        )?;
        let decoder = Mlp::build(
            &mut store,
            "decoder",
            Group::Decoder,
            stack(a.subtargets, &a.decoder_hidden, a.meta_input_dim(), Activation::Relu, Activation::Linear, 0.0),
            &mut rng,
        )?;
        let centroids = store.add("centroids", Group::Centroids, Matrix::zeros(a.subtargets, a.subtargets));
        let meta_mean = store.add("meta_scale.mean", Group::MetaScale, Matrix::zeros(1, a.meta_input_dim()));
        let meta_std = store.add("meta_scale.std", Group::MetaScale, Matrix::new(1, a.meta_input_dim(), vec![1.0; a.meta_input_dim()])?);
        Ok(Self {
            arch: arch.clone(),
            store,
            feature,
            classifier,
            trunk,
            source_head,
            multi_head,
            encoder,
            decoder,
            centroids,
            meta_mean,
            meta_std,
            meta_fitted: false,
        })
    }

    /// Fresh encoder/decoder weights and zeroed centroids.
    pub fn reinit_meta(&mut self, rng: &mut Rng) {
        self.encoder.reinit(&mut self.store, rng);
        self.decoder.reinit(&mut self.store, rng);
        let k = self.arch.subtargets;
        *self.store.get_mut(self.centroids) = Matrix::zeros(k, k);
        self.meta_fitted = false;
    }

    pub fn centroid_matrix(&self) -> &Matrix {
        self.store.get(self.centroids)
    }

    /// Parameters feeding the source/target head: trunk plus its own head.
    pub fn source_disc_params(&self) -> Vec<ParamId> {
        let mut p = self.trunk.params();
        p.extend(self.source_head.params());
        p
    }

    pub fn multi_disc_params(&self) -> Vec<ParamId> {
        let mut p = self.trunk.params();
        p.extend(self.multi_head.params());
        p
    }

    pub fn bind(&self, g: &mut Graph, groups: &[Group], trainable: &[Group]) -> Result<Bound> {
        Bound::new(g, &self.store, groups, trainable)
    }

    pub fn features(&self, g: &mut Graph, b: &Bound, x: Tensor, dropout: Option<&mut Rng>) -> Result<Tensor> {
        self.feature.forward(g, b, x, dropout)
    }

    pub fn classify(&self, g: &mut Graph, b: &Bound, feat: Tensor) -> Result<Tensor> {
        self.classifier.forward(g, b, feat, None)
    }

    pub fn trunk_out(&self, g: &mut Graph, b: &Bound, feat: Tensor) -> Result<Tensor> {
        self.trunk.forward(g, b, feat, None)
    }

    /// Source/target discriminator output: `n x 2` softmax in joint mode,
    /// `n x 1` sigmoid in alternating mode.
    pub fn disc_source(&self, g: &mut Graph, b: &Bound, feat: Tensor) -> Result<Tensor> {
        let t = self.trunk_out(g, b, feat)?;
        self.source_head.forward(g, b, t, None)
    }

    pub fn disc_multi(&self, g: &mut Graph, b: &Bound, feat: Tensor) -> Result<Tensor> {
        let t = self.trunk_out(g, b, feat)?;
        self.multi_head.forward(g, b, t, None)
    }

    /// Encoder applied to `[x | feat | probs]`.
    pub fn forward_meta(&self, g: &mut Graph, b: &Bound, x: Tensor, feat: Tensor, probs: Tensor) -> Result<Tensor> {
        let dims = [self.arch.input_dim, self.arch.feature_dim, self.arch.classes];
        for (t, want) in [x, feat, probs].into_iter().zip(dims) {
            if g.shape(t)[1] != want {
                return Err(Error::Dimension { op: "forward_meta", left: g.shape(t), right: [g.shape(t)[0], want] });
            }
        }
        let raw = g.concat(&[x, feat, probs])?;
        let mean = g.constant(self.store.get(self.meta_mean))?;
        let inv: Vec<f64> = self.store.get(self.meta_std).data().iter().map(|s| 1.0 / s).collect();
        let inv = g.constant(&Matrix::new(1, inv.len(), inv)?)?;
        let centred = g.sub(raw, mean)?;
        let input = g.mul(centred, inv)?;
        self.encoder.forward(g, b, input, None)
    }

    fn infer(&self, groups: &[Group], x: &Matrix, f: impl FnOnce(&mut Graph, &Bound, Tensor) -> Result<Tensor>) -> Result<Matrix> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, groups, &[])?;
        let xt = g.constant(x)?;
        let out = f(&mut g, &b, xt)?;
        Ok(g.to_matrix(out))
    }

    pub fn feature_matrix(&self, x: &Matrix) -> Result<Matrix> {
        self.infer(&[Group::Feature], x, |g, b, xt| self.features(g, b, xt, None))
    }

    /// Class probabilities `C(F(x))`.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.infer(&Group::GENERATOR, x, |g, b, xt| {
            let f = self.features(g, b, xt, None)?;
            self.classify(g, b, f)
        })
    }

    pub fn disc_multi_matrix(&self, x: &Matrix) -> Result<Matrix> {
        self.infer(&[Group::Feature, Group::Trunk, Group::MultiHead], x, |g, b, xt| {
            let f = self.features(g, b, xt, None)?;
            self.disc_multi(g, b, f)
        })
    }

    pub fn disc_source_matrix(&self, x: &Matrix) -> Result<Matrix> {
        self.infer(&[Group::Feature, Group::Trunk, Group::SourceHead], x, |g, b, xt| {
            let f = self.features(g, b, xt, None)?;
            self.disc_source(g, b, f)
        })
    }

    /// `[x | F(x) | C(F(x))]` for every row of `x`, standardised column-wise
    /// with the stored meta scale.
    pub fn meta_inputs(&self, x: &Matrix) -> Result<Matrix> {
        let mut m = self.raw_meta_inputs(x)?;
        let (mean, std) = (self.store.get(self.meta_mean), self.store.get(self.meta_std));
        for i in 0..m.rows() {
            for ((v, mu), s) in m.row_mut(i).iter_mut().zip(mean.data()).zip(std.data()) {
                *v = (*v - mu) / s;
            }
        }
        Ok(m)
    }

    /// Sets the meta scale to the column means and stds of `raw`; constant
    /// columns get std 1.
    pub fn fit_meta_scale(&mut self, raw: &Matrix) {
        let (n, d) = (raw.rows() as f64, raw.cols());
        let mut mean = vec![0.0; d];
        for i in 0..raw.rows() {
            for (m, v) in mean.iter_mut().zip(raw.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..raw.rows() {
            for ((s, v), m) in var.iter_mut().zip(raw.row(i)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-8 { v.sqrt() } else { 1.0 }).collect();
        *self.store.get_mut(self.meta_mean) = Matrix::new(1, d, mean).expect("width matches");
        *self.store.get_mut(self.meta_std) = Matrix::new(1, d, std).expect("width matches");
    }

    /// Unscaled `[x | F(x) | C(F(x))]`.
    pub fn raw_meta_inputs(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, &Group::GENERATOR, &[])?;
        let xt = g.constant(x)?;
        let f = self.features(&mut g, &b, xt, None)?;
        let p = self.classify(&mut g, &b, f)?;
        let cat = g.concat(&[xt, f, p])?;
        Ok(g.to_matrix(cat))
    }

    /// Encoder embeddings of precomputed meta inputs.
    pub fn embed(&self, meta_inputs: &Matrix) -> Result<Matrix> {
        self.infer(&[Group::Encoder], meta_inputs, |g, b, xt| self.encoder.forward(g, b, xt, None))
    }

    /// Writes the checkpoint: a text manifest then little-endian `f64` payload.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_checkpoint_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{CHECKPOINT_MAGIC}").expect("vec write");
        writeln!(out, "arch {}", serde_json::to_string(&self.arch)?).expect("vec write");
        writeln!(out, "meta_fitted {}", self.meta_fitted).expect("vec write");
        for id in self.store.ids() {
            let p = self.store.param(id);
            writeln!(out, "param {} {} {}", p.name, p.value.rows(), p.value.cols()).expect("vec write");
        }
        writeln!(out, "end").expect("vec write");
        for id in self.store.ids() {
            for v in self.store.get(id).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = |line_no: &mut usize| -> Result<String> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Parse { line: *line_no + 1, message: "truncated checkpoint header".into() })?;
            let line = std::str::from_utf8(&bytes[pos..pos + end])
                .map_err(|_| Error::Parse { line: *line_no + 1, message: "header is not UTF-8".into() })?
                .to_string();
            pos += end + 1;
            *line_no += 1;
            Ok(line)
        };
        let mut line_no = 0;
        if next_line(&mut line_no)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse { line: 1, message: "not an amean checkpoint".into() });
        }
        let arch_line = next_line(&mut line_no)?;
        let arch: Architecture = serde_json::from_str(
            arch_line
                .strip_prefix("arch ")
                .ok_or_else(|| Error::Parse { line: line_no, message: "expected `arch`".into() })?,
        )?;
        let fitted_line = next_line(&mut line_no)?;
        let meta_fitted = match fitted_line.as_str() {
            "meta_fitted true" => true,
            "meta_fitted false" => false,
            _ => return Err(Error::Parse { line: line_no, message: "expected `meta_fitted`".into() }),
        };
        let mut bundle = Self::build(&arch, 0)?;
        bundle.meta_fitted = meta_fitted;
        let mut manifest = Vec::new();
        loop {
            let line = next_line(&mut line_no)?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            let parsed = match parts.as_slice() {
                ["param", name, r, c] => r.parse::<usize>().ok().zip(c.parse::<usize>().ok()).map(|rc| (name.to_string(), rc)),
                _ => None,
            };
            manifest.push(parsed.ok_or_else(|| Error::Parse { line: line_no, message: format!("bad manifest line `{line}`") })?);
        }
        let ids: Vec<ParamId> = bundle.store.ids().collect();
        if manifest.len() != ids.len() {
            let layer = manifest
                .get(ids.len())
                .map(|m| m.0.clone())
                .or_else(|| ids.get(manifest.len()).map(|id| bundle.store.param(*id).name.clone()))
                .unwrap_or_default();
            return Err(Error::Checkpoint {
                layer,
                detail: format!("manifest lists {} tensors, architecture has {}", manifest.len(), ids.len()),
            });
        }
        for (id, (name, (r, c))) in ids.iter().zip(&manifest) {
            let p = bundle.store.param(*id);
            if &p.name != name || p.value.rows() != *r || p.value.cols() != *c {
                return Err(Error::Checkpoint {
                    layer: name.clone(),
                    detail: format!("manifest {}x{} vs architecture {} {}x{}", r, c, p.name, p.value.rows(), p.value.cols()),
                });
            }
        }
        let payload = &bytes[pos..];
        let total: usize = manifest.iter().map(|(_, (r, c))| r * c).sum();
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint {
                layer: "payload".into(),
                detail: format!("expected {} bytes, found {}", total * 8, payload.len()),
            });
        }
        let mut chunks = payload.chunks_exact(8);
        for id in ids {
            for v in bundle.store.get_mut(id).data_mut() {
                *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
            }
        }
        Ok(bundle)
    }
}

const CHECKPOINT_MAGIC: &str = "amean-checkpoint v1";
