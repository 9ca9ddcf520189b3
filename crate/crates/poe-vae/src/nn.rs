//! Network specifications and their instantiation.
//!
//! A [`NetworkSpec`] is an ordered list of [`LayerSpec`]s plus a terminal
//! head: encoders end in a head emitting Gaussian parameters `(mean,
//! log_var)`, decoders end in logits shaped like the modality. Specs are
//! validated and shape-checked once at build time; the instantiated layers
//! then run on the autodiff [`Tape`](crate::tape::Tape).
//!
//! Encoder networks follow one subset template everywhere: each observed
//! modality contributes its trunk followed by a fused fully-connected layer
//! with ReLU, the fused features are concatenated, and a bias-free
//! fully-connected head emits the `2L` Gaussian parameters. A
//! single-modality encoder is the one-branch instance of the template. The
//! bias-free head makes the parameter cost of a subset network exactly the
//! sum of its per-modality encoder costs, which is what the model-size
//! comparisons in [`model`](crate::model) rely on.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{conv_out, convt_out, Grads, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Elu,
    Sigmoid,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    BatchNorm,
    None,
}

/// One layer of the fixed vocabulary. Kernel geometry exists exactly for
/// the convolution kinds; `Reshape` is parameter-free shape bookkeeping for
/// decoders that move from flat features to spatial maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    FullyConnected {
        out: usize,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Embedding {
        vocab: usize,
        dim: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub norm: Norm,
}

impl LayerSpec {
    pub fn fc(out: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::FullyConnected { out },
            activation,
            norm: Norm::None,
        }
    }

    pub fn conv(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            },
            activation: Activation::Relu,
            norm: Norm::None,
        }
    }

    pub fn conv_transpose(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::ConvTranspose {
                out_channels,
                kernel,
                stride,
                pad,
            },
            activation: Activation::Relu,
            norm: Norm::None,
        }
    }

    pub fn reshape(shape: Vec<usize>) -> Self {
        Self {
            kind: LayerKind::Reshape { shape },
            activation: Activation::None,
            norm: Norm::None,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }
}

/// Terminal head of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSpec {
    /// Bias-free fully-connected layer emitting `(mean, log_var)`; the
    /// latent width comes from the model configuration. `fuse_width` is the
    /// per-branch fused FC+ReLU width of the subset template.
    GaussParams { fuse_width: usize },
    /// Logits shaped like the modality. If the trunk already emits this
    /// shape the head is the identity; otherwise a fully-connected layer
    /// maps the flattened trunk output to it.
    Logits { shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub head: HeadSpec,
}

impl NetworkSpec {
    pub fn encoder(input_shape: Vec<usize>, layers: Vec<LayerSpec>, fuse_width: usize) -> Self {
        Self {
            input_shape,
            layers,
            head: HeadSpec::GaussParams { fuse_width },
        }
    }

    pub fn decoder(latent: usize, layers: Vec<LayerSpec>, out_shape: Vec<usize>) -> Self {
        Self {
            input_shape: vec![latent],
            layers,
            head: HeadSpec::Logits { shape: out_shape },
        }
    }
}

/// Index of a tensor in a [`ParamStore`].
pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat, insertion-ordered store of every tensor a model owns. The order is
/// deterministic for a given configuration, which the optimizer, the
/// checkpoint format and the gradient checks all rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if self.entries[id].value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.entries[id].name,
                self.entries[id].value.shape(),
                value.shape()
            )));
        }
        self.entries[id].value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Total trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Pending running-statistic update from a batch-norm layer evaluated in
/// training mode; the training loop applies these after the step.
pub struct StatUpdate {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub momentum: f64,
}

/// Per-evaluation bridge between a [`ParamStore`] and a [`Tape`]: binds each
/// parameter to a tape leaf on first use so unused networks cost nothing.
pub struct ParamBinder {
    vars: Vec<Option<Var>>,
    pub phase: Phase,
    pub stat_updates: Vec<StatUpdate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

impl ParamBinder {
    pub fn new(store: &ParamStore, phase: Phase) -> Self {
        Self {
            vars: vec![None; store.len()],
            phase,
            stat_updates: Vec::new(),
        }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let entry = store.entry(id);
        let v = if entry.trainable {
            tape.param(entry.value.clone())
        } else {
            tape.leaf(entry.value.clone())
        };
        self.vars[id] = Some(v);
        v
    }

    /// Collects gradients aligned with the store; `None` for parameters the
    /// evaluation never touched (or non-trainable ones).
    pub fn collect_grads(&self, grads: &mut Grads) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|var| grads.take(var)))
            .collect()
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
}

#[derive(Debug, Clone)]
pub(crate) struct NormInst {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub(crate) enum LayerInstKind {
    Dense { w: ParamId, b: ParamId },
    Conv { w: ParamId, b: ParamId, stride: usize, pad: usize },
    ConvT { w: ParamId, b: ParamId, stride: usize, pad: usize },
    Embed { table: ParamId },
    Reshape,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerInst {
    kind: LayerInstKind,
    norm: Option<NormInst>,
    act: Activation,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

/// Builds instantiated layers for a trunk, registering parameters under
/// `prefix`, and returns them with the trunk's output shape.
pub(crate) fn build_layers(
    prefix: &str,
    input_shape: &[usize],
    specs: &[LayerSpec],
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<LayerInst>, Vec<usize>)> {
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::with_capacity(specs.len());
    for (li, spec) in specs.iter().enumerate() {
        let name = |suffix: &str| format!("{prefix}/l{li}/{suffix}");
        let in_shape;
        let out_shape;
        let kind = match &spec.kind {
            LayerKind::FullyConnected { out } => {
                let flat: usize = shape.iter().product();
                in_shape = vec![flat];
                out_shape = vec![*out];
                let bound = 1.0 / (flat as f64).sqrt();
                let w = store.add(name("w"), uniform_tensor(rng, &[flat, *out], bound), true);
                let b = store.add(name("b"), uniform_tensor(rng, &[*out], bound), true);
                LayerInstKind::Dense { w, b }
            }
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let spatial = as_spatial(&shape)?;
                let (c, h, wd) = spatial;
                if h + 2 * pad < *kernel || wd + 2 * pad < *kernel {
                    return Err(Error::config(format!(
                        "{prefix}: conv kernel {kernel} too large for input {h}x{wd}"
                    )));
                }
                in_shape = vec![c, h, wd];
                out_shape = vec![
                    *out_channels,
                    conv_out(h, *kernel, *stride, *pad),
                    conv_out(wd, *kernel, *stride, *pad),
                ];
                let fan_in = c * kernel * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = store.add(
                    name("w"),
                    uniform_tensor(rng, &[*out_channels, c, *kernel, *kernel], bound),
                    true,
                );
                let b = store.add(name("b"), uniform_tensor(rng, &[*out_channels], bound), true);
                LayerInstKind::Conv {
                    w,
                    b,
                    stride: *stride,
                    pad: *pad,
                }
            }
            LayerKind::ConvTranspose {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let (c, h, wd) = as_spatial(&shape)?;
                in_shape = vec![c, h, wd];
                out_shape = vec![
                    *out_channels,
                    convt_out(h, *kernel, *stride, *pad),
                    convt_out(wd, *kernel, *stride, *pad),
                ];
                let fan_in = c * kernel * kernel;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = store.add(
                    name("w"),
                    uniform_tensor(rng, &[c, *out_channels, *kernel, *kernel], bound),
                    true,
                );
                let b = store.add(name("b"), uniform_tensor(rng, &[*out_channels], bound), true);
                LayerInstKind::ConvT {
                    w,
                    b,
                    stride: *stride,
                    pad: *pad,
                }
            }
            LayerKind::Embedding { vocab, dim } => {
                in_shape = shape.clone();
                out_shape = vec![*dim];
                let bound = 1.0 / (*dim as f64).sqrt();
                let table = store.add(name("emb"), uniform_tensor(rng, &[*vocab, *dim], bound), true);
                LayerInstKind::Embed { table }
            }
            LayerKind::Reshape { shape: target } => {
                let flat: usize = shape.iter().product();
                if target.iter().product::<usize>() != flat {
                    return Err(Error::config(format!(
                        "{prefix}: reshape to {target:?} from {flat} elements"
                    )));
                }
                in_shape = shape.clone();
                out_shape = target.clone();
                LayerInstKind::Reshape
            }
        };
        let norm = match spec.norm {
            Norm::None => None,
            Norm::BatchNorm => {
                let features = out_shape[0];
                let gamma = store.add(name("bn_g"), Tensor::ones(ndarray::IxDyn(&[features])), true);
                let beta = store.add(name("bn_b"), Tensor::zeros(ndarray::IxDyn(&[features])), true);
                let running_mean =
                    store.add(name("bn_rm"), Tensor::zeros(ndarray::IxDyn(&[features])), false);
                let running_var =
                    store.add(name("bn_rv"), Tensor::ones(ndarray::IxDyn(&[features])), false);
                Some(NormInst {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                })
            }
        };
        layers.push(LayerInst {
            kind,
            norm,
            act: spec.activation,
            in_shape,
            out_shape,
        });
        shape = layers.last().unwrap().out_shape.clone();
    }
    Ok((layers, shape))
}

fn as_spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape.len() {
        3 => Ok((shape[0], shape[1], shape[2])),
        // flat vectors feed convolutions as [n, 1, 1]
        1 => Ok((shape[0], 1, 1)),
        _ => Err(Error::config(format!(
            "cannot feed shape {shape:?} to a convolution"
        ))),
    }
}

pub(crate) fn forward_layers(
    layers: &[LayerInst],
    tape: &mut Tape,
    binder: &mut ParamBinder,
    store: &ParamStore,
    mut x: Var,
) -> Var {
    for layer in layers {
        let batch = tape.value(x).shape()[0];
        let mut wanted = vec![batch];
        wanted.extend_from_slice(&layer.in_shape);
        if tape.value(x).shape() != wanted.as_slice() {
            x = tape.reshape(x, &wanted);
        }
        x = match &layer.kind {
            LayerInstKind::Dense { w, b } => {
                let wv = binder.bind(tape, store, *w);
                let bv = binder.bind(tape, store, *b);
                tape.linear(x, wv, Some(bv))
            }
            LayerInstKind::Conv { w, b, stride, pad } => {
                let wv = binder.bind(tape, store, *w);
                let bv = binder.bind(tape, store, *b);
                tape.conv2d(x, wv, bv, *stride, *pad)
            }
            LayerInstKind::ConvT { w, b, stride, pad } => {
                let wv = binder.bind(tape, store, *w);
                let bv = binder.bind(tape, store, *b);
                tape.conv_transpose2d(x, wv, bv, *stride, *pad)
            }
            LayerInstKind::Embed { table } => {
                let tv = binder.bind(tape, store, *table);
                let indices: Vec<usize> = tape
                    .value(x)
                    .iter()
                    .map(|&v| v.round().max(0.0) as usize)
                    .collect();
                tape.embedding(tv, indices)
            }
            LayerInstKind::Reshape => {
                let mut target = vec![batch];
                target.extend_from_slice(&layer.out_shape);
                tape.reshape(x, &target)
            }
        };
        if let Some(norm) = &layer.norm {
            let gamma = binder.bind(tape, store, norm.gamma);
            let beta = binder.bind(tape, store, norm.beta);
            let stats = match binder.phase {
                Phase::Train => None,
                Phase::Eval => {
                    let rm = store.value(norm.running_mean);
                    let rv = store.value(norm.running_var);
                    Some((
                        rm.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned(),
                        rv.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned(),
                    ))
                }
            };
            let (y, mean, var) = tape.batch_norm(x, gamma, beta, BN_EPS, stats);
            if binder.phase == Phase::Train {
                binder.stat_updates.push(StatUpdate {
                    mean_id: norm.running_mean,
                    var_id: norm.running_var,
                    mean,
                    var,
                    momentum: BN_MOMENTUM,
                });
            }
            x = y;
        }
        x = match layer.act {
            Activation::Relu => tape.relu(x),
            Activation::Elu => tape.elu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::None => x,
        };
    }
    x
}

/// One modality's path inside a subset encoder: trunk layers plus the fused
/// FC+ReLU branch head.
pub(crate) struct Branch {
    pub layers: Vec<LayerInst>,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub fuse_width: usize,
}

/// Encoder over an ordered subset of modalities, following the subset
/// template. The latent head is bias-free.
pub struct SubsetEncoder {
    pub name: String,
    pub modalities: Vec<usize>,
    pub(crate) branches: Vec<Branch>,
    pub(crate) head_w: ParamId,
    pub latent: usize,
    param_ids: Vec<ParamId>,
}

impl SubsetEncoder {
    /// `modalities` are dataset modality indices; `inputs[k]` must be the
    /// input for `modalities[k]`.
    pub(crate) fn build(
        name: String,
        modalities: Vec<usize>,
        specs: &[&NetworkSpec],
        latent: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        assert_eq!(modalities.len(), specs.len());
        let first_param = store.len();
        let mut branches = Vec::new();
        let mut total_fuse = 0;
        for (k, spec) in specs.iter().enumerate() {
            let HeadSpec::GaussParams { fuse_width } = spec.head else {
                return Err(Error::config(format!(
                    "{name}: encoder spec must have a GaussParams head"
                )));
            };
            let prefix = format!("{name}/b{k}");
            let (layers, out_shape) =
                build_layers(&prefix, &spec.input_shape, &spec.layers, store, rng)?;
            let flat: usize = out_shape.iter().product();
            let bound = 1.0 / (flat as f64).sqrt();
            let fuse_w = store.add(
                format!("{prefix}/fuse_w"),
                uniform_tensor(rng, &[flat, fuse_width], bound),
                true,
            );
            let fuse_b = store.add(
                format!("{prefix}/fuse_b"),
                uniform_tensor(rng, &[fuse_width], bound),
                true,
            );
            total_fuse += fuse_width;
            branches.push(Branch {
                layers,
                fuse_w,
                fuse_b,
                fuse_width,
            });
        }
        let bound = 1.0 / (total_fuse as f64).sqrt();
        let head_w = store.add(
            format!("{name}/head_w"),
            uniform_tensor(rng, &[total_fuse, 2 * latent], bound),
            true,
        );
        let param_ids = (first_param..store.len()).collect();
        Ok(Self {
            name,
            modalities,
            branches,
            head_w,
            latent,
            param_ids,
        })
    }

    /// Raw Gaussian parameters `[B, 2L]` (not yet clamped).
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        store: &ParamStore,
        inputs: &[Var],
    ) -> Var {
        assert_eq!(inputs.len(), self.branches.len());
        let mut fused = Vec::with_capacity(self.branches.len());
        for (branch, &input) in self.branches.iter().zip(inputs) {
            let trunk = forward_layers(&branch.layers, tape, binder, store, input);
            let batch = tape.value(trunk).shape()[0];
            let flat: usize = tape.value(trunk).len() / batch;
            let trunk = if tape.value(trunk).ndim() != 2 {
                tape.reshape(trunk, &[batch, flat])
            } else {
                trunk
            };
            let w = binder.bind(tape, store, branch.fuse_w);
            let b = binder.bind(tape, store, branch.fuse_b);
            let pre = tape.linear(trunk, w, Some(b));
            fused.push(tape.relu(pre));
        }
        let features = if fused.len() == 1 {
            fused[0]
        } else {
            tape.concat(&fused, 1)
        };
        let w = binder.bind(tape, store, self.head_w);
        tape.linear(features, w, None)
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        self.param_ids
            .iter()
            .filter(|&&id| store.entry(id).trainable)
            .map(|&id| store.value(id).len())
            .sum()
    }
}

/// Decoder from latent codes to modality logits.
pub struct Decoder {
    pub name: String,
    pub(crate) layers: Vec<LayerInst>,
    pub(crate) head: Option<(ParamId, ParamId)>,
    pub out_shape: Vec<usize>,
    param_ids: Vec<ParamId>,
}

impl Decoder {
    pub(crate) fn build(
        name: String,
        spec: &NetworkSpec,
        latent: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let HeadSpec::Logits { shape: out_shape } = &spec.head else {
            return Err(Error::config(format!(
                "{name}: decoder spec must have a Logits head"
            )));
        };
        if spec.input_shape != [latent] {
            return Err(Error::config(format!(
                "{name}: decoder input shape {:?} does not match latent {latent}",
                spec.input_shape
            )));
        }
        let first_param = store.len();
        let (layers, trunk_shape) =
            build_layers(&name, &spec.input_shape, &spec.layers, store, rng)?;
        let head = if trunk_shape == *out_shape {
            None
        } else {
            let flat: usize = trunk_shape.iter().product();
            let out: usize = out_shape.iter().product();
            let bound = 1.0 / (flat as f64).sqrt();
            let w = store.add(
                format!("{name}/head_w"),
                uniform_tensor(rng, &[flat, out], bound),
                true,
            );
            let b = store.add(format!("{name}/head_b"), uniform_tensor(rng, &[out], bound), true);
            Some((w, b))
        };
        let param_ids = (first_param..store.len()).collect();
        Ok(Self {
            name,
            layers,
            head,
            out_shape: out_shape.clone(),
            param_ids,
        })
    }

    /// Logits shaped `[B, out_shape...]`.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut ParamBinder,
        store: &ParamStore,
        z: Var,
    ) -> Var {
        let mut x = forward_layers(&self.layers, tape, binder, store, z);
        if let Some((w, b)) = self.head {
            let batch = tape.value(x).shape()[0];
            let flat: usize = tape.value(x).len() / batch;
            if tape.value(x).ndim() != 2 {
                x = tape.reshape(x, &[batch, flat]);
            }
            let wv = binder.bind(tape, store, w);
            let bv = binder.bind(tape, store, b);
            x = tape.linear(x, wv, Some(bv));
        }
        let batch = tape.value(x).shape()[0];
        let mut target = vec![batch];
        target.extend_from_slice(&self.out_shape);
        if tape.value(x).shape() != target.as_slice() {
            x = tape.reshape(x, &target);
        }
        x
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        self.param_ids
            .iter()
            .filter(|&&id| store.entry(id).trainable)
            .map(|&id| store.value(id).len())
            .sum()
    }
}

/// Applies pending batch-norm running-statistic updates.
pub fn apply_stat_updates(store: &mut ParamStore, updates: Vec<StatUpdate>) {
    for u in updates {
        let apply = |old: &mut Tensor, new: &Array1<f64>| {
            let mut v = old.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            for (o, n) in v.iter_mut().zip(new.iter()) {
                *o = (1.0 - u.momentum) * *o + u.momentum * *n;
            }
        };
        apply(store.value_mut(u.mean_id), &u.mean);
        apply(store.value_mut(u.var_id), &u.var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn mlp_encoder_spec() -> NetworkSpec {
        NetworkSpec::encoder(vec![1, 4, 4], vec![LayerSpec::fc(8, Activation::Relu)], 6)
    }

    #[test]
    fn subset_encoder_shapes_and_counts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = mlp_encoder_spec();
        let single = SubsetEncoder::build(
            "enc_m0".into(),
            vec![0],
            &[&spec],
            3,
            &mut store,
            &mut rng,
        )
        .unwrap();
        let pair = SubsetEncoder::build(
            "enc_s01".into(),
            vec![0, 1],
            &[&spec, &spec],
            3,
            &mut store,
            &mut rng,
        )
        .unwrap();
        // bias-free head makes the subset cost exactly additive
        assert_eq!(
            pair.parameter_count(&store),
            2 * single.parameter_count(&store)
        );

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store, Phase::Eval);
        let x = tape.leaf(Tensor::zeros(IxDyn(&[5, 1, 4, 4])));
        let out = single.forward(&mut tape, &mut binder, &store, &[x]);
        assert_eq!(tape.value(out).shape(), &[5, 6]);
        let x2 = tape.leaf(Tensor::zeros(IxDyn(&[5, 1, 4, 4])));
        let out2 = pair.forward(&mut tape, &mut binder, &store, &[x, x2]);
        assert_eq!(tape.value(out2).shape(), &[5, 6]);
    }

    #[test]
    fn decoder_identity_head_when_shapes_match() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // conv-transpose chain that lands exactly on the output shape
        let spec = NetworkSpec::decoder(
            4,
            vec![
                LayerSpec::conv_transpose(3, 4, 1, 0),
                LayerSpec::conv_transpose(1, 4, 2, 1).with_activation(Activation::None),
            ],
            vec![1, 8, 8],
        );
        let dec = Decoder::build("dec_m0".into(), &spec, 4, &mut store, &mut rng).unwrap();
        assert!(dec.head.is_none());
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store, Phase::Eval);
        let z = tape.leaf(Tensor::zeros(IxDyn(&[2, 4])));
        let out = dec.forward(&mut tape, &mut binder, &store, z);
        assert_eq!(tape.value(out).shape(), &[2, 1, 8, 8]);
    }

    #[test]
    fn decoder_flat_head_added_when_needed() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = NetworkSpec::decoder(
            4,
            vec![LayerSpec::fc(10, Activation::Relu)],
            vec![1, 3, 3],
        );
        let dec = Decoder::build("dec_m0".into(), &spec, 4, &mut store, &mut rng).unwrap();
        assert!(dec.head.is_some());
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store, Phase::Eval);
        let z = tape.leaf(Tensor::zeros(IxDyn(&[2, 4])));
        let out = dec.forward(&mut tape, &mut binder, &store, z);
        assert_eq!(tape.value(out).shape(), &[2, 1, 3, 3]);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let spec = mlp_encoder_spec();
            SubsetEncoder::build("e".into(), vec![0], &[&spec], 3, &mut store, &mut rng).unwrap();
            store
        };
        let a = build();
        let b = build();
        for ((_, ea), (_, eb)) in a.iter().zip(b.iter()) {
            assert_eq!(ea.value, eb.value);
        }
    }

    #[test]
    fn batch_norm_layer_runs_both_phases() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = NetworkSpec::encoder(
            vec![6],
            vec![LayerSpec::fc(4, Activation::Relu).with_norm(Norm::BatchNorm)],
            4,
        );
        let enc =
            SubsetEncoder::build("e".into(), vec![0], &[&spec], 2, &mut store, &mut rng).unwrap();
        let x_data = Tensor::from_shape_vec(
            IxDyn(&[3, 6]),
            (0..18).map(|i| i as f64 * 0.1).collect(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store, Phase::Train);
        let x = tape.leaf(x_data.clone());
        let _ = enc.forward(&mut tape, &mut binder, &store, &[x]);
        assert_eq!(binder.stat_updates.len(), 1);
        apply_stat_updates(&mut store, binder.stat_updates);
        let rm = store.value(store.find("e/b0/l0/bn_rm").unwrap());
        assert!(rm.iter().any(|&v| v != 0.0));

        let mut tape = Tape::new();
        let mut binder = ParamBinder::new(&store, Phase::Eval);
        let x = tape.leaf(x_data);
        let out = enc.forward(&mut tape, &mut binder, &store, &[x]);
        assert!(binder.stat_updates.is_empty());
        assert_eq!(tape.value(out).shape(), &[3, 4]);
    }
}
