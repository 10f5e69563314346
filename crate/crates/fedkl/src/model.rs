//! Model assembly: ordered layers plus a named parameter registry where every
//! tensor is tagged shareable or lock-private. The tag partition is what the
//! federated protocol relies on — aggregation code never sees lock-private
//! entries.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keylock::{keylock_backward, keylock_forward, Key, KeyLockCache, KeyLockModule};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, linear_backward,
    linear_forward, relu_backward, relu_forward, softmax_ce, softmax_ce_soft, BatchNormLayer,
    BnCache, ConvCache, LinearCache, LinearLayer, ReluCache, BN_EPS,
};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Bn,
    Keylock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    Shareable,
    LockPrivate,
}

fn default_key_len() -> usize {
    crate::keylock::DEFAULT_KEY_LEN
}

fn default_lock_bias() -> bool {
    true
}

/// Architecture descriptor; serializable so configs and checkpoints can name
/// the network they expect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// `fc -> (norm) -> relu` repeated over `dims`, final fc into softmax/CE.
    Mlp {
        dims: Vec<usize>,
        norm: NormKind,
        #[serde(default = "default_key_len")]
        key_len: usize,
        #[serde(default = "default_lock_bias")]
        lock_bias: bool,
    },
    /// `conv -> norm-or-keylock -> relu -> flatten -> fc` into softmax/CE.
    TinyCnn {
        in_channels: usize,
        height: usize,
        width: usize,
        channels: usize,
        kernel: usize,
        classes: usize,
        norm: NormKind,
        #[serde(default = "default_key_len")]
        key_len: usize,
        #[serde(default = "default_lock_bias")]
        lock_bias: bool,
    },
}

impl ModelSpec {
    pub fn norm(&self) -> NormKind {
        match self {
            ModelSpec::Mlp { norm, .. } | ModelSpec::TinyCnn { norm, .. } => *norm,
        }
    }

    pub fn has_keylock(&self) -> bool {
        self.norm() == NormKind::Keylock
    }

    pub fn key_len(&self) -> usize {
        match self {
            ModelSpec::Mlp { key_len, .. } | ModelSpec::TinyCnn { key_len, .. } => *key_len,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { dims, .. } => *dims.last().unwrap_or(&0),
            ModelSpec::TinyCnn { classes, .. } => *classes,
        }
    }

    /// Per-sample input shape (`[d]` for the MLP, `[c, h, w]` for the CNN).
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Mlp { dims, .. } => vec![dims[0]],
            ModelSpec::TinyCnn {
                in_channels,
                height,
                width,
                ..
            } => vec![*in_channels, *height, *width],
        }
    }
}

#[derive(Debug, Clone)]
enum LayerNode {
    Linear {
        name: String,
        layer: LinearLayer,
    },
    Conv {
        name: String,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    Norm {
        name: String,
        layer: BatchNormLayer,
    },
    Lock {
        name: String,
        module: KeyLockModule,
    },
    Relu,
    Flatten,
}

/// Per-layer forward intermediates consumed by the matching backward.
#[derive(Debug, Clone)]
pub enum NodeCache {
    Linear(LinearCache),
    Conv(ConvCache),
    Norm(BnCache),
    Lock(KeyLockCache),
    Relu(ReluCache),
    Flatten { shape: Vec<usize> },
}

/// A model is a value: clone it to hand a client its own copy.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<LayerNode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: ParamTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub grad: Tensor,
    pub tag: ParamTag,
}

/// Named per-parameter gradients (or gradient-equivalent deltas) for one
/// model. Entries are ordered by name, so serialization and folds are
/// deterministic.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientBundle {
    entries: BTreeMap<String, BundleEntry>,
}

/// Result of one whole-model forward/backward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutcome {
    pub loss: f64,
    /// Softmax probabilities, `[n, classes]`.
    pub probs: Tensor,
    pub grads: GradientBundle,
    pub caches: Vec<NodeCache>,
}

impl GradientBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor, tag: ParamTag) {
        self.entries.insert(name.into(), BundleEntry { grad, tag });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.grad)
    }

    pub fn tag(&self, name: &str) -> Option<ParamTag> {
        self.entries.get(name).map(|e| e.tag)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &BundleEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Split by tag into `(shareable, lock_private)`. The two halves are
    /// disjoint and their union is the original bundle.
    pub fn partition(&self) -> (GradientBundle, GradientBundle) {
        let mut shareable = GradientBundle::new();
        let mut private = GradientBundle::new();
        for (name, entry) in &self.entries {
            match entry.tag {
                ParamTag::Shareable => shareable.entries.insert(name.clone(), entry.clone()),
                ParamTag::LockPrivate => private.entries.insert(name.clone(), entry.clone()),
            };
        }
        (shareable, private)
    }

    /// Disjoint union; rejects overlapping names.
    pub fn merge(a: &GradientBundle, b: &GradientBundle) -> Result<GradientBundle> {
        let mut out = a.clone();
        for (name, entry) in &b.entries {
            if out.entries.insert(name.clone(), entry.clone()).is_some() {
                return Err(Error::RegistryMismatch {
                    msg: format!("merge would overwrite entry {name}"),
                });
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Result<GradientBundle> {
        let mut out = GradientBundle::new();
        for (name, entry) in &self.entries {
            out.insert(name.clone(), entry.grad.scale(s)?, entry.tag);
        }
        Ok(out)
    }

    /// Elementwise sum; registries must agree exactly.
    pub fn add(&self, other: &GradientBundle) -> Result<GradientBundle> {
        if !self.same_registry(other) {
            return Err(Error::RegistryMismatch {
                msg: "bundle addition requires identical registries".to_string(),
            });
        }
        let mut out = GradientBundle::new();
        for (name, entry) in &self.entries {
            let rhs = &other.entries[name];
            out.insert(name.clone(), entry.grad.add(&rhs.grad)?, entry.tag);
        }
        Ok(out)
    }

    pub fn same_registry(&self, other: &GradientBundle) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().all(|(name, e)| {
                other
                    .entries
                    .get(name)
                    .map(|o| o.tag == e.tag && o.grad.shape() == e.grad.shape())
                    .unwrap_or(false)
            })
    }

    /// Sum over entries of the squared L2 distance to `other`, restricted to
    /// the names present in `self`. Missing names in `other` are an error.
    pub fn sq_distance_to(&self, other: &GradientBundle) -> Result<f64> {
        let mut acc = 0.0;
        for (name, entry) in &self.entries {
            let o = other.get(name).ok_or_else(|| Error::RegistryMismatch {
                msg: format!("entry {name} missing from comparison bundle"),
            })?;
            let d = entry.grad.sub(o)?;
            acc += d.dot(&d)?;
        }
        Ok(acc)
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn has_keylock(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerNode::Lock { .. }))
    }

    /// Build the architecture named by `spec` with seeded He-normal weights.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        match spec {
            ModelSpec::Mlp {
                dims,
                norm,
                key_len,
                lock_bias,
            } => build_mlp_inner(dims, *norm, *key_len, *lock_bias, seed, spec.clone()),
            ModelSpec::TinyCnn {
                in_channels,
                height,
                width,
                channels,
                kernel,
                classes,
                norm,
                key_len,
                lock_bias,
            } => build_tinycnn_inner(
                (*in_channels, *height, *width),
                *channels,
                *kernel,
                *classes,
                *norm,
                *key_len,
                *lock_bias,
                seed,
                spec.clone(),
            ),
        }
    }

    /// Registry of every trainable tensor, in layer order.
    pub fn registry(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        self.visit_params(|name, tensor, tag| {
            out.push(ParamInfo {
                name: name.to_string(),
                shape: tensor.shape().to_vec(),
                tag,
            });
        });
        out
    }

    pub fn shareable_params(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        self.visit_params(|name, tensor, tag| {
            if tag == ParamTag::Shareable {
                out.insert(name.to_string(), tensor.clone());
            }
        });
        out
    }

    fn visit_params(&self, mut f: impl FnMut(&str, &Tensor, ParamTag)) {
        for node in &self.layers {
            match node {
                LayerNode::Linear { name, layer } => {
                    f(&format!("{name}.weight"), &layer.weight, ParamTag::Shareable);
                    f(&format!("{name}.bias"), &layer.bias, ParamTag::Shareable);
                }
                LayerNode::Conv { name, weight, bias, .. } => {
                    f(&format!("{name}.weight"), weight, ParamTag::Shareable);
                    f(&format!("{name}.bias"), bias, ParamTag::Shareable);
                }
                LayerNode::Norm { name, layer } => {
                    f(&format!("{name}.gamma"), &layer.gamma, ParamTag::Shareable);
                    f(&format!("{name}.beta"), &layer.beta, ParamTag::Shareable);
                }
                LayerNode::Lock { name, module } => {
                    f(&format!("{name}.lock_w_gamma"), &module.w_gamma, ParamTag::LockPrivate);
                    f(&format!("{name}.lock_b_gamma"), &module.b_gamma, ParamTag::LockPrivate);
                    f(&format!("{name}.lock_w_beta"), &module.w_beta, ParamTag::LockPrivate);
                    f(&format!("{name}.lock_b_beta"), &module.b_beta, ParamTag::LockPrivate);
                }
                LayerNode::Relu | LayerNode::Flatten => {}
            }
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.param_ref(name)
            .ok_or_else(|| Error::RegistryMismatch {
                msg: format!("unknown parameter {name}"),
            })
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        for node in &mut self.layers {
            match node {
                LayerNode::Linear { name: n, layer } => {
                    if name == format!("{n}.weight") {
                        return Ok(&mut layer.weight);
                    }
                    if name == format!("{n}.bias") {
                        return Ok(&mut layer.bias);
                    }
                }
                LayerNode::Conv { name: n, weight, bias, .. } => {
                    if name == format!("{n}.weight") {
                        return Ok(weight);
                    }
                    if name == format!("{n}.bias") {
                        return Ok(bias);
                    }
                }
                LayerNode::Norm { name: n, layer } => {
                    if name == format!("{n}.gamma") {
                        return Ok(&mut layer.gamma);
                    }
                    if name == format!("{n}.beta") {
                        return Ok(&mut layer.beta);
                    }
                }
                LayerNode::Lock { name: n, module } => {
                    if name == format!("{n}.lock_w_gamma") {
                        return Ok(&mut module.w_gamma);
                    }
                    if name == format!("{n}.lock_b_gamma") {
                        return Ok(&mut module.b_gamma);
                    }
                    if name == format!("{n}.lock_w_beta") {
                        return Ok(&mut module.w_beta);
                    }
                    if name == format!("{n}.lock_b_beta") {
                        return Ok(&mut module.b_beta);
                    }
                }
                LayerNode::Relu | LayerNode::Flatten => {}
            }
        }
        Err(Error::RegistryMismatch {
            msg: format!("unknown parameter {name}"),
        })
    }

    fn param_ref(&self, name: &str) -> Option<&Tensor> {
        for node in &self.layers {
            match node {
                LayerNode::Linear { name: n, layer } => {
                    if name == format!("{n}.weight") {
                        return Some(&layer.weight);
                    }
                    if name == format!("{n}.bias") {
                        return Some(&layer.bias);
                    }
                }
                LayerNode::Conv { name: n, weight, bias, .. } => {
                    if name == format!("{n}.weight") {
                        return Some(weight);
                    }
                    if name == format!("{n}.bias") {
                        return Some(bias);
                    }
                }
                LayerNode::Norm { name: n, layer } => {
                    if name == format!("{n}.gamma") {
                        return Some(&layer.gamma);
                    }
                    if name == format!("{n}.beta") {
                        return Some(&layer.beta);
                    }
                }
                LayerNode::Lock { name: n, module } => {
                    if name == format!("{n}.lock_w_gamma") {
                        return Some(&module.w_gamma);
                    }
                    if name == format!("{n}.lock_b_gamma") {
                        return Some(&module.b_gamma);
                    }
                    if name == format!("{n}.lock_w_beta") {
                        return Some(&module.w_beta);
                    }
                    if name == format!("{n}.lock_b_beta") {
                        return Some(&module.b_beta);
                    }
                }
                LayerNode::Relu | LayerNode::Flatten => {}
            }
        }
        None
    }

    /// Registry name of the output layer's bias — the `(ŷ − y)`-shaped
    /// gradient the label-inference attack reads.
    pub fn output_bias_name(&self) -> Result<String> {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerNode::Linear { name, .. } => Some(format!("{name}.bias")),
                _ => None,
            })
            .ok_or_else(|| Error::Invariant {
                msg: "model has no linear output layer".to_string(),
            })
    }

    /// Registry names of the first linear layer's weight and bias — the pair
    /// the closed-form input reconstruction divides.
    pub fn first_linear_names(&self) -> Result<(String, String)> {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerNode::Linear { name, .. } => {
                    Some((format!("{name}.weight"), format!("{name}.bias")))
                }
                _ => None,
            })
            .ok_or_else(|| Error::Invariant {
                msg: "model has no linear layer".to_string(),
            })
    }

    /// Reshape a `[n, c, h, w]` batch into whatever the first layer expects.
    pub fn prepare_input(&self, batch: &Tensor) -> Result<Tensor> {
        match &self.spec {
            ModelSpec::Mlp { dims, .. } => {
                let n = batch.shape()[0];
                let per: usize = batch.len() / n.max(1);
                if per != dims[0] {
                    return Err(Error::ShapeMismatch {
                        op: "prepare_input",
                        lhs: batch.shape().to_vec(),
                        rhs: vec![n, dims[0]],
                    });
                }
                batch.reshape(vec![n, dims[0]])
            }
            ModelSpec::TinyCnn {
                in_channels,
                height,
                width,
                ..
            } => {
                if batch.ndim() != 4
                    || batch.shape()[1] != *in_channels
                    || batch.shape()[2] != *height
                    || batch.shape()[3] != *width
                {
                    return Err(Error::ShapeMismatch {
                        op: "prepare_input",
                        lhs: batch.shape().to_vec(),
                        rhs: vec![batch.shape()[0], *in_channels, *height, *width],
                    });
                }
                Ok(batch.clone())
            }
        }
    }

    /// Forward pass to logits. `key` is required iff the model has a lock.
    pub fn forward(&self, x: &Tensor, key: Option<&Key>) -> Result<Tensor> {
        let (logits, _) = self.forward_with_caches(x, key)?;
        Ok(logits)
    }

    fn forward_with_caches(
        &self,
        x: &Tensor,
        key: Option<&Key>,
    ) -> Result<(Tensor, Vec<NodeCache>)> {
        if self.has_keylock() && key.is_none() {
            return Err(Error::KeyRequired);
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for node in &self.layers {
            match node {
                LayerNode::Linear { layer, .. } => {
                    let (u, cache) = linear_forward(layer, &cur)?;
                    cur = u;
                    caches.push(NodeCache::Linear(cache));
                }
                LayerNode::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                    ..
                } => {
                    let (u, cache) = conv2d_forward(&cur, weight, bias, *stride, *pad)?;
                    cur = u;
                    caches.push(NodeCache::Conv(cache));
                }
                LayerNode::Norm { layer, .. } => {
                    let (s, cache) = batchnorm_forward(layer, &cur)?;
                    cur = s;
                    caches.push(NodeCache::Norm(cache));
                }
                LayerNode::Lock { module, .. } => {
                    let k = key.ok_or(Error::KeyRequired)?;
                    let (s, cache) = keylock_forward(module, &cur, k)?;
                    cur = s;
                    caches.push(NodeCache::Lock(cache));
                }
                LayerNode::Relu => {
                    let (a, cache) = relu_forward(&cur)?;
                    cur = a;
                    caches.push(NodeCache::Relu(cache));
                }
                LayerNode::Flatten => {
                    let shape = cur.shape().to_vec();
                    let n = shape[0];
                    let rest: usize = shape[1..].iter().product();
                    cur = cur.reshape(vec![n, rest])?;
                    caches.push(NodeCache::Flatten { shape });
                }
            }
        }
        Ok((cur, caches))
    }

    fn backward_from(
        &self,
        caches: &[NodeCache],
        grad_logits: Tensor,
    ) -> Result<GradientBundle> {
        let mut bundle = GradientBundle::new();
        let mut upstream = grad_logits;
        for (node, cache) in self.layers.iter().zip(caches.iter()).rev() {
            match (node, cache) {
                (LayerNode::Linear { name, layer }, NodeCache::Linear(c)) => {
                    let (gw, gb, gx) = linear_backward(layer, c, &upstream)?;
                    bundle.insert(format!("{name}.weight"), gw, ParamTag::Shareable);
                    bundle.insert(format!("{name}.bias"), gb, ParamTag::Shareable);
                    upstream = gx;
                }
                (LayerNode::Conv { name, weight, .. }, NodeCache::Conv(c)) => {
                    let (gw, gb, gx) = conv2d_backward(weight, c, &upstream)?;
                    bundle.insert(format!("{name}.weight"), gw, ParamTag::Shareable);
                    bundle.insert(format!("{name}.bias"), gb, ParamTag::Shareable);
                    upstream = gx;
                }
                (LayerNode::Norm { name, layer }, NodeCache::Norm(c)) => {
                    let (gg, gb, gx) = batchnorm_backward(layer, c, &upstream)?;
                    bundle.insert(format!("{name}.gamma"), gg, ParamTag::Shareable);
                    bundle.insert(format!("{name}.beta"), gb, ParamTag::Shareable);
                    upstream = gx;
                }
                (LayerNode::Lock { name, module }, NodeCache::Lock(c)) => {
                    let g = keylock_backward(module, c, &upstream)?;
                    bundle.insert(format!("{name}.lock_w_gamma"), g.w_gamma, ParamTag::LockPrivate);
                    bundle.insert(format!("{name}.lock_b_gamma"), g.b_gamma, ParamTag::LockPrivate);
                    bundle.insert(format!("{name}.lock_w_beta"), g.w_beta, ParamTag::LockPrivate);
                    bundle.insert(format!("{name}.lock_b_beta"), g.b_beta, ParamTag::LockPrivate);
                    upstream = g.x;
                }
                (LayerNode::Relu, NodeCache::Relu(c)) => {
                    upstream = relu_backward(c, &upstream)?;
                }
                (LayerNode::Flatten, NodeCache::Flatten { shape }) => {
                    upstream = upstream.reshape(shape.clone())?;
                }
                _ => {
                    return Err(Error::Invariant {
                        msg: "cache/layer sequence mismatch".to_string(),
                    })
                }
            }
        }
        Ok(bundle)
    }
}

/// Whole-model forward and backward against one-hot labels. Deterministic:
/// the same inputs always produce the identical bundle.
pub fn forward_backward(
    model: &Model,
    x: &Tensor,
    y_onehot: &Tensor,
    key: Option<&Key>,
) -> Result<ForwardOutcome> {
    let (logits, caches) = model.forward_with_caches(x, key)?;
    let (loss, grad_z, probs) = softmax_ce(&logits, y_onehot)?;
    let grads = model.backward_from(&caches, grad_z)?;
    Ok(ForwardOutcome {
        loss,
        probs,
        grads,
        caches,
    })
}

/// Like [`forward_backward`] but against arbitrary label distributions
/// (used when an attack optimizes a soft label).
pub fn forward_backward_soft(
    model: &Model,
    x: &Tensor,
    target: &Tensor,
    key: Option<&Key>,
) -> Result<ForwardOutcome> {
    let (logits, caches) = model.forward_with_caches(x, key)?;
    let (loss, grad_z, probs) = softmax_ce_soft(&logits, target)?;
    let grads = model.backward_from(&caches, grad_z)?;
    Ok(ForwardOutcome {
        loss,
        probs,
        grads,
        caches,
    })
}

/// Smallest |pre-activation| across the model's ReLU layers for one pass.
/// Gradient checks resample instances whose margin is smaller than the
/// finite-difference step, since the subgradient at the kink is one-sided.
pub fn min_relu_margin(outcome: &ForwardOutcome) -> f64 {
    let mut margin = f64::INFINITY;
    for cache in &outcome.caches {
        if let NodeCache::Relu(c) = cache {
            for &v in c.u.data() {
                margin = margin.min(v.abs());
            }
        }
    }
    margin
}

/// `p ← p − lr·grad` for every parameter named in the bundle.
pub fn sgd_step(model: &mut Model, bundle: &GradientBundle, lr: f64) -> Result<()> {
    for (name, entry) in bundle.iter() {
        let p = model.param_mut(name)?;
        if p.shape() != entry.grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: p.shape().to_vec(),
                rhs: entry.grad.shape().to_vec(),
            });
        }
        *p = p.sub(&entry.grad.scale(lr)?)?;
    }
    Ok(())
}

/// `fc -> (norm) -> relu` chain over `dims`; a key-lock replaces only the
/// first normalization block, later blocks stay plain batch-norm.
pub fn build_mlp(
    dims: &[usize],
    norm: NormKind,
    key_len: usize,
    lock_bias: bool,
    seed: u64,
) -> Result<Model> {
    let spec = ModelSpec::Mlp {
        dims: dims.to_vec(),
        norm,
        key_len,
        lock_bias,
    };
    Model::build(&spec, seed)
}

fn build_mlp_inner(
    dims: &[usize],
    norm: NormKind,
    key_len: usize,
    lock_bias: bool,
    seed: u64,
    spec: ModelSpec,
) -> Result<Model> {
    if dims.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "build_mlp",
            msg: format!("need at least input and output dims, got {dims:?}"),
        });
    }
    if norm == NormKind::Keylock && key_len == 0 {
        return Err(Error::InvalidArgument {
            op: "build_mlp",
            msg: "key-lock norm requires key_len >= 1".to_string(),
        });
    }
    let mut rng = rng::seeded(seed);
    let mut layers = Vec::new();
    let hidden_blocks = dims.len() - 2;
    for i in 0..dims.len() - 1 {
        let (d_in, d_out) = (dims[i], dims[i + 1]);
        let std = (2.0 / d_in as f64).sqrt();
        layers.push(LayerNode::Linear {
            name: format!("fc{}", i + 1),
            layer: LinearLayer {
                weight: rng::normal_tensor(&mut rng, &[d_out, d_in], std),
                bias: Tensor::zeros(&[d_out]),
            },
        });
        let is_hidden = i < hidden_blocks;
        if is_hidden {
            match (norm, i) {
                (NormKind::None, _) => {}
                (NormKind::Keylock, 0) => layers.push(LayerNode::Lock {
                    name: format!("norm{}", i + 1),
                    module: KeyLockModule::init(key_len, d_out, lock_bias, &mut rng),
                }),
                _ => layers.push(LayerNode::Norm {
                    name: format!("norm{}", i + 1),
                    layer: BatchNormLayer {
                        gamma: Tensor::full(&[d_out], 1.0)?,
                        beta: Tensor::zeros(&[d_out]),
                        eps: BN_EPS,
                    },
                }),
            }
            layers.push(LayerNode::Relu);
        }
    }
    Ok(Model { spec, layers })
}

/// Single conv block CNN: `conv -> norm-or-keylock -> relu -> flatten -> fc`.
/// The convolution is stride 1 with no padding.
#[allow(clippy::too_many_arguments)]
pub fn build_tinycnn(
    in_shape: (usize, usize, usize),
    channels: usize,
    kernel: usize,
    classes: usize,
    norm: NormKind,
    key_len: usize,
    lock_bias: bool,
    seed: u64,
) -> Result<Model> {
    let spec = ModelSpec::TinyCnn {
        in_channels: in_shape.0,
        height: in_shape.1,
        width: in_shape.2,
        channels,
        kernel,
        classes,
        norm,
        key_len,
        lock_bias,
    };
    Model::build(&spec, seed)
}

#[allow(clippy::too_many_arguments)]
fn build_tinycnn_inner(
    in_shape: (usize, usize, usize),
    channels: usize,
    kernel: usize,
    classes: usize,
    norm: NormKind,
    key_len: usize,
    lock_bias: bool,
    seed: u64,
    spec: ModelSpec,
) -> Result<Model> {
    let (c, h, w) = in_shape;
    if kernel > h || kernel > w {
        return Err(Error::InvalidArgument {
            op: "build_tinycnn",
            msg: format!("kernel {kernel} larger than padded input {h}x{w}"),
        });
    }
    if norm == NormKind::Keylock && key_len == 0 {
        return Err(Error::InvalidArgument {
            op: "build_tinycnn",
            msg: "key-lock norm requires key_len >= 1".to_string(),
        });
    }
    let mut rng = rng::seeded(seed);
    let mut layers = Vec::new();
    let fan_in = c * kernel * kernel;
    let std = (2.0 / fan_in as f64).sqrt();
    layers.push(LayerNode::Conv {
        name: "conv1".to_string(),
        weight: rng::normal_tensor(&mut rng, &[channels, c, kernel, kernel], std),
        bias: Tensor::zeros(&[channels]),
        stride: 1,
        pad: 0,
    });
    match norm {
        NormKind::None => {}
        NormKind::Bn => layers.push(LayerNode::Norm {
            name: "norm1".to_string(),
            layer: BatchNormLayer {
                gamma: Tensor::full(&[channels], 1.0)?,
                beta: Tensor::zeros(&[channels]),
                eps: BN_EPS,
            },
        }),
        NormKind::Keylock => layers.push(LayerNode::Lock {
            name: "norm1".to_string(),
            module: KeyLockModule::init(key_len, channels, lock_bias, &mut rng),
        }),
    }
    layers.push(LayerNode::Relu);
    layers.push(LayerNode::Flatten);
    let oh = h - kernel + 1;
    let ow = w - kernel + 1;
    let flat = channels * oh * ow;
    let fc_std = (2.0 / flat as f64).sqrt();
    layers.push(LayerNode::Linear {
        name: "fc1".to_string(),
        layer: LinearLayer {
            weight: rng::normal_tensor(&mut rng, &[classes, flat], fc_std),
            bias: Tensor::zeros(&[classes]),
        },
    });
    Ok(Model { spec, layers })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"FKLC";
const CHECKPOINT_VERSION: u32 = 1;

/// Write named parameters with tags and shapes; little-endian f64 payloads.
pub fn write_checkpoint<'a>(
    path: impl AsRef<Path>,
    entries: impl Iterator<Item = (&'a str, &'a Tensor, ParamTag)>,
) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let entries: Vec<_> = entries.collect();
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor, tag) in entries {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(match tag {
            ParamTag::Shareable => 0,
            ParamTag::LockPrivate => 1,
        });
        bytes.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Save every registry parameter of a model.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut named: Vec<(String, Tensor, ParamTag)> = Vec::new();
    model.visit_params(|name, t, tag| named.push((name.to_string(), t.clone(), tag)));
    write_checkpoint(path, named.iter().map(|(n, t, g)| (n.as_str(), t, *g)))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor, ParamTag)>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = 0usize;
    let take = |cur: &mut usize, n: usize| -> Result<&[u8]> {
        if *cur + n > bytes.len() {
            return Err(Error::format(path, "truncated checkpoint"));
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Ok(s)
    };
    if take(&mut cur, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cur, name_len)?.to_vec())
            .map_err(|_| Error::format(path, "non-utf8 parameter name"))?;
        let tag = match take(&mut cur, 1)?[0] {
            0 => ParamTag::Shareable,
            1 => ParamTag::LockPrivate,
            t => return Err(Error::format(path, format!("unknown tag byte {t}"))),
        };
        let ndim = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&mut cur, numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor =
            Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        out.push((name, tensor, tag));
    }
    if cur != bytes.len() {
        return Err(Error::format(path, "trailing bytes after checkpoint"));
    }
    Ok(out)
}

/// Install checkpoint entries into a freshly built model. With
/// `require_complete` every registry parameter must be present (full model
/// restore); otherwise a subset — e.g. a shareable-only global checkpoint —
/// is accepted. Every provided entry must match the registry's shape and tag.
pub fn apply_checkpoint(
    model: &mut Model,
    entries: &[(String, Tensor, ParamTag)],
    require_complete: bool,
) -> Result<()> {
    let registry: BTreeMap<String, ParamInfo> = model
        .registry()
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect();
    for (name, tensor, tag) in entries {
        let info = registry.get(name).ok_or_else(|| Error::RegistryMismatch {
            msg: format!("checkpoint parameter {name} not in model registry"),
        })?;
        if info.shape != tensor.shape() || info.tag != *tag {
            return Err(Error::RegistryMismatch {
                msg: format!(
                    "checkpoint parameter {name}: shape/tag {:?}/{:?} vs model {:?}/{:?}",
                    tensor.shape(),
                    tag,
                    info.shape,
                    info.tag
                ),
            });
        }
    }
    if require_complete && entries.len() != registry.len() {
        return Err(Error::RegistryMismatch {
            msg: format!(
                "checkpoint holds {} of {} registry parameters",
                entries.len(),
                registry.len()
            ),
        });
    }
    for (name, tensor, _) in entries {
        *model.param_mut(name)? = tensor.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::one_hot;
    use crate::rng::{normal_tensor, seeded, uniform_tensor};

    fn keylock_mlp() -> Model {
        build_mlp(&[6, 8, 3], NormKind::Keylock, 16, true, 5).unwrap()
    }

    #[test]
    fn mlp_registry_without_norm() {
        let m = build_mlp(&[4, 8, 3], NormKind::None, 0, true, 1).unwrap();
        let names: Vec<String> = m.registry().into_iter().map(|p| p.name).collect();
        assert_eq!(names, ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]);
        assert_eq!(m.param("fc1.weight").unwrap().shape(), &[8, 4]);
        assert_eq!(m.param("fc2.weight").unwrap().shape(), &[3, 8]);
    }

    #[test]
    fn mlp_keylock_adds_four_private_params() {
        let m = keylock_mlp();
        let lock: Vec<ParamInfo> = m
            .registry()
            .into_iter()
            .filter(|p| p.tag == ParamTag::LockPrivate)
            .collect();
        let names: Vec<&str> = lock.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "norm1.lock_w_gamma",
                "norm1.lock_b_gamma",
                "norm1.lock_w_beta",
                "norm1.lock_b_beta"
            ]
        );
        assert_eq!(lock[0].shape, vec![16, 8]);
    }

    #[test]
    fn registry_names_are_unique() {
        let m = build_mlp(&[4, 8, 8, 3], NormKind::Bn, 0, true, 2).unwrap();
        let mut names: Vec<String> = m.registry().into_iter().map(|p| p.name).collect();
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
    }

    #[test]
    fn zero_net_zero_input_gives_uniform_probabilities() {
        let mut m = build_mlp(&[4, 8, 5], NormKind::None, 0, true, 3).unwrap();
        for p in m.registry() {
            *m.param_mut(&p.name).unwrap() = Tensor::zeros(&p.shape);
        }
        let x = Tensor::zeros(&[1, 4]);
        let y = one_hot(&[2], 5).unwrap();
        let out = forward_backward(&m, &x, &y, None).unwrap();
        for j in 0..5 {
            assert!((out.probs.get(j) - 0.2).abs() <= 1e-15);
        }
    }

    #[test]
    fn tinycnn_shapes_and_hand_counted_params() {
        let m = build_tinycnn((1, 8, 8), 4, 3, 4, NormKind::Bn, 0, true, 4).unwrap();
        let x = uniform_tensor(&mut seeded(9), &[1, 1, 8, 8], 0.0, 1.0);
        let logits = m.forward(&x, None).unwrap();
        assert_eq!(logits.shape(), &[1, 4]);
        // hand count: conv 4*1*3*3 + 4, bn 4 + 4, fc 4*(4*6*6) + 4
        let total: usize = m.registry().iter().map(|p| p.shape.iter().product::<usize>()).sum();
        assert_eq!(total, 36 + 4 + 8 + 576 + 4);

        let kl = build_tinycnn((1, 8, 8), 4, 3, 4, NormKind::Keylock, 32, true, 4).unwrap();
        let lock_w = kl.param("norm1.lock_w_gamma").unwrap();
        assert_eq!(lock_w.shape(), &[32, 4]);
    }

    #[test]
    fn tinycnn_rejects_oversized_kernel() {
        assert!(build_tinycnn((1, 8, 8), 4, 9, 4, NormKind::None, 0, true, 4).is_err());
    }

    #[test]
    fn keylock_model_requires_key() {
        let m = keylock_mlp();
        let x = Tensor::zeros(&[2, 6]);
        let y = one_hot(&[0, 1], 3).unwrap();
        assert!(matches!(
            forward_backward(&m, &x, &y, None),
            Err(Error::KeyRequired)
        ));
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let m = keylock_mlp();
        let key = Key::generate(7, 16).unwrap();
        let x = normal_tensor(&mut seeded(11), &[3, 6], 1.0);
        let y = one_hot(&[0, 1, 2], 3).unwrap();
        let a = forward_backward(&m, &x, &y, Some(&key)).unwrap();
        let b = forward_backward(&m, &x, &y, Some(&key)).unwrap();
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn saturated_logits_give_near_zero_bundle() {
        let mut m = build_mlp(&[2, 2], NormKind::None, 0, true, 6).unwrap();
        *m.param_mut("fc1.weight").unwrap() =
            Tensor::new(vec![2, 2], vec![80.0, 0.0, -80.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let y = one_hot(&[0], 2).unwrap();
        let out = forward_backward(&m, &x, &y, None).unwrap();
        for (_, entry) in out.grads.iter() {
            assert!(entry.grad.max_abs() <= 1e-20);
        }
    }

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        // one representative per norm kind; the acceptance suite runs the
        // full 20-instance sweep
        let cases: Vec<(Model, Option<Key>)> = vec![
            (build_mlp(&[5, 6, 3], NormKind::None, 0, true, 21).unwrap(), None),
            (build_mlp(&[5, 6, 3], NormKind::Bn, 0, true, 22).unwrap(), None),
            (
                build_mlp(&[5, 6, 3], NormKind::Keylock, 8, true, 23).unwrap(),
                Some(Key::generate(97, 8).unwrap()),
            ),
        ];
        for (m, key) in &cases {
            let y = one_hot(&[0, 1, 2, 0], 3).unwrap();
            // skip draws whose ReLU margin is inside the FD step
            let x = (0..100u64)
                .map(|s| normal_tensor(&mut seeded(31 + s), &[4, 5], 1.0))
                .find(|x| {
                    let out = forward_backward(m, x, &y, key.as_ref()).unwrap();
                    crate::model::min_relu_margin(&out) > 1e-3
                })
                .expect("a well-margined instance exists");
            let err = crate::gradcheck::model_grad_max_err(m, &x, &y, key.as_ref(), 1e-4)
                .unwrap();
            assert!(err <= 1e-4, "worst relative error {err}");
        }
    }

    #[test]
    fn keylock_forward_equals_precomputed_bn() {
        let kl = build_tinycnn((1, 6, 6), 3, 3, 4, NormKind::Keylock, 16, true, 41).unwrap();
        let key = Key::generate(43, 16).unwrap();
        let module = match &kl.layers[1] {
            LayerNode::Lock { module, .. } => module.clone(),
            _ => unreachable!(),
        };
        let (gamma, beta) = module.coeffs(&key).unwrap();

        let mut bn = build_tinycnn((1, 6, 6), 3, 3, 4, NormKind::Bn, 0, true, 99).unwrap();
        for name in ["conv1.weight", "conv1.bias", "fc1.weight", "fc1.bias"] {
            *bn.param_mut(name).unwrap() = kl.param(name).unwrap().clone();
        }
        *bn.param_mut("norm1.gamma").unwrap() = gamma;
        *bn.param_mut("norm1.beta").unwrap() = beta;

        let x = uniform_tensor(&mut seeded(47), &[2, 1, 6, 6], 0.0, 1.0);
        let a = kl.forward(&x, Some(&key)).unwrap();
        let b = bn.forward(&x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partition_splits_and_merge_restores() {
        let m = keylock_mlp();
        let key = Key::generate(13, 16).unwrap();
        let x = normal_tensor(&mut seeded(17), &[2, 6], 1.0);
        let y = one_hot(&[0, 2], 3).unwrap();
        let bundle = forward_backward(&m, &x, &y, Some(&key)).unwrap().grads;
        let (share, private) = bundle.partition();
        assert_eq!(private.len(), 4);
        assert!(share.names().all(|n| !n.contains("lock")));
        assert_eq!(GradientBundle::merge(&share, &private).unwrap(), bundle);

        let plain = build_mlp(&[6, 8, 3], NormKind::None, 0, true, 5).unwrap();
        let b2 = forward_backward(&plain, &x, &y, None).unwrap().grads;
        let (_, private2) = b2.partition();
        assert!(private2.is_empty());
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut m = keylock_mlp();
        let before: Vec<Tensor> = m.registry().iter().map(|p| m.param(&p.name).unwrap().clone()).collect();
        let key = Key::generate(19, 16).unwrap();
        let x = normal_tensor(&mut seeded(23), &[2, 6], 1.0);
        let y = one_hot(&[1, 2], 3).unwrap();
        let bundle = forward_backward(&m, &x, &y, Some(&key)).unwrap().grads;
        sgd_step(&mut m, &bundle, 0.0).unwrap();
        for (p, b) in m.registry().iter().zip(before) {
            assert_eq!(*m.param(&p.name).unwrap(), b);
        }
    }

    #[test]
    fn sgd_scalar_hand_case() {
        let mut m = build_mlp(&[1, 1], NormKind::None, 0, true, 8).unwrap();
        *m.param_mut("fc1.weight").unwrap() = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let mut bundle = GradientBundle::new();
        bundle.insert(
            "fc1.weight",
            Tensor::new(vec![1, 1], vec![0.5]).unwrap(),
            ParamTag::Shareable,
        );
        sgd_step(&mut m, &bundle, 0.1).unwrap();
        assert!((m.param("fc1.weight").unwrap().get(0) - 1.95).abs() <= 1e-15);
    }

    #[test]
    fn training_loss_decreases_on_separable_toy_set() {
        let mut m = build_mlp(&[2, 8, 2], NormKind::None, 0, true, 10).unwrap();
        // two well-separated clusters
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        let mut rng = seeded(20);
        for i in 0..16 {
            let c = i % 2;
            let center = if c == 0 { -1.0 } else { 1.0 };
            let noise = crate::rng::normal_vec(&mut rng, 2, 0.1);
            xs.extend_from_slice(&[center + noise[0], center + noise[1]]);
            labels.push(c);
        }
        let x = Tensor::new(vec![16, 2], xs).unwrap();
        let y = one_hot(&labels, 2).unwrap();
        let first = forward_backward(&m, &x, &y, None).unwrap().loss;
        let mut last = first;
        for _ in 0..50 {
            let out = forward_backward(&m, &x, &y, None).unwrap();
            sgd_step(&mut m, &out.grads, 0.1).unwrap();
            last = out.loss;
        }
        assert!(last < first * 0.2, "loss {first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fklc");
        let m = keylock_mlp();
        save_model(&m, &path).unwrap();
        let entries = read_checkpoint(&path).unwrap();
        let mut m2 = build_mlp(&[6, 8, 3], NormKind::Keylock, 16, true, 999).unwrap();
        apply_checkpoint(&mut m2, &entries, true).unwrap();
        for p in m.registry() {
            assert_eq!(m.param(&p.name).unwrap(), m2.param(&p.name).unwrap());
        }
        // architecture mismatch is rejected
        let mut other = build_mlp(&[6, 4, 3], NormKind::Keylock, 16, true, 1).unwrap();
        assert!(matches!(
            apply_checkpoint(&mut other, &entries, true),
            Err(Error::RegistryMismatch { .. })
        ));
    }

    #[test]
    fn bundle_json_round_trips() {
        let m = keylock_mlp();
        let key = Key::generate(29, 16).unwrap();
        let x = normal_tensor(&mut seeded(31), &[1, 6], 1.0);
        let y = one_hot(&[1], 3).unwrap();
        let bundle = forward_backward(&m, &x, &y, Some(&key)).unwrap().grads;
        let json = serde_json::to_string(&bundle).unwrap();
        let back: GradientBundle = serde_json::from_str(&json).unwrap();
        assert_eq!(bundle, back);
    }
}
