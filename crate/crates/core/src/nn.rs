//! Small sequential CNN with hand-written forward and backward passes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bn::{self, BnCache, BnLayerState, BnMode, BnTrace, ChannelStats};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One layer of a sequential network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Batchnorm2d {
        name: String,
        channels: usize,
    },
    Relu,
    GlobalAvgPool,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Flow {
    Any,
    Spatial(usize),
    Flat(usize),
}

impl Architecture {
    /// Three conv5x5/2 BN ReLU blocks (16, 32, 64 channels), GAP, linear(64->classes).
    pub fn small_convnet(classes: usize) -> Self {
        Self::conv_stack(3, &[(16, 5, 2), (32, 5, 2), (64, 5, 2)], classes)
    }

    /// Conv/BN/ReLU blocks given as `(channels, kernel, stride)` with "same"
    /// padding, then GAP and a linear head.
    pub fn conv_stack(in_channels: usize, blocks: &[(usize, usize, usize)], classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut c = in_channels;
        for (i, &(out, kernel, stride)) in blocks.iter().enumerate() {
            layers.push(LayerSpec::Conv2d {
                name: format!("conv{}", i + 1),
                in_channels: c,
                out_channels: out,
                kernel,
                stride,
                padding: kernel / 2,
            });
            layers.push(LayerSpec::Batchnorm2d {
                name: format!("bn{}", i + 1),
                channels: out,
            });
            layers.push(LayerSpec::Relu);
            c = out;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Linear {
            name: "fc".into(),
            in_features: c,
            out_features: classes,
        });
        Architecture { layers }
    }

    pub fn validate(&self) -> Result<()> {
        let mut flow = Flow::Any;
        let mut names = BTreeSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |what: String| Err(Error::Shape(format!("layer {i}: {what}")));
            match layer {
                LayerSpec::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if !names.insert(name.clone()) {
                        return bad(format!("duplicate name {name}"));
                    }
                    if *kernel == 0 || *stride == 0 || *out_channels == 0 {
                        return bad("conv kernel, stride and channels must be positive".into());
                    }
                    match flow {
                        Flow::Any => {}
                        Flow::Spatial(c) if c == *in_channels => {}
                        other => return bad(format!("conv expects {in_channels} channels, incoming {other:?}")),
                    }
                    flow = Flow::Spatial(*out_channels);
                }
                LayerSpec::Batchnorm2d { name, channels } => {
                    if !names.insert(name.clone()) {
                        return bad(format!("duplicate name {name}"));
                    }
                    match flow {
                        Flow::Any => {}
                        Flow::Spatial(c) if c == *channels => {}
                        other => return bad(format!("batchnorm expects {channels} channels, incoming {other:?}")),
                    }
                    flow = Flow::Spatial(*channels);
                }
                LayerSpec::Relu => {}
                LayerSpec::GlobalAvgPool => match flow {
                    Flow::Spatial(c) => flow = Flow::Flat(c),
                    other => return bad(format!("global pooling needs a spatial input, got {other:?}")),
                },
                LayerSpec::Linear {
                    name,
                    in_features,
                    out_features,
                } => {
                    if !names.insert(name.clone()) {
                        return bad(format!("duplicate name {name}"));
                    }
                    match flow {
                        Flow::Any => {}
                        Flow::Flat(f) if f == *in_features => {}
                        other => return bad(format!("linear expects {in_features} features, incoming {other:?}")),
                    }
                    flow = Flow::Flat(*out_features);
                }
            }
        }
        match flow {
            Flow::Flat(_) => Ok(()),
            _ => Err(Error::Shape("network must end in a flat (N, classes) output".into())),
        }
    }

    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("architecture serializes")
    }

    pub fn from_descriptor(s: &str) -> Result<Self> {
        let arch: Architecture =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("bad architecture descriptor: {e}")))?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn bn_names(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Batchnorm2d { name, .. } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Linear { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    fn input_channels(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            LayerSpec::Conv2d { in_channels, .. } => Some(*in_channels),
            LayerSpec::Batchnorm2d { channels, .. } => Some(*channels),
            LayerSpec::Linear { in_features, .. } => Some(*in_features),
            _ => None,
        })
    }
}

/// How a forward pass treats batch normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ForwardMode {
    /// Batch statistics, with running statistics updated by momentum.
    Train,
    /// No running-statistic update; normalization per the given mode.
    Eval(BnMode),
}

pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

/// Exact copy of every parameter and buffer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot<T> {
    arch: String,
    params: BTreeMap<String, Tensor<T>>,
    folded: bool,
}

enum LayerCache<T> {
    Conv { input_shape: Vec<usize>, cols: Vec<T>, out_hw: (usize, usize) },
    Bn(Box<BnCache<T>>),
    Relu { mask: Vec<bool> },
    Pool { input_shape: Vec<usize> },
    Linear { input: Tensor<T> },
}

pub struct Model<T: Real> {
    arch: Architecture,
    params: BTreeMap<String, Tensor<T>>,
    seed: u64,
    eps: T,
    bn_momentum: T,
    /// Source statistics have been folded into the BN affine parameters.
    folded: bool,
    cache: Option<Vec<LayerCache<T>>>,
    trace: Vec<BnTrace<T>>,
}

impl<T: Real> Clone for Model<T> {
    /// Clones parameters only; forward caches are not carried over.
    fn clone(&self) -> Self {
        Model {
            arch: self.arch.clone(),
            params: self.params.clone(),
            seed: self.seed,
            eps: self.eps,
            bn_momentum: self.bn_momentum,
            folded: self.folded,
            cache: None,
            trace: Vec::new(),
        }
    }
}

impl<T: Real> std::fmt::Debug for Model<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("layers", &self.arch.layers.len())
            .field("params", &self.params.keys().collect::<Vec<_>>())
            .field("seed", &self.seed)
            .finish()
    }
}

fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

impl<T: Real> Model<T> {
    /// Kaiming-uniform conv/linear weights, zero linear bias, gamma 1, beta 0,
    /// running mean 0 and running variance 1.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for layer in &arch.layers {
            match layer {
                LayerSpec::Conv2d {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = in_channels * kernel * kernel;
                    let shape = [*out_channels, *in_channels, *kernel, *kernel];
                    params.insert(format!("{name}.weight"), kaiming(&shape, fan_in, &mut rng));
                }
                LayerSpec::Batchnorm2d { name, channels } => {
                    params.insert(format!("{name}.gamma"), Tensor::full(&[*channels], T::one()));
                    params.insert(format!("{name}.beta"), Tensor::zeros(&[*channels]));
                    params.insert(format!("{name}.running_mean"), Tensor::zeros(&[*channels]));
                    params.insert(format!("{name}.running_var"), Tensor::full(&[*channels], T::one()));
                }
                LayerSpec::Linear {
                    name,
                    in_features,
                    out_features,
                } => {
                    params.insert(
                        format!("{name}.weight"),
                        kaiming(&[*out_features, *in_features], *in_features, &mut rng),
                    );
                    params.insert(format!("{name}.bias"), Tensor::zeros(&[*out_features]));
                }
                LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
            }
        }
        Ok(Model {
            arch,
            params,
            seed,
            eps: T::lit(T::BN_EPS),
            bn_momentum: T::lit(0.1),
            folded: false,
            cache: None,
            trace: Vec::new(),
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn set_eps(&mut self, eps: T) {
        self.eps = eps;
    }

    /// True once the affine parameters absorbed the source statistics; the
    /// BN layers must then normalize with test statistics only.
    pub fn is_folded(&self) -> bool {
        self.folded
    }

    pub fn set_folded(&mut self, folded: bool) {
        self.folded = folded;
    }

    pub fn set_bn_momentum(&mut self, momentum: T) {
        self.bn_momentum = momentum;
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    /// Names of all trainable parameters (running statistics excluded).
    pub fn trainable_names(&self) -> BTreeSet<String> {
        self.params.keys().filter(|k| !is_buffer(k)).cloned().collect()
    }

    /// Names of the BN scale/shift parameters.
    pub fn bn_affine_names(&self) -> BTreeSet<String> {
        self.arch
            .bn_names()
            .into_iter()
            .flat_map(|n| [format!("{n}.gamma"), format!("{n}.beta")])
            .collect()
    }

    /// Assembles the pure BN state for layer `name` under `mode`.
    pub fn bn_state(&self, name: &str, mode: BnMode) -> Result<BnLayerState<T>> {
        BnLayerState::new(
            self.param(&format!("{name}.gamma"))?.data().to_vec(),
            self.param(&format!("{name}.beta"))?.data().to_vec(),
            ChannelStats {
                mean: self.param(&format!("{name}.running_mean"))?.data().to_vec(),
                var: self.param(&format!("{name}.running_var"))?.data().to_vec(),
            },
            self.eps,
            mode,
        )
    }

    /// Statistics used by each BN layer during the most recent forward pass.
    pub fn bn_trace(&self) -> &[BnTrace<T>] {
        &self.trace
    }

    /// Runs the network and caches what backward needs.
    pub fn forward(&mut self, x: &Tensor<T>, mode: ForwardMode) -> Result<Tensor<T>> {
        if let ForwardMode::Eval(m) = mode {
            m.validate()?;
        }
        let expected = self.arch.input_channels().unwrap_or(0);
        let got = match x.rank() {
            4 => x.dims4()?.1,
            2 => x.dims2()?.1,
            r => return Err(Error::Shape(format!("input must be rank 2 or 4, got rank {r}"))),
        };
        if got != expected {
            return Err(Error::Shape(format!("input has {got} channels/features, network expects {expected}")));
        }
        self.cache = None;
        self.trace.clear();
        let mut caches = Vec::with_capacity(self.arch.layers.len());
        let mut cur = x.clone();
        let mut bn_index = 0;
        for layer in &self.arch.layers {
            cur = match layer {
                LayerSpec::Conv2d {
                    name,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let w = &self.params[&format!("{name}.weight")];
                    let (y, cols, out_hw) = conv_forward(&cur, w, *out_channels, *kernel, *stride, *padding)?;
                    caches.push(LayerCache::Conv {
                        input_shape: cur.shape().to_vec(),
                        cols,
                        out_hw,
                    });
                    y
                }
                LayerSpec::Batchnorm2d { name, .. } => {
                    let bn_mode = match mode {
                        ForwardMode::Train => BnMode::AdaBn,
                        ForwardMode::Eval(m) => m,
                    };
                    let state = self.bn_state(name, bn_mode)?;
                    let (y, cache, trace) = bn::bn_forward(&cur, &state, bn_index)?;
                    if mode == ForwardMode::Train {
                        let mom = self.bn_momentum;
                        let keep = T::one() - mom;
                        let rm = self.params.get_mut(&format!("{name}.running_mean")).expect("bn buffer");
                        for (r, t) in rm.data_mut().iter_mut().zip(&trace.test.mean) {
                            *r = keep * *r + mom * *t;
                        }
                        let rv = self.params.get_mut(&format!("{name}.running_var")).expect("bn buffer");
                        for (r, t) in rv.data_mut().iter_mut().zip(&trace.test.var) {
                            *r = keep * *r + mom * *t;
                        }
                    }
                    caches.push(LayerCache::Bn(Box::new(cache)));
                    self.trace.push(trace);
                    bn_index += 1;
                    y
                }
                LayerSpec::Relu => {
                    let mask: Vec<bool> = cur.data().iter().map(|v| *v > T::zero()).collect();
                    let mut y = cur;
                    for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                        if !m {
                            *v = T::zero();
                        }
                    }
                    caches.push(LayerCache::Relu { mask });
                    y
                }
                LayerSpec::GlobalAvgPool => {
                    let (n, c, h, w) = cur.dims4()?;
                    let hw = h * w;
                    let inv = T::one() / T::lit(hw as f64);
                    let data: Vec<T> = cur
                        .data()
                        .chunks_exact(hw)
                        .map(|p| p.iter().copied().sum::<T>() * inv)
                        .collect();
                    caches.push(LayerCache::Pool {
                        input_shape: cur.shape().to_vec(),
                    });
                    Tensor::from_vec(&[n, c], data)?
                }
                LayerSpec::Linear { name, out_features, .. } => {
                    let w = &self.params[&format!("{name}.weight")];
                    let b = &self.params[&format!("{name}.bias")];
                    let y = linear_forward(&cur, w, b, *out_features)?;
                    caches.push(LayerCache::Linear { input: cur });
                    y
                }
            };
        }
        self.cache = Some(caches);
        Ok(cur)
    }

    /// Back-propagates `grad_logits` and returns gradients for `trainable` only.
    pub fn backward(&mut self, grad_logits: &Tensor<T>, trainable: &BTreeSet<String>) -> Result<Gradients<T>> {
        for name in trainable {
            if !self.params.contains_key(name) || is_buffer(name) {
                return Err(Error::Config(format!("{name} is not a trainable parameter")));
            }
        }
        let caches = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        // Layers before the first one owning a trainable parameter need no gradient.
        let first_needed = self
            .arch
            .layers
            .iter()
            .position(|l| layer_params(l).iter().any(|p| trainable.contains(p)));
        let mut grads = Gradients::new();
        let Some(first_needed) = first_needed else {
            return Ok(grads);
        };
        let mut g = grad_logits.clone();
        for idx in (first_needed..self.arch.layers.len()).rev() {
            let layer = &self.arch.layers[idx];
            let need_input = idx > first_needed;
            g = match (layer, &caches[idx]) {
                (
                    LayerSpec::Conv2d {
                        name,
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    LayerCache::Conv {
                        input_shape,
                        cols,
                        out_hw,
                    },
                ) => {
                    let wname = format!("{name}.weight");
                    let geom = ConvGeom {
                        input_shape,
                        in_channels: *in_channels,
                        out_channels: *out_channels,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                        out_hw: *out_hw,
                    };
                    let (dw, dx) = conv_backward(
                        &g,
                        &self.params[&wname],
                        cols,
                        &geom,
                        trainable.contains(&wname),
                        need_input,
                    )?;
                    if let Some(dw) = dw {
                        grads.insert(wname, dw);
                    }
                    dx.unwrap_or(g)
                }
                (LayerSpec::Batchnorm2d { name, .. }, LayerCache::Bn(cache)) => {
                    let bg = bn::bn_backward(cache, &g)?;
                    let c = bg.gamma.len();
                    for (suffix, v) in [("gamma", bg.gamma), ("beta", bg.beta)] {
                        let pname = format!("{name}.{suffix}");
                        if trainable.contains(&pname) {
                            grads.insert(pname, Tensor::from_vec(&[c], v)?);
                        }
                    }
                    bg.input
                }
                (LayerSpec::Relu, LayerCache::Relu { mask }) => {
                    for (v, m) in g.data_mut().iter_mut().zip(mask) {
                        if !m {
                            *v = T::zero();
                        }
                    }
                    g
                }
                (LayerSpec::GlobalAvgPool, LayerCache::Pool { input_shape }) => {
                    let hw = input_shape[2] * input_shape[3];
                    let inv = T::one() / T::lit(hw as f64);
                    let mut dx = Tensor::zeros(input_shape);
                    for (plane, gv) in dx.data_mut().chunks_exact_mut(hw).zip(g.data()) {
                        plane.fill(*gv * inv);
                    }
                    dx
                }
                (LayerSpec::Linear { name, .. }, LayerCache::Linear { input }) => {
                    let wname = format!("{name}.weight");
                    let bname = format!("{name}.bias");
                    let (dw, db, dx) = linear_backward(&g, input, &self.params[&wname], need_input)?;
                    if trainable.contains(&wname) {
                        grads.insert(wname, dw);
                    }
                    if trainable.contains(&bname) {
                        grads.insert(bname, db);
                    }
                    dx.unwrap_or(g)
                }
                _ => return Err(Error::State(format!("cache for layer {idx} does not match its spec"))),
            };
        }
        Ok(grads)
    }

    /// Plain SGD: `param -= lr * grad` for every named gradient.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: T) -> Result<()> {
        for (name, g) in grads {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {name}: {:?} vs parameter {:?}", g.shape(), p.shape())));
            }
        }
        for (name, g) in grads {
            let p = self.params.get_mut(name).expect("checked above");
            for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * *d;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ParamSnapshot<T> {
        ParamSnapshot {
            arch: self.arch.descriptor(),
            params: self.params.clone(),
            folded: self.folded,
        }
    }

    pub fn restore(&mut self, snap: &ParamSnapshot<T>) -> Result<()> {
        if snap.arch != self.arch.descriptor() {
            return Err(Error::Incompatible("snapshot was taken from a different architecture".into()));
        }
        self.params.clone_from(&snap.params);
        self.folded = snap.folded;
        Ok(())
    }

    /// Little-endian bytes of every parameter and buffer in name order.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for t in self.params.values() {
            T::write_le(t.data(), &mut out);
        }
        out
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "model")?;
        c.set_meta("arch", self.arch.descriptor())?;
        c.set_meta("seed", self.seed.to_string())?;
        c.set_meta("bn_eps", format!("{:e}", self.eps.as_f64()))?;
        if self.folded {
            c.set_meta("folded", "true")?;
        }
        for (name, t) in &self.params {
            c.push_tensor(name, t)?;
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let arch = Architecture::from_descriptor(c.require_meta("arch")?)?;
        let seed = c
            .require_meta("seed")?
            .parse()
            .map_err(|_| Error::Format("bad seed in checkpoint".into()))?;
        let mut model = Model::new(arch, seed)?;
        if let Some(eps) = c.meta("bn_eps") {
            let eps: f64 = eps.parse().map_err(|_| Error::Format("bad bn_eps in checkpoint".into()))?;
            model.eps = T::lit(eps);
        }
        model.folded = c.meta("folded") == Some("true");
        let names: Vec<String> = model.params.keys().cloned().collect();
        for name in names {
            let t: Tensor<T> = c.tensor(&name)?;
            let p = model.params.get_mut(&name).expect("own key");
            if p.shape() != t.shape() {
                return Err(Error::Incompatible(format!("checkpoint tensor {name} has shape {:?}", t.shape())));
            }
            *p = t;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

fn layer_params(layer: &LayerSpec) -> Vec<String> {
    match layer {
        LayerSpec::Conv2d { name, .. } => vec![format!("{name}.weight")],
        LayerSpec::Batchnorm2d { name, .. } => vec![format!("{name}.gamma"), format!("{name}.beta")],
        LayerSpec::Linear { name, .. } => vec![format!("{name}.weight"), format!("{name}.bias")],
        LayerSpec::Relu | LayerSpec::GlobalAvgPool => Vec::new(),
    }
}

fn kaiming<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

struct ConvGeom<'a> {
    input_shape: &'a [usize],
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_hw: (usize, usize),
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!("input size {size} too small for kernel {kernel}")));
    }
    Ok((padded - kernel) / stride + 1)
}

fn im2col<T: Real>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[((ch * k + ki) * k + kj) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
    img: &mut [T],
) {
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[((ch * k + ki) * k + kj) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

type ConvOut<T> = (Tensor<T>, Vec<T>, (usize, usize));

fn conv_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvOut<T>> {
    let (n, c, h, w) = x.dims4()?;
    let oh = conv_out(h, k, stride, pad)?;
    let ow = conv_out(w, k, stride, pad)?;
    let ohw = oh * ow;
    let ckk = c * k * k;
    let mut cols = vec![T::zero(); n * ckk * ohw];
    let mut y = Tensor::zeros(&[n, out_c, oh, ow]);
    let wd = weight.data();
    for s in 0..n {
        let col = &mut cols[s * ckk * ohw..(s + 1) * ckk * ohw];
        im2col(x.sample(s), c, h, w, k, stride, pad, (oh, ow), col);
        let out = &mut y.data_mut()[s * out_c * ohw..(s + 1) * out_c * ohw];
        T::gemm(
            out_c, ckk, ohw, T::one(), wd, ckk as isize, 1, col, ohw as isize, 1, T::zero(), out, ohw as isize, 1,
        );
    }
    Ok((y, cols, (oh, ow)))
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

fn conv_backward<T: Real>(
    g: &Tensor<T>,
    weight: &Tensor<T>,
    cols: &[T],
    geom: &ConvGeom<'_>,
    need_weight: bool,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (n, c, h, w) = (geom.input_shape[0], geom.input_shape[1], geom.input_shape[2], geom.input_shape[3]);
    debug_assert_eq!(c, geom.in_channels);
    let k = geom.kernel;
    let (oh, ow) = geom.out_hw;
    let ohw = oh * ow;
    let ckk = c * k * k;
    let oc = geom.out_channels;
    if g.shape() != [n, oc, oh, ow] {
        return Err(Error::Shape(format!("conv backward: gradient shape {:?}", g.shape())));
    }
    let mut dw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let mut dx = need_input.then(|| Tensor::zeros(geom.input_shape));
    let mut dcols = if need_input { vec![T::zero(); ckk * ohw] } else { Vec::new() };
    for s in 0..n {
        let gs = g.sample(s);
        let col = &cols[s * ckk * ohw..(s + 1) * ckk * ohw];
        if let Some(dw) = dw.as_mut() {
            // dW += dOut_s (oc x ohw) * cols_s^T (ohw x ckk)
            T::gemm(
                oc, ohw, ckk, T::one(), gs, ohw as isize, 1, col, 1, ohw as isize, T::one(), dw.data_mut(), ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T (ckk x oc) * dOut_s (oc x ohw)
            T::gemm(
                ckk, oc, ohw, T::one(), weight.data(), 1, ckk as isize, gs, ohw as isize, 1, T::zero(), &mut dcols,
                ohw as isize, 1,
            );
            let per = c * h * w;
            col2im(
                &dcols,
                c,
                h,
                w,
                k,
                geom.stride,
                geom.padding,
                (oh, ow),
                &mut dx.data_mut()[s * per..(s + 1) * per],
            );
        }
    }
    Ok((dw, dx))
}

fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, out_f: usize) -> Result<Tensor<T>> {
    let (n, in_f) = x.dims2()?;
    let mut y = Tensor::zeros(&[n, out_f]);
    // y = x * W^T
    T::gemm(
        n, in_f, out_f, T::one(), x.data(), in_f as isize, 1, w.data(), 1, in_f as isize, T::zero(), y.data_mut(),
        out_f as isize, 1,
    );
    for row in y.data_mut().chunks_exact_mut(out_f) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += *bias;
        }
    }
    Ok(y)
}

type LinearGrads<T> = (Tensor<T>, Tensor<T>, Option<Tensor<T>>);

fn linear_backward<T: Real>(g: &Tensor<T>, x: &Tensor<T>, w: &Tensor<T>, need_input: bool) -> Result<LinearGrads<T>> {
    let (n, in_f) = x.dims2()?;
    let (gn, out_f) = g.dims2()?;
    if gn != n || w.shape() != [out_f, in_f] {
        return Err(Error::Shape(format!("linear backward: gradient {:?}, input {:?}", g.shape(), x.shape())));
    }
    let mut dw = Tensor::zeros(&[out_f, in_f]);
    // dW = dY^T * X
    T::gemm(
        out_f, n, in_f, T::one(), g.data(), 1, out_f as isize, x.data(), in_f as isize, 1, T::zero(), dw.data_mut(),
        in_f as isize, 1,
    );
    let mut db = Tensor::zeros(&[out_f]);
    for row in g.data().chunks_exact(out_f) {
        for (d, v) in db.data_mut().iter_mut().zip(row) {
            *d += *v;
        }
    }
    let dx = if need_input {
        let mut dx = Tensor::zeros(&[n, in_f]);
        T::gemm(
            n, out_f, in_f, T::one(), g.data(), out_f as isize, 1, w.data(), in_f as isize, 1, T::zero(),
            dx.data_mut(), in_f as isize, 1,
        );
        Some(dx)
    } else {
        None
    };
    Ok((dw, db, dx))
}
