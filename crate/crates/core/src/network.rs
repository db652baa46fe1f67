//! Small video classifiers assembled from factorized (`conv3t`) or dense
//! (`conv3d`) convolutions, ReLU, global average pooling and a dense head,
//! trained with SGD and momentum on softmax cross-entropy.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv3d_var, ConvGeometry};
use crate::error::{Error, Result};
use crate::filter::{self, materialize_var, FilterBank};
use crate::gradcheck::{gradcheck, GradCheckConfig, GradCheckReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn unit_stride() -> [usize; 3] {
    [1; 3]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv3t {
        name: String,
        filters: usize,
        kernel: [usize; 2],
        depth: usize,
        #[serde(default = "unit_stride")]
        stride: [usize; 3],
        #[serde(default)]
        padding: [usize; 3],
    },
    Conv3d {
        name: String,
        filters: usize,
        kernel: [usize; 3],
        #[serde(default = "unit_stride")]
        stride: [usize; 3],
        #[serde(default)]
        padding: [usize; 3],
    },
    Relu,
    GlobalAvgPool,
    Dense {
        name: String,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Conv3t { name, .. }
            | LayerSpec::Conv3d { name, .. }
            | LayerSpec::Dense { name, .. } => name,
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
        }
    }

    fn geometry(&self, c_in: usize) -> Option<ConvGeometry> {
        match *self {
            LayerSpec::Conv3t {
                filters,
                kernel,
                depth,
                stride,
                padding,
                ..
            } => Some(
                ConvGeometry::new(c_in, filters, [depth, kernel[0], kernel[1]])
                    .with_stride(stride)
                    .with_padding(padding),
            ),
            LayerSpec::Conv3d {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => Some(
                ConvGeometry::new(c_in, filters, kernel)
                    .with_stride(stride)
                    .with_padding(padding),
            ),
            _ => None,
        }
    }
}

/// Whether convolution layers are factorized or dense.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvMode {
    #[serde(rename = "3t")]
    Factorized,
    #[serde(rename = "3d")]
    Dense,
}

impl std::str::FromStr for ConvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "3t" => Ok(ConvMode::Factorized),
            "3d" => Ok(ConvMode::Dense),
            other => Err(Error::contract(format!(
                "unknown mode {other:?}, expected 3t or 3d"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Clip shape `[C, T, W, H]`.
    pub input: [usize; 4],
    pub layers: Vec<LayerSpec>,
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    /// conv(8, 5x5, D=4, spatial stride 2) -> relu -> conv(16, 3x3, D=3)
    /// -> relu -> global average pool -> dense, on `[1, 8, 28, 28]` clips.
    pub fn tinyt(mode: ConvMode, classes: usize, seed: u64) -> Self {
        Self::tinyt_for([1, 8, 28, 28], mode, classes, seed)
    }

    pub fn tinyt_for(input: [usize; 4], mode: ConvMode, classes: usize, seed: u64) -> Self {
        let conv = |name: &str, filters, k, depth, stride, pad| match mode {
            ConvMode::Factorized => LayerSpec::Conv3t {
                name: name.into(),
                filters,
                kernel: [k, k],
                depth,
                stride: [1, stride, stride],
                padding: [0, pad, pad],
            },
            ConvMode::Dense => LayerSpec::Conv3d {
                name: name.into(),
                filters,
                kernel: [depth, k, k],
                stride: [1, stride, stride],
                padding: [0, pad, pad],
            },
        };
        Self {
            input,
            layers: vec![
                conv("conv1", 8, 5, 4, 2, 2),
                LayerSpec::Relu,
                conv("conv2", 16, 3, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense {
                    name: "head".into(),
                    outputs: classes,
                },
            ],
            classes,
            seed,
        }
    }

    /// Per-sample output shape of every layer; fails on incompatible
    /// neighbours, duplicate names, or a head that is not the single final
    /// dense layer with `classes` outputs.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.contains(&0) || self.classes == 0 {
            return Err(Error::contract("input extents and class count must be positive"));
        }
        let mut shape = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        let mut names = std::collections::HashSet::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |m: String| Error::contract(format!("layer {i} ({}): {m}", layer.name()));
            if !matches!(layer, LayerSpec::Relu | LayerSpec::GlobalAvgPool)
                && !names.insert(layer.name().to_string())
            {
                return Err(err("duplicate layer name".into()));
            }
            shape = match layer {
                LayerSpec::Conv3t { .. } | LayerSpec::Conv3d { .. } => {
                    if shape.len() != 4 {
                        return Err(err(format!("needs a [C, T, W, H] input, got {shape:?}")));
                    }
                    let g = layer.geometry(shape[0]).expect("conv layer");
                    if g.kernel.contains(&0) {
                        return Err(err("kernel extents must be positive".into()));
                    }
                    let [t, w, h] = g
                        .output_extents([shape[1], shape[2], shape[3]])
                        .map_err(|e| err(e.to_string()))?;
                    vec![g.c_out, t, w, h]
                }
                LayerSpec::Relu => shape,
                LayerSpec::GlobalAvgPool => {
                    if shape.len() < 2 {
                        return Err(err("nothing to pool".into()));
                    }
                    vec![shape[0]]
                }
                LayerSpec::Dense { outputs, .. } => {
                    if *outputs == 0 {
                        return Err(err("dense layer needs outputs".into()));
                    }
                    vec![*outputs]
                }
            };
            out.push(shape.clone());
        }
        let heads = self
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Dense { .. }))
            .count();
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) if heads == 1 && *outputs == self.classes => Ok(out),
            _ => Err(Error::contract(format!(
                "model needs exactly one head: a final dense layer with {} outputs",
                self.classes
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    /// Base slices of a factorized bank.
    Base,
    /// Per-step `(s, r, t_x, t_y)` rows of a factorized bank.
    Theta,
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub role: ParamRole,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Param>,
    pub geometry: Option<ConvGeometry>,
}

impl Layer {
    pub fn param(&self, role: ParamRole) -> Option<&Tensor> {
        self.params.iter().find(|p| p.role == role).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, role: ParamRole) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.role == role)
            .map(|p| &mut p.value)
    }

    /// The factorized bank of a `conv3t` layer.
    pub fn bank(&self) -> Option<FilterBank> {
        let LayerSpec::Conv3t { depth, .. } = self.spec else {
            return None;
        };
        Some(FilterBank {
            base: self.param(ParamRole::Base)?.clone(),
            thetas: self.param(ParamRole::Theta).cloned(),
            depth,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

/// Tape handles produced by [`Model::trace`].
pub struct Trace {
    /// Output of every layer, in order.
    pub outputs: Vec<Var>,
    /// Parameter handles, mirroring `Model::layers[i].params`.
    pub params: Vec<Vec<Var>>,
}

impl Model {
    /// Fresh model: factorized bases and dense weights uniform in
    /// `±sqrt(1 / fan_in)`, identity transforms, zero biases.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut c_in = spec.input[0];
        let mut fan_in: usize = spec.input.iter().product();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (layer, shape) in spec.layers.iter().zip(&shapes) {
            let geometry = layer.geometry(c_in);
            let params = match layer {
                LayerSpec::Conv3t {
                    filters,
                    kernel,
                    depth,
                    ..
                } => {
                    let bank = FilterBank::random(*filters, c_in, kernel[0], kernel[1], *depth, &mut rng)?;
                    bank_params(bank, *filters)
                }
                LayerSpec::Conv3d { filters, .. } => {
                    let ws = geometry.expect("conv").weight_shape();
                    let bound = (1.0 / ws[1..].iter().product::<usize>() as f64).sqrt();
                    vec![
                        Param {
                            role: ParamRole::Weight,
                            value: Tensor::from_fn(&ws, |_| rng.gen_range(-bound..bound)),
                        },
                        bias(*filters),
                    ]
                }
                LayerSpec::Dense { outputs, .. } => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    vec![
                        Param {
                            role: ParamRole::Weight,
                            value: Tensor::from_fn(&[*outputs, fan_in], |_| rng.gen_range(-bound..bound)),
                        },
                        bias(*outputs),
                    ]
                }
                LayerSpec::Relu | LayerSpec::GlobalAvgPool => Vec::new(),
            };
            layers.push(Layer {
                spec: layer.clone(),
                params,
                geometry,
            });
            c_in = shape[0];
            fan_in = shape.iter().product();
        }
        Ok(Self { spec, layers })
    }

    pub fn layer(&self, name: &str) -> Option<(usize, &Layer)> {
        self.layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.spec.name() == name)
    }

    /// Replace the factorized bank of a `conv3t` layer.
    pub fn set_bank(&mut self, name: &str, bank: FilterBank) -> Result<()> {
        let (i, layer) = self
            .layer(name)
            .ok_or_else(|| Error::contract(format!("no layer named {name}")))?;
        let current = layer
            .bank()
            .ok_or_else(|| Error::contract(format!("layer {name} is not factorized")))?;
        if current.base.shape() != bank.base.shape() || current.depth != bank.depth {
            return Err(Error::contract(format!(
                "bank {:?} x{} does not fit layer {name} ({:?} x{})",
                bank.base.shape(),
                bank.depth,
                current.base.shape(),
                current.depth
            )));
        }
        let layer = &mut self.layers[i];
        *layer.param_mut(ParamRole::Base).expect("base") = bank.base;
        if let Some(t) = bank.thetas {
            *layer.param_mut(ParamRole::Theta).expect("theta") = t;
        }
        Ok(())
    }

    /// Every `conv3t` bank with its layer name.
    pub fn banks(&self) -> Vec<(String, FilterBank)> {
        self.layers
            .iter()
            .filter_map(|l| Some((l.spec.name().to_string(), l.bank()?)))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.params)
            .map(|p| p.value.len())
            .sum()
    }

    /// The same network with every factorized layer replaced by a dense
    /// layer holding its materialized filters.
    pub fn to_dense(&self) -> Result<Model> {
        let mut spec = self.spec.clone();
        let mut layers = self.layers.clone();
        for (ls, layer) in spec.layers.iter_mut().zip(&mut layers) {
            if let LayerSpec::Conv3t {
                name,
                filters,
                kernel,
                depth,
                stride,
                padding,
            } = ls.clone()
            {
                let weights = layer.bank().expect("factorized").materialize()?;
                *ls = LayerSpec::Conv3d {
                    name,
                    filters,
                    kernel: [depth, kernel[0], kernel[1]],
                    stride,
                    padding,
                };
                layer.spec = ls.clone();
                layer.params = vec![
                    Param {
                        role: ParamRole::Weight,
                        value: weights,
                    },
                    layer.params.pop().expect("bias"),
                ];
            }
        }
        Ok(Model { spec, layers })
    }

    /// Inflate a single-frame model (dense convolutions with temporal extent
    /// 1 on `[C, 1, W, H]` input) into a factorized model for `frames`-long
    /// clips. Each convolution becomes a depth-`depths[i]` factorized layer
    /// whose base is the 2D filter divided by the depth, with identity
    /// transforms, so a temporally constant clip reproduces the 2D logits.
    pub fn inflate_2d(source: &Model, depths: &[usize], frames: usize) -> Result<Model> {
        let [c, t, w, h] = source.spec.input;
        if t != 1 {
            return Err(Error::contract("source model must take single frames"));
        }
        let mut depth_iter = depths.iter();
        let mut spec_layers = Vec::new();
        let mut layers = Vec::new();
        for layer in &source.layers {
            match &layer.spec {
                LayerSpec::Conv3d {
                    name,
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if kernel[0] != 1 {
                        return Err(Error::contract(format!("layer {name} is not a 2D convolution")));
                    }
                    let depth = *depth_iter
                        .next()
                        .ok_or_else(|| Error::contract("fewer depths than convolution layers"))?;
                    let w = layer.param(ParamRole::Weight).expect("weight");
                    let ws = w.shape();
                    let flat = w
                        .clone()
                        .reshape(&[ws[0], ws[1], ws[3], ws[4]])?
                        .map(|v| v / depth as f64);
                    let bank = FilterBank::import_2d(&flat, depth)?;
                    let spec = LayerSpec::Conv3t {
                        name: name.clone(),
                        filters: *filters,
                        kernel: [kernel[1], kernel[2]],
                        depth,
                        stride: [1, stride[1], stride[2]],
                        padding: [0, padding[1], padding[2]],
                    };
                    let mut params = bank_params(bank, *filters);
                    *params.last_mut().expect("bias") = Param {
                        role: ParamRole::Bias,
                        value: layer.param(ParamRole::Bias).expect("bias").clone(),
                    };
                    spec_layers.push(spec.clone());
                    layers.push(Layer {
                        spec,
                        params,
                        geometry: None,
                    });
                }
                other => {
                    spec_layers.push(other.clone());
                    layers.push(layer.clone());
                }
            }
        }
        if depth_iter.next().is_some() {
            return Err(Error::contract("more depths than convolution layers"));
        }
        let spec = ModelSpec {
            input: [c, frames, w, h],
            layers: spec_layers,
            classes: source.spec.classes,
            seed: source.spec.seed,
        };
        spec.shapes()?;
        let mut c_in = c;
        for layer in &mut layers {
            layer.geometry = layer.spec.geometry(c_in);
            if let Some(g) = layer.geometry {
                c_in = g.c_out;
            }
        }
        Ok(Model { spec, layers })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 5 || s[1..] != self.spec.input {
            return Err(Error::contract(format!(
                "batch {s:?} does not match model input [N, {:?}]",
                self.spec.input
            )));
        }
        Ok(())
    }

    /// Record the forward pass of `input` (`[N, C, T, W, H]`). Parameters
    /// are registered as trainable leaves when `trainable` is set, otherwise
    /// as constants.
    pub fn trace(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<Trace> {
        let params = self
            .layers
            .iter()
            .map(|layer| {
                layer
                    .params
                    .iter()
                    .map(|p| {
                        if trainable {
                            tape.param(p.value.clone())
                        } else {
                            tape.constant(p.value.clone())
                        }
                    })
                    .collect()
            })
            .collect();
        self.trace_with(tape, input, params)
    }

    /// Like [`Model::trace`] with caller-supplied parameter handles, laid
    /// out like `Model::layers[i].params`.
    pub fn trace_with(&self, tape: &mut Tape, input: Var, params: Vec<Vec<Var>>) -> Result<Trace> {
        self.check_batch(tape.value(input))?;
        let shapes_ok = params.len() == self.layers.len()
            && self.layers.iter().zip(&params).all(|(l, vars)| {
                vars.len() == l.params.len()
                    && l.params
                        .iter()
                        .zip(vars)
                        .all(|(p, &v)| tape.value(v).shape() == p.value.shape())
            });
        if !shapes_ok {
            return Err(Error::contract("parameter handles do not match the model layout"));
        }
        let mut x = input;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (layer, vars) in self.layers.iter().zip(&params) {
            x = match &layer.spec {
                LayerSpec::Conv3t { depth, .. } => {
                    let theta = (*depth > 1).then(|| vars[1]);
                    let k = materialize_var(tape, vars[0], theta, *depth)?;
                    conv3d_var(
                        tape,
                        x,
                        k,
                        *vars.last().expect("bias"),
                        layer.geometry.expect("conv"),
                    )?
                }
                LayerSpec::Conv3d { .. } => {
                    conv3d_var(tape, x, vars[0], vars[1], layer.geometry.expect("conv"))?
                }
                LayerSpec::Relu => tape.relu(x),
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(x)?,
                LayerSpec::Dense { .. } => {
                    let s = tape.value(x).shape().to_vec();
                    let flat = if s.len() > 2 {
                        tape.reshape(x, &[s[0], s[1..].iter().product()])?
                    } else {
                        x
                    };
                    tape.dense(flat, vars[0], vars[1])?
                }
            };
            outputs.push(x);
        }
        Ok(Trace { outputs, params })
    }

    /// Logits `[N, classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let trace = self.trace(&mut tape, x, false)?;
        Ok(tape.take(*trace.outputs.last().expect("non-empty model")))
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(logits
            .data()
            .chunks_exact(self.spec.classes)
            .map(argmax)
            .collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

fn bias(n: usize) -> Param {
    Param {
        role: ParamRole::Bias,
        value: Tensor::zeros(&[n]),
    }
}

fn bank_params(bank: FilterBank, filters: usize) -> Vec<Param> {
    let mut params = vec![Param {
        role: ParamRole::Base,
        value: bank.base,
    }];
    if let Some(t) = bank.thetas {
        params.push(Param {
            role: ParamRole::Theta,
            value: t,
        });
    }
    params.push(bias(filters));
    params
}

/// Stack `[C, T, W, H]` clips into one `[N, C, T, W, H]` batch.
pub fn stack(clips: &[&Tensor]) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::contract("empty batch"))?
        .shape()
        .to_vec();
    let mut data = Vec::with_capacity(clips.len() * clips[0].len());
    for c in clips {
        if c.shape() != first {
            return Err(Error::contract("clips in one batch must share a shape"));
        }
        data.extend_from_slice(c.data());
    }
    let mut shape = vec![clips.len()];
    shape.extend(first);
    Tensor::from_parts(&shape, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Applied to bases and weights only.
    pub weight_decay: f64,
    /// Learning-rate multiplier for the transform parameters.
    pub temporal_lr_mult: f64,
    /// Scales are kept at or above this value after every update.
    pub min_scale: f64,
    #[serde(default)]
    pub schedule: Schedule,
}

/// Learning-rate schedule over the whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            weight_decay: 0.0,
            temporal_lr_mult: 1.0,
            min_scale: 0.1,
            schedule: Schedule::Cosine,
        }
    }
}

impl TrainConfig {
    /// Learning rate of step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.temporal_lr_mult >= 0.0 && self.min_scale > 0.0) {
            return Err(Error::contract(
                "weight decay and temporal multiplier must be >= 0 and the scale floor > 0",
            ));
        }
        Ok(())
    }
}

/// `v <- momentum v + g + decay w;  w <- w - lr v`.
pub fn sgd_update(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, decay: f64) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + g + decay * *w;
        *w -= lr * *v;
    }
}

/// Momentum buffers for every parameter of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    velocity: Vec<Vec<Vec<f64>>>,
}

impl Sgd {
    pub fn new(model: &Model) -> Self {
        Self {
            velocity: model
                .layers
                .iter()
                .map(|l| l.params.iter().map(|p| vec![0.0; p.value.len()]).collect())
                .collect(),
        }
    }

    pub fn apply(&mut self, model: &mut Model, grads: &[Vec<Vec<f64>>], cfg: &TrainConfig) {
        for ((layer, vel), g) in model.layers.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((p, v), g) in layer.params.iter_mut().zip(vel).zip(g) {
                let (lr, decay) = match p.role {
                    ParamRole::Theta => (cfg.lr * cfg.temporal_lr_mult, 0.0),
                    ParamRole::Base | ParamRole::Weight => (cfg.lr, cfg.weight_decay),
                    ParamRole::Bias => (cfg.lr, 0.0),
                };
                sgd_update(p.value.data_mut(), v, g, lr, cfg.momentum, decay);
                if p.role == ParamRole::Theta {
                    for row in p.value.data_mut().chunks_exact_mut(4) {
                        row[0] = row[0].max(cfg.min_scale);
                    }
                }
            }
        }
    }
}

/// Loss and gradients of a batch without updating the model.
pub fn loss_and_grads(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    step: usize,
) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let trace = model.trace(&mut tape, x, true)?;
    let logits = *trace.outputs.last().expect("non-empty model");
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        let location = trace
            .outputs
            .iter()
            .zip(&model.layers)
            .find(|(v, _)| !tape.value(**v).all_finite())
            .map_or("loss".to_string(), |(_, l)| l.spec.name().to_string());
        return Err(Error::Divergence { step, location });
    }
    tape.backward(loss)?;
    let mut grads = Vec::with_capacity(model.layers.len());
    for (layer, vars) in model.layers.iter().zip(&trace.params) {
        let mut lg = Vec::with_capacity(vars.len());
        for (p, v) in layer.params.iter().zip(vars) {
            let g = tape
                .grad(*v)
                .map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step,
                    location: format!("{} {:?} gradient", layer.spec.name(), p.role),
                });
            }
            lg.push(g);
        }
        grads.push(lg);
    }
    Ok((value, grads))
}

/// One SGD/momentum update on a batch; returns the batch loss before the update.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(model, batch, labels, step)?;
    opt.apply(model, &grads, cfg);
    Ok(loss)
}

/// Finite-difference check of the batch loss against the tape, over every
/// parameter of the model.
pub fn loss_gradcheck(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let flat: Vec<Tensor> = model
        .layers
        .iter()
        .flat_map(|l| l.params.iter().map(|p| p.value.clone()))
        .collect();
    let sizes: Vec<usize> = model.layers.iter().map(|l| l.params.len()).collect();
    gradcheck(
        |tape, vars| {
            let mut rest = vars;
            let mut grouped = Vec::with_capacity(sizes.len());
            for &n in &sizes {
                let (head, tail) = rest.split_at(n);
                grouped.push(head.to_vec());
                rest = tail;
            }
            let x = tape.constant(batch.clone());
            let trace = model.trace_with(tape, x, grouped)?;
            tape.softmax_cross_entropy(*trace.outputs.last().expect("non-empty model"), labels)
        },
        &flat,
        cfg,
    )
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Loss of every step.
    pub losses: Vec<f64>,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Shuffled mini-batch training for `cfg.epochs` epochs. `on_epoch` sees the
/// model after each epoch.
pub fn train(
    model: &mut Model,
    clips: &[&Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &Model, f64),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if clips.len() != labels.len() || clips.is_empty() {
        return Err(Error::contract("need one label per clip and at least one clip"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(model);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut history = TrainHistory::default();
    let total_steps = cfg.epochs * clips.len().div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = stack(&chunk.iter().map(|&i| clips[i]).collect::<Vec<_>>())?;
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let step = history.losses.len();
            let step_cfg = TrainConfig {
                lr: cfg.lr_at(step, total_steps),
                ..cfg.clone()
            };
            let loss = train_step(model, &mut opt, &batch, &y, &step_cfg, step)?;
            history.losses.push(loss);
            total += loss * chunk.len() as f64;
        }
        let mean = total / clips.len() as f64;
        history.epoch_losses.push(mean);
        on_epoch(epoch, model, mean);
    }
    Ok(history)
}

/// Fraction of clips classified correctly.
pub fn accuracy(model: &Model, clips: &[&Tensor], labels: &[usize]) -> Result<f64> {
    if clips.len() != labels.len() || clips.is_empty() {
        return Err(Error::contract("need one label per clip and at least one clip"));
    }
    let mut correct = 0;
    for (chunk, y) in clips.chunks(32).zip(labels.chunks(32)) {
        let pred = model.predict(&stack(chunk)?)?;
        correct += pred.iter().zip(y).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// Bookkeeping stored next to checkpoint weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub spec: ModelSpec,
    pub config: Option<TrainConfig>,
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

pub const STATE_FILE: &str = "state.json";

/// Write a checkpoint: factorized banks in the filter-bank format, every other
/// tensor as `<layer>.<role>.tsr`, and the training state.
pub fn save_checkpoint(dir: &Path, model: &Model, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    filter::write_banks(dir, &model.banks())?;
    for layer in &model.layers {
        for p in &layer.params {
            let file = match p.role {
                ParamRole::Base | ParamRole::Theta => continue,
                ParamRole::Weight => format!("{}.weight.tsr", layer.spec.name()),
                ParamRole::Bias => format!("{}.bias.tsr", layer.spec.name()),
            };
            p.value.write_tsr(dir.join(file))?;
        }
    }
    fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(state)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, TrainState)> {
    let state_path = dir.join(STATE_FILE);
    let state: TrainState = serde_json::from_str(&fs::read_to_string(&state_path)?)
        .map_err(|e| Error::format(&state_path, e.to_string()))?;
    let mut model = Model::new(state.spec.clone())?;
    for (name, bank) in filter::read_banks(dir)? {
        model.set_bank(&name, bank)?;
    }
    for layer in &mut model.layers {
        let name = layer.spec.name().to_string();
        for p in &mut layer.params {
            let file = match p.role {
                ParamRole::Base | ParamRole::Theta => continue,
                ParamRole::Weight => format!("{name}.weight.tsr"),
                ParamRole::Bias => format!("{name}.bias.tsr"),
            };
            let t = Tensor::read_tsr(dir.join(&file))?;
            if t.shape() != p.value.shape() {
                return Err(Error::contract(format!(
                    "{file}: shape {:?}, layer expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
    }
    Ok((model, state))
}
