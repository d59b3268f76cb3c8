//! Source-network definition, forward/backward passes, and SGD training.
//!
//! Networks are flat layer lists. Every parameterized layer except the
//! last is followed by a quantized activation; the output layer emits raw
//! logits. Training uses straight-through gradients for the quantizer and
//! classical momentum SGD with a cosine learning-rate schedule.

use crate::activation::{self, QuantActParams};
use crate::error::{Error, Result};
use crate::rng::{self, RandomSource};
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Floor for the trainable activation threshold.
pub const THRESHOLD_MIN: f32 = 1e-3;

/// One layer of a source network.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Fully connected: `weight [out x in]`, `bias [out]`.
    Dense { weight: Tensor, bias: Tensor },
    /// 2-D convolution: `weight [F x C x Kh x Kw]`, `bias [F]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    /// Non-overlapping average pooling with square window.
    AvgPool { size: usize },
    Flatten,
    Activation { params: QuantActParams },
}

impl Layer {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }
}

/// Dataset-facing metadata carried by every model.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkMeta {
    pub dataset: String,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

/// An ordered layer graph with materialized parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDef {
    pub layers: Vec<Layer>,
    pub meta: NetworkMeta,
}

/// Forward-pass mode: training applies activation noise, evaluation
/// forces it to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output shape of a layer applied to `input` extents.
pub fn layer_output_shape(layer: &Layer, input: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Dense { weight, .. } => {
            let (out, inp) = (weight.shape()[0], weight.shape()[1]);
            if input != [inp] {
                return Err(Error::ShapeMismatch(format!(
                    "dense expects [{inp}], got {input:?}"
                )));
            }
            Ok(vec![out])
        }
        Layer::Conv2d {
            weight,
            stride,
            pad,
            ..
        } => {
            let [f, c, kh, kw] = match weight.shape() {
                &[f, c, kh, kw] => [f, c, kh, kw],
                s => {
                    return Err(Error::ShapeMismatch(format!(
                        "conv weight must be 4-D, got {s:?}"
                    )))
                }
            };
            let (ci, h, w) = match input {
                &[ci, h, w] => (ci, h, w),
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "conv expects C x H x W input, got {input:?}"
                    )))
                }
            };
            if ci != c || kh > h + 2 * pad || kw > w + 2 * pad {
                return Err(Error::ShapeMismatch(format!(
                    "conv kernel {f}x{c}x{kh}x{kw} does not fit input {input:?}"
                )));
            }
            Ok(vec![
                f,
                (h + 2 * pad - kh) / stride + 1,
                (w + 2 * pad - kw) / stride + 1,
            ])
        }
        Layer::AvgPool { size } => {
            let (c, h, w) = match input {
                &[c, h, w] => (c, h, w),
                _ => {
                    return Err(Error::ShapeMismatch(format!(
                        "avgpool expects C x H x W input, got {input:?}"
                    )))
                }
            };
            if h % size != 0 || w % size != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "avgpool window {size} does not divide {h}x{w}"
                )));
            }
            Ok(vec![c, h / size, w / size])
        }
        Layer::Flatten => Ok(vec![input.iter().product()]),
        Layer::Activation { .. } => Ok(input.to_vec()),
    }
}

impl NetworkDef {
    /// Check that layer extents compose from the declared input shape and
    /// that exactly one activation follows each parameterized layer
    /// except the output layer.
    pub fn validate(&self) -> Result<()> {
        let param_indices: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_parameterized())
            .map(|(i, _)| i)
            .collect();
        if param_indices.is_empty() {
            return Err(Error::Config("network has no parameterized layers".into()));
        }
        let last_param = *param_indices.last().unwrap();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Activation { params } = layer {
                params.validate()?;
                if i == 0 || !self.layers[i - 1].is_parameterized() {
                    return Err(Error::Config(format!(
                        "activation at layer {i} does not follow a parameterized layer"
                    )));
                }
                if i > last_param {
                    return Err(Error::Config(
                        "output layer must emit raw logits, found trailing activation".into(),
                    ));
                }
            }
        }
        for &p in &param_indices[..param_indices.len() - 1] {
            if !matches!(self.layers.get(p + 1), Some(Layer::Activation { .. })) {
                return Err(Error::Config(format!(
                    "parameterized layer {p} must be followed by an activation"
                )));
            }
        }
        let mut shape = self.meta.input_shape.clone();
        for layer in &self.layers {
            shape = layer_output_shape(layer, &shape)?;
        }
        if shape != [self.meta.class_count] {
            return Err(Error::ShapeMismatch(format!(
                "network output {shape:?} does not match class count {}",
                self.meta.class_count
            )));
        }
        Ok(())
    }

    /// Activation parameters in layer order.
    pub fn activation_params(&self) -> Vec<QuantActParams> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Activation { params } => Some(*params),
                _ => None,
            })
            .collect()
    }

    /// Overwrite per-layer noise intensities, in activation-layer order.
    pub fn set_noise(&mut self, noise: &[f32]) -> Result<()> {
        let acts: Vec<&mut QuantActParams> = self
            .layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Activation { params } => Some(params),
                _ => None,
            })
            .collect();
        if acts.len() != noise.len() {
            return Err(Error::MissingLayer(format!(
                "{} noise values for {} activation layers",
                noise.len(),
                acts.len()
            )));
        }
        for (p, &d) in acts.into_iter().zip(noise) {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::Config(format!("noise intensity {d} invalid")));
            }
            p.noise_std = d;
        }
        Ok(())
    }
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardTrace {
    pub logits: Tensor,
    /// Post-activation output of each activation layer, in order.
    pub activations: Vec<Tensor>,
    /// Input of each activation layer, in order.
    pub pre_activations: Vec<Tensor>,
    /// Input of every layer, indexed like `net.layers`.
    pub layer_inputs: Vec<Tensor>,
}

fn apply_dense(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
    let n = x.len();
    let col = x.reshape(&[n, 1])?;
    let y = weight.matmul(&col)?;
    let y = y.reshape(&[weight.shape()[0]])?;
    y.add(bias)
}

fn apply_conv(
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
    x: &Tensor,
) -> Result<Tensor> {
    let mut y = x.conv2d(weight, stride, pad)?;
    let [f, oh, ow] = match y.shape() {
        &[f, oh, ow] => [f, oh, ow],
        _ => unreachable!(),
    };
    let data = y.data_mut();
    for fi in 0..f {
        let b = bias.data()[fi];
        for v in &mut data[fi * oh * ow..(fi + 1) * oh * ow] {
            *v += b;
        }
    }
    Ok(y)
}

fn apply_avgpool(size: usize, x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match x.shape() {
        &[c, h, w] => (c, h, w),
        s => {
            return Err(Error::ShapeMismatch(format!(
                "avgpool expects C x H x W, got {s:?}"
            )))
        }
    };
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f32;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let od = out.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0f32;
                for ky in 0..size {
                    for kx in 0..size {
                        acc += x.data()[(ci * h + oy * size + ky) * w + ox * size + kx];
                    }
                }
                od[(ci * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Ok(out)
}

/// Apply one layer; linear layers ignore `mode` and `rs`.
pub fn apply_layer(
    layer: &Layer,
    x: &Tensor,
    mode: Mode,
    rs: &mut RandomSource,
) -> Result<Tensor> {
    match layer {
        Layer::Dense { weight, bias } => apply_dense(weight, bias, x),
        Layer::Conv2d {
            weight,
            bias,
            stride,
            pad,
        } => apply_conv(weight, bias, *stride, *pad, x),
        Layer::AvgPool { size } => apply_avgpool(*size, x),
        Layer::Flatten => x.reshape(&[x.len()]),
        Layer::Activation { params } => match mode {
            Mode::Train => activation::nq_forward(x, params, rs),
            Mode::Eval => activation::qcfs_forward(x, params),
        },
    }
}

/// Full forward pass with caches for backprop.
pub fn forward_full(
    net: &NetworkDef,
    x: &Tensor,
    mode: Mode,
    rs: &mut RandomSource,
) -> Result<ForwardTrace> {
    if x.shape() != net.meta.input_shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} does not match declared shape {:?}",
            x.shape(),
            net.meta.input_shape
        )));
    }
    let mut current = x.clone();
    let mut layer_inputs = Vec::with_capacity(net.layers.len());
    let mut activations = Vec::new();
    let mut pre_activations = Vec::new();
    for layer in &net.layers {
        layer_inputs.push(current.clone());
        let next = apply_layer(layer, &current, mode, rs)?;
        if let Layer::Activation { .. } = layer {
            pre_activations.push(current.clone());
            activations.push(next.clone());
        }
        current = next;
    }
    Ok(ForwardTrace {
        logits: current,
        activations,
        pre_activations,
        layer_inputs,
    })
}

/// Forward pass returning logits and the post-activation output of every
/// activation layer.
pub fn ann_forward(
    net: &NetworkDef,
    x: &Tensor,
    mode: Mode,
    rs: &mut RandomSource,
) -> Result<(Tensor, Vec<Tensor>)> {
    let trace = forward_full(net, x, mode, rs)?;
    Ok((trace.logits, trace.activations))
}

/// Deterministic evaluation-mode forward (noise forced off).
pub fn eval_forward(net: &NetworkDef, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let mut unused = RandomSource::new(0, 0);
    ann_forward(net, x, Mode::Eval, &mut unused)
}

/// Gradient payload for one layer.
#[derive(Clone, Debug)]
pub enum LayerGrad {
    None,
    Params { dw: Tensor, db: Tensor },
    Threshold(f32),
}

/// Gradients aligned with `net.layers`.
pub struct NetGradients(pub Vec<LayerGrad>);

impl NetGradients {
    pub fn zeros_like(net: &NetworkDef) -> Self {
        let grads = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                    LayerGrad::Params {
                        dw: Tensor::zeros(weight.shape()),
                        db: Tensor::zeros(bias.shape()),
                    }
                }
                Layer::Activation { .. } => LayerGrad::Threshold(0.0),
                _ => LayerGrad::None,
            })
            .collect();
        Self(grads)
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            match (a, b) {
                (
                    LayerGrad::Params { dw, db },
                    LayerGrad::Params {
                        dw: dw2,
                        db: db2,
                    },
                ) => {
                    for (x, y) in dw.data_mut().iter_mut().zip(dw2.data()) {
                        *x += y;
                    }
                    for (x, y) in db.data_mut().iter_mut().zip(db2.data()) {
                        *x += y;
                    }
                }
                (LayerGrad::Threshold(a), LayerGrad::Threshold(b)) => *a += b,
                (LayerGrad::None, LayerGrad::None) => {}
                _ => unreachable!("gradient structure mismatch"),
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.0 {
            match g {
                LayerGrad::Params { dw, db } => {
                    for v in dw.data_mut() {
                        *v *= s;
                    }
                    for v in db.data_mut() {
                        *v *= s;
                    }
                }
                LayerGrad::Threshold(t) => *t *= s,
                LayerGrad::None => {}
            }
        }
    }
}

fn dense_backward(
    weight: &Tensor,
    x: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    let mut dw = Tensor::zeros(&[out, inp]);
    let dwd = dw.data_mut();
    for o in 0..out {
        let g = grad_out.data()[o];
        for i in 0..inp {
            dwd[o * inp + i] = g * x.data()[i];
        }
    }
    let db = grad_out.clone();
    let mut dx = Tensor::zeros(&[inp]);
    for (i, dxi) in dx.data_mut().iter_mut().enumerate() {
        let mut acc = 0f64;
        for o in 0..out {
            acc += weight.data()[o * inp + i] as f64 * grad_out.data()[o] as f64;
        }
        *dxi = acc as f32;
    }
    Ok((dw, db, dx))
}

fn conv_backward(
    weight: &Tensor,
    stride: usize,
    pad: usize,
    x: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = match x.shape() {
        &[c, h, w] => (c, h, w),
        _ => unreachable!(),
    };
    let [f, _, kh, kw] = match weight.shape() {
        &[f, c2, kh, kw] => [f, c2, kh, kw],
        _ => unreachable!(),
    };
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[f]);
    let mut dx = Tensor::zeros(x.shape());
    {
        let dwd = dw.data_mut();
        for fi in 0..f {
            let mut bacc = 0f64;
            for oy in 0..oh {
                for ox in 0..ow {
                    bacc += grad_out.data()[(fi * oh + oy) * ow + ox] as f64;
                }
            }
            db.data_mut()[fi] = bacc as f32;
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0f64;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += grad_out.data()[(fi * oh + oy) * ow + ox] as f64
                                    * x.data()[(ci * h + iy as usize) * w + ix as usize] as f64;
                            }
                        }
                        dwd[((fi * c + ci) * kh + ky) * kw + kx] = acc as f32;
                    }
                }
            }
        }
    }
    {
        let dxd = dx.data_mut();
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.data()[(fi * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dxd[(ci * h + iy as usize) * w + ix as usize] +=
                                    g * weight.data()[((fi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dw, db, dx))
}

fn avgpool_backward(size: usize, x_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (oh, ow) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f32;
    let mut dx = Tensor::zeros(x_shape);
    let dxd = dx.data_mut();
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.data()[(ci * oh + oy) * ow + ox] * inv;
                for ky in 0..size {
                    for kx in 0..size {
                        dxd[(ci * h + oy * size + ky) * w + ox * size + kx] = g;
                    }
                }
            }
        }
    }
    dx
}

/// Backward pass through the whole network given the loss gradient at the
/// logits. Returns gradients aligned with `net.layers`.
pub fn backward(net: &NetworkDef, trace: &ForwardTrace, grad_logits: &Tensor) -> Result<NetGradients> {
    let mut grads = Vec::with_capacity(net.layers.len());
    grads.resize_with(net.layers.len(), || LayerGrad::None);
    let mut grad = grad_logits.clone();
    for (i, layer) in net.layers.iter().enumerate().rev() {
        let x = &trace.layer_inputs[i];
        match layer {
            Layer::Dense { weight, .. } => {
                let (dw, db, dx) = dense_backward(weight, x, &grad)?;
                grads[i] = LayerGrad::Params { dw, db };
                grad = dx;
            }
            Layer::Conv2d {
                weight,
                stride,
                pad,
                ..
            } => {
                let (dw, db, dx) = conv_backward(weight, *stride, *pad, x, &grad)?;
                grads[i] = LayerGrad::Params { dw, db };
                grad = dx;
            }
            Layer::AvgPool { size } => {
                grad = avgpool_backward(*size, x.shape(), &grad);
            }
            Layer::Flatten => {
                grad = grad.reshape(x.shape())?;
            }
            Layer::Activation { params } => {
                let (dz, dthresh) = activation::act_backward(x, params, &grad)?;
                grads[i] = LayerGrad::Threshold(dthresh);
                grad = dz;
            }
        }
    }
    Ok(NetGradients(grads))
}

/// Softmax cross-entropy; returns the loss and its gradient at the logits.
pub fn cross_entropy_loss(logits: &Tensor, label: usize) -> Result<(f32, Tensor)> {
    let k = logits.len();
    if label >= k {
        return Err(Error::Config(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    let max = logits.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits
        .data()
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .collect();
    let denom: f64 = exps.iter().sum();
    let loss = denom.ln() - (logits.data()[label] as f64 - max);
    let mut grad = Tensor::zeros(&[k]);
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        *g = (exps[i] / denom) as f32;
    }
    grad.data_mut()[label] -= 1.0;
    Ok((loss as f32, grad))
}

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr0: f32,
    pub epochs: usize,
    pub weight_decay: f32,
    pub momentum: f32,
    pub batch_size: usize,
    /// Quantization steps L shared by every activation layer.
    pub steps: u32,
    /// Noise-induction time step.
    pub tau: usize,
    pub seed: u64,
    pub val_fraction: f32,
    /// Initial activation threshold.
    pub threshold_init: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            epochs: 30,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch_size: 64,
            steps: 4,
            tau: 4,
            seed: 0,
            val_fraction: 0.05,
            threshold_init: 8.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0, 0.5), got {}",
                self.val_fraction
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.tau < 1 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cosine schedule: `lr0 * 0.5 * (1 + cos(pi * epoch / epochs))`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f32 {
    let frac = epoch as f64 / cfg.epochs as f64;
    (cfg.lr0 as f64 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())) as f32
}

/// Momentum buffers aligned with the network's parameters.
pub struct SgdState {
    bufs: Vec<LayerGrad>,
}

impl SgdState {
    pub fn new(net: &NetworkDef) -> Self {
        Self {
            bufs: NetGradients::zeros_like(net).0,
        }
    }
}

/// One SGD update: `buf = momentum*buf + (g + wd*w)`, `w -= lr*buf`.
/// Activation thresholds skip weight decay and clamp at
/// [`THRESHOLD_MIN`].
pub fn sgd_step(
    net: &mut NetworkDef,
    state: &mut SgdState,
    grads: &NetGradients,
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) {
    for ((layer, buf), grad) in net.layers.iter_mut().zip(&mut state.bufs).zip(&grads.0) {
        match (layer, buf, grad) {
            (
                Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. },
                LayerGrad::Params { dw: bw, db: bb },
                LayerGrad::Params { dw, db },
            ) => {
                for ((w, b), g) in weight
                    .data_mut()
                    .iter_mut()
                    .zip(bw.data_mut())
                    .zip(dw.data())
                {
                    *b = momentum * *b + (g + weight_decay * *w);
                    *w -= lr * *b;
                }
                for ((w, b), g) in bias
                    .data_mut()
                    .iter_mut()
                    .zip(bb.data_mut())
                    .zip(db.data())
                {
                    *b = momentum * *b + (g + weight_decay * *w);
                    *w -= lr * *b;
                }
            }
            (
                Layer::Activation { params },
                LayerGrad::Threshold(buf),
                LayerGrad::Threshold(g),
            ) => {
                *buf = momentum * *buf + g;
                params.threshold = (params.threshold - lr * *buf).max(THRESHOLD_MIN);
            }
            _ => {}
        }
    }
}

/// One shuffled pass over the dataset. The shuffle is keyed by
/// `(seed, epoch)`; per-sample noise streams are keyed by
/// `(epoch, sample index)` so batch-parallel execution reproduces the
/// sequential result. Returns `(mean loss, train accuracy)`.
pub fn train_epoch(
    net: &mut NetworkDef,
    opt: &mut SgdState,
    samples: &[(Tensor, usize)],
    cfg: &TrainConfig,
    epoch: usize,
    rs: &RandomSource,
) -> Result<(f32, f32)> {
    if samples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let lr = cosine_lr(epoch, cfg);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rs.substream(rng::shuffle_stream(epoch)).shuffle(&mut order);

    let mut loss_sum = 0f64;
    let mut correct = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let per_sample: Vec<Result<(f32, bool, NetGradients)>> = chunk
            .par_iter()
            .map(|&idx| {
                let (x, label) = &samples[idx];
                let mut sample_rs = rs.substream(rng::sample_stream(epoch, idx));
                let trace = forward_full(net, x, Mode::Train, &mut sample_rs)?;
                let (loss, grad_logits) = cross_entropy_loss(&trace.logits, *label)?;
                let hit = argmax(trace.logits.data()) == *label;
                let grads = backward(net, &trace, &grad_logits)?;
                Ok((loss, hit, grads))
            })
            .collect();
        let mut batch_grads = NetGradients::zeros_like(net);
        let mut n = 0usize;
        for result in per_sample {
            let (loss, hit, grads) = result?;
            loss_sum += loss as f64;
            correct += hit as usize;
            batch_grads.add_assign(&grads);
            n += 1;
        }
        batch_grads.scale(1.0 / n as f32);
        sgd_step(net, opt, &batch_grads, lr, cfg.momentum, cfg.weight_decay);
    }
    Ok((
        (loss_sum / samples.len() as f64) as f32,
        correct as f32 / samples.len() as f32,
    ))
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Deterministic evaluation-mode accuracy.
pub fn evaluate_accuracy(net: &NetworkDef, samples: &[(Tensor, usize)]) -> Result<f32> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let hits: Vec<Result<bool>> = samples
        .par_iter()
        .map(|(x, label)| {
            let (logits, _) = eval_forward(net, x)?;
            Ok(argmax(logits.data()) == *label)
        })
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f32 / samples.len() as f32)
}

/// Build a network from an architecture string.
///
/// `mlp-64-64` stacks dense layers of the given widths (a flatten is
/// inserted for image inputs); `conv-8-16-32` stacks 3x3/pad-1
/// convolutions with 2x2 average pooling, then one dense hidden layer
/// (the final number). Each hidden layer is followed by a quantized
/// activation; the final dense layer emits logits.
pub fn build_network(
    arch: &str,
    meta: NetworkMeta,
    steps: u32,
    threshold_init: f32,
    rs: &RandomSource,
) -> Result<NetworkDef> {
    let parts: Vec<&str> = arch.split('-').collect();
    let parse_sizes = |ps: &[&str]| -> Result<Vec<usize>> {
        ps.iter()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad architecture token {s:?} in {arch:?}")))
            })
            .collect()
    };
    let mut layers = Vec::new();
    let mut shape = meta.input_shape.clone();
    let mut init_key = 0u64;
    let mut next_init = |fan_in: usize, shape: &[usize]| -> Tensor {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let mut stream = rs.substream(rng::STREAM_INIT + init_key);
        init_key += 1;
        Tensor::uniform(shape, -bound, bound, &mut stream)
    };
    let act = QuantActParams::new(threshold_init, steps)?;

    match parts[0] {
        "mlp" => {
            let hidden = parse_sizes(&parts[1..])?;
            if shape.len() > 1 {
                layers.push(Layer::Flatten);
                shape = vec![shape.iter().product()];
            }
            for &width in &hidden {
                let fan_in = shape[0];
                layers.push(Layer::Dense {
                    weight: next_init(fan_in, &[width, fan_in]),
                    bias: Tensor::zeros(&[width]),
                });
                layers.push(Layer::Activation { params: act });
                shape = vec![width];
            }
            layers.push(Layer::Dense {
                weight: next_init(shape[0], &[meta.class_count, shape[0]]),
                bias: Tensor::zeros(&[meta.class_count]),
            });
        }
        "conv" => {
            if parts.len() < 3 {
                return Err(Error::Config(format!(
                    "conv architecture needs at least one filter count and a dense width: {arch:?}"
                )));
            }
            if shape.len() != 3 {
                return Err(Error::Config(format!(
                    "conv architecture needs C x H x W input, got {shape:?}"
                )));
            }
            let sizes = parse_sizes(&parts[1..])?;
            let (filters, dense_width) = sizes.split_at(sizes.len() - 1);
            for &f in filters {
                let c = shape[0];
                layers.push(Layer::Conv2d {
                    weight: next_init(c * 9, &[f, c, 3, 3]),
                    bias: Tensor::zeros(&[f]),
                    stride: 1,
                    pad: 1,
                });
                layers.push(Layer::Activation { params: act });
                layers.push(Layer::AvgPool { size: 2 });
                shape = vec![f, shape[1] / 2, shape[2] / 2];
                if shape[1] == 0 || shape[2] == 0 {
                    return Err(Error::Config(format!(
                        "too many pooling stages for input {:?}",
                        meta.input_shape
                    )));
                }
            }
            layers.push(Layer::Flatten);
            shape = vec![shape.iter().product()];
            layers.push(Layer::Dense {
                weight: next_init(shape[0], &[dense_width[0], shape[0]]),
                bias: Tensor::zeros(&[dense_width[0]]),
            });
            layers.push(Layer::Activation { params: act });
            shape = vec![dense_width[0]];
            layers.push(Layer::Dense {
                weight: next_init(shape[0], &[meta.class_count, shape[0]]),
                bias: Tensor::zeros(&[meta.class_count]),
            });
        }
        other => {
            return Err(Error::Config(format!(
                "unknown architecture family {other:?} (expected mlp-... or conv-...)"
            )));
        }
    }
    let net = NetworkDef { layers, meta };
    net.validate()?;
    Ok(net)
}
