//! Fully convolutional unary network: stride-1 "same" convolutions, ReLU and
//! stride-1 max pooling, so every layer keeps the input resolution.
//!
//! The network's pre-softmax outputs `z` feed the CRF as unary energies
//! `psi_n(l) = -z(l, n)`, which makes `exp(-psi)` proportional to the
//! network's softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CrfError, Result};
use crate::model::{GridGeometry, LabelSpace, Labeling, UnaryField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        kernel_size: usize,
        in_channels: usize,
        out_channels: usize,
    },
    Relu,
    MaxPool {
        kernel_size: usize,
    },
    /// Marks the readout. Forward passes stop before it and return logits.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// conv 9x9 (8) -> relu -> conv 5x5 (8) -> relu -> conv 3x3 (L) -> softmax
    pub fn desk(labels: LabelSpace) -> Self {
        NetworkSpec {
            input_channels: 1,
            layers: vec![
                LayerSpec::Conv {
                    kernel_size: 9,
                    in_channels: 1,
                    out_channels: 8,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    kernel_size: 5,
                    in_channels: 8,
                    out_channels: 8,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    kernel_size: 3,
                    in_channels: 8,
                    out_channels: labels.count(),
                },
                LayerSpec::Softmax,
            ],
        }
    }

    /// The full-size body-part architecture: 41/17/11 convs with 50 channels,
    /// a 3x3 pool and a 5x5 readout conv.
    pub fn full(labels: LabelSpace) -> Self {
        let conv = |k, i, o| LayerSpec::Conv {
            kernel_size: k,
            in_channels: i,
            out_channels: o,
        };
        NetworkSpec {
            input_channels: 1,
            layers: vec![
                conv(41, 1, 50),
                LayerSpec::Relu,
                conv(17, 50, 50),
                LayerSpec::Relu,
                conv(11, 50, 50),
                LayerSpec::MaxPool { kernel_size: 3 },
                LayerSpec::Relu,
                conv(5, 50, labels.count()),
                LayerSpec::Softmax,
            ],
        }
    }

    /// Checks channel chaining and kernel shapes; returns the output channel count.
    pub fn validate(&self) -> Result<usize> {
        if self.input_channels == 0 {
            return Err(CrfError::contract("network needs at least one input channel"));
        }
        let mut channels = self.input_channels;
        let mut produced = false;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    kernel_size,
                    in_channels,
                    out_channels,
                } => {
                    if kernel_size % 2 == 0 || kernel_size == 0 {
                        return Err(CrfError::contract(format!("layer {i}: kernel size must be odd")));
                    }
                    if in_channels != channels || out_channels == 0 {
                        return Err(CrfError::contract(format!(
                            "layer {i}: expects {in_channels} input channels, receives {channels}"
                        )));
                    }
                    channels = out_channels;
                    produced = true;
                }
                LayerSpec::MaxPool { kernel_size } => {
                    if kernel_size % 2 == 0 || kernel_size == 0 {
                        return Err(CrfError::contract(format!("layer {i}: pool size must be odd")));
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::Softmax => {
                    if i + 1 != self.layers.len() {
                        return Err(CrfError::contract("softmax readout must be the last layer"));
                    }
                }
            }
        }
        if !produced {
            return Err(CrfError::contract("network has no convolution layer"));
        }
        Ok(channels)
    }

    pub fn validate_for(&self, labels: LabelSpace) -> Result<()> {
        let out = self.validate()?;
        if out != labels.count() {
            return Err(CrfError::contract(format!(
                "network emits {out} channels but there are {} labels",
                labels.count()
            )));
        }
        Ok(())
    }

    fn convs(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layers.iter().filter_map(|l| match *l {
            LayerSpec::Conv {
                kernel_size,
                in_channels,
                out_channels,
            } => Some((kernel_size, in_channels, out_channels)),
            _ => None,
        })
    }
}

/// Dense `channels x height x width` tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(CrfError::contract(format!(
                "feature map {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CrfError::contract("feature map entries must be finite"));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    fn plane(&self, c: usize) -> &[f64] {
        let size = self.height * self.width;
        &self.data[c * size..(c + 1) * size]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let size = self.height * self.width;
        &mut self.data[c * size..(c + 1) * size]
    }
}

/// Kernel (`out x in x k x k`) and bias of one convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameters of every convolution, in layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub convs: Vec<ConvParams>,
}

impl ParameterSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        ParameterSet {
            convs: spec
                .convs()
                .map(|(k, i, o)| ConvParams {
                    weights: vec![0.0; o * i * k * k],
                    bias: vec![0.0; o],
                })
                .collect(),
        }
    }

    /// Glorot-uniform kernels, zero biases.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(spec);
        for ((k, i, o), conv) in spec.convs().zip(params.convs.iter_mut()) {
            let fan_in = (i * k * k) as f64;
            let fan_out = (o * k * k) as f64;
            let bound = (6.0 / (fan_in + fan_out)).sqrt();
            for w in conv.weights.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let shapes: Vec<_> = spec.convs().collect();
        if shapes.len() != self.convs.len() {
            return Err(CrfError::contract(format!(
                "spec has {} convolutions, parameters have {}",
                shapes.len(),
                self.convs.len()
            )));
        }
        for (n, ((k, i, o), conv)) in shapes.iter().zip(&self.convs).enumerate() {
            if conv.weights.len() != o * i * k * k || conv.bias.len() != *o {
                return Err(CrfError::contract(format!("convolution {n} parameter shape mismatch")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.convs.iter().map(|c| c.weights.len() + c.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.convs.iter().flat_map(|c| c.weights.iter().chain(c.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.convs
            .iter_mut()
            .flat_map(|c| c.weights.iter_mut().chain(c.bias.iter_mut()))
    }

    /// `self += weight * other`
    pub fn add_scaled(&mut self, other: &ParameterSet, weight: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += weight * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.iter_mut() {
            *a *= factor;
        }
    }
}

/// Everything backward needs from a forward pass: the input of every layer
/// and the winning positions of each pool.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layer_inputs: Vec<FeatureMap>,
    pool_argmax: Vec<Vec<usize>>,
}

fn conv_forward(input: &FeatureMap, k: usize, out_channels: usize, params: &ConvParams) -> FeatureMap {
    let (h, w) = (input.height, input.width);
    let pad = (k / 2) as isize;
    let mut out = FeatureMap::zeros(out_channels, h, w);
    for oc in 0..out_channels {
        let plane = out.plane_mut(oc);
        plane.fill(params.bias[oc]);
        for ic in 0..input.channels {
            let src = input.plane(ic);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let weight = params.weights[((oc * input.channels + ic) * k + ky) * k + kx];
                    if weight == 0.0 {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let dst_row = &mut plane[y * w + x0..y * w + x1];
                        let s0 = (x0 as isize + dx) as usize;
                        let src_row = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
                        for (d, s) in dst_row.iter_mut().zip(src_row) {
                            *d += weight * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates kernel/bias gradients and, if requested, the input gradient.
fn conv_backward(
    input: &FeatureMap,
    k: usize,
    params: &ConvParams,
    upstream: &FeatureMap,
    grads: &mut ConvParams,
    input_grad: Option<&mut FeatureMap>,
) {
    let (h, w) = (input.height, input.width);
    let pad = (k / 2) as isize;
    let in_channels = input.channels;
    for oc in 0..upstream.channels {
        grads.bias[oc] += upstream.plane(oc).iter().sum::<f64>();
    }
    let mut input_grad = input_grad;
    for oc in 0..upstream.channels {
        let up = upstream.plane(oc);
        for ic in 0..in_channels {
            let src = input.plane(ic);
            for ky in 0..k {
                let dy = ky as isize - pad;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let widx = ((oc * in_channels + ic) * k + ky) * k + kx;
                    let s0 = (x0 as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let up_row = &up[y * w + x0..y * w + x1];
                        let src_row = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
                        acc += up_row.iter().zip(src_row).map(|(u, s)| u * s).sum::<f64>();
                    }
                    grads.weights[widx] += acc;
                    if let Some(ig) = input_grad.as_deref_mut() {
                        let weight = params.weights[widx];
                        let dst = ig.plane_mut(ic);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let up_row = &up[y * w + x0..y * w + x1];
                            let dst_row = &mut dst[sy * w + s0..sy * w + s0 + (x1 - x0)];
                            for (d, u) in dst_row.iter_mut().zip(up_row) {
                                *d += weight * u;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 max pool over the in-bounds part of each window. Returns the
/// pooled map and, per output cell, the flat index of the first maximum in
/// raster order.
fn maxpool_forward(input: &FeatureMap, k: usize) -> (FeatureMap, Vec<usize>) {
    let (c, h, w) = (input.channels, input.height, input.width);
    let r = (k / 2) as isize;
    let mut out = FeatureMap::zeros(c, h, w);
    let mut argmax = vec![0usize; c * h * w];
    for ch in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                    for xx in (x - r).max(0)..(x + r + 1).min(w as isize) {
                        let idx = (ch * h + yy as usize) * w + xx as usize;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * h + y as usize) * w + x as usize;
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

fn check_input(spec: &NetworkSpec, params: &ParameterSet, input: &FeatureMap) -> Result<()> {
    spec.validate()?;
    params.check_against(spec)?;
    if input.channels != spec.input_channels {
        return Err(CrfError::contract(format!(
            "network expects {} input channels, got {}",
            spec.input_channels, input.channels
        )));
    }
    Ok(())
}

/// Forward pass keeping what backward needs.
pub fn forward_trace(
    spec: &NetworkSpec,
    params: &ParameterSet,
    input: &FeatureMap,
) -> Result<(FeatureMap, ForwardTrace)> {
    check_input(spec, params, input)?;
    let mut layer_inputs = Vec::with_capacity(spec.layers.len());
    let mut pool_argmax = Vec::new();
    let mut current = input.clone();
    let mut conv_index = 0;
    for layer in &spec.layers {
        let next = match *layer {
            LayerSpec::Conv {
                kernel_size,
                out_channels,
                ..
            } => {
                let out = conv_forward(&current, kernel_size, out_channels, &params.convs[conv_index]);
                conv_index += 1;
                out
            }
            LayerSpec::Relu => {
                let mut out = current.clone();
                for v in out.data.iter_mut() {
                    *v = v.max(0.0);
                }
                out
            }
            LayerSpec::MaxPool { kernel_size } => {
                let (out, argmax) = maxpool_forward(&current, kernel_size);
                pool_argmax.push(argmax);
                out
            }
            LayerSpec::Softmax => break,
        };
        layer_inputs.push(std::mem::replace(&mut current, next));
    }
    Ok((
        current,
        ForwardTrace {
            layer_inputs,
            pool_argmax,
        },
    ))
}

/// Logits (pre-softmax outputs), `L x H x W`.
pub fn forward(spec: &NetworkSpec, params: &ParameterSet, input: &FeatureMap) -> Result<FeatureMap> {
    forward_trace(spec, params, input).map(|(out, _)| out)
}

/// Gradients of `sum(upstream * logits)` from a recorded forward pass.
pub fn backward_trace(
    spec: &NetworkSpec,
    params: &ParameterSet,
    trace: &ForwardTrace,
    upstream: &FeatureMap,
    want_input_grad: bool,
) -> Result<(ParameterSet, Option<FeatureMap>)> {
    let mut grads = ParameterSet::zeros(spec);
    let mut conv_index = params.convs.len();
    let mut pool_index = trace.pool_argmax.len();
    let mut grad = upstream.clone();
    let executed = trace.layer_inputs.len();
    if let Some(last) = trace.layer_inputs.last() {
        let expected_channels = spec.validate()?;
        if upstream.channels != expected_channels || upstream.height != last.height || upstream.width != last.width
        {
            return Err(CrfError::contract("upstream error is not shaped like the logits"));
        }
    }
    for (li, layer) in spec.layers[..executed].iter().enumerate().rev() {
        let input = &trace.layer_inputs[li];
        grad = match *layer {
            LayerSpec::Conv { kernel_size, .. } => {
                conv_index -= 1;
                let need = want_input_grad || li > 0;
                let mut ig = need.then(|| FeatureMap::zeros(input.channels, input.height, input.width));
                conv_backward(
                    input,
                    kernel_size,
                    &params.convs[conv_index],
                    &grad,
                    &mut grads.convs[conv_index],
                    ig.as_mut(),
                );
                match ig {
                    Some(g) => g,
                    None => FeatureMap::zeros(0, input.height, input.width),
                }
            }
            LayerSpec::Relu => {
                let mut g = grad;
                for (gv, &x) in g.data.iter_mut().zip(&input.data) {
                    if x <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g
            }
            LayerSpec::MaxPool { .. } => {
                pool_index -= 1;
                let mut g = FeatureMap::zeros(input.channels, input.height, input.width);
                for (o, &src) in trace.pool_argmax[pool_index].iter().enumerate() {
                    g.data[src] += grad.data[o];
                }
                g
            }
            LayerSpec::Softmax => unreachable!("softmax is never executed"),
        };
    }
    Ok((grads, want_input_grad.then_some(grad)))
}

/// Parameter and input gradients of `sum(upstream * logits)`.
pub fn backward(
    spec: &NetworkSpec,
    params: &ParameterSet,
    input: &FeatureMap,
    upstream: &FeatureMap,
) -> Result<(ParameterSet, FeatureMap)> {
    let (_, trace) = forward_trace(spec, params, input)?;
    let (grads, input_grad) = backward_trace(spec, params, &trace, upstream, true)?;
    Ok((grads, input_grad.expect("input gradient requested")))
}

/// Unary energies `psi_n(l) = -z(l, n)` from logits.
pub fn logits_to_unaries(logits: &FeatureMap) -> Result<UnaryField> {
    let geometry = GridGeometry::new(logits.height, logits.width)?;
    let labels = LabelSpace::new(logits.channels)?;
    let n = geometry.sites();
    let mut values = vec![0.0; n * logits.channels];
    for l in 0..logits.channels {
        for (site, &z) in logits.plane(l).iter().enumerate() {
            values[site * logits.channels + l] = -z;
        }
    }
    UnaryField::from_values(geometry, labels, values)
}

/// Transposes an `N x L` per-site error table into an `L x H x W` map, scaled.
pub fn site_table_to_map(table: &[f64], geometry: GridGeometry, labels: usize, scale: f64) -> FeatureMap {
    let mut map = FeatureMap::zeros(labels, geometry.height(), geometry.width());
    for site in 0..geometry.sites() {
        for l in 0..labels {
            map.data[l * geometry.sites() + site] = scale * table[site * labels + l];
        }
    }
    map
}

/// Mean per-pixel softmax cross-entropy and its gradient on the logits.
pub fn cross_entropy(logits: &FeatureMap, labels: &Labeling) -> Result<(f64, FeatureMap)> {
    let n = logits.height * logits.width;
    if labels.len() != n {
        return Err(CrfError::contract("label map does not match logits"));
    }
    if labels.states().iter().any(|&s| s >= logits.channels) {
        return Err(CrfError::contract("label outside the network's output channels"));
    }
    let c = logits.channels;
    let mut grad = FeatureMap::zeros(c, logits.height, logits.width);
    let mut loss = 0.0;
    let mut probs = vec![0.0; c];
    for site in 0..n {
        let mut max = f64::NEG_INFINITY;
        for (l, p) in probs.iter_mut().enumerate() {
            *p = logits.data[l * n + site];
            max = max.max(*p);
        }
        let mut total = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        let target = labels.get(site);
        loss -= (probs[target] / total).ln();
        for (l, p) in probs.iter().enumerate() {
            let onehot = if l == target { 1.0 } else { 0.0 };
            grad.data[l * n + site] = (p / total - onehot) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Heavy-ball update `v <- momentum * v + grad`, `params <- params - rate * v`.
pub fn momentum_update(params: &mut ParameterSet, velocity: &mut ParameterSet, grad: &ParameterSet, rate: f64, momentum: f64) {
    for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad.iter()) {
        *v = momentum * *v + g;
        *p -= rate * *v;
    }
}

/// One SGD-with-momentum step on per-pixel cross-entropy. Returns the loss
/// before the update.
pub fn pretrain_step(
    spec: &NetworkSpec,
    params: &mut ParameterSet,
    input: &FeatureMap,
    labels: &Labeling,
    rate: f64,
    momentum: f64,
    velocity: &mut ParameterSet,
) -> Result<f64> {
    let (logits, trace) = forward_trace(spec, params, input)?;
    let (loss, upstream) = cross_entropy(&logits, labels)?;
    let (grads, _) = backward_trace(spec, params, &trace, &upstream, false)?;
    momentum_update(params, velocity, &grads, rate, momentum);
    Ok(loss)
}

/// A network together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryNet {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
}

impl UnaryNet {
    pub fn new(spec: NetworkSpec, params: ParameterSet) -> Result<Self> {
        spec.validate()?;
        params.check_against(&spec)?;
        Ok(UnaryNet { spec, params })
    }

    pub fn initialized(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = ParameterSet::init(&spec, seed);
        Self::new(spec, params)
    }

    pub fn logits(&self, input: &FeatureMap) -> Result<FeatureMap> {
        forward(&self.spec, &self.params, input)
    }

    pub fn unaries(&self, input: &FeatureMap) -> Result<UnaryField> {
        logits_to_unaries(&self.logits(input)?)
    }
}
