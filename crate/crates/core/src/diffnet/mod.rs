//! A small sequential network engine with exact reverse-mode gradients.
//!
//! Networks process one sample at a time. Activations are `[C, H, W]`
//! tensors; fully-connected layers flatten whatever they receive. Two
//! composite layers cover the non-sequential cases needed here:
//! [`Layer::Residual`] (`y = x + f(x)`) and [`Layer::Parallel`] (branches fed
//! the same input, flattened outputs concatenated).

pub mod gradcheck;
mod io;
mod ops;
mod optim;
mod tensor;

pub use io::{read_container, write_container, ModelHeader, MODEL_MAGIC, MODEL_VERSION};
pub use optim::{project_bayar, project_bayar_layer, ConstrainedKernel, SgdState};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use ops::ConvGeom;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub trainable: bool,
    /// `[out, in, kh, kw]`
    #[serde(skip)]
    pub weight: Vec<f64>,
    #[serde(skip)]
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride: 1,
            padding: 0,
            trainable: true,
            weight: vec![0.0; out_channels * in_channels * kernel_h * kernel_w],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    /// He-normal initialisation.
    pub fn init_he<R: Rng>(mut self, rng: &mut R) -> Self {
        let fan_in = (self.in_channels * self.kernel_h * self.kernel_w) as f64;
        let std = (2.0 / fan_in).sqrt();
        for w in &mut self.weight {
            *w = std * Distribution::<f64>::sample(&StandardNormal, rng);
        }
        self
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom {
            cin: self.in_channels,
            cout: self.out_channels,
            kh: self.kernel_h,
            kw: self.kernel_w,
            stride: self.stride,
            pad: self.padding,
            h,
            w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub trainable: bool,
    /// `[out, in]`
    #[serde(skip)]
    pub weight: Vec<f64>,
    #[serde(skip)]
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, trainable: true, weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn init_he<R: Rng>(mut self, rng: &mut R) -> Self {
        let std = (2.0 / self.inputs as f64).sqrt();
        for w in &mut self.weight {
            *w = std * Distribution::<f64>::sample(&StandardNormal, rng);
        }
        self
    }
}

/// One stage of a network. Parameters live inside the layer; serde only
/// sees the structural description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv2d(Conv2d),
    MaxPool { size: usize, stride: usize },
    GlobalAvgPool,
    Relu,
    FullyConnected(Dense),
    /// Softmax over channels at every spatial position, on `x / temperature`.
    Softmax { temperature: f64 },
    /// One-hot of the channel argmax at every spatial position (lowest
    /// channel wins ties). Not differentiable.
    HardmaxChannels,
    /// Divides the whole activation by its Euclidean norm.
    L2Normalize,
    Residual { layers: Vec<Layer> },
    Parallel { branches: Vec<Vec<Layer>> },
}

impl Layer {
    fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool => "global_avgpool",
            Layer::Relu => "relu",
            Layer::FullyConnected(_) => "fully_connected",
            Layer::Softmax { .. } => "softmax",
            Layer::HardmaxChannels => "hardmax_channels",
            Layer::L2Normalize => "l2_normalize",
            Layer::Residual { .. } => "residual",
            Layer::Parallel { .. } => "parallel",
        }
    }

    fn visit_params<'a>(&'a self, out: &mut Vec<(&'a [f64], bool)>) {
        match self {
            Layer::Conv2d(c) => {
                out.push((&c.weight, c.trainable));
                out.push((&c.bias, c.trainable));
            }
            Layer::FullyConnected(d) => {
                out.push((&d.weight, d.trainable));
                out.push((&d.bias, d.trainable));
            }
            Layer::Residual { layers } => layers.iter().for_each(|l| l.visit_params(out)),
            Layer::Parallel { branches } => branches.iter().flatten().for_each(|l| l.visit_params(out)),
            _ => {}
        }
    }

    fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<(&'a mut Vec<f64>, bool)>) {
        match self {
            Layer::Conv2d(c) => {
                let t = c.trainable;
                out.push((&mut c.weight, t));
                out.push((&mut c.bias, t));
            }
            Layer::FullyConnected(d) => {
                let t = d.trainable;
                out.push((&mut d.weight, t));
                out.push((&mut d.bias, t));
            }
            Layer::Residual { layers } => layers.iter_mut().for_each(|l| l.visit_params_mut(out)),
            Layer::Parallel { branches } => branches.iter_mut().flatten().for_each(|l| l.visit_params_mut(out)),
            _ => {}
        }
    }

    fn param_count(&self) -> usize {
        let mut v = Vec::new();
        self.visit_params(&mut v);
        v.len()
    }

    /// Expected parameter lengths, used to validate deserialized networks.
    fn param_lengths(&self, out: &mut Vec<usize>) {
        match self {
            Layer::Conv2d(c) => {
                out.push(c.out_channels * c.in_channels * c.kernel_h * c.kernel_w);
                out.push(c.out_channels);
            }
            Layer::FullyConnected(d) => {
                out.push(d.inputs * d.outputs);
                out.push(d.outputs);
            }
            Layer::Residual { layers } => layers.iter().for_each(|l| l.param_lengths(out)),
            Layer::Parallel { branches } => branches.iter().flatten().for_each(|l| l.param_lengths(out)),
            _ => {}
        }
    }

    fn differentiable(&self) -> bool {
        match self {
            Layer::HardmaxChannels => false,
            Layer::Residual { layers } => layers.iter().all(Layer::differentiable),
            Layer::Parallel { branches } => branches.iter().flatten().all(Layer::differentiable),
            _ => true,
        }
    }
}

/// Per-layer values kept by a training forward pass.
#[derive(Debug, Clone)]
enum LayerCache {
    Conv { padded: Vec<f64>, h: usize, w: usize },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Gap { in_shape: Vec<usize> },
    Relu { input: Vec<f64> },
    Dense { input: Vec<f64>, in_shape: Vec<usize> },
    Softmax { output: Vec<f64>, channels: usize, temperature: f64 },
    Hardmax,
    L2 { output: Vec<f64>, norm: f64 },
    Residual(Vec<LayerCache>),
    Parallel { caches: Vec<Vec<LayerCache>>, out_lens: Vec<usize>, out_shapes: Vec<Vec<usize>>, in_shape: Vec<usize> },
}

/// Activations recorded by [`Network::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
}

/// Gradients for every parameter buffer, in [`Network::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            tensor::axpy(scale, b, a);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    Hinge,
}

/// An ordered stack of layers plus the training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub loss: LossKind,
}

fn shape_err(path: &str, layer: &Layer, msg: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("layer {path} ({}): {msg}", layer.name()))
}

fn chw(x: &Tensor, path: &str, layer: &Layer) -> Result<(usize, usize, usize)> {
    x.chw().ok_or_else(|| shape_err(path, layer, format!("expects [C,H,W] input, got {:?}", x.shape())))
}

fn seq_forward(layers: &[Layer], x: Tensor, prefix: &str, mut cache: Option<&mut Vec<LayerCache>>) -> Result<Tensor> {
    let mut x = x;
    for (k, layer) in layers.iter().enumerate() {
        let path = if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        x = layer_forward(layer, x, &path, cache.as_deref_mut())?;
    }
    Ok(x)
}

fn layer_forward(layer: &Layer, x: Tensor, path: &str, cache: Option<&mut Vec<LayerCache>>) -> Result<Tensor> {
    let keep = cache.is_some();
    let (out, entry) = match layer {
        Layer::Conv2d(conv) => {
            let (c, h, w) = chw(&x, path, layer)?;
            if c != conv.in_channels {
                return Err(shape_err(path, layer, format!("expects {} channels, got {c}", conv.in_channels)));
            }
            let g = conv.geom(h, w);
            let (ho, wo) = g
                .out_dims()
                .ok_or_else(|| shape_err(path, layer, format!("input {h}x{w} smaller than kernel")))?;
            let padded = ops::pad_input(x.data(), &g);
            let y = ops::conv_forward(&padded, &conv.weight, &conv.bias, &g);
            let entry = keep.then(|| LayerCache::Conv { padded, h, w });
            (Tensor::new(vec![conv.out_channels, ho, wo], y)?, entry)
        }
        Layer::MaxPool { size, stride } => {
            let (c, h, w) = chw(&x, path, layer)?;
            if h < *size || w < *size || *stride == 0 {
                return Err(shape_err(path, layer, format!("cannot pool {h}x{w} with window {size}")));
            }
            let (y, argmax, (ho, wo)) = ops::maxpool_forward(x.data(), (c, h, w), *size, *stride);
            let entry = keep.then(|| LayerCache::MaxPool { argmax, in_shape: x.shape().to_vec() });
            (Tensor::new(vec![c, ho, wo], y)?, entry)
        }
        Layer::GlobalAvgPool => {
            let (c, h, w) = chw(&x, path, layer)?;
            let n = (h * w) as f64;
            let y = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / n).collect();
            let entry = keep.then(|| LayerCache::Gap { in_shape: x.shape().to_vec() });
            debug_assert_eq!(x.len(), c * h * w);
            (Tensor::new(vec![c], y)?, entry)
        }
        Layer::Relu => {
            let shape = x.shape().to_vec();
            let input = x.into_data();
            let y = input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
            let entry = keep.then_some(LayerCache::Relu { input });
            (Tensor::new(shape, y)?, entry)
        }
        Layer::FullyConnected(d) => {
            if x.len() != d.inputs {
                return Err(shape_err(path, layer, format!("expects {} inputs, got {}", d.inputs, x.len())));
            }
            let y = (0..d.outputs)
                .map(|o| d.bias[o] + tensor::dot(&d.weight[o * d.inputs..(o + 1) * d.inputs], x.data()))
                .collect();
            let entry = keep.then(|| LayerCache::Dense { in_shape: x.shape().to_vec(), input: x.into_data() });
            (Tensor::from_vec(y), entry)
        }
        Layer::Softmax { temperature } => {
            let (c, h, w) = chw(&x, path, layer)?;
            if !(*temperature > 0.0) {
                return Err(shape_err(path, layer, "temperature must be > 0"));
            }
            let shape = x.shape().to_vec();
            let hw = h * w;
            let xd = x.data();
            let mut y = vec![0.0; xd.len()];
            let mut scratch = vec![0.0; c];
            for p in 0..hw {
                let mut m = f64::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(xd[ch * hw + p]);
                }
                let mut s = 0.0;
                for (ch, e) in scratch.iter_mut().enumerate() {
                    *e = ((xd[ch * hw + p] - m) / temperature).exp();
                    s += *e;
                }
                for (ch, e) in scratch.iter().enumerate() {
                    y[ch * hw + p] = e / s;
                }
            }
            let entry =
                keep.then(|| LayerCache::Softmax { output: y.clone(), channels: c, temperature: *temperature });
            (Tensor::new(shape, y)?, entry)
        }
        Layer::HardmaxChannels => {
            let (c, h, w) = chw(&x, path, layer)?;
            let hw = h * w;
            let xd = x.data();
            let mut y = vec![0.0; xd.len()];
            for p in 0..hw {
                let mut best = 0;
                for ch in 1..c {
                    if xd[ch * hw + p] > xd[best * hw + p] {
                        best = ch;
                    }
                }
                y[best * hw + p] = 1.0;
            }
            (Tensor::new(x.shape().to_vec(), y)?, keep.then_some(LayerCache::Hardmax))
        }
        Layer::L2Normalize => {
            let norm = tensor::dot(x.data(), x.data()).sqrt();
            if !(norm > 0.0) {
                return Err(shape_err(path, layer, "cannot normalize a zero activation"));
            }
            let shape = x.shape().to_vec();
            let y: Vec<f64> = x.data().iter().map(|v| v / norm).collect();
            let entry = keep.then(|| LayerCache::L2 { output: y.clone(), norm });
            (Tensor::new(shape, y)?, entry)
        }
        Layer::Residual { layers } => {
            let mut inner = keep.then(Vec::new);
            let f = seq_forward(layers, x.clone(), path, inner.as_mut())?;
            if f.shape() != x.shape() {
                return Err(shape_err(path, layer, format!("branch maps {:?} to {:?}", x.shape(), f.shape())));
            }
            let mut y = x.into_data();
            tensor::axpy(1.0, f.data(), &mut y);
            (Tensor::new(f.shape().to_vec(), y)?, inner.map(LayerCache::Residual))
        }
        Layer::Parallel { branches } => {
            let mut caches = Vec::new();
            let mut out_lens = Vec::new();
            let mut out_shapes = Vec::new();
            let mut y = Vec::new();
            for (b, branch) in branches.iter().enumerate() {
                let mut inner = keep.then(Vec::new);
                let o = seq_forward(branch, x.clone(), &format!("{path}[{b}]"), inner.as_mut())?;
                out_lens.push(o.len());
                out_shapes.push(o.shape().to_vec());
                y.extend_from_slice(o.data());
                if let Some(c) = inner {
                    caches.push(c);
                }
            }
            let entry = keep.then(|| LayerCache::Parallel { caches, out_lens, out_shapes, in_shape: x.shape().to_vec() });
            (Tensor::from_vec(y), entry)
        }
    };
    if let (Some(cache), Some(entry)) = (cache, entry) {
        cache.push(entry);
    }
    Ok(out)
}

/// Backward through a layer sequence. `base` is the index of the first
/// parameter buffer of `layers` in the flat gradient list.
fn seq_backward(
    layers: &[Layer],
    caches: &[LayerCache],
    dy: Tensor,
    grads: &mut Grads,
    base: usize,
    want_dx: bool,
) -> Result<Option<Tensor>> {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = base;
    for l in layers {
        offsets.push(off);
        off += l.param_count();
    }
    let mut dy = dy;
    for k in (0..layers.len()).rev() {
        let need = want_dx || k > 0;
        match layer_backward(&layers[k], &caches[k], dy, grads, offsets[k], need)? {
            Some(d) => dy = d,
            None => return Ok(None),
        }
    }
    Ok(Some(dy))
}

fn layer_backward(
    layer: &Layer,
    cache: &LayerCache,
    dy: Tensor,
    grads: &mut Grads,
    base: usize,
    want_dx: bool,
) -> Result<Option<Tensor>> {
    Ok(match (layer, cache) {
        (Layer::Conv2d(conv), LayerCache::Conv { padded, h, w }) => {
            let g = conv.geom(*h, *w);
            let param_grads = if conv.trainable && !grads.0.is_empty() {
                let (a, b) = grads.0.split_at_mut(base + 1);
                Some((a[base].as_mut_slice(), b[0].as_mut_slice()))
            } else {
                None
            };
            ops::conv_backward(padded, &conv.weight, dy.data(), &g, param_grads, want_dx)
                .map(|dx| Tensor::new(vec![conv.in_channels, *h, *w], dx))
                .transpose()?
        }
        (Layer::MaxPool { .. }, LayerCache::MaxPool { argmax, in_shape }) => {
            let mut dx = Tensor::zeros(in_shape);
            for (&i, &g) in argmax.iter().zip(dy.data()) {
                dx.data_mut()[i] += g;
            }
            Some(dx)
        }
        (Layer::GlobalAvgPool, LayerCache::Gap { in_shape }) => {
            let hw: usize = in_shape[1..].iter().product();
            let n = hw as f64;
            let dx: Vec<f64> = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g / n, hw)).collect();
            Some(Tensor::new(in_shape.clone(), dx)?)
        }
        (Layer::Relu, LayerCache::Relu { input }) => {
            let dx = input.iter().zip(dy.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
            Some(Tensor::new(dy.shape().to_vec(), dx)?)
        }
        (Layer::FullyConnected(d), LayerCache::Dense { input, in_shape }) => {
            if d.trainable && !grads.0.is_empty() {
                let (a, b) = grads.0.split_at_mut(base + 1);
                let (dw, db) = (&mut a[base], &mut b[0]);
                for (o, &g) in dy.data().iter().enumerate() {
                    db[o] += g;
                    tensor::axpy(g, input, &mut dw[o * d.inputs..(o + 1) * d.inputs]);
                }
            }
            if want_dx {
                let mut dx = vec![0.0; d.inputs];
                for (o, &g) in dy.data().iter().enumerate() {
                    tensor::axpy(g, &d.weight[o * d.inputs..(o + 1) * d.inputs], &mut dx);
                }
                Some(Tensor::new(in_shape.clone(), dx)?)
            } else {
                None
            }
        }
        (Layer::Softmax { .. }, LayerCache::Softmax { output, channels, temperature }) => {
            let hw = output.len() / channels;
            let g = dy.data();
            let mut dx = vec![0.0; output.len()];
            for p in 0..hw {
                let s: f64 = (0..*channels).map(|c| output[c * hw + p] * g[c * hw + p]).sum();
                for c in 0..*channels {
                    let i = c * hw + p;
                    dx[i] = output[i] * (g[i] - s) / temperature;
                }
            }
            Some(Tensor::new(dy.shape().to_vec(), dx)?)
        }
        (Layer::HardmaxChannels, _) => {
            return Err(Error::UnsupportedOperation(
                "backward through hardmax_channels; use the softmax relaxation".into(),
            ))
        }
        (Layer::L2Normalize, LayerCache::L2 { output, norm }) => {
            let s = tensor::dot(output, dy.data());
            let dx = output.iter().zip(dy.data()).map(|(&y, &g)| (g - y * s) / norm).collect();
            Some(Tensor::new(dy.shape().to_vec(), dx)?)
        }
        (Layer::Residual { layers }, LayerCache::Residual(inner)) => {
            let d_inner = seq_backward(layers, inner, dy.clone(), grads, base, want_dx)?;
            d_inner.map(|mut d| {
                tensor::axpy(1.0, dy.data(), d.data_mut());
                d
            })
        }
        (Layer::Parallel { branches }, LayerCache::Parallel { caches, out_lens, out_shapes, in_shape }) => {
            let mut dx = want_dx.then(|| Tensor::zeros(in_shape));
            let mut start = 0;
            let mut pbase = base;
            for (b, branch) in branches.iter().enumerate() {
                let part = dy.data()[start..start + out_lens[b]].to_vec();
                start += out_lens[b];
                let d = seq_backward(branch, &caches[b], Tensor::new(out_shapes[b].clone(), part)?, grads, pbase, want_dx)?;
                pbase += branch.iter().map(Layer::param_count).sum::<usize>();
                if let (Some(acc), Some(d)) = (dx.as_mut(), d) {
                    tensor::axpy(1.0, d.data(), acc.data_mut());
                }
            }
            dx
        }
        (layer, _) => {
            return Err(Error::invalid(format!("cache does not match layer {}", layer.name())));
        }
    })
}

/// Binary class label.
pub const PRISTINE: usize = 0;
pub const MANIPULATED: usize = 1;

impl Network {
    pub fn new(layers: Vec<Layer>, loss: LossKind) -> Self {
        Self { layers, loss }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        seq_forward(&self.layers, x.clone(), "", None)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let mut layers = Vec::with_capacity(self.layers.len());
        let y = seq_forward(&self.layers, x.clone(), "", Some(&mut layers))?;
        Ok((y, ForwardCache { layers }))
    }

    pub fn is_differentiable(&self) -> bool {
        self.layers.iter().all(Layer::differentiable)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params().iter().map(|p| vec![0.0; p.len()]).collect())
    }

    /// Reverse pass. Returns parameter gradients and, when `want_dx`, the
    /// gradient with respect to the network input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor, want_dx: bool) -> Result<(Grads, Option<Tensor>)> {
        let mut grads = self.zero_grads();
        let dx = self.backward_into(cache, upstream, &mut grads, want_dx)?;
        Ok((grads, dx))
    }

    /// Like [`Network::backward`], accumulating into `grads`. An empty
    /// `grads` skips parameter gradients entirely.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor,
        grads: &mut Grads,
        want_dx: bool,
    ) -> Result<Option<Tensor>> {
        if !self.is_differentiable() {
            return Err(Error::UnsupportedOperation(
                "backward through hardmax_channels; use the softmax relaxation".into(),
            ));
        }
        if cache.layers.len() != self.layers.len() {
            return Err(Error::invalid("forward cache belongs to a different network"));
        }
        if self.layers.is_empty() {
            return Ok(want_dx.then(|| upstream.clone()));
        }
        // without an input gradient, layers below the lowest trainable one can be skipped
        let lo = if want_dx {
            0
        } else {
            let mask_has = |l: &Layer| {
                let mut v = Vec::new();
                l.visit_params(&mut v);
                v.iter().any(|(_, t)| *t)
            };
            match self.layers.iter().position(mask_has) {
                Some(i) => i,
                None => return Ok(None),
            }
        };
        let base: usize = self.layers[..lo].iter().map(Layer::param_count).sum();
        seq_backward(&self.layers[lo..], &cache.layers[lo..], upstream.clone(), grads, base, want_dx || lo > 0)
            .map(|dx| if want_dx { dx } else { None })
    }

    /// Output of the first `n` layers.
    pub fn forward_prefix(&self, x: &Tensor, n: usize) -> Result<Tensor> {
        let n = n.min(self.layers.len());
        seq_forward(&self.layers[..n], x.clone(), "", None)
    }

    /// Parameter buffers in a fixed pre-order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        self.layers.iter().for_each(|l| l.visit_params(&mut v));
        v.into_iter().map(|(p, _)| p).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::new();
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(&mut v));
        v.into_iter().map(|(p, _)| p).collect()
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut v = Vec::new();
        self.layers.iter().for_each(|l| l.visit_params(&mut v));
        v.into_iter().map(|(_, t)| t).collect()
    }

    pub(crate) fn param_lengths(&self) -> Vec<usize> {
        let mut v = Vec::new();
        self.layers.iter().for_each(|l| l.param_lengths(&mut v));
        v
    }

    /// Scalar decision value: the single output, or logit(1) - logit(0).
    pub fn score_of(output: &Tensor) -> f64 {
        match output.data() {
            [s] => *s,
            [z0, z1] => z1 - z0,
            d => d.last().copied().unwrap_or(0.0) - d.first().copied().unwrap_or(0.0),
        }
    }

    /// Loss of `output` for `label` and its gradient with respect to `output`.
    pub fn loss_and_grad(&self, output: &Tensor, label: usize) -> (f64, Tensor) {
        let y = if label == MANIPULATED { 1.0 } else { -1.0 };
        let s = Self::score_of(output);
        let (loss, ds) = match self.loss {
            LossKind::SoftmaxCrossEntropy => {
                // -log sigmoid(y s), the two-class softmax cross entropy
                let u = -y * s;
                let loss = u.max(0.0) + (-u.abs()).exp().ln_1p();
                let sig = 1.0 / (1.0 + (-u).exp());
                (loss, -y * sig)
            }
            LossKind::Hinge => {
                let m = 1.0 - y * s;
                if m > 0.0 {
                    (m, -y)
                } else {
                    (0.0, 0.0)
                }
            }
        };
        let grad = match output.len() {
            1 => vec![ds],
            2 => vec![-ds, ds],
            n => {
                let mut g = vec![0.0; n];
                g[n - 1] = ds;
                g[0] -= ds;
                g
            }
        };
        (loss, Tensor::new(output.shape().to_vec(), grad).expect("same length"))
    }

    /// Gradient of the loss for `label` with respect to the input.
    pub fn input_gradient(&self, x: &Tensor, label: usize) -> Result<Tensor> {
        let (out, cache) = self.forward_cached(x)?;
        let (_, dy) = self.loss_and_grad(&out, label);
        self.input_backward(&cache, &dy)
    }

    /// Input gradient for an arbitrary upstream gradient, skipping all
    /// parameter gradients.
    pub fn input_backward(&self, cache: &ForwardCache, upstream: &Tensor) -> Result<Tensor> {
        // an empty gradient list tells the layers not to accumulate
        let mut none = Grads(Vec::new());
        self.backward_into(cache, upstream, &mut none, true)?
            .ok_or_else(|| Error::invalid("network produced no input gradient"))
    }
}

#[cfg(test)]
mod tests;
