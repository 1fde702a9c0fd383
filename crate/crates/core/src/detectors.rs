//! Manipulation detectors under one scoring contract: `score > threshold`
//! means "manipulated".
//!
//! * `spam_linear`: SPAM features and a linear max-margin classifier.
//! * `cozz_net_hard` / `cozz_net_soft`: a CNN that recomputes the SPAM
//!   features exactly (hard) or through a temperature softmax (soft), followed
//!   by the same linear classifier.
//! * `bayar_net`: a CNN whose first layer is a constrained prediction-error
//!   filter bank.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{
    project_bayar_layer, Conv2d, Dense, Grads, Layer, LossKind, Network, SgdState, Tensor, MANIPULATED,
};
use crate::error::{Error, Result};
use crate::imaging::ImagePatch;
use crate::rng::stream;
use crate::spamfeat::{
    extract_spam_with, histograms, tuple_of_index, Normalization, SpamConfig, SpamFeature, SymmetryTable,
    RESIDUAL_TAPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    SpamLinear,
    CozzNetHard,
    CozzNetSoft,
    BayarNet,
}

impl DetectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::SpamLinear => "spam_linear",
            DetectorKind::CozzNetHard => "cozz_net_hard",
            DetectorKind::CozzNetSoft => "cozz_net_soft",
            DetectorKind::BayarNet => "bayar_net",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown detector kind '{s}'")))
    }

    pub fn is_differentiable(self) -> bool {
        matches!(self, DetectorKind::CozzNetSoft | DetectorKind::BayarNet)
    }
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labelled patches with their source device.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSet {
    pub patches: Vec<ImagePatch>,
    /// 0 = pristine, 1 = manipulated.
    pub labels: Vec<u8>,
    pub devices: Vec<u32>,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn push(&mut self, patch: ImagePatch, label: u8, device: u32) {
        self.patches.push(patch);
        self.labels.push(label);
        self.devices.push(device);
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.patches.len() || self.devices.len() != self.patches.len() {
            return Err(Error::invalid("train set columns differ in length"));
        }
        check_classes(&self.labels)
    }
}

fn check_classes(labels: &[u8]) -> Result<()> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if pos < 2 || neg < 2 {
        return Err(Error::invalid(format!("need at least 2 examples per class, got {neg} pristine and {pos} manipulated")));
    }
    Ok(())
}

/// Affine map from gray levels to network input: `(x - offset) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub offset: f64,
    pub scale: f64,
}

impl InputScaling {
    pub const IDENTITY: InputScaling = InputScaling { offset: 0.0, scale: 1.0 };

    pub fn tensor(&self, x: &ImagePatch) -> Tensor {
        self.tensor_from_values(&x.to_f64(), x.width(), x.height())
    }

    pub fn tensor_from_values(&self, v: &[f64], width: usize, height: usize) -> Tensor {
        let data = v.iter().map(|p| (p - self.offset) * self.scale).collect();
        Tensor::new(vec![1, height, width], data).expect("patch dims match")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearModel {
    pub fn score(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.w).map(|(a, b)| a * b).sum::<f64>() + self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DetectorBody {
    SpamLinear { cfg: SpamConfig, table: SymmetryTable, linear: LinearModel },
    Net { net: Network, scaling: InputScaling, spam: Option<SpamConfig> },
}

/// A trained detector.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub kind: DetectorKind,
    /// `score > threshold` ⇒ manipulated.
    pub threshold: f64,
    /// `(width, height)` the model was built for; `None` accepts any size.
    pub input_dims: Option<(usize, usize)>,
    pub body: DetectorBody,
}

impl DetectorModel {
    fn check_dims(&self, x: &ImagePatch) -> Result<()> {
        match self.input_dims {
            Some(d) if d != x.dims() => Err(Error::invalid(format!(
                "{} expects {}x{} patches, got {}x{}",
                self.kind,
                d.0,
                d.1,
                x.width(),
                x.height()
            ))),
            _ => Ok(()),
        }
    }

    /// Decision value; positive (above threshold) means manipulated.
    pub fn score(&self, x: &ImagePatch) -> Result<f64> {
        self.check_dims(x)?;
        match &self.body {
            DetectorBody::SpamLinear { cfg, table, linear } => {
                let f = extract_spam_with(x, cfg, table)?;
                Ok(linear.score(&f.values))
            }
            DetectorBody::Net { net, scaling, .. } => Ok(Network::score_of(&net.forward(&scaling.tensor(x))?)),
        }
    }

    /// Score of a real-valued image (gray-level units, row-major).
    pub fn score_values(&self, v: &[f64], width: usize, height: usize) -> Result<f64> {
        match &self.body {
            DetectorBody::Net { net, scaling, .. } => {
                if v.len() != width * height {
                    return Err(Error::invalid("value buffer does not match dims"));
                }
                Ok(Network::score_of(&net.forward(&scaling.tensor_from_values(v, width, height))?))
            }
            DetectorBody::SpamLinear { .. } => self.score(&ImagePatch::from_f64(width, height, v)?),
        }
    }

    pub fn predict(&self, x: &ImagePatch) -> Result<u8> {
        Ok(u8::from(self.score(x)? > self.threshold))
    }

    pub fn network(&self) -> Option<&Network> {
        match &self.body {
            DetectorBody::Net { net, .. } => Some(net),
            DetectorBody::SpamLinear { .. } => None,
        }
    }

    pub fn network_mut(&mut self) -> Option<&mut Network> {
        match &mut self.body {
            DetectorBody::Net { net, .. } => Some(net),
            DetectorBody::SpamLinear { .. } => None,
        }
    }

    pub fn scaling(&self) -> InputScaling {
        match &self.body {
            DetectorBody::Net { scaling, .. } => *scaling,
            DetectorBody::SpamLinear { .. } => InputScaling::IDENTITY,
        }
    }

    /// Gradient of the detector loss for `label` with respect to the pixels
    /// (gray-level units).
    pub fn input_gradient(&self, x: &ImagePatch, label: u8) -> Result<Vec<f64>> {
        self.input_gradient_values(&x.to_f64(), x.width(), x.height(), label)
    }

    pub fn input_gradient_values(&self, v: &[f64], width: usize, height: usize, label: u8) -> Result<Vec<f64>> {
        match &self.body {
            DetectorBody::Net { net, scaling, .. } => {
                if !net.is_differentiable() {
                    return Err(Error::UnsupportedTarget(format!("{} has no input gradient", self.kind)));
                }
                let g = net.input_gradient(&scaling.tensor_from_values(v, width, height), usize::from(label))?;
                Ok(g.into_data().into_iter().map(|d| d * scaling.scale).collect())
            }
            DetectorBody::SpamLinear { .. } => {
                Err(Error::UnsupportedTarget(format!("{} has no input gradient", self.kind)))
            }
        }
    }

    /// SPAM configuration of feature-based models.
    pub fn spam_config(&self) -> Option<&SpamConfig> {
        match &self.body {
            DetectorBody::SpamLinear { cfg, .. } => Some(cfg),
            DetectorBody::Net { spam, .. } => spam.as_ref(),
        }
    }

    pub fn linear(&self) -> Option<&LinearModel> {
        match &self.body {
            DetectorBody::SpamLinear { linear, .. } => Some(linear),
            DetectorBody::Net { .. } => None,
        }
    }

    /// Fingerprint identifying the model parameters.
    pub fn fingerprint(&self) -> String {
        crate::rng::fingerprint(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::json!({
            "threshold": self.threshold,
            "input_dims": self.input_dims,
            "spam": self.spam_config(),
            "scaling": self.scaling(),
        });
        match &self.body {
            DetectorBody::SpamLinear { cfg, linear, .. } => {
                let header = crate::diffnet::ModelHeader {
                    kind: self.kind.as_str().into(),
                    fingerprint: cfg.fingerprint(),
                    layers: Vec::new(),
                    loss: None,
                    meta,
                };
                let mut out = Vec::new();
                crate::diffnet::write_container(&mut out, &header, &[&linear.w, &[linear.b]])
                    .expect("writing to a Vec cannot fail");
                out
            }
            DetectorBody::Net { net, spam, .. } => {
                let fp = spam.as_ref().map(SpamConfig::fingerprint).unwrap_or_default();
                net.to_bytes(self.kind.as_str(), &fp, meta)
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<DetectorModel> {
        let (header, params) = crate::diffnet::read_container(bytes)?;
        let kind = DetectorKind::parse(&header.kind)?;
        let meta = &header.meta;
        let threshold = meta["threshold"].as_f64().unwrap_or(0.0);
        let input_dims: Option<(usize, usize)> = serde_json::from_value(meta["input_dims"].clone())?;
        let spam: Option<SpamConfig> = serde_json::from_value(meta["spam"].clone())?;
        if let Some(cfg) = &spam {
            if cfg.fingerprint() != header.fingerprint {
                return Err(Error::invalid("model fingerprint does not match its feature configuration"));
            }
        }
        let body = match kind {
            DetectorKind::SpamLinear => {
                let cfg = spam.ok_or_else(|| Error::invalid("spam_linear model without feature config"))?;
                let [w, b]: [Vec<f64>; 2] =
                    params.try_into().map_err(|_| Error::invalid("spam_linear model needs two blobs"))?;
                if w.len() != cfg.dimension() || b.len() != 1 {
                    return Err(Error::invalid("spam_linear weights do not match feature dimension"));
                }
                let table = SymmetryTable::build(cfg.t, cfg.cooc_order);
                DetectorBody::SpamLinear { cfg, table, linear: LinearModel { w, b: b[0] } }
            }
            _ => {
                let loss = header.loss.ok_or_else(|| Error::invalid("network model without loss"))?;
                let net = Network::from_parts(header.layers, loss, params)?;
                let scaling = serde_json::from_value(meta["scaling"].clone())?;
                DetectorBody::Net { net, scaling, spam }
            }
        };
        Ok(DetectorModel { kind, threshold, input_dims, body })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<DetectorModel> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        DetectorModel::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// SPAM + linear

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearHyper {
    pub epochs: usize,
    /// L2 regularization strength of the hinge objective.
    pub lambda: f64,
    /// Standardize features before training; folded back into `(w, b)`.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for LinearHyper {
    fn default() -> Self {
        Self { epochs: 40, lambda: 1e-4, standardize: true, seed: 0 }
    }
}

/// Hinge-loss + L2 linear classifier trained by Pegasos-style SGD, with the
/// bias as an extra constant feature. The returned model averages the
/// iterates of the final epoch.
pub fn train_linear(features: &[Vec<f64>], labels: &[u8], hyper: &LinearHyper) -> Result<LinearModel> {
    check_classes(labels)?;
    if features.len() != labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    if !(hyper.lambda > 0.0) || hyper.epochs == 0 {
        return Err(Error::invalid("linear training needs lambda > 0 and epochs > 0"));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::invalid("feature vectors differ in dimension"));
    }
    let n = features.len() as f64;
    let (mean, inv_std) = if hyper.standardize {
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv = var.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        (mean, inv)
    } else {
        (vec![0.0; dim], vec![1.0; dim])
    };
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| f.iter().zip(&mean).zip(&inv_std).map(|((v, m), s)| (v - m) * s).chain([1.0]).collect())
        .collect();

    let mut rng = stream(hyper.seed, "linear-order");
    let mut order: Vec<usize> = (0..z.len()).collect();
    let mut w = vec![0.0; dim + 1];
    let mut avg = vec![0.0; dim + 1];
    let mut t = 0u64;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let last = epoch + 1 == hyper.epochs;
        for &i in &order {
            t += 1;
            let eta = 1.0 / (hyper.lambda * t as f64);
            let y = if labels[i] == 1 { 1.0 } else { -1.0 };
            let margin = y * z[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let shrink = 1.0 - eta * hyper.lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (wv, zv) in w.iter_mut().zip(&z[i]) {
                    *wv += eta * y * zv;
                }
            }
            if last {
                for (a, v) in avg.iter_mut().zip(&w) {
                    *a += v / n;
                }
            }
        }
    }
    if avg.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDiverged { message: "non-finite linear weights".into(), loss_trace: Vec::new() });
    }
    // fold standardization: w·((f-μ)⊙s) + b = (w⊙s)·f + (b - Σ w s μ)
    let weights: Vec<f64> = avg[..dim].iter().zip(&inv_std).map(|(a, s)| a * s).collect();
    let bias = avg[dim] - weights.iter().zip(&mean).map(|(a, m)| a * m).sum::<f64>();
    Ok(LinearModel { w: weights, b: bias })
}

/// SPAM features of every patch.
pub fn extract_features(patches: &[ImagePatch], cfg: &SpamConfig) -> Result<Vec<SpamFeature>> {
    cfg.validate()?;
    let table = SymmetryTable::build(cfg.t, cfg.cooc_order);
    patches.iter().map(|p| extract_spam_with(p, cfg, &table)).collect()
}

pub fn train_spam_linear(train: &TrainSet, cfg: &SpamConfig, hyper: &LinearHyper) -> Result<DetectorModel> {
    train.validate()?;
    let feats: Vec<Vec<f64>> = extract_features(&train.patches, cfg)?.into_iter().map(|f| f.values).collect();
    let linear = train_linear(&feats, &train.labels, hyper)?;
    Ok(spam_linear_model(cfg.clone(), linear, Some(train.patches[0].dims())))
}

pub fn spam_linear_model(cfg: SpamConfig, linear: LinearModel, input_dims: Option<(usize, usize)>) -> DetectorModel {
    let table = SymmetryTable::build(cfg.t, cfg.cooc_order);
    DetectorModel { kind: DetectorKind::SpamLinear, threshold: 0.0, input_dims, body: DetectorBody::SpamLinear { cfg, table, linear } }
}

// ---------------------------------------------------------------------------
// SPAM-equivalent CNN

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CozzMode {
    Hard,
    Soft,
}

pub const DEFAULT_SOFT_TEMPERATURE: f64 = 0.1;

/// Quantization centers in channel order. Larger magnitudes come first so
/// that the lowest-index tie-break rounds half away from zero.
fn center_channels(t: i32) -> Vec<i32> {
    let mut c = Vec::new();
    for m in (1..=t).rev() {
        c.push(-m);
        c.push(m);
    }
    c.push(0);
    c
}

fn cozz_branch(cfg: &SpamConfig, horizontal: bool, mode: CozzMode, temperature: f64) -> Vec<Layer> {
    let n = RESIDUAL_TAPS.len();
    let (kh, kw) = if horizontal { (1, n) } else { (n, 1) };
    let mut res = Conv2d::new(1, 1, kh, kw).frozen();
    for (k, &tap) in RESIDUAL_TAPS.iter().enumerate() {
        res.weight[k] = f64::from(tap);
    }

    let centers = center_channels(cfg.t);
    let nc = centers.len();
    let mut quant = Conv2d::new(1, nc, 1, 1).frozen();
    for (ch, &c) in centers.iter().enumerate() {
        // score c·(r/q) − c²/2 peaks at the nearest center
        quant.weight[ch] = f64::from(c) / cfg.q;
        quant.bias[ch] = -f64::from(c * c) / 2.0;
    }
    let channel_of = |v: i8| centers.iter().position(|&c| c == i32::from(v)).expect("value within -T..=T");

    let order = cfg.cooc_order;
    let patterns = cfg.raw_bins();
    let (ph, pw) = if horizontal { (1, order) } else { (order, 1) };
    let mut pat = Conv2d::new(nc, patterns, ph, pw).frozen();
    for p in 0..patterns {
        for (k, &v) in tuple_of_index(p, cfg.t, order).iter().enumerate() {
            pat.weight[(p * nc + channel_of(v)) * order + k] = 1.0;
        }
    }

    let select = || match mode {
        CozzMode::Hard => Layer::HardmaxChannels,
        CozzMode::Soft => Layer::Softmax { temperature },
    };
    vec![Layer::Conv2d(res), Layer::Conv2d(quant), select(), Layer::Conv2d(pat), select(), Layer::GlobalAvgPool]
}

/// Builds the CNN that computes SPAM features of `(width, height)` patches
/// followed by the linear classifier `(w, b)` trained on `cfg` features.
///
/// Layer 0 yields the per-direction pooled co-occurrence histograms, layer 1
/// the (symmetrized) L1-normalized feature vector.
pub fn build_cozznet(
    cfg: &SpamConfig,
    linear: &LinearModel,
    mode: CozzMode,
    temperature: f64,
    dims: (usize, usize),
) -> Result<DetectorModel> {
    cfg.validate()?;
    let dim = cfg.dimension();
    if linear.w.len() != dim {
        return Err(Error::invalid(format!("linear weights have {} entries, features have {dim}", linear.w.len())));
    }
    if mode == CozzMode::Soft && !(temperature > 0.0) {
        return Err(Error::invalid("soft temperature must be > 0"));
    }
    let (w, h) = dims;
    let span = RESIDUAL_TAPS.len() - 1 + cfg.cooc_order - 1;
    if w <= span || h <= span {
        return Err(Error::invalid(format!("patch {w}x{h} too small for the feature network")));
    }
    let sites_h = ((w - span) * h) as f64;
    let sites_v = (w * (h - span)) as f64;
    let total = sites_h + sites_v;

    let raw = cfg.raw_bins();
    let table = SymmetryTable::build(cfg.t, cfg.cooc_order);
    let per_dir = dim / 2;
    let mut sym = Dense::new(2 * raw, dim).frozen();
    for (d, sites) in [sites_h, sites_v].into_iter().enumerate() {
        let scale = match cfg.normalization {
            Normalization::None => sites,
            _ => sites / total,
        };
        for bin in 0..raw {
            let class = if cfg.symmetrize { table.class_of[bin] } else { bin };
            sym.weight[(d * per_dir + class) * 2 * raw + d * raw + bin] = scale;
        }
    }
    let mut head = Dense::new(dim, 1);
    head.weight.copy_from_slice(&linear.w);
    head.bias[0] = linear.b;

    let mut layers = vec![
        Layer::Parallel {
            branches: vec![cozz_branch(cfg, true, mode, temperature), cozz_branch(cfg, false, mode, temperature)],
        },
        Layer::FullyConnected(sym),
    ];
    if cfg.normalization == Normalization::L2 {
        layers.push(Layer::L2Normalize);
    }
    layers.push(Layer::FullyConnected(head));
    let kind = match mode {
        CozzMode::Hard => DetectorKind::CozzNetHard,
        CozzMode::Soft => DetectorKind::CozzNetSoft,
    };
    Ok(DetectorModel {
        kind,
        threshold: 0.0,
        input_dims: Some(dims),
        body: DetectorBody::Net {
            net: Network::new(layers, LossKind::SoftmaxCrossEntropy),
            scaling: InputScaling::IDENTITY,
            spam: Some(cfg.clone()),
        },
    })
}

/// Converts a trained `spam_linear` model into the equivalent network.
pub fn cozznet_from_spam(model: &DetectorModel, mode: CozzMode, temperature: f64) -> Result<DetectorModel> {
    match (&model.body, model.input_dims) {
        (DetectorBody::SpamLinear { cfg, linear, .. }, Some(dims)) => {
            let mut m = build_cozznet(cfg, linear, mode, temperature, dims)?;
            m.threshold = model.threshold;
            Ok(m)
        }
        (DetectorBody::SpamLinear { .. }, None) => Err(Error::invalid("spam_linear model has no fixed input size")),
        _ => Err(Error::invalid("expected a spam_linear model")),
    }
}

/// Rebuilds a feature network for another patch size, keeping its current
/// classifier head (which may have been fine-tuned).
pub fn cozznet_with_dims(model: &DetectorModel, dims: (usize, usize)) -> Result<DetectorModel> {
    let net = cozz_net(model)?;
    let cfg = model.spam_config().ok_or_else(|| Error::invalid("model has no feature config"))?;
    let Some(Layer::FullyConnected(head)) = net.layers.last() else {
        return Err(Error::invalid("feature network has no classifier head"));
    };
    let linear = LinearModel { w: head.weight.clone(), b: head.bias[0] };
    let (mode, temperature) = match model.kind {
        DetectorKind::CozzNetHard => (CozzMode::Hard, DEFAULT_SOFT_TEMPERATURE),
        _ => (CozzMode::Soft, soft_temperature(net).unwrap_or(DEFAULT_SOFT_TEMPERATURE)),
    };
    let mut out = build_cozznet(cfg, &linear, mode, temperature, dims)?;
    out.threshold = model.threshold;
    Ok(out)
}

fn soft_temperature(net: &Network) -> Option<f64> {
    let Some(Layer::Parallel { branches }) = net.layers.first() else { return None };
    branches.iter().flatten().find_map(|l| match l {
        Layer::Softmax { temperature } => Some(*temperature),
        _ => None,
    })
}

fn cozz_net(model: &DetectorModel) -> Result<&Network> {
    match (model.kind, &model.body) {
        (DetectorKind::CozzNetHard | DetectorKind::CozzNetSoft, DetectorBody::Net { net, .. }) => Ok(net),
        _ => Err(Error::invalid(format!("{} is not a feature network", model.kind))),
    }
}

/// Pooled per-direction co-occurrence histograms (horizontal bins, then
/// vertical), each summing to 1.
pub fn cozz_histogram(model: &DetectorModel, x: &ImagePatch) -> Result<Vec<f64>> {
    model.check_dims(x)?;
    Ok(cozz_net(model)?.forward_prefix(&InputScaling::IDENTITY.tensor(x), 1)?.into_data())
}

/// Feature vector produced by the network before the classifier. With an L2
/// configuration this is the L1-normalized vector that precedes the L2 step.
pub fn cozz_features(model: &DetectorModel, x: &ImagePatch) -> Result<Vec<f64>> {
    model.check_dims(x)?;
    Ok(cozz_net(model)?.forward_prefix(&InputScaling::IDENTITY.tensor(x), 2)?.into_data())
}

/// Raw co-occurrence counts recovered from the pooled network histogram.
pub fn cozz_counts(model: &DetectorModel, x: &ImagePatch) -> Result<Vec<u64>> {
    let cfg = model.spam_config().ok_or_else(|| Error::invalid("model has no feature config"))?;
    let hist = cozz_histogram(model, x)?;
    let raw = cfg.raw_bins();
    let pair = histograms(x, cfg)?;
    let sites = [pair.horizontal.total as f64, pair.vertical.total as f64];
    Ok(hist.iter().enumerate().map(|(i, v)| (v * sites[i / raw]).round() as u64).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetHyper {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    /// Fraction of the training set held out for snapshot selection.
    pub val_fraction: f64,
    /// Rescales each batch gradient to at most this Euclidean norm (0 disables).
    pub grad_clip: f64,
    /// Learning-rate multiplier of the constrained first layer.
    pub constrained_lr_scale: f64,
    pub seed: u64,
}

impl Default for NetHyper {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            lr_decay: 0.8,
            val_fraction: 0.1,
            grad_clip: 1.0,
            constrained_lr_scale: 0.1,
            seed: 0,
        }
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    pub best_epoch: usize,
    /// Whether the first-layer constraint held at each epoch checkpoint.
    pub constraint_ok: Vec<bool>,
}

/// Fine-tunes a soft feature network by backpropagation. Only layers marked
/// trainable are updated (by default the final classifier).
pub fn finetune_cozznet(model: &DetectorModel, train: &TrainSet, hyper: &NetHyper) -> Result<DetectorModel> {
    if model.kind != DetectorKind::CozzNetSoft {
        return Err(Error::invalid("only the soft feature network can be fine-tuned"));
    }
    let (m, _) = train_network(model.clone(), train, hyper, None::<&mut rand_chacha::ChaCha8Rng>)?;
    Ok(m)
}

// ---------------------------------------------------------------------------
// Constrained CNN

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BayarArch {
    pub constrained_filters: usize,
    pub constrained_kernel: usize,
    pub conv2: usize,
    pub conv3: usize,
    pub fc1: usize,
    pub fc2: usize,
    /// Network input is `(x - input_offset) * input_scale`.
    pub input_offset: f64,
    pub input_scale: f64,
}

impl Default for BayarArch {
    fn default() -> Self {
        Self { constrained_filters: 8, constrained_kernel: 5, conv2: 16, conv3: 16, fc1: 64, fc2: 32, input_offset: 128.0, input_scale: 1.0 / 16.0 }
    }
}

pub fn build_bayar<R: Rng>(arch: &BayarArch, rng: &mut R) -> Result<Network> {
    if arch.constrained_kernel % 2 == 0 || arch.constrained_filters == 0 {
        return Err(Error::invalid("constrained layer needs an odd kernel and at least one filter"));
    }
    let k = arch.constrained_kernel;
    let mut c1 = Conv2d::new(1, arch.constrained_filters, k, k);
    init_constrained(&mut c1, rng, None)?;
    Ok(Network::new(
        vec![
            Layer::Conv2d(c1),
            Layer::MaxPool { size: 2, stride: 2 },
            Layer::Conv2d(Conv2d::new(arch.constrained_filters, arch.conv2, 3, 3).init_he(rng)),
            Layer::Relu,
            Layer::MaxPool { size: 2, stride: 2 },
            Layer::Conv2d(Conv2d::new(arch.conv2, arch.conv3, 3, 3).init_he(rng)),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::FullyConnected(Dense::new(arch.conv3, arch.fc1).init_he(rng)),
            Layer::Relu,
            Layer::FullyConnected(Dense::new(arch.fc1, arch.fc2).init_he(rng)),
            Layer::Relu,
            Layer::FullyConnected(Dense::new(arch.fc2, 2).init_he(rng)),
        ],
        LossKind::SoftmaxCrossEntropy,
    ))
}

/// Random off-center taps projected onto the constraint. Only the filters
/// listed in `only` are touched when given.
fn init_constrained<R: Rng>(conv: &mut Conv2d, rng: &mut R, only: Option<&[usize]>) -> Result<()> {
    let ksz = conv.kernel_h * conv.kernel_w;
    let filters: Vec<usize> = match only {
        Some(f) => f.to_vec(),
        None => (0..conv.weight.len() / ksz).collect(),
    };
    for _ in 0..100 {
        for &f in &filters {
            for v in &mut conv.weight[f * ksz..(f + 1) * ksz] {
                *v = rng.random_range(0.0..1.0);
            }
        }
        if project_bayar_layer(conv)?.is_empty() {
            return Ok(());
        }
    }
    Err(Error::DegenerateKernel(0.0))
}

fn constrained_layer(net: &mut Network) -> Option<&mut Conv2d> {
    match net.layers.first_mut() {
        Some(Layer::Conv2d(c)) => Some(c),
        _ => None,
    }
}

/// True when every first-layer filter has center exactly -1 and off-center
/// taps summing to 1 within `tol`.
pub fn bayar_constraint_holds(net: &Network, tol: f64) -> bool {
    let Some(Layer::Conv2d(c)) = net.layers.first() else { return false };
    let ksz = c.kernel_h * c.kernel_w;
    let center = (c.kernel_h / 2) * c.kernel_w + c.kernel_w / 2;
    c.weight.chunks(ksz).all(|f| {
        let off: f64 = f.iter().enumerate().filter(|&(i, _)| i != center).map(|(_, v)| v).sum();
        f[center] == -1.0 && (off - 1.0).abs() <= tol
    })
}

pub fn train_bayar(train: &TrainSet, arch: &BayarArch, hyper: &NetHyper) -> Result<DetectorModel> {
    train_bayar_logged(train, arch, hyper).map(|(m, _)| m)
}

pub fn train_bayar_logged(train: &TrainSet, arch: &BayarArch, hyper: &NetHyper) -> Result<(DetectorModel, TrainLog)> {
    train.validate()?;
    let mut rng = stream(hyper.seed, "bayar-init");
    let net = build_bayar(arch, &mut rng)?;
    let model = DetectorModel {
        kind: DetectorKind::BayarNet,
        threshold: 0.0,
        input_dims: Some(train.patches[0].dims()),
        body: DetectorBody::Net { net, scaling: InputScaling { offset: arch.input_offset, scale: arch.input_scale }, spam: None },
    };
    train_network(model, train, hyper, Some(&mut rng))
}

/// Minibatch momentum SGD with a held-out validation split; returns the
/// snapshot with the best validation accuracy. When `constrained` is given
/// the first layer is re-projected after every step, reinitializing
/// degenerate filters from that generator.
fn train_network<R: Rng>(
    mut model: DetectorModel,
    train: &TrainSet,
    hyper: &NetHyper,
    mut constrained: Option<&mut R>,
) -> Result<(DetectorModel, TrainLog)> {
    train.validate()?;
    if hyper.epochs == 0 || hyper.batch_size == 0 {
        return Err(Error::invalid("training needs epochs > 0 and batch_size > 0"));
    }
    let dims = train.patches[0].dims();
    if train.patches.iter().any(|p| p.dims() != dims) {
        return Err(Error::invalid("training patches must share one size"));
    }
    let scaling = model.scaling();

    let mut split_rng = stream(hyper.seed, "validation-split");
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut split_rng);
    let n_val = ((train.len() as f64) * hyper.val_fraction.clamp(0.0, 0.5)).round() as usize;
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut log = TrainLog::default();
    let mut best: Option<(f64, DetectorModel)> = None;
    let mut sgd = SgdState::new();
    let mut lr = hyper.lr;
    let mut order_rng = stream(hyper.seed, "epoch-order");
    let mut trace = Vec::new();
    for epoch in 0..hyper.epochs {
        train_idx.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(hyper.batch_size) {
            let net = model.network_mut().expect("network model");
            let mut grads: Grads = net.zero_grads();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (out, cache) = net.forward_cached(&scaling.tensor(&train.patches[i]))?;
                let (loss, dy) = net.loss_and_grad(&out, usize::from(train.labels[i]));
                batch_loss += loss;
                net.backward_into(&cache, &dy, &mut grads, false)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            if hyper.grad_clip > 0.0 {
                let norm = grads.norm();
                if norm > hyper.grad_clip {
                    grads.scale(hyper.grad_clip / norm);
                }
            }
            if constrained.is_some() {
                // weight and bias of the first layer
                for g in grads.0.iter_mut().take(2) {
                    g.iter_mut().for_each(|v| *v *= hyper.constrained_lr_scale);
                }
            }
            trace.push(batch_loss / batch.len() as f64);
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { message: format!("non-finite loss in epoch {epoch}"), loss_trace: trace });
            }
            if let Err(Error::TrainingDiverged { message, .. }) = sgd.step(net, &grads, lr, hyper.momentum) {
                return Err(Error::TrainingDiverged { message, loss_trace: trace });
            }
            if let Some(rng) = constrained.as_deref_mut() {
                let conv = constrained_layer(net).ok_or_else(|| Error::invalid("first layer is not a convolution"))?;
                let degenerate = project_bayar_layer(conv)?;
                if !degenerate.is_empty() {
                    init_constrained(conv, rng, Some(&degenerate))?;
                }
            }
            epoch_loss += batch_loss;
        }
        lr *= hyper.lr_decay;
        log.epoch_loss.push(epoch_loss / train_idx.len().max(1) as f64);
        let net = model.network().expect("network model");
        log.constraint_ok.push(constrained.is_none() || bayar_constraint_holds(net, 1e-12));
        let eval_idx: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };
        let mut correct = 0usize;
        for &i in eval_idx {
            correct += usize::from(model.predict(&train.patches[i])? == train.labels[i]);
        }
        let acc = correct as f64 / eval_idx.len() as f64;
        log.val_accuracy.push(acc);
        log::debug!("{} epoch {epoch}: loss {:.4} val acc {acc:.4}", model.kind, log.epoch_loss[epoch]);
        if best.as_ref().is_none_or(|(a, _)| acc > *a) {
            best = Some((acc, model.clone()));
            log.best_epoch = epoch;
        }
    }
    let (_, best) = best.expect("at least one epoch");
    Ok((best, log))
}

/// Fraction of patches whose predicted label matches.
pub fn accuracy(model: &DetectorModel, patches: &[ImagePatch], labels: &[u8]) -> Result<f64> {
    let mut correct = 0usize;
    for (p, &l) in patches.iter().zip(labels) {
        correct += usize::from(model.predict(p)? == l);
    }
    Ok(correct as f64 / patches.len().max(1) as f64)
}

/// Class index used for attacks that push toward "pristine".
pub const MANIPULATED_LABEL: u8 = MANIPULATED as u8;
