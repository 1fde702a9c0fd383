//! Residual restoration network trained against a differentiable detector.
//!
//! The generator maps a manipulated patch (gray levels / 255) to a restored
//! one through a global skip connection, so zeroed residual branches give
//! the identity. Its loss mixes an adversarial term (push a discriminator
//! toward "pristine"), pixel MSE to the pristine pair and MSE between fixed
//! high-pass residual maps. The discriminator starts as a copy of the target
//! detector and only its final layer is updated.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::{cozznet_with_dims, DetectorKind, DetectorModel};
use crate::diffnet::{Conv2d, Grads, Layer, LossKind, Network, SgdState, Tensor, MANIPULATED, PRISTINE};
use crate::error::{Error, Result};
use crate::imaging::ImagePatch;
use crate::rng::stream;
use crate::spamfeat::RESIDUAL_TAPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestorerHyper {
    pub channels: usize,
    pub blocks: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Side of the random square crops used for training; 0 uses whole patches.
    pub crop: usize,
    pub lambda_adv: f64,
    pub lambda_pix: f64,
    pub lambda_feat: f64,
    /// Generator batches per discriminator update.
    pub disc_ratio: usize,
    pub disc_lr: f64,
    /// Rescales each generator batch gradient to at most this norm (0 disables).
    pub grad_clip: f64,
    /// Record the full-patch training MSE after every epoch.
    pub track_train_mse: bool,
    pub seed: u64,
}

impl Default for RestorerHyper {
    fn default() -> Self {
        Self {
            channels: 16,
            blocks: 4,
            epochs: 3,
            lr: 0.002,
            momentum: 0.9,
            batch_size: 8,
            crop: 32,
            lambda_adv: 1.0,
            lambda_pix: 10.0,
            lambda_feat: 1.0,
            disc_ratio: 1,
            disc_lr: 0.01,
            grad_clip: 1.0,
            track_train_mse: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RestorerLog {
    /// Mean generator loss per epoch.
    pub gen_loss: Vec<f64>,
    pub disc_loss: Vec<f64>,
    /// Full-patch pixel MSE (in [0,1] units) after each epoch, when tracked.
    pub train_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Restorer {
    pub net: Network,
}

impl Restorer {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.net.to_bytes("restorer", "", serde_json::Value::Null)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Restorer> {
        let (net, header) = Network::from_bytes(bytes)?;
        if header.kind != "restorer" {
            return Err(Error::invalid(format!("expected a restorer model, got '{}'", header.kind)));
        }
        Ok(Restorer { net })
    }

    /// Restored gray levels before rounding.
    fn forward_values(&self, x: &ImagePatch) -> Result<Vec<f64>> {
        let t = to_unit(x);
        Ok(self.net.forward(&t)?.into_data().into_iter().map(|v| v * 255.0).collect())
    }
}

fn to_unit(x: &ImagePatch) -> Tensor {
    Tensor::new(vec![1, x.height(), x.width()], x.pixels().iter().map(|&p| f64::from(p) / 255.0).collect())
        .expect("patch dims")
}

/// Stem, `blocks` residual blocks and a head, wrapped in a global skip. The
/// last convolution of every residual branch starts at zero, so the initial
/// network is the identity.
pub fn build_restorer<R: Rng>(channels: usize, blocks: usize, rng: &mut R) -> Result<Restorer> {
    if channels == 0 {
        return Err(Error::invalid("restorer needs at least one channel"));
    }
    let mut body = vec![Layer::Conv2d(Conv2d::new(1, channels, 3, 3).with_padding(1).init_he(rng)), Layer::Relu];
    for _ in 0..blocks {
        body.push(Layer::Residual {
            layers: vec![
                Layer::Conv2d(Conv2d::new(channels, channels, 3, 3).with_padding(1).init_he(rng)),
                Layer::Relu,
                Layer::Conv2d(Conv2d::new(channels, channels, 3, 3).with_padding(1)),
            ],
        });
    }
    body.push(Layer::Conv2d(Conv2d::new(channels, 1, 3, 3).with_padding(1)));
    Ok(Restorer { net: Network::new(vec![Layer::Residual { layers: body }], LossKind::SoftmaxCrossEntropy) })
}

/// Applies the restorer and rounds to valid gray levels.
pub fn restore(restorer: &Restorer, x: &ImagePatch) -> Result<ImagePatch> {
    if x.width() == 0 || x.height() == 0 {
        return Err(Error::invalid("cannot restore an empty patch"));
    }
    let v = restorer.forward_values(x)?;
    ImagePatch::from_f64(x.width(), x.height(), &v)
}

/// Fixed horizontal and vertical third-order residual maps.
fn feature_net() -> Network {
    let n = RESIDUAL_TAPS.len();
    let mut h = Conv2d::new(1, 1, 1, n).frozen();
    let mut v = Conv2d::new(1, 1, n, 1).frozen();
    for (k, &t) in RESIDUAL_TAPS.iter().enumerate() {
        h.weight[k] = f64::from(t);
        v.weight[k] = f64::from(t);
    }
    Network::new(
        vec![Layer::Parallel { branches: vec![vec![Layer::Conv2d(h)], vec![Layer::Conv2d(v)]] }],
        LossKind::SoftmaxCrossEntropy,
    )
}

fn discriminator(detector: &DetectorModel, dims: (usize, usize)) -> Result<DetectorModel> {
    let mut d = match detector.kind {
        DetectorKind::CozzNetSoft => cozznet_with_dims(detector, dims)?,
        DetectorKind::BayarNet => {
            let mut d = detector.clone();
            d.input_dims = Some(dims);
            d
        }
        k => return Err(Error::UnsupportedTarget(format!("{k} is not differentiable"))),
    };
    let net = d.network_mut().expect("network detector");
    let last_fc = net.layers.iter().rposition(|l| matches!(l, Layer::FullyConnected(_)));
    for (k, layer) in net.layers.iter_mut().enumerate() {
        set_trainable(layer, Some(k) == last_fc);
    }
    Ok(d)
}

fn set_trainable(l: &mut Layer, on: bool) {
    match l {
        Layer::Conv2d(c) => c.trainable = on,
        Layer::FullyConnected(d) => d.trainable = on,
        Layer::Residual { layers } => layers.iter_mut().for_each(|x| set_trainable(x, on)),
        Layer::Parallel { branches } => branches.iter_mut().flatten().for_each(|x| set_trainable(x, on)),
        _ => {}
    }
}

fn crop_pair(
    m: &ImagePatch,
    p: &ImagePatch,
    crop: usize,
    rng: &mut impl Rng,
) -> Result<(ImagePatch, ImagePatch)> {
    let (w, h) = m.dims();
    if crop == 0 || (crop >= w && crop >= h) {
        return Ok((m.clone(), p.clone()));
    }
    let (cw, ch) = (crop.min(w), crop.min(h));
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    Ok((m.crop(top, left, cw, ch)?, p.crop(top, left, cw, ch)?))
}

/// Trains a restorer on aligned `(manipulated, pristine)` pairs.
pub fn train_restorer(
    detector: &DetectorModel,
    pairs: &[(ImagePatch, ImagePatch)],
    hyper: &RestorerHyper,
) -> Result<(Restorer, RestorerLog)> {
    if pairs.is_empty() {
        return Err(Error::invalid("restorer training needs at least one pair"));
    }
    if pairs.iter().any(|(m, p)| m.dims() != p.dims()) {
        return Err(Error::invalid("restorer pairs must be aligned"));
    }
    if hyper.epochs == 0 || hyper.batch_size == 0 || !(hyper.lr > 0.0) {
        return Err(Error::invalid("restorer training needs epochs, batch_size and lr > 0"));
    }
    let dims0 = pairs[0].0.dims();
    let crop_dims = if hyper.crop == 0 { dims0 } else { (hyper.crop.min(dims0.0), hyper.crop.min(dims0.1)) };
    let use_adv = hyper.lambda_adv != 0.0;
    let mut disc = if use_adv { Some(discriminator(detector, crop_dims)?) } else { None };
    let fnet = feature_net();

    let mut init_rng = stream(hyper.seed, "restorer-init");
    let mut gen = build_restorer(hyper.channels, hyper.blocks, &mut init_rng)?;
    let mut order_rng = stream(hyper.seed, "restorer-order");
    let mut crop_rng = stream(hyper.seed, "restorer-crops");
    let mut gsgd = SgdState::new();
    let mut dsgd = SgdState::new();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = RestorerLog::default();
    let mut trace = Vec::new();

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut order_rng);
        let mut gen_total = 0.0;
        let mut disc_total = 0.0;
        for (bi, batch) in order.chunks(hyper.batch_size).enumerate() {
            let mut grads: Grads = gen.net.zero_grads();
            let mut crops = Vec::with_capacity(batch.len());
            let mut batch_loss = 0.0;
            for &k in batch {
                let (m, p) = crop_pair(&pairs[k].0, &pairs[k].1, hyper.crop, &mut crop_rng)?;
                let xin = to_unit(&m);
                let pt = to_unit(&p);
                let (y, cache) = gen.net.forward_cached(&xin)?;
                let n = y.len() as f64;
                let mut dy = vec![0.0; y.len()];
                let mut loss = 0.0;

                let mut pix = 0.0;
                for ((d, a), b) in dy.iter_mut().zip(y.data()).zip(pt.data()) {
                    pix += (a - b) * (a - b) / n;
                    *d += hyper.lambda_pix * 2.0 * (a - b) / n;
                }
                loss += hyper.lambda_pix * pix;

                if hyper.lambda_feat != 0.0 {
                    let (fy, fcache) = fnet.forward_cached(&y)?;
                    let fp = fnet.forward(&pt)?;
                    let nf = fy.len() as f64;
                    let diff: Vec<f64> = fy.data().iter().zip(fp.data()).map(|(a, b)| a - b).collect();
                    loss += hyper.lambda_feat * diff.iter().map(|d| d * d).sum::<f64>() / nf;
                    let up = Tensor::new(fy.shape().to_vec(), diff.iter().map(|d| 2.0 * d / nf).collect())?;
                    let g = fnet.input_backward(&fcache, &up)?;
                    for (d, gv) in dy.iter_mut().zip(g.data()) {
                        *d += hyper.lambda_feat * gv;
                    }
                }

                if let Some(dm) = disc.as_ref() {
                    let net = dm.network().expect("network detector");
                    let sc = dm.scaling();
                    let gray: Vec<f64> = y.data().iter().map(|v| v * 255.0).collect();
                    let (out, dcache) = net.forward_cached(&sc.tensor_from_values(&gray, m.width(), m.height()))?;
                    let (adv, dz) = net.loss_and_grad(&out, PRISTINE);
                    loss += hyper.lambda_adv * adv;
                    let g = net.input_backward(&dcache, &dz)?;
                    for (d, gv) in dy.iter_mut().zip(g.data()) {
                        *d += hyper.lambda_adv * gv * sc.scale * 255.0;
                    }
                }

                let up = Tensor::new(y.shape().to_vec(), dy)?;
                gen.net.backward_into(&cache, &up, &mut grads, false)?;
                batch_loss += loss;
                crops.push((y, p));
            }
            trace.push(batch_loss / batch.len() as f64);
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged { message: format!("restorer loss in epoch {epoch}"), loss_trace: trace });
            }
            grads.scale(1.0 / batch.len() as f64);
            let norm = grads.norm();
            if hyper.grad_clip > 0.0 && norm > hyper.grad_clip {
                grads.scale(hyper.grad_clip / norm);
            }
            if let Err(Error::TrainingDiverged { message, .. }) = gsgd.step(&mut gen.net, &grads, hyper.lr, hyper.momentum) {
                return Err(Error::TrainingDiverged { message, loss_trace: trace });
            }
            gen_total += batch_loss;

            if let Some(dm) = disc.as_mut() {
                if hyper.disc_ratio > 0 && (bi + 1) % hyper.disc_ratio == 0 {
                    disc_total += disc_step(dm, &crops, &mut dsgd, hyper)?;
                }
            }
        }
        log.gen_loss.push(gen_total / pairs.len() as f64);
        log.disc_loss.push(disc_total / pairs.len() as f64);
        if hyper.track_train_mse {
            let mut total = 0.0;
            for (m, p) in pairs {
                let y = gen.net.forward(&to_unit(m))?;
                let pt = to_unit(p);
                total += y.data().iter().zip(pt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
            }
            log.train_mse.push(total / pairs.len() as f64);
        }
        log::debug!("restorer epoch {epoch}: gen {:.5}", log.gen_loss[epoch]);
    }
    Ok((gen, log))
}

/// One discriminator update: restored crops are "manipulated", their
/// pristine counterparts "pristine".
fn disc_step(
    dm: &mut DetectorModel,
    crops: &[(Tensor, ImagePatch)],
    sgd: &mut SgdState,
    hyper: &RestorerHyper,
) -> Result<f64> {
    let sc = dm.scaling();
    let net = dm.network_mut().expect("network detector");
    let mut grads = net.zero_grads();
    let mut total = 0.0;
    for (y, p) in crops {
        let (w, h) = p.dims();
        let gray: Vec<f64> = y.data().iter().map(|v| (v * 255.0).clamp(0.0, 255.0)).collect();
        for (input, label) in [(sc.tensor_from_values(&gray, w, h), MANIPULATED), (sc.tensor(p), PRISTINE)] {
            let (out, cache) = net.forward_cached(&input)?;
            let (loss, dz) = net.loss_and_grad(&out, label);
            total += loss;
            net.backward_into(&cache, &dz, &mut grads, false)?;
        }
    }
    grads.scale(1.0 / (2 * crops.len()) as f64);
    sgd.step(net, &grads, hyper.disc_lr, hyper.momentum)?;
    Ok(total / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_at_init() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let r = build_restorer(4, 2, &mut rng).unwrap();
        let x = ImagePatch::from_fn(9, 7, |i, j| ((i * 31 + j * 17) % 256) as u8);
        assert_eq!(restore(&r, &x).unwrap(), x);
        let back = Restorer::from_bytes(&r.to_bytes()).unwrap();
        assert_eq!(back, r);
    }
}
