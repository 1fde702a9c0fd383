//! Counter-forensic attacks: gradient-sign noise (FGSM, PGD), the greedy
//! feature-space attack against SPAM detectors, and a residual restoration
//! network trained adversarially.
//!
//! Attacks never modify their input; every result carries the adversarial
//! patch and its PSNR against the attacked original.

mod icm;
mod restorer;

pub use icm::{icm_attack, icm_attack_with, IcmStrategy};
pub use restorer::{build_restorer, restore, train_restorer, Restorer, RestorerHyper, RestorerLog};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detectors::{DetectorModel, MANIPULATED_LABEL};
use crate::error::{Error, Result};
use crate::imaging::{psnr, ImagePatch, Psnr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcmMode {
    /// Move the features toward a given pristine feature vector.
    RestorePristine,
    /// Push the detector score below its threshold.
    CrossBoundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// ℓ∞ radius in gray levels.
    pub epsilon: u32,
    pub pgd_steps: usize,
    /// Gray levels per PGD step.
    pub pgd_alpha: u32,
    pub icm_mode: IcmMode,
    pub icm_deltas: Vec<i32>,
    /// Largest allowed MSE between the adversarial patch and the original.
    pub distortion_t: f64,
    pub max_sweeps: usize,
    /// Extra distance past the decision threshold in cross-boundary mode.
    pub margin: f64,
    /// Restore mode stops once the squared feature distance is at or below this.
    pub objective_tol: f64,
    /// Seed of the site visiting order.
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 1,
            pgd_steps: 10,
            pgd_alpha: 1,
            icm_mode: IcmMode::CrossBoundary,
            icm_deltas: vec![-1, 1],
            // MSE 6.5 keeps PSNR above 40 dB
            distortion_t: 6.5,
            max_sweeps: 20,
            margin: 0.01,
            objective_tol: 1e-8,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 1 {
            return Err(Error::invalid("epsilon must be an integer >= 1"));
        }
        if self.pgd_steps < 1 || self.pgd_alpha < 1 {
            return Err(Error::invalid("pgd needs steps >= 1 and alpha >= 1"));
        }
        if !(self.distortion_t > 0.0) {
            return Err(Error::invalid("distortion_t must be > 0"));
        }
        if self.icm_deltas.is_empty() || self.icm_deltas.contains(&0) {
            return Err(Error::invalid("icm_deltas must be non-empty and non-zero"));
        }
        if !(self.margin >= 0.0) || !(self.objective_tol >= 0.0) {
            return Err(Error::invalid("margin and objective_tol must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: ImagePatch,
    /// The target now labels the patch pristine.
    pub success: bool,
    pub psnr_db: Psnr,
    pub sweeps_or_steps: usize,
    pub objective_trace: Vec<f64>,
}

fn finish(model: &DetectorModel, x0: &ImagePatch, adversarial: ImagePatch, steps: usize, trace: Vec<f64>) -> Result<AttackResult> {
    let success = model.predict(&adversarial)? == 0;
    let psnr_db = psnr(x0, &adversarial)?;
    Ok(AttackResult { adversarial, success, psnr_db, sweeps_or_steps: steps, objective_trace: trace })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One gradient-sign step of `eps` gray levels away from the "manipulated"
/// class. Zero-gradient pixels stay unchanged.
pub fn fgsm(model: &DetectorModel, x0: &ImagePatch, eps: u32) -> Result<AttackResult> {
    let cfg = AttackConfig { epsilon: eps, pgd_steps: 1, pgd_alpha: eps, ..AttackConfig::default() };
    pgd(model, x0, &cfg)
}

/// Iterated gradient-sign steps projected onto the ℓ∞ ball of radius
/// `epsilon`, stopping early once the rounded patch is labelled pristine.
pub fn pgd(model: &DetectorModel, x0: &ImagePatch, cfg: &AttackConfig) -> Result<AttackResult> {
    cfg.validate()?;
    if !model.kind.is_differentiable() {
        return Err(Error::UnsupportedTarget(format!("{} has no input gradient; use the ICM attack", model.kind)));
    }
    let (w, h) = x0.dims();
    let base = x0.to_f64();
    let eps = f64::from(cfg.epsilon);
    let alpha = f64::from(cfg.pgd_alpha);
    let mut x = base.clone();
    let mut trace = Vec::with_capacity(cfg.pgd_steps);
    let mut steps = 0;
    for _ in 0..cfg.pgd_steps {
        let g = model.input_gradient_values(&x, w, h, MANIPULATED_LABEL)?;
        for ((v, b), gv) in x.iter_mut().zip(&base).zip(&g) {
            let stepped = (*v + alpha * sign(*gv)).clamp(0.0, 255.0);
            *v = stepped.clamp(b - eps, b + eps);
        }
        steps += 1;
        let s = model.score_values(&x.iter().map(|v| v.round()).collect::<Vec<_>>(), w, h)?;
        trace.push(s);
        if s <= model.threshold {
            break;
        }
    }
    let adversarial = ImagePatch::from_f64(w, h, &x)?;
    finish(model, x0, adversarial, steps, trace)
}

/// Restores `x0` with a trained restorer and scores the result with `model`.
pub fn restore_attack(model: &DetectorModel, restorer: &Restorer, x0: &ImagePatch) -> Result<AttackResult> {
    let adversarial = restore(restorer, x0)?;
    finish(model, x0, adversarial, 1, Vec::new())
}

/// One JSON-lines record per attacked patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackLogRecord {
    pub id: String,
    pub task: String,
    pub target: String,
    pub attack: String,
    pub success: bool,
    pub psnr_db: Psnr,
    pub sweeps_or_steps: usize,
    /// SHA-256 prefix of the adversarial PGM bytes.
    pub sha: String,
}

pub fn write_attack_log<W: Write>(mut out: W, records: &[AttackLogRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<attack log>", e))?;
    }
    Ok(())
}

pub fn read_attack_log(text: &str) -> Result<Vec<AttackLogRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{DetectorBody, DetectorKind, InputScaling};
    use crate::diffnet::{Dense, Layer, LossKind, Network};

    fn linear_net_model(w: usize, h: usize, weights: Vec<f64>, b: f64) -> DetectorModel {
        let mut d = Dense::new(w * h, 1);
        d.weight = weights;
        d.bias[0] = b;
        DetectorModel {
            kind: DetectorKind::BayarNet,
            threshold: 0.0,
            input_dims: Some((w, h)),
            body: DetectorBody::Net {
                net: Network::new(vec![Layer::FullyConnected(d)], LossKind::SoftmaxCrossEntropy),
                scaling: InputScaling::IDENTITY,
                spam: None,
            },
        }
    }

    #[test]
    fn fgsm_eps1_full_sign_gives_mse_one() {
        let (w, h) = (8, 8);
        let weights: Vec<f64> = (0..64).map(|i| if i % 3 == 0 { 0.5 } else { -0.25 }).collect();
        let model = linear_net_model(w, h, weights, 100.0);
        let x0 = ImagePatch::from_fn(w, h, |i, j| (50 + i * 10 + j) as u8);
        let r = fgsm(&model, &x0, 1).unwrap();
        assert_eq!(r.psnr_db, Psnr::from_mse(1.0));
        assert!((r.psnr_db.db() - 48.13).abs() < 0.01);
        for (a, b) in r.adversarial.pixels().iter().zip(x0.pixels()) {
            assert_eq!((i32::from(*a) - i32::from(*b)).abs(), 1);
        }
    }

    #[test]
    fn fgsm_zero_gradient_leaves_patch() {
        let model = linear_net_model(4, 4, vec![0.0; 16], 5.0);
        let x0 = ImagePatch::filled(4, 4, 255);
        let r = fgsm(&model, &x0, 1).unwrap();
        assert_eq!(r.adversarial, x0);
        assert!(!r.success);
        assert_eq!(r.psnr_db, Psnr::Infinite);
    }

    #[test]
    fn fgsm_equals_single_step_pgd() {
        let weights: Vec<f64> = (0..36).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let model = linear_net_model(6, 6, weights, 3.0);
        let x0 = ImagePatch::from_fn(6, 6, |i, j| ((i * 97 + j * 31) % 256) as u8);
        for eps in [1, 2, 5] {
            let a = fgsm(&model, &x0, eps).unwrap();
            let cfg = AttackConfig { epsilon: eps, pgd_steps: 1, pgd_alpha: eps, ..Default::default() };
            let b = pgd(&model, &x0, &cfg).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pgd_respects_linf_ball() {
        let weights: Vec<f64> = (0..36).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let model = linear_net_model(6, 6, weights, 1e6);
        let x0 = ImagePatch::from_fn(6, 6, |i, j| ((i * 41 + j * 7) % 256) as u8);
        let cfg = AttackConfig { epsilon: 2, pgd_steps: 7, pgd_alpha: 1, ..Default::default() };
        let r = pgd(&model, &x0, &cfg).unwrap();
        assert_eq!(r.sweeps_or_steps, 7);
        for (a, b) in r.adversarial.pixels().iter().zip(x0.pixels()) {
            assert!((i32::from(*a) - i32::from(*b)).abs() <= 2);
        }
    }

    #[test]
    fn non_differentiable_target_rejected() {
        let cfg = crate::spamfeat::SpamConfig::default();
        let m = crate::detectors::spam_linear_model(
            cfg.clone(),
            crate::detectors::LinearModel { w: vec![0.0; cfg.dimension()], b: 1.0 },
            None,
        );
        assert!(matches!(fgsm(&m, &ImagePatch::filled(16, 16, 3), 1), Err(Error::UnsupportedTarget(_))));
    }

    #[test]
    fn log_roundtrip() {
        let recs = vec![AttackLogRecord {
            id: "a".into(),
            task: "blur".into(),
            target: "bayar_net".into(),
            attack: "fgsm".into(),
            success: true,
            psnr_db: Psnr::Infinite,
            sweeps_or_steps: 1,
            sha: "00".into(),
        }];
        let mut buf = Vec::new();
        write_attack_log(&mut buf, &recs).unwrap();
        assert_eq!(read_attack_log(std::str::from_utf8(&buf).unwrap()).unwrap(), recs);
    }
}
