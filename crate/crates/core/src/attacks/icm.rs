//! Greedy coordinate-wise attack in SPAM feature space.
//!
//! Each sweep visits every pixel in a seeded random order, tries the
//! configured deltas and keeps the best change that strictly lowers the
//! objective while the MSE to the original stays within budget.

use rand::seq::SliceRandom;

use super::{finish, AttackConfig, AttackResult, IcmMode};
use crate::detectors::{DetectorBody, DetectorModel};
use crate::error::{Error, Result};
use crate::imaging::ImagePatch;
use crate::rng::stream;
use crate::spamfeat::{
    edit_effect, feature_counts, histograms, normalize_counts, BinChange, HistogramPair, SpamConfig, SpamFeature,
    SymmetryTable,
};

/// How candidate features are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcmStrategy {
    /// Histogram deltas from the few co-occurrences touched by the edit.
    Incremental,
    /// Recompute all features for every candidate (reference oracle).
    FullRecompute,
}

struct Objective<'a> {
    cfg: &'a SpamConfig,
    mode: IcmMode,
    w: &'a [f64],
    b: f64,
    threshold: f64,
    margin: f64,
    target: Option<&'a [f64]>,
}

impl Objective<'_> {
    /// Objective of a full feature-count vector. Both strategies call this on
    /// identical counts, so their decisions agree bit for bit.
    fn eval(&self, counts: &[u64]) -> f64 {
        let f = normalize_counts(counts, self.cfg.normalization);
        match self.mode {
            IcmMode::CrossBoundary => {
                let score = f.values.iter().zip(self.w).map(|(a, b)| a * b).sum::<f64>() + self.b;
                (score - self.threshold + self.margin).max(0.0)
            }
            IcmMode::RestorePristine => {
                let t = self.target.expect("checked");
                f.values.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum()
            }
        }
    }
}

/// Runs the attack with incremental feature updates.
pub fn icm_attack(
    detector: &DetectorModel,
    x0: &ImagePatch,
    f_target: Option<&SpamFeature>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    icm_attack_with(detector, x0, f_target, cfg, IcmStrategy::Incremental)
}

pub fn icm_attack_with(
    detector: &DetectorModel,
    x0: &ImagePatch,
    f_target: Option<&SpamFeature>,
    cfg: &AttackConfig,
    strategy: IcmStrategy,
) -> Result<AttackResult> {
    cfg.validate()?;
    let DetectorBody::SpamLinear { cfg: spam, table, linear } = &detector.body else {
        return Err(Error::UnsupportedTarget(format!("ICM needs a spam_linear detector, got {}", detector.kind)));
    };
    match (cfg.icm_mode, f_target) {
        (IcmMode::RestorePristine, None) => {
            return Err(Error::invalid("restore_pristine mode needs a target feature"));
        }
        (IcmMode::CrossBoundary, Some(_)) => {
            return Err(Error::invalid("cross_boundary mode takes no target feature"));
        }
        (IcmMode::RestorePristine, Some(t)) if t.dimension() != spam.dimension() => {
            return Err(Error::invalid("target feature dimension does not match the detector"));
        }
        _ => {}
    }
    let obj = Objective {
        cfg: spam,
        mode: cfg.icm_mode,
        w: &linear.w,
        b: linear.b,
        threshold: detector.threshold,
        margin: cfg.margin,
        target: f_target.map(|t| t.values.as_slice()),
    };
    let reached = |v: f64| match cfg.icm_mode {
        IcmMode::CrossBoundary => v <= 0.0,
        IcmMode::RestorePristine => v <= cfg.objective_tol,
    };

    let mut x = x0.clone();
    let mut hists = histograms(&x, spam)?;
    let mut counts = feature_counts(&hists, spam, Some(table));
    let mut current = obj.eval(&counts);
    let mut trace = vec![current];
    if reached(current) {
        return finish(detector, x0, x, 0, trace);
    }

    let (w, h) = x.dims();
    let n = (w * h) as f64;
    let budget = cfg.distortion_t * n;
    let mut sq_dist: i64 = 0;
    let mut sites: Vec<(usize, usize)> = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect();
    let mut rng = stream(cfg.seed, "icm-order");
    let mut changes: Vec<BinChange> = Vec::with_capacity(64);
    let mut scratch = counts.clone();
    let mut sweeps = 0;
    'outer: while sweeps < cfg.max_sweeps {
        sweeps += 1;
        sites.shuffle(&mut rng);
        let mut accepted = 0usize;
        for &(i, j) in &sites {
            let p = i32::from(x.get(i, j));
            let d0 = i64::from(p) - i64::from(x0.get(i, j));
            let mut best: Option<(f64, i32, i64)> = None;
            for &delta in &cfg.icm_deltas {
                let v = p + delta;
                if !(0..=255).contains(&v) {
                    continue;
                }
                let d1 = d0 + i64::from(delta);
                let new_sq = sq_dist - d0 * d0 + d1 * d1;
                if new_sq as f64 > budget {
                    continue;
                }
                let value = match strategy {
                    IcmStrategy::Incremental => {
                        changes.clear();
                        edit_effect(&x, (i, j), delta, spam, &mut changes)?;
                        scratch.copy_from_slice(&counts);
                        apply_to_counts(&mut scratch, &changes, spam, table);
                        obj.eval(&scratch)
                    }
                    IcmStrategy::FullRecompute => {
                        let mut y = x.clone();
                        y.set(i, j, v as u8);
                        obj.eval(&feature_counts(&histograms(&y, spam)?, spam, Some(table)))
                    }
                };
                if value < current && best.is_none_or(|(bv, _, _)| value < bv) {
                    best = Some((value, delta, new_sq));
                }
            }
            if let Some((value, delta, new_sq)) = best {
                changes.clear();
                edit_effect(&x, (i, j), delta, spam, &mut changes)?;
                apply_hist(&mut hists, &changes);
                apply_to_counts(&mut counts, &changes, spam, table);
                x.set(i, j, (p + delta) as u8);
                sq_dist = new_sq;
                current = value;
                trace.push(value);
                accepted += 1;
                if reached(current) {
                    break 'outer;
                }
            }
        }
        if accepted == 0 {
            break;
        }
    }
    debug_assert_eq!(hists, histograms(&x, spam)?);
    finish(detector, x0, x, sweeps, trace)
}

fn apply_hist(hists: &mut HistogramPair, changes: &[BinChange]) {
    crate::spamfeat::apply_changes(hists, changes);
}

/// Applies raw-bin changes to the (possibly symmetrized) count vector laid
/// out as in [`feature_counts`].
fn apply_to_counts(counts: &mut [u64], changes: &[BinChange], cfg: &SpamConfig, table: &SymmetryTable) {
    let per_dir = counts.len() / 2;
    for c in changes {
        let slot = if cfg.symmetrize { table.class_of[c.bin] } else { c.bin };
        let off = match c.direction {
            crate::spamfeat::Direction::Horizontal => 0,
            crate::spamfeat::Direction::Vertical => per_dir,
        };
        let v = &mut counts[off + slot];
        *v = (*v as i64 + c.delta) as u64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{spam_linear_model, LinearModel};
    use crate::imaging::round_clip;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn noisy(seed: u64, sigma: f64) -> ImagePatch {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(120.0, sigma).unwrap();
        ImagePatch::from_fn(16, 16, |_, _| round_clip(n.sample(&mut r)))
    }

    fn detector(seed: u64) -> DetectorModel {
        let cfg = SpamConfig::default();
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let w = (0..cfg.dimension()).map(|_| n.sample(&mut r)).collect();
        spam_linear_model(cfg, LinearModel { w, b: 0.0 }, None)
    }

    #[test]
    fn already_pristine_is_immediate_success() {
        let mut d = detector(1);
        let x = noisy(2, 4.0);
        d.threshold = d.score(&x).unwrap() + 1.0;
        let r = icm_attack(&d, &x, None, &AttackConfig::default()).unwrap();
        assert!(r.success);
        assert_eq!(r.sweeps_or_steps, 0);
        assert_eq!(r.adversarial, x);
    }

    #[test]
    fn objective_strictly_decreases_and_budget_holds() {
        let mut d = detector(3);
        let x = noisy(4, 3.0);
        d.threshold = d.score(&x).unwrap() - 0.3;
        let cfg = AttackConfig { max_sweeps: 4, ..Default::default() };
        let r = icm_attack(&d, &x, None, &cfg).unwrap();
        assert!(r.objective_trace.windows(2).all(|p| p[1] < p[0]));
        assert!(crate::imaging::mse(&x, &r.adversarial).unwrap() <= cfg.distortion_t);
    }

    #[test]
    fn incremental_matches_full_recompute() {
        let mut d = detector(5);
        let x = noisy(6, 5.0);
        d.threshold = d.score(&x).unwrap() - 0.2;
        let cfg = AttackConfig { max_sweeps: 2, seed: 11, ..Default::default() };
        let a = icm_attack_with(&d, &x, None, &cfg, IcmStrategy::Incremental).unwrap();
        let b = icm_attack_with(&d, &x, None, &cfg, IcmStrategy::FullRecompute).unwrap();
        assert_eq!(a, b);
        assert!(a.objective_trace.len() > 1);

        let target = crate::spamfeat::extract_spam(&noisy(7, 2.0), &SpamConfig::default()).unwrap();
        let cfg = AttackConfig { icm_mode: IcmMode::RestorePristine, max_sweeps: 1, ..cfg };
        let a = icm_attack_with(&d, &x, Some(&target), &cfg, IcmStrategy::Incremental).unwrap();
        let b = icm_attack_with(&d, &x, Some(&target), &cfg, IcmStrategy::FullRecompute).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mode_target_mismatch_rejected() {
        let d = detector(1);
        let x = noisy(1, 3.0);
        let cfg = AttackConfig { icm_mode: IcmMode::RestorePristine, ..Default::default() };
        assert!(matches!(icm_attack(&d, &x, None, &cfg), Err(Error::InvalidArgument(_))));
        let f = crate::spamfeat::extract_spam(&x, &SpamConfig::default()).unwrap();
        assert!(matches!(icm_attack(&d, &x, Some(&f), &AttackConfig::default()), Err(Error::InvalidArgument(_))));
    }
}
