//! Central finite-difference verification of analytic gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Network, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` for the input gradient.
    pub input_rel_error: f64,
    /// Worst relative error over the trainable parameter buffers.
    pub param_rel_error: f64,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.input_rel_error.max(self.param_rel_error)
    }
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        diff
    } else {
        diff / denom
    }
}

/// Compares backpropagated gradients of `L = Σ r ⊙ net(x)` against central
/// differences with step `h`, for a random projection `r`.
pub fn check_gradients<R: Rng>(net: &Network, x: &Tensor, h: f64, rng: &mut R) -> Result<GradCheckReport> {
    let (out, cache) = net.forward_cached(x)?;
    let r: Vec<f64> = (0..out.len()).map(|_| StandardNormal.sample(rng)).collect();
    let upstream = Tensor::new(out.shape().to_vec(), r.clone())?;
    let (grads, dx) = net.backward(&cache, &upstream, true)?;
    let objective = |n: &Network, x: &Tensor| -> Result<f64> { Ok(n.forward(x)?.data().iter().zip(&r).map(|(a, b)| a * b).sum()) };

    let dx = dx.expect("input gradient requested");
    let mut numeric = vec![0.0; x.len()];
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = objective(net, &xp)?;
        xp.data_mut()[i] = orig - h;
        let fm = objective(net, &xp)?;
        xp.data_mut()[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * h);
    }
    let input_rel_error = rel_error(dx.data(), &numeric);

    let mask = net.trainable_mask();
    let mut param_rel_error: f64 = 0.0;
    let mut probe = net.clone();
    for (k, trainable) in mask.iter().enumerate() {
        if !trainable {
            continue;
        }
        let len = probe.params()[k].len();
        let mut numeric = vec![0.0; len];
        for i in 0..len {
            let orig = probe.params()[k][i];
            probe.params_mut()[k][i] = orig + h;
            let fp = objective(&probe, x)?;
            probe.params_mut()[k][i] = orig - h;
            let fm = objective(&probe, x)?;
            probe.params_mut()[k][i] = orig;
            numeric[i] = (fp - fm) / (2.0 * h);
        }
        param_rel_error = param_rel_error.max(rel_error(&grads.0[k], &numeric));
    }
    Ok(GradCheckReport { input_rel_error, param_rel_error })
}
