//! Momentum SGD and the constrained first-layer projection.

use super::{Conv2d, Grads, Network};
use crate::error::{Error, Result};

/// Velocity buffers for classical momentum, `v = μ v + g`, `p -= lr v`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update to every trainable parameter of `net`.
    pub fn step(&mut self, net: &mut Network, grads: &Grads, lr: f64, momentum: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if !grads.is_finite() {
            return Err(Error::TrainingDiverged { message: "non-finite gradient".into(), loss_trace: Vec::new() });
        }
        let mask = net.trainable_mask();
        let mut params = net.params_mut();
        if grads.0.len() != params.len() {
            return Err(Error::invalid(format!(
                "gradient has {} buffers, network has {}",
                grads.0.len(),
                params.len()
            )));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (k, p) in params.iter_mut().enumerate() {
            if !mask[k] {
                continue;
            }
            let g = &grads.0[k];
            let v = &mut self.velocity[k];
            for ((pv, vv), &gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vv = momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// A square prediction-error filter whose center is pinned to -1 and whose
/// remaining taps sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedKernel {
    pub size: usize,
    /// Row-major `size x size` taps.
    pub weights: Vec<f64>,
}

impl ConstrainedKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || weights.len() != size * size {
            return Err(Error::invalid(format!("constrained kernel needs an odd size and size^2 taps, got {size} and {}", weights.len())));
        }
        Ok(Self { size, weights })
    }

    pub fn center_index(&self) -> usize {
        (self.size / 2) * self.size + self.size / 2
    }

    pub fn off_center_sum(&self) -> f64 {
        let c = self.center_index();
        self.weights.iter().enumerate().filter(|&(i, _)| i != c).map(|(_, w)| w).sum()
    }

    pub fn satisfies_constraint(&self, tol: f64) -> bool {
        self.weights[self.center_index()] == -1.0 && (self.off_center_sum() - 1.0).abs() <= tol
    }
}

/// Sets the center to -1 and rescales the other taps to sum to 1. Kernels
/// that already satisfy the constraint are returned unchanged.
pub fn project_bayar(mut k: ConstrainedKernel) -> Result<ConstrainedKernel> {
    project_taps(&mut k.weights, k.size)?;
    Ok(k)
}

fn project_taps(w: &mut [f64], size: usize) -> Result<()> {
    let c = (size / 2) * size + size / 2;
    let sum: f64 = w.iter().enumerate().filter(|&(i, _)| i != c).map(|(_, v)| v).sum();
    if w[c] == -1.0 && (sum - 1.0).abs() <= 1e-12 {
        return Ok(());
    }
    if sum.abs() <= 1e-12 || !sum.is_finite() {
        return Err(Error::DegenerateKernel(sum));
    }
    let mut out = w.to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        if i != c {
            *v /= sum;
        }
    }
    out[c] = -1.0;
    // heavy cancellation can leave the rescaled sum off by more than the
    // tolerance; such kernels are as unusable as a zero-sum one
    let check: f64 = out.iter().enumerate().filter(|&(i, _)| i != c).map(|(_, v)| v).sum();
    if (check - 1.0).abs() > 1e-12 {
        return Err(Error::DegenerateKernel(sum));
    }
    w.copy_from_slice(&out);
    Ok(())
}

/// Projects every `(out, in)` filter of a square convolution. Returns the
/// flat filter indices that were degenerate and left untouched.
pub fn project_bayar_layer(conv: &mut Conv2d) -> Result<Vec<usize>> {
    if conv.kernel_h != conv.kernel_w || conv.kernel_h % 2 == 0 {
        return Err(Error::invalid("constrained layer needs an odd square kernel"));
    }
    let ksz = conv.kernel_h * conv.kernel_w;
    let mut degenerate = Vec::new();
    for (f, taps) in conv.weight.chunks_mut(ksz).enumerate() {
        match project_taps(taps, conv.kernel_h) {
            Ok(()) => {}
            Err(Error::DegenerateKernel(_)) => degenerate.push(f),
            Err(e) => return Err(e),
        }
    }
    Ok(degenerate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Dense, Layer, LossKind};

    fn one_weight_net(w: f64) -> Network {
        let mut d = Dense::new(1, 1);
        d.weight[0] = w;
        Network::new(vec![Layer::FullyConnected(d)], LossKind::Hinge)
    }

    #[test]
    fn plain_step() {
        let mut net = one_weight_net(0.0);
        let grads = Grads(vec![vec![1.0], vec![0.0]]);
        SgdState::new().step(&mut net, &grads, 0.1, 0.0).unwrap();
        assert_eq!(net.params()[0], &[-0.1]);
    }

    #[test]
    fn momentum_matches_recurrence() {
        let mut net = one_weight_net(0.5);
        let mut st = SgdState::new();
        let (g1, g2, lr, mu) = (0.3, -0.7, 0.05, 0.9);
        st.step(&mut net, &Grads(vec![vec![g1], vec![0.0]]), lr, mu).unwrap();
        st.step(&mut net, &Grads(vec![vec![g2], vec![0.0]]), lr, mu).unwrap();
        let v1 = g1;
        let v2 = mu * v1 + g2;
        let expected = 0.5 - lr * v1 - lr * v2;
        assert_eq!(net.params()[0][0], expected);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut net = one_weight_net(1.25);
        let before = net.clone();
        let g = net.zero_grads();
        SgdState::new().step(&mut net, &g, 0.1, 0.9).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut net = one_weight_net(0.0);
        let g = Grads(vec![vec![f64::NAN], vec![0.0]]);
        assert!(matches!(SgdState::new().step(&mut net, &g, 0.1, 0.0), Err(Error::TrainingDiverged { .. })));
    }

    #[test]
    fn frozen_params_untouched() {
        let mut d = Dense::new(1, 1).frozen();
        d.weight[0] = 2.0;
        let mut net = Network::new(vec![Layer::FullyConnected(d)], LossKind::Hinge);
        SgdState::new().step(&mut net, &Grads(vec![vec![1.0], vec![1.0]]), 0.1, 0.0).unwrap();
        assert_eq!(net.params()[0], &[2.0]);
    }

    #[test]
    fn projection_equal_taps() {
        let mut w = vec![2.0; 25];
        w[12] = 7.0;
        let k = project_bayar(ConstrainedKernel::new(5, w).unwrap()).unwrap();
        assert_eq!(k.weights[12], -1.0);
        for (i, v) in k.weights.iter().enumerate() {
            if i != 12 {
                assert!((v - 1.0 / 24.0).abs() < 1e-15);
            }
        }
        assert!(k.satisfies_constraint(1e-12));
    }

    #[test]
    fn projection_negative_sum_flips_signs() {
        let mut w = vec![0.0; 25];
        w[0] = -3.0;
        w[1] = -1.0;
        w[24] = 0.5;
        w[23] = -0.5;
        let k = project_bayar(ConstrainedKernel::new(5, w).unwrap()).unwrap();
        assert_eq!(k.weights[0], 0.75);
        assert_eq!(k.weights[1], 0.25);
        assert_eq!(k.weights[24], -0.125);
        assert!(k.satisfies_constraint(1e-12));
    }

    #[test]
    fn projection_idempotent_and_degenerate() {
        let w: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
        let once = project_bayar(ConstrainedKernel::new(5, w).unwrap()).unwrap();
        let twice = project_bayar(once.clone()).unwrap();
        assert_eq!(once, twice);
        let mut z = vec![0.0; 25];
        z[0] = 1.0;
        z[1] = -1.0;
        assert!(matches!(project_bayar(ConstrainedKernel::new(5, z).unwrap()), Err(Error::DegenerateKernel(_))));
    }
}
