//! Single-sample kernels on `[C, H, W]` buffers.

use super::tensor::{axpy, dot};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn padded(&self) -> (usize, usize) {
        (self.h + 2 * self.pad, self.w + 2 * self.pad)
    }

    pub fn out_dims(&self) -> Option<(usize, usize)> {
        let (hp, wp) = self.padded();
        if hp < self.kh || wp < self.kw {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }
}

pub(crate) fn pad_input(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = g.padded();
    let mut out = vec![0.0; g.cin * hp * wp];
    for c in 0..g.cin {
        for i in 0..g.h {
            let src = &x[(c * g.h + i) * g.w..(c * g.h + i + 1) * g.w];
            let dst = (c * hp + i + g.pad) * wp + g.pad;
            out[dst..dst + g.w].copy_from_slice(src);
        }
    }
    out
}

/// `xp` is the already padded input.
pub(crate) fn conv_forward(xp: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (hp, wp) = g.padded();
    let (ho, wo) = g.out_dims().expect("checked by caller");
    let mut out = vec![0.0; g.cout * ho * wo];
    let ksz = g.kh * g.kw;
    for oc in 0..g.cout {
        let plane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias[oc]);
        for ic in 0..g.cin {
            let inp = &xp[ic * hp * wp..(ic + 1) * hp * wp];
            let wk = &weight[(oc * g.cin + ic) * ksz..(oc * g.cin + ic + 1) * ksz];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let row = (oy * g.stride + ky) * wp + kx;
                        let dst = &mut plane[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            axpy(wv, &inp[row..row + wo], dst);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d += wv * inp[row + ox * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients (when `dw` is given) and returns the
/// gradient with respect to the unpadded input (when `want_dx`).
pub(crate) fn conv_backward(
    xp: &[f64],
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    grads: Option<(&mut [f64], &mut [f64])>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let (hp, wp) = g.padded();
    let (ho, wo) = g.out_dims().expect("checked by caller");
    let ksz = g.kh * g.kw;
    if let Some((dw, db)) = grads {
        for oc in 0..g.cout {
            let dplane = &dy[oc * ho * wo..(oc + 1) * ho * wo];
            db[oc] += dplane.iter().sum::<f64>();
            for ic in 0..g.cin {
                let inp = &xp[ic * hp * wp..(ic + 1) * hp * wp];
                let base = (oc * g.cin + ic) * ksz;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let row = (oy * g.stride + ky) * wp + kx;
                            let drow = &dplane[oy * wo..(oy + 1) * wo];
                            if g.stride == 1 {
                                acc += dot(drow, &inp[row..row + wo]);
                            } else {
                                acc += drow.iter().enumerate().map(|(ox, d)| d * inp[row + ox * g.stride]).sum::<f64>();
                            }
                        }
                        dw[base + ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    if !want_dx {
        return None;
    }
    let mut dxp = vec![0.0; g.cin * hp * wp];
    for oc in 0..g.cout {
        let dplane = &dy[oc * ho * wo..(oc + 1) * ho * wo];
        for ic in 0..g.cin {
            let wk = &weight[(oc * g.cin + ic) * ksz..(oc * g.cin + ic + 1) * ksz];
            let dinp = &mut dxp[ic * hp * wp..(ic + 1) * hp * wp];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wk[ky * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let row = (oy * g.stride + ky) * wp + kx;
                        let drow = &dplane[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            axpy(wv, drow, &mut dinp[row..row + wo]);
                        } else {
                            for (ox, d) in drow.iter().enumerate() {
                                dinp[row + ox * g.stride] += wv * d;
                            }
                        }
                    }
                }
            }
        }
    }
    if g.pad == 0 {
        return Some(dxp);
    }
    let mut dx = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        for i in 0..g.h {
            let src = (c * hp + i + g.pad) * wp + g.pad;
            dx[(c * g.h + i) * g.w..(c * g.h + i + 1) * g.w].copy_from_slice(&dxp[src..src + g.w]);
        }
    }
    Some(dx)
}

/// Max pooling; returns outputs and the flat input index of each maximum
/// (first maximum in row-major window order).
pub(crate) fn maxpool_forward(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    size: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, (usize, usize)) {
    let ho = (h - size) / stride + 1;
    let wo = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut bi = usize::MAX;
                for ky in 0..size {
                    for kx in 0..size {
                        let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best || bi == usize::MAX {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    (out, arg, (ho, wo))
}
