//! The four manipulation families: Gaussian blur, median filtering,
//! bilinear resizing and a JPEG luminance round-trip.
//!
//! Every operation is deterministic down to the last bit: filters use
//! symmetric boundary extension, intermediate values stay in `f64` and the
//! final value is rounded half-up and clipped once.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_kernel, mirror, round_clip, ImagePatch};

/// One manipulation with its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManipulationSpec {
    Blur { sigma: f64 },
    Jpeg { quality: u8 },
    Median { kernel: usize },
    Resize { scale: f64 },
}

impl ManipulationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ManipulationSpec::Blur { sigma } if !(sigma > 0.0) => Err(Error::invalid("blur sigma must be > 0")),
            ManipulationSpec::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(Error::invalid("jpeg quality must be in 1..=100"))
            }
            ManipulationSpec::Median { kernel } if kernel < 3 || kernel % 2 == 0 => {
                Err(Error::invalid("median kernel must be odd and >= 3"))
            }
            ManipulationSpec::Resize { scale } if !(scale > 0.0) => Err(Error::invalid("resize scale must be > 0")),
            _ => Ok(()),
        }
    }

    /// The eight table rows: easy settings first, then the challenging ones.
    pub fn table_rows() -> Vec<ManipulationSpec> {
        let mut rows = Self::easy_rows();
        rows.extend(Self::hard_rows());
        rows
    }

    pub fn easy_rows() -> Vec<ManipulationSpec> {
        vec![
            ManipulationSpec::Blur { sigma: 1.10 },
            ManipulationSpec::Jpeg { quality: 70 },
            ManipulationSpec::Median { kernel: 7 },
            ManipulationSpec::Resize { scale: 1.5 },
        ]
    }

    pub fn hard_rows() -> Vec<ManipulationSpec> {
        vec![
            ManipulationSpec::Blur { sigma: 0.50 },
            ManipulationSpec::Jpeg { quality: 90 },
            ManipulationSpec::Median { kernel: 3 },
            ManipulationSpec::Resize { scale: 1.01 },
        ]
    }

    /// Short identifier used in file names and reports, e.g. `median7`.
    pub fn id(&self) -> String {
        match *self {
            ManipulationSpec::Blur { sigma } => format!("blur{sigma:.2}"),
            ManipulationSpec::Jpeg { quality } => format!("jpeg{quality}"),
            ManipulationSpec::Median { kernel } => format!("median{kernel}"),
            ManipulationSpec::Resize { scale } => format!("resize{scale:.3}"),
        }
    }
}

impl fmt::Display for ManipulationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ManipulationSpec::Blur { sigma } => write!(f, "Blurring, sigma={sigma:.2}"),
            ManipulationSpec::Jpeg { quality } => write!(f, "JPEG compression, Q={quality}"),
            ManipulationSpec::Median { kernel } => write!(f, "Median filtering, {kernel}x{kernel}"),
            ManipulationSpec::Resize { scale } => write!(f, "Resizing, scale={scale:.3}"),
        }
    }
}

/// Applies `spec`; the output always has the input's dimensions.
pub fn apply(x: &ImagePatch, spec: &ManipulationSpec) -> Result<ImagePatch> {
    spec.validate()?;
    match *spec {
        ManipulationSpec::Blur { sigma } => gaussian_blur(x, sigma),
        ManipulationSpec::Jpeg { quality } => jpeg_roundtrip(x, quality),
        ManipulationSpec::Median { kernel } => median_filter(x, kernel),
        ManipulationSpec::Resize { scale } => {
            let big = resize(x, scale)?;
            fit_to(&big, x.width(), x.height())
        }
    }
}

/// Center-crops (or edge-pads, when smaller) to `w`×`h`.
fn fit_to(img: &ImagePatch, w: usize, h: usize) -> Result<ImagePatch> {
    let off = |big: usize, small: usize| -> isize { (big as isize - small as isize).div_euclid(2) };
    let (dx, dy) = (off(img.width(), w), off(img.height(), h));
    Ok(ImagePatch::from_fn(w, h, |i, j| {
        let si = (i as isize + dy).clamp(0, img.height() as isize - 1) as usize;
        let sj = (j as isize + dx).clamp(0, img.width() as isize - 1) as usize;
        img.get(si, sj)
    }))
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`.
pub fn gaussian_blur(x: &ImagePatch, sigma: f64) -> Result<ImagePatch> {
    if !(sigma > 0.0) {
        return Err(Error::invalid("blur sigma must be > 0"));
    }
    let (w, h) = x.dims();
    let smooth = crate::imaging::smooth_field(&x.to_f64(), w, h, sigma);
    debug_assert_eq!(gaussian_kernel(sigma).len(), 2 * (3.0 * sigma).ceil() as usize + 1);
    ImagePatch::from_f64(w, h, &smooth)
}

/// Exact `kernel`×`kernel` median.
pub fn median_filter(x: &ImagePatch, kernel: usize) -> Result<ImagePatch> {
    if kernel < 3 || kernel % 2 == 0 {
        return Err(Error::invalid(format!("median kernel {kernel} must be odd and >= 3")));
    }
    let (w, h) = x.dims();
    let r = (kernel / 2) as isize;
    let rows: Vec<usize> = (-r..h as isize + r).map(|i| mirror(i, h)).collect();
    let cols: Vec<usize> = (-r..w as isize + r).map(|j| mirror(j, w)).collect();
    let half = kernel * kernel / 2;
    let mut out = Vec::with_capacity(w * h);
    // Counting-histogram selection keeps the result exactly one of the
    // window's values.
    for i in 0..h {
        let mut hist = [0u32; 256];
        for j in 0..w {
            if j == 0 {
                hist = [0; 256];
                for &ri in &rows[i..i + kernel] {
                    for &cj in &cols[0..kernel] {
                        hist[x.get(ri, cj) as usize] += 1;
                    }
                }
            } else {
                let (old, new) = (cols[j - 1], cols[j + kernel - 1]);
                for &ri in &rows[i..i + kernel] {
                    hist[x.get(ri, old) as usize] -= 1;
                    hist[x.get(ri, new) as usize] += 1;
                }
            }
            let mut seen = 0usize;
            let mut med = 0u8;
            for (v, &c) in hist.iter().enumerate() {
                seen += c as usize;
                if seen > half {
                    med = v as u8;
                    break;
                }
            }
            out.push(med);
        }
    }
    ImagePatch::new(w, h, out)
}

/// Bilinear resize with half-pixel centers and edge clamping; output size
/// is `round(scale * size)` in each dimension.
pub fn resize(x: &ImagePatch, scale: f64) -> Result<ImagePatch> {
    if !(scale > 0.0) {
        return Err(Error::invalid("resize scale must be > 0"));
    }
    let (w, h) = x.dims();
    let nw = (w as f64 * scale).round() as usize;
    let nh = (h as f64 * scale).round() as usize;
    if nw == 0 || nh == 0 {
        return Err(Error::invalid(format!("resize by {scale} gives an empty image")));
    }
    let taps = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|d| {
                let src = (d as f64 + 0.5) / scale - 0.5;
                let f = src.floor();
                let frac = src - f;
                let i0 = (f as isize).clamp(0, n_in as isize - 1) as usize;
                let i1 = (f as isize + 1).clamp(0, n_in as isize - 1) as usize;
                (i0, i1, frac)
            })
            .collect()
    };
    let xt = taps(nw, w);
    let yt = taps(nh, h);
    let src = x.to_f64();
    let mut out = Vec::with_capacity(nw * nh);
    for &(y0, y1, fy) in &yt {
        for &(x0, x1, fx) in &xt {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    ImagePatch::from_f64(nw, nh, &out)
}

/// Luminance quantization table of ITU-T T.81 Annex K, row-major.
pub const ANNEX_K_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex-K table scaled to `quality` with the usual IJG rule.
pub fn quant_table(quality: u8) -> Result<[u16; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("jpeg quality {quality} outside 1..=100")));
    }
    let q = u32::from(quality);
    let s = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [0u16; 64];
    for (dst, &base) in t.iter_mut().zip(ANNEX_K_LUMA.iter()) {
        *dst = ((u32::from(base) * s + 50) / 100).clamp(1, 255) as u16;
    }
    Ok(t)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Decode-equivalent JPEG compression of a single luminance channel:
/// level shift, orthonormal 8×8 DCT, quantize, dequantize, inverse DCT.
/// Entropy coding is lossless and therefore omitted.
pub fn jpeg_roundtrip(x: &ImagePatch, quality: u8) -> Result<ImagePatch> {
    let table = quant_table(quality)?;
    let (w, h) = x.dims();
    let pw = w.div_ceil(8) * 8;
    let ph = h.div_ceil(8) * 8;
    // edge replication up to a multiple of 8
    let padded: Vec<f64> = (0..ph)
        .flat_map(|i| (0..pw).map(move |j| (i.min(h - 1), j.min(w - 1))))
        .map(|(i, j)| f64::from(x.get(i, j)) - 128.0)
        .collect();
    let c = dct_basis();
    let mut out = vec![0.0; pw * ph];
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            for (y, row) in block.iter_mut().enumerate() {
                for (xx, v) in row.iter_mut().enumerate() {
                    *v = padded[(by + y) * pw + bx + xx];
                }
            }
            // forward: F = C B C^T
            for u in 0..8 {
                for xx in 0..8 {
                    tmp[u][xx] = (0..8).map(|y| c[u][y] * block[y][xx]).sum();
                }
            }
            let mut coef = [[0.0f64; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let f: f64 = (0..8).map(|xx| tmp[u][xx] * c[v][xx]).sum();
                    let q = f64::from(table[u * 8 + v]);
                    coef[u][v] = (f / q).round() * q;
                }
            }
            // inverse: B = C^T F C
            for y in 0..8 {
                for v in 0..8 {
                    tmp[y][v] = (0..8).map(|u| c[u][y] * coef[u][v]).sum();
                }
            }
            for y in 0..8 {
                for xx in 0..8 {
                    let s: f64 = (0..8).map(|v| tmp[y][v] * c[v][xx]).sum();
                    out[(by + y) * pw + bx + xx] = s + 128.0;
                }
            }
        }
    }
    Ok(ImagePatch::from_fn(w, h, |i, j| round_clip(out[i * pw + j])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::mse;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_patch(w: usize, h: usize, seed: u64) -> ImagePatch {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImagePatch::from_fn(w, h, |_, _| r.random())
    }

    #[test]
    fn blur_keeps_constants() {
        let c = ImagePatch::filled(13, 9, 77);
        assert_eq!(gaussian_blur(&c, 1.10).unwrap(), c);
        assert_eq!(apply(&c, &ManipulationSpec::Blur { sigma: 1.10 }).unwrap(), c);
    }

    #[test]
    fn blur_impulse_center() {
        // independent evaluation of the truncated, renormalised weights
        let sigma = 1.10f64;
        let r = (3.0 * sigma).ceil() as i32;
        assert_eq!(r, 4);
        let norm: f64 = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).sum();
        let k0 = 1.0 / norm;
        let mut img = ImagePatch::filled(9, 9, 0);
        img.set(4, 4, 255);
        let out = gaussian_blur(&img, sigma).unwrap();
        assert_eq!(out.get(4, 4), (255.0 * k0 * k0 + 0.5).floor() as u8);
        assert_eq!(gaussian_kernel(0.5).len(), 5);
    }

    #[test]
    fn median_examples() {
        let c = ImagePatch::filled(10, 10, 42);
        assert_eq!(median_filter(&c, 3).unwrap(), c);

        let w = ImagePatch::new(3, 3, vec![0, 0, 0, 0, 255, 255, 255, 255, 10]).unwrap();
        assert_eq!(median_filter(&w, 3).unwrap().get(1, 1), 10);

        let mut salt = ImagePatch::filled(7, 7, 0);
        salt.set(3, 3, 255);
        assert_eq!(median_filter(&salt, 3).unwrap(), ImagePatch::filled(7, 7, 0));

        assert!(median_filter(&c, 4).is_err());
        assert!(apply(&c, &ManipulationSpec::Median { kernel: 2 }).is_err());
    }

    #[test]
    fn median_matches_sorting() {
        let img = random_patch(11, 8, 3);
        let out = median_filter(&img, 5).unwrap();
        for i in 0..8 {
            for j in 0..11 {
                let mut win: Vec<u8> = (-2..=2isize)
                    .flat_map(|di| (-2..=2isize).map(move |dj| (di, dj)))
                    .map(|(di, dj)| img.get(mirror(i as isize + di, 8), mirror(j as isize + dj, 11)))
                    .collect();
                win.sort_unstable();
                assert_eq!(out.get(i, j), win[12]);
            }
        }
    }

    #[test]
    fn resize_examples() {
        let img = random_patch(17, 12, 9);
        assert_eq!(resize(&img, 1.0).unwrap(), img);

        let two = ImagePatch::new(2, 1, vec![0, 100]).unwrap();
        let up = resize(&two, 2.0).unwrap();
        assert_eq!(up.dims(), (4, 2));
        assert_eq!(&up.pixels()[..4], &[0, 25, 75, 100]);

        let p = random_patch(128, 128, 1);
        assert_eq!(resize(&p, 1.01).unwrap().dims(), (129, 129));
        assert_eq!(apply(&p, &ManipulationSpec::Resize { scale: 1.01 }).unwrap().dims(), (128, 128));
        assert_eq!(apply(&p, &ManipulationSpec::Resize { scale: 0.5 }).unwrap().dims(), (128, 128));
        assert!(resize(&two, 0.1).is_err());
    }

    #[test]
    fn quant_table_scaling() {
        assert_eq!(quant_table(50).unwrap(), ANNEX_K_LUMA);
        assert_eq!(quant_table(100).unwrap(), [1u16; 64]);
        let q70 = quant_table(70).unwrap();
        assert_eq!(q70[0], ((16 * 60 + 50) / 100) as u16);
        assert!(quant_table(0).is_err());
        assert!(quant_table(101).is_err());
    }

    #[test]
    fn jpeg_constant_and_quality_order() {
        let c = ImagePatch::filled(16, 16, 128);
        assert_eq!(jpeg_roundtrip(&c, 70).unwrap(), c);
        for seed in 0..5 {
            let p = random_patch(32, 24, seed);
            let m70 = mse(&p, &jpeg_roundtrip(&p, 70).unwrap()).unwrap();
            let m90 = mse(&p, &jpeg_roundtrip(&p, 90).unwrap()).unwrap();
            assert!(m70 >= m90, "seed {seed}: {m70} < {m90}");
        }
        let odd = random_patch(13, 10, 4);
        assert_eq!(jpeg_roundtrip(&odd, 75).unwrap().dims(), (13, 10));
    }

    #[test]
    fn jpeg_twice_moves_less_than_once() {
        for seed in 0..5 {
            let p = random_patch(32, 32, 100 + seed);
            let once = jpeg_roundtrip(&p, 70).unwrap();
            let twice = jpeg_roundtrip(&once, 70).unwrap();
            assert!(mse(&once, &twice).unwrap() < mse(&p, &once).unwrap());
        }
    }

    #[test]
    fn dispatch_and_table_rows() {
        let p = random_patch(24, 24, 8);
        assert_eq!(apply(&p, &ManipulationSpec::Median { kernel: 7 }).unwrap(), median_filter(&p, 7).unwrap());
        let rows = ManipulationSpec::table_rows();
        assert_eq!(rows.len(), 8);
        assert!(rows.contains(&ManipulationSpec::Blur { sigma: 1.10 }));
        assert!(rows.contains(&ManipulationSpec::Jpeg { quality: 90 }));
        assert!(rows.contains(&ManipulationSpec::Median { kernel: 3 }));
        assert!(rows.contains(&ManipulationSpec::Resize { scale: 1.01 }));
        let ids: std::collections::BTreeSet<_> = rows.iter().map(|r| r.id()).collect();
        assert_eq!(ids.len(), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn manipulations_preserve_dims(seed in any::<u64>(), w in 8usize..24, h in 8usize..24, which in 0usize..8) {
            let p = random_patch(w, h, seed);
            let spec = ManipulationSpec::table_rows()[which];
            let out = apply(&p, &spec).unwrap();
            prop_assert_eq!(out.dims(), p.dims());
        }

        #[test]
        fn median_introduces_no_new_levels(seed in any::<u64>()) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let palette = [3u8, 90, 91, 200];
            let p = ImagePatch::from_fn(12, 12, |_, _| palette[r.random_range(0..4)]);
            let out = median_filter(&p, 3).unwrap();
            prop_assert!(out.pixels().iter().all(|v| palette.contains(v)));
        }

        #[test]
        fn constants_survive_blur_and_resize(v in any::<u8>(), scale in 0.6f64..2.0) {
            let c = ImagePatch::filled(10, 10, v);
            prop_assert!(gaussian_blur(&c, 0.8).unwrap().pixels().iter().all(|&p| p == v));
            prop_assert!(resize(&c, scale).unwrap().pixels().iter().all(|&p| p == v));
        }
    }
}
