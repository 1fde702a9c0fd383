//! Grayscale patches, PGM I/O, synthetic device images and distortion metrics.

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// An 8-bit grayscale image stored row-major.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImagePatch {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for ImagePatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImagePatch({}x{})", self.width, self.height)
    }
}

impl ImagePatch {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "pixel buffer has {} values, expected {}x{}",
                pixels.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                pixels.push(f(i, j));
            }
        }
        Self { width, height, pixels }
    }

    /// Rounds half-up and clips each value to `[0, 255]`.
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::invalid("value buffer does not match dimensions"));
        }
        Ok(Self { width, height, pixels: values.iter().map(|&v| round_clip(v)).collect() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Pixel at row `i`, column `j`.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.pixels[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.pixels[i * self.width + j] = v;
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }

    /// Copy of the `w`×`h` block whose top-left corner is at (`top`, `left`).
    pub fn crop(&self, top: usize, left: usize, w: usize, h: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::invalid(format!(
                "crop {w}x{h}+{left}+{top} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h);
        for i in top..top + h {
            let start = i * self.width + left;
            pixels.extend_from_slice(&self.pixels[start..start + w]);
        }
        Ok(Self { width: w, height: h, pixels })
    }
}

/// Round half-up, then clip to the 8-bit range.
#[inline]
pub fn round_clip(v: f64) -> u8 {
    let r = (v + 0.5).floor();
    if r.is_nan() || r <= 0.0 {
        0
    } else if r >= 255.0 {
        255
    } else {
        r as u8
    }
}

/// Parameters of one synthetic acquisition device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub device_id: u32,
    /// Standard deviation of the additive sensor noise, in gray levels.
    pub noise_sigma: f64,
    /// Exponent of the tone curve applied to the texture field.
    pub gamma: f64,
    /// Smoothing radius (Gaussian sigma) of the texture field, in pixels.
    pub base_texture_scale: f64,
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be >= 0"));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::invalid("gamma must be > 0"));
        }
        if !(self.base_texture_scale >= 1.0) {
            return Err(Error::invalid("base_texture_scale must be >= 1"));
        }
        Ok(())
    }

    /// The nine default devices. Noise, tone curve and texture scale are
    /// spread so that no two devices share all three.
    pub fn default_devices() -> Vec<DeviceSpec> {
        (0..9)
            .map(|d| DeviceSpec {
                device_id: d,
                noise_sigma: 1.5 + 0.25 * f64::from((d * 4) % 9),
                gamma: 0.8 + 0.05 * f64::from((d * 7) % 9),
                base_texture_scale: 1.5 + 0.5 * f64::from((d * 2) % 9) / 2.0,
            })
            .collect()
    }
}

/// Declarative description of a patch dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub devices: Vec<DeviceSpec>,
    pub images_per_device: usize,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub patch_stride: usize,
    pub seed: u64,
    /// Source image size; when absent the smallest square grid holding
    /// `patches_per_image` patches is used.
    #[serde(default)]
    pub image_width: Option<usize>,
    #[serde(default)]
    pub image_height: Option<usize>,
}

impl Default for DatasetSpec {
    /// Nine devices, 75 images each, nine 64x64 patches per 192x192 image.
    fn default() -> Self {
        Self {
            devices: DeviceSpec::default_devices(),
            images_per_device: 75,
            patch_size: 64,
            patches_per_image: 9,
            patch_stride: 64,
            seed: 0,
            image_width: None,
            image_height: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.devices.is_empty() {
            return Err(Error::invalid("dataset needs at least one device"));
        }
        for d in &self.devices {
            d.validate()?;
        }
        if self.patch_stride == 0 || self.patch_stride > self.patch_size {
            return Err(Error::invalid("patch_stride must be in 1..=patch_size"));
        }
        if self.patches_per_image == 0 {
            return Err(Error::invalid("patches_per_image must be >= 1"));
        }
        if self.images_per_device == 0 {
            return Err(Error::invalid("images_per_device must be >= 1"));
        }
        Ok(())
    }

    pub fn image_dims(&self) -> (usize, usize) {
        let grid = (self.patches_per_image as f64).sqrt().ceil() as usize;
        let side = self.patch_size + self.patch_stride * (grid.max(1) - 1);
        (self.image_width.unwrap_or(side), self.image_height.unwrap_or(side))
    }
}

/// A patch together with its provenance in the dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DevicePatch {
    pub device_id: u32,
    pub image_index: usize,
    pub patch_index: usize,
    pub patch: ImagePatch,
}

/// Separable Gaussian smoothing of an `f64` field with mirror boundaries.
pub(crate) fn smooth_field(values: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; values.len()];
    for i in 0..height {
        let row = &values[i * width..(i + 1) * width];
        for j in 0..width {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                acc += k * row[mirror(j as isize + t as isize - r, width)];
            }
            tmp[i * width + j] = acc;
        }
    }
    let mut out = vec![0.0; values.len()];
    for i in 0..height {
        for (t, &k) in kernel.iter().enumerate() {
            let src = mirror(i as isize + t as isize - r, height);
            let src_row = &tmp[src * width..(src + 1) * width];
            let dst = &mut out[i * width..(i + 1) * width];
            for (d, &s) in dst.iter_mut().zip(src_row) {
                *d += k * s;
            }
        }
    }
    out
}

/// Truncated Gaussian with radius `ceil(3 sigma)`, renormalised to unit sum.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Symmetric (half-sample) boundary extension: index -1 maps to 0, `n` to `n-1`.
#[inline]
pub(crate) fn mirror(idx: isize, n: usize) -> usize {
    let n = n as isize;
    if (0..n).contains(&idx) {
        return idx as usize;
    }
    let period = 2 * n;
    let m = idx.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

const TEXTURE_MEAN: f64 = 128.0;
const TEXTURE_CONTRAST: f64 = 40.0;

/// Deterministic synthetic image for `spec`: smoothed Gaussian texture,
/// tone-mapped by `gamma`, plus i.i.d. sensor noise, rounded and clipped.
pub fn generate_synthetic_image(
    spec: &DeviceSpec,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<ImagePatch> {
    if width < 16 || height < 16 {
        return Err(Error::invalid(format!("synthetic image {width}x{height} is below 16x16")));
    }
    spec.validate()?;

    let mut tex_rng = rng::stream(seed, "texture");
    let margin = (3.0 * spec.base_texture_scale).ceil() as usize;
    let (fw, fh) = (width + 2 * margin, height + 2 * margin);
    let white: Vec<f64> = (0..fw * fh).map(|_| StandardNormal.sample(&mut tex_rng)).collect();
    let smooth = smooth_field(&white, fw, fh, spec.base_texture_scale);
    let mut field = Vec::with_capacity(width * height);
    for i in 0..height {
        let start = (i + margin) * fw + margin;
        field.extend_from_slice(&smooth[start..start + width]);
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let std = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let std = if std > 0.0 { std } else { 1.0 };

    let mut noise_rng = rng::stream(seed, "sensor-noise");
    let values: Vec<f64> = field
        .iter()
        .map(|&v| {
            let t = (TEXTURE_MEAN + TEXTURE_CONTRAST * (v - mean) / std).clamp(0.0, 255.0);
            let toned = if spec.gamma == 1.0 { t } else { 255.0 * (t / 255.0).powf(spec.gamma) };
            let noise: f64 = if spec.noise_sigma > 0.0 {
                spec.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            toned + noise
        })
        .collect();
    ImagePatch::from_f64(width, height, &values)
}

/// Patches on a regular top-left anchored grid, raster order.
pub fn extract_patches(image: &ImagePatch, patch_size: usize, stride: usize) -> Result<Vec<ImagePatch>> {
    extract_patches_capped(image, patch_size, stride, usize::MAX)
}

/// Like [`extract_patches`], keeping only the first `cap` patches of the scan.
pub fn extract_patches_capped(
    image: &ImagePatch,
    patch_size: usize,
    stride: usize,
    cap: usize,
) -> Result<Vec<ImagePatch>> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::invalid("patch size and stride must be positive"));
    }
    if patch_size > image.width || patch_size > image.height {
        return Err(Error::invalid(format!(
            "patch {patch_size} larger than image {}x{}",
            image.width, image.height
        )));
    }
    let mut out = Vec::new();
    let mut top = 0;
    'scan: while top + patch_size <= image.height {
        let mut left = 0;
        while left + patch_size <= image.width {
            if out.len() == cap {
                break 'scan;
            }
            out.push(image.crop(top, left, patch_size, patch_size)?);
            left += stride;
        }
        top += stride;
    }
    Ok(out)
}

/// Builds every patch of the dataset, device by device, image by image.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<DevicePatch>> {
    spec.validate()?;
    let (w, h) = spec.image_dims();
    let mut out = Vec::new();
    for dev in &spec.devices {
        for img in 0..spec.images_per_device {
            let seed = rng::derive_seed(spec.seed, &format!("device{}/image{}", dev.device_id, img));
            let image = generate_synthetic_image(dev, w, h, seed)?;
            let patches =
                extract_patches_capped(&image, spec.patch_size, spec.patch_stride, spec.patches_per_image)?;
            out.extend(patches.into_iter().enumerate().map(|(p, patch)| DevicePatch {
                device_id: dev.device_id,
                image_index: img,
                patch_index: p,
                patch,
            }));
        }
    }
    Ok(out)
}

fn check_same_dims(a: &ImagePatch, b: &ImagePatch) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Mean squared pixel difference.
pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    check_same_dims(a, b)?;
    let sum: u64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(&x, &y)| {
            let d = i64::from(x) - i64::from(y);
            (d * d) as u64
        })
        .sum();
    Ok(sum as f64 / a.pixels.len() as f64)
}

/// Peak signal-to-noise ratio; identical images have no finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Psnr {
        if mse <= 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(10.0 * (255.0 * 255.0 / mse).log10())
        }
    }

    /// Decibels, with `f64::INFINITY` for identical images.
    pub fn db(self) -> f64 {
        match self {
            Psnr::Finite(v) => v,
            Psnr::Infinite => f64::INFINITY,
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(v) => s.serialize_f64(*v),
            Psnr::Infinite => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match Option::<f64>::deserialize(d)? {
            Some(v) => Psnr::Finite(v),
            None => Psnr::Infinite,
        })
    }
}

pub fn psnr(a: &ImagePatch, b: &ImagePatch) -> Result<Psnr> {
    Ok(Psnr::from_mse(mse(a, b)?))
}

/// Parses a binary (P5) 8-bit PGM.
pub fn parse_pgm(bytes: &[u8]) -> Result<ImagePatch> {
    let mut pos = 0usize;
    let perr = |offset: usize, message: &str| Error::Parse { offset, message: message.to_string() };

    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(perr(0, "missing P5 magic"));
    }
    pos += 2;

    let mut fields = [0usize; 3];
    for (k, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' || b == b'\r' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(perr(pos, ["expected width", "expected height", "expected maxval"][k]));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| perr(start, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(perr(pos, &format!("unsupported maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(perr(pos, "zero image dimension"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(perr(pos, "expected single whitespace after maxval")),
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| perr(pos, "image dimensions overflow"))?;
    if bytes.len() < pos + need {
        return Err(perr(bytes.len(), &format!("truncated payload: {} of {need} bytes", bytes.len() - pos)));
    }
    ImagePatch::new(width, height, bytes[pos..pos + need].to_vec())
}

pub fn encode_pgm(patch: &ImagePatch) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", patch.width, patch.height).into_bytes();
    out.extend_from_slice(&patch.pixels);
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<ImagePatch> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes)
}

pub fn write_pgm(patch: &ImagePatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(patch)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn device(noise: f64, gamma: f64, scale: f64) -> DeviceSpec {
        DeviceSpec { device_id: 0, noise_sigma: noise, gamma, base_texture_scale: scale }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let d = device(2.0, 0.9, 2.5);
        let a = generate_synthetic_image(&d, 40, 32, 11).unwrap();
        let b = generate_synthetic_image(&d, 40, 32, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_image(&d, 40, 32, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_degenerate_parameters_still_textured() {
        let img = generate_synthetic_image(&device(0.0, 1.0, 1.0), 32, 32, 3).unwrap();
        let v = img.to_f64();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(var.sqrt() > 0.0);
    }

    #[test]
    fn sensor_noise_magnitude() {
        // E|round(t + N(0,2)) - round(t)| is about 1.6 gray levels.
        let clean = generate_synthetic_image(&device(0.0, 1.0, 2.0), 128, 128, 5).unwrap();
        let noisy = generate_synthetic_image(&device(2.0, 1.0, 2.0), 128, 128, 5).unwrap();
        let mad = clean
            .pixels()
            .iter()
            .zip(noisy.pixels())
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .sum::<f64>()
            / (128.0 * 128.0);
        assert!((1.0..=2.5).contains(&mad), "mean abs diff {mad}");
    }

    #[test]
    fn synthetic_rejects_tiny_images() {
        assert!(matches!(
            generate_synthetic_image(&device(1.0, 1.0, 1.0), 15, 64, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn patch_grid_counts() {
        let img = ImagePatch::from_fn(128, 128, |i, j| ((i * 7 + j) % 256) as u8);
        let one = extract_patches(&img, 128, 128).unwrap();
        assert_eq!(one, vec![img.clone()]);

        let big = ImagePatch::filled(256, 256, 9);
        assert_eq!(extract_patches(&big, 128, 64).unwrap().len(), 9);

        let wide = ImagePatch::filled(1536, 1024, 0);
        let all = extract_patches(&wide, 128, 64).unwrap();
        assert_eq!(all.len(), 23 * 15);
        assert_eq!(extract_patches_capped(&wide, 128, 64, 192).unwrap().len(), 192);

        assert!(extract_patches(&img, 129, 1).is_err());
    }

    #[test]
    fn patches_are_verbatim_sub_blocks() {
        let img = ImagePatch::from_fn(50, 37, |i, j| ((i * 31 + j * 17) % 251) as u8);
        let patches = extract_patches(&img, 16, 10).unwrap();
        let per_row = (50 - 16) / 10 + 1;
        assert_eq!(patches.len(), per_row * ((37 - 16) / 10 + 1));
        for (k, p) in patches.iter().enumerate() {
            let (top, left) = ((k / per_row) * 10, (k % per_row) * 10);
            for i in 0..16 {
                for j in 0..16 {
                    assert_eq!(p.get(i, j), img.get(top + i, left + j));
                }
            }
        }
    }

    #[test]
    fn mse_and_psnr_values() {
        let a = ImagePatch::new(2, 1, vec![10, 20]).unwrap();
        let b = ImagePatch::new(2, 1, vec![13, 16]).unwrap();
        assert_eq!(mse(&a, &b).unwrap(), 12.5);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), Psnr::Infinite);

        let c = ImagePatch::from_fn(8, 8, |i, j| (i * 8 + j) as u8);
        let d = ImagePatch::from_fn(8, 8, |i, j| (i * 8 + j + 1) as u8);
        assert_eq!(mse(&c, &d).unwrap(), 1.0);
        assert!((psnr(&c, &d).unwrap().db() - 48.1308).abs() < 5e-5);
        assert!((Psnr::from_mse(4.0).db() - 42.1102).abs() < 5e-5);
        assert!(Psnr::from_mse(255.0 * 255.0).db().abs() < 1e-12);

        let e = ImagePatch::filled(3, 1, 0);
        assert!(mse(&a, &e).is_err());
    }

    #[test]
    fn pgm_header_parse() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend_from_slice(&[0, 128, 255, 7]);
        let p = parse_pgm(&bytes).unwrap();
        assert_eq!(p.dims(), (2, 2));
        assert_eq!(p.pixels(), &[0, 128, 255, 7]);

        let commented = b"P5\n# made by hand\n2 1\n255\n\x01\x02";
        assert_eq!(parse_pgm(commented).unwrap().pixels(), &[1, 2]);
    }

    #[test]
    fn pgm_errors_carry_offsets() {
        let deep = b"P5 2 2 65535\n\0\0\0\0\0\0\0\0";
        assert!(matches!(parse_pgm(deep), Err(Error::Parse { .. })));
        let truncated = b"P5 2 2 255\n\0\0\0";
        match parse_pgm(truncated) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, truncated.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_pgm(b"P6 1 1 255\n\0") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_pgm(b"P5 x") {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mirror_extension() {
        assert_eq!(mirror(-1, 5), 0);
        assert_eq!(mirror(-2, 5), 1);
        assert_eq!(mirror(5, 5), 4);
        assert_eq!(mirror(6, 5), 3);
        assert_eq!(mirror(-7, 3), 0);
        for idx in -40..40 {
            assert!(mirror(idx, 3) < 3);
        }
    }

    fn arb_pair() -> impl Strategy<Value = (ImagePatch, ImagePatch)> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            (
                proptest::collection::vec(any::<u8>(), w * h),
                proptest::collection::vec(any::<u8>(), w * h),
            )
                .prop_map(move |(a, b)| {
                    (ImagePatch::new(w, h, a).unwrap(), ImagePatch::new(w, h, b).unwrap())
                })
        })
    }

    proptest! {
        #[test]
        fn pgm_round_trip((a, _) in arb_pair()) {
            prop_assert_eq!(parse_pgm(&encode_pgm(&a)).unwrap(), a);
        }

        #[test]
        fn metrics_are_symmetric((a, b) in arb_pair()) {
            prop_assert_eq!(mse(&a, &b).unwrap(), mse(&b, &a).unwrap());
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }

        #[test]
        fn psnr_decreases_with_mse(m1 in 1e-3f64..1e5, m2 in 1e-3f64..1e5) {
            prop_assume!(m1 < m2);
            prop_assert!(Psnr::from_mse(m1).db() > Psnr::from_mse(m2).db());
        }
    }
}
