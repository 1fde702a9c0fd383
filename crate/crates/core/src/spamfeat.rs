//! Third-order SPAM features (`s3_spam14hv`): residuals of the third finite
//! difference, quantized and truncated to `2T+1` levels, four-sample
//! co-occurrences along the residual direction, sign/reversal
//! symmetrization and normalization.
//!
//! [`edit_effect`] and [`incremental_update`] give the exact histogram
//! change caused by a single-pixel edit while touching only the residuals
//! and co-occurrence sites whose support contains the edited pixel.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImagePatch;

/// Third finite difference taps, applied at offsets -1..=2 around the center.
pub const RESIDUAL_TAPS: [i32; 4] = [-1, 3, -3, 1];
const SUPPORT: usize = RESIDUAL_TAPS.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Horizontal,
    Vertical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    L2,
    L1,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpamConfig {
    /// Quantization step.
    pub q: f64,
    /// Truncation bound; residuals are mapped to `-T..=T`.
    pub t: i32,
    pub cooc_order: usize,
    pub symmetrize: bool,
    pub normalization: Normalization,
}

impl Default for SpamConfig {
    fn default() -> Self {
        Self { q: 3.0, t: 2, cooc_order: 4, symmetrize: true, normalization: Normalization::L2 }
    }
}

impl SpamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0) {
            return Err(Error::invalid("quantization step q must be > 0"));
        }
        if self.t < 1 {
            return Err(Error::invalid("truncation T must be >= 1"));
        }
        if self.cooc_order < 2 {
            return Err(Error::invalid("co-occurrence order must be >= 2"));
        }
        if self.bins().checked_pow(self.cooc_order as u32).is_none_or(|n| n > 1 << 24) {
            return Err(Error::invalid("co-occurrence histogram too large"));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        (2 * self.t + 1) as usize
    }

    /// Raw bins per direction, `(2T+1)^order`.
    pub fn raw_bins(&self) -> usize {
        self.bins().pow(self.cooc_order as u32)
    }

    /// Length of the final feature vector (both directions).
    pub fn dimension(&self) -> usize {
        if self.symmetrize {
            2 * SymmetryTable::build(self.t, self.cooc_order).class_count
        } else {
            2 * self.raw_bins()
        }
    }

    pub fn fingerprint(&self) -> String {
        crate::rng::fingerprint(&serde_json::to_vec(self).expect("config serializes"))
    }
}

/// Unquantized third-order residual along `direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub direction: Direction,
    pub width: usize,
    pub height: usize,
    pub values: Vec<i32>,
}

/// Quantized, truncated residual.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub direction: Direction,
    pub width: usize,
    pub height: usize,
    pub values: Vec<i8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoocHistogram {
    pub direction: Direction,
    pub counts: Vec<u64>,
    pub total: u64,
}

/// Horizontal and vertical histograms of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramPair {
    pub horizontal: CoocHistogram,
    pub vertical: CoocHistogram,
}

impl HistogramPair {
    pub fn get(&self, d: Direction) -> &CoocHistogram {
        match d {
            Direction::Horizontal => &self.horizontal,
            Direction::Vertical => &self.vertical,
        }
    }

    pub fn get_mut(&mut self, d: Direction) -> &mut CoocHistogram {
        match d {
            Direction::Horizontal => &mut self.horizontal,
            Direction::Vertical => &mut self.vertical,
        }
    }
}

/// Residual of `x` along `direction`; only positions where the four-tap
/// support fits are kept.
pub fn residual(x: &ImagePatch, direction: Direction) -> Result<Residual> {
    let (w, h) = x.dims();
    let (rw, rh) = match direction {
        Direction::Horizontal => (w.checked_sub(SUPPORT - 1), Some(h)),
        Direction::Vertical => (Some(w), h.checked_sub(SUPPORT - 1)),
    };
    let (rw, rh) = match (rw, rh) {
        (Some(rw), Some(rh)) if rw > 0 && rh > 0 => (rw, rh),
        _ => return Err(Error::invalid(format!("patch {w}x{h} too small for a {direction:?} residual"))),
    };
    let px = x.pixels();
    let mut values = Vec::with_capacity(rw * rh);
    for i in 0..rh {
        for j in 0..rw {
            let r = match direction {
                Direction::Horizontal => {
                    let row = &px[i * w + j..i * w + j + SUPPORT];
                    dot_taps(row.iter().copied())
                }
                Direction::Vertical => dot_taps((0..SUPPORT).map(|k| px[(i + k) * w + j])),
            };
            values.push(r);
        }
    }
    Ok(Residual { direction, width: rw, height: rh, values })
}

#[inline]
fn dot_taps(v: impl Iterator<Item = u8>) -> i32 {
    v.zip(RESIDUAL_TAPS).map(|(p, t)| i32::from(p) * t).sum()
}

/// `clamp(round(r / q), -T, T)` with rounding half away from zero.
#[inline]
pub fn quantize_value(r: f64, q: f64, t: i32) -> i8 {
    ((r / q).round().clamp(-f64::from(t), f64::from(t))) as i8
}

pub fn quantize_truncate(r: &Residual, q: f64, t: i32) -> ResidualMap {
    ResidualMap {
        direction: r.direction,
        width: r.width,
        height: r.height,
        values: r.values.iter().map(|&v| quantize_value(f64::from(v), q, t)).collect(),
    }
}

/// Bin index of a tuple: `sum_k (v_k + T) (2T+1)^k`.
#[inline]
pub fn tuple_index(tuple: &[i8], t: i32) -> usize {
    let base = (2 * t + 1) as usize;
    tuple.iter().rev().fold(0usize, |acc, &v| acc * base + (i32::from(v) + t) as usize)
}

pub fn tuple_of_index(mut index: usize, t: i32, order: usize) -> Vec<i8> {
    let base = (2 * t + 1) as usize;
    (0..order)
        .map(|_| {
            let v = (index % base) as i32 - t;
            index /= base;
            v as i8
        })
        .collect()
}

/// Co-occurrences of `order` consecutive residuals along the map's own
/// direction.
pub fn cooc_histogram(m: &ResidualMap, order: usize, t: i32) -> Result<CoocHistogram> {
    let (sw, sh) = match m.direction {
        Direction::Horizontal => (m.width.checked_sub(order - 1), Some(m.height)),
        Direction::Vertical => (Some(m.width), m.height.checked_sub(order - 1)),
    };
    let (sw, sh) = match (sw, sh) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => return Err(Error::invalid("residual grid too small for co-occurrences")),
    };
    let bins = ((2 * t + 1) as usize).pow(order as u32);
    let mut counts = vec![0u64; bins];
    let mut tuple = vec![0i8; order];
    for i in 0..sh {
        for j in 0..sw {
            for (k, slot) in tuple.iter_mut().enumerate() {
                *slot = match m.direction {
                    Direction::Horizontal => m.values[i * m.width + j + k],
                    Direction::Vertical => m.values[(i + k) * m.width + j],
                };
            }
            counts[tuple_index(&tuple, t)] += 1;
        }
    }
    Ok(CoocHistogram { direction: m.direction, counts, total: (sw * sh) as u64 })
}

/// Raw histograms of both directions.
pub fn histograms(x: &ImagePatch, cfg: &SpamConfig) -> Result<HistogramPair> {
    cfg.validate()?;
    let hist = |d| -> Result<CoocHistogram> {
        let m = quantize_truncate(&residual(x, d)?, cfg.q, cfg.t);
        cooc_histogram(&m, cfg.cooc_order, cfg.t)
    };
    Ok(HistogramPair { horizontal: hist(Direction::Horizontal)?, vertical: hist(Direction::Vertical)? })
}

/// Merges bins equivalent under sign negation and sequence reversal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetryTable {
    pub class_of: Vec<usize>,
    pub class_count: usize,
}

impl SymmetryTable {
    pub fn build(t: i32, order: usize) -> SymmetryTable {
        let n = ((2 * t + 1) as usize).pow(order as u32);
        let mut class_of = vec![usize::MAX; n];
        let mut next = 0;
        // ascending scan: the first unassigned index of an orbit is its smallest member
        for idx in 0..n {
            if class_of[idx] != usize::MAX {
                continue;
            }
            let tuple = tuple_of_index(idx, t, order);
            let neg: Vec<i8> = tuple.iter().map(|v| -v).collect();
            let rev: Vec<i8> = tuple.iter().rev().copied().collect();
            let negrev: Vec<i8> = rev.iter().map(|v| -v).collect();
            for member in [&tuple, &neg, &rev, &negrev] {
                class_of[tuple_index(member, t)] = next;
            }
            next += 1;
        }
        SymmetryTable { class_of, class_count: next }
    }

    /// Aggregates raw counts into class counts.
    pub fn project(&self, counts: &[u64]) -> Vec<u64> {
        let mut out = vec![0u64; self.class_count];
        for (bin, &c) in counts.iter().enumerate() {
            out[self.class_of[bin]] += c;
        }
        out
    }
}

/// Normalized feature vector (horizontal block first, then vertical).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpamFeature {
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

impl SpamFeature {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, w: &[f64]) -> f64 {
        self.values.iter().zip(w).map(|(a, b)| a * b).sum()
    }
}

/// Unnormalized feature counts (symmetrized if configured), h then v.
pub fn feature_counts(hists: &HistogramPair, cfg: &SpamConfig, table: Option<&SymmetryTable>) -> Vec<u64> {
    let mut out = Vec::with_capacity(cfg.dimension());
    for h in [&hists.horizontal, &hists.vertical] {
        match (cfg.symmetrize, table) {
            (true, Some(tab)) => out.extend(tab.project(&h.counts)),
            (true, None) => out.extend(SymmetryTable::build(cfg.t, cfg.cooc_order).project(&h.counts)),
            (false, _) => out.extend_from_slice(&h.counts),
        }
    }
    out
}

pub fn normalize_counts(counts: &[u64], norm: Normalization) -> SpamFeature {
    let raw: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    let scale = match norm {
        Normalization::L2 => raw.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Normalization::L1 => raw.iter().sum::<f64>(),
        Normalization::None => 1.0,
    };
    let scale = if scale > 0.0 { scale } else { 1.0 };
    SpamFeature { values: raw.iter().map(|v| v / scale).collect(), normalization: norm }
}

/// Full extraction pipeline.
pub fn extract_spam(x: &ImagePatch, cfg: &SpamConfig) -> Result<SpamFeature> {
    if x.width() < 8 || x.height() < 8 {
        return Err(Error::invalid("SPAM extraction needs at least an 8x8 patch"));
    }
    let hists = histograms(x, cfg)?;
    Ok(normalize_counts(&feature_counts(&hists, cfg, None), cfg.normalization))
}

/// Same as [`extract_spam`] with a prebuilt symmetry table, for batch use.
pub fn extract_spam_with(x: &ImagePatch, cfg: &SpamConfig, table: &SymmetryTable) -> Result<SpamFeature> {
    if x.width() < 8 || x.height() < 8 {
        return Err(Error::invalid("SPAM extraction needs at least an 8x8 patch"));
    }
    let hists = histograms(x, cfg)?;
    Ok(normalize_counts(&feature_counts(&hists, cfg, Some(table)), cfg.normalization))
}

/// One histogram bin gaining or losing a count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinChange {
    pub direction: Direction,
    pub bin: usize,
    pub delta: i64,
}

/// Histogram changes caused by adding `delta` to pixel (`i`, `j`), without
/// modifying anything. Appends to `out`.
pub fn edit_effect(
    x: &ImagePatch,
    (i, j): (usize, usize),
    delta: i32,
    cfg: &SpamConfig,
    out: &mut Vec<BinChange>,
) -> Result<()> {
    let (w, h) = x.dims();
    if i >= h || j >= w {
        return Err(Error::invalid(format!("pixel ({i},{j}) outside {w}x{h}")));
    }
    let newv = i32::from(x.get(i, j)) + delta;
    if !(0..=255).contains(&newv) {
        return Err(Error::invalid(format!("edit moves pixel ({i},{j}) to {newv}")));
    }
    if delta == 0 {
        return Ok(());
    }
    let px = x.pixels();
    // horizontal: line = row i, position j
    line_effect(w, j, delta, cfg, Direction::Horizontal, |t| i32::from(px[i * w + t]), out);
    line_effect(h, i, delta, cfg, Direction::Vertical, |t| i32::from(px[t * w + j]), out);
    Ok(())
}

/// Effect along one line of length `len` where position `pos` changes by `delta`.
fn line_effect(
    len: usize,
    pos: usize,
    delta: i32,
    cfg: &SpamConfig,
    direction: Direction,
    pixel: impl Fn(usize) -> i32,
    out: &mut Vec<BinChange>,
) {
    let order = cfg.cooc_order;
    let Some(rlen) = len.checked_sub(SUPPORT - 1) else { return };
    if rlen < order {
        return;
    }
    let sites = rlen - order + 1;
    // residual k covers pixels k..k+3
    let kmin = pos.saturating_sub(SUPPORT - 1);
    let kmax = pos.min(rlen - 1);
    if kmin > kmax {
        return;
    }
    let smin = kmin.saturating_sub(order - 1);
    let smax = kmax.min(sites - 1);
    if smin > smax {
        return;
    }
    let wlo = smin;
    let whi = smax + order - 1; // inclusive residual window
    let mut old_q = [0i8; 32];
    let mut new_q = [0i8; 32];
    debug_assert!(whi - wlo < 32);
    for (slot, k) in (wlo..=whi).enumerate() {
        let mut r_old = 0;
        let mut r_new = 0;
        for (tap, &c) in RESIDUAL_TAPS.iter().enumerate() {
            let p = pixel(k + tap);
            r_old += c * p;
            r_new += c * if k + tap == pos { p + delta } else { p };
        }
        old_q[slot] = quantize_value(f64::from(r_old), cfg.q, cfg.t);
        new_q[slot] = if r_new == r_old { old_q[slot] } else { quantize_value(f64::from(r_new), cfg.q, cfg.t) };
    }
    for s in smin..=smax {
        let a = s - wlo;
        let ob = tuple_index(&old_q[a..a + order], cfg.t);
        let nb = tuple_index(&new_q[a..a + order], cfg.t);
        if ob != nb {
            out.push(BinChange { direction, bin: ob, delta: -1 });
            out.push(BinChange { direction, bin: nb, delta: 1 });
        }
    }
}

pub fn apply_changes(hists: &mut HistogramPair, changes: &[BinChange]) {
    for c in changes {
        let h = hists.get_mut(c.direction);
        h.counts[c.bin] = (h.counts[c.bin] as i64 + c.delta) as u64;
    }
}

/// Adds `delta` to pixel (`i`, `j`) of `x` and updates `hists` to match,
/// equal to recomputing both histograms from scratch.
pub fn incremental_update(
    x: &mut ImagePatch,
    hists: &mut HistogramPair,
    pixel: (usize, usize),
    delta: i32,
    cfg: &SpamConfig,
) -> Result<()> {
    let mut changes = Vec::with_capacity(32);
    edit_effect(x, pixel, delta, cfg, &mut changes)?;
    apply_changes(hists, &changes);
    let v = i32::from(x.get(pixel.0, pixel.1)) + delta;
    x.set(pixel.0, pixel.1, v as u8);
    Ok(())
}

/// Writes features as CSV: a `#config=<fingerprint>` line, a header row
/// `id,label,f0..fN`, then one feature per row.
pub fn write_feature_csv<W: Write>(
    out: W,
    cfg: &SpamConfig,
    rows: &[(String, u8, SpamFeature)],
) -> Result<()> {
    let mut out = out;
    writeln!(out, "#config={}", cfg.fingerprint()).map_err(|e| Error::io("<feature csv>", e))?;
    let mut w = csv::Writer::from_writer(out);
    let dim = rows.first().map_or(cfg.dimension(), |r| r.2.dimension());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..dim).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for (id, label, f) in rows {
        let mut rec = vec![id.clone(), label.to_string()];
        rec.extend(f.values.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<feature csv>", e))?;
    Ok(())
}
