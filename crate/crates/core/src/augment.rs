//! Augmentation bank applied to `T × C` windows before embedding.
//!
//! All transforms preserve shape and are the identity when their intensity
//! parameter is zero. Randomness comes only from the caller's RNG.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dft, idft, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Flip,
    MaskTime,
    MaskFreq,
    MaskChannel,
    Jitter,
    Dropout,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 6] = [
        Self::Flip,
        Self::MaskTime,
        Self::MaskFreq,
        Self::MaskChannel,
        Self::Jitter,
        Self::Dropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Flip => "flip",
            Self::MaskTime => "mask_time",
            Self::MaskFreq => "mask_freq",
            Self::MaskChannel => "mask_channel",
            Self::Jitter => "jitter",
            Self::Dropout => "dropout",
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown augmentation {s:?}; expected one of flip, mask_time, mask_freq, mask_channel, jitter, dropout"
                ))
            })
    }
}

/// Parses a comma-separated kind list such as `"flip,jitter"`. An empty
/// string or `none` selects nothing.
pub fn parse_kinds(s: &str) -> Result<Vec<AugmentationKind>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    let mut kinds = s.split(',').map(str::parse).collect::<Result<Vec<_>>>()?;
    kinds.sort();
    kinds.dedup();
    Ok(kinds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub kinds: Vec<AugmentationKind>,
    /// Flip probability.
    pub prob: f64,
    /// Masking and dropout proportion.
    pub ratio: f64,
    /// Jitter amplitude.
    pub scale: f64,
    pub rng_seed: u64,
    /// One draw shared by every granularity instead of one per granularity.
    pub shared_draw: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            kinds: vec![AugmentationKind::Flip, AugmentationKind::Jitter],
            prob: 0.5,
            ratio: 0.1,
            scale: 0.1,
            rng_seed: 0,
            shared_draw: false,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            kinds: Vec::new(),
            ..Self::default()
        }
    }

    pub fn is_enabled(&self) -> bool {
        !self.kinds.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::Config(format!("aug_prob {} outside [0, 1]", self.prob)));
        }
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("aug_ratio {} outside [0, 1)", self.ratio)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("aug_scale {} must be positive", self.scale)));
        }
        Ok(())
    }

    /// Applies the selected transforms in canonical order.
    pub fn apply<T: Scalar, R: Rng + ?Sized>(&self, seg: &Tensor<T>, rng: &mut R) -> Tensor<T> {
        let mut x = seg.clone();
        for &kind in &self.kinds {
            x = match kind {
                AugmentationKind::Flip => flip(&x, self.prob, rng),
                AugmentationKind::MaskTime => mask_time(&x, self.ratio, rng),
                AugmentationKind::MaskFreq => mask_freq(&x, self.ratio, rng),
                AugmentationKind::MaskChannel => mask_channel(&x, self.ratio, rng),
                AugmentationKind::Jitter => jitter(&x, self.scale, rng),
                AugmentationKind::Dropout => dropout(&x, self.ratio, rng),
            };
        }
        x
    }
}

fn masked_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).min(n)
}

/// Reverses the time axis with probability `prob`.
pub fn flip<T: Scalar, R: Rng + ?Sized>(seg: &Tensor<T>, prob: f64, rng: &mut R) -> Tensor<T> {
    if prob <= 0.0 || !rng.random_bool(prob.min(1.0)) {
        return seg.clone();
    }
    let t = seg.rows();
    let mut out = seg.clone();
    for r in 0..t {
        out.row_mut(r).copy_from_slice(seg.row(t - 1 - r));
    }
    out
}

/// Zeros exactly `round(ratio·T)` timestamps across all channels.
pub fn mask_time<T: Scalar, R: Rng + ?Sized>(seg: &Tensor<T>, ratio: f64, rng: &mut R) -> Tensor<T> {
    let t = seg.rows();
    let k = masked_count(ratio, t);
    let mut out = seg.clone();
    if k == 0 {
        return out;
    }
    for r in index::sample(rng, t, k) {
        out.row_mut(r).fill(T::zero());
    }
    out
}

/// Zeros exactly `round(ratio·C)` channels over every timestamp.
pub fn mask_channel<T: Scalar, R: Rng + ?Sized>(seg: &Tensor<T>, ratio: f64, rng: &mut R) -> Tensor<T> {
    let (t, c) = (seg.rows(), seg.cols());
    let k = masked_count(ratio, c);
    let mut out = seg.clone();
    if k == 0 {
        return out;
    }
    for ch in index::sample(rng, c, k) {
        for r in 0..t {
            out.set(r, ch, T::zero());
        }
    }
    out
}

/// Adds `scale · U[0, 1)` noise to every value.
pub fn jitter<T: Scalar, R: Rng + ?Sized>(seg: &Tensor<T>, scale: f64, rng: &mut R) -> Tensor<T> {
    let s = T::lit(scale);
    seg.map(|v| v + s * T::lit(rng.random::<f64>()))
}

/// Zeros each value independently with probability `ratio`; survivors are
/// not rescaled.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(seg: &Tensor<T>, ratio: f64, rng: &mut R) -> Tensor<T> {
    if ratio <= 0.0 {
        return seg.clone();
    }
    seg.map(|v| if rng.random_bool(ratio) { T::zero() } else { v })
}

/// Number of distinct frequency bins of a real series of length `t`.
pub fn unique_bins(t: usize) -> usize {
    t / 2 + 1
}

/// Zeros `round(ratio · (T/2+1))` randomly chosen frequency bins per channel.
pub fn mask_freq<T: Scalar, R: Rng + ?Sized>(seg: &Tensor<T>, ratio: f64, rng: &mut R) -> Tensor<T> {
    let bins = unique_bins(seg.rows());
    let k = masked_count(ratio, bins);
    let mut out = seg.clone();
    if k == 0 {
        return out;
    }
    for ch in 0..seg.cols() {
        let chosen: Vec<usize> = index::sample(rng, bins, k).into_vec();
        let (col, _) = mask_channel_bins(seg, ch, &chosen);
        for (r, v) in col.into_iter().enumerate() {
            out.set(r, ch, v);
        }
    }
    out
}

/// Zeros the given bins (`0..=T/2`, together with their conjugate partners)
/// in every channel. Returns the masked series and the largest imaginary
/// component left by the inverse transform.
pub fn mask_freq_bins<T: Scalar>(seg: &Tensor<T>, bins: &[usize]) -> (Tensor<T>, T) {
    let mut out = seg.clone();
    let mut residue = T::zero();
    for ch in 0..seg.cols() {
        let (col, r) = mask_channel_bins(seg, ch, bins);
        residue = residue.max(r);
        for (t, v) in col.into_iter().enumerate() {
            out.set(t, ch, v);
        }
    }
    (out, residue)
}

fn mask_channel_bins<T: Scalar>(seg: &Tensor<T>, ch: usize, bins: &[usize]) -> (Vec<T>, T) {
    let t = seg.rows();
    let series: Vec<T> = (0..t).map(|r| seg.at(r, ch)).collect();
    let mut spec = dft(&series);
    let zero = Complex::new(T::zero(), T::zero());
    for &b in bins {
        spec[b % t] = zero;
        spec[(t - b % t) % t] = zero;
    }
    let back = idft(&spec);
    let residue = back.iter().map(|c| c.im.abs()).fold(T::zero(), T::max);
    (back.into_iter().map(|c| c.re).collect(), residue)
}
