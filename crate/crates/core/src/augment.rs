//! SpecAugment on feature sequences: time warping, frequency masking and
//! time masking. Shapes, labels and metadata never change.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::synthcorpus::SentimentExample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentPolicy {
    pub enabled: bool,
    /// Time-warp radius W in frames.
    pub warp_w: usize,
    /// Max frequency-mask width F in bins.
    pub freq_f: usize,
    /// Number of frequency masks.
    pub freq_masks: usize,
    /// Max time-mask width in frames.
    pub time_t: usize,
    /// Upper bound on one time mask as a fraction of the sequence length.
    pub time_p: f64,
    /// Number of time masks.
    pub time_masks: usize,
    pub mask_value: f32,
}

impl Default for SpecAugmentPolicy {
    /// The LibriSpeech-basic (LB) row: W=80, F=27, mF=1, T=100, p=1.0, mT=1.
    fn default() -> Self {
        Self {
            enabled: true,
            warp_w: 80,
            freq_f: 27,
            freq_masks: 1,
            time_t: 100,
            time_p: 1.0,
            time_masks: 1,
            mask_value: 0.0,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.time_p) {
            return Err(Error::InvalidArgument(format!(
                "augment.time_p must lie in [0, 1], got {}",
                self.time_p
            )));
        }
        if !self.mask_value.is_finite() {
            return Err(Error::NonFinite("augment.mask_value".into()));
        }
        Ok(())
    }
}

/// Sets bins `start..start + width` of every frame to `value`.
pub fn mask_bins(seq: &mut FeatureSequence, start: usize, width: usize, value: f32) {
    let d = seq.dim();
    let end = (start + width).min(d);
    for frame in seq.values_mut().chunks_mut(d) {
        frame[start.min(end)..end].iter_mut().for_each(|v| *v = value);
    }
}

/// Sets frames `start..start + width` to `value`.
pub fn mask_frames(seq: &mut FeatureSequence, start: usize, width: usize, value: f32) {
    let d = seq.dim();
    let end = (start + width).min(seq.len());
    seq.values_mut()[start.min(end) * d..end * d]
        .iter_mut()
        .for_each(|v| *v = value);
}

/// `masks` frequency masks, each of width `~U{0..=max_width}` at a uniform
/// start.
pub fn freq_mask<R: Rng>(
    seq: &FeatureSequence,
    max_width: usize,
    masks: usize,
    value: f32,
    rng: &mut R,
) -> Result<FeatureSequence> {
    let d = seq.dim();
    if max_width > d {
        return Err(Error::InvalidArgument(format!(
            "frequency mask width {max_width} exceeds feature dim {d}"
        )));
    }
    let mut out = seq.clone();
    for _ in 0..masks {
        let f = rng.random_range(0..=max_width);
        let f0 = rng.random_range(0..=d - f);
        mask_bins(&mut out, f0, f, value);
    }
    Ok(out)
}

/// Largest width a single time mask may take on a `len`-frame sequence.
pub fn time_mask_cap(len: usize, max_width: usize, p: f64) -> usize {
    max_width.min((p * len as f64).floor() as usize)
}

pub fn time_mask<R: Rng>(
    seq: &FeatureSequence,
    max_width: usize,
    masks: usize,
    p: f64,
    value: f32,
    rng: &mut R,
) -> FeatureSequence {
    let t = seq.len();
    let cap = time_mask_cap(t, max_width, p);
    let mut out = seq.clone();
    for _ in 0..masks {
        let w = rng.random_range(0..=cap);
        let t0 = rng.random_range(0..=t - w);
        mask_frames(&mut out, t0, w, value);
    }
    out
}

/// Piecewise-linear time warp moving frame `anchor` to `anchor + shift`,
/// with both endpoints fixed.
pub fn warp_frames(seq: &FeatureSequence, anchor: usize, shift: isize) -> FeatureSequence {
    let t = seq.len();
    let dest = anchor as isize + shift;
    if shift == 0 || t < 3 || dest <= 0 || dest >= t as isize - 1 {
        return seq.clone();
    }
    let (a, b, last) = (anchor as f64, dest as f64, (t - 1) as f64);
    let d = seq.dim();
    let src = seq.values();
    let mut out = seq.clone();
    for (i, frame) in out.values_mut().chunks_mut(d).enumerate() {
        let i = i as f64;
        let pos = if i <= b {
            i * a / b
        } else {
            a + (i - b) * (last - a) / (last - b)
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = (pos - lo as f64) as f32;
        for j in 0..d {
            let (x0, x1) = (src[lo * d + j], src[hi * d + j]);
            frame[j] = x0 + frac * (x1 - x0);
        }
    }
    out
}

/// Random time warp with radius `w`; a no-op unless `T > 2W`.
pub fn time_warp<R: Rng>(seq: &FeatureSequence, w: usize, rng: &mut R) -> FeatureSequence {
    let t = seq.len();
    if w == 0 || t <= 2 * w {
        return seq.clone();
    }
    let anchor = rng.random_range(w..t - w);
    let shift = rng.random_range(-(w as i64)..=w as i64) as isize;
    warp_frames(seq, anchor, shift)
}

/// Warp, then frequency masks, then time masks.
pub fn augment_features<R: Rng>(
    seq: &FeatureSequence,
    policy: &SpecAugmentPolicy,
    rng: &mut R,
) -> Result<FeatureSequence> {
    policy.validate()?;
    if !policy.enabled {
        return Ok(seq.clone());
    }
    let warped = time_warp(seq, policy.warp_w, rng);
    let masked = freq_mask(&warped, policy.freq_f, policy.freq_masks, policy.mask_value, rng)?;
    Ok(time_mask(
        &masked,
        policy.time_t,
        policy.time_masks,
        policy.time_p,
        policy.mask_value,
        rng,
    ))
}

/// Augments an example's features; label, speaker, alignment and cue span
/// are carried over untouched.
pub fn apply_policy<R: Rng>(
    example: &SentimentExample,
    policy: &SpecAugmentPolicy,
    rng: &mut R,
) -> Result<SentimentExample> {
    Ok(SentimentExample {
        features: augment_features(&example.features, policy, rng)?,
        ..example.clone()
    })
}
