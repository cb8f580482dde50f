//! Baseline augmentations: additive noise at a target SNR, circular time
//! shift, speed perturbation, and SpecAugment-style band masking.
//!
//! Every function takes its seed explicitly; identical inputs and seeds give
//! bit-identical outputs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugmentationKind {
    Noise,
    TimeShift,
    Speed,
    SpecMask,
}

impl AugmentationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Noise => "noise",
            Self::TimeShift => "time_shift",
            Self::Speed => "speed",
            Self::SpecMask => "spec_mask",
        }
    }

    /// Whether the augmentation acts on the waveform rather than the spectrogram.
    pub fn is_waveform(self) -> bool {
        !matches!(self, Self::SpecMask)
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
        match s {
            "noise" => Ok(Self::Noise),
            "time_shift" => Ok(Self::TimeShift),
            "speed" => Ok(Self::Speed),
            "spec_mask" => Ok(Self::SpecMask),
            other => Err(Error::Config(format!("unknown augmentation kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub kind: AugmentationKind,
    /// SNR levels in dB; one is drawn per utterance.
    pub snr_db: Vec<f64>,
    pub max_shift_fraction: f64,
    /// Speed ratios; one is drawn per utterance.
    pub speed_factors: Vec<f64>,
    pub freq_mask_max: usize,
    pub time_mask_max: usize,
    pub masks_per_axis: usize,
    pub rng_seed: u64,
}

impl AugmentationConfig {
    pub fn new(kind: AugmentationKind) -> Self {
        Self {
            kind,
            snr_db: vec![10.0, 15.0, 20.0],
            max_shift_fraction: 0.2,
            speed_factors: vec![0.9, 1.1],
            freq_mask_max: 50,
            time_mask_max: 25,
            masks_per_axis: 2,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("snr_db must be a nonempty list of finite values".into()));
        }
        if !(self.max_shift_fraction > 0.0 && self.max_shift_fraction <= 1.0) {
            return Err(Error::Config("max_shift_fraction must lie in (0, 1]".into()));
        }
        if self.speed_factors.is_empty() || self.speed_factors.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config("speed factors must be positive".into()));
        }
        Ok(())
    }

    /// Applies a waveform augmentation, drawing per-utterance settings from `seed`.
    pub fn apply_waveform<T: Scalar>(&self, w: &Waveform<T>, seed: u64) -> Result<Waveform<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self.kind {
            AugmentationKind::Noise => {
                let snr = self.snr_db[rng.random_range(0..self.snr_db.len())];
                perturb_noise(w, snr, rng.random())
            }
            AugmentationKind::TimeShift => time_shift(w, self.max_shift_fraction, rng.random()),
            AugmentationKind::Speed => {
                let f = self.speed_factors[rng.random_range(0..self.speed_factors.len())];
                perturb_speed(w, f)
            }
            AugmentationKind::SpecMask => Err(Error::Config(
                "spec_mask operates on spectrograms, not waveforms".into(),
            )),
        }
    }
}

/// Adds seeded white Gaussian noise scaled so the expected SNR is `snr_db`.
pub fn perturb_noise<T: Scalar>(w: &Waveform<T>, snr_db: f64, seed: u64) -> Result<Waveform<T>> {
    if !snr_db.is_finite() {
        return Err(Error::Parameter(format!("snr_db must be finite, got {snr_db}")));
    }
    let p_signal = w.power().as_f64();
    if !(p_signal > 0.0) {
        return Err(Error::DegenerateInput("SNR is undefined for a silent signal".into()));
    }
    // unit-variance noise, so E[P_noise] = alpha^2
    let alpha = (p_signal / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = w
        .samples
        .iter()
        .map(|&s| {
            let n: f64 = rng.sample(StandardNormal);
            s + T::of(alpha * n)
        })
        .collect();
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

/// Circular rotation to the right by `shift` samples (negative rotates left).
pub fn rotate<T: Scalar>(w: &Waveform<T>, shift: isize) -> Waveform<T> {
    let mut samples = w.samples.clone();
    if !samples.is_empty() {
        let k = shift.rem_euclid(samples.len() as isize) as usize;
        samples.rotate_right(k);
    }
    Waveform { samples, sample_rate: w.sample_rate }
}

/// Rotates by a shift drawn uniformly from `[-f L, f L]`.
pub fn time_shift<T: Scalar>(w: &Waveform<T>, max_shift_fraction: f64, seed: u64) -> Result<Waveform<T>> {
    if w.is_empty() {
        return Err(Error::DegenerateInput("cannot shift an empty signal".into()));
    }
    if !(max_shift_fraction > 0.0 && max_shift_fraction <= 1.0) {
        return Err(Error::Parameter("max_shift_fraction must lie in (0, 1]".into()));
    }
    let bound = (max_shift_fraction * w.len() as f64).floor() as i64;
    let d = ChaCha8Rng::seed_from_u64(seed).random_range(-bound..=bound);
    Ok(rotate(w, d as isize))
}

/// Linear-interpolation resampling at stride `factor`, then center crop or
/// symmetric zero padding back to the input length.
pub fn perturb_speed<T: Scalar>(w: &Waveform<T>, factor: f64) -> Result<Waveform<T>> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Parameter(format!("speed factor must be positive, got {factor}")));
    }
    let len = w.len();
    if factor == 1.0 || len < 2 {
        return Ok(w.clone());
    }
    let resampled_len = ((len - 1) as f64 / factor).floor() as usize + 1;
    let resampled: Vec<T> = (0..resampled_len)
        .map(|i| {
            let pos = i as f64 * factor;
            let j = (pos.floor() as usize).min(len - 1);
            let frac = pos - j as f64;
            if j + 1 < len {
                w.samples[j] * T::of(1.0 - frac) + w.samples[j + 1] * T::of(frac)
            } else {
                w.samples[j]
            }
        })
        .collect();
    let samples = if resampled_len >= len {
        let start = (resampled_len - len) / 2;
        resampled[start..start + len].to_vec()
    } else {
        let left = (len - resampled_len) / 2;
        let mut out = vec![T::zero(); len];
        out[left..left + resampled_len].copy_from_slice(&resampled);
        out
    };
    Ok(Waveform { samples, sample_rate: w.sample_rate })
}

/// Zeroes frequency rows `start..start + width` in both planes.
pub fn mask_bins<T: Scalar>(s: &mut Spectrogram<T>, start: usize, width: usize) {
    let end = (start + width).min(s.freq_bins);
    for c in 0..2 {
        for k in start..end {
            for m in 0..s.time_bins {
                s.set(c, k, m, T::zero());
            }
        }
    }
}

/// Zeroes time columns `start..start + width` in both planes.
pub fn mask_frames<T: Scalar>(s: &mut Spectrogram<T>, start: usize, width: usize) {
    let end = (start + width).min(s.time_bins);
    for c in 0..2 {
        for k in 0..s.freq_bins {
            for m in start..end {
                s.set(c, k, m, T::zero());
            }
        }
    }
}

/// Draws `masks_per_axis` frequency bands and time bands with widths
/// uniform in `0..=max` and zeroes them.
pub fn spec_mask<T: Scalar>(s: &Spectrogram<T>, cfg: &AugmentationConfig, seed: u64) -> Result<Spectrogram<T>> {
    if cfg.freq_mask_max > s.freq_bins || cfg.time_mask_max > s.time_bins {
        return Err(Error::Parameter(format!(
            "mask widths ({}, {}) exceed spectrogram axes ({}, {})",
            cfg.freq_mask_max, cfg.time_mask_max, s.freq_bins, s.time_bins
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = s.clone();
    for _ in 0..cfg.masks_per_axis {
        let u = rng.random_range(0..=cfg.freq_mask_max);
        let k0 = rng.random_range(0..=s.freq_bins - u);
        mask_bins(&mut out, k0, u);
    }
    for _ in 0..cfg.masks_per_axis {
        let u = rng.random_range(0..=cfg.time_mask_max);
        let m0 = rng.random_range(0..=s.time_bins - u);
        mask_frames(&mut out, m0, u);
    }
    Ok(out)
}
