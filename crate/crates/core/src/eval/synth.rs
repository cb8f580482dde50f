//! Seeded stand-in corpus with a known, removable bias.
//!
//! Each utterance is a gated harmonic signal over white noise. The class
//! cue is which pair of 250 Hz harmonics is strong: low harmonics for mask,
//! high ones for non-mask. A nuisance tone whose presence is tied to the
//! class in the training split only, and left independent of it in dev and
//! test, supplies the amplitude bias.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dsp::{encode_wav, Waveform};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label, Provenance, Record, Split};

/// 250 Hz is bin 16 of the canonical 1024-point FFT at 16 kHz, which keeps
/// every synthetic tone phase-stationary across STFT frames.
pub const FUNDAMENTAL_HZ: f64 = 250.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    /// Fraction of mask utterances in the training split.
    pub train_mask_fraction: f64,
    pub sample_rate: u32,
    pub samples: usize,
    pub mask_harmonics: Vec<usize>,
    pub non_mask_harmonics: Vec<usize>,
    /// Amplitude range of the harmonics carrying the class cue.
    pub cue_amplitude: (f64, f64),
    /// The other class's harmonics stay present at up to this amplitude.
    pub leak_amplitude: f64,
    pub nuisance_harmonic: usize,
    pub nuisance_amplitude: f64,
    /// Probability of the nuisance tone for (mask, non-mask) training utterances.
    pub nuisance_train_rate: (f64, f64),
    /// Same probability for both classes outside the training split.
    pub nuisance_eval_rate: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            train: 400,
            dev: 200,
            test: 200,
            train_mask_fraction: 0.6,
            sample_rate: 16_000,
            samples: 16_000,
            mask_harmonics: vec![3, 4],
            non_mask_harmonics: vec![5, 6],
            cue_amplitude: (0.15, 0.6),
            leak_amplitude: 0.15,
            nuisance_harmonic: 13,
            nuisance_amplitude: 0.8,
            nuisance_train_rate: (0.9, 0.1),
            nuisance_eval_rate: 0.5,
            noise_std: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate as f64 / 2.0;
        let harmonics = self.mask_harmonics.iter().chain(&self.non_mask_harmonics).chain([&self.nuisance_harmonic]);
        if harmonics.clone().any(|&h| h == 0 || h as f64 * FUNDAMENTAL_HZ >= nyquist) {
            return Err(Error::Config("synthetic harmonics must lie strictly between 0 Hz and Nyquist".into()));
        }
        if self.mask_harmonics.is_empty() || self.non_mask_harmonics.is_empty() {
            return Err(Error::Config("each class needs at least one cue harmonic".into()));
        }
        let rates = [self.train_mask_fraction, self.nuisance_train_rate.0, self.nuisance_train_rate.1, self.nuisance_eval_rate];
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("synthetic rates must lie in [0, 1]".into()));
        }
        if self.train < 2 || self.dev < 2 || self.test < 2 || self.samples < 1024 {
            return Err(Error::Config("synthetic splits need at least 2 utterances and 1024 samples each".into()));
        }
        let (lo, hi) = self.cue_amplitude;
        if !(0.0 <= lo && lo <= hi) || self.leak_amplitude < 0.0 || self.noise_std < 0.0 || self.nuisance_amplitude < 0.0 {
            return Err(Error::Config("synthetic amplitudes must be nonnegative with lo <= hi".into()));
        }
        Ok(())
    }
}

/// Manifest rows aligned with in-memory waveforms.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub manifest: DatasetManifest,
    pub waveforms: Vec<Waveform<f64>>,
    /// Whether each utterance carries the nuisance tone.
    pub nuisance: Vec<bool>,
}

/// Labels for one split: exact class counts, interleaved deterministically.
fn split_labels(n: usize, mask_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<Label> {
    let n_mask = ((n as f64) * mask_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n_mask { Label::Mask } else { Label::NonMask }).collect();
    rand::seq::SliceRandom::shuffle(labels.as_mut_slice(), rng);
    labels
}

fn utterance(cfg: &SynthConfig, label: Label, nuisance: bool, rng: &mut ChaCha8Rng) -> Waveform<f64> {
    let fs = cfg.sample_rate as f64;
    let (cue, other) = match label {
        Label::Mask => (&cfg.mask_harmonics, &cfg.non_mask_harmonics),
        Label::NonMask => (&cfg.non_mask_harmonics, &cfg.mask_harmonics),
    };
    let mut tones: Vec<(usize, f64, f64)> = Vec::new();
    for &h in cue {
        tones.push((h, rng.random_range(cfg.cue_amplitude.0..=cfg.cue_amplitude.1), rng.random_range(0.0..TAU)));
    }
    for &h in other {
        tones.push((h, rng.random_range(0.0..=cfg.leak_amplitude), rng.random_range(0.0..TAU)));
    }
    if nuisance {
        tones.push((cfg.nuisance_harmonic, cfg.nuisance_amplitude * rng.random_range(0.8..=1.0), rng.random_range(0.0..TAU)));
    }
    // voiced segment with raised-cosine edges
    let n = cfg.samples;
    let len = rng.random_range(n / 2..=n * 3 / 4);
    let start = rng.random_range(0..=n - len);
    let ramp = (n / 32).max(1);
    let samples = (0..n)
        .map(|i| {
            let gate = if i < start || i >= start + len {
                0.0
            } else {
                let d = (i - start).min(start + len - 1 - i);
                if d >= ramp {
                    1.0
                } else {
                    0.5 - 0.5 * (std::f64::consts::PI * d as f64 / ramp as f64).cos()
                }
            };
            let t = i as f64 / fs;
            let voiced: f64 = tones.iter().map(|&(h, a, p)| a * (TAU * FUNDAMENTAL_HZ * h as f64 * t + p).sin()).sum();
            let noise: f64 = rng.sample(StandardNormal);
            gate * voiced + cfg.noise_std * noise
        })
        .collect();
    Waveform::new(samples, cfg.sample_rate)
}

/// Synthesizes the corpus; ids are `<split>_<index>` with `wav/<id>.wav` paths.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut waveforms = Vec::new();
    let mut nuisance = Vec::new();
    for (split, n, fraction) in [(Split::Train, cfg.train, cfg.train_mask_fraction), (Split::Dev, cfg.dev, 0.5), (Split::Test, cfg.test, 0.5)] {
        for (i, label) in split_labels(n, fraction, &mut rng).into_iter().enumerate() {
            let rate = match (split, label) {
                (Split::Train, Label::Mask) => cfg.nuisance_train_rate.0,
                (Split::Train, Label::NonMask) => cfg.nuisance_train_rate.1,
                _ => cfg.nuisance_eval_rate,
            };
            let tone = rng.random_bool(rate);
            let id = format!("{split}_{i:04}");
            waveforms.push(utterance(cfg, label, tone, &mut rng));
            nuisance.push(tone);
            records.push(Record { path: format!("wav/{id}.wav").into(), id, label, split, provenance: Provenance::Original });
        }
    }
    Ok(SyntheticCorpus { manifest: DatasetManifest::new(records)?, waveforms, nuisance })
}

impl SyntheticCorpus {
    /// Writes `manifest.csv` and 16-bit WAV files under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("wav"))?;
        for (r, w) in self.manifest.records.iter().zip(&self.waveforms) {
            crate::io::write_atomic(&dir.join(&r.path), &encode_wav(&crate::dsp::normalize_peak(w)?))?;
        }
        let mut csv = Vec::new();
        self.manifest.write(&mut csv)?;
        crate::io::write_atomic(&dir.join("manifest.csv"), &csv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { train: 20, dev: 10, test: 10, samples: 4000, ..SynthConfig::default() }
    }

    #[test]
    fn split_sizes_and_balance() {
        let c = synthesize(&small(), 3).unwrap();
        assert_eq!(c.manifest.class_counts(Split::Train), [12, 8]);
        assert_eq!(c.manifest.class_counts(Split::Dev), [5, 5]);
        assert_eq!(c.manifest.class_counts(Split::Test), [5, 5]);
        assert!(c.waveforms.iter().all(|w| w.len() == 4000 && w.samples.iter().all(|s| s.is_finite())));
    }

    #[test]
    fn nuisance_follows_the_configured_rates() {
        let cfg = SynthConfig { train: 400, dev: 20, test: 20, samples: 1024, ..SynthConfig::default() };
        let c = synthesize(&cfg, 1).unwrap();
        let rate = |label: Label| {
            let idx: Vec<usize> =
                (0..c.manifest.len()).filter(|&i| c.manifest.records[i].split == Split::Train && c.manifest.records[i].label == label).collect();
            idx.iter().filter(|&&i| c.nuisance[i]).count() as f64 / idx.len() as f64
        };
        assert!((rate(Label::Mask) - 0.9).abs() < 0.06);
        assert!((rate(Label::NonMask) - 0.1).abs() < 0.07);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synthesize(&small(), 9).unwrap();
        let b = synthesize(&small(), 9).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.waveforms, b.waveforms);
        assert_ne!(a.waveforms, synthesize(&small(), 10).unwrap().waveforms);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(synthesize(&SynthConfig { nuisance_harmonic: 40, ..small() }, 0).is_err());
        assert!(synthesize(&SynthConfig { train_mask_fraction: 1.5, ..small() }, 0).is_err());
    }
}
