//! Waveforms, WAV decoding, and the complex STFT featurization.

mod spg;
mod stft;
mod toy;
mod wav;

pub use spg::{read_spg, write_spg, SPG_MAGIC};
pub use stft::{hamming_periodic, istft, stft};
pub use toy::{reduce_to_toy, TOY_BINS, TOY_FRAMES, TOY_POOL, TOY_SIDE};
pub use wav::{decode_wav, encode_wav};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Peak magnitude below which a signal is treated as silence.
pub const SILENCE_PEAK: f64 = 1e-12;

/// Mono signal with its sampling rate in Hz.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, &s| if s.abs() > m { s.abs() } else { m })
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> T {
        if self.samples.is_empty() {
            return T::zero();
        }
        let sum: T = self.samples.iter().map(|&s| s * s).sum();
        sum / T::of_usize(self.samples.len())
    }

    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform {
            samples: self.samples.iter().map(|s| U::of(s.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Divides every sample by the peak absolute value.
///
/// Signals whose peak is below [`SILENCE_PEAK`] are returned unchanged.
pub fn normalize_peak<T: Scalar>(w: &Waveform<T>) -> Result<Waveform<T>> {
    if let Some(i) = w.samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::NumericDomain(format!("sample {i} is not finite")));
    }
    let peak = w.peak();
    if peak < T::of(SILENCE_PEAK) {
        return Ok(w.clone());
    }
    Ok(Waveform {
        samples: w.samples.iter().map(|&s| s / peak).collect(),
        sample_rate: w.sample_rate,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Hamming,
}

/// Framing parameters of the STFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub fft_length: usize,
    pub hop: usize,
    pub window_length: usize,
    pub window: WindowKind,
    pub pad_each_side: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::canonical()
    }
}

impl StftConfig {
    /// 1024-point FFT, hop 64, 512-sample Hamming window, 224 samples of
    /// reflect padding per side (250 frames for a 16000-sample signal).
    pub const fn canonical() -> Self {
        Self {
            fft_length: 1024,
            hop: 64,
            window_length: 512,
            window: WindowKind::Hamming,
            pad_each_side: 224,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 {
            return Err(Error::Parameter("hop must be at least 1".into()));
        }
        if self.window_length == 0 || self.window_length > self.fft_length {
            return Err(Error::Parameter(format!(
                "window length {} must lie in 1..={}",
                self.window_length, self.fft_length
            )));
        }
        if self.fft_length % 2 != 0 {
            return Err(Error::Parameter("fft length must be even".into()));
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    /// Frame count for a signal of `len` samples, if at least one frame fits.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad_each_side;
        (padded >= self.window_length).then(|| (padded - self.window_length) / self.hop + 1)
    }

    /// Signal length reconstructed by `istft` from `frames` frames.
    pub fn signal_len(&self, frames: usize) -> usize {
        ((frames.max(1) - 1) * self.hop + self.window_length).saturating_sub(2 * self.pad_each_side)
    }
}

/// Complex spectrogram stored as two real planes `[2 x F x T]`.
///
/// Index layout is channel-major, then frequency, then time:
/// `planes[c * F * T + k * T + m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram<T> {
    pub planes: Vec<T>,
    pub freq_bins: usize,
    pub time_bins: usize,
    pub config: StftConfig,
    pub sample_rate: u32,
}

impl<T: Scalar> Spectrogram<T> {
    pub fn zeros(freq_bins: usize, time_bins: usize, config: StftConfig, sample_rate: u32) -> Self {
        Self {
            planes: vec![T::zero(); 2 * freq_bins * time_bins],
            freq_bins,
            time_bins,
            config,
            sample_rate,
        }
    }

    pub fn from_planes(
        planes: Vec<T>,
        freq_bins: usize,
        time_bins: usize,
        config: StftConfig,
        sample_rate: u32,
    ) -> Result<Self> {
        if planes.len() != 2 * freq_bins * time_bins {
            return Err(Error::Shape(format!(
                "{} values cannot fill 2x{freq_bins}x{time_bins}",
                planes.len()
            )));
        }
        Ok(Self { planes, freq_bins, time_bins, config, sample_rate })
    }

    pub fn shape(&self) -> [usize; 3] {
        [2, self.freq_bins, self.time_bins]
    }

    #[inline]
    pub fn index(&self, channel: usize, bin: usize, frame: usize) -> usize {
        (channel * self.freq_bins + bin) * self.time_bins + frame
    }

    #[inline]
    pub fn get(&self, channel: usize, bin: usize, frame: usize) -> T {
        self.planes[self.index(channel, bin, frame)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, bin: usize, frame: usize, v: T) {
        let i = self.index(channel, bin, frame);
        self.planes[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.planes.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Spectrogram<U> {
        Spectrogram {
            planes: self.planes.iter().map(|v| U::of(v.as_f64())).collect(),
            freq_bins: self.freq_bins,
            time_bins: self.time_bins,
            config: self.config,
            sample_rate: self.sample_rate,
        }
    }
}
