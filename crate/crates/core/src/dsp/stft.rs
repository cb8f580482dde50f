use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Spectrogram, StftConfig, Waveform, WindowKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Periodic Hamming window, `w[n] = 0.54 - 0.46 cos(2 pi n / len)`.
pub fn hamming_periodic<T: Scalar>(len: usize) -> Vec<T> {
    let n = T::of_usize(len);
    (0..len)
        .map(|i| T::of(0.54) - T::of(0.46) * (T::TAU() * T::of_usize(i) / n).cos())
        .collect()
}

fn window<T: Scalar>(cfg: &StftConfig) -> Vec<T> {
    match cfg.window {
        WindowKind::Hamming => hamming_periodic(cfg.window_length),
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

/// One-sided STFT with frame-local phase.
///
/// Frame `m` covers padded samples `m*hop .. m*hop + window_length`; the
/// windowed frame sits at the start of an `fft_length` buffer and the rest is
/// zero. Bins `0..=fft_length/2` are kept.
pub fn stft<T: Scalar>(w: &Waveform<T>, cfg: &StftConfig) -> Result<Spectrogram<T>> {
    cfg.validate()?;
    let len = w.samples.len();
    let frames = match cfg.frame_count(len) {
        Some(f) if len > 0 => f,
        _ => {
            return Err(Error::Length(format!(
                "{len} samples plus {} padding per side is shorter than the {}-sample window",
                cfg.pad_each_side, cfg.window_length
            )))
        }
    };
    let pad = cfg.pad_each_side as isize;
    let padded: Vec<T> = (0..len + 2 * cfg.pad_each_side)
        .map(|i| w.samples[reflect(i as isize - pad, len)])
        .collect();

    let win = window::<T>(cfg);
    let bins = cfg.freq_bins();
    let fft = FftPlanner::<T>::new().plan_fft_forward(cfg.fft_length);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); cfg.fft_length];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    let mut spec = Spectrogram::zeros(bins, frames, *cfg, w.sample_rate);
    for m in 0..frames {
        let start = m * cfg.hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = if n < cfg.window_length {
                Complex::new(padded[start + n] * win[n], T::zero())
            } else {
                Complex::new(T::zero(), T::zero())
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (k, c) in buf.iter().take(bins).enumerate() {
            spec.set(0, k, m, c.re);
            spec.set(1, k, m, c.im);
        }
    }
    Ok(spec)
}

/// Weighted overlap-add inverse of [`stft`].
///
/// Each frame is inverted with Hermitian symmetry, windowed again, summed,
/// and divided by the summed squared window. Padding is trimmed, so the
/// result has `config.signal_len(time_bins)` samples.
pub fn istft<T: Scalar>(s: &Spectrogram<T>) -> Result<Waveform<T>> {
    let cfg = &s.config;
    cfg.validate()?;
    if s.freq_bins != cfg.freq_bins() || s.time_bins == 0 {
        return Err(Error::Shape(format!(
            "spectrogram 2x{}x{} does not match a {}-point STFT",
            s.freq_bins, s.time_bins, cfg.fft_length
        )));
    }
    let n_fft = cfg.fft_length;
    let win = window::<T>(cfg);
    let total = (s.time_bins - 1) * cfg.hop + cfg.window_length;
    let mut acc = vec![T::zero(); total];
    let mut wsum = vec![T::zero(); total];
    let ifft = FftPlanner::<T>::new().plan_fft_inverse(n_fft);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n_fft];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); ifft.get_inplace_scratch_len()];
    let scale = T::one() / T::of_usize(n_fft);
    for m in 0..s.time_bins {
        for k in 0..s.freq_bins {
            buf[k] = Complex::new(s.get(0, k, m), s.get(1, k, m));
        }
        for k in 1..n_fft / 2 {
            buf[n_fft - k] = buf[k].conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = m * cfg.hop;
        for n in 0..cfg.window_length {
            acc[start + n] += buf[n].re * scale * win[n];
            wsum[start + n] += win[n] * win[n];
        }
    }
    let pad = cfg.pad_each_side;
    let len = total.saturating_sub(2 * pad);
    let mut samples = Vec::with_capacity(len);
    for i in pad..pad + len {
        if wsum[i] <= T::of(1e-12) {
            return Err(Error::Reconstruction(format!("window sum vanishes at sample {}", i - pad)));
        }
        samples.push(acc[i] / wsum[i]);
    }
    Ok(Waveform { samples, sample_rate: s.sample_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct O(N^2) DFT of one zero-padded windowed frame.
    fn naive_frame_dft(frame: &[f64], n_fft: usize) -> Vec<(f64, f64)> {
        (0..=n_fft / 2)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (n, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                (re, im)
            })
            .collect()
    }

    fn random_wave(rng: &mut ChaCha8Rng, len: usize) -> Waveform<f64> {
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000)
    }

    #[test]
    fn reflect_matches_numpy_convention() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn canonical_shape_is_2x513x250() {
        let w = random_wave(&mut ChaCha8Rng::seed_from_u64(1), 16000);
        let s = stft(&w, &StftConfig::canonical()).unwrap();
        assert_eq!(s.shape(), [2, 513, 250]);
        assert!(s.is_finite());
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let s = stft(&Waveform::new(vec![0.0f64; 16000], 16000), &StftConfig::canonical()).unwrap();
        assert_eq!(s.shape(), [2, 513, 250]);
        assert!(s.planes.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_short_signal_is_a_length_error() {
        let cfg = StftConfig { pad_each_side: 0, ..StftConfig::canonical() };
        let r = stft(&Waveform::new(vec![0.5f64; 100], 16000), &cfg);
        assert!(matches!(r, Err(Error::Length(_))));
    }

    #[test]
    fn frame_matches_naive_dft() {
        let cfg = StftConfig::canonical();
        let w = random_wave(&mut ChaCha8Rng::seed_from_u64(2), 16000);
        let s = stft(&w, &cfg).unwrap();
        let m = 117;
        let start = m * cfg.hop - cfg.pad_each_side;
        let win = hamming_periodic::<f64>(cfg.window_length);
        let frame: Vec<f64> = (0..cfg.window_length).map(|n| w.samples[start + n] * win[n]).collect();
        for (k, (re, im)) in naive_frame_dft(&frame, cfg.fft_length).into_iter().enumerate() {
            let got = (s.get(0, k, m), s.get(1, k, m));
            let scale = (re * re + im * im).sqrt().max(1.0);
            assert!((got.0 - re).abs() / scale < 1e-9 && (got.1 - im).abs() / scale < 1e-9, "bin {k}");
        }
    }

    #[test]
    fn on_grid_cosine_peak_equals_coherent_gain() {
        let cfg = StftConfig::canonical();
        // 500 Hz sits on bin 32 and completes whole periods inside the window
        let bin = 32;
        let f = bin as f64 * 16000.0 / cfg.fft_length as f64;
        let w = Waveform::new(
            (0..16000).map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / 16000.0).cos()).collect(),
            16000,
        );
        let s = stft(&w, &cfg).unwrap();
        let win = hamming_periodic::<f64>(cfg.window_length);
        let coherent_gain = win.iter().sum::<f64>() / cfg.window_length as f64;
        let want = coherent_gain * cfg.window_length as f64 / 2.0;
        for m in [10, 100, 200] {
            let mag = s.get(0, bin, m).hypot(s.get(1, bin, m));
            assert!((mag - want).abs() < 1e-6, "frame {m}: {mag} vs {want}");
        }
    }

    #[test]
    fn round_trip_reconstructs_signal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for len in [16000, 5000, 777] {
            let w = random_wave(&mut rng, len);
            let cfg = StftConfig::canonical();
            let s = stft(&w, &cfg).unwrap();
            let back = istft(&s).unwrap();
            let n = back.len().min(len);
            let err: f64 = (0..n).map(|i| (back.samples[i] - w.samples[i]).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = w.samples[..n].iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(err / norm <= 1e-6, "len {len}: rel err {}", err / norm);
        }
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence() {
        let s = Spectrogram::<f64>::zeros(513, 250, StftConfig::canonical(), 16000);
        let w = istft(&s).unwrap();
        assert_eq!(w.len(), 16000);
        assert!(w.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_only_spectrogram_matches_naive_overlap_add() {
        let cfg = StftConfig::canonical();
        let mut s = Spectrogram::<f64>::zeros(513, 250, cfg, 16000);
        for m in 0..250 {
            s.set(0, 0, m, 1.0 + 0.01 * m as f64);
        }
        let got = istft(&s).unwrap();
        // a frame holding only X[0] inverts to the constant X[0]/N
        let win = hamming_periodic::<f64>(cfg.window_length);
        let total = 249 * cfg.hop + cfg.window_length;
        let mut acc = vec![0.0; total];
        let mut ws = vec![0.0; total];
        for m in 0..250 {
            let level = s.get(0, 0, m) / cfg.fft_length as f64;
            for n in 0..cfg.window_length {
                acc[m * cfg.hop + n] += level * win[n];
                ws[m * cfg.hop + n] += win[n] * win[n];
            }
        }
        for (i, &g) in got.samples.iter().enumerate() {
            let j = i + cfg.pad_each_side;
            assert!((g - acc[j] / ws[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn works_in_single_precision() {
        let w: Waveform<f32> = random_wave(&mut ChaCha8Rng::seed_from_u64(4), 16000).cast();
        let s = stft(&w, &StftConfig::canonical()).unwrap();
        assert_eq!(s.shape(), [2, 513, 250]);
    }
}
