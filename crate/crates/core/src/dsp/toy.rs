//! Reduction of full spectrograms to the 2x64x64 training geometry.

use super::Spectrogram;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Low-frequency bins kept before pooling.
pub const TOY_BINS: usize = 256;
/// Frames kept before pooling; shorter inputs are zero-padded.
pub const TOY_FRAMES: usize = 256;
pub const TOY_POOL: usize = 4;
pub const TOY_SIDE: usize = TOY_BINS / TOY_POOL;

/// Averages 4x4 blocks of the lowest 256 bins over the first 256 frames.
///
/// Frames beyond the input's length count as zero, so the canonical 250
/// frames fill 62.5 pooled columns and the last column is a partial average.
pub fn reduce_to_toy<T: Scalar>(s: &Spectrogram<T>) -> Result<Spectrogram<T>> {
    if s.freq_bins < TOY_BINS {
        return Err(Error::Shape(format!(
            "need at least {TOY_BINS} frequency bins, got {}",
            s.freq_bins
        )));
    }
    let mut out = Spectrogram::zeros(TOY_SIDE, TOY_SIDE, s.config, s.sample_rate);
    let norm = T::of_usize(TOY_POOL * TOY_POOL);
    for c in 0..2 {
        for r in 0..TOY_SIDE {
            for col in 0..TOY_SIDE {
                let mut acc = T::zero();
                for k in r * TOY_POOL..(r + 1) * TOY_POOL {
                    for m in col * TOY_POOL..((col + 1) * TOY_POOL).min(s.time_bins) {
                        acc += s.get(c, k, m);
                    }
                }
                out.set(c, r, col, acc / norm);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::StftConfig;

    #[test]
    fn pools_blocks_and_pads_time() {
        let mut s = Spectrogram::<f64>::zeros(513, 250, StftConfig::canonical(), 16000);
        for v in s.planes.iter_mut() {
            *v = 1.0;
        }
        let t = reduce_to_toy(&s).unwrap();
        assert_eq!(t.shape(), [2, 64, 64]);
        assert_eq!(t.get(0, 0, 0), 1.0);
        assert_eq!(t.get(1, 63, 61), 1.0);
        // frames 248 and 249 are the only real ones in the last column
        assert_eq!(t.get(0, 10, 62), 0.5);
        assert_eq!(t.get(0, 10, 63), 0.0);
    }

    #[test]
    fn rejects_narrow_input() {
        let s = Spectrogram::<f64>::zeros(64, 64, StftConfig::canonical(), 16000);
        assert!(reduce_to_toy(&s).is_err());
    }
}
