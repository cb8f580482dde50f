//! RIFF/WAVE reader and writer for 16-bit mono PCM.

use super::Waveform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const PCM_FORMAT: u16 = 1;

fn u16_at(b: &[u8], at: usize) -> Result<u16> {
    b.get(at..at + 2)
        .map(|s| u16::from_le_bytes([s[0], s[1]]))
        .ok_or_else(|| Error::Format("truncated header".into()))
}

fn u32_at(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        .ok_or_else(|| Error::Format("truncated header".into()))
}

/// Decodes a RIFF/WAVE byte buffer holding 16-bit mono PCM.
///
/// Samples are mapped to `[-1, 1)` by dividing by 32768.
pub fn decode_wav<T: Scalar>(bytes: &[u8]) -> Result<Waveform<T>> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE signature".into()));
    }
    let mut pos = 12;
    let mut sample_rate = None;
    let mut data = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4)? as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("chunk {:?} overruns buffer", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Format("fmt chunk shorter than 16 bytes".into()));
                }
                let format = u16_at(bytes, body)?;
                let channels = u16_at(bytes, body + 2)?;
                let rate = u32_at(bytes, body + 4)?;
                let bits = u16_at(bytes, body + 14)?;
                if format != PCM_FORMAT {
                    return Err(Error::UnsupportedFormat(format!("audio format tag {format}")));
                }
                if channels != 1 {
                    return Err(Error::UnsupportedFormat(format!("{channels} channels")));
                }
                if bits != 16 {
                    return Err(Error::UnsupportedFormat(format!("{bits} bits per sample")));
                }
                sample_rate = Some(rate);
            }
            b"data" => data = Some(&bytes[body..end]),
            _ => {}
        }
        // chunks are word aligned
        pos = end + (size & 1);
    }
    let sample_rate = sample_rate.ok_or_else(|| Error::Format("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Format("missing data chunk".into()))?;
    if data.len() % 2 != 0 {
        return Err(Error::Format("odd number of bytes in 16-bit data chunk".into()));
    }
    let scale = T::of(32768.0);
    let samples = data
        .chunks_exact(2)
        .map(|c| T::of(i16::from_le_bytes([c[0], c[1]]) as f64) / scale)
        .collect();
    Ok(Waveform { samples, sample_rate })
}

/// Encodes samples in `[-1, 1]` as 16-bit mono PCM, rounding and clipping.
pub fn encode_wav<T: Scalar>(w: &Waveform<T>) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let v = (s.as_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_with(channels: u16, format: u16, bits: u16, samples: &[i16]) -> Vec<u8> {
        let mut bytes = encode_wav(&Waveform::new(vec![0.0f64; 0], 16000));
        bytes.truncate(12);
        bytes.extend_from_slice(b"fmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&format.to_le_bytes());
        bytes.extend_from_slice(&channels.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&(16000u32 * 2 * channels as u32).to_le_bytes());
        bytes.extend_from_slice(&(2 * channels).to_le_bytes());
        bytes.extend_from_slice(&bits.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&((samples.len() * 2) as u32).to_le_bytes());
        for s in samples {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn single_sample_scales_linearly() {
        let w: Waveform<f64> = decode_wav(&wav_with(1, 1, 16, &[16384])).unwrap();
        assert_eq!(w.samples, vec![0.5]);
        assert_eq!(w.sample_rate, 16000);
    }

    #[test]
    fn zeros_decode_to_zeros() {
        let w: Waveform<f64> = decode_wav(&wav_with(1, 1, 16, &[0; 16000])).unwrap();
        assert_eq!(w.samples.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_is_unsupported() {
        let r = decode_wav::<f64>(&wav_with(2, 1, 16, &[0, 0]));
        assert!(matches!(r, Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn float_and_8bit_are_unsupported() {
        assert!(matches!(decode_wav::<f64>(&wav_with(1, 3, 16, &[0])), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_wav::<f64>(&wav_with(1, 1, 8, &[0])), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_wav::<f64>(b"RIFX\0\0\0\0WAVE"), Err(Error::Format(_))));
        let mut bytes = wav_with(1, 1, 16, &[1, 2, 3]);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_wav::<f64>(&bytes), Err(Error::Format(_))));
        let no_fmt = {
            let full = wav_with(1, 1, 16, &[1]);
            let mut b = full[..12].to_vec();
            b.extend_from_slice(&full[36..]);
            b
        };
        assert!(matches!(decode_wav::<f64>(&no_fmt), Err(Error::Format(_))));
    }

    #[test]
    fn skips_unknown_chunks() {
        let full = wav_with(1, 1, 16, &[-32768, 32767]);
        let mut b = full[..12].to_vec();
        b.extend_from_slice(b"LIST");
        b.extend_from_slice(&3u32.to_le_bytes());
        b.extend_from_slice(&[1, 2, 3, 0]);
        b.extend_from_slice(&full[12..]);
        let w: Waveform<f64> = decode_wav(&b).unwrap();
        assert_eq!(w.samples, vec![-1.0, 32767.0 / 32768.0]);
    }

    #[test]
    fn encode_then_decode_is_exact_on_the_pcm_grid() {
        let samples: Vec<f64> = (-50..50).map(|i| i as f64 * 300.0 / 32768.0).collect();
        let w = Waveform::new(samples, 16000);
        let back: Waveform<f64> = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(back, w);
    }
}
