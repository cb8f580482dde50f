//! `SPG1` spectrogram files: magic, `u32` channels/F/T, then `f32` values in
//! channel-major, frequency-then-time order. Little-endian throughout.

use std::io::{Read, Write};

use super::{Spectrogram, StftConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SPG_MAGIC: &[u8; 4] = b"SPG1";

pub fn write_spg<T: Scalar, W: Write>(s: &Spectrogram<T>, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * s.planes.len());
    buf.extend_from_slice(SPG_MAGIC);
    for d in s.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &s.planes {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads an `SPG1` file. The file carries no framing metadata, so the
/// canonical [`StftConfig`] and a 16 kHz rate are attached.
pub fn read_spg<T: Scalar, R: Read>(mut input: R) -> Result<Spectrogram<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != SPG_MAGIC {
        return Err(Error::Format("missing SPG1 magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (channels, freq, time) = (dim(0), dim(1), dim(2));
    if channels != 2 {
        return Err(Error::UnsupportedFormat(format!("{channels} spectrogram channels")));
    }
    let count = channels * freq * time;
    if bytes.len() != 16 + 4 * count {
        return Err(Error::Format(format!(
            "expected {} value bytes, found {}",
            4 * count,
            bytes.len() - 16
        )));
    }
    let planes = bytes[16..]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Spectrogram::from_planes(planes, freq, time, StftConfig::canonical(), 16000)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let s = Spectrogram::<f64>::zeros(3, 2, StftConfig::canonical(), 16000);
        let mut bytes = Vec::new();
        write_spg(&s, &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"SPG1");
        assert_eq!(&bytes[4..16], &[2, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len(), 16 + 4 * 12);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_spg::<f64, _>(&b"SPG0\0\0\0\0\0\0\0\0\0\0\0\0"[..]), Err(Error::Format(_))));
        let s = Spectrogram::<f64>::zeros(3, 2, StftConfig::canonical(), 16000);
        let mut bytes = Vec::new();
        write_spg(&s, &mut bytes).unwrap();
        bytes.pop();
        assert!(matches!(read_spg::<f64, _>(&bytes[..]), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn f32_values_survive_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 2 * 4 * 5)) {
            let planes: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            let s = Spectrogram::from_planes(planes, 4, 5, StftConfig::canonical(), 16000).unwrap();
            let mut bytes = Vec::new();
            write_spg(&s, &mut bytes).unwrap();
            let back: Spectrogram<f64> = read_spg(&bytes[..]).unwrap();
            prop_assert_eq!(back.planes, s.planes);
        }
    }
}
