use std::path::PathBuf;

use super::Translator;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label, Provenance, Record, Split};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Appended to a source id to name its translated twin.
pub const TRANSLATED_SUFFIX: &str = "__translated";

/// Adds an opposite-labeled translated twin for every original training
/// record: mask records go through `to_non_mask`, non-mask records through
/// `to_mask`. `data[i]` is the spectrogram of `manifest.records[i]`; the
/// returned data is aligned with the returned manifest. Twins get
/// `translated/<id>.spg` paths relative to wherever the caller stores them.
pub fn translate_and_relabel<T: Scalar>(
    manifest: &DatasetManifest,
    data: &[Tensor<T>],
    to_non_mask: &Translator<T>,
    to_mask: &Translator<T>,
) -> Result<(DatasetManifest, Vec<Tensor<T>>)> {
    if data.len() != manifest.len() {
        return Err(Error::Shape(format!("{} spectrograms for {} manifest rows", data.len(), manifest.len())));
    }
    for t in [to_non_mask, to_mask] {
        if t.epochs_trained == 0 {
            return Err(Error::Contract("translate_and_relabel needs trained generators".into()));
        }
    }
    let mut out = manifest.clone();
    let mut out_data = data.to_vec();
    for (r, s) in manifest.records.iter().zip(data) {
        if r.split != Split::Train || r.provenance == Provenance::Translated {
            continue;
        }
        let translator = match r.label {
            Label::Mask => to_non_mask,
            Label::NonMask => to_mask,
        };
        let twin = translator.translate(&[s])?.remove(0);
        debug_assert_eq!(twin.shape, s.shape);
        let id = format!("{}{TRANSLATED_SUFFIX}", r.id);
        out.push(Record {
            path: PathBuf::from("translated").join(format!("{id}.spg")),
            id,
            label: r.label.other(),
            split: Split::Train,
            provenance: Provenance::Translated,
        })?;
        out_data.push(twin);
    }
    Ok((out, out_data))
}
