//! Mask detection from speech: complex STFT features, baseline and
//! cycle-consistent augmentation, residual embedding ensembles, and an RBF
//! SVM decision stage.

pub mod augment;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod embedding;
pub mod error;
pub mod io;
pub mod eval;
pub mod manifest;
pub mod nn;
pub mod scalar;
pub mod svm;
pub mod translator;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Scalar of the command-line pipeline; the library itself is generic.
pub type Real = f32;
pub type RealTensor = nn::Tensor<Real>;
pub type RealWaveform = dsp::Waveform<Real>;
pub type RealSpectrogram = dsp::Spectrogram<Real>;
pub type RealTranslator = translator::Translator<Real>;
pub type RealClassifier = embedding::TrainedClassifier<Real>;
