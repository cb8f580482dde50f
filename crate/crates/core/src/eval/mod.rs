//! Metrics, the synthetic corpus, and experiment orchestration.

mod experiment;
mod metrics;
mod synth;

pub use experiment::{
    augment_seed, check_split_hygiene, derive_seed, featurize, loss_curves_csv, run_experiment, spectrogram, toy_tensor,
    train_family, translator_config, AugmentationChoice, EnsembleRow, ExperimentData, ExperimentReport, ModelRow, TranslatorRun,
    CURVE_HEADER, TAG_AUGMENT, TAG_EMBED, TAG_TRANSLATOR,
};
pub use metrics::{uar, uar_of, ConfusionMatrix};
pub use synth::{synthesize, SynthConfig, SyntheticCorpus, FUNDAMENTAL_HZ};
