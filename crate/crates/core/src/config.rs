//! Flat `key = value` pipeline configuration with dotted namespaces.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma-separated.
//! Unknown or repeated keys are errors, and every value is range-checked
//! after parsing. [`PipelineConfig::render`] emits a file that parses back
//! to the same configuration.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::augment::{AugmentationConfig, AugmentationKind};
use crate::dsp::{StftConfig, TOY_BINS};
use crate::embedding::{ClassifierConfig, EmbeddingFamily};
use crate::error::{Error, Result};
use crate::eval::{AugmentationChoice, SynthConfig};
use crate::svm::{default_c_grid, DEFAULT_GAMMA};
use crate::translator::TranslatorConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedSettings {
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    pub base_channels: usize,
    pub classifier: ClassifierConfig,
    /// Independent training runs per family member; the best dev run is kept.
    pub runs: usize,
}

impl EmbedSettings {
    pub fn family(&self) -> Result<EmbeddingFamily> {
        EmbeddingFamily::from_dims(&self.depths, &self.dims, self.base_channels)
    }
}

impl Default for EmbedSettings {
    fn default() -> Self {
        Self {
            depths: vec![2, 4, 6, 8],
            dims: vec![64, 64, 128, 128],
            base_channels: 8,
            classifier: ClassifierConfig::default(),
            runs: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Manifest of real data; the synthetic corpus is used when absent.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
    pub stft: StftConfig,
    pub augmentations: Vec<AugmentationChoice>,
    /// Shared settings of the perturbation augmentations (`kind` is ignored).
    pub augment: AugmentationConfig,
    pub translator: TranslatorConfig,
    pub embed: EmbedSettings,
    pub svm_gamma: f64,
    pub c_grid: Vec<f64>,
    /// Swap the roles of train and dev before running.
    pub swap_splits: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            manifest: None,
            synth: SynthConfig::default(),
            stft: StftConfig::canonical(),
            augmentations: vec![AugmentationChoice::None, AugmentationChoice::Translator],
            augment: AugmentationConfig::new(AugmentationKind::Noise),
            translator: TranslatorConfig::default(),
            embed: EmbedSettings::default(),
            svm_gamma: DEFAULT_GAMMA,
            c_grid: default_c_grid(),
            swap_splits: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim().parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_pair(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated values, got `{v}`"))),
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            cfg.set(key, value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (s, a, t, e) = (&mut self.synth, &mut self.augment, &mut self.translator, &mut self.embed);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth.train" => s.train = parse(key, v)?,
            "synth.dev" => s.dev = parse(key, v)?,
            "synth.test" => s.test = parse(key, v)?,
            "synth.train_mask_fraction" => s.train_mask_fraction = parse(key, v)?,
            "synth.samples" => s.samples = parse(key, v)?,
            "synth.sample_rate" => s.sample_rate = parse(key, v)?,
            "synth.mask_harmonics" => s.mask_harmonics = parse_list(key, v)?,
            "synth.non_mask_harmonics" => s.non_mask_harmonics = parse_list(key, v)?,
            "synth.cue_amplitude" => s.cue_amplitude = parse_pair(key, v)?,
            "synth.leak_amplitude" => s.leak_amplitude = parse(key, v)?,
            "synth.nuisance_harmonic" => s.nuisance_harmonic = parse(key, v)?,
            "synth.nuisance_amplitude" => s.nuisance_amplitude = parse(key, v)?,
            "synth.nuisance_train_rate" => s.nuisance_train_rate = parse_pair(key, v)?,
            "synth.nuisance_eval_rate" => s.nuisance_eval_rate = parse(key, v)?,
            "synth.noise_std" => s.noise_std = parse(key, v)?,
            "stft.fft_length" => self.stft.fft_length = parse(key, v)?,
            "stft.hop" => self.stft.hop = parse(key, v)?,
            "stft.window_length" => self.stft.window_length = parse(key, v)?,
            "stft.pad" => self.stft.pad_each_side = parse(key, v)?,
            "augment.kinds" => self.augmentations = parse_list(key, v)?,
            "augment.snr_db" => a.snr_db = parse_list(key, v)?,
            "augment.max_shift_fraction" => a.max_shift_fraction = parse(key, v)?,
            "augment.speed_factors" => a.speed_factors = parse_list(key, v)?,
            "augment.freq_mask_max" => a.freq_mask_max = parse(key, v)?,
            "augment.time_mask_max" => a.time_mask_max = parse(key, v)?,
            "augment.masks_per_axis" => a.masks_per_axis = parse(key, v)?,
            "translator.epochs" => t.epochs = parse(key, v)?,
            "translator.batch_size" => t.batch_size = parse(key, v)?,
            "translator.lr" => t.adam.learning_rate = parse(key, v)?,
            "translator.weight_decay" => t.adam.weight_decay = parse(key, v)?,
            "translator.generator_channels" => t.generator_channels = parse(key, v)?,
            "translator.discriminator_channels" => t.discriminator_channels = parse(key, v)?,
            "translator.lambda_cycle" => t.weights.cycle = parse(key, v)?,
            "translator.lambda_identity" => t.weights.identity = parse(key, v)?,
            "translator.lambda_cam" => t.weights.cam = parse(key, v)?,
            "embed.depths" => e.depths = parse_list(key, v)?,
            "embed.dims" => e.dims = parse_list(key, v)?,
            "embed.base_channels" => e.base_channels = parse(key, v)?,
            "embed.epochs" => e.classifier.epochs = parse(key, v)?,
            "embed.batch_size" => e.classifier.batch_size = parse(key, v)?,
            "embed.lr" => e.classifier.adam.learning_rate = parse(key, v)?,
            "embed.weight_decay" => e.classifier.adam.weight_decay = parse(key, v)?,
            "embed.runs" => e.runs = parse(key, v)?,
            "svm.gamma" => self.svm_gamma = parse(key, v)?,
            "svm.c_grid" => self.c_grid = parse_list(key, v)?,
            "experiment.swap_splits" => self.swap_splits = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate().map_err(|e| Error::Config(format!("stft: {e}")))?;
        if self.stft.freq_bins() < TOY_BINS {
            return Err(Error::Config(format!("stft.fft_length must give at least {TOY_BINS} bins")));
        }
        self.synth.validate()?;
        self.augment.validate()?;
        if self.augmentations.is_empty() {
            return Err(Error::Config("augment.kinds is empty".into()));
        }
        self.translator.validate().map_err(|e| Error::Config(format!("translator: {e}")))?;
        self.embed.family()?;
        self.embed.classifier.adam.validate().map_err(|e| Error::Config(format!("embed: {e}")))?;
        if self.embed.runs == 0 || self.embed.classifier.batch_size == 0 || self.embed.classifier.epochs == 0 {
            return Err(Error::Config("embed.runs, embed.batch_size and embed.epochs must be positive".into()));
        }
        if !(self.svm_gamma > 0.0 && self.svm_gamma.is_finite()) {
            return Err(Error::Config("svm.gamma must be positive".into()));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
            return Err(Error::Config("svm.c_grid must be a nonempty list of positive values".into()));
        }
        Ok(())
    }

    /// The configuration as `(key, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (s, a, t, e) = (&self.synth, &self.augment, &self.translator, &self.embed);
        vec![
            ("seed", self.seed.to_string()),
            ("data.manifest", self.manifest.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("synth.train", s.train.to_string()),
            ("synth.dev", s.dev.to_string()),
            ("synth.test", s.test.to_string()),
            ("synth.train_mask_fraction", s.train_mask_fraction.to_string()),
            ("synth.samples", s.samples.to_string()),
            ("synth.sample_rate", s.sample_rate.to_string()),
            ("synth.mask_harmonics", list(&s.mask_harmonics)),
            ("synth.non_mask_harmonics", list(&s.non_mask_harmonics)),
            ("synth.cue_amplitude", list(&[s.cue_amplitude.0, s.cue_amplitude.1])),
            ("synth.leak_amplitude", s.leak_amplitude.to_string()),
            ("synth.nuisance_harmonic", s.nuisance_harmonic.to_string()),
            ("synth.nuisance_amplitude", s.nuisance_amplitude.to_string()),
            ("synth.nuisance_train_rate", list(&[s.nuisance_train_rate.0, s.nuisance_train_rate.1])),
            ("synth.nuisance_eval_rate", s.nuisance_eval_rate.to_string()),
            ("synth.noise_std", s.noise_std.to_string()),
            ("stft.fft_length", self.stft.fft_length.to_string()),
            ("stft.hop", self.stft.hop.to_string()),
            ("stft.window_length", self.stft.window_length.to_string()),
            ("stft.pad", self.stft.pad_each_side.to_string()),
            ("augment.kinds", list(&self.augmentations)),
            ("augment.snr_db", list(&a.snr_db)),
            ("augment.max_shift_fraction", a.max_shift_fraction.to_string()),
            ("augment.speed_factors", list(&a.speed_factors)),
            ("augment.freq_mask_max", a.freq_mask_max.to_string()),
            ("augment.time_mask_max", a.time_mask_max.to_string()),
            ("augment.masks_per_axis", a.masks_per_axis.to_string()),
            ("translator.epochs", t.epochs.to_string()),
            ("translator.batch_size", t.batch_size.to_string()),
            ("translator.lr", t.adam.learning_rate.to_string()),
            ("translator.weight_decay", t.adam.weight_decay.to_string()),
            ("translator.generator_channels", t.generator_channels.to_string()),
            ("translator.discriminator_channels", t.discriminator_channels.to_string()),
            ("translator.lambda_cycle", t.weights.cycle.to_string()),
            ("translator.lambda_identity", t.weights.identity.to_string()),
            ("translator.lambda_cam", t.weights.cam.to_string()),
            ("embed.depths", list(&e.depths)),
            ("embed.dims", list(&e.dims)),
            ("embed.base_channels", e.base_channels.to_string()),
            ("embed.epochs", e.classifier.epochs.to_string()),
            ("embed.batch_size", e.classifier.batch_size.to_string()),
            ("embed.lr", e.classifier.adam.learning_rate.to_string()),
            ("embed.weight_decay", e.classifier.adam.weight_decay.to_string()),
            ("embed.runs", e.runs.to_string()),
            ("svm.gamma", self.svm_gamma.to_string()),
            ("svm.c_grid", list(&self.c_grid)),
            ("experiment.swap_splits", self.swap_splits.to_string()),
        ]
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parses_back() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 42;
        cfg.manifest = Some("data/m.csv".into());
        cfg.translator.adam.learning_rate = 2.5e-4;
        cfg.c_grid = vec![0.1, 1.0];
        cfg.augmentations = vec![AugmentationChoice::None, AugmentationChoice::Perturb(AugmentationKind::SpecMask)];
        assert_eq!(PipelineConfig::parse(&cfg.render()).unwrap(), cfg);
        assert_eq!(PipelineConfig::parse(&PipelineConfig::default().render()).unwrap(), PipelineConfig::default());
    }

    #[test]
    fn parses_comments_and_lists() {
        let cfg = PipelineConfig::parse("# demo\nseed = 7\nstft.hop = 64 # canonical\n\nembed.depths = 1, 3\nembed.dims = 8,16\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.embed.depths, vec![1, 3]);
        assert_eq!(cfg.embed.family().unwrap().width(), 24);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "nonsense",
            "unknown.key = 1",
            "seed = 1\nseed = 2",
            "stft.hop = 0",
            "stft.fft_length = 256\nstft.window_length = 256\nstft.pad = 0",
            "svm.gamma = -1",
            "svm.c_grid = ",
            "embed.depths = 4, 2",
            "augment.kinds = none, bogus",
            "synth.cue_amplitude = 0.1",
            "translator.lr = nan",
            "embed.runs = 0",
        ] {
            assert!(matches!(PipelineConfig::parse(bad), Err(Error::Config(_))), "{bad:?} accepted");
        }
    }
}
