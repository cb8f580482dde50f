use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::augment::{spec_mask, AugmentationKind};
use crate::config::PipelineConfig;
use crate::dsp::{decode_wav, normalize_peak, reduce_to_toy, stft, Spectrogram, StftConfig, Waveform};
use crate::embedding::{extract_embeddings, train_best_of, ClassifierConfig, EmbeddingFamily, EmbeddingMatrix, LabeledSet, TrainedClassifier};
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Label, Provenance, Record, Split};
use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::svm::{refit_merged, tune_c, KernelParams};
use crate::translator::{train_translator, translate_and_relabel, GanLossReport, TranslatorConfig};

/// One row family of the experiment tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentationChoice {
    None,
    Perturb(AugmentationKind),
    /// Opposite-label twins from two independently trained translators.
    Translator,
}

impl AugmentationChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Perturb(k) => k.name(),
            Self::Translator => "translator",
        }
    }
}

impl fmt::Display for AugmentationChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentationChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "translator" => Ok(Self::Translator),
            other => other.parse().map(Self::Perturb),
        }
    }
}

/// Featurization of one utterance: peak normalization, STFT, 2x64x64 reduction.
pub fn spectrogram<T: Scalar>(w: &Waveform<T>, cfg: &StftConfig) -> Result<Spectrogram<T>> {
    stft(&normalize_peak(w)?, cfg)
}

pub fn toy_tensor<T: Scalar>(s: &Spectrogram<T>) -> Result<Tensor<T>> {
    let toy = reduce_to_toy(s)?;
    Tensor::new(vec![2, toy.freq_bins, toy.time_bins], toy.planes)
}

pub fn featurize<T: Scalar>(w: &Waveform<T>, cfg: &StftConfig) -> Result<Tensor<T>> {
    toy_tensor(&spectrogram(w, cfg)?)
}

/// Derived rows must stay in the training split, and ids never repeat.
pub fn check_split_hygiene(m: &DatasetManifest) -> Result<()> {
    let mut seen = std::collections::HashMap::new();
    for r in &m.records {
        if seen.insert(r.id.as_str(), r.split).is_some() {
            return Err(Error::Contract(format!("utterance id {} appears twice", r.id)));
        }
    }
    for r in &m.records {
        if r.provenance == Provenance::Original {
            continue;
        }
        if r.split != Split::Train {
            return Err(Error::Contract(format!("{} row {} is outside the training split", r.provenance, r.id)));
        }
        if let Some((source, _)) = r.id.rsplit_once("__") {
            if let Some(&s) = seen.get(source) {
                if s != Split::Train {
                    return Err(Error::Contract(format!("{} derives from {source}, which is in {s}", r.id)));
                }
            }
        }
    }
    Ok(())
}

/// SplitMix64 over a base seed and a stream of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15 ^ t.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

/// Seed-derivation tags, one per consumer of randomness.
pub const TAG_AUGMENT: u64 = 1;
pub const TAG_TRANSLATOR: u64 = 2;
pub const TAG_EMBED: u64 = 3;

/// Translator seed for direction `k` (0: mask->non-mask, 1: non-mask->mask).
pub fn translator_config(cfg: &PipelineConfig, k: u64) -> TranslatorConfig {
    TranslatorConfig { seed: derive_seed(cfg.seed, &[TAG_TRANSLATOR, k]), ..cfg.translator.clone() }
}

/// Seed of the perturbed twin of manifest row `row`.
pub fn augment_seed(cfg: &PipelineConfig, kind: AugmentationKind, row: usize) -> u64 {
    derive_seed(cfg.seed, &[TAG_AUGMENT, kind as u64, row as u64])
}

/// Best-of-`runs` training of every family member, members in parallel.
pub fn train_family<T: Scalar>(
    cfg: &PipelineConfig,
    family: &EmbeddingFamily,
    train: LabeledSet<'_, T>,
    dev: LabeledSet<'_, T>,
) -> Result<Vec<(TrainedClassifier<T>, Vec<f64>)>> {
    let classifier = ClassifierConfig { seed: 0, ..cfg.embed.classifier.clone() };
    family
        .members
        .par_iter()
        .enumerate()
        .map(|(m, &spec)| {
            let seeds: Vec<u64> = (0..cfg.embed.runs as u64).map(|r| derive_seed(cfg.seed, &[TAG_EMBED, m as u64, r])).collect();
            train_best_of(spec, train, dev, &classifier, &seeds)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRow {
    pub augmentation: AugmentationChoice,
    /// Retained (best-run) dev UAR per family member.
    pub dev_uar: Vec<f64>,
    /// Best-dev UAR of every run, per member.
    pub runs: Vec<Vec<f64>>,
    pub train_counts: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRow {
    pub augmentation: AugmentationChoice,
    pub c: f64,
    pub dev_uar: f64,
    pub test_uar: f64,
    pub c_table: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorRun {
    /// `mask->non-mask` or `non-mask->mask`.
    pub direction: String,
    pub history: Vec<GanLossReport>,
}

impl TranslatorRun {
    pub fn cycle_ratio(&self) -> Option<f64> {
        let first = self.history.first()?.l_cycle;
        (first > 0.0).then(|| self.history.last().unwrap().l_cycle / first)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub seed: u64,
    pub config: String,
    pub model_names: Vec<String>,
    pub models: Vec<ModelRow>,
    pub ensembles: Vec<EnsembleRow>,
    pub translators: Vec<TranslatorRun>,
}

/// Manifest rows with their waveforms, in manifest order.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub manifest: DatasetManifest,
    pub waveforms: Vec<Waveform<f64>>,
}

impl ExperimentData {
    /// Loads a WAV manifest and decodes every referenced file.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(path)?;
        let waveforms = manifest
            .records
            .par_iter()
            .map(|r| decode_wav(&std::fs::read(&r.path)?).map_err(|e| e.in_stage(&format!("decode {}", r.path.display()))))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, waveforms })
    }
}

struct Featurized<T> {
    records: Vec<Record>,
    waveforms: Vec<Waveform<f64>>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Featurized<T> {
    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    fn subset(&self, idx: &[usize]) -> (Vec<Tensor<T>>, Vec<usize>) {
        (idx.iter().map(|&i| self.tensors[i].clone()).collect(), idx.iter().map(|&i| self.records[i].label.index()).collect())
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs every configured augmentation family through embedding training,
/// extraction, C tuning and the final merged-dev fit. The `none` family is
/// always included first.
pub fn run_experiment<T: Scalar>(cfg: &PipelineConfig, data: &ExperimentData) -> Result<ExperimentReport> {
    stage("config", cfg.validate())?;
    if data.manifest.len() != data.waveforms.len() {
        return Err(Error::Shape("manifest and waveform counts differ".into()).in_stage("load"));
    }
    let mut records = data.manifest.records.clone();
    if cfg.swap_splits {
        for r in &mut records {
            r.split = match r.split {
                Split::Train => Split::Dev,
                Split::Dev => Split::Train,
                s => s,
            };
        }
    }
    stage("split hygiene", check_split_hygiene(&DatasetManifest::new(records.clone())?))?;
    let tensors = stage(
        "extract",
        data.waveforms.par_iter().map(|w| featurize(&w.cast::<T>(), &cfg.stft)).collect::<Result<Vec<_>>>(),
    )?;
    let base = Featurized { records, waveforms: data.waveforms.clone(), tensors };
    let (train_idx, dev_idx, test_idx) = (base.indices(Split::Train), base.indices(Split::Dev), base.indices(Split::Test));
    for (name, idx) in [("train", &train_idx), ("dev", &dev_idx), ("test", &test_idx)] {
        if idx.is_empty() {
            return Err(Error::DegenerateData(format!("{name} split is empty")).in_stage("load"));
        }
    }
    let (dev_x, dev_y) = base.subset(&dev_idx);
    let (test_x, test_y) = base.subset(&test_idx);
    let family = stage("config", cfg.embed.family())?;

    let mut choices = vec![AugmentationChoice::None];
    choices.extend(cfg.augmentations.iter().copied().filter(|c| *c != AugmentationChoice::None));
    choices.dedup();

    let mut report = ExperimentReport {
        seed: cfg.seed,
        config: cfg.render(),
        model_names: family.members.iter().map(|m| format!("res{}", m.depth_blocks)).collect(),
        models: Vec::new(),
        ensembles: Vec::new(),
        translators: Vec::new(),
    };

    for choice in choices {
        let label = choice.name();
        let (train_x, train_y) = match choice {
            AugmentationChoice::None => base.subset(&train_idx),
            AugmentationChoice::Perturb(kind) => stage(&format!("augment {label}"), perturbed(cfg, &base, &train_idx, kind))?,
            AugmentationChoice::Translator => {
                let (x, y, runs) = stage("translate", translated(cfg, &base))?;
                report.translators.extend(runs);
                (x, y)
            }
        };
        let train_counts = [train_y.iter().filter(|&&l| l == 0).count(), train_y.iter().filter(|&&l| l == 1).count()];
        let train = LabeledSet::new(&train_x, &train_y)?;
        let dev = LabeledSet::new(&dev_x, &dev_y)?;
        let trained = stage(&format!("train-embed {label}"), train_family(cfg, &family, train, dev))?;
        report.models.push(ModelRow {
            augmentation: choice,
            dev_uar: trained.iter().map(|(m, _)| m.best_dev_uar.unwrap_or(0.0)).collect(),
            runs: trained.iter().map(|(_, r)| r.clone()).collect(),
            train_counts,
        });
        let models: Vec<TrainedClassifier<T>> = trained.into_iter().map(|(m, _)| m).collect();
        let embed = |x: &[Tensor<T>]| extract_embeddings(&family, &models, x);
        let (e_train, e_dev, e_test): (EmbeddingMatrix, EmbeddingMatrix, EmbeddingMatrix) =
            stage(&format!("extract-embed {label}"), (|| Ok((embed(&train_x)?, embed(&dev_x)?, embed(&test_x)?)))())?;
        let tuning = stage(&format!("train-svm {label}"), tune_c((&e_train, &train_y), (&e_dev, &dev_y), cfg.svm_gamma, &cfg.c_grid))?;
        let dev_uar = tuning.table.iter().find(|(c, _)| *c == tuning.best_c).map(|(_, u)| *u).unwrap_or(0.0);
        let params = KernelParams { gamma: cfg.svm_gamma, c: tuning.best_c };
        let final_model = stage(&format!("train-svm {label}"), refit_merged((&e_train, &train_y), (&e_dev, &dev_y), params))?;
        let test_pred = stage(&format!("predict {label}"), final_model.predict(&e_test))?;
        let test_uar = stage(&format!("predict {label}"), crate::eval::uar_of(&test_y, &test_pred.labels))?;
        report.ensembles.push(EnsembleRow { augmentation: choice, c: tuning.best_c, dev_uar, test_uar, c_table: tuning.table });
    }
    Ok(report)
}

/// Training set plus one perturbed twin (same label) per original training row.
fn perturbed<T: Scalar>(
    cfg: &PipelineConfig,
    base: &Featurized<T>,
    train_idx: &[usize],
    kind: AugmentationKind,
) -> Result<(Vec<Tensor<T>>, Vec<usize>)> {
    let aug = crate::augment::AugmentationConfig { kind, ..cfg.augment.clone() };
    let twins: Vec<Tensor<T>> = train_idx
        .par_iter()
        .map(|&i| {
            let seed = augment_seed(cfg, kind, i);
            let w = base.waveforms[i].cast::<T>();
            if kind.is_waveform() {
                featurize(&aug.apply_waveform(&w, seed)?, &cfg.stft)
            } else {
                toy_tensor(&spec_mask(&spectrogram(&w, &cfg.stft)?, &aug, seed)?)
            }
        })
        .collect::<Result<_>>()?;
    let (mut x, mut y) = base.subset(train_idx);
    y.extend(train_idx.iter().map(|&i| base.records[i].label.index()));
    x.extend(twins);
    Ok((x, y))
}

/// Trains the two translators and adds opposite-label twins.
fn translated<T: Scalar>(cfg: &PipelineConfig, base: &Featurized<T>) -> Result<(Vec<Tensor<T>>, Vec<usize>, Vec<TranslatorRun>)> {
    let pick = |label: Label| -> Vec<Tensor<T>> {
        (0..base.records.len())
            .filter(|&i| {
                let r = &base.records[i];
                r.split == Split::Train && r.label == label && r.provenance == Provenance::Original
            })
            .map(|i| base.tensors[i].clone())
            .collect()
    };
    let (mask, non_mask) = (pick(Label::Mask), pick(Label::NonMask));
    let forward = train_translator(&mask, &non_mask, &translator_config(cfg, 0))?;
    let backward = train_translator(&non_mask, &mask, &translator_config(cfg, 1))?;
    let train_records: Vec<Record> = base.records.iter().filter(|r| r.split == Split::Train).cloned().collect();
    let train_tensors: Vec<Tensor<T>> =
        base.records.iter().zip(&base.tensors).filter(|(r, _)| r.split == Split::Train).map(|(_, t)| t.clone()).collect();
    let manifest = DatasetManifest::new(train_records)?;
    let (out, data) =
        translate_and_relabel(&manifest, &train_tensors, &forward.pair.forward_translator(), &backward.pair.forward_translator())?;
    check_split_hygiene(&out)?;
    let labels = out.records.iter().map(|r| r.label.index()).collect();
    let runs = vec![
        TranslatorRun { direction: "mask->non-mask".into(), history: forward.history },
        TranslatorRun { direction: "non-mask->mask".into(), history: backward.history },
    ];
    Ok((data, labels, runs))
}

impl ExperimentReport {
    pub fn model(&self, choice: AugmentationChoice) -> Option<&ModelRow> {
        self.models.iter().find(|r| r.augmentation == choice)
    }

    pub fn ensemble(&self, choice: AugmentationChoice) -> Option<&EnsembleRow> {
        self.ensembles.iter().find(|r| r.augmentation == choice)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "experiment report (seed {})\n", self.seed);
        let _ = writeln!(s, "Per-model dev UAR (%), best of {} runs", self.models.first().map_or(0, |m| m.runs.first().map_or(0, Vec::len)));
        let _ = write!(s, "{:<12}", "augmentation");
        for n in &self.model_names {
            let _ = write!(s, "{n:>9}");
        }
        let _ = writeln!(s, "{:>16}", "train mask/non");
        for r in &self.models {
            let _ = write!(s, "{:<12}", r.augmentation.name());
            for u in &r.dev_uar {
                let _ = write!(s, "{u:>9.2}");
            }
            let _ = writeln!(s, "{:>16}", format!("{}/{}", r.train_counts[0], r.train_counts[1]));
        }
        let _ = writeln!(s, "\nEnsemble (RBF SVM on concatenated embeddings)");
        let _ = writeln!(s, "{:<12}{:>10}{:>10}{:>10}", "augmentation", "C", "dev UAR", "test UAR");
        for r in &self.ensembles {
            let _ = writeln!(s, "{:<12}{:>10}{:>10.2}{:>10.2}", r.augmentation.name(), format!("{:e}", r.c), r.dev_uar, r.test_uar);
        }
        if !self.translators.is_empty() {
            let _ = writeln!(s, "\nTranslator cycle loss");
            let _ = writeln!(s, "{:<16}{:>8}{:>12}{:>12}{:>8}", "direction", "epochs", "first", "last", "ratio");
            for t in &self.translators {
                let (first, last) = (t.history.first().map_or(0.0, |h| h.l_cycle), t.history.last().map_or(0.0, |h| h.l_cycle));
                let ratio = t.cycle_ratio().map_or("-".to_string(), |r| format!("{r:.3}"));
                let _ = writeln!(s, "{:<16}{:>8}{:>12.5}{:>12.5}{:>8}", t.direction, t.history.len(), first, last, ratio);
            }
        }
        let _ = writeln!(s, "\nconfiguration");
        s.push_str(&self.config);
        s
    }

    /// Long-format CSV: `table,augmentation,column,value`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["table", "augmentation", "column", "value"])?;
        for r in &self.models {
            for (n, u) in self.model_names.iter().zip(&r.dev_uar) {
                w.write_record(["model_dev_uar", r.augmentation.name(), n, &format!("{u:.2}")])?;
            }
            for (n, runs) in self.model_names.iter().zip(&r.runs) {
                for (k, u) in runs.iter().enumerate() {
                    w.write_record(["model_run_dev_uar", r.augmentation.name(), &format!("{n}/run{k}"), &format!("{u:.2}")])?;
                }
            }
        }
        for r in &self.ensembles {
            let a = r.augmentation.name();
            w.write_record(["ensemble", a, "c", &format!("{:e}", r.c)])?;
            w.write_record(["ensemble", a, "dev_uar", &format!("{:.2}", r.dev_uar)])?;
            w.write_record(["ensemble", a, "test_uar", &format!("{:.2}", r.test_uar)])?;
            for (c, u) in &r.c_table {
                w.write_record(["c_grid_dev_uar", a, &format!("{c:e}"), &format!("{u:.2}")])?;
            }
        }
        for t in &self.translators {
            if let Some(r) = t.cycle_ratio() {
                w.write_record(["translator", "translator", &format!("{}/cycle_ratio", t.direction), &format!("{r:.6}")])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Per-epoch translator losses: `direction,epoch,l_gan_xy,...,total`.
    pub fn curves_csv(&self) -> Result<String> {
        loss_curves_csv(self.translators.iter().map(|t| (t.direction.as_str(), t.history.as_slice())))
    }
}

pub const CURVE_HEADER: [&str; 8] = ["series", "epoch", "l_gan_xy", "l_gan_yx", "l_cycle", "l_identity", "l_cam", "total"];

pub fn loss_curves_csv<'a>(series: impl IntoIterator<Item = (&'a str, &'a [GanLossReport])>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVE_HEADER)?;
    for (name, history) in series {
        for (e, h) in history.iter().enumerate() {
            let vals = [h.l_gan_xy, h.l_gan_yx, h.l_cycle, h.l_identity, h.l_cam, h.total];
            let mut row = vec![name.to_string(), (e + 1).to_string()];
            row.extend(vals.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
