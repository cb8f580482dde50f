//! Command-line front end: one subcommand per pipeline stage.
//!
//! Every artifact is written atomically. Failures exit with status 1 and a
//! message naming the stage; usage errors exit with status 2.

use std::ffi::OsString;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::augment::{spec_mask, AugmentationKind};
use crate::config::PipelineConfig;
use crate::dsp::{read_spg, write_spg, Spectrogram, StftConfig, TOY_SIDE};
use crate::embedding::{extract_embeddings, EmbeddingFamily, EmbeddingMatrix, LabeledSet, TrainedClassifier};
use crate::error::{Error, Result};
use crate::eval::{
    augment_seed, loss_curves_csv, run_experiment, spectrogram, synthesize, train_family, translator_config,
    uar_of, ExperimentData,
};
use crate::io::write_atomic;
use crate::manifest::{DatasetManifest, Label, Provenance, Record, Split};
use crate::svm::{refit_merged, tune_c, KernelParams, SvmModel};
use crate::translator::{train_translator, translate_and_relabel, Translator};
use crate::{Real, RealTensor};

/// Environment fallback for `--jobs`.
pub const JOBS_ENV: &str = "MASKWAVE_JOBS";

#[derive(Debug, Parser)]
#[command(name = "maskwave", version, about = "Speech mask detection with cycle-consistent spectrogram augmentation")]
struct Cli {
    /// Worker threads; defaults to $MASKWAVE_JOBS, then to all cores.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Settings {
    /// Pipeline configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured base seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Settings {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::parse(&std::fs::read_to_string(p)?)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Direction {
    MaskToNonMask,
    NonMaskToMask,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Complex spectrograms (SPG1) for every row of a WAV manifest.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Store the reduced 2x64x64 geometry instead of the full spectrogram.
        #[arg(long)]
        toy: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Spectrograms plus one same-label perturbed twin per training row.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: AugmentationKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        toy: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Trains one translator pair on the training split of a spectrogram manifest.
    TrainGan {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        direction: Direction,
        /// Checkpoint of the forward generator.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss table (CSV).
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Adds opposite-labeled translated twins of every training row.
    Translate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        to_non_mask: PathBuf,
        #[arg(long)]
        to_mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the embedding family (best of the configured runs per member).
    TrainEmbed {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory receiving `member<i>.nnp` and `runs.csv`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Concatenated family embeddings, one row per manifest row.
    ExtractEmbed {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        models: PathBuf,
        /// `.emb` writes the binary format, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tunes C on dev (unless given), then fits on train and dev together.
    TrainSvm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        c: Option<f64>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Labels and margins for embedding rows; reports UAR when a manifest is given.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Restricts prediction to one split (needs --manifest).
        #[arg(long, value_parser = parse_split, requires = "manifest")]
        split: Option<Split>,
        #[arg(long)]
        out: PathBuf,
    },
    /// The full comparison: every augmentation family through the SVM stage.
    RunExperiment {
        /// WAV manifest; the synthetic corpus is used when neither this nor
        /// `data.manifest` is set.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "experiment")]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Writes the seeded synthetic corpus (WAV files and manifest).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
}

fn parse_kind(s: &str) -> std::result::Result<AugmentationKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let jobs = match cli.jobs.map(usize::from).map(Ok).or_else(|| std::env::var(JOBS_ENV).ok().map(|v| parse_jobs(&v))) {
        Some(Ok(n)) => n,
        Some(Err(msg)) => {
            eprintln!("error: {msg}");
            return 2;
        }
        None => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn parse_jobs(v: &str) -> std::result::Result<usize, String> {
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("{JOBS_ENV} must be a positive integer, got {v:?}")),
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Extract { manifest, out, toy, settings } => {
            let cfg = stage("config", settings.load())?;
            let data = stage("load", ExperimentData::load(&manifest))?;
            stage("extract", extract(&cfg, &data, None, toy, &out))
        }
        Command::Augment { manifest, kind, out, toy, settings } => {
            let cfg = stage("config", settings.load())?;
            let data = stage("load", ExperimentData::load(&manifest))?;
            stage("augment", extract(&cfg, &data, Some(kind), toy, &out))
        }
        Command::TrainGan { manifest, direction, out, history, settings } => {
            let cfg = stage("config", settings.load())?;
            let (m, x) = stage("load", load_spectrograms(&manifest))?;
            stage("train-gan", train_gan(&cfg, &m, &x, direction, &out, history.as_deref()))
        }
        Command::Translate { manifest, to_non_mask, to_mask, out } => {
            let (m, x) = stage("load", load_spectrograms(&manifest))?;
            let g = stage("load", read_translator(&to_non_mask))?;
            let g_prime = stage("load", read_translator(&to_mask))?;
            stage("translate", translate(&m, &x, &g, &g_prime, &out))
        }
        Command::TrainEmbed { manifest, out, settings } => {
            let cfg = stage("config", settings.load())?;
            let (m, x) = stage("load", load_spectrograms(&manifest))?;
            stage("train-embed", train_embed(&cfg, &m, &x, &out))
        }
        Command::ExtractEmbed { manifest, models, out } => {
            let (_, x) = stage("load", load_spectrograms(&manifest))?;
            let (family, nets) = stage("load", read_family(&models))?;
            let e = stage("extract-embed", extract_embeddings(&family, &nets, &x))?;
            let mut bytes = Vec::new();
            if out.extension().is_some_and(|x| x == "emb") {
                e.write_emb(&mut bytes)?;
            } else {
                e.write_csv(&mut bytes)?;
            }
            stage("extract-embed", write_atomic(&out, &bytes))?;
            println!("{} rows x {} dims -> {}", e.rows, e.cols, out.display());
            Ok(())
        }
        Command::TrainSvm { manifest, embeddings, out, c, settings } => {
            let cfg = stage("config", settings.load())?;
            let m = stage("load", DatasetManifest::load(&manifest))?;
            let e = stage("load", read_embeddings(&embeddings, m.len()))?;
            stage("train-svm", train_svm(&cfg, &m, &e, c, &out))
        }
        Command::Predict { model, embeddings, manifest, split, out } => {
            let svm = stage("load", File::open(&model).map_err(Error::from).and_then(SvmModel::read))?;
            let m = match &manifest {
                Some(p) => Some(stage("load", DatasetManifest::load(p))?),
                None => None,
            };
            let e = stage("load", read_embeddings(&embeddings, m.as_ref().map_or(0, |m| m.len())))?;
            stage("predict", predict(&svm, m.as_ref(), &e, split, &out))
        }
        Command::RunExperiment { manifest, out, settings } => {
            let mut cfg = stage("config", settings.load())?;
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            let data = match &cfg.manifest {
                Some(p) => stage("load", ExperimentData::load(p))?,
                None => {
                    let c = stage("synth-data", synthesize(&cfg.synth, cfg.seed))?;
                    ExperimentData { manifest: c.manifest, waveforms: c.waveforms }
                }
            };
            let report = run_experiment::<Real>(&cfg, &data)?;
            let text = report.to_text();
            stage("report", (|| {
                write_atomic(&out.join("report.txt"), text.as_bytes())?;
                write_atomic(&out.join("report.csv"), report.to_csv()?.as_bytes())?;
                write_atomic(&out.join("curves.csv"), report.curves_csv()?.as_bytes())
            })())?;
            print!("{text}");
            Ok(())
        }
        Command::SynthData { out, settings } => {
            let cfg = stage("config", settings.load())?;
            let corpus = stage("synth-data", synthesize(&cfg.synth, cfg.seed))?;
            stage("synth-data", corpus.write_to(&out))?;
            for split in [Split::Train, Split::Dev, Split::Test] {
                let [m, n] = corpus.manifest.class_counts(split);
                println!("{split}: {m} mask / {n} non-mask");
            }
            Ok(())
        }
    }
}

fn spg_bytes(s: &Spectrogram<Real>) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    write_spg(s, &mut bytes)?;
    Ok(bytes)
}

fn tensor_to_spg(t: &RealTensor) -> Result<Vec<u8>> {
    spg_bytes(&Spectrogram::from_planes(t.data.clone(), t.shape[1], t.shape[2], StftConfig::canonical(), 16_000)?)
}

fn reduce(s: &Spectrogram<Real>, toy: bool) -> Result<Spectrogram<Real>> {
    if toy {
        crate::dsp::reduce_to_toy(s)
    } else {
        Ok(s.clone())
    }
}

fn write_manifest(path: &Path, m: &DatasetManifest) -> Result<()> {
    let mut bytes = Vec::new();
    m.write(&mut bytes)?;
    write_atomic(path, &bytes)
}

/// Spectrograms of every row, plus perturbed twins of the original training
/// rows when `kind` is set.
fn extract(cfg: &PipelineConfig, data: &ExperimentData, kind: Option<AugmentationKind>, toy: bool, out: &Path) -> Result<()> {
    let aug = kind.map(|k| crate::augment::AugmentationConfig { kind: k, ..cfg.augment.clone() });
    let rows: Vec<Vec<(Record, Vec<u8>)>> = data
        .manifest
        .records
        .par_iter()
        .zip(&data.waveforms)
        .enumerate()
        .map(|(i, (r, w))| {
            let w = w.cast::<Real>();
            let full = spectrogram(&w, &cfg.stft)?;
            let path = PathBuf::from("spg").join(format!("{}.spg", r.id));
            let mut items = vec![(Record { path, ..r.clone() }, spg_bytes(&reduce(&full, toy)?)?)];
            if let Some(aug) = &aug {
                if r.split == Split::Train && r.provenance == Provenance::Original {
                    let seed = augment_seed(cfg, aug.kind, i);
                    let twin = if aug.kind.is_waveform() {
                        spectrogram(&aug.apply_waveform(&w, seed)?, &cfg.stft)?
                    } else {
                        spec_mask(&full, aug, seed)?
                    };
                    let id = format!("{}__{}", r.id, aug.kind);
                    let path = PathBuf::from("spg").join(format!("{id}.spg"));
                    let twin = spg_bytes(&reduce(&twin, toy)?)?;
                    items.push((Record { id, path, label: r.label, split: Split::Train, provenance: Provenance::Perturbed }, twin));
                }
            }
            Ok(items)
        })
        .collect::<Result<_>>()?;
    let mut manifest = DatasetManifest::default();
    for (record, bytes) in rows.into_iter().flatten() {
        write_atomic(&out.join(&record.path), &bytes)?;
        manifest.push(record)?;
    }
    write_manifest(&out.join("manifest.csv"), &manifest)?;
    println!("{} spectrograms -> {}", manifest.len(), out.display());
    Ok(())
}

/// Loads a spectrogram manifest; full spectrograms are reduced on the fly.
fn load_spectrograms(path: &Path) -> Result<(DatasetManifest, Vec<RealTensor>)> {
    let m = DatasetManifest::load(path)?;
    let x = m
        .records
        .par_iter()
        .map(|r| {
            let s: Spectrogram<Real> = read_spg(File::open(&r.path)?).map_err(|e| e.in_stage(&r.path.display().to_string()))?;
            if s.freq_bins == TOY_SIDE && s.time_bins == TOY_SIDE {
                RealTensor::new(vec![2, TOY_SIDE, TOY_SIDE], s.planes)
            } else {
                crate::eval::toy_tensor(&s)
            }
        })
        .collect::<Result<_>>()?;
    Ok((m, x))
}

fn select(m: &DatasetManifest, x: &[RealTensor], keep: impl Fn(&Record) -> bool) -> (Vec<RealTensor>, Vec<usize>) {
    m.records.iter().zip(x).filter(|(r, _)| keep(r)).map(|(r, t)| (t.clone(), r.label.index())).unzip()
}

fn train_gan(
    cfg: &PipelineConfig,
    m: &DatasetManifest,
    x: &[RealTensor],
    direction: Direction,
    out: &Path,
    history: Option<&Path>,
) -> Result<()> {
    let (source, k, name) = match direction {
        Direction::MaskToNonMask => (Label::Mask, 0, "mask->non-mask"),
        Direction::NonMaskToMask => (Label::NonMask, 1, "non-mask->mask"),
    };
    let domain = |label: Label| {
        select(m, x, |r| r.split == Split::Train && r.provenance == Provenance::Original && r.label == label).0
    };
    let outcome = train_translator(&domain(source), &domain(source.other()), &translator_config(cfg, k))?;
    let mut bytes = Vec::new();
    outcome.pair.forward_translator().write(&mut bytes)?;
    write_atomic(out, &bytes)?;
    if let Some(h) = history {
        write_atomic(h, loss_curves_csv([(name, outcome.history.as_slice())])?.as_bytes())?;
    }
    match outcome.cycle_ratio() {
        Some(r) => println!("{name}: {} epochs, cycle-loss ratio {r:.3}", outcome.history.len()),
        None => println!("{name}: 0 epochs"),
    }
    Ok(())
}

fn read_translator(path: &Path) -> Result<Translator<Real>> {
    Translator::read(File::open(path)?)
}

fn translate(m: &DatasetManifest, x: &[RealTensor], g: &Translator<Real>, g_prime: &Translator<Real>, out: &Path) -> Result<()> {
    let (mut augmented, data) = translate_and_relabel(m, x, g, g_prime)?;
    for (r, t) in augmented.records.iter_mut().zip(&data).skip(m.len()) {
        write_atomic(&out.join(&r.path), &tensor_to_spg(t)?)?;
    }
    for r in augmented.records.iter_mut().take(m.len()) {
        r.path = std::fs::canonicalize(&r.path)?;
    }
    write_manifest(&out.join("manifest.csv"), &augmented)?;
    let [mask, non_mask] = augmented.class_counts(Split::Train);
    println!("train split: {mask} mask / {non_mask} non-mask after translation");
    Ok(())
}

fn member_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("member{i}.nnp"))
}

fn train_embed(cfg: &PipelineConfig, m: &DatasetManifest, x: &[RealTensor], out: &Path) -> Result<()> {
    let family = cfg.embed.family()?;
    let (train_x, train_y) = select(m, x, |r| r.split == Split::Train);
    let (dev_x, dev_y) = select(m, x, |r| r.split == Split::Dev);
    let trained = train_family(cfg, &family, LabeledSet::new(&train_x, &train_y)?, LabeledSet::new(&dev_x, &dev_y)?)?;
    let mut runs = String::from("member,depth_blocks,run,dev_uar\n");
    for (i, (model, scores)) in trained.iter().enumerate() {
        let mut bytes = Vec::new();
        model.write(&mut bytes)?;
        write_atomic(&member_path(out, i), &bytes)?;
        for (r, s) in scores.iter().enumerate() {
            runs.push_str(&format!("{i},{},{r},{s}\n", model.spec.depth_blocks));
        }
        println!("res{}: best dev UAR {:.2}", model.spec.depth_blocks, model.best_dev_uar.unwrap_or(0.0));
    }
    write_atomic(&out.join("runs.csv"), runs.as_bytes())
}

fn read_family(dir: &Path) -> Result<(EmbeddingFamily, Vec<TrainedClassifier<Real>>)> {
    let mut models = Vec::new();
    while member_path(dir, models.len()).exists() {
        models.push(TrainedClassifier::read(File::open(member_path(dir, models.len()))?)?);
    }
    if models.is_empty() {
        return Err(Error::Format(format!("no member0.nnp in {}", dir.display())));
    }
    let family = EmbeddingFamily::new(models.iter().map(|m| m.spec).collect())?;
    Ok((family, models))
}

/// Reads CSV or `.emb` embeddings; `rows` > 0 demands that many rows.
fn read_embeddings(path: &Path, rows: usize) -> Result<EmbeddingMatrix> {
    let file = File::open(path)?;
    let e = if path.extension().is_some_and(|x| x == "emb") { EmbeddingMatrix::read_emb(file)? } else { EmbeddingMatrix::read_csv(file)? };
    if rows > 0 && e.rows != rows {
        return Err(Error::Shape(format!("{} embedding rows for {rows} manifest rows", e.rows)));
    }
    Ok(e)
}

fn split_rows(m: &DatasetManifest, split: Split) -> Vec<usize> {
    (0..m.len()).filter(|&i| m.records[i].split == split).collect()
}

fn labels(m: &DatasetManifest, rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&i| m.records[i].label.index()).collect()
}

fn train_svm(cfg: &PipelineConfig, m: &DatasetManifest, e: &EmbeddingMatrix, c: Option<f64>, out: &Path) -> Result<()> {
    let (tr, dv) = (split_rows(m, Split::Train), split_rows(m, Split::Dev));
    let (train, dev) = (e.select(&tr), e.select(&dv));
    let (train_y, dev_y) = (labels(m, &tr), labels(m, &dv));
    let c = match c {
        Some(c) => c,
        None => {
            let tuning = tune_c((&train, &train_y), (&dev, &dev_y), cfg.svm_gamma, &cfg.c_grid)?;
            for (c, u) in &tuning.table {
                println!("C = {c:e}: dev UAR {u:.2}");
            }
            println!("selected C = {:e}", tuning.best_c);
            tuning.best_c
        }
    };
    let model = refit_merged((&train, &train_y), (&dev, &dev_y), KernelParams { gamma: cfg.svm_gamma, c })?;
    let mut bytes = Vec::new();
    model.write(&mut bytes)?;
    write_atomic(out, &bytes)?;
    println!("{} support vectors -> {}", model.support.rows, out.display());
    Ok(())
}

fn predict(svm: &SvmModel, m: Option<&DatasetManifest>, e: &EmbeddingMatrix, split: Option<Split>, out: &Path) -> Result<()> {
    let rows: Vec<usize> = match (m, split) {
        (Some(m), Some(s)) => split_rows(m, s),
        _ => (0..e.rows).collect(),
    };
    let pred = svm.predict(&e.select(&rows))?;
    let mut csv = String::from("id,label,margin\n");
    for (k, &i) in rows.iter().enumerate() {
        let id = m.map_or_else(|| i.to_string(), |m| m.records[i].id.clone());
        csv.push_str(&format!("{id},{},{:e}\n", Label::from_index(pred.labels[k]), pred.margins[k]));
    }
    write_atomic(out, csv.as_bytes())?;
    if let Some(m) = m {
        println!("UAR {:.2} over {} rows", uar_of(&labels(m, &rows), &pred.labels)?, rows.len());
    }
    Ok(())
}
