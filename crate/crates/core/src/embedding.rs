//! Residual classifier family whose penultimate activations form the
//! ensemble embedding.
//!
//! Members are registered in ascending depth; embedding columns follow that
//! order. A member's network is a strided convolutional stem down to a 4x4
//! grid, `depth_blocks` residual blocks, a flattening embedding layer and a
//! two-way output layer that is dropped at extraction time. Flattening
//! rather than pooling keeps the frequency position of energy visible.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::dsp::TOY_SIDE;
use crate::eval::uar_of;
use crate::nn::{read_nnp_entries, AdamConfig, AdamState, LayerSpec, Network, ParamKind, Tape, Tensor};
use crate::scalar::Scalar;
use crate::translator::Standardizer;

pub const CLASSES: usize = 2;
pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const SLOPE: f64 = 0.1;
/// Side of the feature grid after the stem, for `TOY_SIDE` inputs.
const GRID: usize = TOY_SIDE / 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualClassifierSpec {
    pub depth_blocks: usize,
    pub base_channels: usize,
    pub embedding_dim: usize,
}

impl ResidualClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.base_channels == 0 {
            return Err(Error::Config(format!("classifier widths must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let c = self.base_channels;
        let mut l = vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: c, kernel: 5, stride: 4, bias: true },
            LayerSpec::LeakyRelu { slope: SLOPE },
            LayerSpec::Conv2d { in_channels: c, out_channels: c, kernel: 3, stride: 2, bias: true },
            LayerSpec::LeakyRelu { slope: SLOPE },
            LayerSpec::Conv2d { in_channels: c, out_channels: c, kernel: 3, stride: 2, bias: true },
            LayerSpec::LeakyRelu { slope: SLOPE },
        ];
        l.extend((0..self.depth_blocks).map(|_| LayerSpec::ResidualBlock { channels: c, kernel: 3 }));
        l.extend([
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: c * GRID * GRID, outputs: self.embedding_dim, bias: true },
            LayerSpec::LeakyRelu { slope: SLOPE },
            LayerSpec::Dense { inputs: self.embedding_dim, outputs: CLASSES, bias: true },
        ]);
        l
    }
}

/// Ordered family of classifier specs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingFamily {
    pub members: Vec<ResidualClassifierSpec>,
}

impl EmbeddingFamily {
    /// Members must be listed by strictly increasing depth.
    pub fn new(members: Vec<ResidualClassifierSpec>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("embedding family is empty".into()));
        }
        for m in &members {
            m.validate()?;
        }
        if members.windows(2).any(|w| w[0].depth_blocks >= w[1].depth_blocks) {
            return Err(Error::Config(format!(
                "family members must be registered by increasing depth, got {:?}",
                members.iter().map(|m| m.depth_blocks).collect::<Vec<_>>()
            )));
        }
        Ok(Self { members })
    }

    /// Depths {2, 4, 6, 8} with embedding dims {64, 64, 128, 128}.
    pub fn toy(base_channels: usize) -> Self {
        Self::from_dims(&[2, 4, 6, 8], &[64, 64, 128, 128], base_channels).expect("toy family is valid")
    }

    pub fn from_dims(depths: &[usize], dims: &[usize], base_channels: usize) -> Result<Self> {
        if depths.len() != dims.len() {
            return Err(Error::Config(format!("{} depths for {} embedding dims", depths.len(), dims.len())));
        }
        Self::new(
            depths
                .iter()
                .zip(dims)
                .map(|(&depth_blocks, &embedding_dim)| ResidualClassifierSpec { depth_blocks, base_channels, embedding_dim })
                .collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.members.iter().map(|m| m.embedding_dim).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 16, adam: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() }, seed: 0 }
    }
}

/// A trained member with the input standardization it was trained under.
#[derive(Debug, Clone)]
pub struct TrainedClassifier<T> {
    pub spec: ResidualClassifierSpec,
    pub network: Network<T>,
    pub standardizer: Standardizer,
    /// Dev UAR after every epoch.
    pub dev_history: Vec<f64>,
    /// Epoch of the retained checkpoint; 0 for the initialization.
    pub best_epoch: usize,
    pub best_dev_uar: Option<f64>,
}

/// Labeled `[2, H, W]` samples.
#[derive(Debug, Clone, Copy)]
pub struct LabeledSet<'a, T> {
    pub samples: &'a [Tensor<T>],
    pub labels: &'a [usize],
}

impl<'a, T: Scalar> LabeledSet<'a, T> {
    pub fn new(samples: &'a [Tensor<T>], labels: &'a [usize]) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::Shape(format!("{} samples for {} labels", samples.len(), labels.len())));
        }
        if labels.iter().any(|&l| l >= CLASSES) {
            return Err(Error::Parameter("class labels must be 0 or 1".into()));
        }
        Ok(Self { samples, labels })
    }

    fn classes_present(&self) -> usize {
        let mut seen = [false; CLASSES];
        self.labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

fn stack_standardized<T: Scalar>(std: &Standardizer, items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let z: Vec<Tensor<T>> = items.iter().map(|s| std.apply(s)).collect();
    Tensor::stack(&z)
}

impl<T: Scalar> TrainedClassifier<T> {
    /// Class-1 logit margins are not needed downstream; predicted classes only.
    pub fn predict(&self, samples: &[Tensor<T>]) -> Result<Vec<usize>> {
        let logits = self.run(samples, self.network.layers.len())?;
        Ok(logits.chunks(CLASSES).map(|r| usize::from(r[1] > r[0])).collect())
    }

    /// Penultimate activations, one row of `embedding_dim` values per sample.
    pub fn embed(&self, samples: &[Tensor<T>]) -> Result<Vec<T>> {
        self.run(samples, self.network.layers.len() - 1)
    }

    fn run(&self, samples: &[Tensor<T>], layers: usize) -> Result<Vec<T>> {
        const CHUNK: usize = 32;
        let parts: Vec<Result<Vec<T>>> = samples
            .par_chunks(CHUNK)
            .map(|chunk| {
                let refs: Vec<&Tensor<T>> = chunk.iter().collect();
                let x = stack_standardized(&self.standardizer, &refs)?;
                Ok(self.network.infer_until(&x, layers)?.data)
            })
            .collect();
        let mut out = Vec::new();
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn dev_uar(&self, dev: LabeledSet<'_, T>) -> Result<f64> {
        uar_of(dev.labels, &self.predict(dev.samples)?)
    }

    /// NNP1 checkpoint with `meta.*` and `std.*` entries.
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut store = self.network.params.clone();
        let one = |v: f64| Tensor { shape: vec![1], data: vec![T::of(v)] };
        store.add("meta.depth_blocks", ParamKind::Weight, one(self.spec.depth_blocks as f64));
        store.add("meta.base_channels", ParamKind::Weight, one(self.spec.base_channels as f64));
        store.add("meta.embedding_dim", ParamKind::Weight, one(self.spec.embedding_dim as f64));
        let two = |a: [f64; 2]| Tensor { shape: vec![2], data: vec![T::of(a[0]), T::of(a[1])] };
        store.add("std.mean", ParamKind::Weight, two(self.standardizer.mean));
        store.add("std.std", ParamKind::Weight, two(self.standardizer.std));
        store.write_nnp(w)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let entries = read_nnp_entries::<T, R>(r)?;
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data.iter().map(|v| v.as_f64()).collect::<Vec<f64>>())
                .ok_or_else(|| Error::Format(format!("classifier checkpoint lacks {name}")))
        };
        let spec = ResidualClassifierSpec {
            depth_blocks: get("meta.depth_blocks")?[0] as usize,
            base_channels: get("meta.base_channels")?[0] as usize,
            embedding_dim: get("meta.embedding_dim")?[0] as usize,
        };
        spec.validate()?;
        let (mean, std) = (get("std.mean")?, get("std.std")?);
        if mean.len() != 2 || std.len() != 2 {
            return Err(Error::Format("standardizer entries must hold 2 values".into()));
        }
        let mut network = Network::new(spec.layers(), &mut ChaCha8Rng::seed_from_u64(0))?;
        network
            .params
            .load_entries(entries.into_iter().filter(|(n, _)| !n.starts_with("meta.") && !n.starts_with("std.")).collect())?;
        Ok(Self {
            spec,
            network,
            standardizer: Standardizer { mean: [mean[0], mean[1]], std: [std[0], std[1]] },
            dev_history: Vec::new(),
            best_epoch: 0,
            best_dev_uar: None,
        })
    }
}

/// Cross-entropy training with Adam, keeping the best-dev-UAR checkpoint
/// (earliest epoch on ties).
pub fn train_classifier<T: Scalar>(
    spec: ResidualClassifierSpec,
    train: LabeledSet<'_, T>,
    dev: LabeledSet<'_, T>,
    config: &ClassifierConfig,
) -> Result<TrainedClassifier<T>> {
    spec.validate()?;
    config.adam.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    if train.classes_present() < CLASSES {
        return Err(Error::DegenerateData("training data contains a single class".into()));
    }
    let refs: Vec<&Tensor<T>> = train.samples.iter().collect();
    let standardizer = Standardizer::fit(&refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let network = Network::new(spec.layers(), &mut rng)?;
    let mut model =
        TrainedClassifier { spec, network, standardizer, dev_history: Vec::new(), best_epoch: 0, best_dev_uar: None };
    if config.epochs == 0 {
        return Ok(model);
    }
    if dev.samples.is_empty() {
        return Err(Error::DegenerateData("dev split is empty".into()));
    }
    let mut adam = AdamState::new(config.adam, &model.network.params);
    let mut order: Vec<usize> = (0..train.samples.len()).collect();
    let mut best = model.network.clone();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch_size) {
            let items: Vec<&Tensor<T>> = idx.iter().map(|&i| &train.samples[i]).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let x = stack_standardized(&model.standardizer, &items)?;
            let mut tape = Tape::new();
            let b = model.network.params.bind(&mut tape);
            let xv = tape.constant(x);
            let logits = model.network.forward(&mut tape, &b, xv)?;
            let loss = tape.softmax_ce(logits, &labels)?;
            if !tape.item(loss).is_finite() {
                return Err(Error::TrainingDiverged { epoch: Some(epoch), message: "non-finite classifier loss".into() });
            }
            let grads = tape.backward(loss)?;
            adam.step(&mut model.network.params, &b.collect(&grads)).map_err(|e| match e {
                Error::TrainingDiverged { message, .. } => Error::TrainingDiverged { epoch: Some(epoch), message },
                other => other,
            })?;
        }
        let u = model.dev_uar(dev)?;
        model.dev_history.push(u);
        if model.best_dev_uar.is_none_or(|b| u > b) {
            model.best_dev_uar = Some(u);
            model.best_epoch = epoch;
            best = model.network.clone();
        }
    }
    model.network = best;
    Ok(model)
}

/// Trains one model per seed and keeps the run with the highest best-dev UAR
/// (first run on ties). Returns the winner and every run's best-dev UAR.
pub fn train_best_of<T: Scalar>(
    spec: ResidualClassifierSpec,
    train: LabeledSet<'_, T>,
    dev: LabeledSet<'_, T>,
    config: &ClassifierConfig,
    seeds: &[u64],
) -> Result<(TrainedClassifier<T>, Vec<f64>)> {
    let mut best: Option<TrainedClassifier<T>> = None;
    let mut scores = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let m = train_classifier(spec, train, dev, &ClassifierConfig { seed, ..config.clone() })?;
        let score = match m.best_dev_uar {
            Some(u) => u,
            None => m.dev_uar(dev)?,
        };
        scores.push(score);
        if best.as_ref().is_none_or(|b| score > b.best_dev_uar.unwrap_or(f64::NEG_INFINITY)) {
            let mut m = m;
            m.best_dev_uar = Some(score);
            best = Some(m);
        }
    }
    let best = best.ok_or_else(|| Error::Config("best-of selection needs at least one seed".into()))?;
    Ok((best, scores))
}

/// Row-major utterance-by-dimension matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { rows: rows.len(), cols: self.cols, data }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record((0..self.cols).map(|i| i.to_string()))?;
        for r in 0..self.rows {
            w.write_record(self.row(r).iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let cols = reader.headers()?.len();
        let mut data = Vec::new();
        let mut rows = 0;
        for rec in reader.records() {
            let rec = rec?;
            for field in rec.iter() {
                data.push(field.parse::<f64>().map_err(|e| Error::Format(format!("bad embedding value {field:?}: {e}")))?);
            }
            rows += 1;
        }
        if data.len() != rows * cols {
            return Err(Error::Format("ragged embedding CSV".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// `EMB1`: magic, `u32` rows, `u32` cols, `f32` values, little-endian.
    pub fn write_emb<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(12 + 4 * self.data.len());
        buf.extend_from_slice(EMB_MAGIC);
        buf.extend_from_slice(&(self.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_emb<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..4] != EMB_MAGIC {
            return Err(Error::Format("missing EMB1 magic".into()));
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * rows * cols {
            return Err(Error::Format("EMB1 payload length does not match its header".into()));
        }
        let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Ok(Self { rows, cols, data })
    }
}

/// Concatenates every member's embedding in family order.
pub fn extract_embeddings<T: Scalar>(
    family: &EmbeddingFamily,
    models: &[TrainedClassifier<T>],
    samples: &[Tensor<T>],
) -> Result<EmbeddingMatrix> {
    if models.len() != family.members.len() || models.iter().zip(&family.members).any(|(m, s)| m.spec != *s) {
        return Err(Error::Config("models do not match the embedding family order".into()));
    }
    let cols = family.width();
    let mut data = vec![0.0; samples.len() * cols];
    let mut offset = 0;
    for m in models {
        let d = m.spec.embedding_dim;
        let e = m.embed(samples).map_err(|e| match e {
            Error::LayerShape { layer, message } => Error::Shape(format!("input does not fit model at layer {layer}: {message}")),
            other => other,
        })?;
        for (r, row) in e.chunks(d).enumerate() {
            for (j, v) in row.iter().enumerate() {
                data[r * cols + offset + j] = v.as_f64();
            }
        }
        offset += d;
    }
    let out = EmbeddingMatrix { rows: samples.len(), cols, data };
    if out.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite embedding".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tone_sample(rng: &mut ChaCha8Rng, class: usize) -> Tensor<f64> {
        let side = 64;
        let mut data: Vec<f64> = (0..2 * side * side).map(|_| rng.random_range(-0.05..0.05)).collect();
        let row = if class == 0 { 10 } else { 40 };
        for c in 0..2 {
            for k in row..row + 3 {
                for m in 0..side {
                    data[(c * side + k) * side + m] += 1.0;
                }
            }
        }
        Tensor { shape: vec![2, side, side], data }
    }

    fn dataset(seed: u64, n: usize) -> (Vec<Tensor<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        (labels.iter().map(|&l| tone_sample(&mut rng, l)).collect(), labels)
    }

    fn spec(depth: usize) -> ResidualClassifierSpec {
        ResidualClassifierSpec { depth_blocks: depth, base_channels: 4, embedding_dim: 8 }
    }

    #[test]
    fn family_widths_and_order() {
        assert_eq!(EmbeddingFamily::toy(8).width(), 384);
        assert_eq!(EmbeddingFamily::from_dims(&[2, 4, 6, 8], &[512, 512, 2048, 2048], 8).unwrap().width(), 5120);
        let err = EmbeddingFamily::from_dims(&[4, 2, 6, 8], &[64, 64, 128, 128], 8);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn separable_task_is_learned() {
        let (x, y) = dataset(1, 24);
        let (dx, dy) = dataset(2, 12);
        let cfg = ClassifierConfig { epochs: 30, batch_size: 8, ..ClassifierConfig::default() };
        let m = train_classifier(spec(2), LabeledSet::new(&x, &y).unwrap(), LabeledSet::new(&dx, &dy).unwrap(), &cfg)
            .unwrap();
        let pred = m.predict(&x).unwrap();
        assert_eq!(pred, y, "train accuracy below 100%");
        assert_eq!(m.dev_history.len(), 30);
        let best = m.best_dev_uar.unwrap();
        assert!(best >= *m.dev_history.last().unwrap());
        assert_eq!(best, m.dev_history[m.best_epoch - 1]);
        assert_eq!(m.dev_uar(LabeledSet::new(&dx, &dy).unwrap()).unwrap(), best);
    }

    #[test]
    fn zero_epochs_and_degenerate_data() {
        let (x, y) = dataset(3, 4);
        let set = LabeledSet::new(&x, &y).unwrap();
        let cfg = ClassifierConfig { epochs: 0, ..ClassifierConfig::default() };
        let m = train_classifier(spec(2), set, set, &cfg).unwrap();
        assert!(m.dev_history.is_empty());
        let ones = vec![1; 4];
        let single = LabeledSet::new(&x, &ones).unwrap();
        assert!(matches!(train_classifier(spec(2), single, set, &cfg), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn best_of_returns_max() {
        let (x, y) = dataset(4, 16);
        let (dx, dy) = dataset(5, 8);
        let cfg = ClassifierConfig { epochs: 2, batch_size: 8, ..ClassifierConfig::default() };
        let (best, scores) =
            train_best_of(spec(2), LabeledSet::new(&x, &y).unwrap(), LabeledSet::new(&dx, &dy).unwrap(), &cfg, &[1, 2, 3])
                .unwrap();
        assert_eq!(scores.len(), 3);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best.best_dev_uar, Some(max));
    }

    #[test]
    fn extraction_order_and_determinism() {
        let (x, y) = dataset(6, 6);
        let set = LabeledSet::new(&x, &y).unwrap();
        let family = EmbeddingFamily::new(vec![spec(2), ResidualClassifierSpec { embedding_dim: 5, ..spec(3) }]).unwrap();
        let cfg = ClassifierConfig { epochs: 1, batch_size: 4, ..ClassifierConfig::default() };
        let models: Vec<_> = family.members.iter().map(|&s| train_classifier(s, set, set, &cfg).unwrap()).collect();
        let e = extract_embeddings(&family, &models, &x).unwrap();
        assert_eq!((e.rows, e.cols), (6, 13));
        assert_eq!(e, extract_embeddings(&family, &models, &x).unwrap());

        let perm = [3, 0, 5, 1, 4, 2];
        let shuffled: Vec<_> = perm.iter().map(|&i| x[i].clone()).collect();
        assert_eq!(extract_embeddings(&family, &models, &shuffled).unwrap(), e.select(&perm));

        let reversed: Vec<_> = models.iter().rev().cloned().collect();
        assert!(matches!(extract_embeddings(&family, &reversed, &x), Err(Error::Config(_))));

        let wrong = vec![Tensor::<f64>::zeros(vec![3, 64, 64])];
        assert!(matches!(extract_embeddings(&family, &models, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn formats_round_trip() {
        let m = EmbeddingMatrix { rows: 2, cols: 3, data: vec![0.5, -1.25, 3.0, 1e-3, 2.0, -7.5] };
        let mut csv = Vec::new();
        m.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv.clone()).unwrap().starts_with("0,1,2\n"));
        assert_eq!(EmbeddingMatrix::read_csv(csv.as_slice()).unwrap(), m);
        let mut bin = Vec::new();
        m.write_emb(&mut bin).unwrap();
        assert_eq!(&bin[..4], EMB_MAGIC);
        let back = EmbeddingMatrix::read_emb(bin.as_slice()).unwrap();
        assert_eq!((back.rows, back.cols), (2, 3));
        assert!(back.data.iter().zip(&m.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (x, y) = dataset(7, 4);
        let set = LabeledSet::new(&x, &y).unwrap();
        let m = train_classifier(spec(2), set, set, &ClassifierConfig { epochs: 1, ..ClassifierConfig::default() }).unwrap();
        let mut buf = Vec::new();
        m.write(&mut buf).unwrap();
        let back = TrainedClassifier::<f64>::read(buf.as_slice()).unwrap();
        assert_eq!(back.spec, m.spec);
        let (a, b) = (m.embed(&x).unwrap(), back.embed(&x).unwrap());
        assert!(a.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-3));
    }
}
