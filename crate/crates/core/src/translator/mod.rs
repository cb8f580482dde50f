//! Cycle-consistent spectrogram translation with the U-GAT-IT loss suite.
//!
//! A [`TranslatorPair`] holds two generators (`G: X -> Y`, `F: Y -> X`) and
//! two discriminators. Training alternates a discriminator step on detached
//! translations with a generator step on the fooling, cycle, identity and
//! generator-CAM terms. Opposite-label augmentation needs two independently
//! trained pairs: one for mask -> non-mask and one for the reverse.

mod losses;
mod nets;
mod relabel;

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use losses::{
    loss_cam, loss_cycle, loss_gan, loss_gan_xy, loss_gan_yx, loss_identity, CamScores, GanLossReport, LossWeights,
};
pub use nets::{CamHead, CamOutput, Discriminator, DiscriminatorOutput, Generator, GeneratorOutput, GeneratorSpec};
pub use relabel::{translate_and_relabel, TRANSLATED_SUFFIX};

use crate::error::{Error, Result};
use crate::nn::{read_nnp_entries, AdamConfig, AdamState, Binding, ParamKind, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorConfig {
    pub generator_channels: usize,
    pub discriminator_channels: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            generator_channels: 4,
            discriminator_channels: 4,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            epochs: 100,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TranslatorConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        let w = self.weights;
        if ![w.cycle, w.identity, w.cam].iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::Parameter(format!("loss weights must be finite and nonnegative: {w:?}")));
        }
        if self.batch_size == 0 || self.generator_channels == 0 || self.discriminator_channels == 0 {
            return Err(Error::Parameter("translator batch size and widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel z-scoring of 2-channel spectrogram tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl Standardizer {
    /// Statistics over every `[2, H, W]` sample given.
    pub fn fit<T: Scalar>(samples: &[&Tensor<T>]) -> Result<Self> {
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        let mut n = [0usize; 2];
        for s in samples {
            check_sample(s)?;
            let half = s.len() / 2;
            for (i, v) in s.data.iter().enumerate() {
                let c = i / half;
                let v = v.as_f64();
                sum[c] += v;
                sq[c] += v * v;
                n[c] += 1;
            }
        }
        if n[0] == 0 {
            return Err(Error::DegenerateData("no samples to standardize".into()));
        }
        let mut out = Self { mean: [0.0; 2], std: [1.0; 2] };
        for c in 0..2 {
            let m = sum[c] / n[c] as f64;
            let var = (sq[c] / n[c] as f64 - m * m).max(0.0);
            out.mean[c] = m;
            out.std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(out)
    }

    pub fn apply<T: Scalar>(&self, s: &Tensor<T>) -> Tensor<T> {
        self.map(s, |v, c| (v - self.mean[c]) / self.std[c])
    }

    pub fn invert<T: Scalar>(&self, s: &Tensor<T>) -> Tensor<T> {
        self.map(s, |v, c| v * self.std[c] + self.mean[c])
    }

    fn map<T: Scalar>(&self, s: &Tensor<T>, f: impl Fn(f64, usize) -> f64) -> Tensor<T> {
        let per_channel = s.len() / 2;
        let data = s.data.iter().enumerate().map(|(i, v)| T::of(f(v.as_f64(), (i / per_channel.max(1)).min(1)))).collect();
        Tensor { shape: s.shape.clone(), data }
    }
}

fn check_sample<T>(s: &Tensor<T>) -> Result<()> {
    if s.shape.len() != 3 || s.shape[0] != 2 {
        return Err(Error::Shape(format!("translator samples must be [2, H, W], got {:?}", s.shape)));
    }
    Ok(())
}

/// A trained one-directional generator with its data standardization.
#[derive(Debug, Clone)]
pub struct Translator<T> {
    pub generator: Generator<T>,
    pub standardizer: Standardizer,
    pub epochs_trained: usize,
}

impl<T: Scalar> Translator<T> {
    /// Maps `[2, H, W]` samples to the other domain in original units.
    pub fn translate(&self, samples: &[&Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        if self.epochs_trained == 0 {
            return Err(Error::Contract("translator has not been trained".into()));
        }
        samples
            .iter()
            .map(|s| {
                check_sample(s)?;
                let z = self.standardizer.apply(s);
                let batch = Tensor::stack(&[z])?;
                let y = self.generator.infer(&batch)?;
                let mut out = self.standardizer.invert(&y.unstack().remove(0));
                out.shape = s.shape.clone();
                Ok(out)
            })
            .collect()
    }

    /// NNP1 checkpoint: generator parameters plus `meta.*` / `std.*` entries.
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut store = self.generator.params.clone();
        let spec = self.generator.spec;
        let vec1 = |v: f64| Tensor { shape: vec![1], data: vec![T::of(v)] };
        store.add("meta.base_channels", ParamKind::Weight, vec1(spec.base_channels as f64));
        store.add("meta.output_scale", ParamKind::Weight, vec1(spec.output_scale));
        store.add("meta.epochs_trained", ParamKind::Weight, vec1(self.epochs_trained as f64));
        let pair = |a: [f64; 2]| Tensor { shape: vec![2], data: vec![T::of(a[0]), T::of(a[1])] };
        store.add("std.mean", ParamKind::Weight, pair(self.standardizer.mean));
        store.add("std.std", ParamKind::Weight, pair(self.standardizer.std));
        store.write_nnp(w)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let entries = read_nnp_entries::<T, R>(r)?;
        let get = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.data.iter().map(|v| v.as_f64()).collect::<Vec<f64>>())
                .ok_or_else(|| Error::Format(format!("translator checkpoint lacks {name}")))
        };
        let base_channels = get("meta.base_channels")?[0] as usize;
        let output_scale = get("meta.output_scale")?[0];
        let epochs_trained = get("meta.epochs_trained")?[0] as usize;
        let (mean, std) = (get("std.mean")?, get("std.std")?);
        if mean.len() != 2 || std.len() != 2 {
            return Err(Error::Format("standardizer entries must hold 2 values".into()));
        }
        let spec = GeneratorSpec { base_channels, output_scale };
        let mut generator = Generator::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        let params: Vec<(String, Tensor<T>)> =
            entries.into_iter().filter(|(n, _)| !n.starts_with("meta.") && !n.starts_with("std.")).collect();
        generator.params.load_entries(params)?;
        Ok(Self {
            generator,
            standardizer: Standardizer { mean: [mean[0], mean[1]], std: [std[0], std[1]] },
            epochs_trained,
        })
    }
}

/// Two generators and two discriminators trained jointly.
#[derive(Debug, Clone)]
pub struct TranslatorPair<T> {
    pub g: Generator<T>,
    pub f: Generator<T>,
    pub d_x: Discriminator<T>,
    pub d_y: Discriminator<T>,
    pub weights: LossWeights,
    pub standardizer: Standardizer,
    pub epochs_trained: usize,
}

/// Scalar loss nodes of one generator-step graph.
struct GeneratorGraph {
    objective: Var,
    cycle: Var,
    identity: Var,
}

impl<T: Scalar> TranslatorPair<T> {
    pub fn new(config: &TranslatorConfig, standardizer: Standardizer, output_scale: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let spec = GeneratorSpec { base_channels: config.generator_channels, output_scale };
        Ok(Self {
            g: Generator::new(spec, &mut rng)?,
            f: Generator::new(spec, &mut rng)?,
            d_x: Discriminator::new(config.discriminator_channels, &mut rng)?,
            d_y: Discriminator::new(config.discriminator_channels, &mut rng)?,
            weights: config.weights,
            standardizer,
            epochs_trained: 0,
        })
    }

    /// The X -> Y direction as a standalone translator.
    pub fn forward_translator(&self) -> Translator<T> {
        Translator { generator: self.g.clone(), standardizer: self.standardizer, epochs_trained: self.epochs_trained }
    }

    /// Loss report on standardized `[B, 2, H, W]` batches without updating anything.
    pub fn evaluate(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<GanLossReport> {
        let (fake_y, fake_x) = (self.g.infer(x)?, self.f.infer(y)?);
        let (_, gan_xy, gan_yx, cam) = self.discriminator_terms(x, y, &fake_y, &fake_x, false)?;
        let mut tape = Tape::new();
        let (gb, fb) = (self.g.params.bind_frozen(&mut tape), self.f.params.bind_frozen(&mut tape));
        let (dxb, dyb) = (self.d_x.params.bind_frozen(&mut tape), self.d_y.params.bind_frozen(&mut tape));
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let graph = self.generator_graph(&mut tape, &gb, &fb, &dxb, &dyb, xv, yv)?;
        GanLossReport::new(gan_xy, gan_yx, tape.item(graph.cycle).as_f64(), tape.item(graph.identity).as_f64(), cam, self.weights)
    }

    /// Discriminator objective on detached translations.
    /// Returns `(gradients per [d_x, d_y] if requested, l_gan_xy, l_gan_yx, l_cam)`.
    #[allow(clippy::type_complexity)]
    fn discriminator_terms(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        fake_y: &Tensor<T>,
        fake_x: &Tensor<T>,
        with_grads: bool,
    ) -> Result<(Option<[Vec<Vec<T>>; 2]>, f64, f64, f64)> {
        let mut tape = Tape::new();
        let (dxb, dyb) = if with_grads {
            (self.d_x.params.bind(&mut tape), self.d_y.params.bind(&mut tape))
        } else {
            (self.d_x.params.bind_frozen(&mut tape), self.d_y.params.bind_frozen(&mut tape))
        };
        let [xv, yv, fyv, fxv] = [x, y, fake_y, fake_x].map(|t| tape.constant(t.clone()));
        let dy_real = self.d_y.forward(&mut tape, &dyb, yv)?;
        let dy_fake = self.d_y.forward(&mut tape, &dyb, fyv)?;
        let dx_real = self.d_x.forward(&mut tape, &dxb, xv)?;
        let dx_fake = self.d_x.forward(&mut tape, &dxb, fxv)?;
        let (zero, one) = (T::zero(), T::one());
        let terms = [
            tape.mean_sq_dev(dy_real.score, zero)?,
            tape.mean_sq_dev(dy_fake.score, one)?,
            tape.mean_sq_dev(dx_real.score, zero)?,
            tape.mean_sq_dev(dx_fake.score, one)?,
            tape.mean_sq_dev(dy_real.cam_score, zero)?,
            tape.mean_sq_dev(dy_fake.cam_score, one)?,
            tape.mean_sq_dev(dx_real.cam_score, zero)?,
            tape.mean_sq_dev(dx_fake.cam_score, one)?,
        ];
        let v: Vec<f64> = terms.iter().map(|&t| tape.item(t).as_f64()).collect();
        let (gan_xy, gan_yx, cam) = (v[0] + v[1], v[2] + v[3], v[4] + v[5] + v[6] + v[7]);
        if !with_grads {
            return Ok((None, gan_xy, gan_yx, cam));
        }
        let weighted: Vec<(Var, T)> = terms.iter().map(|&t| (t, one)).collect();
        let loss = tape.lin_comb(&weighted)?;
        let grads = tape.backward(loss)?;
        Ok((Some([dxb.collect(&grads), dyb.collect(&grads)]), gan_xy, gan_yx, cam))
    }

    #[allow(clippy::too_many_arguments)]
    fn generator_graph(
        &self,
        tape: &mut Tape<T>,
        gb: &Binding,
        fb: &Binding,
        dxb: &Binding,
        dyb: &Binding,
        x: Var,
        y: Var,
    ) -> Result<GeneratorGraph> {
        let (zero, one) = (T::zero(), T::one());
        let gx = self.g.forward(tape, gb, x)?;
        let fy = self.f.forward(tape, fb, y)?;
        let fgx = self.f.forward(tape, fb, gx.image)?;
        let gfy = self.g.forward(tape, gb, fy.image)?;
        let gy = self.g.forward(tape, gb, y)?;
        let fx = self.f.forward(tape, fb, x)?;
        let dy_fake = self.d_y.forward(tape, dyb, gx.image)?;
        let dx_fake = self.d_x.forward(tape, dxb, fy.image)?;

        // fakes are pushed toward the real target 0
        let fool = [
            tape.mean_sq_dev(dy_fake.score, zero)?,
            tape.mean_sq_dev(dx_fake.score, zero)?,
            tape.mean_sq_dev(dy_fake.cam_score, zero)?,
            tape.mean_sq_dev(dx_fake.cam_score, zero)?,
        ];
        let c1 = tape.mean_abs_diff(fgx.image, x)?;
        let c2 = tape.mean_abs_diff(gfy.image, y)?;
        let cycle = tape.lin_comb(&[(c1, one), (c2, one)])?;
        let i1 = tape.mean_abs_diff(gy.image, y)?;
        let i2 = tape.mean_abs_diff(fx.image, x)?;
        let identity = tape.lin_comb(&[(i1, one), (i2, one)])?;
        // generator attention classifiers separate source-domain inputs (1) from target-domain inputs (0)
        let cam = [
            tape.bce_logits(gx.cam_logits, one)?,
            tape.bce_logits(gy.cam_logits, zero)?,
            tape.bce_logits(fy.cam_logits, one)?,
            tape.bce_logits(fx.cam_logits, zero)?,
        ];
        let w = self.weights;
        let mut terms: Vec<(Var, T)> = fool.iter().map(|&t| (t, one)).collect();
        terms.push((cycle, T::of(w.cycle)));
        terms.push((identity, T::of(w.identity)));
        terms.extend(cam.iter().map(|&t| (t, T::of(w.cam))));
        let objective = tape.lin_comb(&terms)?;
        Ok(GeneratorGraph { objective, cycle, identity })
    }

    /// One discriminator step then one generator step on standardized batches.
    pub fn train_step(
        &mut self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        opt: &mut TranslatorOptimizers<T>,
    ) -> Result<GanLossReport> {
        let (fake_y, fake_x) = (self.g.infer(x)?, self.f.infer(y)?);
        let (grads, gan_xy, gan_yx, cam) = self.discriminator_terms(x, y, &fake_y, &fake_x, true)?;
        let [gdx, gdy] = grads.expect("gradients requested");

        let mut tape = Tape::new();
        let (gb, fb) = (self.g.params.bind(&mut tape), self.f.params.bind(&mut tape));
        let (dxb, dyb) = (self.d_x.params.bind_frozen(&mut tape), self.d_y.params.bind_frozen(&mut tape));
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let graph = self.generator_graph(&mut tape, &gb, &fb, &dxb, &dyb, xv, yv)?;
        let (cycle, identity) = (tape.item(graph.cycle).as_f64(), tape.item(graph.identity).as_f64());
        let report = GanLossReport::new(gan_xy, gan_yx, cycle, identity, cam, self.weights)?;
        let grads = tape.backward(graph.objective)?;

        opt.d_x.step(&mut self.d_x.params, &gdx)?;
        opt.d_y.step(&mut self.d_y.params, &gdy)?;
        opt.g.step(&mut self.g.params, &gb.collect(&grads))?;
        opt.f.step(&mut self.f.params, &fb.collect(&grads))?;
        Ok(report)
    }

    /// Gradients of the generator objective for `[g, f]` on one batch.
    pub fn generator_gradients(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<[Vec<Vec<T>>; 2]> {
        let mut tape = Tape::new();
        let (gb, fb) = (self.g.params.bind(&mut tape), self.f.params.bind(&mut tape));
        let (dxb, dyb) = (self.d_x.params.bind_frozen(&mut tape), self.d_y.params.bind_frozen(&mut tape));
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let graph = self.generator_graph(&mut tape, &gb, &fb, &dxb, &dyb, xv, yv)?;
        let grads = tape.backward(graph.objective)?;
        Ok([gb.collect(&grads), fb.collect(&grads)])
    }

    /// Discriminator objective value on detached translations.
    pub fn discriminator_loss(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
        let (fake_y, fake_x) = (self.g.infer(x)?, self.f.infer(y)?);
        let (_, a, b, c) = self.discriminator_terms(x, y, &fake_y, &fake_x, false)?;
        Ok(a + b + c)
    }

    /// One Adam step on both discriminators with the generators frozen.
    pub fn discriminator_step(&mut self, x: &Tensor<T>, y: &Tensor<T>, opt: &mut TranslatorOptimizers<T>) -> Result<()> {
        let (fake_y, fake_x) = (self.g.infer(x)?, self.f.infer(y)?);
        let (grads, ..) = self.discriminator_terms(x, y, &fake_y, &fake_x, true)?;
        let [gdx, gdy] = grads.expect("gradients requested");
        opt.d_x.step(&mut self.d_x.params, &gdx)?;
        opt.d_y.step(&mut self.d_y.params, &gdy)
    }
}

/// Adam states for the four networks of a pair.
#[derive(Debug, Clone)]
pub struct TranslatorOptimizers<T> {
    pub g: AdamState<T>,
    pub f: AdamState<T>,
    pub d_x: AdamState<T>,
    pub d_y: AdamState<T>,
}

impl<T: Scalar> TranslatorOptimizers<T> {
    pub fn new(config: AdamConfig, pair: &TranslatorPair<T>) -> Self {
        Self {
            g: AdamState::new(config, &pair.g.params),
            f: AdamState::new(config, &pair.f.params),
            d_x: AdamState::new(config, &pair.d_x.params),
            d_y: AdamState::new(config, &pair.d_y.params),
        }
    }
}

/// Trained pair plus the mean loss report of every epoch.
#[derive(Debug, Clone)]
pub struct TrainingOutcome<T> {
    pub pair: TranslatorPair<T>,
    pub history: Vec<GanLossReport>,
}

impl<T> TrainingOutcome<T> {
    /// Final-epoch cycle loss over the first epoch's.
    pub fn cycle_ratio(&self) -> Option<f64> {
        let first = self.history.first()?.l_cycle;
        let last = self.history.last()?.l_cycle;
        (first > 0.0).then(|| last / first)
    }
}

/// Output range of the generators: the largest standardized magnitude in
/// the training data, with a small margin.
pub fn output_scale_for<T: Scalar>(std: &Standardizer, samples: &[&Tensor<T>]) -> f64 {
    let peak = samples.iter().map(|s| std.apply(s).data.iter().fold(0.0f64, |m, v| m.max(v.as_f64().abs()))).fold(0.0, f64::max);
    (peak * 1.05).max(1.0)
}

/// Trains a pair mapping domain `x` to domain `y`. Samples are `[2, H, W]`
/// in original units; standardization is fitted on both domains.
pub fn train_translator<T: Scalar>(x: &[Tensor<T>], y: &[Tensor<T>], config: &TranslatorConfig) -> Result<TrainingOutcome<T>> {
    train_translator_with(x, y, config, |_, _| {})
}

/// [`train_translator`] with a callback after every epoch.
pub fn train_translator_with<T: Scalar>(
    x: &[Tensor<T>],
    y: &[Tensor<T>],
    config: &TranslatorConfig,
    mut on_epoch: impl FnMut(usize, &GanLossReport),
) -> Result<TrainingOutcome<T>> {
    config.validate()?;
    if x.is_empty() || y.is_empty() {
        return Err(Error::DegenerateData("both translator domains need at least one sample".into()));
    }
    let shape = &x[0].shape;
    for s in x.iter().chain(y) {
        check_sample(s)?;
        if &s.shape != shape {
            return Err(Error::Shape(format!("translator samples differ in shape: {:?} vs {shape:?}", s.shape)));
        }
    }
    let all: Vec<&Tensor<T>> = x.iter().chain(y).collect();
    let std = Standardizer::fit(&all)?;
    let scale = output_scale_for(&std, &all);
    let mut pair = TranslatorPair::new(config, std, scale)?;
    let xs: Vec<Tensor<T>> = x.iter().map(|s| std.apply(s)).collect();
    let ys: Vec<Tensor<T>> = y.iter().map(|s| std.apply(s)).collect();
    let mut opt = TranslatorOptimizers::new(config.adam, &pair);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a11);
    let batch = config.batch_size.min(xs.len()).min(ys.len());
    let steps = xs.len().max(ys.len()).div_ceil(batch);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut xi = Cycler::new(xs.len());
        let mut yi = Cycler::new(ys.len());
        let mut reports = Vec::with_capacity(steps);
        for _ in 0..steps {
            let xb: Vec<Tensor<T>> = (0..batch).map(|_| xs[xi.next(&mut rng)].clone()).collect();
            let yb: Vec<Tensor<T>> = (0..batch).map(|_| ys[yi.next(&mut rng)].clone()).collect();
            let (xb, yb) = (Tensor::stack(&xb)?, Tensor::stack(&yb)?);
            let r = pair.train_step(&xb, &yb, &mut opt).map_err(|e| with_epoch(e, epoch))?;
            reports.push(r);
        }
        let mean = GanLossReport::mean(&reports, config.weights).map_err(|e| with_epoch(e, epoch))?;
        pair.epochs_trained = epoch;
        on_epoch(epoch, &mean);
        history.push(mean);
    }
    Ok(TrainingOutcome { pair, history })
}

fn with_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::TrainingDiverged { message, .. } => Error::TrainingDiverged { epoch: Some(epoch), message },
        other => other,
    }
}

/// Draws indices from successive shuffled permutations.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

#[cfg(test)]
mod tests;
