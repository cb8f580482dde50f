use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::manifest::{DatasetManifest, Label, Provenance, Record, Split};
use crate::nn::gradcheck::{check_gradients, linear_readout, DEFAULT_STEP};

fn sample(rng: &mut impl Rng, side: usize) -> Tensor<f64> {
    Tensor { shape: vec![2, side, side], data: (0..2 * side * side).map(|_| rng.random_range(-1.0..1.0)).collect() }
}

fn batch(rng: &mut impl Rng, n: usize, side: usize) -> Tensor<f64> {
    let items: Vec<Tensor<f64>> = (0..n).map(|_| sample(rng, side)).collect();
    Tensor::stack(&items).unwrap()
}

fn small_config(seed: u64) -> TranslatorConfig {
    TranslatorConfig { generator_channels: 2, discriminator_channels: 2, epochs: 1, seed, ..TranslatorConfig::default() }
}

fn identity_std() -> Standardizer {
    Standardizer { mean: [0.0; 2], std: [1.0; 2] }
}

#[test]
fn identity_generators_and_silent_discriminators() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = sample(&mut rng, 4).data;
    let y = sample(&mut rng, 4).data;
    let cycle = loss_cycle(&x, &x, &y, &y).unwrap();
    let ident = loss_identity(&y, &y, &x, &x).unwrap();
    assert_eq!((cycle, ident), (0.0, 0.0));
    let z = [0.0, 0.0];
    let gan_xy = loss_gan_xy(&z, &z).unwrap();
    let gan_yx = loss_gan_yx(&z, &z).unwrap();
    let cam = loss_cam(CamScores { dy_real: Some(&z[..]), dy_fake: Some(&z[..]), dx_real: Some(&z[..]), dx_fake: Some(&z[..]) })
        .unwrap();
    let r = GanLossReport::new(gan_xy, gan_yx, cycle, ident, cam, LossWeights::default()).unwrap();
    assert_eq!(r.total, 1.0 + 1.0 + 0.0 + 0.0 + 1000.0 * 2.0);
}

#[test]
fn network_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pair = TranslatorPair::<f64>::new(&small_config(0), identity_std(), 3.0).unwrap();
    let x = batch(&mut rng, 3, 16);
    let mut tape = Tape::new();
    let b = pair.g.params.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let out = pair.g.forward(&mut tape, &b, xv).unwrap();
    assert_eq!(tape.shape(out.image), [3, 2, 16, 16]);
    assert_eq!(tape.shape(out.cam_logits), [3, 2]);
    // attention covers the encoder's 4x-downsampled grid
    assert_eq!(tape.shape(out.attention), [3, 1, 4, 4]);
    assert!(tape.value(out.image).iter().all(|v| v.abs() < 3.0));
    let db = pair.d_y.params.bind_frozen(&mut tape);
    let d = pair.d_y.forward(&mut tape, &db, xv).unwrap();
    assert_eq!(tape.shape(d.score), [3]);
    assert_eq!(tape.shape(d.cam_score), [3]);
}

#[test]
fn generator_and_discriminator_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pair = TranslatorPair::<f64>::new(&small_config(4), identity_std(), 2.0).unwrap();
    let x = batch(&mut rng, 2, 8);
    let mut leaves = vec![x];
    leaves.extend(pair.g.params.iter().map(|p| p.value.clone()));
    let report = check_gradients(&leaves, 30, 9, DEFAULT_STEP, |tape, v| {
        let b = crate::nn::Binding::from_vars(v[1..].to_vec());
        let out = pair.g.forward(tape, &b, v[0])?;
        let img = linear_readout(tape, out.image, &mut ChaCha8Rng::seed_from_u64(1))?;
        let cam = tape.bce_logits(out.cam_logits, 1.0)?;
        tape.lin_comb(&[(img, 1.0), (cam, 0.5)])
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "generator {report:?}");

    let x = batch(&mut rng, 2, 16);
    let mut leaves = vec![x];
    leaves.extend(pair.d_x.params.iter().map(|p| p.value.clone()));
    let report = check_gradients(&leaves, 30, 10, DEFAULT_STEP, |tape, v| {
        let b = crate::nn::Binding::from_vars(v[1..].to_vec());
        let out = pair.d_x.forward(tape, &b, v[0])?;
        let s = tape.mean_sq_dev(out.score, 1.0)?;
        let c = tape.mean_sq_dev(out.cam_score, 0.0)?;
        tape.lin_comb(&[(s, 1.0), (c, 1.0)])
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "discriminator {report:?}");
}

#[test]
fn discriminator_step_decreases_its_loss() {
    let mut decreased = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut pair = TranslatorPair::<f64>::new(&small_config(seed), identity_std(), 2.0).unwrap();
        let x = batch(&mut rng, 2, 16);
        let y = batch(&mut rng, 2, 16);
        let mut opt = TranslatorOptimizers::new(AdamConfig::default(), &pair);
        let before = pair.discriminator_loss(&x, &y).unwrap();
        pair.discriminator_step(&x, &y, &mut opt).unwrap();
        let after = pair.discriminator_loss(&x, &y).unwrap();
        decreased += usize::from(after < before);
    }
    assert!(decreased >= 95, "only {decreased}/100 steps decreased the loss");
}

#[test]
fn every_generator_parameter_receives_gradient() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pair = TranslatorPair::<f64>::new(&small_config(seed), identity_std(), 2.0).unwrap();
        let grads = pair.generator_gradients(&batch(&mut rng, 2, 16), &batch(&mut rng, 2, 16)).unwrap();
        for (net, g) in [(&pair.g, &grads[0]), (&pair.f, &grads[1])] {
            for (p, gp) in net.params.iter().zip(g) {
                assert!(gp.iter().any(|v| *v != 0.0), "seed {seed}: {} has zero gradient", p.name);
            }
        }
    }
}

#[test]
fn zero_epochs_returns_initial_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = vec![sample(&mut rng, 8)];
    let y = vec![sample(&mut rng, 8)];
    let cfg = TranslatorConfig { epochs: 0, ..small_config(7) };
    let out = train_translator(&x, &y, &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.pair.epochs_trained, 0);
    let fresh = TranslatorPair::<f64>::new(&cfg, out.pair.standardizer, out.pair.g.spec.output_scale).unwrap();
    for (a, b) in fresh.g.params.iter().zip(out.pair.g.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn single_sample_domains_train() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = vec![sample(&mut rng, 8)];
    let y = vec![sample(&mut rng, 8), sample(&mut rng, 8), sample(&mut rng, 8)];
    let cfg = TranslatorConfig { epochs: 2, ..small_config(8) };
    let out = train_translator(&x, &y, &cfg).unwrap();
    assert_eq!(out.history.len(), 2);
    for r in &out.history {
        assert!(r.is_finite());
        assert!((r.total - r.weighted_total(cfg.weights)).abs() <= 1e-12 * r.total.abs().max(1.0));
    }
    assert!(matches!(train_translator(&[], &y, &cfg), Err(Error::DegenerateData(_))));
}

#[test]
fn training_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x: Vec<_> = (0..3).map(|_| sample(&mut rng, 8)).collect();
    let y: Vec<_> = (0..2).map(|_| sample(&mut rng, 8)).collect();
    let cfg = TranslatorConfig { epochs: 2, ..small_config(9) };
    let a = train_translator(&x, &y, &cfg).unwrap();
    let b = train_translator(&x, &y, &cfg).unwrap();
    assert_eq!(a.history, b.history);
}

fn trained_translator(seed: u64) -> Translator<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = vec![sample(&mut rng, 8), sample(&mut rng, 8)];
    let y = vec![sample(&mut rng, 8)];
    train_translator(&x, &y, &TranslatorConfig { epochs: 1, ..small_config(seed) }).unwrap().pair.forward_translator()
}

fn rec(id: &str, label: Label, split: Split) -> Record {
    Record { id: id.into(), path: format!("{id}.wav").into(), label, split, provenance: Provenance::Original }
}

#[test]
fn relabel_balances_training_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut records = Vec::new();
    for i in 0..6 {
        records.push(rec(&format!("m{i}"), Label::Mask, Split::Train));
    }
    for i in 0..4 {
        records.push(rec(&format!("n{i}"), Label::NonMask, Split::Train));
    }
    records.push(rec("dev0", Label::Mask, Split::Dev));
    records.push(rec("test0", Label::NonMask, Split::Test));
    let manifest = DatasetManifest::new(records).unwrap();
    let data: Vec<_> = (0..manifest.len()).map(|_| sample(&mut rng, 8)).collect();
    let (g, g_prime) = (trained_translator(1), trained_translator(2));
    let (out, out_data) = translate_and_relabel(&manifest, &data, &g, &g_prime).unwrap();
    assert_eq!(out.class_counts(Split::Train), [10, 10]);
    assert_eq!(out.class_counts(Split::Dev), [1, 0]);
    assert_eq!(out.class_counts(Split::Test), [0, 1]);
    assert_eq!(out.len(), out_data.len());
    for (r, t) in out.records.iter().zip(&out_data) {
        assert_eq!(t.shape, vec![2, 8, 8]);
        if r.provenance == Provenance::Translated {
            assert_eq!(r.split, Split::Train);
            let src = r.id.strip_suffix(TRANSLATED_SUFFIX).unwrap();
            let source = manifest.records.iter().find(|s| s.id == src).unwrap();
            assert_eq!(r.label, source.label.other());
        }
    }

    let empty = DatasetManifest::new(vec![rec("d", Label::Mask, Split::Dev)]).unwrap();
    let (same, _) = translate_and_relabel(&empty, &data[..1], &g, &g_prime).unwrap();
    assert_eq!(same, empty);
}

#[test]
fn relabel_rejects_untrained_generators() {
    let mut untrained = trained_translator(3);
    untrained.epochs_trained = 0;
    let manifest = DatasetManifest::new(vec![rec("a", Label::Mask, Split::Train)]).unwrap();
    let data = vec![sample(&mut ChaCha8Rng::seed_from_u64(0), 8)];
    let err = translate_and_relabel(&manifest, &data, &untrained, &trained_translator(4));
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn translator_checkpoint_round_trip() {
    let t = trained_translator(5);
    let mut buf = Vec::new();
    t.write(&mut buf).unwrap();
    let back = Translator::<f64>::read(buf.as_slice()).unwrap();
    assert_eq!(back.epochs_trained, 1);
    let s = sample(&mut ChaCha8Rng::seed_from_u64(1), 8);
    let (a, b) = (t.translate(&[&s]).unwrap(), back.translate(&[&s]).unwrap());
    for (p, q) in a[0].data.iter().zip(&b[0].data) {
        assert!((p - q).abs() < 1e-3, "{p} vs {q}");
    }
}
