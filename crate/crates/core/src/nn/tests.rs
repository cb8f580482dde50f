use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check_gradients, linear_readout, DEFAULT_STEP};
use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut impl Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| r.random_range(-1.0..1.0)).collect() }
}

#[test]
fn empty_network_is_identity() {
    let net = Network::<f64>::new(vec![], &mut rng(0)).unwrap();
    let x = random_tensor(&mut rng(1), vec![2, 3, 4, 4]);
    assert_eq!(net.infer(&x).unwrap(), x);
}

#[test]
fn identity_dense_is_identity() {
    let mut net = Network::<f64>::new(vec![LayerSpec::Dense { inputs: 3, outputs: 3, bias: true }], &mut rng(0)).unwrap();
    let w = net.params.find("0.dense.weight").unwrap();
    net.params.get_mut(w).value.data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let x = random_tensor(&mut rng(2), vec![4, 3]);
    assert_eq!(net.infer(&x).unwrap(), x);
}

fn unrolled_conv(x: &[f64], h: usize, w: usize, k: &[f64], ks: usize, stride: usize) -> Vec<f64> {
    let pad = (ks / 2) as isize;
    let ho = (h + 2 * (ks / 2) - ks) / stride + 1;
    let wo = (w + 2 * (ks / 2) - ks) / stride + 1;
    let mut out = vec![0.0; ho * wo];
    for i in 0..ho {
        for j in 0..wo {
            let mut acc = 0.0;
            for a in 0..ks {
                for b in 0..ks {
                    let r = (i * stride) as isize + a as isize - pad;
                    let c = (j * stride) as isize + b as isize - pad;
                    if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                        acc += k[a * ks + b] * x[r as usize * w + c as usize];
                    }
                }
            }
            out[i * wo + j] = acc;
        }
    }
    out
}

#[test]
fn conv_matches_unrolled_cross_correlation() {
    let x: Vec<f64> = (0..25).map(|i| (i as f64 * 0.37).sin()).collect();
    let k = vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.0, 0.0, 0.75, -0.5];
    for stride in [1, 2] {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::new(vec![1, 1, 5, 5], x.clone()).unwrap());
        let kv = tape.constant(Tensor::new(vec![1, 1, 3, 3], k.clone()).unwrap());
        let y = tape.conv2d(xv, kv, None, stride).unwrap();
        let expect = unrolled_conv(&x, 5, 5, &k, 3, stride);
        assert_eq!(tape.value(y).len(), expect.len());
        for (a, b) in tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[6.0]);
}

#[test]
fn dead_parameter_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0), true);
    let unused = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.get_or_zero(unused), vec![0.0; 3]);
}

#[test]
fn backward_contracts() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    let y = tape.scale(x, 2.0);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(1.5), true);
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn layer_shape_error_names_the_layer() {
    let net = Network::<f64>::new(
        vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: 4, kernel: 3, stride: 1, bias: true },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Dense { inputs: 4, outputs: 1, bias: true },
        ],
        &mut rng(0),
    )
    .unwrap();
    let x = Tensor::zeros(vec![1, 2, 4, 4]);
    match net.infer(&x) {
        Err(Error::LayerShape { layer, .. }) => assert_eq!(layer, 2),
        other => panic!("expected layer shape error, got {other:?}"),
    }
    let bad = Tensor::zeros(vec![1, 3, 4, 4]);
    assert!(matches!(net.infer(&bad), Err(Error::LayerShape { layer: 0, .. })));
}

#[test]
fn illegal_hyperparameters_rejected() {
    for spec in [
        LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 2, stride: 1, bias: false },
        LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 3, stride: 0, bias: false },
        LayerSpec::LeakyRelu { slope: 1.5 },
        LayerSpec::AdaLin { channels: 2, rho_init: 1.1 },
        LayerSpec::UpsampleNearest { factor: 0 },
        LayerSpec::Dense { inputs: 0, outputs: 1, bias: true },
    ] {
        assert!(matches!(Network::<f64>::new(vec![spec], &mut rng(0)), Err(Error::Parameter(_))));
    }
}

fn check_network(layers: Vec<LayerSpec>, input_shape: Vec<usize>, seed: u64) {
    let mut r = rng(seed);
    let mut net = Network::<f64>::new(layers.clone(), &mut r).unwrap();
    // move norm/affine parameters off their symmetric init
    for p in net.params.iter_mut() {
        if p.kind != ParamKind::Weight || p.name.ends_with(".gamma") {
            for v in &mut p.value.data {
                *v += r.random_range(-0.3..0.3);
            }
            if p.kind == ParamKind::Rho {
                p.value.data.iter_mut().for_each(|v| *v = v.clamp(0.05, 0.95));
            }
        }
    }
    let mut leaves = vec![random_tensor(&mut r, input_shape)];
    leaves.extend(net.params.iter().map(|p| p.value.clone()));
    let report = check_gradients(&leaves, 40, seed, DEFAULT_STEP, |tape, vars| {
        let binding = Binding::from_vars(vars[1..].to_vec());
        let y = net.forward(tape, &binding, vars[0])?;
        linear_readout(tape, y, &mut rng(seed ^ 0xabc))
    })
    .unwrap();
    assert!(report.probes >= 20, "{layers:?}: only {} probes", report.probes);
    assert!(report.max_rel_error <= 1e-4, "{layers:?}: {report:?}");
}

#[test]
fn every_layer_kind_passes_finite_differences() {
    let img = vec![2, 3, 6, 6];
    let cases: Vec<(Vec<LayerSpec>, Vec<usize>)> = vec![
        (vec![LayerSpec::Conv2d { in_channels: 3, out_channels: 4, kernel: 3, stride: 1, bias: true }], img.clone()),
        (vec![LayerSpec::Conv2d { in_channels: 3, out_channels: 2, kernel: 5, stride: 2, bias: true }], img.clone()),
        (vec![LayerSpec::Dense { inputs: 5, outputs: 4, bias: true }], vec![3, 5]),
        (vec![LayerSpec::Dense { inputs: 5, outputs: 4, bias: true }, LayerSpec::Tanh], vec![3, 5]),
        (vec![LayerSpec::LeakyRelu { slope: 0.2 }], img.clone()),
        (vec![LayerSpec::Tanh], img.clone()),
        (vec![LayerSpec::InstanceNorm { channels: 3, affine: false }], img.clone()),
        (vec![LayerSpec::InstanceNorm { channels: 3, affine: true }], img.clone()),
        (vec![LayerSpec::AdaLin { channels: 3, rho_init: 0.9 }], img.clone()),
        (vec![LayerSpec::GlobalAvgPool], img.clone()),
        (vec![LayerSpec::GlobalMaxPool], img.clone()),
        (vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 108, outputs: 3, bias: true }], img.clone()),
        (vec![LayerSpec::UpsampleNearest { factor: 2 }], img.clone()),
        (vec![LayerSpec::ResidualBlock { channels: 3, kernel: 3 }], img.clone()),
    ];
    for (i, (layers, shape)) in cases.into_iter().enumerate() {
        check_network(layers, shape, 100 + i as u64);
    }
}

#[test]
fn auxiliary_ops_pass_finite_differences() {
    let mut r = rng(7);
    let a = random_tensor(&mut r, vec![2, 3, 2, 2]);
    let b = random_tensor(&mut r, vec![2, 2, 2, 2]);
    let w = random_tensor(&mut r, vec![3]);
    let gamma = random_tensor(&mut r, vec![2, 3]);
    let beta = random_tensor(&mut r, vec![2, 3]);
    let logits = random_tensor(&mut r, vec![4, 3]);
    let report = check_gradients(&[a, b, w, gamma, beta, logits], 200, 1, DEFAULT_STEP, |t, v| {
        let scaled = t.channel_scale(v[0], v[2])?;
        let affine = t.channel_affine(scaled, v[3], v[4])?;
        let cat = t.concat(&[affine, v[1]])?;
        let y = t.tanh(cat);
        let up = t.upsample_nearest(y, 2)?;
        let m = t.sample_mean(up)?;
        let sq = t.mean_sq_dev(m, 0.3)?;
        let bce = t.bce_logits(v[1], 1.0)?;
        let ce = t.softmax_ce(v[5], &[0, 2, 1, 2])?;
        let lhs = t.scale(v[0], 0.5);
        let diff = t.sub(lhs, v[0])?;
        let shifted = t.add(diff, v[0])?;
        let l1 = t.mean_abs_diff(shifted, v[0])?;
        t.lin_comb(&[(sq, 2.0), (bce, 0.7), (ce, 1.3), (l1, 0.4)])
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn adam_single_step_closed_form() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("theta", ParamKind::Weight, Tensor::scalar(1.0));
    let config = AdamConfig::default();
    let mut adam = AdamState::new(config, &store);
    adam.step(&mut store, &[vec![1.0]]).unwrap();
    // m = 0.1, v = 0.001, both bias-corrected to 1
    let m_hat = (1.0 - 0.9) * 1.0 / (1.0 - 0.9);
    let v_hat = (1.0 - 0.999) * 1.0 / (1.0 - 0.999);
    let expect = 1.0 - 1e-4 * m_hat / (f64::sqrt(v_hat) + 1e-8) - 1e-4 * 1e-4 * 1.0;
    assert!((store.get(id).value.data[0] - expect).abs() <= 1e-12);
    assert_eq!(adam.step, 1);
}

#[test]
fn adam_zero_gradient_without_decay_is_noop() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", ParamKind::Weight, Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let before = store.clone();
    let mut adam = AdamState::new(AdamConfig { weight_decay: 0.0, ..AdamConfig::default() }, &store);
    for _ in 0..5 {
        adam.step(&mut store, &[vec![0.0; 3]]).unwrap();
    }
    assert_eq!(store.get(ParamId(0)).value, before.get(ParamId(0)).value);
}

#[test]
fn adam_clamps_rho() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("rho", ParamKind::Rho, Tensor::scalar(1.0));
    let mut adam = AdamState::new(AdamConfig { learning_rate: 0.2, weight_decay: 0.0, ..AdamConfig::default() }, &store);
    // raw update 1.0 + 0.2 = 1.2
    adam.step(&mut store, &[vec![-1.0]]).unwrap();
    assert_eq!(store.get(id).value.data[0], 1.0);
}

#[test]
fn adam_rejects_nan_without_touching_params() {
    let mut store = ParamStore::<f64>::new();
    store.add("a", ParamKind::Weight, Tensor::scalar(1.0));
    store.add("b", ParamKind::Weight, Tensor::scalar(2.0));
    let mut adam = AdamState::new(AdamConfig::default(), &store);
    let err = adam.step(&mut store, &[vec![1.0], vec![f64::NAN]]);
    assert!(matches!(err, Err(Error::TrainingDiverged { .. })));
    assert_eq!(store.get(ParamId(0)).value.data[0], 1.0);
    assert_eq!(adam.step, 0);
}

#[test]
fn nnp_round_trip() {
    let net = Network::<f64>::new(
        vec![
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3, kernel: 3, stride: 2, bias: true },
            LayerSpec::AdaLin { channels: 3, rho_init: 0.9 },
        ],
        &mut rng(3),
    )
    .unwrap();
    let mut buf = Vec::new();
    net.params.write_nnp(&mut buf).unwrap();
    assert_eq!(&buf[..4], NNP_MAGIC);
    let mut other = Network::<f64>::new(net.layers.clone(), &mut rng(4)).unwrap();
    other.params.read_nnp(buf.as_slice()).unwrap();
    for (a, b) in net.params.iter().zip(other.params.iter()) {
        assert_eq!(a.value.shape, b.value.shape);
        for (x, y) in a.value.data.iter().zip(&b.value.data) {
            assert_eq!(*x as f32, *y as f32);
        }
    }
    buf[0] = b'X';
    assert!(matches!(other.params.read_nnp(buf.as_slice()), Err(Error::Format(_))));
    assert!(matches!(other.params.read_nnp(&b"NNP1\x01\x00"[..]), Err(Error::Format(_))));
}

#[test]
fn seeded_training_is_bit_identical() {
    let run = || {
        let mut r = rng(11);
        let net_layers = vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, bias: true },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { inputs: 2, outputs: 2, bias: true },
        ];
        let mut net = Network::<f64>::new(net_layers, &mut r).unwrap();
        let x = random_tensor(&mut r, vec![4, 1, 5, 5]);
        let mut adam = AdamState::new(AdamConfig { learning_rate: 1e-2, ..AdamConfig::default() }, &net.params);
        for _ in 0..10 {
            let mut tape = Tape::new();
            let b = net.params.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let y = net.forward(&mut tape, &b, xv).unwrap();
            let loss = tape.softmax_ce(y, &[0, 1, 1, 0]).unwrap();
            let g = tape.backward(loss).unwrap();
            adam.step(&mut net.params, &b.collect(&g)).unwrap();
        }
        net.params.iter().flat_map(|p| p.value.data.clone()).collect::<Vec<f64>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn f32_forward_runs() {
    let net = Network::<f32>::new(
        vec![LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 3, stride: 1, bias: false }, LayerSpec::Tanh],
        &mut rng(0),
    )
    .unwrap();
    let y = net.infer(&Tensor::zeros(vec![1, 1, 4, 4])).unwrap();
    assert_eq!(y.shape, vec![1, 1, 4, 4]);
    assert!(y.data.iter().all(|v| *v == 0.0));
}
