use rand::Rng;

use super::params::{kaiming_uniform, leaky_gain, Binding, ParamId, ParamKind, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_KERNEL: usize = 7;
pub const MAX_STRIDE: usize = 4;
pub const MAX_CHANNELS: usize = 4096;
pub const MAX_UPSAMPLE: usize = 8;

/// One layer of a sequential [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv2d { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, bias: bool },
    Dense { inputs: usize, outputs: usize, bias: bool },
    LeakyRelu { slope: f64 },
    Tanh,
    InstanceNorm { channels: usize, affine: bool },
    /// Learned ρ mix of instance and layer statistics followed by a learned
    /// per-channel affine map.
    AdaLin { channels: usize, rho_init: f64 },
    GlobalAvgPool,
    GlobalMaxPool,
    /// `[B, ...] -> [B, prod(...)]`.
    Flatten,
    UpsampleNearest { factor: usize },
    /// `x + IN(conv(relu(IN(conv(x)))))` with channel-preserving convolutions.
    ResidualBlock { channels: usize, kernel: usize },
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Parameter(what()))
    }
}

fn legal_channels(c: usize) -> bool {
    (1..=MAX_CHANNELS).contains(&c)
}

fn legal_kernel(k: usize) -> bool {
    k % 2 == 1 && k <= MAX_KERNEL
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Conv2d { .. } => "conv2d",
            Self::Dense { .. } => "dense",
            Self::LeakyRelu { .. } => "leaky_relu",
            Self::Tanh => "tanh",
            Self::InstanceNorm { .. } => "instance_norm",
            Self::AdaLin { .. } => "adalin",
            Self::GlobalAvgPool => "global_avg_pool",
            Self::GlobalMaxPool => "global_max_pool",
            Self::Flatten => "flatten",
            Self::UpsampleNearest { .. } => "upsample_nearest",
            Self::ResidualBlock { .. } => "residual_block",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Conv2d { in_channels, out_channels, kernel, stride, .. } => check(
                legal_channels(in_channels)
                    && legal_channels(out_channels)
                    && legal_kernel(kernel)
                    && (1..=MAX_STRIDE).contains(&stride),
                || format!("illegal conv2d hyperparameters {self:?}"),
            ),
            Self::Dense { inputs, outputs, .. } => check(
                inputs > 0 && outputs > 0 && inputs <= 1 << 20 && outputs <= 1 << 20,
                || format!("illegal dense hyperparameters {self:?}"),
            ),
            Self::LeakyRelu { slope } => {
                check((0.0..1.0).contains(&slope), || format!("leaky_relu slope {slope} outside [0, 1)"))
            }
            Self::InstanceNorm { channels, .. } => {
                check(legal_channels(channels), || format!("illegal instance_norm channels {channels}"))
            }
            Self::AdaLin { channels, rho_init } => check(
                legal_channels(channels) && (0.0..=1.0).contains(&rho_init),
                || format!("illegal adalin hyperparameters {self:?}"),
            ),
            Self::UpsampleNearest { factor } => {
                check((1..=MAX_UPSAMPLE).contains(&factor), || format!("upsample factor {factor} outside 1..={MAX_UPSAMPLE}"))
            }
            Self::ResidualBlock { channels, kernel } => check(
                legal_channels(channels) && legal_kernel(kernel),
                || format!("illegal residual_block hyperparameters {self:?}"),
            ),
            Self::Tanh | Self::GlobalAvgPool | Self::GlobalMaxPool | Self::Flatten => Ok(()),
        }
    }

    /// Initialization gain for a layer feeding into `next`.
    fn gain_before(next: Option<&LayerSpec>) -> f64 {
        match next {
            Some(Self::LeakyRelu { slope }) => leaky_gain(*slope),
            Some(Self::Tanh) => 5.0 / 3.0,
            _ => 1.0,
        }
    }
}

/// Adds a `[out, in, k, k]` Kaiming-initialized convolution weight.
pub fn add_conv<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    gain: f64,
) -> ParamId {
    let w = kaiming_uniform(rng, vec![out_channels, in_channels, kernel, kernel], in_channels * kernel * kernel, gain);
    store.add(format!("{name}.weight"), ParamKind::Weight, w)
}

/// Adds a `[out, in]` Kaiming-initialized dense weight.
pub fn add_dense<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    inputs: usize,
    outputs: usize,
    gain: f64,
) -> ParamId {
    let w = kaiming_uniform(rng, vec![outputs, inputs], inputs, gain);
    store.add(format!("{name}.weight"), ParamKind::Weight, w)
}

pub fn add_filled<T: Scalar>(store: &mut ParamStore<T>, name: String, kind: ParamKind, n: usize, v: f64) -> ParamId {
    store.add(name, kind, Tensor { shape: vec![n], data: vec![T::of(v); n] })
}

/// `rho * IN(x) + (1 - rho) * LN(x)`, then `gamma * (.) + beta`.
pub fn adalin<T: Scalar>(tape: &mut Tape<T>, x: Var, rho: Var, gamma: Var, beta: Var) -> Result<Var> {
    let inorm = tape.instance_norm(x)?;
    let lnorm = tape.layer_norm(x)?;
    let mixed = tape.rho_mix(inorm, lnorm, rho)?;
    tape.channel_affine(mixed, gamma, beta)
}

/// Sequential network over [`LayerSpec`]s with its own parameters.
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub layers: Vec<LayerSpec>,
    pub params: ParamStore<T>,
    slots: Vec<Vec<ParamId>>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut slots = Vec::with_capacity(layers.len());
        for (i, spec) in layers.iter().enumerate() {
            spec.validate()?;
            let gain = LayerSpec::gain_before(layers.get(i + 1));
            let p = format!("{i}.{}", spec.name());
            let ids = match *spec {
                LayerSpec::Conv2d { in_channels, out_channels, kernel, bias, .. } => {
                    let mut ids = vec![add_conv(&mut params, rng, &p, in_channels, out_channels, kernel, gain)];
                    if bias {
                        ids.push(add_filled(&mut params, format!("{p}.bias"), ParamKind::Bias, out_channels, 0.0));
                    }
                    ids
                }
                LayerSpec::Dense { inputs, outputs, bias } => {
                    let mut ids = vec![add_dense(&mut params, rng, &p, inputs, outputs, gain)];
                    if bias {
                        ids.push(add_filled(&mut params, format!("{p}.bias"), ParamKind::Bias, outputs, 0.0));
                    }
                    ids
                }
                LayerSpec::InstanceNorm { channels, affine: true } => vec![
                    add_filled(&mut params, format!("{p}.gamma"), ParamKind::Weight, channels, 1.0),
                    add_filled(&mut params, format!("{p}.beta"), ParamKind::Bias, channels, 0.0),
                ],
                LayerSpec::AdaLin { channels, rho_init } => vec![
                    add_filled(&mut params, format!("{p}.rho"), ParamKind::Rho, channels, rho_init),
                    add_filled(&mut params, format!("{p}.gamma"), ParamKind::Weight, channels, 1.0),
                    add_filled(&mut params, format!("{p}.beta"), ParamKind::Bias, channels, 0.0),
                ],
                LayerSpec::ResidualBlock { channels, kernel } => {
                    let g = leaky_gain(0.0);
                    vec![
                        add_conv(&mut params, rng, &format!("{p}.conv1"), channels, channels, kernel, g),
                        add_conv(&mut params, rng, &format!("{p}.conv2"), channels, channels, kernel, 1.0),
                    ]
                }
                _ => Vec::new(),
            };
            slots.push(ids);
        }
        Ok(Self { layers, params, slots })
    }

    /// Runs every layer.
    pub fn forward(&self, tape: &mut Tape<T>, binding: &Binding, x: Var) -> Result<Var> {
        self.forward_until(tape, binding, x, self.layers.len())
    }

    /// Runs the first `count` layers.
    pub fn forward_until(&self, tape: &mut Tape<T>, binding: &Binding, x: Var, count: usize) -> Result<Var> {
        let mut h = x;
        for (i, spec) in self.layers.iter().take(count).enumerate() {
            h = self
                .apply(tape, binding, i, spec, h)
                .map_err(|e| match e {
                    Error::Shape(message) => Error::LayerShape { layer: i, message },
                    other => other,
                })?;
        }
        Ok(h)
    }

    fn apply(&self, tape: &mut Tape<T>, binding: &Binding, i: usize, spec: &LayerSpec, h: Var) -> Result<Var> {
        let ids = &self.slots[i];
        let p = |k: usize| binding.var(ids[k]);
        match *spec {
            LayerSpec::Conv2d { stride, bias, .. } => tape.conv2d(h, p(0), bias.then(|| p(1)), stride),
            LayerSpec::Dense { bias, .. } => tape.dense(h, p(0), bias.then(|| p(1))),
            LayerSpec::LeakyRelu { slope } => Ok(tape.leaky_relu(h, T::of(slope))),
            LayerSpec::Tanh => Ok(tape.tanh(h)),
            LayerSpec::InstanceNorm { channels, affine } => {
                self.expect_channels(tape, h, channels)?;
                let n = tape.instance_norm(h)?;
                if affine {
                    tape.channel_affine(n, p(0), p(1))
                } else {
                    Ok(n)
                }
            }
            LayerSpec::AdaLin { channels, .. } => {
                self.expect_channels(tape, h, channels)?;
                adalin(tape, h, p(0), p(1), p(2))
            }
            LayerSpec::GlobalAvgPool => tape.global_avg_pool(h),
            LayerSpec::GlobalMaxPool => tape.global_max_pool(h),
            LayerSpec::Flatten => {
                let shape = tape.shape(h).to_vec();
                let b = *shape.first().ok_or_else(|| Error::Shape("flatten of a scalar".into()))?;
                tape.reshape(h, vec![b, shape[1..].iter().product()])
            }
            LayerSpec::UpsampleNearest { factor } => tape.upsample_nearest(h, factor),
            LayerSpec::ResidualBlock { .. } => {
                let a = tape.conv2d(h, p(0), None, 1)?;
                let a = tape.instance_norm(a)?;
                let a = tape.leaky_relu(a, T::zero());
                let a = tape.conv2d(a, p(1), None, 1)?;
                let a = tape.instance_norm(a)?;
                tape.add(h, a)
            }
        }
    }

    fn expect_channels(&self, tape: &Tape<T>, h: Var, channels: usize) -> Result<()> {
        let s = tape.shape(h);
        if s.len() != 4 || s[1] != channels {
            return Err(Error::Shape(format!("expected [B, {channels}, H, W], got {s:?}")));
        }
        Ok(())
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_until(x, self.layers.len())
    }

    pub fn infer_until(&self, x: &Tensor<T>, count: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let binding = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward_until(&mut tape, &binding, xv, count)?;
        Ok(tape.tensor(y))
    }
}
