//! Toy-scale U-GAT-IT generator and discriminator.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{add_conv, add_dense, add_filled, adalin, leaky_gain, Binding, ParamId, ParamKind, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const GEN_RESIDUAL_BLOCKS: usize = 2;
pub const GEN_RHO_INIT: f64 = 0.9;

/// Attention bottleneck: per-channel weights of a GAP and a GMP logit
/// classifier rescale the features, and a 1x1 conv fuses both views.
#[derive(Debug, Clone)]
pub struct CamHead {
    pub gap_weight: ParamId,
    pub gmp_weight: ParamId,
    pub fuse: ParamId,
    pub fuse_bias: ParamId,
    pub channels: usize,
}

/// Output of a [`CamHead`] pass.
#[derive(Debug, Clone, Copy)]
pub struct CamOutput {
    /// Fused features, same shape as the input features.
    pub features: Var,
    /// `[B, 2]` logits of the GAP and GMP classifiers.
    pub logits: Var,
    /// `[B, 1, H, W]` channel-mean of the fused features.
    pub attention: Var,
}

impl CamHead {
    fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) -> Self {
        Self {
            gap_weight: add_dense(store, rng, &format!("{name}.gap_fc"), channels, 1, 1.0),
            gmp_weight: add_dense(store, rng, &format!("{name}.gmp_fc"), channels, 1, 1.0),
            fuse: add_conv(store, rng, &format!("{name}.fuse"), 2 * channels, channels, 1, leaky_gain(LEAKY_SLOPE)),
            fuse_bias: add_filled(store, format!("{name}.fuse.bias"), ParamKind::Bias, channels, 0.0),
            channels,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Binding, h: Var) -> Result<CamOutput> {
        let gap = tape.global_avg_pool(h)?;
        let gap_logit = tape.dense(gap, b.var(self.gap_weight), None)?;
        let gmp = tape.global_max_pool(h)?;
        let gmp_logit = tape.dense(gmp, b.var(self.gmp_weight), None)?;
        let logits = tape.concat(&[gap_logit, gmp_logit])?;
        let by_gap = tape.channel_scale(h, b.var(self.gap_weight))?;
        let by_gmp = tape.channel_scale(h, b.var(self.gmp_weight))?;
        let both = tape.concat(&[by_gap, by_gmp])?;
        let fused = tape.conv2d(both, b.var(self.fuse), Some(b.var(self.fuse_bias)), 1)?;
        let features = tape.leaky_relu(fused, T::of(LEAKY_SLOPE));
        let attention = channel_mean(tape, features)?;
        Ok(CamOutput { features, logits, attention })
    }
}

/// 1x1 convolution with uniform weights: the mean over channels.
fn channel_mean<T: Scalar>(tape: &mut Tape<T>, h: Var) -> Result<Var> {
    let c = tape.shape(h)[1];
    let w = tape.constant(Tensor { shape: vec![1, c, 1, 1], data: vec![T::one() / T::of_usize(c); c] });
    tape.conv2d(h, w, None, 1)
}

/// Generator shape parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    /// Output is `output_scale * tanh(.)` in standardized units.
    pub output_scale: f64,
}

#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub params: ParamStore<T>,
    enc1: ParamId,
    enc2: ParamId,
    cam: CamHead,
    mlp: ParamId,
    mlp_bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    blocks: Vec<[ParamId; 4]>,
    dec1: ParamId,
    dec2: ParamId,
    dec2_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorOutput {
    pub image: Var,
    pub cam_logits: Var,
    pub attention: Var,
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(spec: GeneratorSpec, rng: &mut R) -> Result<Self> {
        let c = spec.base_channels;
        if c == 0 || c > 256 || !(spec.output_scale > 0.0 && spec.output_scale.is_finite()) {
            return Err(Error::Parameter(format!("invalid generator spec {spec:?}")));
        }
        let g = leaky_gain(LEAKY_SLOPE);
        let mut p = ParamStore::new();
        let enc1 = add_conv(&mut p, rng, "enc1", 2, c, 3, g);
        let enc2 = add_conv(&mut p, rng, "enc2", c, 2 * c, 3, g);
        let cam = CamHead::new(&mut p, rng, "cam", 2 * c);
        let mlp = add_dense(&mut p, rng, "mlp", 2 * c, 2 * c, g);
        let mlp_bias = add_filled(&mut p, "mlp.bias".into(), ParamKind::Bias, 2 * c, 0.0);
        let gamma = add_dense(&mut p, rng, "gamma", 2 * c, 2 * c, 1.0);
        let beta = add_dense(&mut p, rng, "beta", 2 * c, 2 * c, 1.0);
        let blocks = (0..GEN_RESIDUAL_BLOCKS)
            .map(|i| {
                [
                    add_conv(&mut p, rng, &format!("res{i}.conv1"), 2 * c, 2 * c, 3, g),
                    add_filled(&mut p, format!("res{i}.rho1"), ParamKind::Rho, 2 * c, GEN_RHO_INIT),
                    add_conv(&mut p, rng, &format!("res{i}.conv2"), 2 * c, 2 * c, 3, 1.0),
                    add_filled(&mut p, format!("res{i}.rho2"), ParamKind::Rho, 2 * c, GEN_RHO_INIT),
                ]
            })
            .collect();
        let dec1 = add_conv(&mut p, rng, "dec1", 2 * c, c, 3, g);
        let dec2 = add_conv(&mut p, rng, "dec2", c, 2, 3, 5.0 / 3.0);
        let dec2_bias = add_filled(&mut p, "dec2.bias".into(), ParamKind::Bias, 2, 0.0);
        Ok(Self { spec, params: p, enc1, enc2, cam, mlp, mlp_bias, gamma, beta, blocks, dec1, dec2, dec2_bias })
    }

    /// `x: [B, 2, H, W]` with `H`, `W` divisible by 4.
    pub fn forward(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<GeneratorOutput> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 2 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::Shape(format!("generator expects [B, 2, 4k, 4m], got {s:?}")));
        }
        let slope = T::of(LEAKY_SLOPE);
        let h = tape.conv2d(x, b.var(self.enc1), None, 2)?;
        let h = tape.instance_norm(h)?;
        let h = tape.leaky_relu(h, slope);
        let h = tape.conv2d(h, b.var(self.enc2), None, 2)?;
        let h = tape.instance_norm(h)?;
        let h = tape.leaky_relu(h, slope);
        let cam = self.cam.forward(tape, b, h)?;

        let pooled = tape.global_avg_pool(cam.features)?;
        let z = tape.dense(pooled, b.var(self.mlp), Some(b.var(self.mlp_bias)))?;
        let z = tape.leaky_relu(z, slope);
        let gamma = tape.dense(z, b.var(self.gamma), None)?;
        let beta = tape.dense(z, b.var(self.beta), None)?;

        let mut h = cam.features;
        for [c1, r1, c2, r2] in &self.blocks {
            let a = tape.conv2d(h, b.var(*c1), None, 1)?;
            let a = adalin(tape, a, b.var(*r1), gamma, beta)?;
            let a = tape.leaky_relu(a, slope);
            let a = tape.conv2d(a, b.var(*c2), None, 1)?;
            let a = adalin(tape, a, b.var(*r2), gamma, beta)?;
            h = tape.add(h, a)?;
        }

        let h = tape.upsample_nearest(h, 2)?;
        let h = tape.conv2d(h, b.var(self.dec1), None, 1)?;
        let h = tape.instance_norm(h)?;
        let h = tape.leaky_relu(h, slope);
        let h = tape.upsample_nearest(h, 2)?;
        let h = tape.conv2d(h, b.var(self.dec2), Some(b.var(self.dec2_bias)), 1)?;
        let h = tape.tanh(h);
        let image = tape.scale(h, T::of(self.spec.output_scale));
        Ok(GeneratorOutput { image, cam_logits: cam.logits, attention: cam.attention })
    }

    /// Gradient-free translation of a `[B, 2, H, W]` batch.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &b, xv)?;
        Ok(tape.tensor(out.image))
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub base_channels: usize,
    pub params: ParamStore<T>,
    convs: [(ParamId, ParamId); 3],
    cam: CamHead,
    patch: ParamId,
    patch_bias: ParamId,
}

/// Per-sample scores of both heads.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOutput {
    /// `[B]` mean of the patch map.
    pub score: Var,
    /// `[B]` mean of the GAP and GMP logits.
    pub cam_score: Var,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(base_channels: usize, rng: &mut R) -> Result<Self> {
        let c = base_channels;
        if c == 0 || c > 256 {
            return Err(Error::Parameter(format!("invalid discriminator width {c}")));
        }
        let g = leaky_gain(LEAKY_SLOPE);
        let mut p = ParamStore::new();
        let chans = [(2, c), (c, 2 * c), (2 * c, 4 * c)];
        let convs = [0, 1, 2].map(|i| {
            let (ci, co) = chans[i];
            (
                add_conv(&mut p, rng, &format!("conv{i}"), ci, co, 3, g),
                add_filled(&mut p, format!("conv{i}.bias"), ParamKind::Bias, co, 0.0),
            )
        });
        let cam = CamHead::new(&mut p, rng, "cam", 4 * c);
        let patch = add_conv(&mut p, rng, "patch", 4 * c, 1, 3, 1.0);
        let patch_bias = add_filled(&mut p, "patch.bias".into(), ParamKind::Bias, 1, 0.0);
        Ok(Self { base_channels, params: p, convs, cam, patch, patch_bias })
    }

    pub fn forward(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Result<DiscriminatorOutput> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::Shape(format!("discriminator expects [B, 2, H, W], got {s:?}")));
        }
        let mut h = x;
        for (w, bias) in &self.convs {
            h = tape.conv2d(h, b.var(*w), Some(b.var(*bias)), 2)?;
            h = tape.leaky_relu(h, T::of(LEAKY_SLOPE));
        }
        let cam = self.cam.forward(tape, b, h)?;
        let patch = tape.conv2d(cam.features, b.var(self.patch), Some(b.var(self.patch_bias)), 1)?;
        let score = tape.sample_mean(patch)?;
        let cam_score = tape.sample_mean(cam.logits)?;
        Ok(DiscriminatorOutput { score, cam_score })
    }
}
