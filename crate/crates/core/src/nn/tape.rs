//! Reverse-mode tape over dense tensors.
//!
//! Every op appends a node holding its value; `backward` walks the nodes in
//! reverse creation order. A tape supports exactly one backward pass.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    /// `cols` caches the forward unfolding per batch item when `w` needs a gradient.
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, cols: Vec<T> },
    Dense { x: Var, w: Var, b: Option<Var> },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    ChannelScale { x: Var, w: Var },
    Concat { parts: Vec<Var> },
    InstanceNorm { x: Var, inv_std: Vec<T> },
    LayerNorm { x: Var, inv_std: Vec<T> },
    RhoMix { a: Var, b: Var, rho: Var },
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    GlobalAvgPool { x: Var },
    GlobalMaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    SampleMean { x: Var },
    Reshape { x: Var },
    MeanSqDev { x: Var, target: T },
    MeanAbsDiff { a: Var, b: Var },
    BceLogits { x: Var, target: T },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    LinComb { terms: Vec<(Var, T)> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, or `None` if no path reached it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf with zeros for unreached leaves.
    pub fn get_or_zero(&self, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.shapes[v.0].iter().product()],
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::Shape(format!("{what} expects [B, C, H, W], got {shape:?}"))),
    }
}

/// Output index range `lo..hi` such that `o * stride + k - pad` lies in `0..len`.
/// Index geometry of a "same"-padded strided convolution.
struct ConvGeometry {
    ci: usize,
    h: usize,
    wd: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    /// Appends the `[C*k*k, Ho*Wo]` unfolding of one `[C, H, W]` input to
    /// `cols`, zero outside the image.
    fn im2col<T: Scalar>(&self, inp: &[T], cols: &mut Vec<T>) {
        let zero = T::zero();
        for c in 0..self.ci {
            let plane = &inp[c * self.h * self.wd..(c + 1) * self.h * self.wd];
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = valid_range(self.h, self.ho, kh, self.pad, self.stride);
                for kw in 0..self.k {
                    let (ow_lo, ow_hi) = valid_range(self.wd, self.wo, kw, self.pad, self.stride);
                    if ow_lo >= ow_hi {
                        cols.resize(cols.len() + self.ho * self.wo, zero);
                        continue;
                    }
                    cols.resize(cols.len() + oh_lo * self.wo, zero);
                    let iw0 = ow_lo * self.stride + kw - self.pad;
                    for oh in oh_lo..oh_hi {
                        let ih = oh * self.stride + kh - self.pad;
                        let src = &plane[ih * self.wd + iw0..(ih + 1) * self.wd];
                        cols.resize(cols.len() + ow_lo, zero);
                        if self.stride == 1 {
                            cols.extend_from_slice(&src[..ow_hi - ow_lo]);
                        } else {
                            cols.extend(src.iter().step_by(self.stride).take(ow_hi - ow_lo));
                        }
                        cols.resize(cols.len() + self.wo - ow_hi, zero);
                    }
                    cols.resize(cols.len() + (self.ho - oh_hi) * self.wo, zero);
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: accumulates columns back into `[C, H, W]`.
    fn col2im<T: Scalar>(&self, cols: &[T], out: &mut [T]) {
        let p = self.ho * self.wo;
        for c in 0..self.ci {
            let plane = &mut out[c * self.h * self.wd..(c + 1) * self.h * self.wd];
            for kh in 0..self.k {
                let (oh_lo, oh_hi) = valid_range(self.h, self.ho, kh, self.pad, self.stride);
                for kw in 0..self.k {
                    let (ow_lo, ow_hi) = valid_range(self.wd, self.wo, kw, self.pad, self.stride);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let row = &cols[((c * self.k + kh) * self.k + kw) * p..][..p];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * self.stride + kh - self.pad;
                        let dst = &mut plane[ih * self.wd..(ih + 1) * self.wd];
                        let iw0 = ow_lo * self.stride + kw - self.pad;
                        let src = &row[oh * self.wo + ow_lo..oh * self.wo + ow_hi];
                        if self.stride == 1 {
                            for (d, &v) in dst[iw0..iw0 + src.len()].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst[iw0..].iter_mut().step_by(self.stride).zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dot product over 8 interleaved partial sums (fixed order, so deterministic).
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

fn valid_range(len: usize, out_len: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if len + pad <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { shape, value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { shape: t.shape, value: t.data, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone() }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Cross-correlation with "same" zero padding (`kernel / 2` per side).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (bs, ci, h, wd) = dims4(self.shape(x), "conv2d input")?;
        let (co, wci, k, k2) = dims4(self.shape(w), "conv2d weight")?;
        if wci != ci || k != k2 || k % 2 == 0 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d weight {:?} incompatible with input {:?} (stride {stride})",
                self.shape(w),
                self.shape(x)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::Shape(format!("conv2d bias {:?} for {co} outputs", self.shape(b))));
            }
        }
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let geo = ConvGeometry { ci, h, wd, k, stride, pad, ho, wo };
        let (q, p) = (ci * k * k, ho * wo);
        let keep = self.nodes[w.0].requires_grad;
        let mut out = vec![T::zero(); bs * co * p];
        let mut all_cols = Vec::with_capacity(if keep { bs * q * p } else { q * p });
        for bi in 0..bs {
            if !keep {
                all_cols.clear();
            }
            geo.im2col(&xv[bi * ci * h * wd..(bi + 1) * ci * h * wd], &mut all_cols);
            let cols = &all_cols[all_cols.len() - q * p..];
            for o in 0..co {
                let plane = &mut out[(bi * co + o) * p..(bi * co + o + 1) * p];
                if let Some(b) = b {
                    let bias = self.nodes[b.0].value[o];
                    plane.iter_mut().for_each(|v| *v = bias);
                }
                for (qi, &wt) in wv[o * q..(o + 1) * q].iter().enumerate() {
                    for (r, &c) in plane.iter_mut().zip(&cols[qi * p..(qi + 1) * p]) {
                        *r += wt * c;
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let cols = if keep { all_cols } else { Vec::new() };
        Ok(self.push(vec![bs, co, ho, wo], out, Op::Conv2d { x, w, b, stride, cols }, &parents))
    }

    /// `x [B, In] -> [B, Out]` with `w [Out, In]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bs, inputs) = match *self.shape(x) {
            [b, i] => (b, i),
            ref s => return Err(Error::Shape(format!("dense expects [B, In], got {s:?}"))),
        };
        let outputs = match *self.shape(w) {
            [o, i] if i == inputs => o,
            ref s => return Err(Error::Shape(format!("dense weight {s:?} for {inputs} inputs"))),
        };
        if let Some(b) = b {
            if self.shape(b) != [outputs] {
                return Err(Error::Shape(format!("dense bias {:?} for {outputs} outputs", self.shape(b))));
            }
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut out = vec![T::zero(); bs * outputs];
        for bi in 0..bs {
            let row = &xv[bi * inputs..(bi + 1) * inputs];
            for o in 0..outputs {
                let wr = &wv[o * inputs..(o + 1) * inputs];
                let mut acc = b.map_or(T::zero(), |b| self.nodes[b.0].value[o]);
                for (a, c) in wr.iter().zip(row) {
                    acc += *a * *c;
                }
                out[bi * outputs + o] = acc;
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(vec![bs, outputs], out, Op::Dense { x, w, b }, &parents))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x).iter().map(|&a| if a > T::zero() { a } else { a * slope }).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, v, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).iter().map(|a| a.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, v, Op::Tanh { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p - q).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p * q).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).iter().map(|&a| a * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, v, Op::Scale { x, c }, &[x])
    }

    /// Multiplies channel `c` of `x [B, C, H, W]` by `w[c]`; `w` holds `C` values.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (bs, c, h, wd) = dims4(self.shape(x), "channel_scale")?;
        if numel(self.shape(w)) != c {
            return Err(Error::Shape(format!("channel_scale weight {:?} for {c} channels", self.shape(w))));
        }
        let hw = h * wd;
        let xv = self.value(x);
        let wv = self.value(w);
        let v = xv
            .chunks(hw)
            .enumerate()
            .flat_map(|(k, plane)| {
                let s = wv[k % c];
                plane.iter().map(move |&a| a * s)
            })
            .collect();
        Ok(self.push(vec![bs, c, h, wd], v, Op::ChannelScale { x, w }, &[x, w]))
    }

    /// Concatenates along axis 1; trailing axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?).to_vec();
        if first.len() < 2 {
            return Err(Error::Shape(format!("concat needs rank >= 2, got {first:?}")));
        }
        let bs = first[0];
        let tail = &first[2..];
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != bs || &s[2..] != tail {
                return Err(Error::Shape(format!("concat {s:?} with {first:?}")));
            }
            channels += s[1];
        }
        let inner: usize = tail.iter().product();
        let mut v = Vec::with_capacity(bs * channels * inner);
        for bi in 0..bs {
            for &p in parts {
                let c = self.shape(p)[1];
                v.extend_from_slice(&self.value(p)[bi * c * inner..(bi + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = channels;
        Ok(self.push(shape, v, Op::Concat { parts: parts.to_vec() }, parts))
    }

    fn normalize_groups(values: &[T], groups: usize) -> (Vec<T>, Vec<T>) {
        let n = values.len() / groups;
        let nt = T::of_usize(n);
        let mut out = vec![T::zero(); values.len()];
        let mut inv = Vec::with_capacity(groups);
        for g in 0..groups {
            let seg = &values[g * n..(g + 1) * n];
            let mean = seg.iter().copied().sum::<T>() / nt;
            let var = seg.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / nt;
            let is = T::one() / (var + T::of(NORM_EPS)).sqrt();
            for (o, &a) in out[g * n..(g + 1) * n].iter_mut().zip(seg) {
                *o = (a - mean) * is;
            }
            inv.push(is);
        }
        (out, inv)
    }

    /// Per-sample, per-channel normalization over spatial positions.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.shape(x), "instance_norm")?;
        let (v, inv_std) = Self::normalize_groups(self.value(x), bs * c);
        Ok(self.push(vec![bs, c, h, w], v, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// Per-sample normalization over channels and spatial positions.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.shape(x), "layer_norm")?;
        let (v, inv_std) = Self::normalize_groups(self.value(x), bs);
        Ok(self.push(vec![bs, c, h, w], v, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// `rho[c] * a + (1 - rho[c]) * b` for `[B, C, H, W]` inputs.
    pub fn rho_mix(&mut self, a: Var, b: Var, rho: Var) -> Result<Var> {
        self.same_shape(a, b, "rho_mix")?;
        let (bs, c, h, w) = dims4(self.shape(a), "rho_mix")?;
        if numel(self.shape(rho)) != c {
            return Err(Error::Shape(format!("rho {:?} for {c} channels", self.shape(rho))));
        }
        let hw = h * w;
        let (av, bv, rv) = (self.value(a), self.value(b), self.value(rho));
        let v = av
            .chunks(hw)
            .zip(bv.chunks(hw))
            .enumerate()
            .flat_map(|(k, (pa, pb))| {
                let r = rv[k % c];
                pa.iter().zip(pb).map(move |(&a, &b)| r * a + (T::one() - r) * b)
            })
            .collect();
        Ok(self.push(vec![bs, c, h, w], v, Op::RhoMix { a, b, rho }, &[a, b, rho]))
    }

    /// `gamma * x + beta` per channel; `gamma`/`beta` hold `C` values shared
    /// across the batch or `B * C` per-sample values.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.shape(x), "channel_affine")?;
        let (ng, nb) = (numel(self.shape(gamma)), numel(self.shape(beta)));
        if ng != nb || (ng != c && ng != bs * c) {
            return Err(Error::Shape(format!(
                "affine params {:?}/{:?} for input {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(x)
            )));
        }
        let hw = h * w;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let v = xv
            .chunks(hw)
            .enumerate()
            .flat_map(|(k, plane)| {
                let (s, t) = (gv[k % ng], bv[k % ng]);
                plane.iter().map(move |&a| s * a + t)
            })
            .collect();
        Ok(self.push(vec![bs, c, h, w], v, Op::ChannelAffine { x, gamma, beta }, &[x, gamma, beta]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.shape(x), "global_avg_pool")?;
        let hw = h * w;
        let n = T::of_usize(hw);
        let v = self.value(x).chunks(hw).map(|p| p.iter().copied().sum::<T>() / n).collect();
        Ok(self.push(vec![bs, c], v, Op::GlobalAvgPool { x }, &[x]))
    }

    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.shape(x), "global_max_pool")?;
        let hw = h * w;
        let mut argmax = Vec::with_capacity(bs * c);
        let mut v = Vec::with_capacity(bs * c);
        for (g, p) in self.value(x).chunks(hw).enumerate() {
            let mut best = 0;
            for (i, &a) in p.iter().enumerate() {
                if a > p[best] {
                    best = i;
                }
            }
            argmax.push(g * hw + best);
            v.push(p[best]);
        }
        Ok(self.push(vec![bs, c], v, Op::GlobalMaxPool { x, argmax }, &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (bs, c, h, w) = dims4(self.shape(x), "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::Shape("upsample factor must be positive".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x);
        let mut v = Vec::with_capacity(bs * c * ho * wo);
        for g in 0..bs * c {
            for oh in 0..ho {
                let row = &xv[(g * h + oh / factor) * w..(g * h + oh / factor + 1) * w];
                for &a in row {
                    v.extend(std::iter::repeat_n(a, factor));
                }
            }
        }
        Ok(self.push(vec![bs, c, ho, wo], v, Op::Upsample { x, factor }, &[x]))
    }

    /// Mean over every axis except the first: `[B, ...] -> [B]`.
    pub fn sample_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let Some(&bs) = s.first() else {
            return Err(Error::Shape("sample_mean of a scalar".into()));
        };
        let n = numel(s) / bs.max(1);
        let nt = T::of_usize(n.max(1));
        let v = self.value(x).chunks(n.max(1)).map(|p| p.iter().copied().sum::<T>() / nt).collect();
        Ok(self.push(vec![bs], v, Op::SampleMean { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let v = self.value(x).to_vec();
        Ok(self.push(shape, v, Op::Reshape { x }, &[x]))
    }

    fn nonempty(&self, x: Var, what: &str) -> Result<T> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Contract(format!("{what} of an empty batch")));
        }
        Ok(T::of_usize(n))
    }

    /// `mean((x - target)^2)` as a scalar.
    pub fn mean_sq_dev(&mut self, x: Var, target: T) -> Result<Var> {
        let n = self.nonempty(x, "mean_sq_dev")?;
        let v = self.value(x).iter().map(|&a| (a - target) * (a - target)).sum::<T>() / n;
        Ok(self.push(vec![], vec![v], Op::MeanSqDev { x, target }, &[x]))
    }

    /// `mean(|a - b|)` as a scalar.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mean_abs_diff")?;
        let n = self.nonempty(a, "mean_abs_diff")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| (p - q).abs()).sum::<T>() / n;
        Ok(self.push(vec![], vec![v], Op::MeanAbsDiff { a, b }, &[a, b]))
    }

    /// Mean binary cross-entropy of logits `x` against a constant target.
    pub fn bce_logits(&mut self, x: Var, target: T) -> Result<Var> {
        let n = self.nonempty(x, "bce_logits")?;
        let v = self
            .value(x)
            .iter()
            .map(|&a| a.max(T::zero()) - target * a + (T::one() + (-a.abs()).exp()).ln())
            .sum::<T>()
            / n;
        Ok(self.push(vec![], vec![v], Op::BceLogits { x, target }, &[x]))
    }

    /// Mean softmax cross-entropy of `[B, K]` logits.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (bs, k) = match *self.shape(logits) {
            [b, k] => (b, k),
            ref s => return Err(Error::Shape(format!("softmax_ce expects [B, K], got {s:?}"))),
        };
        if labels.len() != bs || bs == 0 || labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape(format!("{} labels for {bs}x{k} logits", labels.len())));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(bs * k);
        let mut loss = T::zero();
        for (row, &label) in lv.chunks(k).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&a| (a - m).exp()).sum();
            loss += z.ln() + m - row[label];
            probs.extend(row.iter().map(|&a| (a - m).exp() / z));
        }
        let v = loss / T::of_usize(bs);
        Ok(self.push(vec![], vec![v], Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// `sum_i c_i * x_i` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut v = T::zero();
        for &(x, c) in terms {
            if self.value(x).len() != 1 {
                return Err(Error::Shape(format!("lin_comb term {:?} is not scalar", self.shape(x))));
            }
            v += c * self.item(x);
        }
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.push(vec![], vec![v], Op::LinComb { terms: terms.to_vec() }, &parents))
    }

    /// Backpropagates from a scalar node. A tape can be differentiated once.
    pub fn backward(&mut self, output: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract("tape already differentiated; re-run forward".into()));
        }
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.nodes[output.0].shape
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);
        for i in (0..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        // only leaves keep gradients
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        // runs `$body` against the (lazily zeroed) gradient buffer of `$v`
        macro_rules! acc {
            ($v:expr, |$gi:ident| $body:block) => {{
                let v = $v;
                if wants(v) {
                    let n = nodes[v.0].value.len();
                    let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
                    let $gi: &mut Vec<T> = buf;
                    $body
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, cols: cached } => {
                let stride = *stride;
                let (bs, ci, h, wd) = dims4(&nodes[x.0].shape, "").unwrap();
                let (co, _, k, _) = dims4(&nodes[w.0].shape, "").unwrap();
                let (_, _, ho, wo) = dims4(&node.shape, "").unwrap();
                let pad = k / 2;
                if let Some(b) = b {
                    acc!(*b, |gb| {
                        for bi in 0..bs {
                            for o in 0..co {
                                let plane = &g[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
                                gb[o] += plane.iter().copied().sum::<T>();
                            }
                        }
                    });
                }
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let need_x = wants(*x);
                let need_w = wants(*w);
                let mut gx = if need_x { grads[x.0].take().unwrap_or_else(|| vec![T::zero(); xv.len()]) } else { Vec::new() };
                let mut gw = if need_w { grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wv.len()]) } else { Vec::new() };
                let geo = ConvGeometry { ci, h, wd, k, stride, pad, ho, wo };
                let (q, p) = (ci * k * k, ho * wo);
                let mut scratch = Vec::with_capacity(if need_w && cached.is_empty() { q * p } else { 0 });
                let mut dcols = vec![T::zero(); if need_x { q * p } else { 0 }];
                for bi in 0..bs {
                    let gb = &g[bi * co * p..(bi + 1) * co * p];
                    if need_w {
                        let cols = if cached.is_empty() {
                            scratch.clear();
                            geo.im2col(&xv[bi * ci * h * wd..(bi + 1) * ci * h * wd], &mut scratch);
                            &scratch[..]
                        } else {
                            &cached[bi * q * p..(bi + 1) * q * p]
                        };
                        for o in 0..co {
                            let gplane = &gb[o * p..(o + 1) * p];
                            for qi in 0..q {
                                gw[o * q + qi] += dot(gplane, &cols[qi * p..(qi + 1) * p]);
                            }
                        }
                    }
                    if need_x {
                        for o in 0..co {
                            let gplane = &gb[o * p..(o + 1) * p];
                            for (qi, &wt) in wv[o * q..(o + 1) * q].iter().enumerate() {
                                let d = &mut dcols[qi * p..(qi + 1) * p];
                                if o == 0 {
                                    d.iter_mut().zip(gplane).for_each(|(d, &gg)| *d = wt * gg);
                                } else {
                                    d.iter_mut().zip(gplane).for_each(|(d, &gg)| *d += wt * gg);
                                }
                            }
                        }
                        geo.col2im(&dcols, &mut gx[bi * ci * h * wd..(bi + 1) * ci * h * wd]);
                    }
                }
                if need_x {
                    grads[x.0] = Some(gx);
                }
                if need_w {
                    grads[w.0] = Some(gw);
                }
            }
            Op::Dense { x, w, b } => {
                let (bs, inputs) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let outputs = nodes[w.0].shape[0];
                if let Some(b) = b {
                    acc!(*b, |gb| {
                        for bi in 0..bs {
                            for o in 0..outputs {
                                gb[o] += g[bi * outputs + o];
                            }
                        }
                    });
                }
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                acc!(*x, |gx| {
                    for bi in 0..bs {
                        for o in 0..outputs {
                            let go = g[bi * outputs + o];
                            for (r, &wi) in gx[bi * inputs..(bi + 1) * inputs].iter_mut().zip(&wv[o * inputs..(o + 1) * inputs]) {
                                *r += go * wi;
                            }
                        }
                    }
                });
                acc!(*w, |gw| {
                    for bi in 0..bs {
                        for o in 0..outputs {
                            let go = g[bi * outputs + o];
                            for (r, &xi) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(&xv[bi * inputs..(bi + 1) * inputs]) {
                                *r += go * xi;
                            }
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xv = &nodes[x.0].value;
                acc!(*x, |gx| {
                    for ((r, &gg), &a) in gx.iter_mut().zip(g).zip(xv) {
                        *r += if a > T::zero() { gg } else { gg * *slope };
                    }
                });
            }
            Op::Tanh { x } => {
                let y = &node.value;
                acc!(*x, |gx| {
                    for ((r, &gg), &t) in gx.iter_mut().zip(g).zip(y) {
                        *r += gg * (T::one() - t * t);
                    }
                });
            }
            Op::Add { a, b } => {
                acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(r, &gg)| *r += gg); });
                acc!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(r, &gg)| *r += gg); });
            }
            Op::Sub { a, b } => {
                acc!(*a, |ga| { ga.iter_mut().zip(g).for_each(|(r, &gg)| *r += gg); });
                acc!(*b, |gb| { gb.iter_mut().zip(g).for_each(|(r, &gg)| *r -= gg); });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc!(*a, |ga| { for ((r, &gg), &q) in ga.iter_mut().zip(g).zip(bv) { *r += gg * q; } });
                acc!(*b, |gb| { for ((r, &gg), &p) in gb.iter_mut().zip(g).zip(av) { *r += gg * p; } });
            }
            Op::Scale { x, c } => {
                acc!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(r, &gg)| *r += gg * *c); });
            }
            Op::ChannelScale { x, w } => {
                let (_, c, h, wd) = dims4(&nodes[x.0].shape, "").unwrap();
                let hw = h * wd;
                let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                acc!(*x, |gx| {
                    for (k, (rs, gs)) in gx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        let s = wv[k % c];
                        rs.iter_mut().zip(gs).for_each(|(r, &gg)| *r += gg * s);
                    }
                });
                acc!(*w, |gw| {
                    for (k, (gs, xs)) in g.chunks(hw).zip(xv.chunks(hw)).enumerate() {
                        gw[k % c] += gs.iter().zip(xs).map(|(&gg, &a)| gg * a).sum::<T>();
                    }
                });
            }
            Op::Concat { parts } => {
                let bs = node.shape[0];
                let inner: usize = node.shape[2..].iter().product();
                let total_c = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].shape[1];
                    acc!(p, |gp| {
                        for bi in 0..bs {
                            let src = &g[(bi * total_c + offset) * inner..(bi * total_c + offset + c) * inner];
                            for (r, &gg) in gp[bi * c * inner..(bi + 1) * c * inner].iter_mut().zip(src) {
                                *r += gg;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::InstanceNorm { x, inv_std } | Op::LayerNorm { x, inv_std } => {
                let groups = inv_std.len();
                let n = node.value.len() / groups;
                let nt = T::of_usize(n);
                let y = &node.value;
                acc!(*x, |gx| {
                    for gi in 0..groups {
                        let r = gi * n..(gi + 1) * n;
                        let gs = &g[r.clone()];
                        let ys = &y[r.clone()];
                        let mean_g = gs.iter().copied().sum::<T>() / nt;
                        let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / nt;
                        for ((o, &gg), &yy) in gx[r].iter_mut().zip(gs).zip(ys) {
                            *o += inv_std[gi] * (gg - mean_g - yy * mean_gy);
                        }
                    }
                });
            }
            Op::RhoMix { a, b, rho } => {
                let (_, c, h, w) = dims4(&node.shape, "").unwrap();
                let hw = h * w;
                let (av, bv, rv) = (&nodes[a.0].value, &nodes[b.0].value, &nodes[rho.0].value);
                acc!(*a, |ga| {
                    for (k, (rs, gs)) in ga.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        let s = rv[k % c];
                        rs.iter_mut().zip(gs).for_each(|(r, &gg)| *r += gg * s);
                    }
                });
                acc!(*b, |gb| {
                    for (k, (rs, gs)) in gb.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        let s = T::one() - rv[k % c];
                        rs.iter_mut().zip(gs).for_each(|(r, &gg)| *r += gg * s);
                    }
                });
                acc!(*rho, |gr| {
                    for (k, ((gs, pa), pb)) in g.chunks(hw).zip(av.chunks(hw)).zip(bv.chunks(hw)).enumerate() {
                        gr[k % c] += gs.iter().zip(pa).zip(pb).map(|((&gg, &a), &b)| gg * (a - b)).sum::<T>();
                    }
                });
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (_, _, h, w) = dims4(&node.shape, "").unwrap();
                let hw = h * w;
                let ng = nodes[gamma.0].value.len();
                let (xv, gv) = (&nodes[x.0].value, &nodes[gamma.0].value);
                acc!(*x, |gx| {
                    for (k, (rs, gs)) in gx.chunks_mut(hw).zip(g.chunks(hw)).enumerate() {
                        let s = gv[k % ng];
                        rs.iter_mut().zip(gs).for_each(|(r, &gg)| *r += gg * s);
                    }
                });
                acc!(*gamma, |gg_| {
                    for (k, (gs, xs)) in g.chunks(hw).zip(xv.chunks(hw)).enumerate() {
                        gg_[k % ng] += gs.iter().zip(xs).map(|(&gg, &a)| gg * a).sum::<T>();
                    }
                });
                acc!(*beta, |gb| {
                    for (k, gs) in g.chunks(hw).enumerate() {
                        gb[k % ng] += gs.iter().copied().sum::<T>();
                    }
                });
            }
            Op::GlobalAvgPool { x } => {
                let n = nodes[x.0].value.len() / node.value.len();
                let nt = T::of_usize(n);
                acc!(*x, |gx| { for (i, r) in gx.iter_mut().enumerate() { *r += g[i / n] / nt; } });
            }
            Op::GlobalMaxPool { x, argmax } => {
                acc!(*x, |gx| { for (&j, &gg) in argmax.iter().zip(g) { gx[j] += gg; } });
            }
            Op::Upsample { x, factor } => {
                let (_, _, h, w) = dims4(&nodes[x.0].shape, "").unwrap();
                let (ho, wo) = (h * factor, w * factor);
                acc!(*x, |gx| {
                    for (gp, dst) in g.chunks(ho * wo).zip(gx.chunks_mut(h * w)) {
                        for (oh, row) in gp.chunks(wo).enumerate() {
                            let drow = &mut dst[(oh / factor) * w..(oh / factor + 1) * w];
                            for (d, src) in drow.iter_mut().zip(row.chunks(*factor)) {
                                *d += src.iter().copied().sum::<T>();
                            }
                        }
                    }
                });
            }
            Op::SampleMean { x } => {
                let n = (nodes[x.0].value.len() / node.value.len().max(1)).max(1);
                let nt = T::of_usize(n);
                acc!(*x, |gx| { for (i, r) in gx.iter_mut().enumerate() { *r += g[i / n] / nt; } });
            }
            Op::Reshape { x } => {
                acc!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(r, &gg)| *r += gg); });
            }
            Op::MeanSqDev { x, target } => {
                let xv = &nodes[x.0].value;
                let scale = g[0] * T::of(2.0) / T::of_usize(xv.len());
                acc!(*x, |gx| { for (r, &a) in gx.iter_mut().zip(xv) { *r += scale * (a - *target); } });
            }
            Op::MeanAbsDiff { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let scale = g[0] / T::of_usize(av.len());
                let sign = |d: T| if d > T::zero() { T::one() } else if d < T::zero() { -T::one() } else { T::zero() };
                acc!(*a, |ga| { for ((r, &p), &q) in ga.iter_mut().zip(av).zip(bv) { *r += scale * sign(p - q); } });
                acc!(*b, |gb| { for ((r, &p), &q) in gb.iter_mut().zip(av).zip(bv) { *r -= scale * sign(p - q); } });
            }
            Op::BceLogits { x, target } => {
                let xv = &nodes[x.0].value;
                let scale = g[0] / T::of_usize(xv.len());
                acc!(*x, |gx| {
                    for (r, &a) in gx.iter_mut().zip(xv) {
                        let s = T::one() / (T::one() + (-a).exp());
                        *r += scale * (s - *target);
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = nodes[logits.0].shape[1];
                let scale = g[0] / T::of_usize(labels.len());
                acc!(*logits, |gl| {
                    for (bi, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[bi * k + j] += scale * (probs[bi * k + j] - onehot);
                        }
                    }
                });
            }
            Op::LinComb { terms } => {
                for &(x, c) in terms {
                    acc!(x, |gx| { gx[0] += g[0] * c; });
                }
            }
        }
    }
}
