//! Soft-margin RBF support vector machine trained by SMO.
//!
//! The solver minimizes the dual `½ αᵀQα − Σα` with `Q_ij = y_i y_j k(x_i, x_j)`
//! subject to `0 ≤ α ≤ C` and `Σ y_i α_i = 0`, choosing the maximal violating
//! pair each iteration and caching the full Gram matrix. Class index 0 (mask)
//! is encoded as `+1`, class 1 (non-mask) as `−1`.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::eval::uar_of;

pub const SVM_MAGIC: &[u8; 4] = b"SVM1";
pub const SCALER_MAGIC: &[u8; 4] = b"STD1";
/// Multipliers at or below this are not support vectors.
pub const ALPHA_EPS: f64 = 1e-12;
pub const DEFAULT_GAMMA: f64 = 1e-2;

/// The `{1e-3, 1e-2, …, 1e3}` regularization grid.
pub fn default_c_grid() -> Vec<f64> {
    (-3..=3).map(|e| 10f64.powi(e)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub gamma: f64,
    pub c: f64,
}

impl KernelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) || !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Parameter(format!("gamma and C must be positive and finite: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoOptions {
    /// Stop once the maximal KKT violation is at most this.
    pub tolerance: f64,
    /// Violation still accepted when the iteration cap is reached first.
    pub accept: f64,
    /// Iteration cap as a multiple of the sample count.
    pub max_iter_factor: usize,
}

impl Default for SmoOptions {
    fn default() -> Self {
        Self { tolerance: 1e-6, accept: 1e-3, max_iter_factor: 100 }
    }
}

pub fn kernel_rbf(u: &[f64], v: &[f64], gamma: f64) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("kernel inputs of dims {} and {}", u.len(), v.len())));
    }
    Ok(rbf(u, v, gamma))
}

#[inline]
fn rbf(u: &[f64], v: &[f64], gamma: f64) -> f64 {
    let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    (-gamma * d2).exp()
}

/// Dense symmetric RBF Gram matrix, built row-parallel.
pub fn gram_matrix(x: &EmbeddingMatrix, gamma: f64) -> Vec<f64> {
    let n = x.rows;
    let mut k = vec![0.0; n * n];
    k.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = if i == j { 1.0 } else { rbf(x.row(i), x.row(j), gamma) };
        }
    });
    k
}

fn sign_of(label: usize) -> f64 {
    if label == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Per-dimension z-score from training statistics; constant dims keep unit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    pub fn fit(x: &EmbeddingMatrix) -> Result<Self> {
        if x.rows == 0 {
            return Err(Error::DegenerateData("cannot fit a feature scaler on zero rows".into()));
        }
        let n = x.rows as f64;
        let mut mean = vec![0.0; x.cols];
        for r in 0..x.rows {
            mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; x.cols];
        for r in 0..x.rows {
            var.iter_mut().zip(x.row(r)).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let std = var.into_iter().map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if x.cols != self.mean.len() {
            return Err(Error::Shape(format!("scaler of dim {} applied to {} columns", self.mean.len(), x.cols)));
        }
        let mut out = x.clone();
        for row in out.data.chunks_mut(x.cols.max(1)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    /// Support vectors in the scaled feature space, row-major.
    pub support: EmbeddingMatrix,
    /// `α_i y_i` per support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub params: KernelParams,
    pub scaler: FeatureScaler,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    pub margins: Vec<f64>,
}

/// Raw solver output over the full training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub max_violation: f64,
}

/// Dual objective `Σα − ½ Σ_ij α_i α_j y_i y_j K_ij` (to be maximized).
pub fn dual_objective(alpha: &[f64], y: &[f64], k: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * alpha[j] * y[i] * y[j] * k[i * n + j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// SMO on a precomputed symmetric Gram matrix with `±1` targets.
pub fn solve_dual(k: &[f64], y: &[f64], c: f64, opts: SmoOptions) -> Result<DualSolution> {
    let n = y.len();
    if k.len() != n * n {
        return Err(Error::Shape(format!("Gram matrix of {} entries for {n} samples", k.len())));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::DegenerateData("SVM training needs both classes".into()));
    }
    let mut alpha = vec![0.0; n];
    // gradient of the minimization objective: Qα − e
    let mut grad = vec![-1.0; n];
    let up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);
    let cap = opts.max_iter_factor.saturating_mul(n).max(1);
    let mut iterations = 0;
    loop {
        let (mut i, mut gmax) = (usize::MAX, f64::NEG_INFINITY);
        let (mut j, mut gmin) = (usize::MAX, f64::INFINITY);
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(alpha[t], y[t]) && v > gmax {
                (i, gmax) = (t, v);
            }
            if low(alpha[t], y[t]) && v < gmin {
                (j, gmin) = (t, v);
            }
        }
        let violation = gmax - gmin;
        if i == usize::MAX || j == usize::MAX || violation <= opts.tolerance {
            let bias = bias_from(&alpha, &grad, y, c);
            return Ok(DualSolution { alpha, bias, iterations, max_violation: violation.max(0.0) });
        }
        if iterations >= cap {
            if violation <= opts.accept {
                let bias = bias_from(&alpha, &grad, y, c);
                return Ok(DualSolution { alpha, bias, iterations, max_violation: violation });
            }
            return Err(Error::Convergence(format!(
                "SMO did not reach KKT tolerance {} within {cap} iterations (violation {violation:.3e})",
                opts.accept
            )));
        }
        iterations += 1;

        // analytic two-variable step along y_i Δα_i = −y_j Δα_j
        let eta = (k[i * n + i] + k[j * n + j] - 2.0 * k[i * n + j]).max(1e-12);
        let step = (gmax - gmin) / eta;
        // bounds keep both multipliers in the box
        let room_i = if y[i] > 0.0 { c - alpha[i] } else { alpha[i] };
        let room_j = if y[j] > 0.0 { alpha[j] } else { c - alpha[j] };
        let t = step.min(room_i).min(room_j);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        alpha[i] = (old_i + y[i] * t).clamp(0.0, c);
        alpha[j] = (old_j - y[j] * t).clamp(0.0, c);
        if t == room_i {
            alpha[i] = if y[i] > 0.0 { c } else { 0.0 };
        }
        if t == room_j {
            alpha[j] = if y[j] > 0.0 { 0.0 } else { c };
        }
        let (di, dj) = (y[i] * (alpha[i] - old_i), y[j] * (alpha[j] - old_j));
        // K is symmetric, so rows i and j stand in for the columns
        let (ki, kj) = (&k[i * n..(i + 1) * n], &k[j * n..(j + 1) * n]);
        for (((g, &yr), &a), &b) in grad.iter_mut().zip(y).zip(ki).zip(kj) {
            *g += yr * (a * di + b * dj);
        }
    }
}

/// Bias from free multipliers, or the midpoint of the feasible interval.
fn bias_from(alpha: &[f64], grad: &[f64], y: &[f64], c: f64) -> f64 {
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..alpha.len() {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else if (alpha[t] >= c && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub.min(f64::MAX) + lb.max(f64::MIN)) / 2.0 };
    -rho
}

fn check_labels(x: &EmbeddingMatrix, labels: &[usize]) -> Result<()> {
    if x.rows != labels.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.rows, labels.len())));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Parameter("SVM labels must be class indices 0 or 1".into()));
    }
    Ok(())
}

/// Trains on `x` as given (no feature scaling).
pub fn train_svm(x: &EmbeddingMatrix, labels: &[usize], params: KernelParams) -> Result<SvmModel> {
    train_svm_with(x, labels, params, FeatureScaler::identity(x.cols), SmoOptions::default())
}

/// Fits a z-score scaler on `x`, then trains in the scaled space.
pub fn train_svm_standardized(x: &EmbeddingMatrix, labels: &[usize], params: KernelParams) -> Result<SvmModel> {
    let scaler = FeatureScaler::fit(x)?;
    train_svm_with(x, labels, params, scaler, SmoOptions::default())
}

pub fn train_svm_with(
    x: &EmbeddingMatrix,
    labels: &[usize],
    params: KernelParams,
    scaler: FeatureScaler,
    opts: SmoOptions,
) -> Result<SvmModel> {
    params.validate()?;
    check_labels(x, labels)?;
    let xs = scaler.apply(x)?;
    let y: Vec<f64> = labels.iter().map(|&l| sign_of(l)).collect();
    let k = gram_matrix(&xs, params.gamma);
    let sol = solve_dual(&k, &y, params.c, opts)?;
    let keep: Vec<usize> = (0..x.rows).filter(|&i| sol.alpha[i] > ALPHA_EPS).collect();
    Ok(SvmModel {
        support: xs.select(&keep),
        coef: keep.iter().map(|&i| sol.alpha[i] * y[i]).collect(),
        bias: sol.bias,
        params,
        scaler,
        iterations: sol.iterations,
    })
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.scaler.mean.len()
    }

    /// Decision values `Σ α_i y_i k(x_i, ·) + b`; positive means mask.
    pub fn decision(&self, x: &EmbeddingMatrix) -> Result<Vec<f64>> {
        if x.rows == 0 {
            return Ok(Vec::new());
        }
        let xs = self.scaler.apply(x)?;
        Ok((0..xs.rows)
            .into_par_iter()
            .map(|r| {
                let q = xs.row(r);
                self.coef.iter().enumerate().map(|(s, c)| c * rbf(self.support.row(s), q, self.params.gamma)).sum::<f64>()
                    + self.bias
            })
            .collect())
    }

    pub fn predict(&self, x: &EmbeddingMatrix) -> Result<Prediction> {
        let margins = self.decision(x)?;
        Ok(Prediction { labels: margins.iter().map(|&m| usize::from(m < 0.0)).collect(), margins })
    }

    /// `SVM1` body followed by an `STD1` trailer holding C and the scaler.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let dim = self.dim();
        let mut b = Vec::new();
        b.extend_from_slice(SVM_MAGIC);
        b.extend_from_slice(&(self.coef.len() as u32).to_le_bytes());
        b.extend_from_slice(&(dim as u32).to_le_bytes());
        b.extend_from_slice(&self.params.gamma.to_le_bytes());
        b.extend_from_slice(&self.bias.to_le_bytes());
        for (s, c) in self.coef.iter().enumerate() {
            b.extend_from_slice(&c.to_le_bytes());
            for v in self.support.row(s) {
                b.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        b.extend_from_slice(SCALER_MAGIC);
        b.extend_from_slice(&(dim as u32).to_le_bytes());
        b.extend_from_slice(&self.params.c.to_le_bytes());
        for v in self.scaler.mean.iter().chain(&self.scaler.std) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&b)?;
        Ok(())
    }

    /// Reads `SVM1`; without an `STD1` trailer the scaler is the identity and C is NaN.
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != SVM_MAGIC {
            return Err(Error::Format("missing SVM1 magic".into()));
        }
        let n_sv = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let gamma = cur.f64()?;
        let bias = cur.f64()?;
        let need = n_sv.checked_mul(8 + 4 * dim).ok_or_else(|| Error::Format("SVM1 header overflows".into()))?;
        if bytes.len() - cur.pos < need {
            return Err(Error::Format("SVM1 file is truncated".into()));
        }
        let mut coef = Vec::with_capacity(n_sv);
        let mut data = Vec::with_capacity(n_sv * dim);
        for _ in 0..n_sv {
            coef.push(cur.f64()?);
            for _ in 0..dim {
                data.push(f32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as f64);
            }
        }
        let (c, scaler) = if cur.pos == bytes.len() {
            (f64::NAN, FeatureScaler::identity(dim))
        } else {
            if cur.take(4)? != SCALER_MAGIC || cur.u32()? as usize != dim {
                return Err(Error::Format("malformed STD1 trailer".into()));
            }
            let c = cur.f64()?;
            let mean = (0..dim).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            let std = (0..dim).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
            if cur.pos != bytes.len() {
                return Err(Error::Format("trailing bytes after STD1 trailer".into()));
            }
            (c, FeatureScaler { mean, std })
        };
        if !(gamma > 0.0) || !bias.is_finite() {
            return Err(Error::Format(format!("invalid SVM1 parameters gamma={gamma} b={bias}")));
        }
        Ok(Self {
            support: EmbeddingMatrix { rows: n_sv, cols: dim, data },
            coef,
            bias,
            params: KernelParams { gamma, c },
            scaler,
            iterations: 0,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of SVM file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Dev UAR for each C on the grid, with the winner.
#[derive(Debug, Clone, PartialEq)]
pub struct CTuning {
    pub best_c: f64,
    pub table: Vec<(f64, f64)>,
}

/// Trains one standardized SVM per C on `train` and scores UAR on `dev`.
/// Ties go to the smaller C.
pub fn tune_c(
    train: (&EmbeddingMatrix, &[usize]),
    dev: (&EmbeddingMatrix, &[usize]),
    gamma: f64,
    grid: &[f64],
) -> Result<CTuning> {
    if grid.is_empty() {
        return Err(Error::Config("C grid is empty".into()));
    }
    if dev.0.rows == 0 {
        return Err(Error::DegenerateData("dev split is empty".into()));
    }
    check_labels(dev.0, dev.1)?;
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &c in grid {
        let model = train_svm_standardized(train.0, train.1, KernelParams { gamma, c })?;
        let u = uar_of(dev.1, &model.predict(dev.0)?.labels)?;
        table.push((c, u));
        best = match best {
            Some((bc, bu)) if bu > u || (bu == u && bc <= c) => Some((bc, bu)),
            _ => Some((c, u)),
        };
    }
    Ok(CTuning { best_c: best.unwrap().0, table })
}

/// Final fit on train and dev together.
pub fn refit_merged(
    train: (&EmbeddingMatrix, &[usize]),
    dev: (&EmbeddingMatrix, &[usize]),
    params: KernelParams,
) -> Result<SvmModel> {
    if train.0.cols != dev.0.cols {
        return Err(Error::Shape(format!("train dim {} vs dev dim {}", train.0.cols, dev.0.cols)));
    }
    let mut x = train.0.clone();
    x.data.extend_from_slice(&dev.0.data);
    x.rows += dev.0.rows;
    let labels: Vec<usize> = train.1.iter().chain(dev.1).copied().collect();
    train_svm_standardized(&x, &labels, params)
}
