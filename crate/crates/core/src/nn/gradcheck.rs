//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor so gradients that are zero up to rounding still compare.
pub const DENOMINATOR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_error: f64,
    /// `(leaf, element, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR)
}

/// Compares analytic and numeric derivatives of `objective` with respect to
/// `probes` randomly chosen elements of `leaves` (all elements if fewer).
pub fn check_gradients<F>(leaves: &[Tensor<f64>], probes: usize, seed: u64, h: f64, objective: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], grad: bool| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = objective(&mut tape, &vars)?;
        let v = tape.item(out);
        if !grad {
            return Ok((v, None));
        }
        let g = tape.backward(out)?;
        Ok((v, Some(vars.iter().map(|&x| g.get_or_zero(x)).collect())))
    };
    let (_, grads) = eval(leaves, true)?;
    let grads = grads.expect("gradients requested");

    let total: usize = leaves.iter().map(|t| t.len()).sum();
    if total == 0 {
        return Err(Error::Contract("gradient check without parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if total <= probes { (0..total).collect() } else { sample(&mut rng, total, probes).into_vec() };

    let mut report = GradCheck { probes: picks.len(), max_rel_error: 0.0, worst: None };
    let mut work = leaves.to_vec();
    for flat in picks {
        let (mut leaf, mut idx) = (0, flat);
        while idx >= work[leaf].len() {
            idx -= work[leaf].len();
            leaf += 1;
        }
        let orig = work[leaf].data[idx];
        work[leaf].data[idx] = orig + h;
        let (plus, _) = eval(&work, false)?;
        work[leaf].data[idx] = orig - h;
        let (minus, _) = eval(&work, false)?;
        work[leaf].data[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[leaf][idx];
        let err = relative_error(analytic, numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((leaf, idx, analytic, numeric));
        }
    }
    Ok(report)
}

/// Smooth scalar readout `mean(y * r)` with fixed random `r` in `[-1, 1]`.
pub fn linear_readout<R: Rng + ?Sized>(tape: &mut Tape<f64>, y: Var, rng: &mut R) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let r = tape.constant(Tensor { shape, data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() });
    let p = tape.mul(y, r)?;
    let flat = tape.reshape(p, vec![1, n])?;
    tape.sample_mean(flat)
}
