//! The U-GAT-IT loss suite on plain score and image slices.
//!
//! Adversarial terms use the real-to-0 / fake-to-1 convention:
//! `mean(D(real)^2) + mean((1 - D(fake))^2)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn mean_sq<T: Scalar>(v: &[T], target: T, what: &str) -> Result<T> {
    if v.is_empty() {
        return Err(Error::Contract(format!("{what}: empty score batch")));
    }
    Ok(v.iter().map(|&s| (s - target) * (s - target)).sum::<T>() / T::of_usize(v.len()))
}

fn mean_abs<T: Scalar>(a: &[T], b: &[T], what: &str) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} elements", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Contract(format!("{what}: empty batch")));
    }
    Ok(a.iter().zip(b).map(|(&p, &q)| (p - q).abs()).sum::<T>() / T::of_usize(a.len()))
}

/// Least-squares adversarial loss of one discriminator.
pub fn loss_gan<T: Scalar>(real_scores: &[T], fake_scores: &[T]) -> Result<T> {
    Ok(mean_sq(real_scores, T::zero(), "real scores")? + mean_sq(fake_scores, T::one(), "fake scores")?)
}

/// Adversarial loss of `D_Y` on real `y` and translated `G(x)`.
pub fn loss_gan_xy<T: Scalar>(dy_real: &[T], dy_fake: &[T]) -> Result<T> {
    loss_gan(dy_real, dy_fake)
}

/// Adversarial loss of `D_X` on real `x` and translated `F(y)`.
pub fn loss_gan_yx<T: Scalar>(dx_real: &[T], dx_fake: &[T]) -> Result<T> {
    loss_gan(dx_real, dx_fake)
}

/// `mean|F(G(x)) - x| + mean|G(F(y)) - y|`.
pub fn loss_cycle<T: Scalar>(x: &[T], x_cycled: &[T], y: &[T], y_cycled: &[T]) -> Result<T> {
    Ok(mean_abs(x_cycled, x, "x cycle")? + mean_abs(y_cycled, y, "y cycle")?)
}

/// `mean|G(y) - y| + mean|F(x) - x|`.
pub fn loss_identity<T: Scalar>(g_of_y: &[T], y: &[T], f_of_x: &[T], x: &[T]) -> Result<T> {
    Ok(mean_abs(g_of_y, y, "G identity")? + mean_abs(f_of_x, x, "F identity")?)
}

/// CAM-head scores of both discriminators on real and translated batches.
#[derive(Debug, Clone, Copy, Default)]
pub struct CamScores<'a, T> {
    pub dy_real: Option<&'a [T]>,
    pub dy_fake: Option<&'a [T]>,
    pub dx_real: Option<&'a [T]>,
    pub dx_fake: Option<&'a [T]>,
}

/// Adversarial loss of the CAM heads, same convention as [`loss_gan`].
pub fn loss_cam<T: Scalar>(s: CamScores<'_, T>) -> Result<T> {
    fn need<'a, T>(v: Option<&'a [T]>, what: &str) -> Result<&'a [T]> {
        v.ok_or_else(|| Error::Contract(format!("missing CAM head scores: {what}")))
    }
    let dy = loss_gan(need(s.dy_real, "D_Y on y")?, need(s.dy_fake, "D_Y on G(x)")?)?;
    let dx = loss_gan(need(s.dx_real, "D_X on x")?, need(s.dx_fake, "D_X on F(y)")?)?;
    Ok(dy + dx)
}

/// Loss weights of the translator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cycle: f64,
    pub identity: f64,
    pub cam: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cycle: 10.0, identity: 10.0, cam: 1000.0 }
    }
}

/// All loss terms of one evaluation, with their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLossReport {
    pub l_gan_xy: f64,
    pub l_gan_yx: f64,
    pub l_cycle: f64,
    pub l_identity: f64,
    pub l_cam: f64,
    pub total: f64,
}

impl GanLossReport {
    pub fn new(l_gan_xy: f64, l_gan_yx: f64, l_cycle: f64, l_identity: f64, l_cam: f64, w: LossWeights) -> Result<Self> {
        let mut r = Self { l_gan_xy, l_gan_yx, l_cycle, l_identity, l_cam, total: 0.0 };
        r.total = r.weighted_total(w);
        if !r.is_finite() {
            return Err(Error::TrainingDiverged { epoch: None, message: format!("non-finite loss terms {r:?}") });
        }
        Ok(r)
    }

    pub fn weighted_total(&self, w: LossWeights) -> f64 {
        self.l_gan_xy + self.l_gan_yx + w.cycle * self.l_cycle + w.identity * self.l_identity + w.cam * self.l_cam
    }

    pub fn is_finite(&self) -> bool {
        [self.l_gan_xy, self.l_gan_yx, self.l_cycle, self.l_identity, self.l_cam, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Mean of several reports; the total is recomputed from the averaged terms.
    pub fn mean(reports: &[GanLossReport], w: LossWeights) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Contract("mean of zero loss reports".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&GanLossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self::new(avg(|r| r.l_gan_xy), avg(|r| r.l_gan_yx), avg(|r| r.l_cycle), avg(|r| r.l_identity), avg(|r| r.l_cam), w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn substitution_examples() {
        let z = [0.0, 0.0];
        let o = [1.0, 1.0];
        assert_eq!(loss_gan_xy(&z, &z).unwrap(), 1.0);
        assert_eq!(loss_gan_xy(&z, &o).unwrap(), 0.0);
        assert_eq!(loss_gan_yx(&z, &z).unwrap(), 1.0);
        assert_eq!(loss_gan_yx(&z, &o).unwrap(), 0.0);
        let all_zero = CamScores { dy_real: Some(&z[..]), dy_fake: Some(&z[..]), dx_real: Some(&z[..]), dx_fake: Some(&z[..]) };
        assert_eq!(loss_cam(all_zero).unwrap(), 2.0);
        let pattern = CamScores { dy_real: Some(&z[..]), dy_fake: Some(&o[..]), dx_real: Some(&z[..]), dx_fake: Some(&o[..]) };
        assert_eq!(loss_cam(pattern).unwrap(), 0.0);
    }

    #[test]
    fn cycle_and_identity_examples() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        assert_eq!(loss_cycle(&x, &x, &x, &x).unwrap(), 0.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        assert_eq!(loss_cycle(&x, &shifted, &x, &x).unwrap(), 1.0);
        let ones = vec![1.0; 6];
        let twos = vec![2.0; 6];
        assert_eq!(loss_identity(&twos, &ones, &ones, &ones).unwrap(), 1.0);
        assert!(matches!(loss_cycle(&x, &x[..3], &x, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn errors() {
        let e: [f64; 0] = [];
        assert!(matches!(loss_gan_xy(&e, &[1.0]), Err(Error::Contract(_))));
        let s = [0.5];
        let missing = CamScores { dy_real: Some(&s[..]), dy_fake: Some(&s[..]), dx_real: None, dx_fake: Some(&s[..]) };
        assert!(matches!(loss_cam(missing), Err(Error::Contract(_))));
    }

    #[test]
    fn report_total_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = LossWeights::default();
        for _ in 0..200 {
            let t: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
            let r = GanLossReport::new(t[0], t[1], t[2], t[3], t[4], w).unwrap();
            let direct = t[0] + t[1] + 10.0 * t[2] + 10.0 * t[3] + 1000.0 * t[4];
            assert!((r.total - direct).abs() <= 1e-12 * direct.max(1.0));
        }
        assert!(GanLossReport::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, w).is_err());
    }
}
