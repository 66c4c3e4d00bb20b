use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-β forward-noising schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "noise schedule needs T >= 2 and 0 < beta_start < beta_end < 1 (got {steps}, {beta_start}, {beta_end})"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// T = 50, β from 1e-4 to 0.05.
    pub fn toy() -> Self {
        Self::linear(50, 1e-4, 0.05).expect("valid toy schedule")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `β_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `ᾱ_t` for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange { t, max: self.steps() });
        }
        Ok(())
    }

    /// Coefficients `(a, s)` of `x_t = a·x0 + s·ξ` reached by ancestral
    /// sampling that starts from `x_T ~ N(0, I)` and predicts `x0` exactly.
    /// At `t = T` this is `(0, 1)`; it approaches the forward marginal as
    /// `t → 0`.
    pub fn sampler_marginal(&self, t: usize) -> (f64, f64) {
        let big_t = self.steps();
        let (ab, ab_end) = (self.alpha_bar(t), self.alpha_bar(big_t));
        let m = (ab_end / ab).sqrt() * (1.0 - ab) / (1.0 - ab_end);
        (ab.sqrt() - m * ab_end.sqrt(), (1.0 - ab + m * m * ab_end).sqrt())
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_t(t)?;
        if x0.len() != noise.len() {
            return Err(Error::DimensionMismatch(format!("image {} vs noise {}", x0.len(), noise.len())));
        }
        let a = self.alpha_bar(t).sqrt();
        let s = (1.0 - self.alpha_bar(t)).sqrt();
        Ok(x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn alpha_bar_is_strictly_decreasing() {
        let s = NoiseSchedule::toy();
        assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
            }
        }
        assert!((s.beta(1) - 1e-4).abs() < 1e-18);
        assert!((s.beta(50) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_scales_the_image() {
        let s = NoiseSchedule::toy();
        let x0 = [0.5, -1.0, 0.25];
        let xt = s.add_noise(&x0, 30, &[0.0; 3]).unwrap();
        for (a, b) in xt.iter().zip(&x0) {
            assert_eq!(*a, s.alpha_bar(30).sqrt() * b);
        }
    }

    #[test]
    fn first_step_stays_close() {
        let s = NoiseSchedule::toy();
        let mut rng = Rng::new(1);
        let x0 = rng.normal_vec(64);
        let eps = rng.normal_vec(64);
        let xt = s.add_noise(&x0, 1, &eps).unwrap();
        let bound = (1.0 - s.alpha_bar(1)).sqrt();
        for i in 0..64 {
            // √ᾱ₁ ≈ 1 − 5e-5, so the drift from x0 is tiny
            assert!((xt[i] - x0[i]).abs() <= bound * eps[i].abs() + 1e-4 * x0[i].abs());
        }
    }

    #[test]
    fn sampler_marginal_matches_simulated_chain() {
        let s = NoiseSchedule::toy();
        assert_eq!(s.sampler_marginal(50), (0.0, 1.0));
        // Scalar ancestral chain with exact x0 from pure noise.
        let x0 = 0.7;
        let mut rng = Rng::new(3);
        let n = 20_000;
        let mut at_20 = Vec::with_capacity(n);
        for _ in 0..n {
            let mut x = rng.normal();
            for t in (21..=50).rev() {
                let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(t - 1));
                let beta = 1.0 - ab / abp;
                let mean = abp.sqrt() * beta / (1.0 - ab) * x0 + (ab / abp).sqrt() * (1.0 - abp) / (1.0 - ab) * x;
                x = mean + (beta * (1.0 - abp) / (1.0 - ab)).sqrt() * rng.normal();
            }
            at_20.push(x);
        }
        let mean = at_20.iter().sum::<f64>() / n as f64;
        let sd = (at_20.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let (a, sigma) = s.sampler_marginal(20);
        assert!((mean - a * x0).abs() < 0.03, "{mean} vs {}", a * x0);
        assert!((sd - sigma).abs() < 0.02, "{sd} vs {sigma}");
    }

    #[test]
    fn out_of_range_timestep() {
        let s = NoiseSchedule::toy();
        assert_eq!(s.add_noise(&[0.0], 0, &[0.0]), Err(Error::TimestepOutOfRange { t: 0, max: 50 }));
        assert!(s.add_noise(&[0.0], 51, &[0.0]).is_err());
    }

    #[test]
    fn variance_is_preserved_for_unit_variance_data() {
        let s = NoiseSchedule::toy();
        let mut rng = Rng::new(77);
        let t = 25;
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let x0 = rng.normal();
                let e = rng.normal();
                s.add_noise(&[x0], t, &[e]).unwrap()[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }
}
