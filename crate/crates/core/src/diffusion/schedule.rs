use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise-level parameterization: Karras time grid, log-normal training
/// noise and the data scale used by preconditioning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub num_steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
            num_steps: 18,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.rho > 0.0
            && self.sigma_data > 0.0
            && self.p_std > 0.0
            && self.num_steps >= 1
            && [self.sigma_max, self.p_mean].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise schedule {self:?}")))
        }
    }

    /// `steps + 1` decreasing levels from `sigma_max` to `sigma_min`, then 0.
    pub fn grid(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::Config("at least one denoising step is required".into()));
        }
        let (lo, hi) = (self.sigma_min.powf(1.0 / self.rho), self.sigma_max.powf(1.0 / self.rho));
        let mut t: Vec<f64> = if steps == 1 {
            vec![self.sigma_max]
        } else {
            (0..steps)
                .map(|i| (hi + i as f64 / (steps - 1) as f64 * (lo - hi)).powf(self.rho))
                .collect()
        };
        t.push(0.0);
        Ok(t)
    }

    /// Training noise level: `exp(P_mean + P_std * n)` clamped to the range.
    pub fn sample_train_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n: f64 = StandardNormal.sample(rng);
        (self.p_mean + self.p_std * n).exp().clamp(self.sigma_min, self.sigma_max)
    }

    pub fn check_sigma(&self, sigma: f64) -> Result<()> {
        // Tolerate the rounding of grids computed through powf.
        let slack = 1e-9 * self.sigma_max;
        if !(sigma >= self.sigma_min * (1.0 - 1e-9) && sigma <= self.sigma_max + slack) {
            return Err(Error::SigmaOutOfRange {
                sigma,
                min: self.sigma_min,
                max: self.sigma_max,
            });
        }
        Ok(())
    }

    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        sigma.ln() / 4.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grid_shape_and_order() {
        let s = NoiseSchedule::default();
        for k in [1, 2, 5, 18, 64] {
            let g = s.grid(k).unwrap();
            assert_eq!(g.len(), k + 1);
            assert_eq!(g[0], s.sigma_max);
            assert_eq!(*g.last().unwrap(), 0.0);
            assert!(g.windows(2).all(|w| w[0] > w[1]));
            if k > 1 {
                assert!((g[k - 1] - s.sigma_min).abs() < 1e-12);
            }
        }
        assert!(s.grid(0).is_err());
    }

    #[test]
    fn coefficients_at_reference_points() {
        let s = NoiseSchedule::default();
        assert!((s.c_skip(0.002) - 0.999_984).abs() < 1e-6);
        assert!((s.c_skip(0.5) - 0.5).abs() < 1e-15);
        assert!((s.c_out(0.5) - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn train_sigmas_stay_in_range() {
        let s = NoiseSchedule::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let v = s.sample_train_sigma(&mut rng);
            assert!(s.check_sigma(v).is_ok());
        }
        assert!(s.check_sigma(0.001).is_err());
        assert!(s.check_sigma(81.0).is_err());
    }
}
