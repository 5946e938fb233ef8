//! Closed-form reference for data distributed as `N(mu, sigma_data^2 I)`.

use crate::diffusion::sampler::{Denoiser, TrajectoryMap};
use crate::error::Result;
use crate::nncore::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mu: f64,
    pub sigma_data: f64,
}

impl Gaussian {
    /// Exact ODE solution at `t` from `x0` at `t0`:
    /// `mu + (x0 - mu) * sqrt(t^2 + sd^2) / sqrt(t0^2 + sd^2)`.
    pub fn flow<T: Real>(&self, x0: &Tensor<T>, t0: f64, t: f64) -> Tensor<T> {
        let sd2 = self.sigma_data * self.sigma_data;
        let r = T::of_f64(((t * t + sd2) / (t0 * t0 + sd2)).sqrt());
        let mu = T::of_f64(self.mu);
        x0.map(|v| mu + (v - mu) * r)
    }
}

impl<T: Real> Denoiser<T> for Gaussian {
    /// `(sd^2 x + t^2 mu) / (sd^2 + t^2)`.
    fn denoise(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let sd2 = self.sigma_data * self.sigma_data;
        let (a, b) = (sd2 / (sd2 + t * t), t * t * self.mu / (sd2 + t * t));
        let (a, b) = (T::of_f64(a), T::of_f64(b));
        Ok(x.map(|v| a * v + b))
    }
}

/// A perfect student: the exact trajectory map of the Gaussian flow.
impl<T: Real> TrajectoryMap<T> for Gaussian {
    fn jump(&self, x: &Tensor<T>, t: f64, s: f64) -> Result<Tensor<T>> {
        Ok(self.flow(x, t, s))
    }
}
