//! Denoiser interfaces, the probability-flow ODE and the four samplers.
//!
//! Time runs from `sigma_max` down to 0. `pf_ode_rhs` returns
//! `-(x - G(x, t)) / t`, the rate of change of `x` as `t` decreases, so a
//! step from `t` to `t_next < t` is `x + (t - t_next) * rhs`.

use std::cell::Cell;

use rand::Rng;

use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nncore::{Real, Tensor};

/// Preconditioned denoiser `G(x, t)`; the observation is bound inside.
pub trait Denoiser<T: Real> {
    fn denoise(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>>;

    /// Batch with one noise level per sample along the first axis.
    fn denoise_each(&self, x: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
        if t.windows(2).all(|w| w[0] == w[1]) {
            return self.denoise(x, t[0]);
        }
        let parts = (0..t.len())
            .map(|i| self.denoise(&x.slice_outer(i, i + 1), t[i]))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_outer(&parts)
    }
}

/// Trajectory map `g(x, t, s)` from time `t` to stop-time `s <= t`.
pub trait TrajectoryMap<T: Real> {
    fn jump(&self, x: &Tensor<T>, t: f64, s: f64) -> Result<Tensor<T>>;
}

/// Counts calls to the wrapped denoiser or trajectory map.
pub struct Counted<'a, D: ?Sized> {
    pub inner: &'a D,
    calls: Cell<usize>,
}

impl<'a, D: ?Sized> Counted<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<T: Real, D: Denoiser<T> + ?Sized> Denoiser<T> for Counted<'_, D> {
    fn denoise(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.denoise(x, t)
    }

    fn denoise_each(&self, x: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.denoise_each(x, t)
    }
}

impl<T: Real, D: TrajectoryMap<T> + ?Sized> TrajectoryMap<T> for Counted<'_, D> {
    fn jump(&self, x: &Tensor<T>, t: f64, s: f64) -> Result<Tensor<T>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.jump(x, t, s)
    }
}

/// `c_skip * x + c_out * net_out`, the output side of preconditioning.
pub fn precondition<T: Real>(
    net_out: &Tensor<T>,
    x: &Tensor<T>,
    sigma: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    sched.check_sigma(sigma)?;
    if net_out.shape() != x.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", net_out.shape(), x.shape())));
    }
    let (cs, co) = (T::of_f64(sched.c_skip(sigma)), T::of_f64(sched.c_out(sigma)));
    Ok(x.zip_map(net_out, |xv, f| cs * xv + co * f))
}

pub fn pf_ode_rhs<T: Real, D: Denoiser<T> + ?Sized>(x: &Tensor<T>, t: f64, den: &D) -> Result<Tensor<T>> {
    if !(t > 0.0) {
        return Err(Error::Ordering(format!("ODE time must be positive, got {t}")));
    }
    let g = den.denoise(x, t)?;
    let inv = T::of_f64(1.0 / t);
    Ok(x.zip_map(&g, |xv, gv| -(xv - gv) * inv))
}

fn axpy<T: Real>(x: &Tensor<T>, a: f64, d: &Tensor<T>) -> Tensor<T> {
    let a = T::of_f64(a);
    x.zip_map(d, |xv, dv| xv + a * dv)
}

/// One Heun step from `t` to `t_next`; Euler when `t_next == 0`.
pub fn heun_step<T: Real, D: Denoiser<T> + ?Sized>(
    x: &Tensor<T>,
    t: f64,
    t_next: f64,
    den: &D,
) -> Result<Tensor<T>> {
    let d = pf_ode_rhs(x, t, den)?;
    let euler = axpy(x, t - t_next, &d);
    if t_next == 0.0 {
        return Ok(euler);
    }
    let d2 = pf_ode_rhs(&euler, t_next, den)?;
    let avg = d.zip_map(&d2, |a, b| (a + b) * T::of_f64(0.5));
    Ok(axpy(x, t - t_next, &avg))
}

/// Initial sample `sigma_max * eps`.
pub fn initial_noise<T: Real, R: Rng + ?Sized>(shape: &[usize], sched: &NoiseSchedule, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, sched.sigma_max, rng)
}

fn finite<T: Real>(x: Tensor<T>, what: &str) -> Result<Tensor<T>> {
    if x.all_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Second-order Heun integration of the ODE over `steps` grid intervals:
/// `2 * steps - 1` denoiser calls.
pub fn sample_edm_heun<T: Real, D: Denoiser<T> + ?Sized>(
    den: &D,
    x_init: &Tensor<T>,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor<T>> {
    let grid = sched.grid(steps)?;
    let mut x = x_init.clone();
    for w in grid.windows(2) {
        x = heun_step(&x, w[0], w[1], den)?;
    }
    finite(x, "EDM sample")
}

/// Deterministic first-order update `D + (t_next / t) (x - D)`.
pub fn sample_ddim<T: Real, D: Denoiser<T> + ?Sized>(
    den: &D,
    x_init: &Tensor<T>,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor<T>> {
    let grid = sched.grid(steps)?;
    let mut x = x_init.clone();
    for w in grid.windows(2) {
        let d = den.denoise(&x, w[0])?;
        let r = T::of_f64(w[1] / w[0]);
        x = d.zip_map(&x, |dv, xv| dv + r * (xv - dv));
    }
    finite(x, "DDIM sample")
}

/// Ancestral stochastic chain on the same grid: deterministic move to
/// `sigma_down`, then fresh noise of size `sigma_up`.
pub fn sample_ddpm<T: Real, D: Denoiser<T> + ?Sized, R: Rng + ?Sized>(
    den: &D,
    x_init: &Tensor<T>,
    sched: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let grid = sched.grid(steps)?;
    let mut x = x_init.clone();
    for w in grid.windows(2) {
        let (t, tn) = (w[0], w[1]);
        let d = den.denoise(&x, t)?;
        let up = (tn * tn * (t * t - tn * tn) / (t * t)).sqrt().min(tn);
        let down = (tn * tn - up * up).max(0.0).sqrt();
        let r = T::of_f64(down / t);
        x = d.zip_map(&x, |dv, xv| dv + r * (xv - dv));
        if up > 0.0 {
            let z = Tensor::<T>::randn(x.shape(), up, rng);
            x.add_assign(&z);
        }
    }
    finite(x, "DDPM sample")
}

/// Chain of direct jumps `g(x, t_i, t_{i+1})`: one call per step.
pub fn sample_ctm<T: Real, M: TrajectoryMap<T> + ?Sized>(
    student: &M,
    x_init: &Tensor<T>,
    sched: &NoiseSchedule,
    steps: usize,
) -> Result<Tensor<T>> {
    let grid = sched.grid(steps)?;
    let mut x = x_init.clone();
    for w in grid.windows(2) {
        x = student.jump(&x, w[0], w[1])?;
    }
    finite(x, "CTM sample")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Ddpm,
    Ddim,
    Edm,
    Ctm,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Self::Ddpm, Self::Ddim, Self::Edm, Self::Ctm];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ddpm => "ddpm",
            Self::Ddim => "ddim",
            Self::Edm => "edm",
            Self::Ctm => "ctm",
        }
    }

    /// Network evaluations for `steps` steps.
    pub fn forward_count(self, steps: usize) -> usize {
        match self {
            Self::Edm => 2 * steps - 1,
            _ => steps,
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler `{s}`")))
    }
}
