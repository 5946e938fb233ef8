//! Training objectives on the tape: denoising score matching, trajectory
//! consistency and their weighted sum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::sampler::Denoiser;
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nncore::{Graph, Real, Tensor, Var};

/// A network usable inside a training graph.
pub trait GraphDenoiser<T: Real> {
    fn schedule(&self) -> &NoiseSchedule;

    /// Raw output `F(c_in x, t, s)` for `x_in = c_in * x`, one noise level
    /// (and optional stop-time) per sample.
    fn raw(&self, g: &mut Graph<T>, x_in: Var, t: &[f64], s: Option<&[f64]>) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub huber_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::for_chunk(24)
    }
}

impl LossWeights {
    /// `alpha = beta = 1`, `c = 0.00054 * sqrt(dim)` for chunks of `dim` scalars.
    pub fn for_chunk(dim: usize) -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            huber_c: 0.00054 * (dim as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha >= 0.0 && self.beta >= 0.0 && self.huber_c > 0.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// `sqrt(|x - y|^2 + c^2) - c`.
pub fn huber<T: Real>(x: &Tensor<T>, y: &Tensor<T>, c: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if !(c > 0.0) {
        return Err(Error::Config(format!("huber constant must be positive, got {c}")));
    }
    let sq: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok((sq + c * c).sqrt() - c)
}

pub fn joint_loss(dsm: f64, ctm: f64, w: &LossWeights) -> f64 {
    w.alpha * ctm + w.beta * dsm
}

/// Preconditioned `G(x, t)` on the tape.
pub fn denoise_graph<T: Real, D: GraphDenoiser<T> + ?Sized>(
    g: &mut Graph<T>,
    net: &D,
    x: Var,
    t: &[f64],
    s: Option<&[f64]>,
) -> Result<Var> {
    let sched = *net.schedule();
    for &v in t {
        sched.check_sigma(v)?;
    }
    let coef = |f: &dyn Fn(f64) -> f64| t.iter().map(|&v| T::of_f64(f(v))).collect::<Vec<_>>();
    let x_in = g.scale_rows(x, &coef(&|v| sched.c_in(v)));
    let f = net.raw(g, x_in, t, s)?;
    let skip = g.scale_rows(x, &coef(&|v| sched.c_skip(v)));
    let out = g.scale_rows(f, &coef(&|v| sched.c_out(v)));
    Ok(g.add(skip, out))
}

/// `g(x, t, s) = (s/t) x + (1 - s/t) D(x, t, s)`, with `g = x` where `s == t`.
pub fn jump_graph<T: Real, D: GraphDenoiser<T> + ?Sized>(
    g: &mut Graph<T>,
    net: &D,
    x: Var,
    t: &[f64],
    s: &[f64],
) -> Result<Var> {
    let sched = *net.schedule();
    let ratio: Vec<f64> = t
        .iter()
        .zip(s)
        .map(|(&tv, &sv)| if sv == tv { 1.0 } else { sv / tv })
        .collect();
    // Rows with s == t ignore D; evaluate them at a valid level.
    let t_eval: Vec<f64> = t.iter().map(|&v| v.max(sched.sigma_min)).collect();
    let s_eval: Vec<f64> = s.iter().zip(&t_eval).map(|(&sv, &tv)| sv.min(tv)).collect();
    let d = denoise_graph(g, net, x, &t_eval, Some(&s_eval))?;
    let keep = g.scale_rows(x, &ratio.iter().map(|&r| T::of_f64(r)).collect::<Vec<_>>());
    let mix = g.scale_rows(d, &ratio.iter().map(|&r| T::of_f64(1.0 - r)).collect::<Vec<_>>());
    Ok(g.add(keep, mix))
}

/// Noised batch for the score-matching objective.
pub struct DsmSample<T> {
    pub sigma: Vec<f64>,
    pub a_t: Tensor<T>,
}

pub fn draw_dsm_sample<T: Real, R: Rng + ?Sized>(a0: &Tensor<T>, sched: &NoiseSchedule, rng: &mut R) -> DsmSample<T> {
    let b = a0.shape()[0];
    let sigma: Vec<f64> = (0..b).map(|_| sched.sample_train_sigma(rng)).collect();
    let eps = Tensor::<T>::randn(a0.shape(), 1.0, rng);
    let inner = a0.numel() / b;
    let mut a_t = a0.clone();
    for (i, chunk) in a_t.data_mut().chunks_mut(inner).enumerate() {
        let s = T::of_f64(sigma[i]);
        for (v, &e) in chunk.iter_mut().zip(&eps.data()[i * inner..]) {
            *v += s * e;
        }
    }
    DsmSample { sigma, a_t }
}

/// Mean over the batch of `huber(a0, G(a0 + t eps, t))` with log-normal `t`.
/// For the student the stop-time equals the noise level, so the loss trains
/// the denoiser `D(x, t, t)` that the jumps are built from.
pub fn dsm_loss<T: Real, D: GraphDenoiser<T> + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    net: &D,
    a0: &Tensor<T>,
    c: f64,
    student: bool,
    rng: &mut R,
) -> Result<Var> {
    let sample = draw_dsm_sample(a0, net.schedule(), rng);
    dsm_loss_at(g, net, a0, &sample, c, student)
}

pub fn dsm_loss_at<T: Real, D: GraphDenoiser<T> + ?Sized>(
    g: &mut Graph<T>,
    net: &D,
    a0: &Tensor<T>,
    sample: &DsmSample<T>,
    c: f64,
    student: bool,
) -> Result<Var> {
    let x = g.constant(sample.a_t.clone());
    let s = student.then_some(sample.sigma.as_slice());
    let den = denoise_graph(g, net, x, &sample.sigma, s)?;
    let target = g.constant(a0.clone());
    let h = g.pseudo_huber(den, target, T::of_f64(c));
    let loss = g.mean_all(h);
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("DSM loss".into()));
    }
    Ok(loss)
}

/// Two points on one teacher ODE trajectory, `t1 > t2` per sample.
#[derive(Debug, Clone)]
pub struct TrajectoryPair<T> {
    pub a_t1: Tensor<T>,
    pub t1: Vec<f64>,
    pub a_t2: Tensor<T>,
    pub t2: Vec<f64>,
}

/// Per-sample grid indices: `t1 = grid[i]`, `t2 = grid[i + 1] > 0`, and a
/// stop-time drawn uniformly from the grid points below `t2` (including 0).
pub fn draw_times<R: Rng + ?Sized>(grid: &[f64], batch: usize, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let k = grid.len() - 1;
    if k < 2 {
        return Err(Error::Config("trajectory pairs need a grid of at least 2 steps".into()));
    }
    let (mut t1, mut t2, mut s) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..batch {
        let i = rng.random_range(0..k - 1);
        let j = rng.random_range(i + 2..=k);
        t1.push(grid[i]);
        t2.push(grid[i + 1]);
        s.push(grid[j]);
    }
    Ok((t1, t2, s))
}

/// `a_t1 = a0 + t1 eps`; `a_t2` is one teacher Heun step from `(a_t1, t1)`.
pub fn trajectory_pair<T: Real, D: Denoiser<T> + ?Sized>(
    a0: &Tensor<T>,
    eps: &Tensor<T>,
    t1: &[f64],
    t2: &[f64],
    teacher: &D,
) -> Result<TrajectoryPair<T>> {
    for (&a, &b) in t1.iter().zip(t2) {
        if !(a > b && b > 0.0) {
            return Err(Error::Ordering(format!("need t1 > t2 > 0, got t1={a}, t2={b}")));
        }
    }
    let b = a0.shape()[0];
    let inner = a0.numel() / b;
    let mut a_t1 = a0.clone();
    for (i, chunk) in a_t1.data_mut().chunks_mut(inner).enumerate() {
        let s = T::of_f64(t1[i]);
        for (v, &e) in chunk.iter_mut().zip(&eps.data()[i * inner..]) {
            *v += s * e;
        }
    }
    // Per-sample Heun step.
    let rows = |x: &Tensor<T>, f: &dyn Fn(usize) -> f64| -> Vec<T> {
        (0..b)
            .flat_map(|i| {
                let c = T::of_f64(f(i));
                x.data()[i * inner..(i + 1) * inner].iter().map(move |&v| v * c).collect::<Vec<_>>()
            })
            .collect()
    };
    let d1 = teacher.denoise_each(&a_t1, t1)?;
    let rhs1 = Tensor::new(a_t1.shape(), rows(&a_t1.zip_map(&d1, |x, d| d - x), &|i| 1.0 / t1[i]))?;
    let step = |i: usize| t1[i] - t2[i];
    let euler = a_t1.zip_map(&Tensor::new(a_t1.shape(), rows(&rhs1, &step))?, |x, d| x + d);
    let d2 = teacher.denoise_each(&euler, t2)?;
    let rhs2 = Tensor::new(a_t1.shape(), rows(&euler.zip_map(&d2, |x, d| d - x), &|i| 1.0 / t2[i]))?;
    let avg = rhs1.zip_map(&rhs2, |a, c| (a + c) * T::of_f64(0.5));
    let a_t2 = a_t1.zip_map(&Tensor::new(a_t1.shape(), rows(&avg, &step))?, |x, d| x + d);
    if !a_t2.all_finite() {
        return Err(Error::NonFinite("teacher trajectory step".into()));
    }
    Ok(TrajectoryPair {
        a_t1,
        t1: t1.to_vec(),
        a_t2,
        t2: t2.to_vec(),
    })
}

/// Consistency loss: the online student carries `a_t1` to `s`, the target
/// carries `a_t2` to `s` without gradient, and both are mapped to time 0 by
/// the target before comparison.
pub fn ctm_loss<T: Real, O, E>(
    g: &mut Graph<T>,
    online: &O,
    target: &E,
    pair: &TrajectoryPair<T>,
    s: &[f64],
    c: f64,
) -> Result<Var>
where
    O: GraphDenoiser<T> + ?Sized,
    E: GraphDenoiser<T> + ?Sized,
{
    for ((&a, &b), &sv) in pair.t1.iter().zip(&pair.t2).zip(s) {
        if !(0.0 <= sv && sv < b && b < a) {
            return Err(Error::Ordering(format!("need 0 <= s < t2 < t1, got s={sv}, t2={b}, t1={a}")));
        }
    }
    let zeros = vec![0.0; s.len()];
    let x1 = g.constant(pair.a_t1.clone());
    let x2 = g.constant(pair.a_t2.clone());
    let s1 = jump_graph(g, online, x1, &pair.t1, s)?;
    let s2 = jump_graph(g, target, x2, &pair.t2, s)?;
    let s2 = g.detach(s2);
    let e1 = jump_graph(g, target, s1, s, &zeros)?;
    let e2 = jump_graph(g, target, s2, s, &zeros)?;
    let e2 = g.detach(e2);
    let h = g.pseudo_huber(e1, e2, T::of_f64(c));
    let loss = g.mean_all(h);
    if !g.value(loss).all_finite() {
        return Err(Error::NonFinite("CTM loss".into()));
    }
    Ok(loss)
}

/// `alpha * ctm + beta * dsm` on the tape.
pub fn joint_graph<T: Real>(g: &mut Graph<T>, dsm: Var, ctm: Var, w: &LossWeights) -> Var {
    let a = g.scale(ctm, T::of_f64(w.alpha));
    let b = g.scale(dsm, T::of_f64(w.beta));
    g.add(a, b)
}
