//! Transformer denoiser over action chunks.
//!
//! Action tokens self-attend and cross-attend to a condition sequence made of
//! the perception tokens, one proprioception token, one noise-level token and,
//! for the student, one stop-time token.

use serde::{Deserialize, Serialize};

use crate::diffusion::loss::{denoise_graph, jump_graph, GraphDenoiser};
use crate::diffusion::sampler::{Denoiser, TrajectoryMap};
use crate::diffusion::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::nncore::layers::{sinusoidal, Block, BlockKind, LayerNorm, Linear, Mlp, INIT_STD};
use crate::nncore::{Bound, Graph, Init, ParamId, ParamStore, Real, Tensor, Var};

#[cfg(test)]
mod tests;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub horizon: usize,
    pub action_dim: usize,
    pub blocks: usize,
    pub d: usize,
    pub heads: usize,
    pub proprio_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            horizon: 8,
            action_dim: 3,
            blocks: 4,
            d: 128,
            heads: 4,
            proprio_dim: 3,
        }
    }
}

impl HeadConfig {
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.action_dim == 0 || self.proprio_dim == 0 {
            return Err(Error::Config("empty action chunk or proprioception".into()));
        }
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::HeadsDoNotDivide {
                dim: self.d,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

/// Condition token slots, in sequence order after the perception tokens.
const TYPE_SEM: usize = 0;
const TYPE_JOINT: usize = 1;
const TYPE_TIME: usize = 2;
const TYPE_STOP: usize = 3;

/// Scalar fed to the stop-time embedding; finite at `s = 0`.
pub fn stop_feature(s: f64, sched: &NoiseSchedule) -> f64 {
    (s + sched.sigma_min).ln() / 4.0
}

#[derive(Debug, Clone)]
pub struct ActionHead {
    pub cfg: HeadConfig,
    pub act_in: Linear,
    pub act_pos: ParamId,
    pub joint: Mlp,
    pub time: Mlp,
    /// Present only on the student; its output layer starts at zero.
    pub stop: Option<Mlp>,
    pub types: ParamId,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pub unembed: Linear,
}

impl ActionHead {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, cfg: HeadConfig, student: bool) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d;
        let kind = BlockKind {
            self_attn: true,
            cross_attn: true,
        };
        Ok(Self {
            act_in: Linear::new(ps, "head.act_in", cfg.action_dim, d),
            act_pos: ps.add("head.act_pos", &[cfg.horizon, d], Init::Normal(INIT_STD)),
            joint: Mlp::new(ps, "head.joint", cfg.proprio_dim, d, d),
            time: Mlp::new(ps, "head.time", d, d, d),
            stop: student.then(|| Mlp::residual(ps, "head.stop", d, d)),
            types: ps.add("head.types", &[4, d], Init::Normal(INIT_STD)),
            blocks: (0..cfg.blocks)
                .map(|i| Block::new(ps, &format!("head.block{i}"), d, cfg.heads, kind))
                .collect(),
            ln_out: LayerNorm::new(ps, "head.ln_out", d),
            unembed: Linear::zeroed(ps, "head.unembed", d, cfg.action_dim),
            cfg,
        })
    }

    pub fn is_student(&self) -> bool {
        self.stop.is_some()
    }

    fn typed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, slot: usize) -> Var {
        let d = self.cfg.d;
        let emb = g.gather_rows(p[self.types], d, &[slot], &[d]);
        g.add_bcast(x, emb)
    }

    fn scalar_token<T: Real>(&self, g: &mut Graph<T>, p: &Bound, mlp: &Mlp, values: &[f64]) -> Var {
        let d = self.cfg.d;
        let feats = g.constant(sinusoidal::<T>(values, d));
        let h = mlp.forward(g, p, feats);
        g.reshape(h, &[values.len(), 1, d])
    }

    /// Condition sequence `[F_sem, F_joint, T_t (, T_s)]`. Requires `s < t`.
    pub fn embed_condition<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        sched: &NoiseSchedule,
        f_sem: Var,
        proprio: Var,
        t: &[f64],
        s: Option<&[f64]>,
    ) -> Result<Var> {
        for &v in t {
            if !(v > 0.0) {
                return Err(Error::Ordering(format!("noise level must be positive, got {v}")));
            }
        }
        if let Some(s) = s {
            for (&sv, &tv) in s.iter().zip(t) {
                if !(0.0 <= sv && sv < tv) {
                    return Err(Error::Ordering(format!("need 0 <= s < t, got s={sv}, t={tv}")));
                }
            }
        }
        self.condition_tokens(g, p, sched, f_sem, proprio, t, s)
    }

    /// As [`Self::embed_condition`] but admits `s == t`, used by rows whose
    /// denoiser output is discarded.
    fn condition_tokens<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        sched: &NoiseSchedule,
        f_sem: Var,
        proprio: Var,
        t: &[f64],
        s: Option<&[f64]>,
    ) -> Result<Var> {
        let d = self.cfg.d;
        let (ss, sp) = (g.shape(f_sem).to_vec(), g.shape(proprio).to_vec());
        let b = ss.first().copied().unwrap_or(0);
        if ss.len() != 3 || ss[2] != d {
            return Err(Error::shape(format!("perception tokens {ss:?}, expected [B, N, {d}]")));
        }
        if sp != [b, self.cfg.proprio_dim] || t.len() != b || s.is_some_and(|s| s.len() != b) {
            return Err(Error::shape(format!(
                "proprioception {sp:?} / {} noise levels for batch {b}",
                t.len()
            )));
        }
        let sem = self.typed(g, p, f_sem, TYPE_SEM);
        let j = self.joint.forward(g, p, proprio);
        let j = g.reshape(j, &[b, 1, d]);
        let j = self.typed(g, p, j, TYPE_JOINT);
        let cn: Vec<f64> = t.iter().map(|&v| sched.c_noise(v)).collect();
        let tt = self.scalar_token(g, p, &self.time, &cn);
        let tt = self.typed(g, p, tt, TYPE_TIME);
        let mut parts = vec![sem, j, tt];
        match (&self.stop, s) {
            (Some(mlp), Some(s)) => {
                let sf: Vec<f64> = s.iter().map(|&v| stop_feature(v, sched)).collect();
                let ts = self.scalar_token(g, p, mlp, &sf);
                parts.push(self.typed(g, p, ts, TYPE_STOP));
            }
            (None, Some(_)) => {
                return Err(Error::Config("teacher has no stop-time embedding".into()));
            }
            _ => {}
        }
        Ok(g.concat_tokens(&parts))
    }

    /// Raw network output for scaled actions `x_in: [B, T_h, A]`.
    pub fn denoise_raw<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x_in: Var, cond: Var) -> Result<Var> {
        let sx = g.shape(x_in).to_vec();
        let sc = g.shape(cond).to_vec();
        if sx.len() != 3 || sx[1] != self.cfg.horizon || sx[2] != self.cfg.action_dim {
            return Err(Error::shape(format!(
                "action chunk {sx:?}, expected [B, {}, {}]",
                self.cfg.horizon, self.cfg.action_dim
            )));
        }
        if sc.len() != 3 || sc[0] != sx[0] || sc[2] != self.cfg.d {
            return Err(Error::shape(format!("condition {sc:?} for chunk {sx:?}")));
        }
        let x = self.act_in.forward(g, p, x_in);
        let mut x = g.add_bcast(x, p[self.act_pos]);
        for blk in &self.blocks {
            x = blk.forward(g, p, x, Some(cond))?;
        }
        let x = self.ln_out.forward(g, p, x);
        let out = self.unembed.forward(g, p, x);
        if !g.value(out).all_finite() {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.act_in.params();
        v.push(self.act_pos);
        v.extend(self.joint.params());
        v.extend(self.time.params());
        if let Some(m) = &self.stop {
            v.extend(m.params());
        }
        v.push(self.types);
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.ln_out.params());
        v.extend(self.unembed.params());
        v
    }

    /// Parameters the student adds on top of the teacher.
    pub fn stop_params(&self) -> Vec<ParamId> {
        self.stop.as_ref().map(|m| m.params()).unwrap_or_default()
    }
}

/// The head bound to one batch of conditions inside a graph.
pub struct Conditioned<'a> {
    pub head: &'a ActionHead,
    pub params: &'a Bound,
    pub sched: NoiseSchedule,
    /// `[B, N, D]`.
    pub f_sem: Var,
    /// `[B, proprio_dim]`.
    pub proprio: Var,
}

impl<T: Real> GraphDenoiser<T> for Conditioned<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    fn raw(&self, g: &mut Graph<T>, x_in: Var, t: &[f64], s: Option<&[f64]>) -> Result<Var> {
        // The teacher ignores stop-times so shared losses can pass them.
        let s = if self.head.is_student() { s } else { None };
        let cond = self
            .head
            .condition_tokens(g, self.params, &self.sched, self.f_sem, self.proprio, t, s)?;
        self.head.denoise_raw(g, self.params, x_in, cond)
    }
}

/// Inference wrapper: frozen parameters plus fixed conditions.
pub struct FrozenHead<'a, T> {
    pub head: &'a ActionHead,
    pub store: &'a ParamStore<T>,
    pub sched: NoiseSchedule,
    pub f_sem: Tensor<T>,
    pub proprio: Tensor<T>,
}

impl<T: Real> FrozenHead<'_, T> {
    fn run(&self, x: &Tensor<T>, f: impl FnOnce(&mut Graph<T>, &Conditioned, Var) -> Result<Var>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let params = self.store.bind_only(&mut g, &self.head.params(), false);
        let f_sem = g.constant(self.f_sem.clone());
        let proprio = g.constant(self.proprio.clone());
        let net = Conditioned {
            head: self.head,
            params: &params,
            sched: self.sched,
            f_sem,
            proprio,
        };
        let xv = g.constant(x.clone());
        let out = f(&mut g, &net, xv)?;
        Ok(g.value(out).clone())
    }

    fn batch(&self) -> usize {
        self.f_sem.shape()[0]
    }
}

impl<T: Real> Denoiser<T> for FrozenHead<'_, T> {
    fn denoise(&self, x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        let ts = vec![t; self.batch()];
        self.denoise_each(x, &ts)
    }

    fn denoise_each(&self, x: &Tensor<T>, t: &[f64]) -> Result<Tensor<T>> {
        // The student denoises at s = t, matching its score-matching term.
        let s = self.head.is_student().then(|| t.to_vec());
        self.run(x, |g, net, xv| denoise_graph(g, net, xv, t, s.as_deref()))
    }
}

impl<T: Real> TrajectoryMap<T> for FrozenHead<'_, T> {
    fn jump(&self, x: &Tensor<T>, t: f64, s: f64) -> Result<Tensor<T>> {
        let b = self.batch();
        let (ts, ss) = (vec![t; b], vec![s; b]);
        self.run(x, |g, net, xv| jump_graph(g, net, xv, &ts, &ss))
    }
}
