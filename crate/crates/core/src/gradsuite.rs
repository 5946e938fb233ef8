//! Central finite-difference checks over every differentiable component,
//! run in f64 on small shapes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::actionhead::{ActionHead, Conditioned, HeadConfig};
use crate::diffusion::loss::{draw_dsm_sample, dsm_loss_at, trajectory_pair};
use crate::diffusion::{ctm_loss, Gaussian, NoiseSchedule};
use crate::error::Result;
use crate::nncore::{grad_check, Bound, ConvGeom, GradReport, Graph, ParamId, ParamStore, Tensor, Var};
use crate::perception::{Perception, PerceptionConfig, Toggles};

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradReport,
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Move every parameter off its initialization so zero-initialized
/// projections carry gradient.
fn perturb(ps: &mut ParamStore<f64>, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = ps.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let noise = Tensor::<f64>::randn(ps.get(id).shape(), 0.3, &mut r);
        ps.get_mut(id).add_assign(&noise);
    }
}

/// Random fixed projection of `x` to a scalar, so normalizations do not
/// make the objective flat.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let w = g.constant(randn(g.shape(x), seed));
    let y = g.mul(x, w);
    g.sum_all(y)
}

fn params(ps: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    ps.iter().map(|(_, _, t)| t.clone()).collect()
}

fn perception_cfg() -> PerceptionConfig {
    PerceptionConfig {
        lr_side: 4,
        factor: 2,
        patch: 2,
        d: 4,
        heads: 2,
        lr_blocks: 1,
        conv_widths: [2, 2, 2],
        inject_blocks: 1,
    }
}

fn head_cfg() -> HeadConfig {
    HeadConfig {
        horizon: 4,
        action_dim: 3,
        blocks: 1,
        d: 4,
        heads: 2,
        proprio_dim: 3,
    }
}

fn case<F>(name: &'static str, inputs: &[Tensor<f64>], coords: Option<usize>, f: F) -> Result<GradCase>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(GradCase {
        name,
        report: grad_check(f, inputs, EPS, TOL, coords)?,
    })
}

fn primitives() -> Result<Vec<GradCase>> {
    let mut out = Vec::new();
    out.push(case("linear", &[randn(&[5, 4], 1), randn(&[4, 3], 2), randn(&[3], 3)], None, |g, v| {
        let y = g.matmul(v[0], v[1]);
        Ok(g.add_bcast(y, v[2]))
    })?);
    out.push(case("elementwise", &[randn(&[2, 3, 4], 4), randn(&[2, 3, 4], 5)], None, |g, v| {
        let s = g.add(v[0], v[1]);
        let s = g.gelu(s);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[0]);
        let m = g.scale(m, 0.7);
        let r = g.scale_rows(m, &[0.5, -1.5]);
        Ok(project(g, r, 6))
    })?);
    out.push(case("layer_norm", &[randn(&[3, 8], 7), randn(&[8], 8), randn(&[8], 9)], None, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2]);
        Ok(project(g, y, 10))
    })?);
    let mut mask = Tensor::<f64>::zeros(&[3, 5]);
    for i in 0..3 {
        mask.data_mut()[i * 5 + 4] = f64::NEG_INFINITY;
    }
    out.push(case(
        "attention",
        &[randn(&[2, 3, 8], 11), randn(&[2, 5, 8], 12), randn(&[2, 5, 8], 13)],
        None,
        |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, Some(&mask))?;
            Ok(project(g, a, 14))
        },
    )?);
    let geom = ConvGeom {
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    out.push(case(
        "conv2d",
        &[randn(&[2, 6, 6, 2], 15), randn(&[3 * 3 * 2, 3], 16), randn(&[3], 17)],
        None,
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), geom);
            Ok(project(g, y, 18))
        },
    )?);
    out.push(case("pool_upsample", &[randn(&[1, 4, 4, 2], 19)], None, |g, v| {
        let p = g.avg_pool(v[0], 2);
        let u = g.upsample_nearest(p, 2);
        let s = g.add(u, v[0]);
        Ok(project(g, s, 20))
    })?);
    out.push(case("gather_concat", &[randn(&[2, 3, 4], 21), randn(&[2, 1, 4], 22)], None, |g, v| {
        let r = g.gather_rows(v[0], 4, &[5, 0, 2, 2, 3, 1], &[2, 3, 4]);
        let c = g.concat_tokens(&[r, v[1]]);
        Ok(project(g, c, 23))
    })?);
    out.push(case("pseudo_huber", &[randn(&[3, 4, 3], 24), randn(&[3, 4, 3], 25)], None, |g, v| {
        let h = g.pseudo_huber(v[0], v[1], 0.01);
        Ok(g.sum_all(h))
    })?);
    Ok(out)
}

fn perception_cases() -> Result<Vec<GradCase>> {
    let cfg = perception_cfg();
    let mut ps = ParamStore::new(31);
    let p = Perception::new(&mut ps, cfg, Toggles::default())?;
    perturb(&mut ps, 32);
    let (h, hh, n, d) = (cfg.lr_side, cfg.hr_side(), cfg.tokens(), cfg.d);
    let frames = [randn(&[1, h, h, 3], 33), randn(&[1, hh, hh, 3], 34), randn(&[1, h, h, 3], 35)];
    let with = |head: Vec<Tensor<f64>>| {
        let mut v = head;
        v.extend(params(&ps));
        v
    };
    let k = 1;
    let coords = Some(6);
    let mut out = Vec::new();
    out.push(case("low_res_encoder", &with(vec![frames[0].clone()]), coords, |g, v| {
        let b = Bound::from_vars(v[k..].to_vec());
        let f = p.encode_low(g, &b, v[0])?;
        Ok(project(g, f, 36))
    })?);
    out.push(case("high_res_encoder", &with(vec![frames[1].clone()]), coords, |g, v| {
        let b = Bound::from_vars(v[k..].to_vec());
        let maps = p.encode_high(g, &b, v[0])?;
        let mut acc = project(g, maps[0], 37);
        for (i, &m) in maps.iter().enumerate().skip(1) {
            let s = project(g, m, 37 + i as u64);
            acc = g.add(acc, s);
        }
        Ok(acc)
    })?);
    out.push(case("fpn", &with(vec![frames[1].clone()]), coords, |g, v| {
        let b = Bound::from_vars(v[k..].to_vec());
        let maps = p.encode_high(g, &b, v[0])?;
        let f = p.fpn_fuse(g, &b, &maps)?;
        Ok(project(g, f, 40))
    })?);
    let grid = cfg.hr_grid();
    out.push(case(
        "dual_fusion",
        &with(vec![randn(&[1, n, d], 41), randn(&[1, grid, grid, d], 42)]),
        coords,
        |g, v| {
            let b = Bound::from_vars(v[2..].to_vec());
            let f = p.fuse_dual(g, &b, v[0], v[1])?;
            Ok(project(g, f, 43))
        },
    )?);
    out.push(case(
        "semantic_injection",
        &with(vec![randn(&[1, n, d], 44), randn(&[1, n, d], 45)]),
        coords,
        |g, v| {
            let b = Bound::from_vars(v[2..].to_vec());
            let f = p.inject_semantics(g, &b, v[0], v[1])?;
            Ok(project(g, f, 46))
        },
    )?);
    out.push(case("perception", &with(frames.to_vec()), coords, |g, v| {
        let b = Bound::from_vars(v[3..].to_vec());
        let f = p.forward(g, &b, v[0], v[1], v[2])?.f_sem;
        Ok(project(g, f, 47))
    })?);
    Ok(out)
}

fn head_cases() -> Result<Vec<GradCase>> {
    let sched = NoiseSchedule::default();
    let hc = head_cfg();
    let n = 4;
    let mut ps = ParamStore::new(51);
    let head = ActionHead::new(&mut ps, hc, true)?;
    perturb(&mut ps, 52);
    let mut target_ps = ps.clone();
    perturb(&mut target_ps, 53);
    let shape = [2, hc.horizon, hc.action_dim];
    let conds = [randn(&[2, n, hc.d], 54), randn(&[2, 3], 55)];
    let with = |head: Vec<Tensor<f64>>| {
        let mut v = head;
        v.extend(params(&ps));
        v
    };
    let coords = Some(8);
    let mut out = Vec::new();
    out.push(case(
        "denoiser",
        &with(vec![randn(&shape, 56), conds[0].clone(), conds[1].clone()]),
        coords,
        |g, v| {
            let p = Bound::from_vars(v[3..].to_vec());
            let c = head.embed_condition(g, &p, &sched, v[1], v[2], &[0.7, 3.0], Some(&[0.0, 1.2]))?;
            let y = head.denoise_raw(g, &p, v[0], c)?;
            Ok(project(g, y, 57))
        },
    )?);
    let a0 = Tensor::<f64>::randn(&shape, 0.5, &mut ChaCha8Rng::seed_from_u64(58));
    let sample = draw_dsm_sample(&a0, &sched, &mut ChaCha8Rng::seed_from_u64(59));
    out.push(case("dsm_loss", &with(conds.to_vec()), coords, |g, v| {
        let p = Bound::from_vars(v[2..].to_vec());
        let net = Conditioned {
            head: &head,
            params: &p,
            sched,
            f_sem: v[0],
            proprio: v[1],
        };
        dsm_loss_at(g, &net, &a0, &sample, 0.01, true)
    })?);
    let eps = randn(&shape, 60);
    let gauss = Gaussian {
        mu: 0.0,
        sigma_data: sched.sigma_data,
    };
    let pair = trajectory_pair(&a0, &eps, &[3.0, 1.0], &[1.5, 0.5], &gauss)?;
    out.push(case("ctm_online_branch", &with(conds.to_vec()), coords, |g, v| {
        let p = Bound::from_vars(v[2..].to_vec());
        let online = Conditioned {
            head: &head,
            params: &p,
            sched,
            f_sem: v[0],
            proprio: v[1],
        };
        let tp = target_ps.bind(g, false);
        let (f, q) = (g.constant(conds[0].clone()), g.constant(conds[1].clone()));
        let target = Conditioned {
            head: &head,
            params: &tp,
            sched,
            f_sem: f,
            proprio: q,
        };
        ctm_loss(g, &online, &target, &pair, &[0.3, 0.1], 0.01)
    })?);
    Ok(out)
}

/// Every case of the suite, in a fixed order.
pub fn run_suite() -> Result<Vec<GradCase>> {
    let mut out = primitives()?;
    out.extend(perception_cases()?);
    out.extend(head_cases()?);
    Ok(out)
}
