use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffusion::loss::dsm_loss;
use crate::nncore::grad_check;

fn small() -> HeadConfig {
    HeadConfig {
        horizon: 4,
        action_dim: 3,
        blocks: 2,
        d: 8,
        heads: 2,
        proprio_dim: 3,
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn perturb(ps: &mut ParamStore<f64>, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = ps.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let noise = Tensor::<f64>::randn(ps.get(id).shape(), 0.3, &mut r);
        ps.get_mut(id).add_assign(&noise);
    }
}

fn head(student: bool) -> (ParamStore<f64>, ActionHead) {
    let mut ps = ParamStore::new(21);
    let h = ActionHead::new(&mut ps, small(), student).unwrap();
    (ps, h)
}

const N: usize = 5;

#[test]
fn condition_token_counts_and_ordering_errors() {
    let sched = NoiseSchedule::default();
    for (student, extra) in [(false, 2), (true, 3)] {
        let (ps, h) = head(student);
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let f = g.constant(randn(&[2, N, 8], 1));
        let q = g.constant(randn(&[2, 3], 2));
        let s = [0.0, 0.5];
        let c = h
            .embed_condition(&mut g, &p, &sched, f, q, &[1.0, 2.0], student.then_some(&s[..]))
            .unwrap();
        assert_eq!(g.shape(c), &[2, N + extra, 8]);
    }
    let (ps, h) = head(true);
    let mut g = Graph::new();
    let p = ps.bind(&mut g, false);
    let f = g.constant(randn(&[1, N, 8], 1));
    let q = g.constant(randn(&[1, 3], 2));
    for s in [1.0, 1.5] {
        let r = h.embed_condition(&mut g, &p, &sched, f, q, &[1.0], Some(&[s]));
        assert!(matches!(r, Err(Error::Ordering(_))));
    }
    assert!(h.embed_condition(&mut g, &p, &sched, f, q, &[0.0], None).is_err());
}

#[test]
fn time_embedding_separates_grid_levels() {
    let sched = NoiseSchedule::default();
    let (ps, h) = head(false);
    let grid = sched.grid(64).unwrap();
    let t: Vec<f64> = grid[..64].to_vec();
    let mut g = Graph::new();
    let p = ps.bind(&mut g, false);
    let tok = h.scalar_token(&mut g, &p, &h.time, &t.iter().map(|&v| sched.c_noise(v)).collect::<Vec<_>>());
    let v = g.value(tok).data();
    let d = 8;
    let mut min = f64::INFINITY;
    for i in 0..64 {
        for j in 0..i {
            let dist: f64 = (0..d).map(|k| (v[i * d + k] - v[j * d + k]).powi(2)).sum();
            min = min.min(dist.sqrt());
        }
    }
    assert!(min > 1e-6, "closest pair {min}");
}

#[test]
fn proprioception_only_moves_its_token() {
    let sched = NoiseSchedule::default();
    let (ps, h) = head(false);
    let f = randn(&[1, N, 8], 1);
    let run = |q: Tensor<f64>| {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let (fv, qv) = (g.constant(f.clone()), g.constant(q));
        let c = h.embed_condition(&mut g, &p, &sched, fv, qv, &[1.0], None).unwrap();
        g.value(c).clone()
    };
    let a = run(randn(&[1, 3], 2));
    let b = run(randn(&[1, 3], 3));
    for tok in 0..N + 2 {
        let diff = a.data()[tok * 8..(tok + 1) * 8]
            .iter()
            .zip(&b.data()[tok * 8..(tok + 1) * 8])
            .any(|(x, y)| x != y);
        assert_eq!(diff, tok == N, "token {tok}");
    }
}

#[test]
fn zero_output_at_init_and_shape_checks() {
    let sched = NoiseSchedule::default();
    let (ps, h) = head(false);
    let mut g = Graph::new();
    let p = ps.bind(&mut g, false);
    let f = g.constant(randn(&[3, N, 8], 1));
    let q = g.constant(randn(&[3, 3], 2));
    let c = h.embed_condition(&mut g, &p, &sched, f, q, &[1.0; 3], None).unwrap();
    let x = g.constant(randn(&[3, 4, 3], 3));
    let y = h.denoise_raw(&mut g, &p, x, c).unwrap();
    assert_eq!(g.shape(y), &[3, 4, 3]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(randn(&[3, 5, 3], 3));
    assert!(matches!(h.denoise_raw(&mut g, &p, bad, c), Err(Error::Shape(_))));
}

#[test]
fn denoiser_gradients_match_finite_differences() {
    let sched = NoiseSchedule::default();
    let (mut ps, h) = head(true);
    perturb(&mut ps, 4);
    let mut inputs = vec![randn(&[2, 4, 3], 1), randn(&[2, N, 8], 2), randn(&[2, 3], 3)];
    inputs.extend(ps.iter().map(|(_, _, t)| t.clone()));
    let r = grad_check(
        |g, v| {
            let p = Bound::from_vars(v[3..].to_vec());
            let c = h.embed_condition(g, &p, &sched, v[1], v[2], &[0.7, 3.0], Some(&[0.0, 1.2]))?;
            h.denoise_raw(g, &p, v[0], c)
        },
        &inputs,
        1e-4,
        1e-3,
        Some(8),
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn student_without_stop_token_matches_teacher() {
    let sched = NoiseSchedule::default();
    let (mut tps, teacher) = head(false);
    perturb(&mut tps, 7);
    let mut sps = ParamStore::new(99);
    let student = ActionHead::new(&mut sps, small(), true).unwrap();
    assert_eq!(sps.copy_matching(&tps), tps.len());
    let extra: Vec<&str> = student.stop_params().iter().map(|&id| sps.name(id)).collect();
    assert_eq!(extra.len(), sps.len() - tps.len());
    assert!(extra.iter().all(|n| n.starts_with("head.stop.")));

    let (f, q, x) = (randn(&[2, N, 8], 1), randn(&[2, 3], 2), randn(&[2, 4, 3], 3));
    let run = |ps: &ParamStore<f64>, h: &ActionHead| {
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let (fv, qv, xv) = (g.constant(f.clone()), g.constant(q.clone()), g.constant(x.clone()));
        let c = h.embed_condition(&mut g, &p, &sched, fv, qv, &[0.4, 9.0], None).unwrap();
        let y = h.denoise_raw(&mut g, &p, xv, c).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&tps, &teacher), run(&sps, &student));
}

#[test]
fn frozen_head_samples_and_anchors() {
    let sched = NoiseSchedule::default();
    let (mut ps, h) = head(true);
    perturb(&mut ps, 2);
    let frozen = FrozenHead {
        head: &h,
        store: &ps,
        sched,
        f_sem: randn(&[2, N, 8], 1),
        proprio: randn(&[2, 3], 2),
    };
    let x = randn(&[2, 4, 3], 3);
    assert_eq!(frozen.jump(&x, 1.5, 1.5).unwrap(), x);
    let y = frozen.jump(&x, 80.0, 0.0).unwrap();
    assert!(y.all_finite());
    // The sampling denoiser is D(x, t, t): recover D from a jump stopping just short of t.
    let (t, s) = (2.0, 2.0 * (1.0 - 1e-7));
    let r = s / t;
    let near = frozen.jump(&x, t, s).unwrap();
    let mut implied = x.clone();
    for (v, (j, x0)) in implied.data_mut().iter_mut().zip(near.data().iter().zip(x.data())) {
        *v = (j - r * x0) / (1.0 - r);
    }
    assert!(frozen.denoise(&x, t).unwrap().max_abs_diff(&implied) < 1e-4);
    let each = frozen.denoise_each(&x, &[0.5, 2.0]).unwrap();
    let first = frozen.denoise(&x, 0.5).unwrap();
    assert!(each.slice_outer(0, 1).max_abs_diff(&first.slice_outer(0, 1)) < 1e-12);
}

#[test]
fn dsm_runs_through_the_head() {
    let sched = NoiseSchedule::default();
    let (mut ps, h) = head(false);
    perturb(&mut ps, 1);
    let mut g = Graph::new();
    let p = ps.bind(&mut g, true);
    let (f, q) = (g.constant(randn(&[2, N, 8], 1)), g.constant(randn(&[2, 3], 2)));
    let net = Conditioned {
        head: &h,
        params: &p,
        sched,
        f_sem: f,
        proprio: q,
    };
    let a0 = randn(&[2, 4, 3], 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let loss = dsm_loss(&mut g, &net, &a0, 0.01, false, &mut rng).unwrap();
    let mut grads = g.backward(loss);
    let gs = ps.collect_grads(&p, &mut grads);
    let unembed = h.unembed.w.0;
    assert!(gs[unembed].sq_norm() > 0.0);
}
