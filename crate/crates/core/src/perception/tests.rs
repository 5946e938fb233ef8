use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nncore::grad_check;

fn small() -> PerceptionConfig {
    PerceptionConfig {
        lr_side: 8,
        factor: 2,
        patch: 2,
        d: 8,
        heads: 2,
        lr_blocks: 1,
        conv_widths: [4, 4, 4],
        inject_blocks: 1,
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Move every parameter off its init so zero-initialized paths carry signal.
fn perturb(ps: &mut ParamStore<f64>, seed: u64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = ps.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let noise = Tensor::<f64>::randn(ps.get(id).shape(), 0.3, &mut r);
        ps.get_mut(id).add_assign(&noise);
    }
}

fn build(cfg: PerceptionConfig, toggles: Toggles) -> (ParamStore<f64>, Perception) {
    let mut ps = ParamStore::new(11);
    let p = Perception::new(&mut ps, cfg, toggles).unwrap();
    (ps, p)
}

fn inputs(cfg: &PerceptionConfig, b: usize) -> [Tensor<f64>; 3] {
    let (h, hh) = (cfg.lr_side, cfg.hr_side());
    [
        randn(&[b, h, h, 3], 1),
        randn(&[b, hh, hh, 3], 2),
        randn(&[b, h, h, 3], 3),
    ]
}

#[test]
fn default_token_arithmetic() {
    let c = PerceptionConfig::default();
    c.validate().unwrap();
    assert_eq!(c.tokens(), 64);
    assert_eq!(c.hr_grid().pow(2), c.tokens() * c.factor * c.factor);
    assert_eq!(c.hr_grid(), 16);
    let bad = PerceptionConfig { heads: 3, ..c };
    assert!(bad.validate().is_err());
    let bad = PerceptionConfig { patch: 5, ..c };
    assert!(bad.validate().is_err());
}

#[test]
fn high_res_stage_sides_and_zero_input() {
    let cfg = PerceptionConfig {
        d: 8,
        heads: 2,
        conv_widths: [4, 6, 8],
        ..Default::default()
    };
    let (ps, p) = build(cfg, Toggles::default());
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 64, 64, 3]));
    let maps = p.encode_high(&mut g, &bound, x).unwrap();
    let sides: Vec<usize> = maps.iter().map(|&m| g.shape(m)[1]).collect();
    assert_eq!(sides, [32, 16, 8]);
    assert!(maps.iter().all(|&m| g.value(m).data().iter().all(|&v| v == 0.0)));
    let fused = p.fpn_fuse(&mut g, &bound, &maps).unwrap();
    assert_eq!(g.shape(fused), &[1, 16, 16, 8]);
    let wrong = g.constant(Tensor::zeros(&[1, 32, 32, 3]));
    assert!(matches!(p.encode_high(&mut g, &bound, wrong), Err(Error::Shape(_))));
}

#[test]
fn top_down_influence_stays_in_upsampled_footprint() {
    let cfg = PerceptionConfig {
        d: 4,
        heads: 2,
        conv_widths: [3, 3, 3],
        ..Default::default()
    };
    let (ps, p) = build(cfg, Toggles::default());
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, false);
    let c1 = g.constant(Tensor::zeros(&[1, 32, 32, 3]));
    let c2 = g.constant(Tensor::zeros(&[1, 16, 16, 3]));
    let mut deep = Tensor::zeros(&[1, 8, 8, 3]);
    let (pi, pj) = (3, 5);
    deep.data_mut()[(pi * 8 + pj) * 3] = 1.0;
    let c3 = g.constant(deep);
    let out = p.fpn.top_down(&mut g, &bound, &[c1, c2, c3], true).unwrap();
    let v = g.value(out);
    let mut touched = 0;
    for i in 0..32 {
        for j in 0..32 {
            let nz = v.data()[(i * 32 + j) * 4..(i * 32 + j + 1) * 4].iter().any(|&x| x != 0.0);
            let inside = (4 * pi).saturating_sub(1) <= i && i <= 4 * pi + 4 && (4 * pj).saturating_sub(1) <= j && j <= 4 * pj + 4;
            assert!(!nz || inside, "({i}, {j}) nonzero outside footprint");
            touched += nz as usize;
        }
    }
    assert!(touched >= 16);
}

#[test]
fn align_round_trip_and_indexing() {
    let (b, n, m, d) = (2, 16, 2, 3);
    let side = 8;
    let grid = Tensor::<f64>::new(
        &[b, side, side, d],
        (0..b * side * side * d).map(|x| x as f64).collect(),
    )
    .unwrap();
    let al = align_patches(&grid, n, m).unwrap();
    assert_eq!(al.shape(), &[b, n, m * m, d]);
    assert_eq!(unalign_patches(&al).unwrap(), grid);
    // Group (1, 2) of batch 1, member (1, 0) is grid cell (3, 4).
    let (gi, gj, di, dj) = (1, 2, 1, 0);
    let gidx = gi * 4 + gj;
    let member = di * m + dj;
    let at = ((b - 1) * n * m * m + gidx * m * m + member) * d;
    let cell = (((b - 1) * side + gi * m + di) * side + gj * m + dj) * d;
    assert_eq!(al.data()[at..at + d], grid.data()[cell..cell + d]);
    assert!(align_patches(&grid, 15, m).is_err());
}

proptest! {
    #[test]
    fn alignment_is_a_permutation(b in 1usize..3, gs in 1usize..5, m in 1usize..4, seed in 0u64..100) {
        let side = gs * m;
        let grid = randn(&[b, side, side, 2], seed);
        let al = align_patches(&grid, gs * gs, m).unwrap();
        prop_assert_eq!(unalign_patches(&al).unwrap(), grid.clone());
        let mut a = al.to_f64_vec();
        let mut o = grid.to_f64_vec();
        a.sort_by(f64::total_cmp);
        o.sort_by(f64::total_cmp);
        prop_assert_eq!(a, o);
    }
}

#[test]
fn zero_high_res_values_leave_low_res_tokens() {
    let cfg = small();
    let (mut ps, p) = build(cfg, Toggles::default());
    perturb(&mut ps, 5);
    for id in [p.fuse.ln_kv.beta, p.fuse.v.b.unwrap(), p.fuse.o.b.unwrap()] {
        *ps.get_mut(id) = Tensor::zeros(ps.get(id).shape());
    }
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, false);
    let f_lr = g.constant(randn(&[2, cfg.tokens(), cfg.d], 1));
    let grid = g.constant(Tensor::zeros(&[2, cfg.hr_grid(), cfg.hr_grid(), cfg.d]));
    let f_dr = p.fuse_dual(&mut g, &bound, f_lr, grid).unwrap();
    assert!(g.value(f_dr).max_abs_diff(g.value(f_lr)) < 1e-12);
}

#[test]
fn fusion_attends_only_within_its_group() {
    let cfg = small();
    let (mut ps, p) = build(cfg, Toggles::default());
    perturb(&mut ps, 6);
    let (b, n, d, s) = (2, cfg.tokens(), cfg.d, cfg.hr_grid());
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, false);
    let f_lr = g.constant(randn(&[b, n, d], 1));
    let grid = g.leaf(randn(&[b, s, s, d], 2), true);
    let (f_dr, att) = p.fuse.forward(&mut g, &bound, f_lr, grid).unwrap();

    let probs = g.attention_probs(att).unwrap();
    let m2 = cfg.factor * cfg.factor;
    assert_eq!(probs.len(), b * n * cfg.heads * m2);
    for row in probs.chunks(m2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    // Gradient of one output token reaches exactly its own M x M block.
    let (bb, gi, gj) = (1, 2, 1);
    let tok = gi * cfg.grid() + gj;
    let mut sel = Tensor::zeros(&[b, n, d]);
    for k in 0..d {
        sel.data_mut()[(bb * n + tok) * d + k] = 1.0;
    }
    let sel = g.constant(sel);
    let y = g.mul(f_dr, sel);
    let y = g.sum_all(y);
    let grads = g.backward(y);
    let gg = grads.get(grid).unwrap();
    for bi in 0..b {
        for i in 0..s {
            for j in 0..s {
                let at = ((bi * s + i) * s + j) * d;
                let nz = gg.data()[at..at + d].iter().any(|&v| v != 0.0);
                let own = bi == bb && i / cfg.factor == gi && j / cfg.factor == gj;
                assert_eq!(nz, own, "cell ({bi}, {i}, {j})");
            }
        }
    }
}

#[test]
fn mask_branch_reuses_low_res_weights() {
    let (mut ps, p) = build(small(), Toggles::default());
    assert_eq!(p.mask_encoder_params(), p.shared_params());
    let before = ps.checksum(&p.shared_params());
    assert_eq!(before, ps.checksum(&p.mask_encoder_params()));
    perturb(&mut ps, 3);
    assert_ne!(before, ps.checksum(&p.shared_params()));
    assert_eq!(ps.checksum(&p.shared_params()), ps.checksum(&p.mask_encoder_params()));
    let names: Vec<&str> = p.shared_params().iter().map(|&id| ps.name(id)).collect();
    assert!(names.iter().all(|n| n.starts_with("perception.low.")));
}

#[test]
fn injection_is_identity_at_init() {
    let cfg = small();
    let (ps, p) = build(cfg, Toggles::default());
    let [lr, hr, mask] = inputs(&cfg, 2);
    let mut g = Graph::new();
    let bound = ps.bind(&mut g, false);
    let (lr, hr, mask) = (g.constant(lr), g.constant(hr), g.constant(mask));
    let out = p.forward(&mut g, &bound, lr, hr, mask).unwrap();
    assert_eq!(g.value(out.f_sem), g.value(out.f_dr));
    assert_eq!(g.value(out.f_dr), g.value(out.f_lr.unwrap()));
    assert_eq!(g.shape(out.f_mask), &[2, cfg.tokens(), cfg.d]);
}

#[test]
fn injection_ignores_mask_token_order() {
    let cfg = small();
    let (mut ps, p) = build(cfg, Toggles::default());
    perturb(&mut ps, 8);
    let (b, n, d) = (2, cfg.tokens(), cfg.d);
    let f_dr = randn(&[b, n, d], 1);
    let f_mask = randn(&[b, n, d], 2);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
    let mut perm = Vec::with_capacity(f_mask.numel());
    for bi in 0..b {
        for &k in &order {
            let at = (bi * n + k) * d;
            perm.extend_from_slice(&f_mask.data()[at..at + d]);
        }
    }
    let perm = Tensor::new(&[b, n, d], perm).unwrap();
    let run = |m: &Tensor<f64>| {
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let (x, m) = (g.constant(f_dr.clone()), g.constant(m.clone()));
        let y = p.inject_semantics(&mut g, &bound, x, m).unwrap();
        g.value(y).clone()
    };
    assert!(run(&f_mask).max_abs_diff(&run(&perm)) < 1e-12);
}

#[test]
fn toggles_route_streams() {
    let cfg = small();
    let [lr, hr, mask] = inputs(&cfg, 1);
    let run = |t: Toggles| {
        let (mut ps, p) = build(cfg, t);
        perturb(&mut ps, 2);
        let mut g = Graph::new();
        let bound = ps.bind(&mut g, false);
        let (a, b, c) = (g.constant(lr.clone()), g.constant(hr.clone()), g.constant(mask.clone()));
        let out = p.forward(&mut g, &bound, a, b, c).unwrap();
        (g.value(out.f_dr).clone(), out.f_lr.map(|v| g.value(v).clone()), g.value(out.f_sem).clone())
    };
    let (dr, lr_tok, _) = run(Toggles { high_res: false, ..Default::default() });
    assert_eq!(dr, lr_tok.unwrap());
    let (dr, lr_tok, _) = run(Toggles { low_res: false, ..Default::default() });
    assert!(lr_tok.is_none());
    assert_eq!(dr.shape(), &[1, cfg.tokens(), cfg.d]);
    let (_, _, full) = run(Toggles::default());
    let (_, _, blind) = run(Toggles { semantic_mask: false, ..Default::default() });
    assert!(full.max_abs_diff(&blind) > 1e-6);
    let none = Toggles { low_res: false, high_res: false, ..Default::default() };
    assert!(none.validate().is_err());
    assert!(Toggles { mask_only: true, ..none }.validate().is_ok());
    assert!(Toggles { mask_only: true, semantic_mask: false, ..none }.validate().is_err());
}

#[test]
fn perception_gradients_match_finite_differences() {
    let cfg = PerceptionConfig {
        lr_side: 4,
        factor: 2,
        patch: 2,
        d: 4,
        heads: 2,
        lr_blocks: 1,
        conv_widths: [2, 2, 2],
        inject_blocks: 1,
    };
    let (mut ps, p) = build(cfg, Toggles::default());
    perturb(&mut ps, 9);
    let [lr, hr, mask] = inputs(&cfg, 1);
    let mut all = vec![lr, hr, mask];
    all.extend(ps.iter().map(|(_, _, t)| t.clone()));
    let r = grad_check(
        |g, v| {
            let bound = Bound::from_vars(v[3..].to_vec());
            Ok(p.forward(g, &bound, v[0], v[1], v[2])?.f_sem)
        },
        &all,
        1e-4,
        1e-3,
        Some(6),
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn batch_rasters_stacks() {
    let a = Tensor::<f32>::full(&[4, 4, 3], 1.0);
    let b = Tensor::<f32>::full(&[4, 4, 3], 2.0);
    let t: Tensor<f64> = batch_rasters(&[&a, &b]).unwrap();
    assert_eq!(t.shape(), &[2, 4, 4, 3]);
    assert_eq!(t.data()[48], 2.0);
}
