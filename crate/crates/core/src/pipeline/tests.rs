use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{decode, encode};
use super::train::{zero_init_loss, CsvLog};
use super::*;
use crate::actionhead::HeadConfig;
use crate::diffusion::Strategy;
use crate::error::Error;
use crate::perception::PerceptionConfig;
use crate::simenv::dataset::{generate, DatasetSpec, EVAL_SEED_BASE};
use crate::simenv::scene::ObjectShift;
use crate::simenv::{reset, DistractionLevel, TaskId};

fn tiny() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.perception = PerceptionConfig {
        lr_side: 8,
        factor: 2,
        patch: 2,
        d: 8,
        heads: 2,
        lr_blocks: 1,
        conv_widths: [4, 4, 4],
        inject_blocks: 1,
    };
    c.head = HeadConfig {
        horizon: 4,
        blocks: 1,
        d: 8,
        heads: 2,
        ..HeadConfig::default()
    };
    c.data.episodes = 4;
    c.teacher.batch = 4;
    c.teacher.steps = 10;
    c.student.batch = 4;
    c.student.steps = 5;
    c.student.grid_steps = 6;
    c.eval.replan = 2;
    c
}

fn tiny_data(cfg: &TrainConfig) -> TrainData {
    let spec = DatasetSpec {
        episodes: cfg.data.episodes,
        mixture: cfg.data.mixture.clone(),
        task: cfg.data.task,
        seed: cfg.data.seed,
        raster: cfg.raster(),
        horizon: cfg.data.horizon,
    };
    let (_, eps) = generate(&spec).unwrap();
    TrainData::new(eps, cfg.raster(), cfg.head.horizon, cfg.schedule.sigma_data).unwrap()
}

#[test]
fn empty_document_gives_defaults() {
    let c = TrainConfig::from_toml("", &[]).unwrap();
    assert_eq!(c, TrainConfig::default());
    let again = TrainConfig::from_toml(&c.to_toml(), &[]).unwrap();
    assert_eq!(again, c);
    assert_eq!(c.hash(), again.hash());
    assert_eq!(c.hash().len(), 12);
}

#[test]
fn unknown_keys_are_named() {
    match TrainConfig::from_toml("[teacher]\nstepz = 3\n", &[]) {
        Err(Error::UnknownKey(k)) => assert_eq!(k, "stepz"),
        other => panic!("{other:?}"),
    }
    match TrainConfig::from_toml("", &["student.decay=0.5".into()]) {
        Err(Error::UnknownKey(k)) => assert_eq!(k, "student.decay"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(TrainConfig::from_toml("", &["noequals".into()]), Err(Error::Config(_))));
}

#[test]
fn overrides_beat_the_file() {
    let text = "[teacher]\nsteps = 5\nbatch = 3\n";
    let c = TrainConfig::from_toml(text, &["teacher.steps=7".into(), "data.task=pick".into()]).unwrap();
    assert_eq!(c.teacher.steps, 7);
    assert_eq!(c.teacher.batch, 3);
    assert_eq!(c.data.task, TaskId::Pick);
    assert_ne!(c.hash(), TrainConfig::default().hash());
}

#[test]
fn validation_catches_inconsistent_widths() {
    let mut c = tiny();
    c.head.d = 16;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = tiny();
    c.eval.replan = 5;
    assert!(c.validate().is_err());
    let text = "[toggles]\nlow_res = false\nhigh_res = false\n";
    assert!(TrainConfig::from_toml(text, &[]).is_err());
}

#[test]
fn chunks_pad_with_motionless_copies() {
    let cfg = tiny();
    let data = tiny_data(&cfg);
    let ep = &data.episodes[0];
    let last = ep.len() - 1;
    let c = data.chunk(0, last);
    assert_eq!(c.len(), 4 * 3);
    let a = data.stats.denormalize([c[3], c[4], c[5]]);
    assert!(a[0].abs() < 1e-6 && a[1].abs() < 1e-6);
    assert!((a[2] - ep.action_at(last)[2]).abs() < 1e-6);
    let b = data.batch(&[0, 1]).unwrap();
    assert_eq!(b.o_lr.shape(), &[2, 8, 8, 3]);
    assert_eq!(b.o_hr.shape(), &[2, 16, 16, 3]);
    assert_eq!(b.a0.shape(), &[2, 4, 3]);
    assert!(b.mask.data().iter().any(|&v| v > 0.0));
}

#[test]
fn first_step_loss_is_the_skip_only_loss() {
    let cfg = tiny();
    let data = tiny_data(&cfg);
    let tr = TeacherTrainer::new(&cfg, &data).unwrap();
    let batch = data.batch(&[0, 3, 5, 7]).unwrap();
    let got = tr.eval_loss(&batch, 42).unwrap();
    let want = zero_init_loss(&cfg, &batch, 42).unwrap();
    assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
}

#[test]
fn teacher_training_is_deterministic() {
    let cfg = tiny();
    let data = tiny_data(&cfg);
    let run = || {
        let mut log = CsvLog::memory();
        let p = train_teacher(&cfg, &data, &mut log).unwrap();
        (log.rows.iter().map(|r| (r.dsm, r.grad_norm)).collect::<Vec<_>>(), encode(&p))
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert_eq!(a.len(), cfg.teacher.steps);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = tiny();
    let data = tiny_data(&cfg);
    let mut log = CsvLog::memory();
    let teacher = train_teacher(&cfg, &data, &mut log).unwrap();
    let student = distill_student(&teacher, &data, &mut log).unwrap();
    let batch = data.batch(&[1, 2]).unwrap();
    for p in [&teacher, &student] {
        let bytes = encode(p);
        let q = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(encode(&q), bytes);
        assert_eq!(q.step, p.step);
        assert_eq!(q.role, p.role);
        assert_eq!(p.perceive(&batch).unwrap(), q.perceive(&batch).unwrap());
        let f = p.perceive(&batch).unwrap();
        let x = crate::nncore::Tensor::<f32>::randn(&[2, 4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let a = p.frozen(&p.store, f.clone(), batch.proprio.clone());
        let b = q.frozen(&q.store, f, batch.proprio.clone());
        use crate::diffusion::Denoiser;
        assert_eq!(a.denoise(&x, 1.3).unwrap(), b.denoise(&x, 1.3).unwrap());
    }
    let bytes = encode(&student);
    assert!(student.store.ema().is_some());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad, Path::new("x")), Err(Error::Format { .. })));
    assert!(decode(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode(&extra, Path::new("x")).is_err());
}

#[test]
fn frozen_target_with_unit_decay() {
    let mut cfg = tiny();
    cfg.student.ema_decay = 1.0;
    let data = tiny_data(&cfg);
    let mut log = CsvLog::memory();
    let teacher = train_teacher(&cfg, &data, &mut log).unwrap();
    let mut d = Distiller::new(&teacher, &data).unwrap();
    let before = d.student.store.ema().unwrap().to_vec();
    for _ in 0..3 {
        d.step(&data).unwrap();
    }
    assert_eq!(d.student.store.ema().unwrap(), &before[..]);
    // The online student did move.
    let ids = d.student.head_ids();
    let moved = ids.iter().any(|id| d.student.store.get(*id) != &before[id.0]);
    assert!(moved);
    // Perception stays frozen by default.
    for id in d.student.perception_ids() {
        assert_eq!(d.student.store.get(id), teacher.store.get(id));
    }
}

#[test]
fn zero_consistency_weight_is_score_matching() {
    let mut cfg = tiny();
    cfg.loss.alpha = 0.0;
    let data = tiny_data(&cfg);
    let mut log = CsvLog::memory();
    let teacher = train_teacher(&cfg, &data, &mut log).unwrap();
    let mut log = CsvLog::memory();
    distill_student(&teacher, &data, &mut log).unwrap();
    for r in &log.rows {
        assert_eq!(r.total, r.dsm);
        assert!(r.ctm >= 0.0);
    }
}

#[test]
fn unfrozen_perception_trains_too() {
    let mut cfg = tiny();
    cfg.student.freeze_perception = false;
    cfg.student.steps = 2;
    let data = tiny_data(&cfg);
    let mut log = CsvLog::memory();
    let teacher = train_teacher(&cfg, &data, &mut log).unwrap();
    let student = distill_student(&teacher, &data, &mut log).unwrap();
    let moved = student
        .perception_ids()
        .iter()
        .any(|&id| student.store.get(id) != teacher.store.get(id));
    assert!(moved);
}

#[test]
fn agent_contracts() {
    let cfg = tiny();
    let data = tiny_data(&cfg);
    let mut log = CsvLog::memory();
    let teacher = train_teacher(&cfg, &data, &mut log).unwrap();
    assert!(matches!(Agent::new(&teacher, Strategy::Ctm, 1, 0), Err(Error::Protocol(_))));
    let student = distill_student(&teacher, &data, &mut log).unwrap();
    let scene = reset(EVAL_SEED_BASE + 3, DistractionLevel::Mild, TaskId::Place);
    let mut agent = Agent::new(&student, Strategy::Ctm, 1, 0).unwrap();
    let chunk = agent.act(&[&scene]).unwrap();
    assert_eq!(agent.forward_calls, 1);
    assert_eq!(chunk.len(), 1);
    assert_eq!(chunk[0].len(), cfg.head.horizon);
    for s in [Strategy::Ddim, Strategy::Edm] {
        let mut a = Agent::new(&teacher, s, 4, 9).unwrap();
        let mut b = Agent::new(&teacher, s, 4, 9).unwrap();
        assert_eq!(a.act(&[&scene]).unwrap(), b.act(&[&scene]).unwrap());
        assert_eq!(a.forward_calls, s.forward_count(4));
    }
    let mut a = Agent::new(&teacher, Strategy::Edm, 2, 0).unwrap();
    assert!(matches!(
        a.act_with(&[&scene], &["juggle the plates"]),
        Err(Error::Unresolvable(_))
    ));
}

#[test]
fn expert_and_random_baselines() {
    let seeds: Vec<u64> = (0..10).map(|i| EVAL_SEED_BASE + i).collect();
    for level in DistractionLevel::ALL {
        let spec = RolloutSpec {
            level,
            task: TaskId::Place,
            shift: ObjectShift::None,
            horizon_cap: 60,
            replan: 4,
        };
        let r = rollout_batch(&mut ExpertController, &seeds, spec).unwrap();
        assert!(r.iter().all(|x| x.success), "{level:?}");
        let mut rnd = RandomController(ChaCha8Rng::seed_from_u64(1));
        let r = rollout_batch(&mut rnd, &seeds, spec).unwrap();
        assert!(r.iter().filter(|x| x.success).count() <= 2);
        assert!(r.iter().all(|x| x.steps <= 60));
    }
}
