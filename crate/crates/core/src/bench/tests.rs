use super::*;
use crate::actionhead::HeadConfig;
use crate::perception::PerceptionConfig;
use crate::pipeline::distill_student;
use crate::simenv::dataset::{generate, DatasetSpec};
use crate::simenv::{reset, Mixture};

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
    c.teacher.steps = 3;
    c.teacher.batch = 4;
    c.student.steps = 2;
    c.student.batch = 4;
    c.student.grid_steps = 6;
    c.eval.replan = 2;
    c.eval.steps = 2;
    c
}

fn dataset(cfg: &TrainConfig, mixture: Mixture) -> (Manifest, TrainData) {
    let spec = DatasetSpec {
        episodes: cfg.data.episodes,
        mixture,
        task: cfg.data.task,
        seed: cfg.data.seed,
        raster: cfg.raster(),
        horizon: cfg.data.horizon,
    };
    let (m, eps) = generate(&spec).unwrap();
    let data = TrainData::new(eps, cfg.raster(), cfg.head.horizon, cfg.schedule.sigma_data).unwrap();
    (m, data)
}

fn small_protocol(cfg: &TrainConfig) -> EvalProtocol {
    EvalProtocol {
        rollouts: 4,
        seeds: 2,
        ..EvalProtocol::from_config(cfg)
    }
}

#[test]
fn expert_saturates_and_random_fails() {
    let cfg = TrainConfig::default();
    let protocol = EvalProtocol::from_config(&cfg);
    let report = success_matrix(&[Subject::Expert, Subject::Random], &protocol, &cfg).unwrap();
    for level in DistractionLevel::ALL {
        assert_eq!(report.success("expert", level), Some(1.0));
        let c = report.cell("random", level).unwrap();
        assert_eq!(c.trials(), 75);
        assert!(c.per_seed.iter().all(|&k| k <= 2), "{:?}", c.per_seed);
    }
}

#[test]
fn identical_protocols_give_identical_reports() {
    let cfg = tiny();
    let (_, data) = dataset(&cfg, Mixture::default());
    let teacher = train_teacher(&cfg, &data, &mut CsvLog::memory()).unwrap();
    let protocol = small_protocol(&cfg);
    let run = || {
        let subjects = [
            Subject::Random,
            Subject::Policy {
                name: "teacher".into(),
                policy: &teacher,
            },
        ];
        let r = success_matrix(&subjects, &protocol, &cfg).unwrap();
        (r.to_csv().unwrap(), r.to_markdown())
    };
    assert_eq!(run(), run());
}

#[test]
fn protocol_preconditions() {
    let cfg = tiny();
    let mut p = small_protocol(&cfg);
    p.rollouts = 0;
    assert!(matches!(p.validate(), Err(Error::Config(_))));
    let mut p = small_protocol(&cfg);
    p.seed_base = 5;
    assert!(matches!(p.validate(), Err(Error::Protocol(_))));
    let p = small_protocol(&cfg);
    assert_eq!(p.all_seeds().len(), 8);
    assert!(p.all_seeds().iter().all(|&s| s >= EVAL_SEED_BASE));
}

#[test]
fn task_mismatch_is_rejected() {
    let cfg = tiny();
    let (_, data) = dataset(&cfg, Mixture::default());
    let teacher = train_teacher(&cfg, &data, &mut CsvLog::memory()).unwrap();
    let mut p = small_protocol(&cfg);
    p.task = TaskId::Pick;
    let subjects = [Subject::Policy {
        name: "t".into(),
        policy: &teacher,
    }];
    assert!(matches!(success_matrix(&subjects, &p, &cfg), Err(Error::Protocol(_))));
}

#[test]
fn zero_shot_protocol_checks() {
    let cfg = tiny();
    let (mixed, _) = dataset(&cfg, Mixture::default());
    let (clean, _) = dataset(&cfg, Mixture::clean_only());
    let mut p = small_protocol(&cfg);
    p.train_clean_only = true;
    assert!(matches!(check_zero_shot(&p, &mixed, cfg.raster()), Err(Error::Protocol(_))));
    assert!(check_zero_shot(&p, &clean, cfg.raster()).is_ok());

    // Evaluation seeds overlapping the training seeds are refused.
    let mut overlap = small_protocol(&cfg);
    let mut m = clean.clone();
    m.episodes[0].seed = overlap.episode_seeds(0)[1];
    overlap.train_clean_only = true;
    assert!(check_zero_shot(&overlap, &m, cfg.raster()).is_err());

    // A training manifest that already contains a shifted color is refused.
    let mut p = small_protocol(&cfg);
    p.shift = ObjectShift::Color;
    assert!(check_zero_shot(&p, &clean, cfg.raster()).is_ok());
    let mut m = clean.clone();
    m.episodes[0].instruction = format!("place the {} block in the zone", UNSEEN_PALETTE[0].name);
    assert!(check_zero_shot(&p, &m, cfg.raster()).is_err());
}

#[test]
fn shifted_targets_stay_visible_to_the_mask() {
    let raster = TrainConfig::default().raster();
    for shift in [ObjectShift::Color, ObjectShift::Size, ObjectShift::Shape] {
        for seed in 0..40 {
            let scene = reset_shifted(EVAL_SEED_BASE + seed, DistractionLevel::Severe, TaskId::Place, shift);
            let cov = mask_coverage(&scene, raster).unwrap();
            assert_eq!(cov.len(), 2);
            assert!(cov.iter().all(|&(_, m)| m > 0.0), "{shift:?} seed {seed}");
        }
    }
}

#[test]
fn unshifted_zero_shot_is_the_success_matrix() {
    let cfg = TrainConfig::default();
    let mut cfg_small = cfg.clone();
    cfg_small.data.episodes = 3;
    let spec = DatasetSpec {
        episodes: 3,
        mixture: Mixture::clean_only(),
        task: cfg.data.task,
        seed: 0,
        raster: cfg.raster(),
        horizon: cfg.data.horizon,
    };
    let (m, _) = generate(&spec).unwrap();
    let p = EvalProtocol {
        rollouts: 5,
        seeds: 1,
        train_clean_only: true,
        ..EvalProtocol::from_config(&cfg)
    };
    let a = zero_shot_eval(&[Subject::Expert, Subject::Random], &p, &m, &cfg).unwrap();
    let b = success_matrix(&[Subject::Expert, Subject::Random], &p, &cfg).unwrap();
    assert_eq!(a.cells, b.cells);
}

#[test]
fn ablation_rows() {
    let rows = AblationSpec::table();
    let names: Vec<String> = rows.iter().map(AblationSpec::name).collect();
    assert_eq!(names[0], "low-res+high-res+multi-scale+mask");
    assert_eq!(names[1], "low-res+high-res+multi-scale");
    assert_eq!(names[5], "mask");
    assert!(rows.iter().all(|r| r.validate().is_ok()));
    let bad = AblationSpec {
        toggles: Toggles {
            low_res: false,
            high_res: false,
            ..Toggles::default()
        },
    };
    assert!(bad.validate().is_err());

    let cfg = tiny();
    let (_, data) = dataset(&cfg, Mixture::default());
    let p = EvalProtocol {
        levels: vec![DistractionLevel::Severe],
        ..small_protocol(&cfg)
    };
    let (policy, report) = ablation_run(&rows[5], &cfg, &data, &p, &mut CsvLog::memory()).unwrap();
    assert!(policy.cfg.toggles.mask_only);
    assert_eq!(report.cells.len(), 1);
    assert_eq!(report.cells[0].subject, "mask");
    assert_ne!(report.config_hash, cfg.hash());
    assert!(ablation_run(&bad, &cfg, &data, &p, &mut CsvLog::memory()).is_err());
}

#[test]
fn latency_counts_and_report_files() {
    let cfg = tiny();
    let (_, data) = dataset(&cfg, Mixture::default());
    let mut log = CsvLog::memory();
    let teacher = train_teacher(&cfg, &data, &mut log).unwrap();
    let student = distill_student(&teacher, &data, &mut log).unwrap();
    let scene = reset(EVAL_SEED_BASE, DistractionLevel::Mild, TaskId::Place);
    let strategies = [
        (Strategy::Ddpm, 100),
        (Strategy::Ddim, 10),
        (Strategy::Edm, 18),
        (Strategy::Ctm, 1),
    ];
    assert!(matches!(
        latency_bench(&teacher, None, &strategies, &scene, 1, 3),
        Err(Error::Protocol(_))
    ));
    let r = latency_bench(&teacher, Some(&student), &strategies, &scene, 2, 20).unwrap();
    let calls: Vec<usize> = r.latency.iter().map(|l| l.forward_calls).collect();
    assert_eq!(calls, [0, 1, 100, 10, 35, 1]);
    assert_eq!(r.forward_ratio(Strategy::Edm, Strategy::Ctm), Some(35.0));
    assert!(r.speedup(Strategy::Ddpm, Strategy::Ddim).unwrap() > 1.0);
    for l in &r.latency {
        assert!(l.p50_ms <= l.p95_ms && l.mean_ms > 0.0);
    }

    let dir = tempfile::tempdir().unwrap();
    let (csv, md) = r.write(dir.path(), "latency").unwrap();
    let hash = cfg.hash();
    assert!(csv.file_name().unwrap().to_str().unwrap().contains(&hash));
    let text = std::fs::read_to_string(&md).unwrap();
    assert!(text.contains("| action head | edm | 18 | 35 |"));
    let mut rd = csv::Reader::from_path(&csv).unwrap();
    assert_eq!(rd.records().count(), 6);
}

#[test]
fn nearest_rank_percentiles() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 0.5), 50.0);
    assert_eq!(percentile(&v, 0.95), 95.0);
    assert_eq!(percentile(&[3.0], 0.95), 3.0);
}

#[test]
fn fractions_out_of_range_are_rejected() {
    let mut r = BenchReport::new("x", &tiny());
    r.cells.push(Cell {
        subject: "s".into(),
        level: DistractionLevel::Clean,
        shift: ObjectShift::None,
        per_seed: vec![5],
        rollouts: 4,
    });
    assert!(r.validate().is_err());
    r.cells[0].per_seed = vec![3];
    assert!(r.validate().is_ok());
    assert!((r.cells[0].fraction() - 0.75).abs() < 1e-12);
}
