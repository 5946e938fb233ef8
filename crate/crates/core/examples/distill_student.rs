//! Teacher training followed by consistency distillation; reports how close
//! the one-jump student lands to the multi-step teacher from shared noise.

use dualdiff::pipeline::train::fidelity;
use dualdiff::pipeline::{distill_student, train_teacher, CsvLog, TrainConfig, TrainData};
use dualdiff::simenv::dataset::{generate, DatasetSpec};
use dualdiff::simenv::Mixture;

const SMALL: &str = r#"
[data]
episodes = 20
[perception]
lr_side = 8
patch = 2
d = 16
heads = 2
conv_widths = [4, 8, 16]
inject_blocks = 1
[head]
d = 16
heads = 2
blocks = 1
[teacher]
steps = 300
batch = 16
[student]
steps = 300
batch = 16
lr = 3e-4
ema_decay = 0.99
"#;

fn main() -> dualdiff::Result<()> {
    let cfg = TrainConfig::from_toml(SMALL, &[])?;
    let spec = DatasetSpec {
        episodes: cfg.data.episodes,
        mixture: Mixture::default(),
        task: cfg.data.task,
        seed: cfg.data.seed,
        raster: cfg.raster(),
        horizon: cfg.data.horizon,
    };
    let (_, episodes) = generate(&spec)?;
    let data = TrainData::new(episodes, cfg.raster(), cfg.head.horizon, cfg.schedule.sigma_data)?;
    let teacher = train_teacher(&cfg, &data, &mut CsvLog::memory())?;
    let mut log = CsvLog::memory();
    let student = distill_student(&teacher, &data, &mut log)?;
    let last = log.rows.last().expect("student steps");
    println!("final student loss: dsm {:.4} ctm {:.4} total {:.4}", last.dsm, last.ctm, last.total);
    let idx: Vec<usize> = (0..data.len()).step_by(7).take(64).collect();
    let batch = data.batch(&idx)?;
    let mut gaps = fidelity(&teacher, &student, &batch, cfg.eval.steps, 5)?;
    gaps.sort_by(f64::total_cmp);
    let within = gaps.iter().filter(|&&g| g <= 0.1).count();
    println!(
        "rel. L2 to the {}-step teacher: median {:.3}, {}/{} within 0.1",
        cfg.eval.steps,
        gaps[gaps.len() / 2],
        within,
        gaps.len()
    );
    Ok(())
}
