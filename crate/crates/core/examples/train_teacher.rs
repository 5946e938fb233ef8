//! Train a small teacher, save it, and check the checkpoint round trip.

use dualdiff::pipeline::checkpoint::{encode, load, save};
use dualdiff::pipeline::{train_teacher, CsvLog, TrainConfig, TrainData};
use dualdiff::simenv::dataset::{generate, DatasetSpec};

pub const SMALL: &str = r#"
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
steps = 200
batch = 16
lr = 1e-3
"#;

fn main() -> dualdiff::Result<()> {
    let cfg = TrainConfig::from_toml(SMALL, &[])?;
    let spec = DatasetSpec {
        episodes: cfg.data.episodes,
        mixture: cfg.data.mixture.clone(),
        task: cfg.data.task,
        seed: cfg.data.seed,
        raster: cfg.raster(),
        horizon: cfg.data.horizon,
    };
    let (_, episodes) = generate(&spec)?;
    let data = TrainData::new(episodes, cfg.raster(), cfg.head.horizon, cfg.schedule.sigma_data)?;
    let dir = tempfile::tempdir()?;
    let mut log = CsvLog::create(&dir.path().join("teacher_log.csv"))?;
    let teacher = train_teacher(&cfg, &data, &mut log)?;
    for r in log.rows.iter().step_by(25) {
        println!("step {:>4}  dsm {:.4}  grad {:.3}", r.step, r.dsm, r.grad_norm);
    }
    let path = dir.path().join("teacher.ckpt");
    save(&teacher, &path)?;
    let back = load(&path)?;
    println!(
        "checkpoint {} bytes, {} tensors, round trip exact: {}",
        std::fs::metadata(&path)?.len(),
        back.store.len(),
        encode(&back) == encode(&teacher)
    );
    Ok(())
}
