//! Train and evaluate two ablation rows (full model and mask-ablated) at toy scale.

use dualdiff::bench::{ablation_run, AblationSpec, BenchReport, EvalProtocol};
use dualdiff::pipeline::{CsvLog, TrainConfig, TrainData};
use dualdiff::simenv::dataset::{generate, DatasetSpec};
use dualdiff::simenv::DistractionLevel;

fn main() -> dualdiff::Result<()> {
    let cfg = TrainConfig::from_toml(
        "[data]\nepisodes = 16\n[perception]\nlr_side = 8\npatch = 2\nd = 16\nheads = 2\nconv_widths = [4, 8, 16]\n\
         inject_blocks = 1\n[head]\nd = 16\nheads = 2\nblocks = 1\n[teacher]\nsteps = 150\nbatch = 16\n",
        &[],
    )?;
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
    let protocol = EvalProtocol {
        levels: vec![DistractionLevel::Clean, DistractionLevel::Severe],
        rollouts: 5,
        seeds: 1,
        ..EvalProtocol::from_config(&cfg)
    };
    let mut report = BenchReport::new("Ablation success rate", &cfg);
    for row in AblationSpec::table().into_iter().take(2) {
        println!("training {}", row.name());
        let (_, r) = ablation_run(&row, &cfg, &data, &protocol, &mut CsvLog::memory())?;
        report.extend(r);
    }
    print!("{}", report.to_markdown());
    Ok(())
}
