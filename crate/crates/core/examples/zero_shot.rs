//! Zero-shot protocol checks: a Clean-only training manifest, disjoint seeds,
//! and shifted targets that the mask still covers.

use dualdiff::bench::{check_zero_shot, mask_coverage, EvalProtocol};
use dualdiff::pipeline::TrainConfig;
use dualdiff::simenv::dataset::{generate, DatasetSpec};
use dualdiff::simenv::{reset_shifted, DistractionLevel, Mixture, ObjectShift};

fn main() -> dualdiff::Result<()> {
    let cfg = TrainConfig::default();
    let spec = DatasetSpec {
        episodes: 12,
        mixture: Mixture::clean_only(),
        task: cfg.data.task,
        seed: 0,
        raster: cfg.raster(),
        horizon: cfg.data.horizon,
    };
    let (manifest, _) = generate(&spec)?;
    for shift in [ObjectShift::None, ObjectShift::Shape, ObjectShift::Size, ObjectShift::Color] {
        let protocol = EvalProtocol {
            shift,
            train_clean_only: true,
            ..EvalProtocol::from_config(&cfg)
        };
        let notes = check_zero_shot(&protocol, &manifest, cfg.raster())?;
        let scene = reset_shifted(protocol.episode_seeds(0)[0], DistractionLevel::Severe, cfg.data.task, shift);
        let cover = mask_coverage(&scene, cfg.raster())?;
        println!("{:<5} \"{}\" mask mass per relevant object {:?}", shift.name(), scene.instruction, cover);
        for n in notes {
            println!("      {n}");
        }
    }
    let mixed = generate(&DatasetSpec {
        mixture: Mixture::default(),
        ..spec
    })?
    .0;
    let protocol = EvalProtocol {
        train_clean_only: true,
        ..EvalProtocol::from_config(&cfg)
    };
    if let Err(e) = check_zero_shot(&protocol, &mixed, cfg.raster()) {
        println!("mixed training set refused: {e}");
    }
    Ok(())
}
