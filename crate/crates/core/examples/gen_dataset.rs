//! Generate a small demonstration dataset, reload it and replay every episode.

use dualdiff::simenv::dataset::{generate_dataset, load_dataset, replay, DatasetSpec};
use dualdiff::simenv::{Mixture, RasterSpec, TaskId, HORIZON_CAP};

fn main() -> dualdiff::Result<()> {
    let dir = tempfile::tempdir()?;
    let spec = DatasetSpec {
        episodes: 10,
        mixture: Mixture::default(),
        task: TaskId::Place,
        seed: 3,
        raster: RasterSpec { lr_side: 16, factor: 2 },
        horizon: HORIZON_CAP,
    };
    let m = generate_dataset(&spec, dir.path())?;
    println!(
        "{} episodes: clean {} mild {} severe {}",
        m.episode_count, m.mixture.clean, m.mixture.mild, m.mixture.severe
    );
    let (_, episodes) = load_dataset(dir.path())?;
    for ep in &episodes {
        println!(
            "seed {:>3} {:<6} {:>2} steps  replays: {}  \"{}\"",
            ep.seed,
            ep.level.name(),
            ep.action.shape()[0],
            replay(ep)?,
            ep.instruction
        );
    }
    Ok(())
}
