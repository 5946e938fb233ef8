//! Per-call latency of perception and the action head under each sampler.

use dualdiff::bench::latency_bench;
use dualdiff::diffusion::Strategy;
use dualdiff::pipeline::{Policy, PolicyRole, TrainConfig};
use dualdiff::simenv::dataset::EVAL_SEED_BASE;
use dualdiff::simenv::{reset, DistractionLevel, TaskId};

fn main() -> dualdiff::Result<()> {
    // Latency depends on the architecture only, so untrained weights suffice.
    let cfg = TrainConfig::compact();
    let teacher = Policy::new(&cfg, PolicyRole::Teacher)?;
    let student = Policy::student_from(&teacher)?;
    let scene = reset(EVAL_SEED_BASE, DistractionLevel::Mild, TaskId::Place);
    let strategies = [(Strategy::Ddpm, 100), (Strategy::Ddim, 10), (Strategy::Edm, 18), (Strategy::Ctm, 1)];
    let report = latency_bench(&teacher, Some(&student), &strategies, &scene, 5, 50)?;
    print!("{}", report.to_markdown());
    Ok(())
}
