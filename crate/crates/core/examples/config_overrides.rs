//! Strict TOML configuration: file values, dotted overrides, unknown keys.

use dualdiff::pipeline::TrainConfig;
use dualdiff::Error;

fn main() -> dualdiff::Result<()> {
    let file = "seed = 3\n[teacher]\nsteps = 500\n[eval]\nsampler = \"ddim\"\n";
    let cfg = TrainConfig::from_toml(file, &["teacher.steps=800".into(), "student.ema_decay=0.99".into()])?;
    println!(
        "seed {} teacher steps {} sampler {} ema {}  hash {}",
        cfg.seed,
        cfg.teacher.steps,
        cfg.eval.sampler.name(),
        cfg.student.ema_decay,
        cfg.hash()
    );
    let compact = TrainConfig::compact();
    println!("compact preset hash {}", compact.hash());
    match TrainConfig::from_toml("[head]\ndepth = 4\n", &[]) {
        Err(Error::UnknownKey(k)) => println!("rejected unknown key `{k}`"),
        other => println!("unexpected: {other:?}"),
    }
    Ok(())
}
