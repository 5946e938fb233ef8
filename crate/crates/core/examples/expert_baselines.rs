//! Scripted-expert and random-policy success rates under the evaluation protocol.

use dualdiff::bench::{success_matrix, EvalProtocol, Subject};
use dualdiff::pipeline::TrainConfig;

fn main() -> dualdiff::Result<()> {
    let cfg = TrainConfig::default();
    let protocol = EvalProtocol {
        rollouts: 10,
        ..EvalProtocol::from_config(&cfg)
    };
    let report = success_matrix(&[Subject::Expert, Subject::Random], &protocol, &cfg)?;
    print!("{}", report.to_markdown());
    Ok(())
}
