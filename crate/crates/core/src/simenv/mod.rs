//! Deterministic 2D tabletop world: scenes, rendering, oracle masks, a
//! scripted expert, an instruction resolver and demonstration datasets.

pub mod dataset;
pub mod expert;
pub mod render;
pub mod resolver;
pub mod scene;

pub use dataset::{DatasetSpec, DemoEpisode, Manifest, Mixture};
pub use expert::{expert_action, run_expert, HORIZON_CAP};
pub use render::{render, render_mask, MaskProvider, Observation, OracleMask, RasterSpec};
pub use resolver::{KeywordResolver, Resolver};
pub use scene::{reset, reset_shifted, step, DistractionLevel, ObjectShift, Role, Scene, TaskId};
