//! Noise schedule, preconditioning, training losses and samplers.

pub mod gaussian;
pub mod loss;
pub mod sampler;
pub mod schedule;

pub use gaussian::Gaussian;
pub use loss::{
    ctm_loss, denoise_graph, draw_times, dsm_loss, huber, joint_loss, jump_graph, trajectory_pair, GraphDenoiser,
    LossWeights, TrajectoryPair,
};
pub use sampler::{
    heun_step, initial_noise, pf_ode_rhs, precondition, sample_ctm, sample_ddim, sample_ddpm, sample_edm_heun,
    Counted, Denoiser, Strategy, TrajectoryMap,
};
pub use schedule::NoiseSchedule;
