//! DDPM mathematics independent of any particular network: schedules, forward
//! corruption, the reverse chain and the diffusion losses. Data live in
//! `[−1, 1]`; batches are `[N, C, H, W]`.

mod loss;
mod process;
mod schedule;

pub use loss::{
    content_loss, diffusion_loss, diffusion_loss_with, noise_loss_norms, total_diffusion_loss, NoiseLossNorm,
};
pub use process::{
    estimate_x0, gaussian, p_sample, posterior_mean, posterior_mean_rules, posterior_mean_with, q_sample,
    q_sample_step, sample_loop, sample_timesteps, ClippedMean, DiffusionState, NoisePredictor, PosteriorMeanRule,
    PrintedMean, StandardMean,
};
pub use schedule::{make_linear_schedule, schedules, NoiseSchedule, ScheduleConfig, ScheduleFamily};
