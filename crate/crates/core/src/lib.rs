//! Guidance-weight schedulers for classifier-free guidance, plus a small,
//! fully deterministic diffusion lab for studying them: noise schedules,
//! DDPM/DDIM samplers, a conditional MLP denoiser trained from scratch,
//! synthetic datasets, Gaussian-fit metrics and an experiment harness.

pub mod cli;
pub mod data;
pub mod diffusion;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod sched;
pub mod xp;
