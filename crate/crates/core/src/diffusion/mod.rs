//! Conditional diffusion imputation: schedule, context encoder, denoiser,
//! self-supervised loss and reverse-process sampling.

mod denoiser;
mod impute;
mod moe;
mod schedule;
mod selfmask;
mod train;

pub use denoiser::{condition_bundle, timestep_embedding, ConditionalDenoiser, EpsInput, EpsModel};
pub use impute::{impute, impute_all, reverse_chain};
pub use moe::{encode_observed_context, top_k_indices, ContextEncoding, MoEGate};
pub use schedule::DiffusionSchedule;
pub use selfmask::{make_self_mask, SelfMaskPlan};
pub use train::{diffusion_loss, draw_noise, LossReport, NoiseDraw};
