//! Brain-conditioned pixel-space diffusion generator.

pub mod loss;
pub mod sample;
pub mod schedule;
pub mod unet;

pub use loss::{diffusion_loss, diffusion_loss_with, draw_noise, NoiseDraw};
pub use sample::{cfg_combine, ddim_loop, ddim_sample, ddim_sample_seeded, predict_eps, SamplerSettings};
pub use schedule::{
    bicubic_cdf, make_schedule, offset_noise, q_sample, sample_timestep_bicubic, NoiseSchedule, TimestepSampling,
};
pub use unet::{
    attach_lora, has_lora, init_unet, is_cross_attn_param, is_linear_param, is_lora_param, is_unet_param, unet_forward,
    UNetConfig, NULL_TOKENS,
};
