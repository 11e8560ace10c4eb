//! Toy latent diffusion: schedule, DDIM stepping, the seeded denoiser,
//! attention capture and the inversion/edit pipeline.

pub mod cache;
pub mod ddim;
pub mod decode;
pub mod denoiser;
pub mod fixture;
mod latent;
pub mod pipeline;
pub mod schedule;

pub use cache::{AttentionCache, AttnKind, CacheKey, CacheRecord};
pub use ddim::{cfg_combine, ddim_invert_step, ddim_step};
pub use decode::decode_frames;
pub use denoiser::{AttentionControl, CacheBlend, DenoiserShape, ToyDenoiser};
pub use latent::LatentVideo;
pub use pipeline::{edit, invert, EditConfig, EditOutcome, EditRequest, Inversion, Prompts, Session};
pub use schedule::{forward_diffuse, NoiseSchedule, ScheduleParams};
