//! Diffusion substrate: schedules, DDIM stepping, the backend contract and
//! the toy backends.

mod backend;
mod latent;
pub mod registry;
mod sampler;
mod schedule;
pub mod toy;

pub use backend::{
    decode_clip, encode_clip, Codec, Condition, DiffusionBackend, HookChain, NoHook, Site,
    SiteHook, TraceHook,
};
pub use latent::LatentClip;
pub use registry::{create_backend, PluginRegistry};
pub(crate) use sampler::check_sites;
pub use sampler::{
    ddim_invert_step, ddim_step, ddim_transfer, forward_noise, invert_on, invert_sequence,
    sample_on, sample_sequence, step_on, Injector,
};
pub use schedule::{NoiseSchedule, DEFAULT_INFERENCE_STEPS};
pub use toy::{BackendRole, ToyBackend};
