//! Schedule, autoencoder and denoiser that the guidance and inpainting code
//! attaches to.

pub mod autoencoder;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod prompt;
pub mod sampler;
pub mod schedule;
pub mod unet;

pub use autoencoder::{decode_latent, encode_image, init_autoencoder, round_trip};
pub use checkpoint::{tensor_hash, ModelCheckpoint};
pub use model::{Geometry, ImageTensor, LatentTensor, ModelConfig, DOWNSAMPLE_FACTOR, LATENT_CHANNELS, TEXT_DIM};
pub use prompt::{embed_prompt, TextEmbedding};
pub use sampler::{reverse_loop, sample_base};
pub use schedule::{add_noise, make_schedule, sample_step, sampling_timesteps, NoiseSchedule, SamplerMode, ScheduleConfig};
pub use unet::{denoiser_forward, init_base, Injected};
