pub mod checkpoint;
pub mod control_net;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod filters;
pub mod gradcheck;
pub mod mechanism;
pub mod nn;
pub mod seed;
pub mod selftest;
pub mod spectral;
pub mod tensor;
pub mod training;

pub use control_net::{
    forward_base, forward_controlled, init_params, loss_and_grads, time_embed, ModelConfig, ModelParams, Sample,
};
pub use data::{DatasetSpec, Image};
pub use diffusion::{ddim_sample, NoiseSchedule, SamplerConfig};
pub use error::{Error, Result};
pub use filters::{BandKind, BandMask};
pub use tensor::{Real, Shape, SpatialTensor, SpectralTensor};
pub use training::{Stage, TrainConfig, TrainReport};
