//! Network definitions, parameter storage and checkpoints.

pub mod autoencoder;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod network;
pub mod params;

pub use autoencoder::Autoencoder;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelKind};
pub use classifier::{argmax, Classifier};
pub use config::{ConvStage, ModelConfig};
pub use network::{
    cross_convolve, DisentangleModel, DisentangledFeatures, FrameFeatures, MotionKernelSet, Which,
};
pub use params::{Groups, Parameters};
