//! Desk-scale substrate: synthetic identities, latent codecs, the denoiser,
//! the identity embedders and the morphing-attack detector.

pub mod codec;
pub mod dataset;
pub mod denoiser;
pub mod embedder;
pub mod mad;

pub use codec::{AutoencoderConfig, IdentityCodec, LatentCodec, PatchAutoencoder};
pub use dataset::{generate_dataset, DatasetConfig, Jitter, SampleImage, Split, SyntheticIdentity, ToyDataset};
pub use denoiser::{DenoiserConfig, DenoiserModel, DenoiserTrainConfig, DenoiserTrainReport, MixedDenoiser};
pub use embedder::{train_embedder, ConvEmbedder, EmbedderConfig, EmbedderTrainReport, OracleEmbedder};
pub use mad::{train_mad_detector, MadConfig, MadDetector};
