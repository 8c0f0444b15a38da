//! Flow-matching backbone (MMDiT then DiT layers), auxiliary control and edit
//! branches, the latent codec and checkpoints.

mod backbone;
mod blocks;
mod branch;
mod bundle;
mod codec;
mod config;
mod layers;

pub use backbone::{Backbone, Embedded, ForwardOutput, LayerHook, LayerInfo, LayerKind, TextBatch, NULL_TOKEN, PAD_TOKEN};
pub use blocks::{Block, DitBlock, MmditBlock};
pub use branch::{ActiveBranch, Branch, ControlBatch, PITCH_BINS};
pub use bundle::{BranchInput, Component, ModelBundle, ModelConfig, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use codec::{band_frequency, db_to_feature, feature_to_db, CodecConfig, LatentCodec, CODEC_BINS};
pub use config::{AdapterConfig, BackboneConfig, BranchArch, BranchConfig, ControlNetConfig, LoraConfig, DEFAULT_LABELS};
pub use layers::{timestep_embedding, Ctx, Init, Linear, LoraSet, ParamBuilder};

#[cfg(test)]
mod tests;
