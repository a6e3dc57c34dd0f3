//! Procedural multi-view "people", their pose rasters, and a small learned
//! image codec that stands in for a pretrained latent autoencoder.

mod codec;
mod corpus;
pub mod ppm;
mod render;

pub use codec::{CodecTrainConfig, ToyCodec, DOWNSAMPLE, LATENT_CHANNELS, LATENT_SIDE};
pub use corpus::{parse_joints, random_pose, Corpus, CorpusConfig, IdentityRecord, PairRef, Split, ToySample};
pub use render::{
    extract_joints, render_person, render_pose, Appearance, Image, Pose, CANVAS, JOINTS, JOINT_COLORS, LIMB_COLORS,
    PALETTE, TEXTURES,
};

use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

impl ToyError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}
