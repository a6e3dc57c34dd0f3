//! A corpus with every codec latent and featurizer output precomputed.

use crate::canet::{FeaturizerCapacity, ToyFeaturizer};
use crate::model::ConditionInputs;
use crate::nn::{patchify, unpatchify, TokenRole};
use crate::tensor::{Result, Tensor};
use crate::toy_world::{Corpus, Image, PairRef, Split, ToyCodec, LATENT_CHANNELS, LATENT_SIDE};

/// Latent ↔ patch-token conversion for the model's patch size.
pub fn latent_to_tokens(latent: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    Ok(patchify(latent, patch, TokenRole::NoisyTarget)?.into_tokens())
}

pub fn tokens_to_latent(tokens: &Tensor<f32>, patch: usize) -> Result<Tensor<f32>> {
    unpatchify(tokens, patch, LATENT_SIDE, LATENT_SIDE, LATENT_CHANNELS)
}

pub struct PreparedCorpus {
    pub corpus: Corpus,
    pub patch: usize,
    pub pose_capacity: FeaturizerCapacity,
    pub global_capacity: FeaturizerCapacity,
    /// `[identity][view]` source latents in token form.
    source_tokens: Vec<Vec<Tensor<f32>>>,
    /// `[identity][pose]` target latents in token form.
    target_tokens: Vec<Vec<Tensor<f32>>>,
    pose_features: Vec<Vec<Tensor<f32>>>,
    global_features: Vec<Vec<Tensor<f32>>>,
}

impl PreparedCorpus {
    pub fn new(
        corpus: Corpus,
        codec: &ToyCodec,
        patch: usize,
        pose_capacity: FeaturizerCapacity,
        global_capacity: FeaturizerCapacity,
    ) -> Result<Self> {
        let pose_net = ToyFeaturizer::new(pose_capacity);
        let global_net = ToyFeaturizer::new(global_capacity);
        let (mut source_tokens, mut target_tokens, mut pose_features, mut global_features) = (vec![], vec![], vec![], vec![]);
        for r in &corpus.identities {
            let views: Vec<Image> = (0..r.views.len()).map(|v| corpus.source_image(r.id, v)).collect();
            let targets: Vec<Image> = (0..r.poses.len()).map(|p| corpus.target_image(r.id, p)).collect();
            let tok = |latents: Vec<Tensor<f32>>| latents.iter().map(|z| latent_to_tokens(z, patch)).collect::<Result<Vec<_>>>();
            source_tokens.push(tok(codec.encode_batch(&views)?)?);
            target_tokens.push(tok(codec.encode_batch(&targets)?)?);
            global_features.push(views.iter().map(|v| global_net.features(v)).collect::<Result<Vec<_>>>()?);
            pose_features
                .push((0..r.poses.len()).map(|p| pose_net.features(&corpus.pose_image(r.id, p))).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self { corpus, patch, pose_capacity, global_capacity, source_tokens, target_tokens, pose_features, global_features })
    }

    pub fn pairs(&self, split: Split) -> Vec<PairRef> {
        self.corpus.pairs(split)
    }

    pub fn inputs(&self, pair: PairRef) -> ConditionInputs<f32> {
        ConditionInputs {
            source: self.source_tokens[pair.identity][pair.view].clone(),
            pose: self.pose_features[pair.identity][pair.pose].clone(),
            global: self.global_features[pair.identity][pair.view].clone(),
        }
    }

    /// Codec latent of the target image, token form.
    pub fn target(&self, pair: PairRef) -> &Tensor<f32> {
        &self.target_tokens[pair.identity][pair.pose]
    }
}
