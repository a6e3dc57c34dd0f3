//! Sampling and evaluation on top of a prepared corpus.

use crate::canet::{FeaturizerCapacity, ToyFeaturizer};
use crate::data::{tokens_to_latent, PreparedCorpus};
use crate::diffusion::{ddim_sample, DiffusionError, GuidanceParams, NoiseSchedule, SampleReport};
use crate::metrics::{frechet_distance, psnr, similarity_stats, ssim, FrechetStats, MetricError, NearestCentroid};
use crate::model::{GuidedModel, Xmdpt};
use crate::tensor::{Bindings, Graph, ParamStore, TensorError};
use crate::toy_world::{Image, PairRef, Split, ToyCodec};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
}

/// Sampler settings for one generation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSettings {
    pub steps: usize,
    pub guidance: GuidanceParams,
    pub seed: u64,
}

pub struct Generated {
    pub pair: PairRef,
    pub image: Image,
    pub report: SampleReport<f32>,
}

/// Initial-noise seed for one pair, so that a pair's sample does not depend
/// on which other pairs are generated alongside it.
pub fn pair_seed(seed: u64, pair: PairRef) -> u64 {
    let mix = (pair.identity as u64) << 32 | (pair.view as u64) << 16 | pair.pose as u64;
    seed ^ mix.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn generate(
    model: &Xmdpt,
    store: &ParamStore<f32>,
    data: &PreparedCorpus,
    codec: &ToyCodec,
    pair: PairRef,
    sched: &NoiseSchedule,
    settings: &SampleSettings,
) -> Result<Generated, PipelineError> {
    let guided = GuidedModel::new(model, store, &data.inputs(pair))?;
    let shape = [model.config.tokens(), model.config.patch_dim()];
    let report = ddim_sample(&guided, &shape, settings.steps, sched, &settings.guidance, pair_seed(settings.seed, pair))?;
    let latent = tokens_to_latent(&report.sample, data.patch)?;
    let image = codec.decode(&latent)?;
    Ok(Generated { pair, image, report })
}

/// Mean image-quality and identity scores of generated targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationScores {
    pub count: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub toy_fid: f64,
    /// Fraction of samples whose nearest identity centroid is the source
    /// identity.
    pub identity_accuracy: f64,
}

fn embeddings(net: &ToyFeaturizer, images: &[&Image]) -> Result<Vec<Vec<f64>>, TensorError> {
    images.iter().map(|img| Ok(net.embedding(img)?.into_iter().map(f64::from).collect())).collect()
}

/// Scores `(pair, image)` results against the ground-truth targets.
/// Identity centroids come from every ground-truth image of the split's
/// identities, embedded with the large featurizer.
pub fn score(data: &PreparedCorpus, split: Split, results: &[(PairRef, Image)]) -> Result<GenerationScores, PipelineError> {
    if results.is_empty() {
        return Err(PipelineError::EmptySplit(split.as_str()));
    }
    let corpus = &data.corpus;
    let net = ToyFeaturizer::new(FeaturizerCapacity::Large);
    let mut labelled = vec![];
    for r in corpus.identities_in(split) {
        for v in 0..r.views.len() {
            labelled.push((r.id, corpus.source_image(r.id, v)));
        }
        for p in 0..r.poses.len() {
            labelled.push((r.id, corpus.target_image(r.id, p)));
        }
    }
    let refs: Vec<&Image> = labelled.iter().map(|(_, img)| img).collect();
    let centroids = NearestCentroid::fit(
        &labelled.iter().map(|(id, _)| *id).zip(embeddings(&net, &refs)?).collect::<Vec<_>>(),
    )?;

    let truth: Vec<Image> = results.iter().map(|(pair, _)| corpus.target_image(pair.identity, pair.pose)).collect();
    let generated: Vec<&Image> = results.iter().map(|(_, img)| img).collect();
    let gen_emb = embeddings(&net, &generated)?;
    let truth_emb = embeddings(&net, &truth.iter().collect::<Vec<_>>())?;

    let n = results.len() as f64;
    let (mut s, mut p, mut hits) = (0.0, 0.0, 0usize);
    for (((pair, img), gt), e) in results.iter().zip(&truth).zip(&gen_emb) {
        s += ssim(img, gt)?;
        p += psnr(img, gt)?;
        if centroids.predict(e) == pair.identity {
            hits += 1;
        }
    }
    let toy_fid = frechet_distance(&FrechetStats::from_samples(&gen_emb)?, &FrechetStats::from_samples(&truth_emb)?)?;
    Ok(GenerationScores { count: results.len(), ssim: s / n, psnr: p / n, toy_fid, identity_accuracy: hits as f64 / n })
}

/// Mean cosine similarity of `c` across views of one identity and across
/// identities, for every source view of `split` paired with the first pose.
pub fn condition_similarity(model: &Xmdpt, store: &ParamStore<f32>, data: &PreparedCorpus, split: Split) -> Result<(f64, f64), PipelineError> {
    let mut vectors = vec![];
    for r in data.corpus.identities_in(split) {
        for view in 0..r.views.len() {
            let pair = PairRef { identity: r.id, view, pose: 0 };
            let g = Graph::inference();
            let p = Bindings::new(&g, store);
            let c = model.condition(&p, &data.inputs(pair), crate::diffusion::Branch::Full)?.value();
            vectors.push((r.id, c.into_data()));
        }
    }
    if vectors.is_empty() {
        return Err(PipelineError::EmptySplit(split.as_str()));
    }
    Ok(similarity_stats(&vectors)?)
}
