//! Image quality metrics, a Fréchet distance over featurizer embeddings,
//! and the condition-vector similarity monitor.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::canet::view_similarity;
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("embedding dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooFew(usize),
    #[error("covariance contains non-finite values")]
    NonFinite,
    #[error("{0}")]
    Empty(String),
}

pub const SSIM_WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_shapes(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<(), MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// Mean SSIM over every fully contained 7×7 window of every channel, for
/// images `[H, W, C]` with values in `[0, 1]`.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let s = a.shape();
    if s.len() != 3 || s[0] < SSIM_WINDOW || s[1] < SSIM_WINDOW {
        return Err(MetricError::Shape(s.to_vec(), vec![SSIM_WINDOW, SSIM_WINDOW]));
    }
    let (h, w, ch) = (s[0], s[1], s[2]);
    let (c1, c2) = ((K1 * K1), (K2 * K2));
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for c in 0..ch {
        let px = |img: &Tensor<f32>, y: usize, x: usize| img.data()[(y * w + x) * ch + c] as f64;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + SSIM_WINDOW {
                    for x in x0..x0 + SSIM_WINDOW {
                        let (va, vb) = (px(a, y, x), px(b, y, x));
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa - n * ma * ma) / (n - 1.0);
                let vb = (sbb - n * mb * mb) / (n - 1.0);
                let cov = (sab - n * ma * mb) / (n - 1.0);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `10·log10(1 / MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64, MetricError> {
    check_shapes(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.numel().max(1) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Gaussian summary of a set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FrechetStats {
    /// Sample mean and unbiased covariance.
    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self, MetricError> {
        let n = samples.len();
        if n < 2 {
            return Err(MetricError::TooFew(n));
        }
        let d = samples[0].len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(MetricError::Dimension(d, bad.len()));
        }
        let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov, n })
    }
}

/// Symmetric positive semi-definite square root, clamping eigenvalues
/// below `1e-10` to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| if v < 1e-10 { 0.0 } else { v.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`.
pub fn frechet_distance(s1: &FrechetStats, s2: &FrechetStats) -> Result<f64, MetricError> {
    if s1.mean.len() != s2.mean.len() {
        return Err(MetricError::Dimension(s1.mean.len(), s2.mean.len()));
    }
    if s1.cov.iter().chain(s2.cov.iter()).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let diff = (&s1.mean - &s2.mean).norm_squared();
    let r1 = psd_sqrt(&s1.cov);
    let inner = &r1 * &s2.cov * &r1;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|&v| if v < 1e-10 { 0.0 } else { v.sqrt() }).sum();
    Ok((diff + s1.cov.trace() + s2.cov.trace() - 2.0 * tr_cross).max(0.0))
}

/// Mean cosine similarity between condition vectors of the same identity
/// (distinct views) and of different identities.
pub fn similarity_stats(vectors: &[(usize, Vec<f32>)]) -> Result<(f64, f64), MetricError> {
    let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let s = view_similarity(&vectors[i].1, &vectors[j].1).map_err(|e| MetricError::Empty(e.to_string()))?;
            if vectors[i].0 == vectors[j].0 {
                same += s;
                n_same += 1;
            } else {
                cross += s;
                n_cross += 1;
            }
        }
    }
    if n_same == 0 || n_cross == 0 {
        return Err(MetricError::Empty("need two views of one identity and at least two identities".into()));
    }
    Ok((same / n_same as f64, cross / n_cross as f64))
}

/// One row of the similarity series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityRow {
    pub step: u64,
    pub mean_same_id: f64,
    pub mean_cross_id: f64,
}

pub const SIMILARITY_HEADER: &str = "step,mean_same_id,mean_cross_id";

pub fn similarity_csv(rows: &[SimilarityRow]) -> String {
    let mut out = format!("{SIMILARITY_HEADER}\n");
    for r in rows {
        writeln!(out, "{},{:.6},{:.6}", r.step, r.mean_same_id, r.mean_cross_id).expect("writing to a String");
    }
    out
}

/// Classifies embeddings by the closest class mean (Euclidean).
#[derive(Clone, Debug)]
pub struct NearestCentroid {
    centroids: BTreeMap<usize, Vec<f64>>,
}

impl NearestCentroid {
    pub fn fit(samples: &[(usize, Vec<f64>)]) -> Result<Self, MetricError> {
        let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
        for (label, v) in samples {
            let e = sums.entry(*label).or_insert_with(|| (vec![0.0; v.len()], 0));
            if e.0.len() != v.len() {
                return Err(MetricError::Dimension(e.0.len(), v.len()));
            }
            e.0.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
        if sums.is_empty() {
            return Err(MetricError::Empty("no samples to fit".into()));
        }
        let centroids = sums.into_iter().map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect())).collect();
        Ok(Self { centroids })
    }

    pub fn predict(&self, v: &[f64]) -> usize {
        let dist = |c: &Vec<f64>| c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        *self
            .centroids
            .iter()
            .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
            .map(|(k, _)| k)
            .expect("at least one centroid")
    }
}
