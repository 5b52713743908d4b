//! Domain-similarity measures: cosine over inception features, FID, SSIM,
//! and the hidden-state scenario study.

mod metrics;
mod report;

pub use metrics::{cosine, fid, mean_and_covariance, ssim, SSIM_WINDOW};
pub use report::{PairRow, ScenarioRow, SimilarityReport};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{forward_batch, frame_features, HiddenState, ImageSequence, Label, NetworkError, Parameters};
use crate::rng::rng_for;
use crate::synthdata::{Dataset, ScenarioSet};

pub const DEFAULT_PAIRS: usize = 500;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("zero-norm feature vector")]
    ZeroNorm,
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("covariance is not positive semi-definite after regularisation")]
    SingularCovariance,
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Inception,
    HiddenState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source: FeatureSource,
    pub model_checksum: String,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, source: FeatureSource, model_checksum: &str) -> Self {
        FeatureVector {
            values,
            source,
            model_checksum: model_checksum.to_string(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A frame reference: sequence and frame index.
pub type FrameRef<'a> = (&'a ImageSequence, usize);

/// Mean and spread of per-pair cosines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    pub mean: f64,
    pub std: f64,
    /// Pairs that contributed.
    pub pairs: usize,
    /// Pairs dropped because one side had a zero-norm feature vector.
    pub skipped: usize,
}

impl CosineSummary {
    /// `σ / μ`; `NaN` when the mean is zero.
    pub fn normalized_std(&self) -> f64 {
        self.std / self.mean
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

const FEATURE_CHUNK: usize = 64;

/// Inception features of each frame, as [`FeatureVector`]s.
pub fn inception_vectors(params: &Parameters, frames: &[FrameRef<'_>]) -> Result<Vec<FeatureVector>, SimilarityError> {
    let checksum = params.checksum();
    let chunks: Vec<Vec<FeatureVector>> = frames
        .par_chunks(FEATURE_CHUNK)
        .map(|chunk| {
            let f = frame_features(params, chunk)?;
            let d = f.shape()[1];
            Ok(f.data()
                .chunks(d)
                .map(|row| FeatureVector::new(row.to_vec(), FeatureSource::Inception, &checksum))
                .collect())
        })
        .collect::<Result<_, SimilarityError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Cosine over explicit frame pairs; zero-norm pairs are skipped and counted.
pub fn paired_cosine(
    params: &Parameters,
    pairs: &[(FrameRef<'_>, FrameRef<'_>)],
) -> Result<CosineSummary, SimilarityError> {
    let left: Vec<FrameRef<'_>> = pairs.iter().map(|p| p.0).collect();
    let right: Vec<FrameRef<'_>> = pairs.iter().map(|p| p.1).collect();
    let a = inception_vectors(params, &left)?;
    let b = inception_vectors(params, &right)?;
    let mut values = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (x, y) in a.iter().zip(&b) {
        match cosine(x, y) {
            Ok(c) => values.push(c),
            Err(SimilarityError::ZeroNorm) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let (mean, std) = mean_std(&values);
    Ok(CosineSummary {
        mean,
        std,
        pairs: values.len(),
        skipped,
    })
}

/// Uniform frame draws with replacement.
pub fn sample_frames<'a>(data: &'a Dataset, n: usize, rng: &mut crate::rng::Rng) -> Vec<FrameRef<'a>> {
    (0..n)
        .map(|_| {
            let s = &data.sequences[rng.random_range(0..data.len())];
            (s, rng.random_range(0..s.frames.t))
        })
        .collect()
}

/// Mean cosine between inception features of `n_pairs` independently drawn
/// `(frame of a, frame of b)` pairs. Deterministic in `seed`.
pub fn dataset_similarity(
    params: &Parameters,
    a: &Dataset,
    b: &Dataset,
    n_pairs: usize,
    seed: u64,
) -> Result<CosineSummary, SimilarityError> {
    if a.is_empty() || b.is_empty() {
        return Err(SimilarityError::EmptyDataset);
    }
    let mut rng = rng_for(seed, "similarity/pairs");
    let fa = sample_frames(a, n_pairs, &mut rng);
    let fb = sample_frames(b, n_pairs, &mut rng);
    let pairs: Vec<_> = fa.into_iter().zip(fb).collect();
    paired_cosine(params, &pairs)
}

/// Mean SSIM over `n_pairs` drawn frame pairs (luminance).
pub fn dataset_ssim(a: &Dataset, b: &Dataset, n_pairs: usize, seed: u64) -> Result<(f64, f64), SimilarityError> {
    if a.is_empty() || b.is_empty() {
        return Err(SimilarityError::EmptyDataset);
    }
    let mut rng = rng_for(seed, "similarity/ssim");
    let fa = sample_frames(a, n_pairs, &mut rng);
    let fb = sample_frames(b, n_pairs, &mut rng);
    let values = fa
        .par_iter()
        .zip(fb.par_iter())
        .map(|((sa, ta), (sb, tb))| {
            let (x, y) = (sa.frames.luminance(*ta), sb.frames.luminance(*tb));
            if (sa.frames.h, sa.frames.w) != (sb.frames.h, sb.frames.w) {
                return Err(SimilarityError::Shape("frames differ in size".into()));
            }
            ssim(&x, &y, sa.frames.h, sa.frames.w)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_std(&values))
}

/// FID between inception features of `n` frames drawn from each dataset.
pub fn dataset_fid(params: &Parameters, a: &Dataset, b: &Dataset, n: usize, seed: u64) -> Result<f64, SimilarityError> {
    if a.is_empty() || b.is_empty() {
        return Err(SimilarityError::EmptyDataset);
    }
    let mut rng = rng_for(seed, "similarity/fid");
    let fa = sample_frames(a, n, &mut rng);
    let fb = sample_frames(b, n, &mut rng);
    fid(&inception_vectors(params, &fa)?, &inception_vectors(params, &fb)?)
}

/// Final top-layer `h` and collision confidence of each sequence.
pub fn hidden_vectors(
    params: &Parameters,
    h0: &HiddenState,
    seqs: &[&ImageSequence],
) -> Result<Vec<(FeatureVector, f64)>, SimilarityError> {
    let checksum = params.checksum();
    let chunks: Vec<Vec<(FeatureVector, f64)>> = seqs
        .par_chunks(FEATURE_CHUNK / 2)
        .map(|chunk| {
            let none = vec![None; chunk.len()];
            let out = forward_batch(params, chunk, &none, h0)?;
            Ok(out
                .hidden
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    (
                        FeatureVector::new(h.top_h().to_vec(), FeatureSource::HiddenState, &checksum),
                        out.outputs.row(i)[Label::Collision.index()],
                    )
                })
                .collect())
        })
        .collect::<Result<_, SimilarityError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Compares each probe's final hidden state with the reference sequence's
/// and reports per-level mean cosine and collision confidence.
pub fn scenario_cosine_study(
    params: &Parameters,
    h0: &HiddenState,
    scenarios: &ScenarioSet,
) -> Result<Vec<ScenarioRow>, SimilarityError> {
    let reference = hidden_vectors(params, h0, &[&scenarios.reference])?.remove(0).0;
    scenarios
        .levels
        .iter()
        .map(|(name, delta, probes)| {
            let refs: Vec<&ImageSequence> = probes.iter().collect();
            let feats = hidden_vectors(params, h0, &refs)?;
            let mut cos = Vec::with_capacity(feats.len());
            for (f, _) in &feats {
                cos.push(cosine(&reference, f)?);
            }
            let conf: Vec<f64> = feats.iter().map(|(_, c)| *c).collect();
            let (mean_cosine, cos_std) = mean_std(&cos);
            let (mean_confidence, _) = mean_std(&conf);
            Ok(ScenarioRow {
                scenario: name.clone(),
                height_change: *delta,
                probes: feats.len(),
                mean_cosine,
                cosine_normalized_std: cos_std / mean_cosine,
                mean_collision_confidence: mean_confidence,
            })
        })
        .collect()
}
