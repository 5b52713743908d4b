//! Auxiliary input channels for Phase-2 training: vanilla-gradient saliency,
//! GradCAM and Canny edges.

mod attribution;
mod canny;

pub use attribution::{
    attribute, bilinear_upsample, grad_cam, grad_cam_raw, input_gradient, normalize_unit, vanilla_saliency,
    Attribution, MapModel,
};
pub use canny::{canny, CannyConfig};

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::network::{Frames, ImageSequence, NetworkError};
use crate::rng::rng_for;
use crate::synthdata::Dataset;

#[derive(Debug, Error)]
pub enum SalientError {
    #[error("invalid salient config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient while attributing {0}")]
    NonFinite(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

/// Per-frame auxiliary maps for one sequence, each `[T, 1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SalientMaps {
    pub source_sequence_id: String,
    /// Vanilla backpropagation magnitude in `[0, 1]`.
    pub saliency: Frames,
    /// GradCAM heatmap in `[0, 1]`.
    pub gradient_map: Frames,
    /// Canny edges, exactly 0 or 1.
    pub edges: Frames,
    pub provenance: MapProvenance,
}

/// Which model produced a set of maps.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MapProvenance {
    pub model_checksum: String,
    pub config_digest: String,
}

impl SalientMaps {
    /// Verifies shapes against the source frames and the value ranges.
    pub fn check_matches(&self, frames: &Frames) -> Result<(), NetworkError> {
        for (name, m) in [
            ("saliency", &self.saliency),
            ("gradient_map", &self.gradient_map),
            ("edges", &self.edges),
        ] {
            if m.shape() != [frames.t, 1, frames.h, frames.w] {
                return Err(NetworkError::Shape(format!(
                    "{name} map of {} is {:?}, frames are {:?}",
                    self.source_sequence_id,
                    m.shape(),
                    frames.shape()
                )));
            }
            if !m.in_unit_range() {
                return Err(NetworkError::Shape(format!(
                    "{name} map of {} leaves [0, 1]",
                    self.source_sequence_id
                )));
            }
        }
        if self.edges.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(NetworkError::Shape(format!(
                "edge map of {} is not binary",
                self.source_sequence_id
            )));
        }
        Ok(())
    }
}

/// Canny edges of every frame's luminance, as `[T, 1, H, W]`.
pub fn edge_frames(frames: &Frames, cfg: &CannyConfig) -> Result<Frames, SalientError> {
    let mut out = Frames::zeros(frames.t, 1, frames.h, frames.w);
    for t in 0..frames.t {
        let e = canny(&frames.luminance(t), frames.h, frames.w, cfg)?;
        out.frame_mut(t).iter_mut().zip(e).for_each(|(o, v)| *o = v as f32);
    }
    Ok(out)
}

/// All three maps for one sequence, attributed to the predicted class.
pub fn sequence_maps(model: &MapModel, seq: &ImageSequence, cfg: &CannyConfig) -> Result<SalientMaps, SalientError> {
    let a = attribute(model, seq, None)?;
    Ok(SalientMaps {
        source_sequence_id: seq.id.clone(),
        saliency: a.saliency,
        gradient_map: a.gradient_map,
        edges: edge_frames(&seq.frames, cfg)?,
        provenance: model.provenance(),
    })
}

/// Picks `floor(ratio * |dataset|)` sequences uniformly without replacement
/// (deterministic in `seed`) and computes their maps.
pub fn generate_salient_subset(
    model: &MapModel,
    dataset: &Dataset,
    ratio: f64,
    seed: u64,
    cfg: &CannyConfig,
) -> Result<BTreeMap<String, SalientMaps>, SalientError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(SalientError::InvalidConfig(format!(
            "subset ratio {ratio} outside [0, 1]"
        )));
    }
    cfg.validate()?;
    let chosen = subset_indices(dataset.len(), ratio, seed);
    chosen
        .par_iter()
        .map(|&i| {
            let seq = &dataset.sequences[i];
            sequence_maps(model, seq, cfg).map(|m| (seq.id.clone(), m))
        })
        .collect()
}

/// Sorted indices of the sequences [`generate_salient_subset`] covers.
pub fn subset_indices(n: usize, ratio: f64, seed: u64) -> Vec<usize> {
    let k = ((ratio * n as f64).floor() as usize).min(n);
    let mut rng = rng_for(seed, "salient/subset");
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}
