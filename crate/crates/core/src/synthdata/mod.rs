//! Procedural multi-domain driving sequences.
//!
//! A scene is a flat-shaded road (sky, ground, road surface, two edge lines
//! and a dashed centre line converging on a vanishing point) with an optional
//! obstacle rectangle standing on the road. Domains differ in palette, pixel
//! noise, camera jitter and obstacle dynamics; the geometry is shared, so the
//! label is a property of the scene, never of the colours.
//!
//! Seeding: sequence `i` of a dataset generated with root seed `s` draws all
//! its randomness from `derive_indexed(s, "<domain>/seq", i)`, so sequences can
//! be rendered in parallel and in any order.

mod io;
mod render;
mod scene;

pub use io::{dataset_from_container, dataset_to_container, export_frame, load_dataset, save_dataset, DATASET_KIND};
pub use render::render_scene;
pub use scene::{
    approach_scenarios, generate_dataset, generate_steering_dataset, label_of, sample_curvatures, sample_scenes,
    ObstacleTrack, ScenarioSet, SceneState, APPROACH_LEVELS, COLLISION_THRESHOLD, MAX_STEERING_DEG,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerError;
use crate::network::{ImageSequence, NetworkError};
use crate::salient::SalientMaps;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid domain spec: {0}")]
    InvalidSpec(String),
    #[error("invalid generation request: {0}")]
    InvalidRequest(String),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Rgb = [f32; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub sky: Rgb,
    pub ground: Rgb,
    pub road: Rgb,
    pub lane: Rgb,
    /// Body colours; each obstacle picks one and perturbs it slightly.
    pub obstacles: Vec<Rgb>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainKind {
    Road,
    /// Independent uniform pixels; used as the far end of similarity scales.
    UniformNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: String,
    pub kind: DomainKind,
    pub palette: Palette,
    /// Standard deviation of per-pixel Gaussian noise.
    pub texture_noise: f64,
    /// Per-frame growth of an approaching obstacle's projected height, as a
    /// fraction of the frame height.
    pub speed_range: (f64, f64),
    /// Standard deviation of the per-frame camera shake, in pixels.
    pub camera_jitter: f64,
    pub frame_height: usize,
    pub frame_width: usize,
    /// Horizon row as a fraction of the frame height.
    pub horizon: f64,
    /// Road half-width at the bottom row, as a fraction of the frame width.
    pub road_half_width: f64,
    /// Horizontal shift of the vanishing point per unit curvature, as a
    /// fraction of the frame width.
    pub curve_gain: f64,
    /// Amplitude of the ego heading oscillation, as a fraction of the width.
    pub heading_wobble: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(format!("{}: {m}", self.domain_id)));
        let p = &self.palette;
        if p.obstacles.is_empty() {
            return bad("at least one obstacle colour is needed".into());
        }
        for c in [p.sky, p.ground, p.road, p.lane].iter().chain(&p.obstacles) {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return bad(format!("colour {c:?} outside [0, 1]"));
            }
        }
        let (lo, hi) = self.speed_range;
        if !(lo > 0.0 && hi >= lo) {
            return bad(format!("speed range ({lo}, {hi}) must be positive and ordered"));
        }
        if self.texture_noise < 0.0 || self.camera_jitter < 0.0 || self.heading_wobble < 0.0 {
            return bad("noise, jitter and wobble must be nonnegative".into());
        }
        if self.frame_height < 8 || self.frame_width < 8 {
            return bad("frames must be at least 8x8".into());
        }
        if !(0.1..=0.8).contains(&self.horizon) {
            return bad(format!("horizon {} outside [0.1, 0.8]", self.horizon));
        }
        if self.domain_id.is_empty()
            || self
                .domain_id
                .contains(|c: char| c.is_whitespace() || c == ';' || c == '=')
        {
            return bad("domain id must be a non-empty token".into());
        }
        Ok(())
    }

    pub fn with_size(mut self, height: usize, width: usize) -> Self {
        self.frame_height = height;
        self.frame_width = width;
        self
    }

    pub fn with_id(mut self, id: &str) -> Self {
        self.domain_id = id.to_string();
        self
    }

    /// Mean colour of the dominant scene regions, weighted by their typical
    /// screen area. Used to compare palettes without rendering.
    pub fn mean_colour(&self) -> Rgb {
        if self.kind == DomainKind::UniformNoise {
            return [0.5; 3];
        }
        let p = &self.palette;
        let sky = self.horizon as f32;
        let below = 1.0 - sky;
        let road = below * self.road_half_width as f32;
        let ground = below - road;
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = sky * p.sky[ch] + road * p.road[ch] + ground * p.ground[ch];
        }
        out
    }
}

fn base(id: &str, palette: Palette) -> DomainSpec {
    DomainSpec {
        domain_id: id.to_string(),
        kind: DomainKind::Road,
        palette,
        texture_noise: 0.02,
        speed_range: (0.024, 0.045),
        camera_jitter: 0.3,
        frame_height: 24,
        frame_width: 32,
        horizon: 0.4,
        road_half_width: 0.45,
        curve_gain: 0.35,
        heading_wobble: 0.01,
    }
}

/// Daylight town: blue sky, grey road, green verges, warm-coloured cars.
pub fn town_a() -> DomainSpec {
    base(
        "townA",
        Palette {
            sky: [0.55, 0.72, 0.92],
            ground: [0.24, 0.50, 0.20],
            road: [0.36, 0.36, 0.38],
            lane: [0.95, 0.95, 0.90],
            obstacles: vec![
                [0.85, 0.12, 0.10],
                [0.92, 0.55, 0.12],
                [0.88, 0.86, 0.80],
                [0.55, 0.10, 0.35],
            ],
        },
    )
}

/// Dusk town: orange sky, dark road, brown verges, cool-coloured cars.
pub fn town_b() -> DomainSpec {
    DomainSpec {
        texture_noise: 0.03,
        ..base(
            "townB",
            Palette {
                sky: [0.88, 0.58, 0.36],
                ground: [0.46, 0.34, 0.18],
                road: [0.20, 0.20, 0.23],
                lane: [0.96, 0.84, 0.20],
                obstacles: vec![
                    [0.15, 0.35, 0.85],
                    [0.30, 0.75, 0.80],
                    [0.45, 0.30, 0.70],
                    [0.60, 0.62, 0.66],
                ],
            },
        )
    }
}

/// Overcast desert town with a shakier camera; the unseen test domain.
pub fn town_c() -> DomainSpec {
    DomainSpec {
        texture_noise: 0.05,
        camera_jitter: 0.6,
        ..base(
            "townC",
            Palette {
                sky: [0.72, 0.72, 0.74],
                ground: [0.70, 0.62, 0.45],
                road: [0.48, 0.44, 0.40],
                lane: [0.98, 0.98, 0.98],
                obstacles: vec![
                    [0.10, 0.42, 0.22],
                    [0.85, 0.80, 0.15],
                    [0.15, 0.15, 0.18],
                    [0.75, 0.25, 0.25],
                ],
            },
        )
    }
}

pub fn uniform_noise() -> DomainSpec {
    DomainSpec {
        kind: DomainKind::UniformNoise,
        ..town_a().with_id("noise")
    }
}

pub const BUILTIN_DOMAINS: [&str; 4] = ["townA", "townB", "townC", "noise"];

/// Built-in domain by name, at its default 24x32 frame size.
pub fn builtin_domain(name: &str) -> Option<DomainSpec> {
    match name {
        "townA" => Some(town_a()),
        "townB" => Some(town_b()),
        "townC" => Some(town_c()),
        "noise" => Some(uniform_noise()),
        _ => None,
    }
}

/// Sequences plus any salient maps attached to them, keyed by sequence id.
/// The sequences are shared, so cloning a dataset to attach different maps
/// does not copy frames.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub sequences: Arc<Vec<ImageSequence>>,
    pub maps: BTreeMap<String, SalientMaps>,
}

impl Dataset {
    pub fn new(sequences: Vec<ImageSequence>) -> Self {
        Dataset {
            sequences: Arc::new(sequences),
            maps: BTreeMap::new(),
        }
    }

    /// The same sequences with `maps` attached instead of the current ones.
    pub fn with_maps(&self, maps: BTreeMap<String, SalientMaps>) -> Self {
        Dataset {
            sequences: Arc::clone(&self.sequences),
            maps,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn maps_for(&self, seq: &ImageSequence) -> Option<&SalientMaps> {
        self.maps.get(&seq.id)
    }

    /// Checks every sequence and that each map belongs to a sequence with
    /// matching frames.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut ids = std::collections::BTreeSet::new();
        for s in self.sequences.iter() {
            s.validate()?;
            if !ids.insert(s.id.as_str()) {
                return Err(DataError::Malformed(format!("duplicate sequence id {}", s.id)));
            }
        }
        for (id, m) in &self.maps {
            let seq = self
                .sequences
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| DataError::Malformed(format!("maps for unknown sequence {id}")))?;
            m.check_matches(&seq.frames)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in BUILTIN_DOMAINS {
            builtin_domain(name).unwrap().validate().unwrap();
        }
        assert!(builtin_domain("townZ").is_none());
    }

    #[test]
    fn bad_specs_rejected() {
        let mut s = town_a();
        s.palette.road[0] = 1.5;
        assert!(s.validate().is_err());
        let mut s = town_a();
        s.speed_range = (0.0, 0.1);
        assert!(s.validate().is_err());
        assert!(town_a().with_id("two words").validate().is_err());
    }
}
