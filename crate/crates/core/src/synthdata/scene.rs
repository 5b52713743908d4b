use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;

use super::render::render_scene;
use super::{DataError, DomainSpec, Rgb};
use crate::network::{ImageSequence, Label, Target};
use crate::rng::{derive_indexed, rng_for, Rng};

/// A sequence is a collision iff the obstacle's projected height in the
/// final frame exceeds this fraction of the frame height.
pub const COLLISION_THRESHOLD: f64 = 0.4;

/// Curvature 1 maps to this many degrees of steering.
pub const MAX_STEERING_DEG: f64 = 30.0;

const SAFE_MAX_SCALE: f64 = 0.32;
const COLLISION_MIN_SCALE: f64 = 0.46;
const COLLISION_MAX_SCALE: f64 = 0.78;

#[derive(Clone, Debug, PartialEq)]
pub struct ObstacleTrack {
    /// Projected height per frame, as a fraction of the frame height.
    pub scale: Vec<f64>,
    /// Position across the road per frame; -1 and 1 are the road edges.
    pub lateral: Vec<f64>,
    pub colour: Rgb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    pub obstacle: Option<ObstacleTrack>,
    pub curvature: f64,
    /// Per-frame horizontal offset of the road, as a fraction of the width.
    pub heading: Vec<f64>,
    /// Per-frame camera shake `(dx, dy)` in pixels.
    pub shake: Vec<(f64, f64)>,
    /// Per-frame phase of the dashed centre line.
    pub dash_phase: Vec<f64>,
}

impl SceneState {
    pub fn len(&self) -> usize {
        self.heading.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heading.is_empty()
    }

    /// Steering angle implied by the road curvature.
    pub fn steering_angle(&self) -> f64 {
        MAX_STEERING_DEG * self.curvature
    }
}

pub fn label_of(scene: &SceneState) -> Label {
    match &scene.obstacle {
        Some(o) if o.scale.last().is_some_and(|&s| s > COLLISION_THRESHOLD) => Label::Collision,
        _ => Label::Safe,
    }
}

fn camera(spec: &DomainSpec, t_len: usize, curvature: f64, rng: &mut Rng) -> SceneState {
    let phase0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let freq: f64 = rng.random_range(0.5..1.0);
    let heading = (0..t_len)
        .map(|t| spec.heading_wobble * (phase0 + freq * std::f64::consts::TAU * t as f64 / t_len as f64).sin())
        .collect();
    let jitter = |rng: &mut Rng| {
        if spec.camera_jitter == 0.0 {
            0.0
        } else {
            rng.random_range(-1.0..1.0) * spec.camera_jitter
        }
    };
    let shake = (0..t_len).map(|_| (jitter(rng), jitter(rng))).collect();
    let dash0: f64 = rng.random_range(0.0..1.0);
    let ego_speed: f64 = rng.random_range(0.08..0.16);
    let dash_phase = (0..t_len).map(|t| (dash0 + ego_speed * t as f64).fract()).collect();
    SceneState {
        obstacle: None,
        curvature,
        heading,
        shake,
        dash_phase,
    }
}

fn linear(s0: f64, s1: f64, t_len: usize) -> Vec<f64> {
    let steps = (t_len - 1).max(1) as f64;
    (0..t_len).map(|t| s0 + (s1 - s0) * t as f64 / steps).collect()
}

fn track(scale: Vec<f64>, lateral: f64, colour: Rgb) -> ObstacleTrack {
    let lateral = vec![lateral; scale.len()];
    ObstacleTrack { scale, lateral, colour }
}

fn obstacle_colour(spec: &DomainSpec, rng: &mut Rng) -> Rgb {
    let base = spec.palette.obstacles[rng.random_range(0..spec.palette.obstacles.len())];
    base.map(|c| (c + rng.random_range(-0.06f32..0.06)).clamp(0.0, 1.0))
}

fn sample_scene(spec: &DomainSpec, label: Label, t_len: usize, rng: &mut Rng) -> SceneState {
    let mut scene = camera(spec, t_len, 0.0, rng);
    let lateral = rng.random_range(-0.6..0.6);
    let colour = obstacle_colour(spec, rng);
    let steps = (t_len - 1).max(1) as f64;
    scene.obstacle = match label {
        Label::Collision => {
            let s0 = rng.random_range(0.05..0.15);
            let lo = spec.speed_range.0.max((COLLISION_MIN_SCALE - s0) / steps);
            let hi = spec.speed_range.1.min((COLLISION_MAX_SCALE - s0) / steps).max(lo);
            let v = if hi > lo { rng.random_range(lo..hi) } else { lo };
            Some(track(linear(s0, s0 + v * steps, t_len), lateral, colour))
        }
        Label::Safe => {
            let kind: f64 = rng.random_range(0.0..1.0);
            if kind < 0.15 {
                None
            } else if kind < 0.7 {
                let s0 = rng.random_range(0.05..0.15);
                let s1 = rng.random_range(s0..SAFE_MAX_SCALE);
                Some(track(linear(s0, s1, t_len), lateral, colour))
            } else {
                let s0 = rng.random_range(0.18..SAFE_MAX_SCALE);
                let s1 = rng.random_range(0.05..s0);
                Some(track(linear(s0, s1, t_len), lateral, colour))
            }
        }
    };
    scene
}

fn check_request(spec: &DomainSpec, n: usize, t_len: usize) -> Result<(), DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::InvalidRequest("n must be positive".into()));
    }
    if t_len < 2 {
        return Err(DataError::InvalidRequest("sequences need at least 2 frames".into()));
    }
    Ok(())
}

fn sequence_rng(spec: &DomainSpec, seed: u64, i: usize) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, &format!("{}/seq", spec.domain_id), i as u64))
}

fn sequence_id(spec: &DomainSpec, seed: u64, i: usize) -> String {
    format!("{}-s{seed}-{i:05}", spec.domain_id)
}

/// Scene states of a classification dataset, in dataset order.
pub fn sample_scenes(
    spec: &DomainSpec,
    n: usize,
    collision_ratio: f64,
    t_len: usize,
    seed: u64,
) -> Result<Vec<SceneState>, DataError> {
    check_request(spec, n, t_len)?;
    if !(0.0..=1.0).contains(&collision_ratio) {
        return Err(DataError::InvalidRequest(format!(
            "collision ratio {collision_ratio} outside [0, 1]"
        )));
    }
    let collisions = (n as f64 * collision_ratio).round() as usize;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < collisions { Label::Collision } else { Label::Safe })
        .collect();
    labels.shuffle(&mut rng_for(seed, &format!("{}/labels", spec.domain_id)));
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sample_scene(spec, l, t_len, &mut sequence_rng(spec, seed, i)))
        .collect())
}

/// Collision/safe sequences with exactly `round(n * collision_ratio)`
/// collisions.
pub fn generate_dataset(
    spec: &DomainSpec,
    n: usize,
    collision_ratio: f64,
    t_len: usize,
    seed: u64,
) -> Result<Vec<ImageSequence>, DataError> {
    let scenes = sample_scenes(spec, n, collision_ratio, t_len, seed)?;
    Ok(scenes
        .into_par_iter()
        .enumerate()
        .map(|(i, scene)| {
            // Rendering draws from a stream separate from scene sampling.
            let mut rng = Rng::seed_from_u64(derive_indexed(seed, &format!("{}/pixels", spec.domain_id), i as u64));
            ImageSequence {
                id: sequence_id(spec, seed, i),
                frames: render_scene(spec, &scene, &mut rng),
                target: Target::Class(label_of(&scene)),
                domain_id: spec.domain_id.clone(),
            }
        })
        .collect())
}

/// Per-sequence curvature, stratified over [-1, 1] so the angle
/// distribution is balanced for any `n`.
pub fn sample_curvatures(spec: &DomainSpec, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_for(seed, &format!("{}/curvature", spec.domain_id));
    let mut strata: Vec<usize> = (0..n).collect();
    strata.shuffle(&mut rng);
    strata
        .into_iter()
        .map(|k| {
            let u: f64 = rng.random_range(0.0..1.0);
            -1.0 + 2.0 * (k as f64 + u) / n as f64
        })
        .collect()
}

/// Obstacle-free curved roads labelled with `30 * curvature` degrees.
pub fn generate_steering_dataset(
    spec: &DomainSpec,
    n: usize,
    t_len: usize,
    seed: u64,
) -> Result<Vec<ImageSequence>, DataError> {
    check_request(spec, n, t_len)?;
    let curvatures = sample_curvatures(spec, n, seed);
    Ok(curvatures
        .into_par_iter()
        .enumerate()
        .map(|(i, k)| {
            let scene = camera(spec, t_len, k, &mut sequence_rng(spec, seed, i));
            let mut rng = Rng::seed_from_u64(derive_indexed(seed, &format!("{}/pixels", spec.domain_id), i as u64));
            ImageSequence {
                id: sequence_id(spec, seed, i),
                frames: render_scene(spec, &scene, &mut rng),
                target: Target::Steering(scene.steering_angle()),
                domain_id: spec.domain_id.clone(),
            }
        })
        .collect())
}

/// Approach scenarios of increasing severity for the hidden-state study.
#[derive(Clone, Debug)]
pub struct ScenarioSet {
    /// Obstacle holding still at a safe distance.
    pub reference: ImageSequence,
    /// `(name, total growth of projected height, probes)` per level.
    pub levels: Vec<(String, f64, Vec<ImageSequence>)>,
}

/// Total change of projected height over the sequence, per severity level.
pub const APPROACH_LEVELS: [f64; 4] = [0.06, 0.18, 0.36, 0.56];
const APPROACH_START: f64 = 0.1;

pub fn approach_scenarios(
    spec: &DomainSpec,
    t_len: usize,
    per_level: usize,
    seed: u64,
) -> Result<ScenarioSet, DataError> {
    check_request(spec, per_level, t_len)?;
    let build = |name: String, scene: SceneState, stream: u64| {
        let mut rng = Rng::seed_from_u64(derive_indexed(
            seed,
            &format!("{}/scenario-pixels", spec.domain_id),
            stream,
        ));
        ImageSequence {
            id: name,
            frames: render_scene(spec, &scene, &mut rng),
            target: Target::Class(label_of(&scene)),
            domain_id: spec.domain_id.clone(),
        }
    };
    let mut rng = rng_for(seed, &format!("{}/scenario-ref", spec.domain_id));
    let mut scene = camera(spec, t_len, 0.0, &mut rng);
    let colour = spec.palette.obstacles[0];
    scene.obstacle = Some(track(vec![APPROACH_START; t_len], 0.0, colour));
    let reference = build(format!("{}-reference", spec.domain_id), scene, 0);

    let mut levels = Vec::new();
    for (l, &delta) in APPROACH_LEVELS.iter().enumerate() {
        let probes = (0..per_level)
            .map(|p| {
                let stream = 1 + (l * per_level + p) as u64;
                let mut rng = Rng::seed_from_u64(derive_indexed(seed, &format!("{}/scenario", spec.domain_id), stream));
                let mut scene = camera(spec, t_len, 0.0, &mut rng);
                let lateral = rng.random_range(-0.2..0.2);
                scene.obstacle = Some(track(
                    linear(APPROACH_START, APPROACH_START + delta, t_len),
                    lateral,
                    colour,
                ));
                build(format!("{}-level{}-{p:03}", spec.domain_id, l + 1), scene, stream)
            })
            .collect();
        levels.push((format!("level{}", l + 1), delta, probes));
    }
    Ok(ScenarioSet { reference, levels })
}

#[cfg(test)]
mod tests {
    use super::super::{town_a, town_b};
    use super::*;

    #[test]
    fn exact_balance_and_determinism() {
        let spec = town_a();
        let a = generate_dataset(&spec, 100, 0.5, 15, 7).unwrap();
        let collisions = a.iter().filter(|s| s.target == Target::Class(Label::Collision)).count();
        assert_eq!(collisions, 50);
        let b = generate_dataset(&spec, 100, 0.5, 15, 7).unwrap();
        assert_eq!(a, b);
        assert!(a
            .iter()
            .all(|s| s.frames.in_unit_range() && s.frames.shape() == [15, 3, 24, 32]));
        assert_eq!(
            generate_dataset(&spec, 7, 0.3, 4, 1)
                .unwrap()
                .iter()
                .filter(|s| s.target.label() == Some(Label::Collision))
                .count(),
            2
        );
    }

    #[test]
    fn labels_follow_scene_and_need_time() {
        let spec = town_b();
        let scenes = sample_scenes(&spec, 300, 0.5, 15, 3).unwrap();
        let seqs = generate_dataset(&spec, 300, 0.5, 15, 3).unwrap();
        for (scene, seq) in scenes.iter().zip(&seqs) {
            assert_eq!(seq.target, Target::Class(label_of(scene)));
            let (lo, hi) = spec.speed_range;
            if let Some(o) = &scene.obstacle {
                for w in o.scale.windows(2) {
                    assert!((w[1] - w[0]).abs() <= hi.max(lo) + 1e-12);
                }
                if label_of(scene) == Label::Collision {
                    assert!(o.scale[..3].iter().all(|&s| s < COLLISION_THRESHOLD));
                }
            }
        }
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(generate_dataset(&town_a(), 0, 0.5, 15, 1).is_err());
        assert!(generate_dataset(&town_a(), 10, 1.5, 15, 1).is_err());
        assert!(generate_dataset(&town_a(), 10, 0.5, 1, 1).is_err());
    }

    #[test]
    fn steering_angles() {
        let spec = town_a();
        let seqs = generate_steering_dataset(&spec, 1000, 4, 11).unwrap();
        let angles: Vec<f64> = seqs.iter().map(|s| s.target.angle().unwrap()).collect();
        let mean = angles.iter().sum::<f64>() / angles.len() as f64;
        assert!(mean.abs() < 1.0, "mean {mean}");
        assert!(angles.iter().all(|a| a.abs() <= 30.0));

        let mut rng = rng_for(1, "t");
        let mut flat = camera(&spec, 4, 0.0, &mut rng);
        assert_eq!(flat.steering_angle(), 0.0);
        flat.curvature = 0.4;
        let a = flat.steering_angle();
        flat.curvature = -0.4;
        assert_eq!(flat.steering_angle(), -a);
    }

    #[test]
    fn scenarios_grow_in_severity() {
        let set = approach_scenarios(&town_a(), 15, 3, 5).unwrap();
        assert_eq!(set.levels.len(), 4);
        assert_eq!(set.reference.target.label(), Some(Label::Safe));
        let labels: Vec<Label> = set.levels.iter().map(|l| l.2[0].target.label().unwrap()).collect();
        assert_eq!(labels, [Label::Safe, Label::Safe, Label::Collision, Label::Collision]);
    }
}
