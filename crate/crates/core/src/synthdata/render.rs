use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::scene::SceneState;
use super::{DomainKind, DomainSpec, Rgb};
use crate::network::Frames;
use crate::rng::Rng;

/// Samples per pixel along each axis.
const SUPERSAMPLE: usize = 3;

struct FrameGeometry {
    horizon_y: f64,
    bottom_x: f64,
    vanish_x: f64,
    half_width: f64,
    width: f64,
    height: f64,
}

impl FrameGeometry {
    /// Depth parameter: 0 at the horizon, 1 at the bottom row.
    fn depth(&self, y: f64) -> f64 {
        (y - self.horizon_y) / (self.height - self.horizon_y)
    }

    fn centre(&self, p: f64) -> f64 {
        self.bottom_x + (self.vanish_x - self.bottom_x) * (1.0 - p) * (1.0 - p)
    }

    fn road_half(&self, p: f64) -> f64 {
        self.half_width * p
    }

    fn lane_width(&self, p: f64) -> f64 {
        0.05 * self.width * p + 0.15
    }
}

struct Box2 {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    colour: Rgb,
}

fn shade(spec: &DomainSpec, g: &FrameGeometry, dash_phase: f64, obstacle: Option<&Box2>, x: f64, y: f64) -> Rgb {
    let pal = &spec.palette;
    if let Some(b) = obstacle {
        if x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1 {
            // Dark windscreen band and a shadow strip along the bottom.
            let rel = (y - b.y0) / (b.y1 - b.y0);
            if (0.15..0.4).contains(&rel) || rel >= 0.88 {
                return b.colour.map(|c| c * 0.3);
            }
            return b.colour;
        }
    }
    if y < g.horizon_y {
        return pal.sky;
    }
    let p = g.depth(y);
    let d = x - g.centre(p);
    let hw = g.road_half(p);
    if d.abs() > hw {
        return pal.ground;
    }
    let lw = 0.5 * g.lane_width(p);
    if (d.abs() - 0.9 * hw).abs() < lw {
        return pal.lane;
    }
    if d.abs() < lw && p > 0.0 && ((0.8 / p) + dash_phase).fract() < 0.5 {
        return pal.lane;
    }
    pal.road
}

/// Renders a scene as `[T, 3, H, W]` frames.
pub fn render_scene(spec: &DomainSpec, scene: &SceneState, rng: &mut Rng) -> Frames {
    let (h, w) = (spec.frame_height, spec.frame_width);
    let t_len = scene.len();
    let mut frames = Frames::zeros(t_len, 3, h, w);
    if spec.kind == DomainKind::UniformNoise {
        for v in &mut frames.data {
            *v = rng.random_range(0.0..=1.0);
        }
        return frames;
    }
    let noise = (spec.texture_noise > 0.0).then(|| Normal::new(0.0, spec.texture_noise).expect("valid std"));
    let plane = h * w;
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
    for t in 0..t_len {
        let (dx, dy) = scene.shake[t];
        let bottom_x = 0.5 * w as f64 + scene.heading[t] * w as f64 + dx;
        let g = FrameGeometry {
            horizon_y: spec.horizon * h as f64 + dy,
            bottom_x,
            vanish_x: bottom_x + scene.curvature * spec.curve_gain * w as f64,
            half_width: spec.road_half_width * w as f64,
            width: w as f64,
            height: h as f64,
        };
        let obstacle = scene.obstacle.as_ref().map(|o| {
            let s = o.scale[t];
            let p = (s / 0.7).min(1.0);
            let bottom = g.horizon_y + (g.height - g.horizon_y) * p;
            let height = s * g.height;
            let cx = g.centre(p) + o.lateral[t] * 0.5 * g.road_half(p);
            let half = 0.625 * height;
            Box2 {
                x0: cx - half,
                x1: cx + half,
                y0: bottom - height,
                y1: bottom,
                colour: o.colour,
            }
        });
        let frame = frames.frame_mut(t);
        for i in 0..h {
            for j in 0..w {
                let mut acc = [0.0f32; 3];
                for si in 0..SUPERSAMPLE {
                    for sj in 0..SUPERSAMPLE {
                        let y = i as f64 + (si as f64 + 0.5) / SUPERSAMPLE as f64;
                        let x = j as f64 + (sj as f64 + 0.5) / SUPERSAMPLE as f64;
                        let c = shade(spec, &g, scene.dash_phase[t], obstacle.as_ref(), x, y);
                        acc.iter_mut().zip(c).for_each(|(a, v)| *a += v);
                    }
                }
                for (ch, a) in acc.iter().enumerate() {
                    let mut v = a * inv;
                    if let Some(n) = &noise {
                        v += n.sample(rng) as f32;
                    }
                    frame[ch * plane + i * w + j] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    frames
}
