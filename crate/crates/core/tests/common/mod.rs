//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sttl_core::network::{
    build_graph, init_hidden_random, init_parameters, HiddenState, NetworkConfig, ParamVars, Parameters,
};
use sttl_core::salient::CannyConfig;
use sttl_core::tensor::{Tape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// |a - n| / max(|a|, |n|, floor). The floor keeps gradients that are zero
/// up to rounding from reporting huge relative errors.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` around `x[i]`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

/// One gradient-check problem on the full network.
pub struct NetProblem {
    pub params: Parameters,
    pub input: Tensor,
    pub batch: usize,
    pub targets: Vec<usize>,
    pub h0: HiddenState,
}

impl NetProblem {
    /// Random parameters (biases included), random frames in [0, 1] and a
    /// random start state.
    pub fn random(cfg: &NetworkConfig, batch: usize, seed: u64) -> Self {
        let mut params = init_parameters(cfg, seed).unwrap();
        let mut r = rng(seed ^ 0x5eed);
        for (name, t) in params.tensors.iter_mut() {
            if name.ends_with("bias") {
                t.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.1..0.1));
            }
        }
        let shape = [
            batch * cfg.sequence_length,
            cfg.input_channels,
            cfg.frame_height,
            cfg.frame_width,
        ];
        let input = Tensor::from_fn(&shape, |_| r.random::<f64>());
        let targets = (0..batch).map(|i| i % 2).collect();
        let h0 = init_hidden_random(cfg, seed).unwrap();
        NetProblem {
            params,
            input,
            batch,
            targets,
            h0,
        }
    }

    pub fn loss(&self, params: &Parameters) -> f64 {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, params, false);
        let x = tape.constant(self.input.clone());
        let g = build_graph(&mut tape, &params.config, &pv, x, self.batch, &self.h0).unwrap();
        let loss = tape.cross_entropy(g.logits, &self.targets).unwrap();
        tape.value(loss).item()
    }

    /// Analytic gradient of every parameter tensor.
    pub fn gradients(&self) -> Vec<(String, Vec<f64>)> {
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, &self.params, true);
        let x = tape.constant(self.input.clone());
        let g = build_graph(&mut tape, &self.params.config, &pv, x, self.batch, &self.h0).unwrap();
        let loss = tape.cross_entropy(g.logits, &self.targets).unwrap();
        tape.backward(loss).unwrap();
        pv.iter()
            .map(|(name, v)| (name.to_string(), tape.grad(v).unwrap().to_vec()))
            .collect()
    }
}

/// Checks the coordinates `i` of every parameter tensor with
/// `i % stride == offset`, so `stride` problems with offsets `0..stride`
/// cover every scalar exactly once. Returns the worst error and how many
/// scalars were checked.
pub fn network_gradient_sweep(
    problem: &NetProblem,
    stride: usize,
    offset: usize,
    h: f64,
    floor: f64,
) -> ((f64, String, usize, f64, f64), usize) {
    let grads = problem.gradients();
    let mut worst = (0.0, String::new(), 0, 0.0, 0.0);
    let mut params = problem.params.clone();
    let mut checked = 0;
    for (name, g) in grads {
        for i in (offset..g.len()).step_by(stride) {
            let orig = params.tensors[&name].data()[i];
            params.tensors.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = problem.loss(&params);
            params.tensors.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = problem.loss(&params);
            params.tensors.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(g[i], numeric, floor);
            checked += 1;
            if e > worst.0 {
                worst = (e, name.clone(), i, g[i], numeric);
            }
        }
    }
    (worst, checked)
}

/// Worst relative error over `per_tensor` random coordinates of every
/// parameter tensor. Returns `(worst, name, index, analytic, numeric)`.
pub fn network_gradient_check(
    problem: &NetProblem,
    per_tensor: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> (f64, String, usize, f64, f64) {
    let grads = problem.gradients();
    let mut r = rng(seed);
    let mut worst = (0.0, String::new(), 0, 0.0, 0.0);
    let mut params = problem.params.clone();
    for (name, g) in grads {
        let n = g.len();
        let mut picks: Vec<usize> = (0..per_tensor.min(n)).map(|_| r.random_range(0..n)).collect();
        picks.sort_unstable();
        picks.dedup();
        for i in picks {
            let orig = params.tensors[&name].data()[i];
            params.tensors.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = problem.loss(&params);
            params.tensors.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = problem.loss(&params);
            params.tensors.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(g[i], numeric, floor);
            if e > worst.0 {
                worst = (e, name.clone(), i, g[i], numeric);
            }
        }
    }
    worst
}

/// Reference Canny written independently of the library: explicit padding,
/// separable blur, slope comparisons instead of angles for the direction
/// bins, and hysteresis by repeated sweeps until nothing changes.
pub fn canny_reference(img: &[f64], h: usize, w: usize, cfg: &CannyConfig) -> Vec<u8> {
    let r = cfg.kernel / 2;
    let s2 = 2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma;
    let g1: Vec<f64> = (0..cfg.kernel)
        .map(|k| {
            let d = k as f64 - r as f64;
            (-d * d / s2).exp()
        })
        .collect();
    let norm: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / norm).collect();

    let pad = |src: &[f64], p: usize| -> (Vec<f64>, usize) {
        let pw = w + 2 * p;
        let mut out = vec![0.0; (h + 2 * p) * pw];
        for y in 0..h + 2 * p {
            for x in 0..pw {
                let sy = (y as isize - p as isize).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize - p as isize).clamp(0, w as isize - 1) as usize;
                out[y * pw + x] = src[sy * w + sx];
            }
        }
        (out, pw)
    };

    let (padded, pw) = pad(img, r);
    // Horizontal then vertical pass on the padded image.
    let ph = h + 2 * r;
    let mut horiz = vec![0.0; ph * w];
    for y in 0..ph {
        for x in 0..w {
            horiz[y * w + x] = (0..cfg.kernel).map(|k| g1[k] * padded[y * pw + x + k]).sum();
        }
    }
    let mut blur = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            blur[y * w + x] = (0..cfg.kernel).map(|k| g1[k] * horiz[(y + k) * w + x]).sum();
        }
    }

    let (b, bw) = pad(&blur, 1);
    let sx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let sy = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let mut mag = vec![0.0; h * w];
    let mut bin = vec![0usize; h * w];
    let tan22 = (22.5f64).to_radians().tan();
    let tan67 = (67.5f64).to_radians().tan();
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for a in 0..3 {
                for c in 0..3 {
                    let v = b[(y + a) * bw + x + c];
                    gx += sx[a][c] * v;
                    gy += sy[a][c] * v;
                }
            }
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
            // Fold into the upper half plane.
            let (gx, gy) = if gy < 0.0 { (-gx, -gy) } else { (gx, gy) };
            let t = if gx == 0.0 { f64::INFINITY } else { gy / gx.abs() };
            bin[y * w + x] = if (gy == 0.0 && gx < 0.0) || t < tan22 {
                0
            } else if t >= tan67 {
                2
            } else if gx > 0.0 {
                1
            } else {
                3
            };
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![0; h * w];
    }
    let q: Vec<f64> = mag.iter().map(|m| (m / max * 1e9).round() / 1e9).collect();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            q[y as usize * w + x as usize]
        }
    };
    let steps = [(0isize, 1isize), (1, 1), (1, 0), (1, -1)];
    let mut kept = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let (dy, dx) = steps[bin[i]];
            if q[i] >= at(y + dy, x + dx) && q[i] >= at(y - dy, x - dx) {
                kept[i] = q[i];
            }
        }
    }
    let mut out: Vec<u8> = kept
        .iter()
        .map(|&m| u8::from(m > 0.0 && m >= cfg.high_threshold))
        .collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if out[i] == 1 || !(kept[i] > 0.0 && kept[i] >= cfg.low_threshold) {
                    continue;
                }
                let touches = (y.saturating_sub(1)..=(y + 1).min(h - 1))
                    .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| out[yy * w + xx] == 1));
                if touches {
                    out[i] = 1;
                    changed = true;
                }
            }
        }
        if !changed {
            return out;
        }
    }
}

/// 20x20 black frame with a centred 10x10 white square (rows and columns
/// 5..15).
pub fn white_square() -> Vec<f64> {
    (0..400)
        .map(|i| {
            let (y, x) = (i / 20, i % 20);
            if (5..15).contains(&y) && (5..15).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Pixels of the square's outermost one-pixel ring.
pub fn square_ring() -> Vec<(usize, usize)> {
    (5..15)
        .flat_map(|y| (5..15).map(move |x| (y, x)))
        .filter(|&(y, x)| y == 5 || y == 14 || x == 5 || x == 14)
        .collect()
}

/// Every edge lies within one pixel of the ring and every ring pixel has an
/// edge within one pixel.
pub fn matches_ring(edges: &[u8]) -> bool {
    let ring = square_ring();
    let near = |a: (usize, usize), b: (usize, usize)| a.0.abs_diff(b.0) <= 1 && a.1.abs_diff(b.1) <= 1;
    let on: Vec<(usize, usize)> = (0..400).filter(|&i| edges[i] == 1).map(|i| (i / 20, i % 20)).collect();
    !on.is_empty()
        && on.iter().all(|&p| ring.iter().any(|&q| near(p, q)))
        && ring.iter().all(|&q| on.iter().any(|&p| near(p, q)))
}

/// Phase-1 model trained once per test binary: 200 separable townA
/// sequences at 16x16, 4 frames, 30 epochs.
pub fn trained_toy() -> &'static (sttl_core::synthdata::Dataset, sttl_core::transfer::TrainedModel) {
    use std::sync::OnceLock;
    use sttl_core::synthdata::{generate_dataset, town_a, Dataset};
    use sttl_core::transfer::{train_phase1, TrainConfig};
    static CELL: OnceLock<(Dataset, sttl_core::transfer::TrainedModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let data = Dataset::new(generate_dataset(&town_a().with_size(16, 16), 200, 0.5, 4, 101).unwrap());
        let cfg = TrainConfig {
            epochs: 30,
            salient_subset_ratio: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let model = train_phase1(&data, &NetworkConfig::toy(16, 16, 4), &cfg, None).unwrap();
        (data, model)
    })
}
