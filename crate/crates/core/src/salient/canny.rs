//! Canny edge detection on a single grayscale frame.

use serde::{Deserialize, Serialize};

use super::SalientError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CannyConfig {
    pub gaussian_sigma: f64,
    /// Side of the square Gaussian kernel; odd.
    pub kernel: usize,
    /// Weak-edge threshold as a fraction of the largest gradient magnitude.
    pub low_threshold: f64,
    /// Strong-edge threshold as a fraction of the largest gradient magnitude.
    pub high_threshold: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        CannyConfig {
            gaussian_sigma: 1.4,
            kernel: 5,
            low_threshold: 0.1,
            high_threshold: 0.3,
        }
    }
}

impl CannyConfig {
    pub fn validate(&self) -> Result<(), SalientError> {
        if self.gaussian_sigma.is_nan() || self.gaussian_sigma <= 0.0 || self.kernel.is_multiple_of(2) {
            return Err(SalientError::InvalidConfig(
                "Gaussian sigma must be positive and the kernel odd".into(),
            ));
        }
        if !(0.0 <= self.low_threshold && self.low_threshold < self.high_threshold && self.high_threshold <= 1.0) {
            return Err(SalientError::InvalidConfig(format!(
                "thresholds must satisfy 0 <= low < high <= 1, got {} and {}",
                self.low_threshold, self.high_threshold
            )));
        }
        Ok(())
    }
}

/// Normalised magnitudes are snapped to this grid before comparisons, so
/// mathematically equal neighbours (common on symmetric edges) compare equal
/// regardless of floating-point summation order.
const MAG_QUANTUM: f64 = 1e-9;

fn clamp_at(img: &[f64], h: usize, w: usize, i: isize, j: isize) -> f64 {
    let i = i.clamp(0, h as isize - 1) as usize;
    let j = j.clamp(0, w as isize - 1) as usize;
    img[i * w + j]
}

pub(crate) fn gaussian_kernel(cfg: &CannyConfig) -> Vec<f64> {
    let r = (cfg.kernel / 2) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .flat_map(|y| (-r..=r).map(move |x| (x, y)))
        .map(|(x, y)| (-((x * x + y * y) as f64) / (2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian blur, Sobel gradients, non-maximum suppression over four
/// directions, double threshold relative to the maximum magnitude, and
/// 8-connected hysteresis. Borders replicate edge pixels. Returns 0/1.
pub fn canny(frame: &[f64], h: usize, w: usize, cfg: &CannyConfig) -> Result<Vec<u8>, SalientError> {
    cfg.validate()?;
    if frame.len() != h * w || h == 0 || w == 0 {
        return Err(SalientError::Shape(format!(
            "{} pixels for a {h}x{w} frame",
            frame.len()
        )));
    }
    let kernel = gaussian_kernel(cfg);
    let r = (cfg.kernel / 2) as isize;
    let ks = cfg.kernel;
    let mut blurred = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += kernel[((dy + r) as usize) * ks + (dx + r) as usize] * clamp_at(frame, h, w, i + dy, j + dx);
                }
            }
            blurred[i as usize * w + j as usize] = acc;
        }
    }

    let mut mag = vec![0.0; h * w];
    let mut dir = vec![0u8; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let p = |di: isize, dj: isize| clamp_at(&blurred, h, w, i + di, j + dj);
            let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let idx = i as usize * w + j as usize;
            mag[idx] = gx.hypot(gy);
            dir[idx] = quantize_direction(gx, gy);
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(vec![0; h * w]);
    }
    let norm: Vec<f64> = mag
        .iter()
        .map(|m| (m / max / MAG_QUANTUM).round() * MAG_QUANTUM)
        .collect();

    // Non-maximum suppression: keep pixels not smaller than either neighbour
    // along the gradient direction.
    let mut thin = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let idx = i as usize * w + j as usize;
            let (di, dj) = match dir[idx] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            let m = norm[idx];
            let a = neighbour(&norm, h, w, i + di, j + dj);
            let b = neighbour(&norm, h, w, i - di, j - dj);
            if m >= a && m >= b {
                thin[idx] = m;
            }
        }
    }

    let mut out = vec![0u8; h * w];
    let mut stack: Vec<usize> = Vec::new();
    for (idx, &m) in thin.iter().enumerate() {
        if m >= cfg.high_threshold && m > 0.0 {
            out[idx] = 1;
            stack.push(idx);
        }
    }
    while let Some(idx) = stack.pop() {
        let (i, j) = ((idx / w) as isize, (idx % w) as isize);
        for di in -1..=1 {
            for dj in -1..=1 {
                let (y, x) = (i + di, j + dj);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let n = y as usize * w + x as usize;
                if out[n] == 0 && thin[n] >= cfg.low_threshold && thin[n] > 0.0 {
                    out[n] = 1;
                    stack.push(n);
                }
            }
        }
    }
    Ok(out)
}

fn neighbour(img: &[f64], h: usize, w: usize, i: isize, j: isize) -> f64 {
    if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
        0.0
    } else {
        img[i as usize * w + j as usize]
    }
}

/// 0: horizontal gradient (compare left/right), 1: 45 degrees, 2: vertical,
/// 3: 135 degrees. Image rows grow downwards.
fn quantize_direction(gx: f64, gy: f64) -> u8 {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        0
    } else if angle < 67.5 {
        1
    } else if angle < 112.5 {
        2
    } else {
        3
    }
}
