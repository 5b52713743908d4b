mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use sttl_core::similarity::{cosine, fid, ssim, FeatureSource, FeatureVector, SimilarityError};

fn fv(v: Vec<f64>) -> FeatureVector {
    FeatureVector::new(v, FeatureSource::Inception, "")
}

/// Samples from N(mean, S) with S given as `[s11, s12, s22]`.
fn gaussian_2d(n: usize, mean: [f64; 2], cov: [f64; 3], seed: u64) -> Vec<FeatureVector> {
    let [a, b, c] = cov;
    let l11 = a.sqrt();
    let l21 = b / l11;
    let l22 = (c - l21 * l21).sqrt();
    let mut rng = common::rng(seed);
    (0..n)
        .map(|_| {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            fv(vec![mean[0] + l11 * z1, mean[1] + l21 * z1 + l22 * z2])
        })
        .collect()
}

/// Frechet distance between two 2-D Gaussians in closed form. For 2x2
/// matrices with positive eigenvalues `tr √M = √(tr M + 2 √det M)`.
fn fid_closed_form(m1: [f64; 2], s1: [f64; 3], m2: [f64; 2], s2: [f64; 3]) -> f64 {
    let p = [[s1[0], s1[1]], [s1[1], s1[2]]];
    let q = [[s2[0], s2[1]], [s2[1], s2[2]]];
    let tr_pq = p[0][0] * q[0][0] + p[0][1] * q[1][0] + p[1][0] * q[0][1] + p[1][1] * q[1][1];
    let det_p = p[0][0] * p[1][1] - p[0][1] * p[1][0];
    let det_q = q[0][0] * q[1][1] - q[0][1] * q[1][0];
    let tr_sqrt = (tr_pq + 2.0 * (det_p * det_q).sqrt()).sqrt();
    let dm = (m1[0] - m2[0]).powi(2) + (m1[1] - m2[1]).powi(2);
    dm + s1[0] + s1[2] + s2[0] + s2[2] - 2.0 * tr_sqrt
}

#[test]
fn fid_matches_gaussian_closed_form() {
    let (m1, s1) = ([0.0, 0.0], [1.0, 0.3, 0.5]);
    let (m2, s2) = ([1.0, -0.5], [2.0, -0.4, 1.0]);
    let a = gaussian_2d(10_000, m1, s1, 1);
    let b = gaussian_2d(10_000, m2, s2, 2);
    let want = fid_closed_form(m1, s1, m2, s2);
    let got = fid(&a, &b).unwrap();
    assert!((got - want).abs() / want < 0.05, "fid {got} closed form {want}");
}

#[test]
fn fid_identity_and_shift() {
    let a = gaussian_2d(500, [0.3, -0.2], [1.0, 0.2, 0.7], 3);
    assert!(fid(&a, &a).unwrap() < 1e-6);
    let d = [0.7, -1.1];
    let b: Vec<FeatureVector> = a
        .iter()
        .map(|v| fv(vec![v.values[0] + d[0], v.values[1] + d[1]]))
        .collect();
    let want = d[0] * d[0] + d[1] * d[1];
    assert!((fid(&a, &b).unwrap() - want).abs() < 1e-6);
}

#[test]
fn fid_rejects_bad_input() {
    let one = vec![fv(vec![1.0, 2.0])];
    assert!(matches!(fid(&one, &one), Err(SimilarityError::TooFewSamples { .. })));
    let a = vec![fv(vec![1.0, 2.0]), fv(vec![0.0, 1.0])];
    let b = vec![fv(vec![1.0]), fv(vec![0.0])];
    assert!(matches!(fid(&a, &b), Err(SimilarityError::Dimension(2, 1))));
}

#[test]
fn ssim_constant_frames() {
    let (h, w) = (8, 8);
    let zeros = vec![0.0; h * w];
    let ones = vec![1.0; h * w];
    let c1 = 0.01f64 * 0.01;
    // Means 0 and 1, no variance: only the luminance term survives.
    let want = c1 / (1.0 + c1);
    assert!((ssim(&zeros, &ones, h, w).unwrap() - want).abs() < 1e-12);
    assert!((ssim(&ones, &ones, h, w).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_shape_errors() {
    let x = vec![0.5; 7 * 7];
    assert!(matches!(ssim(&x, &x, 7, 7), Err(SimilarityError::Shape(_))));
    assert!(matches!(ssim(&x, &x, 8, 8), Err(SimilarityError::Shape(_))));
}

#[test]
fn ssim_single_window_reference() {
    // One 8x8 window: the mean over windows is that window's value.
    let mut rng = common::rng(9);
    let x: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
    let y: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
    let n = 64.0;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let vx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
    let vy = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
    let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let (c1, c2) = (1e-4, 9e-4);
    let want = (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    assert!((ssim(&x, &y, 8, 8).unwrap() - want).abs() < 1e-12);
}

fn frame(h: usize, w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, h * w)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cosine_invariants(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6), k in 0.1f64..10.0) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let (fa, fb) = (fv(a.clone()), fv(b.clone()));
        let c = cosine(&fa, &fb).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((c - cosine(&fb, &fa).unwrap()).abs() < 1e-12);
        prop_assert!((cosine(&fa, &fa).unwrap() - 1.0).abs() < 1e-9);
        let scaled = fv(a.iter().map(|v| v * k).collect());
        prop_assert!((cosine(&scaled, &fb).unwrap() - c).abs() < 1e-9);
    }

    #[test]
    fn ssim_invariants(x in frame(10, 12), y in frame(10, 12)) {
        let s = ssim(&x, &y, 10, 12).unwrap();
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s));
        prop_assert!((s - ssim(&y, &x, 10, 12).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&x, &x, 10, 12).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fid_invariants(seed in any::<u64>(), dx in -3.0f64..3.0, dy in -3.0f64..3.0) {
        let a = gaussian_2d(40, [0.0, 0.0], [1.0, 0.1, 0.8], seed);
        let b = gaussian_2d(40, [dx, dy], [0.6, -0.2, 1.5], seed ^ 0x55);
        let ab = fid(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-6 * ab.max(1.0));
        prop_assert!(fid(&a, &a).unwrap() < 1e-6);
    }
}
