use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{FeatureVector, SimilarityError};

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
const SSIM_L: f64 = 1.0;
const FID_EPS: f64 = 1e-6;

/// `a·b / (‖a‖ ‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &FeatureVector, b: &FeatureVector) -> Result<f64, SimilarityError> {
    if a.values.len() != b.values.len() {
        return Err(SimilarityError::Dimension(a.values.len(), b.values.len()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(SimilarityError::ZeroNorm);
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean SSIM over all 8x8 windows (stride 1) of two grayscale frames,
/// with population statistics, `C1 = (0.01 L)²`, `C2 = (0.03 L)²`, `L = 1`.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64, SimilarityError> {
    if x.len() != h * w || y.len() != h * w {
        return Err(SimilarityError::Shape(format!(
            "{} and {} pixels for a {h}x{w} frame",
            x.len(),
            y.len()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(SimilarityError::Shape(format!(
            "{h}x{w} frame is smaller than the SSIM window"
        )));
    }
    let c1 = (0.01 * SSIM_L).powi(2);
    let c2 = (0.03 * SSIM_L).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for di in 0..SSIM_WINDOW {
                for dj in 0..SSIM_WINDOW {
                    let k = (i + di) * w + j + dj;
                    let (a, b) = (x[k], y[k]);
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

/// Sample mean and unbiased covariance of a set of vectors.
pub fn mean_and_covariance(xs: &[FeatureVector]) -> Result<(DVector<f64>, DMatrix<f64>), SimilarityError> {
    if xs.len() < 2 {
        return Err(SimilarityError::TooFewSamples { need: 2, got: xs.len() });
    }
    let d = xs[0].values.len();
    if let Some(bad) = xs.iter().find(|v| v.values.len() != d) {
        return Err(SimilarityError::Dimension(d, bad.values.len()));
    }
    let n = xs.len();
    let m = DMatrix::from_fn(n, d, |i, j| xs[i].values[j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
    let mut centred = m;
    for (j, mut col) in centred.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>, SimilarityError> {
    let eig = SymmetricEigen::new(m.clone());
    let tol = 1e-9 * eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| !l.is_finite() || l < -tol) {
        return Err(SimilarityError::SingularCovariance);
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Frechet distance between Gaussian fits of two feature sets:
/// `‖μa − μb‖² + tr(Ca + Cb − 2 (Ca Cb)^½)`, with `ε = 1e-6` added to both
/// covariance diagonals. The square-root trace is taken as
/// `tr((√Ca Cb √Ca)^½)`, which is symmetric. Floored at 0.
pub fn fid(a: &[FeatureVector], b: &[FeatureVector]) -> Result<f64, SimilarityError> {
    let (ma, ca) = mean_and_covariance(a)?;
    let (mb, cb) = mean_and_covariance(b)?;
    if ma.len() != mb.len() {
        return Err(SimilarityError::Dimension(ma.len(), mb.len()));
    }
    let d = ma.len();
    let eye = DMatrix::<f64>::identity(d, d) * FID_EPS;
    let ca = ca + &eye;
    let cb = cb + &eye;
    let ra = sym_sqrt(&ca)?;
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let tol = 1e-9 * eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| !l.is_finite() || l < -tol) {
        return Err(SimilarityError::SingularCovariance);
    }
    let cross: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = (&ma - &mb).norm_squared();
    Ok((diff + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::super::FeatureSource;
    use super::*;

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec(), FeatureSource::Inception, "")
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&fv(&[1.0, 0.0]), &fv(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&fv(&[1.0, 0.0]), &fv(&[0.0, 1.0])).unwrap(), 0.0);
        assert!((cosine(&fv(&[1.0, 2.0]), &fv(&[2.0, 4.0])).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(
            cosine(&fv(&[0.0, 0.0]), &fv(&[1.0, 0.0])),
            Err(SimilarityError::ZeroNorm)
        ));
        assert!(matches!(
            cosine(&fv(&[1.0]), &fv(&[1.0, 0.0])),
            Err(SimilarityError::Dimension(1, 2))
        ));
    }

    #[test]
    fn ssim_identity_and_small_frames() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        assert_eq!(ssim(&x, &x, 10, 10).unwrap(), 1.0);
        assert!(ssim(&x[..49], &x[..49], 7, 7).is_err());
    }

    #[test]
    fn fid_needs_two_samples() {
        assert!(matches!(
            fid(&[fv(&[1.0])], &[fv(&[1.0]), fv(&[2.0])]),
            Err(SimilarityError::TooFewSamples { .. })
        ));
    }
}
