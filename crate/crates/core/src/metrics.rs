//! Image quality and distribution metrics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::Image;
use crate::error::{Error, Result};

/// Value reported for identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

/// Regularizer added to both covariances when either is singular.
pub const FID_EPS: f64 = 1e-6;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(x: &Image, x_hat: &Image) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::Shape(format!("images {:?} and {:?}", x.dim(), x_hat.dim())));
    }
    let mse = x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len().max(1) as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite("image"));
    }
    Ok(if mse == 0.0 { PSNR_IDENTICAL } else { -10.0 * mse.log10() })
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Fid {
    pub value: f64,
    /// Whether `FID_EPS · I` was added to the covariances.
    pub regularized: bool,
}

/// Mean and unbiased covariance of row samples.
pub fn feature_stats(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::Shape(format!("{n} feature samples, need at least 2")));
    }
    let d = feats[0].len();
    if d == 0 || feats.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    if feats.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    let m = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn sym_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(a.clone());
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

fn is_singular(a: &DMatrix<f64>) -> bool {
    let e = SymmetricEigen::new(a.clone()).eigenvalues;
    let max = e.iter().fold(0.0f64, |m, &l| m.max(l.abs()));
    let min = e.iter().fold(f64::INFINITY, |m, &l| m.min(l));
    min <= 1e-12 * max.max(1.0)
}

/// Fréchet distance between two Gaussians.
/// `Tr((Σ1Σ2)^{1/2})` is taken as `Tr((Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2})`.
pub fn fid_from_stats(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<Fid> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape("statistics differ in dimension".into()));
    }
    let regularized = is_singular(s1) || is_singular(s2);
    let (s1, s2) = if regularized {
        let eps = DMatrix::identity(d, d) * FID_EPS;
        (s1 + &eps, s2 + &eps)
    } else {
        (s1.clone(), s2.clone())
    };
    let r1 = sym_sqrt(&s1);
    let inner = &r1 * &s2 * &r1;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let value = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross;
    Ok(Fid {
        value: value.max(0.0),
        regularized,
    })
}

pub fn fid(real: &[Vec<f64>], fake: &[Vec<f64>]) -> Result<Fid> {
    let (mu1, s1) = feature_stats(real)?;
    let (mu2, s2) = feature_stats(fake)?;
    fid_from_stats(&mu1, &s1, &mu2, &s2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn psnr_closed_form() {
        let x = Array3::from_elem((3, 4, 4), 0.5);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_IDENTICAL);
        let y = x.mapv(|v| v + 0.1);
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_1d() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let f = fid_from_stats(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &one).unwrap();
        assert!((f.value - 1.0).abs() < 1e-12);
        assert!(!f.regularized);
    }
}
