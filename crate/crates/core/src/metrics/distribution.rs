//! Fréchet and kernel distances between feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureSet;
use crate::error::{Error, Result};

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn fit(f: &FeatureSet) -> Result<Self> {
        if f.n < 2 {
            return Err(Error::param("features", format!("{} rows; at least 2 are needed", f.n)));
        }
        let x = DMatrix::from_row_slice(f.n, f.d, &f.data);
        let mean = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (f.n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }
}

fn eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let diag = m.diagonal();
    let scale = diag.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    SymmetricEigen::try_new(m, 1e-14, 10_000).ok_or_else(|| Error::Numeric {
        message: format!("eigendecomposition of {what} did not converge (largest diagonal {scale:.3e})"),
        timestep: None,
    })
}

/// Negative eigenvalues from round-off are clamped to zero.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = eigen(m.clone(), "covariance")?;
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape(&[a.mean.len()], &[b.mean.len()]));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.cov)?;
    let mut inner = &sa * &b.cov * &sa;
    inner = (&inner + inner.transpose()) * 0.5;
    let e = eigen(inner, "covariance product")?;
    let cross: f64 = e.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = diff + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    if !d.is_finite() {
        let (lo, hi) = e.eigenvalues.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        return Err(Error::Numeric {
            message: format!("non-finite FID; product eigenvalues in [{lo:.3e}, {hi:.3e}]"),
            timestep: None,
        });
    }
    Ok(d.max(0.0))
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.d != b.d {
        return Err(Error::shape(&[a.d], &[b.d]));
    }
    frechet_distance(&GaussianStats::fit(a)?, &GaussianStats::fit(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidParams {
    /// Defaults to `min(1000, N_a, N_b)`.
    pub subset_size: Option<usize>,
    pub n_subsets: usize,
    pub seed: u64,
}

impl Default for KidParams {
    fn default() -> Self {
        Self { subset_size: None, n_subsets: 100, seed: 0 }
    }
}

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² between two equal-sized sets under the cubic kernel.
pub fn mmd2_unbiased(x: &FeatureSet, y: &FeatureSet) -> f64 {
    let m = x.n as f64;
    let n = y.n as f64;
    let mut kxx = 0.0;
    for i in 0..x.n {
        for j in 0..x.n {
            if i != j {
                kxx += poly_kernel(x.row(i), x.row(j));
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.n {
        for j in 0..y.n {
            if i != j {
                kyy += poly_kernel(y.row(i), y.row(j));
            }
        }
    }
    let mut kxy = 0.0;
    for i in 0..x.n {
        for j in 0..y.n {
            kxy += poly_kernel(x.row(i), y.row(j));
        }
    }
    kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n)
}

/// Mean and standard deviation of MMD² over seeded random subsets. Subset
/// rows keep ascending order; a subset covering a whole set uses it as is.
pub fn kid(a: &FeatureSet, b: &FeatureSet, params: KidParams) -> Result<(f64, f64)> {
    if a.d != b.d {
        return Err(Error::shape(&[a.d], &[b.d]));
    }
    let max = a.n.min(b.n);
    let m = params.subset_size.unwrap_or(max.min(1000));
    if m > max {
        return Err(Error::param("subset_size", format!("{m} exceeds the smaller set size {max}")));
    }
    if m < 2 {
        return Err(Error::param("subset_size", "must be at least 2"));
    }
    if params.n_subsets == 0 {
        return Err(Error::param("n_subsets", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let draw = |set: &FeatureSet, rng: &mut ChaCha8Rng| -> FeatureSet {
        if m == set.n {
            return set.clone();
        }
        let mut idx = sample(rng, set.n, m).into_vec();
        idx.sort_unstable();
        set.select(&idx)
    };
    let vals: Vec<f64> = (0..params.n_subsets)
        .map(|_| {
            let x = draw(a, &mut rng);
            let y = draw(b, &mut rng);
            mmd2_unbiased(&x, &y)
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}
