//! Distribution metrics over feature embeddings: FID, KID, k-NN precision and
//! recall, and Mahalanobis outlier ranking.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Eigenvalues down to this (scaled) slack are treated as zero.
const EIGEN_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(features: &Array2<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::Metric(format!("fit_gaussian needs at least 2 samples, got {n}")));
    }
    let mean = features.mean_axis(Axis(0)).unwrap();
    let centered = features - &mean;
    let mut cov = centered.t().dot(&centered) / (n - 1) as f64;
    let d = cov.nrows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = v;
            cov[[j, i]] = v;
        }
    }
    Ok(GaussianStats { mean, covariance: cov, n })
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn clipped_eigenvalues(eig: &DVector<f64>, what: &str) -> Result<Vec<f64>> {
    let scale = eig.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    eig.iter()
        .map(|&v| {
            if v >= 0.0 {
                Ok(v)
            } else if v >= -EIGEN_SLACK * scale {
                Ok(0.0)
            } else {
                Err(Error::Metric(format!("{what} has eigenvalue {v:.3e}; not positive semidefinite")))
            }
        })
        .collect()
}

/// Principal square root of a symmetric PSD matrix.
fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = clipped_eigenvalues(&eig.eigenvalues, "covariance")?;
    let d = DMatrix::from_diagonal(&DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt())));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians. `Tr((Σa Σb)^½)` is computed as
/// the trace of `(√Σa Σb √Σa)^½`, which is symmetric and shares its spectrum.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Metric(format!("fid dimension mismatch: {} vs {}", a.dim(), b.dim())));
    }
    let diff = &a.mean - &b.mean;
    let (ca, cb) = (to_na(&a.covariance), to_na(&b.covariance));
    let ra = sqrt_psd(&ca)?;
    let mut inner = &ra * &cb * &ra;
    inner = (&inner + inner.transpose()) * 0.5;
    let eig = SymmetricEigen::new(inner);
    let cross: f64 = clipped_eigenvalues(&eig.eigenvalues, "sqrt(Σa) Σb sqrt(Σa)")?.iter().map(|v| v.sqrt()).sum();
    let value = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::NonFinite("fid".into()));
    }
    Ok(value.max(0.0))
}

fn poly_kernel(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let d = a.ncols() as f64;
    a.dot(&b.t()).mapv(|v| (v / d + 1.0).powi(3))
}

/// Unbiased squared MMD (U-statistic, diagonal terms excluded in all three
/// kernel sums) with the cubic polynomial kernel, for equal-size sets.
pub fn mmd2_unbiased(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let m = x.nrows() as f64;
    let off_diag = |k: Array2<f64>| k.sum() - k.diag().sum();
    let norm = m * (m - 1.0);
    (off_diag(poly_kernel(x, x)) + off_diag(poly_kernel(y, y)) - 2.0 * off_diag(poly_kernel(x, y))) / norm
}

fn subset(x: &Array2<f64>, m: usize, r: &mut impl rand::Rng) -> Array2<f64> {
    if m == x.nrows() {
        return x.clone();
    }
    let mut idx = index::sample(r, x.nrows(), m).into_vec();
    idx.sort_unstable();
    x.select(Axis(0), &idx)
}

/// Per-subset KID estimates; [`kid`] is their mean.
pub fn kid_subsets(
    a: &Array2<f64>,
    b: &Array2<f64>,
    subset_size: usize,
    n_subsets: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::Metric(format!("kid dimension mismatch: {} vs {}", a.ncols(), b.ncols())));
    }
    if a.nrows() < 2 || b.nrows() < 2 || subset_size < 2 || n_subsets == 0 {
        return Err(Error::Metric("kid needs at least 2 samples per set, subset_size >= 2 and one subset".into()));
    }
    let m = subset_size.min(a.nrows()).min(b.nrows());
    let mut r = rng::stream(seed, "kid");
    Ok((0..n_subsets).map(|_| mmd2_unbiased(&subset(a, m, &mut r), &subset(b, m, &mut r))).collect())
}

/// Kernel inception distance in raw units; multiply by 1000 for the usual tables.
pub fn kid(a: &Array2<f64>, b: &Array2<f64>, subset_size: usize, n_subsets: usize, seed: u64) -> Result<f64> {
    let v = kid_subsets(a, b, subset_size, n_subsets, seed)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Squared distances between rows of `a` and rows of `b`, clamped at zero.
fn sq_dists(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let na: Array1<f64> = a.rows().into_iter().map(|r| r.dot(&r)).collect();
    let nb: Array1<f64> = b.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut d = a.dot(&b.t()) * -2.0;
    for ((i, j), v) in d.indexed_iter_mut() {
        *v = (*v + na[i] + nb[j]).max(0.0);
    }
    d
}

const CHUNK: usize = 512;

/// Squared distance from each row to its k-th nearest other row.
fn knn_radii(x: &Array2<f64>, k: usize) -> Vec<f64> {
    let mut radii = Vec::with_capacity(x.nrows());
    for start in (0..x.nrows()).step_by(CHUNK) {
        let end = (start + CHUNK).min(x.nrows());
        let d = sq_dists(&x.slice(s![start..end, ..]).to_owned(), x);
        for (off, row) in d.rows().into_iter().enumerate() {
            let mut others: Vec<f64> =
                row.iter().enumerate().filter(|&(j, _)| j != start + off).map(|(_, &v)| v).collect();
            let (_, kth, _) = others.select_nth_unstable_by(k - 1, f64::total_cmp);
            radii.push(*kth);
        }
    }
    radii
}

/// Fraction of `query` rows inside the union of k-NN balls around `support`.
fn coverage(support: &Array2<f64>, radii: &[f64], query: &Array2<f64>) -> f64 {
    let mut inside = 0usize;
    for start in (0..query.nrows()).step_by(CHUNK) {
        let end = (start + CHUNK).min(query.nrows());
        let d = sq_dists(&query.slice(s![start..end, ..]).to_owned(), support);
        inside += d.rows().into_iter().filter(|row| row.iter().zip(radii).any(|(v, r)| v <= r)).count();
    }
    inside as f64 / query.nrows() as f64
}

/// Improved precision and recall with k-NN manifold estimates.
pub fn precision_recall(real: &Array2<f64>, fake: &Array2<f64>, k: usize) -> Result<(f64, f64)> {
    if real.ncols() != fake.ncols() {
        return Err(Error::Metric("precision/recall dimension mismatch".into()));
    }
    if k == 0 || real.nrows() < k + 1 || fake.nrows() < k + 1 {
        return Err(Error::Metric(format!(
            "precision/recall needs k >= 1 and at least k+1 = {} samples per set",
            k + 1
        )));
    }
    let precision = coverage(real, &knn_radii(real, k), fake);
    let recall = coverage(fake, &knn_radii(fake, k), real);
    Ok((precision, recall))
}

/// Squared Mahalanobis distance of each sample to `reference`, with a ridge of
/// `1e-6 * trace / d` on the covariance.
pub fn mahalanobis_distances(samples: &Array2<f64>, reference: &GaussianStats) -> Result<Vec<f64>> {
    let d = reference.dim();
    if samples.ncols() != d {
        return Err(Error::Metric(format!("mahalanobis dimension mismatch: {} vs {d}", samples.ncols())));
    }
    let mut cov = to_na(&reference.covariance);
    let ridge = 1e-6 * cov.trace() / d as f64;
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let chol = cov.cholesky().ok_or_else(|| Error::Metric("reference covariance not invertible".into()))?;
    Ok(samples
        .rows()
        .into_iter()
        .map(|row| {
            let diff = DVector::from_iterator(d, row.iter().zip(&reference.mean).map(|(x, m)| x - m));
            let z = chol.l().solve_lower_triangular(&diff).expect("cholesky factor is nonsingular");
            z.dot(&z)
        })
        .collect())
}

/// Indices of the `worst_m` least likely samples, farthest first; ties keep
/// the lower index first.
pub fn mahalanobis_rank(samples: &Array2<f64>, reference: &GaussianStats, worst_m: usize) -> Result<Vec<usize>> {
    let dist = mahalanobis_distances(samples, reference)?;
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&i, &j| dist[j].total_cmp(&dist[i]).then(i.cmp(&j)));
    order.truncate(worst_m);
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KidConfig {
    pub subset_size: usize,
    pub n_subsets: usize,
}

impl Default for KidConfig {
    fn default() -> Self {
        Self { subset_size: 1000, n_subsets: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub step: u64,
    pub fid: f64,
    /// Raw unbiased MMD².
    pub kid: f64,
    pub kid_x1000: f64,
    pub precision: f64,
    pub recall: f64,
    pub probe_accuracies: BTreeMap<String, f64>,
    pub n_real: usize,
    pub n_gen: usize,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        [self.fid, self.kid, self.precision, self.recall].iter().all(|v| v.is_finite())
            && self.probe_accuracies.values().all(|v| v.is_finite())
    }
}

/// All metrics from precomputed metric-extractor features.
pub fn report_from_features(
    step: u64,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    real_stats: Option<&GaussianStats>,
    kid_config: &KidConfig,
    pr_k: usize,
    seed: u64,
) -> Result<MetricReport> {
    let owned;
    let real_stats = match real_stats {
        Some(s) => s,
        None => {
            owned = fit_gaussian(real)?;
            &owned
        }
    };
    let fid = fid(real_stats, &fit_gaussian(fake)?)?;
    let kid = kid(real, fake, kid_config.subset_size, kid_config.n_subsets, seed)?;
    let (precision, recall) = precision_recall(real, fake, pr_k)?;
    Ok(MetricReport {
        step,
        fid,
        kid,
        kid_x1000: kid * 1000.0,
        precision,
        recall,
        probe_accuracies: BTreeMap::new(),
        n_real: real.nrows(),
        n_gen: fake.nrows(),
    })
}
