//! Distribution distances and predictive metrics.
//!
//! - closed-form 2-Wasserstein distance between Gaussians (Bures formula)
//! - sliced 2-Wasserstein distance between sample clouds
//! - test MSE and average test log-likelihood for the linear models
//! - the exact stationary covariance of discretized Langevin dynamics on a
//!   quadratic (discrete Lyapunov equation)

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, invalid, Error, Result};
use crate::ingest::Dataset;
use crate::model::log_sigmoid;
use crate::rng;

/// Eigenvalues above `-PSD_TOL` are clipped to zero.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    /// Checks shape and symmetry (to 1e-12 relative) and symmetrizes.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: cov.nrows() });
        }
        let scale = cov.amax().max(1.0);
        if (&cov - cov.transpose()).amax() > 1e-12 * scale {
            return Err(invalid("covariance is not symmetric"));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased sample covariance.
pub fn empirical_moments<S: AsRef<[f64]>>(samples: &[S]) -> Result<GaussianSummary> {
    if samples.len() < 2 {
        return Err(invalid("empirical moments need at least two samples"));
    }
    let d = samples[0].as_ref().len();
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(d);
    for s in samples {
        check_dim(d, s.as_ref().len())?;
        mean += DVector::from_column_slice(s.as_ref());
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s.as_ref()) - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n - 1.0;
    GaussianSummary::new(mean, cov)
}

/// `W2(N(m_a, C_a), N(m_b, C_b))` via
/// `|m_a - m_b|^2 + tr(C_a + C_b - 2 (C_b^1/2 C_a C_b^1/2)^1/2)`.
pub fn gaussian_w2(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    // Order the arguments canonically so the result is exactly symmetric.
    let (a, b) = if (a.cov.as_slice(), a.mean.as_slice()) <= (b.cov.as_slice(), b.mean.as_slice()) {
        (a, b)
    } else {
        (b, a)
    };
    let root_b = crate::linalg::sqrt_psd(&b.cov, PSD_TOL)?;
    crate::linalg::psd_eigen(&a.cov, PSD_TOL)?;
    let cross = crate::linalg::sqrt_psd(&(&root_b * &a.cov * &root_b), PSD_TOL)?;
    let mean_sq = (&a.mean - &b.mean).norm_squared();
    let bures = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok((mean_sq + bures.max(0.0)).sqrt())
}

/// Squared 1-D W2 between two empirical distributions given as sorted
/// samples, integrating the difference of quantile functions exactly.
fn w2_sq_sorted(u: &[f64], v: &[f64]) -> f64 {
    if u.len() == v.len() {
        return u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / u.len() as f64;
    }
    let (m, n) = (u.len(), v.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0.0;
    let mut acc = 0.0;
    while i < m && j < n {
        let next_u = (i + 1) as f64 / m as f64;
        let next_v = (j + 1) as f64 / n as f64;
        let next = next_u.min(next_v);
        let diff = u[i] - v[j];
        acc += (next - t) * diff * diff;
        t = next;
        if next_u <= next {
            i += 1;
        }
        if next_v <= next {
            j += 1;
        }
    }
    acc
}

/// Sliced 2-Wasserstein distance: the root mean over `n_proj` random
/// unit directions of the squared 1-D W2 between the projected clouds.
/// Clouds of different sizes are compared through their quantile
/// functions. Deterministic given `seed` and symmetric in `(a, b)`.
pub fn sliced_w2<S: AsRef<[f64]>, T: AsRef<[f64]>>(a: &[S], b: &[T], n_proj: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("sliced W2 needs non-empty clouds"));
    }
    if n_proj == 0 {
        return Err(invalid("sliced W2 needs at least one projection"));
    }
    let d = a[0].as_ref().len();
    for s in a.iter().map(AsRef::as_ref).chain(b.iter().map(AsRef::as_ref)) {
        check_dim(d, s.len())?;
    }
    let mut r = rng::seeded(seed);
    let mut dir = vec![0.0; d];
    let mut pa = vec![0.0; a.len()];
    let mut pb = vec![0.0; b.len()];
    let mut total = 0.0;
    for _ in 0..n_proj {
        loop {
            dir.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut r));
            let norm = crate::linalg::norm2(&dir);
            if norm > 1e-12 {
                dir.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        for (p, s) in pa.iter_mut().zip(a) {
            *p = crate::linalg::dot(s.as_ref(), &dir);
        }
        for (p, s) in pb.iter_mut().zip(b) {
            *p = crate::linalg::dot(s.as_ref(), &dir);
        }
        pa.sort_by(f64::total_cmp);
        pb.sort_by(f64::total_cmp);
        // min/max ordering keeps the sum independent of argument order.
        let (x, y) = if (pa.len(), pa.as_slice()) <= (pb.len(), pb.as_slice()) { (&pa, &pb) } else { (&pb, &pa) };
        total += w2_sq_sorted(x, y);
    }
    Ok((total / n_proj as f64).sqrt())
}

fn check_eval_inputs<S: AsRef<[f64]>>(samples: &[S], test: &Dataset) -> Result<()> {
    if samples.is_empty() {
        return Err(invalid("no posterior samples"));
    }
    if test.is_empty() {
        return Err(invalid("empty test set"));
    }
    for s in samples {
        check_dim(test.dim(), s.as_ref().len())?;
    }
    Ok(())
}

/// Mean squared error of the posterior-predictive mean `x' E[w]`.
pub fn test_mse<S: AsRef<[f64]>>(samples: &[S], test: &Dataset) -> Result<f64> {
    check_eval_inputs(samples, test)?;
    let mut mean_w = vec![0.0; test.dim()];
    for s in samples {
        crate::linalg::add_assign(&mut mean_w, s.as_ref());
    }
    mean_w.iter_mut().for_each(|v| *v /= samples.len() as f64);
    let sse: f64 = test
        .rows()
        .iter()
        .map(|r| {
            let e = r.label - r.features.dot(&mean_w);
            e * e
        })
        .sum();
    Ok(sse / test.len() as f64)
}

/// Average over samples and test points of `log sigmoid(y w'x)`.
pub fn test_loglik<S: AsRef<[f64]>>(samples: &[S], test: &Dataset) -> Result<f64> {
    check_eval_inputs(samples, test)?;
    if test.labels().any(|y| y != 1.0 && y != -1.0) {
        return Err(invalid("logistic labels must be -1 or +1"));
    }
    let mut total = 0.0;
    for s in samples {
        for r in test.rows() {
            total += log_sigmoid(r.label * r.features.dot(s.as_ref()));
        }
    }
    Ok(total / (samples.len() * test.len()) as f64)
}

/// Fraction of test points whose sign matches `sign(w'x)`.
pub fn test_accuracy(w: &[f64], test: &Dataset) -> f64 {
    let hits = test
        .rows()
        .iter()
        .filter(|r| (r.features.dot(w) >= 0.0) == (r.label > 0.0))
        .count();
    hits as f64 / test.len() as f64
}

/// Stationary covariance of `x' = x - eta A x + sqrt(2 eta) xi`: the
/// unique `C = (I - eta A) C (I - eta A)' + 2 eta I`.
pub fn lyapunov_stationary_cov(precision: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    let d = precision.nrows();
    if precision.ncols() != d {
        return Err(Error::DimensionMismatch { expected: d, got: precision.ncols() });
    }
    if eta.is_nan() || eta <= 0.0 {
        return Err(invalid(format!("stepsize must be positive, got {eta}")));
    }
    let eig = ((precision + precision.transpose()) * 0.5).symmetric_eigen();
    if let Some(l) = eig.eigenvalues.iter().find(|l| **l <= 0.0) {
        return Err(invalid(format!("precision is not positive definite (eigenvalue {l})")));
    }
    let radius = eig
        .eigenvalues
        .iter()
        .map(|l| (1.0 - eta * l).abs())
        .fold(0.0, f64::max);
    if radius >= 1.0 {
        return Err(Error::StepTooLarge { radius });
    }
    let diag = eig.eigenvalues.map(|l| {
        let m = 1.0 - eta * l;
        2.0 * eta / (1.0 - m * m)
    });
    let q = &eig.eigenvectors;
    let c = q * DMatrix::from_diagonal(&diag) * q.transpose();
    Ok((&c + c.transpose()) * 0.5)
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(invalid("bootstrap needs values and resamples"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid(format!("confidence level {level} not in (0, 1)")));
    }
    let mut r = rng::seeded(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    Ok((at(tail), at(1.0 - tail)))
}

/// One row of a metric series.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub access: String,
    pub updater: String,
    pub eta: f64,
    pub epoch: u64,
    pub metric: String,
    pub value: f64,
}

pub const METRIC_HEADER: &str = "method,access,updater,eta,epoch,metric,value";

/// `method,access,updater,eta,epoch,metric,value`
pub fn write_metric_csv<W: Write>(rows: &[MetricRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRIC_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method, r.access, r.updater, r.eta, r.epoch, r.metric, r.value
        )?;
    }
    Ok(())
}
