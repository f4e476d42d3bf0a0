//! Target distributions `p*(x) ∝ exp(-f(x))` with
//! `f(x) = sum_i f_i(x) + prior(x)`.
//!
//! A [`GradientModel`] exposes the `N` component gradients of the
//! likelihood part separately from the prior gradient. Samplers apply
//! variance reduction to the components only and evaluate the prior
//! exactly every step; [`PriorFolded`] gives the alternative reading in
//! which the prior is split evenly across the components.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, invalid, Error, Result};
use crate::ingest::{Dataset, Features};
use crate::linalg::{axpy, dot, matvec};
use crate::metrics::GaussianSummary;
use crate::rng;

/// Declares `grad f_i(x) = s_i(x) * z_i` for a scalar `s_i` and a fixed
/// data vector `z_i`, so a snapshot needs one scalar per component.
pub trait CompactForm: Sync {
    fn scalar(&self, i: usize, x: &[f64]) -> f64;
    fn data(&self, i: usize) -> &Features;
}

/// A decomposed negative log density.
///
/// `component_grad_into` overwrites `out` with `grad f_i(x)`;
/// `add_prior_grad` adds the prior gradient into `out`. Callers guarantee
/// `i < n_components()` and slice lengths equal to `dim()`; the checked
/// entry points are [`component_grad`] and [`full_grad`].
pub trait GradientModel: Sync {
    fn dim(&self) -> usize;
    fn n_components(&self) -> usize;
    fn component_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]);

    fn add_prior_grad(&self, _x: &[f64], _out: &mut [f64]) {}

    fn has_prior(&self) -> bool {
        false
    }

    fn neg_log_density(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    fn compact(&self) -> Option<&dyn CompactForm> {
        None
    }
}

impl<T: GradientModel + ?Sized> GradientModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_components(&self) -> usize {
        (**self).n_components()
    }
    fn component_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        (**self).component_grad_into(i, x, out)
    }
    fn add_prior_grad(&self, x: &[f64], out: &mut [f64]) {
        (**self).add_prior_grad(x, out)
    }
    fn has_prior(&self) -> bool {
        (**self).has_prior()
    }
    fn neg_log_density(&self, x: &[f64]) -> Option<f64> {
        (**self).neg_log_density(x)
    }
    fn compact(&self) -> Option<&dyn CompactForm> {
        (**self).compact()
    }
}

impl<T: GradientModel + ?Sized + Send> GradientModel for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn n_components(&self) -> usize {
        (**self).n_components()
    }
    fn component_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        (**self).component_grad_into(i, x, out)
    }
    fn add_prior_grad(&self, x: &[f64], out: &mut [f64]) {
        (**self).add_prior_grad(x, out)
    }
    fn has_prior(&self) -> bool {
        (**self).has_prior()
    }
    fn neg_log_density(&self, x: &[f64]) -> Option<f64> {
        (**self).neg_log_density(x)
    }
    fn compact(&self) -> Option<&dyn CompactForm> {
        (**self).compact()
    }
}

/// `grad f_i(x)`, with index and dimension checks.
pub fn component_grad<M: GradientModel + ?Sized>(model: &M, i: usize, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(model.dim(), x.len())?;
    if i >= model.n_components() {
        return Err(Error::IndexOutOfRange { index: i, len: model.n_components() });
    }
    let mut out = vec![0.0; x.len()];
    model.component_grad_into(i, x, &mut out);
    Ok(out)
}

/// `sum_i grad f_i(x) + prior_grad(x)`, summed in index order.
pub fn full_grad<M: GradientModel + ?Sized>(model: &M, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(model.dim(), x.len())?;
    let mut out = vec![0.0; x.len()];
    let mut tmp = vec![0.0; x.len()];
    full_grad_into(model, x, &mut out, &mut tmp);
    Ok(out)
}

pub(crate) fn likelihood_grad_into<M: GradientModel + ?Sized>(model: &M, x: &[f64], out: &mut [f64], tmp: &mut [f64]) {
    out.fill(0.0);
    for i in 0..model.n_components() {
        model.component_grad_into(i, x, tmp);
        crate::linalg::add_assign(out, tmp);
    }
}

pub(crate) fn full_grad_into<M: GradientModel + ?Sized>(model: &M, x: &[f64], out: &mut [f64], tmp: &mut [f64]) {
    likelihood_grad_into(model, x, out, tmp);
    model.add_prior_grad(x, out);
}

/// Largest `|analytic - central difference| / (1 + |analytic|)` over
/// coordinates of the full gradient at `x`.
pub fn finite_diff_check<M: GradientModel + ?Sized>(model: &M, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = full_grad(model, x)?;
    model.neg_log_density(x).ok_or(Error::MissingDensity)?;
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for (j, a) in analytic.iter().enumerate() {
        probe[j] = x[j] + h;
        let up = model.neg_log_density(&probe).ok_or(Error::MissingDensity)?;
        probe[j] = x[j] - h;
        let down = model.neg_log_density(&probe).ok_or(Error::MissingDensity)?;
        probe[j] = x[j];
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((a - fd).abs() / (1.0 + a.abs()));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Numerically stable scalar helpers.

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^t)` via log-sum-exp.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// `log sigmoid(t)`
pub fn log_sigmoid(t: f64) -> f64 {
    -softplus(-t)
}

/// `log(2 cosh t)`
fn log_2cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p()
}

// ---------------------------------------------------------------------------
// Quadratic: f_i(x) = (x - a_i)' S (x - a_i) / 2.

#[derive(Debug, Clone)]
pub struct QuadraticSpec {
    pub anchors: Vec<Vec<f64>>,
    /// Eigenvalues of `S`; all strictly positive.
    pub sigma_eigs: Vec<f64>,
    /// Seed of the random orthogonal eigenbasis; `None` keeps `S` diagonal.
    pub rotation_seed: Option<u64>,
}

impl QuadraticSpec {
    /// `n` anchors drawn from `N(2*1, 4 I)` and eigenvalues evenly spaced
    /// in `[eig_min, eig_max]`, rotated by a seeded random basis.
    pub fn sampled(n: usize, dim: usize, eig_min: f64, eig_max: f64, seed: u64) -> Self {
        let mut r = rng::stream_rng(seed, 0, rng::Stream::Init);
        let anchors = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| 2.0 + 2.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                    .collect()
            })
            .collect();
        let sigma_eigs = match dim {
            1 => vec![eig_max],
            _ => (0..dim)
                .map(|j| eig_min + (eig_max - eig_min) * j as f64 / (dim - 1) as f64)
                .collect(),
        };
        Self { anchors, sigma_eigs, rotation_seed: Some(seed) }
    }
}

/// Haar-distributed orthogonal matrix from the QR factorization of a
/// Gaussian matrix, with the sign of `R`'s diagonal folded into `Q`.
fn random_orthogonal(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::stream_rng(seed, 0, rng::Stream::Aux);
    let g = DMatrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut r));
    let qr = g.qr();
    let mut q = qr.q();
    let rr = qr.r();
    for j in 0..dim {
        if rr[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[derive(Debug, Clone)]
pub struct Quadratic {
    dim: usize,
    anchors: Vec<f64>,
    sigma: Vec<f64>,
    sigma_mat: DMatrix<f64>,
}

pub fn make_quadratic(spec: &QuadraticSpec) -> Result<Quadratic> {
    let dim = spec.sigma_eigs.len();
    if dim == 0 || spec.anchors.is_empty() {
        return Err(invalid("quadratic model needs at least one anchor and one dimension"));
    }
    if let Some(e) = spec.sigma_eigs.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(invalid(format!("eigenvalue {e} is not strictly positive")));
    }
    let mut anchors = Vec::with_capacity(dim * spec.anchors.len());
    for a in &spec.anchors {
        check_dim(dim, a.len())?;
        anchors.extend_from_slice(a);
    }
    let diag = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.sigma_eigs));
    let sigma_mat = match spec.rotation_seed {
        Some(seed) => {
            let q = random_orthogonal(dim, seed);
            let m = &q * diag * q.transpose();
            (&m + m.transpose()) * 0.5
        }
        None => diag,
    };
    let sigma = sigma_mat.transpose().as_slice().to_vec();
    Ok(Quadratic { dim, anchors, sigma, sigma_mat })
}

impl Quadratic {
    pub fn anchor(&self, i: usize) -> &[f64] {
        &self.anchors[i * self.dim..(i + 1) * self.dim]
    }

    /// The curvature matrix `S` shared by every component.
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma_mat
    }

    pub fn target_mean(&self) -> Vec<f64> {
        let n = self.n_components() as f64;
        let mut m = vec![0.0; self.dim];
        for a in self.anchors.chunks_exact(self.dim) {
            crate::linalg::add_assign(&mut m, a);
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Precision of the Gaussian target: `N * S`.
    pub fn target_precision(&self) -> DMatrix<f64> {
        &self.sigma_mat * self.n_components() as f64
    }

    pub fn target(&self) -> GaussianSummary {
        let cov = self
            .target_precision()
            .try_inverse()
            .expect("S is positive definite by construction");
        GaussianSummary::new(DVector::from_vec(self.target_mean()), (&cov + cov.transpose()) * 0.5)
            .expect("inverse of a positive definite matrix")
    }
}

impl GradientModel for Quadratic {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_components(&self) -> usize {
        self.anchors.len() / self.dim
    }

    fn component_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let a = self.anchor(i);
        // Small fixed-size scratch; dims here are modest.
        let diff: Vec<f64> = x.iter().zip(a).map(|(x, a)| x - a).collect();
        matvec(&self.sigma, &diff, out);
    }

    fn neg_log_density(&self, x: &[f64]) -> Option<f64> {
        let mut sd = vec![0.0; self.dim];
        let total = self
            .anchors
            .chunks_exact(self.dim)
            .map(|a| {
                let diff: Vec<f64> = x.iter().zip(a).map(|(x, a)| x - a).collect();
                matvec(&self.sigma, &diff, &mut sd);
                0.5 * dot(&diff, &sd)
            })
            .sum();
        Some(total)
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixture: exp(-f_i(x)) = e^{-|x-a_i|^2/2} + e^{-|x+a_i|^2/2}.

#[derive(Debug, Clone)]
pub struct GmmSpec {
    pub anchors: Vec<Vec<f64>>,
    /// Divide every `f_i` by `N`, i.e. target `exp(-sum_i f_i / N)`.
    pub scale_by_n: bool,
}

impl GmmSpec {
    /// `n` anchors drawn from `N(2*1, I)`.
    pub fn sampled(n: usize, dim: usize, seed: u64) -> Self {
        let mut r = rng::stream_rng(seed, 0, rng::Stream::Init);
        let anchors = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| 2.0 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                    .collect()
            })
            .collect();
        Self { anchors, scale_by_n: false }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    anchors: Vec<f64>,
    anchor_sq: Vec<f64>,
    weight: f64,
}

pub fn make_gmm(spec: &GmmSpec) -> Result<GaussianMixture> {
    let n = spec.anchors.len();
    let dim = spec.anchors.first().map_or(0, Vec::len);
    if n == 0 || dim == 0 {
        return Err(invalid("mixture model needs at least one anchor and one dimension"));
    }
    let mut anchors = Vec::with_capacity(n * dim);
    for a in &spec.anchors {
        check_dim(dim, a.len())?;
        anchors.extend_from_slice(a);
    }
    let anchor_sq = anchors.chunks_exact(dim).map(|a| dot(a, a)).collect();
    let weight = if spec.scale_by_n { 1.0 / n as f64 } else { 1.0 };
    Ok(GaussianMixture { dim, anchors, anchor_sq, weight })
}

impl GaussianMixture {
    pub fn anchor(&self, i: usize) -> &[f64] {
        &self.anchors[i * self.dim..(i + 1) * self.dim]
    }

    /// Multiplier applied to every component (`1` or `1/N`).
    pub fn component_weight(&self) -> f64 {
        self.weight
    }
}

impl GradientModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_components(&self) -> usize {
        self.anchor_sq.len()
    }

    // f_i = (|x|^2 + |a|^2)/2 - log(2 cosh(a.x)),  grad = x - a tanh(a.x)
    fn component_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let a = self.anchor(i);
        let th = dot(a, x).tanh();
        for ((o, xj), aj) in out.iter_mut().zip(x).zip(a) {
            *o = self.weight * (xj - aj * th);
        }
    }

    fn neg_log_density(&self, x: &[f64]) -> Option<f64> {
        let xx = dot(x, x);
        let total: f64 = self
            .anchors
            .chunks_exact(self.dim)
            .zip(&self.anchor_sq)
            .map(|(a, aa)| 0.5 * (xx + aa) - log_2cosh(dot(a, x)))
            .sum();
        Some(self.weight * total)
    }
}

// ---------------------------------------------------------------------------
// Generalized linear models with Gaussian prior N(0, lambda I).

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlmKind {
    /// `y ~ N(w.x, lambda)`
    Ridge,
    /// `P(y | x, w) = sigmoid(y w.x)`, `y in {-1, +1}`
    Logistic,
}

#[derive(Debug, Clone)]
pub struct GlmSpec {
    pub train: Dataset,
    pub test: Option<Dataset>,
    /// Prior variance (and noise variance for ridge).
    pub lambda: f64,
    pub kind: GlmKind,
}

#[derive(Debug, Clone)]
pub struct Glm {
    kind: GlmKind,
    lambda: f64,
    train: Dataset,
    test: Option<Dataset>,
}

fn make_glm(spec: &GlmSpec, kind: GlmKind) -> Result<Glm> {
    if !(spec.lambda > 0.0 && spec.lambda.is_finite()) {
        return Err(invalid(format!("lambda must be positive, got {}", spec.lambda)));
    }
    for ds in std::iter::once(&spec.train).chain(spec.test.as_ref()) {
        if ds.is_empty() {
            return Err(invalid("empty dataset"));
        }
        if kind == GlmKind::Logistic && ds.labels().any(|y| y != 1.0 && y != -1.0) {
            return Err(invalid("logistic labels must be -1 or +1"));
        }
    }
    if let Some(t) = &spec.test {
        check_dim(spec.train.dim(), t.dim())?;
    }
    Ok(Glm { kind, lambda: spec.lambda, train: spec.train.clone(), test: spec.test.clone() })
}

pub fn make_ridge(spec: &GlmSpec) -> Result<Glm> {
    make_glm(spec, GlmKind::Ridge)
}

pub fn make_logistic(spec: &GlmSpec) -> Result<Glm> {
    make_glm(spec, GlmKind::Logistic)
}

impl Glm {
    pub fn kind(&self) -> GlmKind {
        self.kind
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> Option<&Dataset> {
        self.test.as_ref()
    }

    fn loss(&self, t: f64, y: f64) -> f64 {
        match self.kind {
            GlmKind::Ridge => (y - t) * (y - t) / (2.0 * self.lambda),
            GlmKind::Logistic => softplus(-y * t),
        }
    }
}

impl CompactForm for Glm {
    fn scalar(&self, i: usize, w: &[f64]) -> f64 {
        let row = &self.train.rows()[i];
        let t = row.features.dot(w);
        match self.kind {
            GlmKind::Ridge => -(row.label - t) / self.lambda,
            // -y (1 - sigmoid(y t)) = -y sigmoid(-y t)
            GlmKind::Logistic => -row.label * sigmoid(-row.label * t),
        }
    }

    fn data(&self, i: usize) -> &Features {
        &self.train.rows()[i].features
    }
}

impl GradientModel for Glm {
    fn dim(&self) -> usize {
        self.train.dim()
    }

    fn n_components(&self) -> usize {
        self.train.len()
    }

    fn component_grad_into(&self, i: usize, w: &[f64], out: &mut [f64]) {
        let s = self.scalar(i, w);
        self.data(i).scale_into(s, out);
    }

    fn add_prior_grad(&self, w: &[f64], out: &mut [f64]) {
        axpy(1.0 / self.lambda, w, out);
    }

    fn has_prior(&self) -> bool {
        true
    }

    fn neg_log_density(&self, w: &[f64]) -> Option<f64> {
        let lik: f64 = self
            .train
            .rows()
            .iter()
            .map(|r| self.loss(r.features.dot(w), r.label))
            .sum();
        Some(lik + dot(w, w) / (2.0 * self.lambda))
    }

    fn compact(&self) -> Option<&dyn CompactForm> {
        Some(self)
    }
}

// ---------------------------------------------------------------------------
// Wrappers.

/// `f(x) + lambda |x|^2 / 2`; the extra term goes to the prior gradient.
#[derive(Debug, Clone)]
pub struct Regularized<M> {
    inner: M,
    lambda: f64,
}

pub fn regularize<M: GradientModel>(model: M, lambda_reg: f64) -> Result<Regularized<M>> {
    if !(lambda_reg > 0.0 && lambda_reg.is_finite()) {
        return Err(invalid(format!("regularization must be positive, got {lambda_reg}")));
    }
    Ok(Regularized { inner: model, lambda: lambda_reg })
}

/// `4 eps^2 / (U d^2)`: regularization strength for a target accuracy
/// `eps` given a bound `U` on the second moment of the target.
pub fn regularization_for_accuracy(eps: f64, second_moment: f64, dim: usize) -> f64 {
    4.0 * eps * eps / (second_moment * (dim * dim) as f64)
}

impl<M> Regularized<M> {
    pub fn inner(&self) -> &M {
        &self.inner
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl<M: GradientModel> GradientModel for Regularized<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn n_components(&self) -> usize {
        self.inner.n_components()
    }
    fn component_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        self.inner.component_grad_into(i, x, out)
    }
    fn add_prior_grad(&self, x: &[f64], out: &mut [f64]) {
        self.inner.add_prior_grad(x, out);
        axpy(self.lambda, x, out);
    }
    fn has_prior(&self) -> bool {
        true
    }
    fn neg_log_density(&self, x: &[f64]) -> Option<f64> {
        Some(self.inner.neg_log_density(x)? + 0.5 * self.lambda * dot(x, x))
    }
    fn compact(&self) -> Option<&dyn CompactForm> {
        self.inner.compact()
    }
}

/// Strict reading of the finite-sum target: each component carries
/// `1/N` of the prior, `f_i = loss_i - log p(x) / N`, and there is no
/// separate prior term. Snapshots of this model are always dense.
#[derive(Debug, Clone)]
pub struct PriorFolded<M> {
    inner: M,
}

impl<M: GradientModel> PriorFolded<M> {
    pub fn new(inner: M) -> Self {
        Self { inner }
    }
}

impl<M: GradientModel> GradientModel for PriorFolded<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn n_components(&self) -> usize {
        self.inner.n_components()
    }
    fn component_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        self.inner.component_grad_into(i, x, out);
        if self.inner.has_prior() {
            let mut prior = vec![0.0; x.len()];
            self.inner.add_prior_grad(x, &mut prior);
            axpy(1.0 / self.inner.n_components() as f64, &prior, out);
        }
    }
    fn neg_log_density(&self, x: &[f64]) -> Option<f64> {
        self.inner.neg_log_density(x)
    }
}

/// Counts component-gradient evaluations; used to audit sampler costs.
#[derive(Debug)]
pub struct Counting<M> {
    inner: M,
    calls: AtomicU64,
}

impl<M> Counting<M> {
    pub fn new(inner: M) -> Self {
        Self { inner, calls: AtomicU64::new(0) }
    }
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed)
    }
}

impl<M: GradientModel> CompactForm for Counting<M> {
    fn scalar(&self, i: usize, x: &[f64]) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.compact().expect("forwarded only when present").scalar(i, x)
    }
    fn data(&self, i: usize) -> &Features {
        self.inner.compact().expect("forwarded only when present").data(i)
    }
}

impl<M: GradientModel> GradientModel for Counting<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn n_components(&self) -> usize {
        self.inner.n_components()
    }
    fn component_grad_into(&self, i: usize, x: &[f64], out: &mut [f64]) {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.component_grad_into(i, x, out)
    }
    fn add_prior_grad(&self, x: &[f64], out: &mut [f64]) {
        self.inner.add_prior_grad(x, out)
    }
    fn has_prior(&self) -> bool {
        self.inner.has_prior()
    }
    fn neg_log_density(&self, x: &[f64]) -> Option<f64> {
        self.inner.neg_log_density(x)
    }
    fn compact(&self) -> Option<&dyn CompactForm> {
        self.inner.compact().map(|_| self as &dyn CompactForm)
    }
}
