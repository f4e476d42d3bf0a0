//! The Langevin sampling loop and the ensemble runner.
//!
//! Every method performs
//!
//! ```text
//! x_{k+1} = x_k - eta * g_k + sqrt(2 eta) * xi_k,   xi_k ~ N(0, I)
//! ```
//!
//! and differs only in the gradient estimate `g_k`: the full gradient
//! (LMC), the rescaled minibatch gradient (SGLD), or the aggregated
//! gradient over a snapshot set (AGLD).
//!
//! Gradient evaluations are counted logically: `N` per LMC step, the
//! batch size per SGLD or AGLD step, plus `N` for the snapshot
//! initialization and for each full refresh unless
//! [`SamplerConfig::count_refresh_evals`] is switched off.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::access::{make_accessor, AccessKind, Accessor};
use crate::error::{check_dim, invalid, Error, Result};
use crate::model::{full_grad_into, GradientModel};
use crate::rng::{stream_rng, Stream};
use crate::snapshot::{init_snapshots, BatchEval, SnapshotSet, StorageMode, Updater, UpdaterKind};

/// Which gradient estimate drives the chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Lmc,
    Sgld { access: AccessKind },
    Agld { access: AccessKind, updater: UpdaterKind },
}

impl Method {
    pub fn access(&self) -> Option<AccessKind> {
        match *self {
            Method::Lmc => None,
            Method::Sgld { access } | Method::Agld { access, .. } => Some(access),
        }
    }

    pub fn updater(&self) -> Option<UpdaterKind> {
        match *self {
            Method::Agld { updater, .. } => Some(updater),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Lmc => f.write_str("LMC"),
            Method::Sgld { access: AccessKind::Random } => f.write_str("SGLD"),
            Method::Sgld { access } => write!(f, "SGLD-{access}"),
            Method::Agld { access, updater } => write!(f, "{updater}-{access}"),
        }
    }
}

/// When the chain stops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    Iterations(u64),
    /// Stop once `grad_evals >= passes * N`.
    DataPasses(f64),
}

/// Starting point `x_0`.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Init {
    #[default]
    Zeros,
    Point(Vec<f64>),
    /// `x_0 = center + sd * N(0, I)`, drawn from the chain's init stream.
    Gaussian { center: Vec<f64>, sd: f64 },
}

/// Which iterates a trajectory keeps (the final iterate is always kept).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Record {
    #[default]
    FinalOnly,
    /// Every `stride`-th iterate from `burn_in` on, starting with `x_0`.
    Stride(u64),
    /// `x_0` and the first iterate at or beyond every whole data pass.
    Epochs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    pub eta: f64,
    pub stop: Stop,
    /// Minibatch size `n`.
    pub batch: usize,
    /// Refresh period `D`; `None` means `N`.
    pub epoch: Option<u64>,
    pub storage: StorageMode,
    pub seed: u64,
    /// Chain index; with `seed` it keys the chain's random streams.
    pub chain: u64,
    pub init: Init,
    pub record: Record,
    pub burn_in: u64,
    pub count_refresh_evals: bool,
    /// Inject Gaussian noise. Off turns the chain into the matching
    /// optimizer, which tests use to isolate gradient behaviour.
    pub noise: bool,
    /// Abort with [`Error::Diverged`] once `|x|` exceeds this.
    pub max_norm: f64,
    /// Pair chains antithetically: an odd chain reuses the random streams
    /// of the even chain before it with the initial point and every noise
    /// draw negated. For targets symmetric under `x -> -x` (odd
    /// gradients) the pair is an exact mirror image.
    pub antithetic: bool,
}

impl SamplerConfig {
    pub fn new(method: Method, eta: f64, iterations: u64) -> Self {
        Self {
            method,
            eta,
            stop: Stop::Iterations(iterations),
            batch: 1,
            epoch: None,
            storage: StorageMode::Auto,
            seed: 0,
            chain: 0,
            init: Init::Zeros,
            record: Record::FinalOnly,
            burn_in: 0,
            count_refresh_evals: true,
            noise: true,
            max_norm: 1e8,
            antithetic: false,
        }
    }

    fn validate<M: GradientModel + ?Sized>(&self, model: &M) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(invalid(format!("step size must be positive, got {}", self.eta)));
        }
        if let Stop::DataPasses(p) = self.stop {
            if !(p.is_finite() && p >= 0.0) {
                return Err(invalid(format!("data-pass budget must be non-negative, got {p}")));
            }
        }
        if let Record::Stride(0) = self.record {
            return Err(invalid("record stride must be at least 1"));
        }
        if model.n_components() == 0 {
            return Err(invalid("model has no components"));
        }
        Ok(())
    }
}

/// One recorded iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub k: u64,
    pub grad_evals: u64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub chain: u64,
    pub samples: Vec<Sample>,
    pub final_x: Vec<f64>,
    pub iterations: u64,
    pub grad_evals: u64,
}

impl Trajectory {
    pub fn final_iterate(&self) -> &[f64] {
        &self.final_x
    }

    /// The first recorded iterate with at least `epoch * n` gradient
    /// evaluations.
    pub fn at_epoch(&self, epoch: u64, n: usize) -> Option<&[f64]> {
        let need = epoch * n as u64;
        self.samples.iter().find(|s| s.grad_evals >= need).map(|s| s.x.as_slice())
    }
}

/// CSV of recorded iterates, header `chain,k,grad_evals,x_0,...`.
pub fn write_trajectories_csv<W: Write>(trajectories: &[Trajectory], mut out: W) -> Result<()> {
    let d = trajectories.first().map_or(0, |t| t.final_x.len());
    let mut header = String::from("chain,k,grad_evals");
    for j in 0..d {
        header.push_str(&format!(",x_{j}"));
    }
    writeln!(out, "{header}")?;
    for t in trajectories {
        for s in &t.samples {
            write!(out, "{},{},{}", t.chain, s.k, s.grad_evals)?;
            for v in &s.x {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// A running chain: iterate, snapshot set, access state and noise stream.
pub struct Chain {
    cfg: SamplerConfig,
    updater: Option<Updater>,
    x: Vec<f64>,
    next: Vec<f64>,
    g: Vec<f64>,
    tmp: Vec<f64>,
    k: u64,
    grad_evals: u64,
    accessor: Option<Accessor>,
    batch: Vec<usize>,
    snapshots: Option<SnapshotSet>,
    eval: BatchEval,
    noise_rng: ChaCha8Rng,
    noise_sign: f64,
}

impl Chain {
    pub fn new<M: GradientModel + ?Sized>(cfg: &SamplerConfig, model: &M) -> Result<Self> {
        let mut chain = Self::bare(cfg, model)?;
        if let Method::Agld { .. } = cfg.method {
            let snaps = init_snapshots(model, &chain.x, cfg.storage)?;
            if cfg.count_refresh_evals {
                chain.grad_evals += model.n_components() as u64;
            }
            chain.snapshots = Some(snaps);
        }
        Ok(chain)
    }

    /// An AGLD chain over a caller-provided snapshot set (not counted as
    /// gradient evaluations).
    pub fn with_snapshots<M: GradientModel + ?Sized>(cfg: &SamplerConfig, model: &M, snapshots: SnapshotSet) -> Result<Self> {
        if !matches!(cfg.method, Method::Agld { .. }) {
            return Err(invalid("snapshots only apply to AGLD"));
        }
        check_dim(model.n_components(), snapshots.len())?;
        check_dim(model.dim(), snapshots.dim())?;
        let mut chain = Self::bare(cfg, model)?;
        chain.snapshots = Some(snapshots);
        Ok(chain)
    }

    fn bare<M: GradientModel + ?Sized>(cfg: &SamplerConfig, model: &M) -> Result<Self> {
        cfg.validate(model)?;
        let (n, d) = (model.n_components(), model.dim());
        let (key, sign) = match cfg.antithetic && cfg.chain % 2 == 1 {
            true => (cfg.chain - 1, -1.0),
            false => (cfg.chain, 1.0),
        };
        let mut x = match &cfg.init {
            Init::Zeros => vec![0.0; d],
            Init::Point(p) => {
                check_dim(d, p.len())?;
                p.clone()
            }
            Init::Gaussian { center, sd } => {
                check_dim(d, center.len())?;
                let mut rng = stream_rng(cfg.seed, key, Stream::Init);
                center.iter().map(|c| c + sd * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        };
        x.iter_mut().for_each(|v| *v *= sign);
        let accessor = match cfg.method.access() {
            Some(kind) => Some(make_accessor(kind, n, cfg.batch, stream_rng(cfg.seed, key, Stream::Access))?),
            None => None,
        };
        let updater = match cfg.method {
            Method::Agld { updater, .. } => Some(Updater::new(updater, cfg.epoch.unwrap_or(n as u64))?),
            _ => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            updater,
            next: vec![0.0; d],
            g: vec![0.0; d],
            tmp: vec![0.0; d],
            x,
            k: 0,
            grad_evals: 0,
            accessor,
            batch: Vec::new(),
            snapshots: None,
            eval: BatchEval::new(),
            noise_rng: stream_rng(cfg.seed, key, Stream::Noise),
            noise_sign: sign,
        })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Number of completed iterations.
    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn grad_evals(&self) -> u64 {
        self.grad_evals
    }

    /// Batch used by the most recent step.
    pub fn last_batch(&self) -> &[usize] {
        &self.batch
    }

    /// Gradient estimate used by the most recent step.
    pub fn last_gradient(&self) -> &[f64] {
        &self.g
    }

    pub fn snapshots(&self) -> Option<&SnapshotSet> {
        self.snapshots.as_ref()
    }

    fn finished(&self, n: usize) -> bool {
        match self.cfg.stop {
            Stop::Iterations(k) => self.k >= k,
            Stop::DataPasses(p) => self.grad_evals as f64 >= p * n as f64,
        }
    }

    /// Advance one iteration.
    pub fn step<M: GradientModel + ?Sized>(&mut self, model: &M) -> Result<()> {
        let n_total = model.n_components();
        if let Some(acc) = &mut self.accessor {
            self.batch.clear();
            self.batch.extend_from_slice(acc.next_batch());
        }
        match self.cfg.method {
            Method::Lmc => {
                full_grad_into(model, &self.x, &mut self.g, &mut self.tmp);
                self.grad_evals += n_total as u64;
            }
            Method::Sgld { .. } => {
                minibatch_gradient(model, &self.x, &self.batch, &mut self.g, &mut self.tmp);
                self.grad_evals += self.batch.len() as u64;
            }
            Method::Agld { .. } => {
                let snaps = self.snapshots.as_ref().expect("AGLD chain has snapshots");
                snaps.aggregated_gradient(model, &self.x, &self.batch, &mut self.eval, &mut self.g)?;
                self.grad_evals += self.batch.len() as u64;
            }
        }
        let eta = self.cfg.eta;
        let sd = (2.0 * eta).sqrt();
        for ((nx, x), g) in self.next.iter_mut().zip(&self.x).zip(&self.g) {
            *nx = x - eta * g;
            if self.cfg.noise {
                *nx += self.noise_sign * sd * self.noise_rng.sample::<f64, _>(StandardNormal);
            }
        }
        if let (Some(snaps), Some(up)) = (&mut self.snapshots, &self.updater) {
            let refresh = up.refresh_after(self.k);
            let evals = snaps.apply_update(up, model, &self.x, &self.next, self.k, &self.batch, Some(&self.eval))?;
            if !refresh || self.cfg.count_refresh_evals {
                self.grad_evals += evals;
            }
        }
        std::mem::swap(&mut self.x, &mut self.next);
        self.k += 1;
        let norm = crate::linalg::norm2(&self.x);
        if !norm.is_finite() || norm > self.cfg.max_norm {
            return Err(Error::Diverged { iteration: self.k });
        }
        Ok(())
    }
}

/// `(N/n) sum_{i in S} grad f_i(x) + prior_grad(x)`.
fn minibatch_gradient<M: GradientModel + ?Sized>(model: &M, x: &[f64], batch: &[usize], out: &mut [f64], tmp: &mut [f64]) {
    let mut corr = vec![0.0; x.len()];
    for &i in batch {
        model.component_grad_into(i, x, tmp);
        crate::linalg::add_assign(&mut corr, tmp);
    }
    let scale = model.n_components() as f64 / batch.len() as f64;
    for (o, c) in out.iter_mut().zip(&corr) {
        *o = scale * c;
    }
    model.add_prior_grad(x, out);
}

/// Run one chain to its stopping rule.
pub fn run_chain<M: GradientModel + ?Sized>(cfg: &SamplerConfig, model: &M) -> Result<Trajectory> {
    drive(Chain::new(cfg, model)?, model)
}

/// Run a chain built by the caller (e.g. via [`Chain::with_snapshots`]).
pub fn drive<M: GradientModel + ?Sized>(mut chain: Chain, model: &M) -> Result<Trajectory> {
    let n = model.n_components();
    let mut samples = Vec::new();
    let mut next_epoch = 1u64;
    let record = |chain: &Chain, samples: &mut Vec<Sample>| {
        samples.push(Sample { k: chain.k, grad_evals: chain.grad_evals, x: chain.x.clone() });
    };
    match chain.cfg.record {
        Record::Stride(_) if chain.cfg.burn_in > 0 => {}
        Record::Stride(_) | Record::Epochs => record(&chain, &mut samples),
        Record::FinalOnly => {}
    }
    while !chain.finished(n) {
        chain.step(model)?;
        match chain.cfg.record {
            Record::Stride(s) if chain.k >= chain.cfg.burn_in && chain.k.is_multiple_of(s) => record(&chain, &mut samples),
            Record::Epochs if chain.grad_evals >= next_epoch * n as u64 => {
                record(&chain, &mut samples);
                next_epoch = chain.grad_evals / n as u64 + 1;
            }
            _ => {}
        }
    }
    Ok(Trajectory {
        chain: chain.cfg.chain,
        samples,
        final_x: chain.x,
        iterations: chain.k,
        grad_evals: chain.grad_evals,
    })
}

/// How an ensemble is scheduled. Every chain owns its random streams, so
/// results do not depend on the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Data-parallel over chains; `threads` caps the worker count.
    /// Without the `parallel` feature this runs sequentially.
    #[default]
    Parallel,
    ParallelWith { threads: usize },
}

/// Run `chains` independent chains `cfg.chain .. cfg.chain + chains`;
/// fails if any chain fails.
pub fn run_ensemble<M: GradientModel + ?Sized>(
    cfg: &SamplerConfig,
    model: &M,
    chains: usize,
    exec: Execution,
) -> Result<Vec<Trajectory>> {
    run_ensemble_each(cfg, model, chains, exec)?.into_iter().collect()
}

/// Like [`run_ensemble`] but reports every chain's outcome, in chain
/// order, so callers can drop diverged chains.
pub fn run_ensemble_each<M: GradientModel + ?Sized>(
    cfg: &SamplerConfig,
    model: &M,
    chains: usize,
    exec: Execution,
) -> Result<Vec<Result<Trajectory>>> {
    let one = |c: usize| {
        let mut cfg = cfg.clone();
        cfg.chain += c as u64;
        run_chain(&cfg, model)
    };
    match exec {
        Execution::Sequential => Ok((0..chains).map(one).collect()),
        Execution::Parallel => Ok(par_map(chains, one)),
        Execution::ParallelWith { threads } => {
            if threads == 0 {
                return Err(invalid("thread count must be at least 1"));
            }
            with_threads(threads, || par_map(chains, one))
        }
    }
}

/// Final iterates of an ensemble.
pub fn ensemble_finals(trajectories: &[Trajectory]) -> Vec<Vec<f64>> {
    trajectories.iter().map(|t| t.final_x.clone()).collect()
}

#[cfg(feature = "parallel")]
fn par_map<T: Send>(chains: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..chains).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Send>(chains: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..chains).map(f).collect()
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(format!("cannot build thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T: Send>(_threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    Ok(f())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_quadratic, QuadraticSpec};

    fn quad() -> crate::model::Quadratic {
        make_quadratic(&QuadraticSpec::sampled(10, 2, 0.5, 2.0, 1)).unwrap()
    }

    #[test]
    fn method_names() {
        assert_eq!(Method::Lmc.to_string(), "LMC");
        assert_eq!(Method::Sgld { access: AccessKind::Random }.to_string(), "SGLD");
        assert_eq!(Method::Sgld { access: AccessKind::Cyclic }.to_string(), "SGLD-CA");
        let m = Method::Agld { access: AccessKind::Reshuffle, updater: UpdaterKind::Tmu };
        assert_eq!(m.to_string(), "TMU-RR");
    }

    #[test]
    fn gradient_eval_accounting() {
        let m = quad();
        let mut cfg = SamplerConfig::new(Method::Lmc, 0.01, 5);
        assert_eq!(run_chain(&cfg, &m).unwrap().grad_evals, 50);
        cfg.method = Method::Sgld { access: AccessKind::Random };
        cfg.batch = 2;
        assert_eq!(run_chain(&cfg, &m).unwrap().grad_evals, 10);
        cfg.method = Method::Agld { access: AccessKind::Cyclic, updater: UpdaterKind::Ptu };
        cfg.epoch = Some(2);
        // init 10 + 5 * 2 + refreshes after k = 1, 3
        assert_eq!(run_chain(&cfg, &m).unwrap().grad_evals, 10 + 10 + 20);
        cfg.count_refresh_evals = false;
        assert_eq!(run_chain(&cfg, &m).unwrap().grad_evals, 10);
    }

    #[test]
    fn data_pass_budget_and_epoch_recording() {
        let m = quad();
        let mut cfg = SamplerConfig::new(Method::Sgld { access: AccessKind::Reshuffle }, 0.01, 0);
        cfg.batch = 5;
        cfg.stop = Stop::DataPasses(3.0);
        cfg.record = Record::Epochs;
        let t = run_chain(&cfg, &m).unwrap();
        assert_eq!(t.iterations, 6);
        let evals: Vec<u64> = t.samples.iter().map(|s| s.grad_evals).collect();
        assert_eq!(evals, vec![0, 10, 20, 30]);
        assert_eq!(t.at_epoch(2, 10).unwrap(), t.samples[2].x.as_slice());
    }

    #[test]
    fn stride_recording_with_burn_in() {
        let m = quad();
        let mut cfg = SamplerConfig::new(Method::Lmc, 0.01, 10);
        cfg.record = Record::Stride(3);
        cfg.burn_in = 4;
        let ks: Vec<u64> = run_chain(&cfg, &m).unwrap().samples.iter().map(|s| s.k).collect();
        assert_eq!(ks, vec![6, 9]);
    }

    #[test]
    fn divergence_is_reported() {
        let m = quad();
        let cfg = SamplerConfig::new(Method::Lmc, 5.0, 1000);
        assert!(matches!(run_chain(&cfg, &m), Err(Error::Diverged { .. })));
    }

    #[test]
    fn rejects_bad_config() {
        let m = quad();
        assert!(run_chain(&SamplerConfig::new(Method::Lmc, 0.0, 1), &m).is_err());
        let mut cfg = SamplerConfig::new(Method::Sgld { access: AccessKind::Cyclic }, 0.01, 1);
        cfg.batch = 3;
        assert!(run_chain(&cfg, &m).is_err());
        cfg.init = Init::Point(vec![1.0]);
        cfg.batch = 2;
        assert!(run_chain(&cfg, &m).is_err());
    }

    #[test]
    fn noiseless_lmc_converges_to_mode() {
        let m = quad();
        let mut cfg = SamplerConfig::new(Method::Lmc, 0.02, 3000);
        cfg.noise = false;
        let t = run_chain(&cfg, &m).unwrap();
        for (a, b) in t.final_iterate().iter().zip(m.target_mean()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ensemble_schedule_does_not_change_results() {
        let m = quad();
        let mut cfg = SamplerConfig::new(Method::Agld { access: AccessKind::Random, updater: UpdaterKind::Ppu }, 0.01, 50);
        cfg.seed = 9;
        let a = run_ensemble(&cfg, &m, 6, Execution::Sequential).unwrap();
        let b = run_ensemble(&cfg, &m, 6, Execution::Parallel).unwrap();
        let c = run_ensemble(&cfg, &m, 6, Execution::ParallelWith { threads: 2 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_ne!(a[0].final_x, a[1].final_x);
    }

    #[test]
    fn antithetic_pairs_mirror_odd_targets() {
        let m = crate::model::make_gmm(&crate::model::GmmSpec::sampled(8, 2, 3)).unwrap();
        let mut cfg = SamplerConfig::new(Method::Agld { access: AccessKind::Random, updater: UpdaterKind::Tmu }, 0.01, 40);
        cfg.init = Init::Gaussian { center: vec![0.0; 2], sd: 1.0 };
        cfg.antithetic = true;
        let t = run_ensemble(&cfg, &m, 4, Execution::Sequential).unwrap();
        for pair in t.chunks(2) {
            let mirrored: Vec<f64> = pair[0].final_x.iter().map(|v| -v).collect();
            assert_eq!(pair[1].final_x, mirrored);
        }
        assert_ne!(t[0].final_x, t[2].final_x);
    }

    #[test]
    fn trajectory_csv() {
        let m = quad();
        let mut cfg = SamplerConfig::new(Method::Lmc, 0.01, 2);
        cfg.record = Record::Stride(1);
        let t = run_chain(&cfg, &m).unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&[t], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "chain,k,grad_evals,x_0,x_1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("0,2,20,"));
    }
}
