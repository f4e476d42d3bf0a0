//! Experiment runners: build the model, run every method in the grid as
//! an ensemble of chains, evaluate metrics on the integer data-pass grid
//! and write one metric CSV per method plus the resolved manifest.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use agld::access::make_accessor;
use agld::ingest::{self, Dataset, LabelColumn, LabelScaler};
use agld::iosim::{replay, replay_with_refreshes, write_fault_csv, FaultReport, PageCacheConfig};
use agld::metrics::{self, MetricRow};
use agld::model::{self, GaussianMixture, Glm, GlmKind, GlmSpec, GradientModel, GmmSpec, QuadraticSpec};
use agld::rng::{stream_rng, Stream};
use agld::sampler::{run_ensemble_each, Execution, Init, Method, Record, SamplerConfig, Stop, Trajectory};
use anyhow::{bail, Context, Result};
use rand::Rng;

use crate::config::{Experiment, ExperimentConfig};
use crate::naming::{method_name, parse_method};

/// Chain scheduling from `AGLD_THREADS` (unset: all cores).
pub fn execution_from_env() -> Result<Execution> {
    match std::env::var("AGLD_THREADS") {
        Ok(v) => {
            let threads: usize = v.trim().parse().with_context(|| format!("AGLD_THREADS={v:?} is not a count"))?;
            if threads == 0 {
                bail!("AGLD_THREADS must be at least 1");
            }
            Ok(Execution::ParallelWith { threads })
        }
        Err(_) => Ok(Execution::Parallel),
    }
}

/// Sampler settings shared by every method of an experiment.
pub fn sampler_config(cfg: &ExperimentConfig, method: Method) -> SamplerConfig {
    let mut s = SamplerConfig::new(method, cfg.eta, 0);
    s.stop = Stop::DataPasses(cfg.epochs as f64);
    s.batch = cfg.batch;
    s.epoch = cfg.refresh_period;
    s.seed = cfg.seed;
    s.record = Record::Epochs;
    s.antithetic = cfg.antithetic;
    s.init = if cfg.model.init_sd > 0.0 {
        Init::Gaussian { center: vec![0.0; cfg.model.dim], sd: cfg.model.init_sd }
    } else {
        Init::Zeros
    };
    s
}

/// Run the ensemble for one method, dropping chains that diverged.
pub fn run_method<M: GradientModel + ?Sized>(
    cfg: &ExperimentConfig,
    model: &M,
    method: Method,
    exec: Execution,
) -> Result<Vec<Trajectory>> {
    let results = run_ensemble_each(&sampler_config(cfg, method), model, cfg.chains, exec)?;
    let total = results.len();
    let ok: Vec<Trajectory> = results.into_iter().filter_map(|r| r.ok()).collect();
    if ok.is_empty() {
        bail!("{}: all {total} chains diverged (eta = {})", method_name(&method), cfg.eta);
    }
    if ok.len() < total {
        eprintln!("{}: {} of {total} chains diverged and were dropped", method_name(&method), total - ok.len());
    }
    Ok(ok)
}

/// Iterates of every chain at data pass `epoch`.
pub fn cloud_at(trajectories: &[Trajectory], epoch: u64, n: usize) -> Vec<Vec<f64>> {
    trajectories.iter().filter_map(|t| t.at_epoch(epoch, n).map(<[f64]>::to_vec)).collect()
}

/// All recorded iterates at or after `burn_in` data passes, pooled over chains.
pub fn pooled_after(trajectories: &[Trajectory], burn_in: u64, n: usize) -> Vec<Vec<f64>> {
    let need = burn_in * n as u64;
    trajectories
        .iter()
        .flat_map(|t| t.samples.iter().filter(move |s| s.grad_evals >= need).map(|s| s.x.clone()))
        .collect()
}

fn project(points: &[Vec<f64>], plane: [usize; 2]) -> Vec<[f64; 2]> {
    points.iter().map(|p| [p[plane[0]], p[plane[1]]]).collect()
}

struct Series {
    method: Method,
    eta: f64,
    rows: Vec<MetricRow>,
}

impl Series {
    fn new(method: Method, eta: f64) -> Self {
        Self { method, eta, rows: Vec::new() }
    }

    fn push(&mut self, epoch: u64, metric: &str, value: f64) {
        let (access, updater) = match self.method {
            Method::Lmc => ("-".to_string(), "-".to_string()),
            Method::Sgld { access } => (access.to_string(), "NONE".to_string()),
            Method::Agld { access, updater } => (access.to_string(), updater.to_string()),
        };
        self.rows.push(MetricRow {
            method: method_name(&self.method),
            access,
            updater,
            eta: self.eta,
            epoch,
            metric: metric.to_string(),
            value,
        });
    }

    /// Mean gradient evaluations of the iterates used at each epoch.
    fn push_grad_evals(&mut self, trajectories: &[Trajectory], epoch: u64, n: usize) {
        let need = epoch * n as u64;
        let evals: Vec<u64> = trajectories
            .iter()
            .filter_map(|t| t.samples.iter().find(|s| s.grad_evals >= need).map(|s| s.grad_evals))
            .collect();
        let mean = evals.iter().sum::<u64>() as f64 / evals.len().max(1) as f64;
        self.push(epoch, "grad_evals", mean);
    }
}

fn methods(cfg: &ExperimentConfig) -> Result<Vec<Method>> {
    cfg.methods.iter().map(|m| parse_method(m)).collect()
}

pub fn quadratic_model(cfg: &ExperimentConfig) -> Result<model::Quadratic> {
    let spec = QuadraticSpec::sampled(cfg.model.n, cfg.model.dim, cfg.model.eig_min, cfg.model.eig_max, cfg.seed);
    Ok(model::make_quadratic(&spec)?)
}

pub fn mixture_model(cfg: &ExperimentConfig) -> Result<GaussianMixture> {
    let mut spec = GmmSpec::sampled(cfg.model.n, cfg.model.dim, cfg.seed);
    spec.scale_by_n = cfg.model.scale_by_n;
    Ok(model::make_gmm(&spec)?)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let reader = ingest::maybe_gunzip(file)?;
    let name = path.to_string_lossy().to_ascii_lowercase();
    let name = name.strip_suffix(".gz").unwrap_or(&name);
    let ds = if name.ends_with(".csv") {
        ingest::parse_csv(reader, &LabelColumn::Name("label".into()))
    } else {
        ingest::parse_libsvm(reader, None)
    };
    ds.with_context(|| format!("reading {}", path.display()))
}

/// Train/test split for the regression experiments: the dataset at
/// `cfg.data`, or synthetic data with `n` training and `test_rows` test rows.
pub fn glm_data(cfg: &ExperimentConfig, kind: GlmKind) -> Result<(Dataset, Dataset)> {
    let m = &cfg.model;
    let all = match &cfg.data {
        Some(path) => load_dataset(path)?,
        None => match kind {
            GlmKind::Ridge => ingest::synth_linear(m.n + m.test_rows, m.dim, m.noise_sd, cfg.seed)?.data,
            GlmKind::Logistic => ingest::synth_sparse(m.n + m.test_rows, m.dim, m.density, cfg.seed)?.data,
        },
    };
    let ratio = match &cfg.data {
        Some(_) => m.n as f64 / (m.n + m.test_rows) as f64,
        None => m.n as f64 / all.len() as f64,
    };
    let (train, test) = ingest::split(&all, ratio, cfg.seed)?;
    if kind == GlmKind::Ridge && m.standardize {
        let (train, test, _) = ingest::standardize(&train, &test)?;
        let labels = LabelScaler::fit(&train);
        return Ok((labels.transform(&train)?, labels.transform(&test)?));
    }
    Ok((train, test))
}

pub fn glm_model(cfg: &ExperimentConfig, kind: GlmKind) -> Result<Glm> {
    let (train, test) = glm_data(cfg, kind)?;
    let spec = GlmSpec { train, test: Some(test), lambda: cfg.model.lambda, kind };
    Ok(match kind {
        GlmKind::Ridge => model::make_ridge(&spec)?,
        GlmKind::Logistic => model::make_logistic(&spec)?,
    })
}

/// Draw `count` points from a two-dimensional density known up to a
/// constant, by inverse-CDF sampling over a fine grid with uniform
/// jitter inside each cell. A coarse pass over `[-radius, radius]^2`
/// locates the mass; the fine grid covers the box where the log density
/// is within 40 nats of its maximum.
pub fn grid_reference_2d(
    neg_log_density: impl Fn(&[f64]) -> f64 + Sync,
    radius: f64,
    count: usize,
    seed: u64,
) -> Vec<[f64; 2]> {
    const COARSE: usize = 400;
    const FINE: usize = 1000;
    let eval_grid = |lo: [f64; 2], step: [f64; 2], cells: usize| -> Vec<f64> {
        (0..cells * cells)
            .map(|c| {
                let x = [lo[0] + (c % cells) as f64 * step[0] + 0.5 * step[0], lo[1] + (c / cells) as f64 * step[1] + 0.5 * step[1]];
                -neg_log_density(&x)
            })
            .collect()
    };
    let coarse_step = 2.0 * radius / COARSE as f64;
    let coarse = eval_grid([-radius; 2], [coarse_step; 2], COARSE);
    let top = coarse.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = ([usize::MAX; 2], [0usize; 2]);
    for (c, &l) in coarse.iter().enumerate() {
        if l > top - 40.0 {
            let ij = [c % COARSE, c / COARSE];
            for a in 0..2 {
                lo[a] = lo[a].min(ij[a]);
                hi[a] = hi[a].max(ij[a]);
            }
        }
    }
    let lo_pt = [0, 1].map(|a| -radius + lo[a].saturating_sub(1) as f64 * coarse_step);
    let hi_pt = [0, 1].map(|a| -radius + (hi[a] + 2).min(COARSE) as f64 * coarse_step);
    let step = [0, 1].map(|a| (hi_pt[a] - lo_pt[a]) / FINE as f64);
    let fine = eval_grid(lo_pt, step, FINE);
    let top = fine.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cdf = Vec::with_capacity(fine.len());
    let mut acc = 0.0;
    for l in &fine {
        acc += (l - top).exp();
        cdf.push(acc);
    }
    let mut rng = stream_rng(seed, 0, Stream::Aux);
    (0..count)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            let c = cdf.partition_point(|&v| v <= u).min(cdf.len() - 1);
            let (i, j) = (c % FINE, c / FINE);
            [
                lo_pt[0] + (i as f64 + rng.random::<f64>()) * step[0],
                lo_pt[1] + (j as f64 + rng.random::<f64>()) * step[1],
            ]
        })
        .collect()
}

/// Reference cloud for the mixture target, projected on `cfg.model.plane`.
/// Two-dimensional targets use the exact grid sampler, drawing half the
/// points and adding their mirror images (the target is symmetric under
/// `x -> -x`, so the two modes get exactly equal mass); higher dimensions
/// fall back to a long antithetic LMC ensemble at a quarter of the step size.
pub fn mixture_reference(cfg: &ExperimentConfig, model: &GaussianMixture, exec: Execution) -> Result<Vec<[f64; 2]>> {
    if model.dim() == 2 {
        let radius = (0..model.n_components())
            .flat_map(|i| model.anchor(i).iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
            + 6.0;
        let nld = |x: &[f64]| model.neg_log_density(x).expect("mixture has a density");
        let mut pts = grid_reference_2d(nld, radius, cfg.model.reference_samples.div_ceil(2), cfg.seed);
        let mirrored: Vec<[f64; 2]> = pts.iter().map(|p| [-p[0], -p[1]]).collect();
        pts.extend(mirrored);
        return Ok(if cfg.model.plane == [1, 0] { pts.iter().map(|p| [p[1], p[0]]).collect() } else { pts });
    }
    let mut long = cfg.clone();
    long.eta = cfg.eta / 4.0;
    long.epochs = 4 * cfg.epochs;
    long.seed = cfg.seed ^ 0x5_EED0_F4EF;
    long.antithetic = true;
    let trajs = run_method(&long, model, Method::Lmc, exec)?;
    Ok(project(&pooled_after(&trajs, 4 * cfg.model.burn_in_epochs, model.n_components()), cfg.model.plane))
}

fn as_vecs(points: &[[f64; 2]]) -> Vec<Vec<f64>> {
    points.iter().map(|p| p.to_vec()).collect()
}

fn write_csv_file(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    metrics::write_metric_csv(rows, out)?;
    Ok(())
}

/// Run `cfg`, writing `manifest.toml` and the result CSVs into `cfg.out`.
/// Returns the paths written.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let manifest = cfg.out.join("manifest.toml");
    fs::write(&manifest, cfg.to_manifest()?)?;
    let mut written = vec![manifest];
    match cfg.experiment {
        Experiment::ConvexSim => convex_sim(cfg, exec, &mut written)?,
        Experiment::GmmSim => gmm_sim(cfg, exec, &mut written)?,
        Experiment::Ridge | Experiment::Logistic => glm_experiment(cfg, exec, &mut written)?,
        Experiment::Iosim => iosim(cfg, &mut written)?,
    }
    Ok(written)
}

fn method_csv(cfg: &ExperimentConfig, method: &Method, suffix: &str) -> PathBuf {
    cfg.out.join(format!("{}{suffix}.csv", method_name(method)))
}

fn convex_sim(cfg: &ExperimentConfig, exec: Execution, written: &mut Vec<PathBuf>) -> Result<()> {
    let model = quadratic_model(cfg)?;
    let target = model.target();
    let n = model.n_components();
    for method in methods(cfg)? {
        let trajs = run_method(cfg, &model, method, exec)?;
        let mut s = Series::new(method, cfg.eta);
        for e in 0..=cfg.epochs {
            let cloud = cloud_at(&trajs, e, n);
            let w2 = metrics::gaussian_w2(&metrics::empirical_moments(&cloud)?, &target)?;
            s.push(e, "w2", w2);
            s.push_grad_evals(&trajs, e, n);
        }
        let path = method_csv(cfg, &method, "");
        write_csv_file(&path, &s.rows)?;
        written.push(path);
    }
    Ok(())
}

/// Points used for the per-epoch sliced distance (a fixed subsample of
/// the reference keeps the per-epoch cost bounded).
const EPOCH_REFERENCE_POINTS: usize = 20_000;

fn gmm_sim(cfg: &ExperimentConfig, exec: Execution, written: &mut Vec<PathBuf>) -> Result<()> {
    let model = mixture_model(cfg)?;
    let n = model.n_components();
    let reference = as_vecs(&mixture_reference(cfg, &model, exec)?);
    let epoch_reference = &reference[..reference.len().min(EPOCH_REFERENCE_POINTS)];
    let proj = cfg.model.sliced_projections;
    for method in methods(cfg)? {
        let trajs = run_method(cfg, &model, method, exec)?;
        let mut s = Series::new(method, cfg.eta);
        for e in 0..=cfg.epochs {
            let cloud = as_vecs(&project(&cloud_at(&trajs, e, n), cfg.model.plane));
            s.push(e, "sliced_w2", metrics::sliced_w2(&cloud, epoch_reference, proj, cfg.seed)?);
            s.push_grad_evals(&trajs, e, n);
        }
        let pooled = project(&pooled_after(&trajs, cfg.model.burn_in_epochs, n), cfg.model.plane);
        if !pooled.is_empty() {
            let value = metrics::sliced_w2(&as_vecs(&pooled), &reference, proj, cfg.seed)?;
            s.push(cfg.epochs, "sliced_w2_pooled", value);
        }
        let path = method_csv(cfg, &method, "");
        write_csv_file(&path, &s.rows)?;
        written.push(path);
        let cloud_path = method_csv(cfg, &method, "_cloud");
        let mut w = csv::Writer::from_path(&cloud_path)?;
        w.write_record(["p0", "p1"])?;
        for p in &pooled {
            w.write_record([p[0].to_string(), p[1].to_string()])?;
        }
        w.flush()?;
        written.push(cloud_path);
    }
    Ok(())
}

fn glm_experiment(cfg: &ExperimentConfig, exec: Execution, written: &mut Vec<PathBuf>) -> Result<()> {
    let kind = if cfg.experiment == Experiment::Ridge { GlmKind::Ridge } else { GlmKind::Logistic };
    let model = glm_model(cfg, kind)?;
    let test = model.test_set().expect("built with a test set");
    let n = model.n_components();
    for method in methods(cfg)? {
        let trajs = run_method(cfg, &model, method, exec)?;
        let mut s = Series::new(method, cfg.eta);
        for e in 0..=cfg.epochs {
            let cloud = cloud_at(&trajs, e, n);
            match kind {
                GlmKind::Ridge => s.push(e, "test_mse", metrics::test_mse(&cloud, test)?),
                GlmKind::Logistic => {
                    s.push(e, "test_loglik", metrics::test_loglik(&cloud, test)?);
                    let mean = metrics::empirical_moments(&cloud)
                        .map(|m| m.mean.as_slice().to_vec())
                        .unwrap_or_else(|_| cloud[0].clone());
                    s.push(e, "test_accuracy", metrics::test_accuracy(&mean, test));
                }
            }
            s.push_grad_evals(&trajs, e, n);
        }
        let pooled = pooled_after(&trajs, cfg.model.burn_in_epochs, n);
        if !pooled.is_empty() {
            match kind {
                GlmKind::Ridge => s.push(cfg.epochs, "test_mse_pooled", metrics::test_mse(&pooled, test)?),
                GlmKind::Logistic => s.push(cfg.epochs, "test_loglik_pooled", metrics::test_loglik(&pooled, test)?),
            }
        }
        let path = method_csv(cfg, &method, "");
        write_csv_file(&path, &s.rows)?;
        written.push(path);
    }
    Ok(())
}

/// Fault report of one method's access pattern (with refresh scans for
/// periodic-refresh updaters) under `cache`.
pub fn method_faults(cfg: &ExperimentConfig, method: Method, cache: &PageCacheConfig) -> Result<FaultReport> {
    let n = cache.total_records;
    let Some(access) = method.access() else {
        bail!("{} reads every record each step; nothing to simulate", method_name(&method));
    };
    let iterations = (cfg.epochs as usize * n).div_ceil(cfg.batch);
    let mut acc = make_accessor(access, n, cfg.batch, stream_rng(cfg.seed, 0, Stream::Access))?;
    let trace = acc.trace(iterations);
    let report = match method.updater() {
        Some(u) if u.refreshes() => replay_with_refreshes(&trace, cache, cfg.refresh_period.unwrap_or(n as u64))?,
        _ => replay(&trace, cache)?,
    };
    Ok(report)
}

fn iosim(cfg: &ExperimentConfig, written: &mut Vec<PathBuf>) -> Result<()> {
    let methods = methods(cfg)?;
    let summary_path = cfg.out.join("iosim_summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path)?;
    summary.write_record(["strategy", "cache_pages", "accesses", "faults", "hit_ratio", "simulated_seconds"])?;
    for &pages in &cfg.iosim.cache_pages {
        let cache = PageCacheConfig::new(cfg.iosim.records_per_page, pages, cfg.model.n)?;
        let mut reports = Vec::new();
        for &method in &methods {
            let r = method_faults(cfg, method, &cache)?;
            summary.write_record([
                method_name(&method),
                pages.to_string(),
                r.total_accesses.to_string(),
                r.faults.to_string(),
                r.hit_ratio.to_string(),
                r.simulated_seconds(cfg.iosim.fault_latency).to_string(),
            ])?;
            reports.push((method_name(&method), r));
        }
        let path = cfg.out.join(format!("iosim_C{pages}.csv"));
        write_fault_csv(&reports, cfg.model.n, BufWriter::new(File::create(&path)?))?;
        written.push(path);
    }
    summary.flush()?;
    written.push(summary_path);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_reference_matches_a_gaussian() {
        // N((1, -2), diag(0.25, 4))
        let nld = |x: &[f64]| (x[0] - 1.0).powi(2) / 0.5 + (x[1] + 2.0).powi(2) / 8.0;
        let pts = grid_reference_2d(nld, 20.0, 200_000, 1);
        let m = metrics::empirical_moments(&as_vecs(&pts)).unwrap();
        assert!((m.mean[0] - 1.0).abs() < 0.01 && (m.mean[1] + 2.0).abs() < 0.02);
        assert!((m.cov[(0, 0)] - 0.25).abs() < 0.01 && (m.cov[(1, 1)] - 4.0).abs() < 0.08);
        assert!(m.cov[(0, 1)].abs() < 0.02);
    }

    #[test]
    fn synthetic_ridge_data_is_standardized() {
        let mut cfg = ExperimentConfig::defaults(Experiment::Ridge);
        cfg.model.n = 300;
        cfg.model.test_rows = 100;
        let (train, test) = glm_data(&cfg, GlmKind::Ridge).unwrap();
        assert_eq!((train.len(), test.len()), (300, 100));
        let mean: f64 = train.labels().sum::<f64>() / 300.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn small_convex_run_writes_every_method() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::defaults(Experiment::ConvexSim);
        cfg.chains = 8;
        cfg.epochs = 3;
        cfg.out = dir.path().to_path_buf();
        let files = run_experiment(&cfg, Execution::Sequential).unwrap();
        assert_eq!(files.len(), 1 + cfg.methods.len());
        for f in &files[1..] {
            let text = fs::read_to_string(f).unwrap();
            assert!(text.starts_with(metrics::METRIC_HEADER));
            // header + (w2, grad_evals) per epoch 0..=3
            assert_eq!(text.lines().count(), 1 + 2 * 4);
        }
    }
}
