//! Experiment configuration: built-in defaults per experiment, an
//! optional TOML file merged over them, then command-line overrides.
//! The fully resolved configuration is written next to the outputs as
//! `manifest.toml` and is sufficient to rerun the experiment exactly.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::naming::parse_method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    ConvexSim,
    GmmSim,
    Ridge,
    Logistic,
    Iosim,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::ConvexSim => "convex-sim",
            Experiment::GmmSim => "gmm-sim",
            Experiment::Ridge => "ridge",
            Experiment::Logistic => "logistic",
            Experiment::Iosim => "iosim",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub methods: Vec<String>,
    pub eta: f64,
    pub batch: usize,
    /// Snapshot refresh period in iterations; absent means `N`.
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub refresh_period: Option<u64>,
    /// Data passes per chain.
    pub epochs: u64,
    pub chains: usize,
    pub seed: u64,
    /// Run chains in mirrored pairs (see `SamplerConfig::antithetic`).
    pub antithetic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub iosim: IosimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Components (simulations) or training rows (synthetic regression data).
    pub n: usize,
    pub dim: usize,
    /// Curvature eigenvalue range of the quadratic components.
    pub eig_min: f64,
    pub eig_max: f64,
    /// Mixture only: divide every component by `N`.
    pub scale_by_n: bool,
    /// Chains start at `N(0, init_sd^2 I)`; zero starts them at the origin.
    pub init_sd: f64,
    /// Iterates recorded before this many data passes are discarded from
    /// pooled clouds and posterior averages.
    pub burn_in_epochs: u64,
    /// Prior variance of the weights (and noise variance for ridge).
    pub lambda: f64,
    /// Held-out rows (synthetic data) or held-out fraction numerator for
    /// loaded data: the split keeps `n_train / (n_train + test_rows)`.
    pub test_rows: usize,
    pub noise_sd: f64,
    pub density: f64,
    pub standardize: bool,
    pub sliced_projections: usize,
    pub reference_samples: usize,
    /// Coordinates of the projection plane used for mixture clouds.
    pub plane: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IosimConfig {
    pub records_per_page: usize,
    pub cache_pages: Vec<usize>,
    /// Simulated seconds per fault for the linear cost column.
    pub fault_latency: f64,
}

const DEFAULT_GRID: [&str; 5] = ["TMU-RA", "SAGA-LD", "SVRG-LD", "SGLD", "LMC"];

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let model = ModelConfig {
            n: 50,
            dim: 2,
            eig_min: 0.5,
            eig_max: 40.0,
            scale_by_n: false,
            init_sd: 0.0,
            burn_in_epochs: 0,
            lambda: 1.0,
            test_rows: 500,
            noise_sd: 2.0,
            density: 0.2,
            standardize: true,
            sliced_projections: 200,
            reference_samples: 1_000_000,
            plane: [0, 1],
        };
        let mut cfg = Self {
            experiment,
            methods: DEFAULT_GRID.iter().map(|s| s.to_string()).collect(),
            eta: 3e-4,
            batch: 1,
            refresh_period: None,
            epochs: 40,
            chains: 2000,
            seed: 0,
            antithetic: false,
            data: None,
            out: PathBuf::from(format!("out/{experiment}")),
            model,
            iosim: IosimConfig { records_per_page: 10, cache_pages: vec![10, 25, 50, 75], fault_latency: 1e-4 },
        };
        match experiment {
            Experiment::ConvexSim => {}
            Experiment::GmmSim => {
                cfg.model.n = 500;
                cfg.model.dim = 10;
                cfg.model.init_sd = 1.0;
                cfg.antithetic = true;
                cfg.model.burn_in_epochs = 50;
                cfg.eta = 1e-4;
                cfg.batch = 5;
                cfg.epochs = 100;
                cfg.chains = 500;
            }
            Experiment::Ridge => {
                cfg.model.n = 2000;
                cfg.model.dim = 20;
                cfg.model.lambda = 0.25;
                cfg.model.burn_in_epochs = 25;
                cfg.eta = 2e-5;
                cfg.batch = 10;
                cfg.epochs = 50;
                cfg.chains = 200;
            }
            Experiment::Logistic => {
                cfg.model.n = 2000;
                cfg.model.dim = 50;
                cfg.model.burn_in_epochs = 10;
                cfg.eta = 1e-3;
                cfg.batch = 10;
                cfg.epochs = 20;
                cfg.chains = 100;
            }
            Experiment::Iosim => {
                cfg.methods = ["SAGA-LD", "PPU-RR", "PPU-CA", "TMU-RA", "TMU-CA"].map(String::from).to_vec();
                cfg.model.n = 1000;
                cfg.batch = 10;
                cfg.epochs = 5;
                cfg.chains = 1;
            }
        }
        cfg
    }

    /// Defaults for `experiment` with the TOML file at `path` merged over them.
    pub fn load(experiment: Experiment, path: Option<&Path>) -> Result<Self> {
        let mut table = toml::Table::try_from(Self::defaults(experiment)).context("serializing defaults")?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            if let Some(e) = file.get("experiment").and_then(|v| v.as_str()) {
                if e != experiment.to_string() {
                    bail!("{} configures experiment {e:?}, not {experiment}", path.display());
                }
            }
            merge(&mut table, file);
        }
        let cfg: Self = table.try_into().context("invalid configuration")?;
        Ok(cfg)
    }

    /// Read a manifest written by a previous run; every field must be present.
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    pub fn to_manifest(&self) -> Result<String> {
        toml::to_string(self).context("serializing manifest")
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("the method grid is empty");
        }
        for m in &self.methods {
            parse_method(m)?;
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            bail!("eta must be positive, got {}", self.eta);
        }
        if self.batch == 0 || self.chains == 0 || self.model.n == 0 || self.model.dim == 0 {
            bail!("batch, chains, n and dim must all be at least 1");
        }
        if self.refresh_period == Some(0) {
            bail!("D must be at least 1");
        }
        if self.model.plane.iter().any(|&p| p >= self.model.dim) || self.model.plane[0] == self.model.plane[1] {
            bail!("projection plane {:?} invalid for dimension {}", self.model.plane, self.model.dim);
        }
        if self.experiment == Experiment::Iosim && self.iosim.cache_pages.is_empty() {
            bail!("iosim needs at least one cache size");
        }
        Ok(())
    }
}

/// Recursive table merge; values from `over` win.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const ALL: [Experiment; 5] =
        [Experiment::ConvexSim, Experiment::GmmSim, Experiment::Ridge, Experiment::Logistic, Experiment::Iosim];

    #[test]
    fn defaults_are_valid_and_round_trip() {
        for e in ALL {
            let cfg = ExperimentConfig::defaults(e);
            cfg.validate().unwrap();
            let text = cfg.to_manifest().unwrap();
            let back: ExperimentConfig = toml::from_str(&text).unwrap();
            assert_eq!(back, cfg);
        }
        let gmm = ExperimentConfig::defaults(Experiment::GmmSim);
        assert_eq!((gmm.model.n, gmm.model.dim), (500, 10));
    }

    #[test]
    fn file_values_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "eta = 0.01\nD = 7\n[model]\nn = 12\n").unwrap();
        let cfg = ExperimentConfig::load(Experiment::ConvexSim, Some(&path)).unwrap();
        assert_eq!(cfg.eta, 0.01);
        assert_eq!(cfg.refresh_period, Some(7));
        assert_eq!(cfg.model.n, 12);
        assert_eq!(cfg.model.dim, 2);

        std::fs::write(&path, "experiment = \"ridge\"\n").unwrap();
        assert!(ExperimentConfig::load(Experiment::ConvexSim, Some(&path)).is_err());
        std::fs::write(&path, "bogus = 1\n").unwrap();
        assert!(ExperimentConfig::load(Experiment::ConvexSim, Some(&path)).is_err());
    }

    #[test]
    fn validation_catches_bad_grids() {
        let mut cfg = ExperimentConfig::defaults(Experiment::ConvexSim);
        cfg.methods = vec!["XYZ-RA".into()];
        assert!(cfg.validate().is_err());
        cfg.methods.clear();
        assert!(cfg.validate().is_err());
    }
}
