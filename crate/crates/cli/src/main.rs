use std::path::PathBuf;
use std::process::ExitCode;

use agld_cli::config::{Experiment, ExperimentConfig};
use agld_cli::experiment::{execution_from_env, run_experiment};
use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agld", version, about = "Aggregated gradient Langevin dynamics experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quadratic (Gaussian-target) simulation; metric: W2 to the exact target.
    ConvexSim(Common),
    /// Symmetric Gaussian-mixture simulation; metric: sliced W2 to a reference cloud.
    GmmSim(Common),
    /// Bayesian ridge regression; metric: posterior-predictive test MSE.
    Ridge(Common),
    /// Bayesian logistic regression; metrics: test log-likelihood and accuracy.
    Logistic(Common),
    /// LRU page-cache simulation of each method's data-access pattern.
    Iosim(Common),
    /// Rerun an experiment from the manifest written by a previous run.
    Replay {
        manifest: PathBuf,
        /// Write outputs here instead of the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file merged over the experiment defaults; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Method name, e.g. TMU-RA, PPU-CA, SAGA-LD, SGLD, LMC (repeatable).
    #[arg(long = "method")]
    methods: Vec<String>,
    /// Snapshot refresh period in iterations (default N).
    #[arg(long = "D")]
    refresh_period: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset (libsvm, or CSV with a `label` column; `.gz` accepted).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn resolve(self, experiment: Experiment) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(experiment, self.config.as_deref())?;
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.chains {
            cfg.chains = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if !self.methods.is_empty() {
            cfg.methods = self.methods;
        }
        if self.refresh_period.is_some() {
            cfg.refresh_period = self.refresh_period;
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        if self.data.is_some() {
            cfg.data = self.data;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match cli.command {
        Command::ConvexSim(c) => c.resolve(Experiment::ConvexSim)?,
        Command::GmmSim(c) => c.resolve(Experiment::GmmSim)?,
        Command::Ridge(c) => c.resolve(Experiment::Ridge)?,
        Command::Logistic(c) => c.resolve(Experiment::Logistic)?,
        Command::Iosim(c) => c.resolve(Experiment::Iosim)?,
        Command::Replay { manifest, out } => {
            let mut cfg = ExperimentConfig::read_manifest(&manifest)?;
            if let Some(out) = out {
                cfg.out = out;
            }
            cfg
        }
    };
    let files = run_experiment(&cfg, execution_from_env()?)?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(args: &[&str]) -> Result<ExperimentConfig> {
        let cli = Cli::try_parse_from(std::iter::once("agld").chain(args.iter().copied()))?;
        match cli.command {
            Command::ConvexSim(c) => c.resolve(Experiment::ConvexSim),
            Command::Ridge(c) => c.resolve(Experiment::Ridge),
            _ => unreachable!("only used with convex-sim and ridge"),
        }
    }

    #[test]
    fn flags_override_file_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "eta = 0.01\nchains = 7\n").unwrap();
        let cfg = resolve(&[
            "convex-sim", "--config", path.to_str().unwrap(), "--eta", "0.002", "--method", "PPU-CA", "--method", "LMC",
            "--D", "9",
        ])
        .unwrap();
        assert_eq!(cfg.eta, 0.002);
        assert_eq!(cfg.chains, 7);
        assert_eq!(cfg.methods, ["PPU-CA", "LMC"]);
        assert_eq!(cfg.refresh_period, Some(9));
        assert_eq!(resolve(&["ridge"]).unwrap(), ExperimentConfig::defaults(Experiment::Ridge));
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(resolve(&["convex-sim", "--method", "XYZ-RA"]).is_err());
        assert!(resolve(&["convex-sim", "--eta", "-1"]).is_err());
        assert!(resolve(&["convex-sim", "--D", "0"]).is_err());
        assert!(resolve(&["convex-sim", "--batch", "many"]).is_err());
    }
}
