//! Aggregated gradient Langevin dynamics (AGLD).
//!
//! A single Langevin sampling loop, parameterized by a data-accessing
//! strategy ([`access::AccessKind`]: random access, random reshuffle,
//! cyclic access) and a snapshot-updating strategy
//! ([`snapshot::UpdaterKind`]: per-iteration partial, periodic total,
//! time-based mixture). The gradient estimate at iteration `k` is
//!
//! ```text
//! g = (N/n) * sum_{i in S_k} (grad f_i(x) - alpha_i) + sum_i alpha_i
//! ```
//!
//! where `alpha_i` are stored historic component gradients. Full-gradient
//! Langevin Monte Carlo (LMC) and stochastic gradient Langevin dynamics
//! (SGLD) are provided as baselines.
//!
//! Around the sampler sit the built-in targets ([`model`]), distance and
//! predictive diagnostics ([`metrics`]), dataset loading ([`ingest`]) and
//! an LRU page-cache simulator for the I/O cost of each access pattern
//! ([`iosim`]).
//!
//! ```
//! use agld::access::AccessKind;
//! use agld::model::{make_quadratic, QuadraticSpec};
//! use agld::sampler::{run_chain, Method, SamplerConfig};
//! use agld::snapshot::UpdaterKind;
//!
//! let spec = QuadraticSpec::sampled(20, 2, 0.5, 4.0, 7);
//! let model = make_quadratic(&spec).unwrap();
//! let cfg = SamplerConfig::new(
//!     Method::Agld { access: AccessKind::Random, updater: UpdaterKind::Tmu },
//!     0.005,
//!     200,
//! );
//! let traj = run_chain(&cfg, &model).unwrap();
//! assert_eq!(traj.final_iterate().len(), 2);
//! ```

pub mod access;
pub mod error;
pub mod ingest;
pub mod iosim;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod snapshot;

pub use error::{Error, Result};
