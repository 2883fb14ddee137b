//! Experiment configuration file.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use ttsa_core::gauss::{CloudSetup, Metric, Target};
use ttsa_core::model::{OracleSpec, ProblemSpec, TtsaProblem};
use ttsa_core::rlapps::{self, Algorithm, MdpSpec, RlInstance, Sampling};
use ttsa_core::schedule::ScheduleSpec;

use crate::error::CliError;

fn default_targets() -> Vec<Target> {
    vec![Target::Pr]
}
fn default_metrics() -> Vec<Metric> {
    vec![Metric::Ks1d]
}
fn default_replications() -> usize {
    1000
}
fn default_one() -> usize {
    1
}
fn default_moment_reps() -> usize {
    200
}
fn default_fit_from() -> u64 {
    256
}
fn default_directions() -> usize {
    64
}
fn default_bootstrap() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    /// Defaults to the largest `n_grid` entry.
    #[serde(default)]
    pub horizon: Option<u64>,
    /// Trajectories written as `trajectory_<rep>.csv`.
    #[serde(default = "default_one")]
    pub trajectories: usize,
    /// Defaults to the powers of two up to the horizon, plus the horizon.
    #[serde(default)]
    pub checkpoints: Option<Vec<u64>>,
    /// Replications behind the MSE-vs-k table.
    #[serde(default = "default_moment_reps")]
    pub moment_replications: usize,
    /// Smallest `k` entering the MSE slope fit.
    #[serde(default = "default_fit_from")]
    pub fit_from: u64,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        Self {
            horizon: None,
            trajectories: 1,
            checkpoints: None,
            moment_replications: default_moment_reps(),
            fit_from: default_fit_from(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceSpec {
    #[serde(default = "default_directions")]
    pub directions: usize,
    #[serde(default)]
    pub direction_seed: u64,
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
}

impl Default for DistanceSpec {
    fn default() -> Self {
        Self {
            directions: default_directions(),
            direction_seed: 0,
            bootstrap: default_bootstrap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mdp: Option<MdpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    #[serde(default)]
    pub sampling: Sampling,
    pub schedule: ScheduleSpec,
    #[serde(default = "default_targets")]
    pub targets: Vec<Target>,
    #[serde(default)]
    pub n_grid: Vec<u64>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w0: Option<Vec<f64>>,
    #[serde(default)]
    pub simulate: SimulateSpec,
    #[serde(default)]
    pub distance: DistanceSpec,
}

/// The problem and oracle a config describes, plus the RL mapping when the
/// config is an MDP.
pub struct Resolved {
    pub setup: CloudSetup,
    pub rl: Option<(RlInstance, rlapps::FiniteMdp, rlapps::FeatureMap)>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<(), CliError> {
        let direct = self.problem.is_some() || self.oracle.is_some();
        let rl = self.mdp.is_some() || self.algorithm.is_some();
        match (direct, rl) {
            (true, true) => {
                return Err(CliError::Config(
                    "config: give either problem + oracle or mdp + algorithm, not both".into(),
                ))
            }
            (false, false) => {
                return Err(CliError::Config(
                    "config: missing field `problem` (or `mdp` with `algorithm`)".into(),
                ))
            }
            (true, false) => {
                if self.problem.is_none() {
                    return Err(CliError::Config("config: missing field `problem`".into()));
                }
                if self.oracle.is_none() {
                    return Err(CliError::Config("config: missing field `oracle`".into()));
                }
            }
            (false, true) => {
                if self.mdp.is_none() {
                    return Err(CliError::Config("config: missing field `mdp`".into()));
                }
                if self.algorithm.is_none() {
                    return Err(CliError::Config("config: missing field `algorithm`".into()));
                }
            }
        }
        if self.n_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::Config("config: field `n_grid` must be strictly increasing".into()));
        }
        if self.n_grid.first() == Some(&0) {
            return Err(CliError::Config("config: field `n_grid` entries must be positive".into()));
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        if let (Some(mdp), Some(alg)) = (&self.mdp, self.algorithm) {
            let (m, f) = mdp.split();
            let inst = rlapps::build(alg, &m, &f, self.sampling)?;
            return Ok(Resolved {
                setup: CloudSetup {
                    problem: inst.problem.clone(),
                    oracle: inst.oracle.clone(),
                    schedule: self.schedule.clone(),
                    theta0: self.theta0.clone(),
                    w0: self.w0.clone(),
                },
                rl: Some((inst, m, f)),
            });
        }
        let spec = self.problem.clone().expect("checked");
        let problem = TtsaProblem::try_from(spec)?;
        let oracle = self.oracle.as_ref().expect("checked").build(&problem)?;
        Ok(Resolved {
            setup: CloudSetup {
                problem,
                oracle,
                schedule: self.schedule.clone(),
                theta0: self.theta0.clone(),
                w0: self.w0.clone(),
            },
            rl: None,
        })
    }

    pub fn horizon(&self) -> Result<u64, CliError> {
        self.simulate
            .horizon
            .or_else(|| self.n_grid.last().copied())
            .ok_or_else(|| CliError::Config("config: missing field `simulate.horizon` (or a nonempty `n_grid`)".into()))
    }
}
