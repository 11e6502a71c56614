//! JSON configuration schemas and construction of runnable problems.
//!
//! Every schema rejects unknown fields, so a typo'd key fails the parse
//! instead of silently running a different experiment.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use fedmsa::datagen::{
    gen_quadratic_bilevel, gen_risk_averse_dataset, heterogeneous_partition, BilevelGenSpec,
    Partition, RiskAverseDataset,
};
use fedmsa::instances::{
    bilevel_to_msa, mco_to_msa, BilevelProblem, QuadraticBilevelInstance, RiskAverseMcoInstance,
    RiskAverseProblem,
};
use fedmsa::msa::{HyperParams, MsaProblem};
use fedmsa::rng::{domain, StreamKey};

use crate::CliError;

/// Environment variable that overrides the config seed when set.
pub const SEED_ENV: &str = "FEDMSA_SEED";

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_metric_every() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Reads and strictly parses a JSON file.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn from_value<T: DeserializeOwned>(value: Value, what: &str) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{what}: {e}")))
}

/// Algorithms the runner can execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// Federated MSA with momentum-corrected global directions and
    /// recursive local corrections.
    Fedmsa,
    /// Centralized single-sequence MSA run for the matched number of
    /// updates.
    Centralized,
    /// Federated variant whose local corrections keep only the direct
    /// gradient term.
    FrozenIndirect,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Fedmsa => "fedmsa",
            Algorithm::Centralized => "centralized",
            Algorithm::FrozenIndirect => "frozen-indirect",
        }
    }
}

/// Problem families the runner knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    /// Federated quadratic bilevel model with closed forms.
    QuadraticBilevel,
    /// Three-level risk-averse compositional model on a regression dataset.
    RiskAverse,
}

/// A problem description: a family plus either generator parameters or a
/// path to a serialized instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Generator parameters ([`BilevelGenSpec`] or [`RiskAverseGenSpec`],
    /// matching `kind`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Value>,
    /// Path to an instance JSON, as written by `gen-data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Generator parameters for the risk-averse family: a synthetic regression
/// dataset plus a heterogeneity-controlled client partition.
///
/// The dataset has no class structure, so the partition treats `clients`
/// near-equal blocks of consecutive sample ids as pseudo-classes; `q` then
/// moves the split continuously from uniform (`0`) to block-separated (`1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskAverseGenSpec {
    /// Feature dimension.
    pub dim: usize,
    /// Number of samples.
    pub samples: usize,
    /// Number of clients.
    pub clients: usize,
    /// Own-block fraction of the partition, in `[0, 1]`.
    pub q: f64,
    /// Risk-aversion weight on the loss-variability term.
    pub lambda: f64,
    /// Smoothing width of the deviation penalty.
    pub delta: f64,
    /// Squared-hinge deviation penalty (default) instead of the smooth-max
    /// variant.
    #[serde(default = "default_true")]
    pub squared_hinge: bool,
    /// Drop label noise; labels become an exact function of the features.
    #[serde(default)]
    pub zero_noise: bool,
    /// Seed of the planted regression optimum.
    pub x_star_seed: u64,
    /// Seed of the features and label noise.
    pub data_seed: u64,
    /// Seed of the partition draw.
    pub partition_seed: u64,
}

impl RiskAverseGenSpec {
    /// Pseudo-class sizes: `clients` near-equal blocks of consecutive ids.
    fn block_counts(&self) -> Vec<usize> {
        let base = self.samples / self.clients;
        let rem = self.samples % self.clients;
        (0..self.clients)
            .map(|i| base + usize::from(i < rem))
            .collect()
    }

    pub fn build_partition(&self) -> Result<Partition, CliError> {
        if self.clients == 0 {
            return Err(CliError::Config("risk-averse: need at least one client".into()));
        }
        let mut rng = StreamKey::root(self.partition_seed)
            .child(domain::PARTITION)
            .rng();
        heterogeneous_partition(&self.block_counts(), self.clients, self.q, &mut rng)
            .map_err(|e| CliError::Config(format!("partition: {e}")))
    }

    pub fn build_dataset(&self) -> Result<RiskAverseDataset, CliError> {
        gen_risk_averse_dataset(
            self.dim,
            self.samples,
            self.x_star_seed,
            self.data_seed,
            self.zero_noise,
        )
        .map_err(|e| CliError::Config(format!("dataset: {e}")))
    }

    pub fn build_instance(&self) -> Result<RiskAverseMcoInstance, CliError> {
        let partition = self.build_partition()?;
        Ok(self
            .build_dataset()?
            .into_instance(&partition, self.lambda, self.delta, self.squared_hinge))
    }
}

/// A built problem, ready to hand to an algorithm.
pub enum BuiltProblem {
    Bilevel(BilevelProblem),
    RiskAverse(RiskAverseProblem),
}

impl BuiltProblem {
    pub fn build(spec: &ProblemSpec) -> Result<Self, CliError> {
        match (&spec.params, &spec.path) {
            (Some(_), Some(_)) => Err(CliError::Config(
                "problem: give either `params` or `path`, not both".into(),
            )),
            (None, None) => Err(CliError::Config(
                "problem: give generator `params` or an instance `path`".into(),
            )),
            (Some(params), None) => Self::generate(spec.kind, params.clone()),
            (None, Some(path)) => Self::load(spec.kind, path),
        }
    }

    fn generate(kind: ProblemKind, params: Value) -> Result<Self, CliError> {
        match kind {
            ProblemKind::QuadraticBilevel => {
                let gen: BilevelGenSpec = from_value(params, "problem.params")?;
                let instance = gen_quadratic_bilevel(&gen)
                    .map_err(|e| CliError::Config(format!("bilevel generator: {e}")))?;
                Self::from_bilevel(instance)
            }
            ProblemKind::RiskAverse => {
                let gen: RiskAverseGenSpec = from_value(params, "problem.params")?;
                Self::from_risk_averse(gen.build_instance()?)
            }
        }
    }

    fn load(kind: ProblemKind, path: &Path) -> Result<Self, CliError> {
        match kind {
            ProblemKind::QuadraticBilevel => Self::from_bilevel(read_json(path)?),
            ProblemKind::RiskAverse => Self::from_risk_averse(read_json(path)?),
        }
    }

    fn from_bilevel(instance: QuadraticBilevelInstance) -> Result<Self, CliError> {
        bilevel_to_msa(instance)
            .map(BuiltProblem::Bilevel)
            .map_err(|e| CliError::Config(format!("bilevel instance: {e}")))
    }

    fn from_risk_averse(instance: RiskAverseMcoInstance) -> Result<Self, CliError> {
        mco_to_msa(instance)
            .map(BuiltProblem::RiskAverse)
            .map_err(|e| CliError::Config(format!("risk-averse instance: {e}")))
    }

    /// The problem as the engine's operator interface.
    pub fn as_msa(&self) -> &dyn MsaProblem {
        match self {
            BuiltProblem::Bilevel(p) => p,
            BuiltProblem::RiskAverse(p) => p,
        }
    }

    /// The bilevel view, for algorithms that need the direct gradient term
    /// on its own.
    pub fn as_direct(&self) -> Option<&BilevelProblem> {
        match self {
            BuiltProblem::Bilevel(p) => Some(p),
            BuiltProblem::RiskAverse(_) => None,
        }
    }
}

/// A single-run experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub algorithm: Algorithm,
    pub hyper: HyperParams,
    /// Where `metrics.csv` and `result.json` go.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Emit a metrics row every this many rounds (the final round is always
    /// emitted).
    #[serde(default = "default_metric_every")]
    pub metric_every: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.metric_every == 0 {
            return Err(CliError::Config("metric_every must be positive".into()));
        }
        Ok(())
    }
}

/// A multi-algorithm comparison on one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub problem: ProblemSpec,
    /// At least two distinct algorithms.
    pub algorithms: Vec<Algorithm>,
    /// Budget-defining hyperparameters: every run spends `r·k` nominal
    /// local updates.
    pub hyper: HyperParams,
    /// Optional sweep over local-step counts at fixed `r`: every algorithm
    /// runs once per listed `K`, keeping budgets matched across algorithms
    /// at each sweep point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_sweep: Option<Vec<usize>>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_metric_every")]
    pub metric_every: usize,
}

impl CompareConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.algorithms.len() < 2 {
            return Err(CliError::Config(
                "compare: need at least two algorithms".into(),
            ));
        }
        for (i, a) in self.algorithms.iter().enumerate() {
            if self.algorithms[..i].contains(a) {
                return Err(CliError::Config(format!(
                    "compare: duplicate algorithm `{}`",
                    a.name()
                )));
            }
        }
        if let Some(ks) = &self.k_sweep {
            if ks.is_empty() || ks.contains(&0) {
                return Err(CliError::Config(
                    "compare: k_sweep must list positive step counts".into(),
                ));
            }
        }
        if self.metric_every == 0 {
            return Err(CliError::Config("metric_every must be positive".into()));
        }
        Ok(())
    }
}

/// What `gen-data` should produce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub kind: ProblemKind,
    /// Generator parameters for the family.
    pub params: Value,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

/// Applies the [`SEED_ENV`] override, if set.  Returns the effective seed
/// and whether it came from the environment.
pub fn resolve_seed(hyper: &mut HyperParams) -> Result<(u64, bool), CliError> {
    match std::env::var(SEED_ENV) {
        Ok(text) => {
            let seed = text.trim().parse::<u64>().map_err(|_| {
                CliError::Config(format!("{SEED_ENV}={text:?} is not a valid u64 seed"))
            })?;
            hyper.seed = seed;
            Ok((seed, true))
        }
        Err(std::env::VarError::NotPresent) => Ok((hyper.seed, false)),
        Err(e) => Err(CliError::Config(format!("{SEED_ENV}: {e}"))),
    }
}

/// Parses generator parameters for `gen-data`.
pub enum GenParams {
    Bilevel(BilevelGenSpec),
    RiskAverse(RiskAverseGenSpec),
}

impl GenDataConfig {
    pub fn parse_params(&self) -> Result<GenParams, CliError> {
        match self.kind {
            ProblemKind::QuadraticBilevel => {
                from_value(self.params.clone(), "params").map(GenParams::Bilevel)
            }
            ProblemKind::RiskAverse => {
                from_value(self.params.clone(), "params").map(GenParams::RiskAverse)
            }
        }
    }
}
