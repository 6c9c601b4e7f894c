//! TOML experiment plans. Every table rejects unknown keys; relative paths
//! resolve against the directory holding the plan file.

use std::path::{Path, PathBuf};

use abr_core::ea3c::{ActionMode, AgentSpec, TrainConfig};
use abr_core::env::EnvConfig;
use abr_core::mpc::MpcConfig;
use abr_core::online::OnlineConfig;
use abr_core::synth::ChainSource;
use abr_core::trace::SplitPlan;
use serde::Deserialize;

use crate::CliError;

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plan {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    /// Output directory; defaults to `out` next to the plan.
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub agent: AgentSpec,
    pub gen: Option<GenSection>,
    pub analyze: Option<AnalyzeSection>,
    pub split: Option<SplitSection>,
    pub train: Option<TrainSection>,
    pub online: Option<OnlineSection>,
    pub eval: Option<EvalSection>,
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSection {
    /// Chain to sample; its `seed` is replaced by the run seed.
    pub chain: ChainSource,
    pub count: usize,
    pub length: usize,
}

fn default_tau_max() -> usize {
    10
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub traces: PathBuf,
    #[serde(default = "default_tau_max")]
    pub tau_max: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    /// One entry per dataset, each split on its own before merging.
    pub inputs: Vec<PathBuf>,
    pub fractions: Option<SplitPlan>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub train: PathBuf,
    pub val: PathBuf,
    #[serde(default)]
    pub config: TrainConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSection {
    pub base: PathBuf,
    pub user: PathBuf,
    #[serde(default)]
    pub config: OnlineConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySource {
    Checkpoint { path: PathBuf },
    Tuned { path: PathBuf, base: PathBuf },
    Mpc { horizon: Option<usize>, predictor: Option<abr_core::mpc::Predictor> },
}

impl PolicySource {
    pub fn mpc_config(&self) -> Option<MpcConfig> {
        match self {
            PolicySource::Mpc { horizon, predictor } => {
                let d = MpcConfig::default();
                Some(MpcConfig {
                    horizon: horizon.unwrap_or(d.horizon),
                    predictor: predictor.unwrap_or(d.predictor),
                })
            }
            _ => None,
        }
    }
}

fn argmax() -> ActionMode {
    ActionMode::Argmax
}

fn default_passes() -> usize {
    1000
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub traces: PathBuf,
    pub policy: Option<PolicySource>,
    #[serde(default = "argmax")]
    pub action_mode: ActionMode,
    /// Also write per-chunk rows.
    #[serde(default)]
    pub chunks: bool,
    /// Measure inference time (written to its own file).
    #[serde(default)]
    pub timing: bool,
    #[serde(default = "default_passes")]
    pub timing_passes: usize,
}

fn default_layers() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

fn default_neurons() -> Vec<usize> {
    vec![16, 32, 64, 128, 256]
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    #[serde(default = "default_neurons")]
    pub neurons: Vec<usize>,
    /// History lengths for the k sweep; empty skips it.
    #[serde(default)]
    pub k_values: Vec<usize>,
    /// `[alpha, beta_rebuf]` pairs for the weight sweep; empty skips it.
    #[serde(default)]
    pub weights: Vec<[f64; 2]>,
    /// Record inference and training time in the k sweep (written as 0 otherwise).
    #[serde(default)]
    pub timing: bool,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            layers: default_layers(),
            neurons: default_neurons(),
            k_values: Vec::new(),
            weights: Vec::new(),
            timing: false,
        }
    }
}

/// A parsed plan together with its source bytes and location.
#[derive(Clone, Debug)]
pub struct LoadedPlan {
    pub plan: Plan,
    pub sha256: String,
    pub dir: PathBuf,
}

impl LoadedPlan {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read plan {}: {e}", path.display())))?;
        Self::parse(&bytes, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(bytes: &[u8], dir: &Path) -> Result<Self, CliError> {
        let text = std::str::from_utf8(bytes).map_err(|e| CliError::Config(format!("plan is not utf-8: {e}")))?;
        let plan: Plan = toml::from_str(text).map_err(|e| CliError::Config(format!("plan: {e}")))?;
        if plan.workers == 0 {
            return Err(CliError::Config("workers must be >= 1".into()));
        }
        Ok(Self {
            plan,
            sha256: abr_core::checkpoint::sha256_hex(bytes),
            dir: dir.to_path_buf(),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

pub fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    s.as_ref().ok_or_else(|| CliError::Config(format!("plan has no [{name}] table")))
}
