use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::divergence::FeatureMode;
use crate::dve::DveConfig;
use crate::envs::{DomainConfig, QLearningParams};
use crate::offline::LearnerConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Single,
    TransferBenchmark,
    RemovalCurve,
}

/// Buffer sizes and exploration used when filling them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_source_size")]
    pub source_size: usize,
    #[serde(default = "default_target_size")]
    pub target_size: usize,
    /// Probability of a uniformly random action while filling either buffer.
    #[serde(default = "default_explore")]
    pub explore_eps: f64,
}

fn default_source_size() -> usize {
    20_000
}
fn default_target_size() -> usize {
    500
}
fn default_explore() -> f64 {
    0.3
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source_size: default_source_size(), target_size: default_target_size(), explore_eps: default_explore() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Episodes per checkpoint evaluation.
    #[serde(default = "default_episodes")]
    pub episodes: usize,
}

fn default_episodes() -> usize {
    200
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { episodes: default_episodes() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    /// Shift values evaluated besides `target`'s own; each becomes one more setting.
    #[serde(default)]
    pub extra_target_shifts: Vec<f64>,
    /// Adds the setting whose target equals the source domain.
    #[serde(default = "default_true")]
    pub include_identical: bool,
    #[serde(default = "default_modes")]
    pub feature_modes: Vec<FeatureMode>,
}

fn default_repetitions() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_modes() -> Vec<FeatureMode> {
    vec![FeatureMode::StateOnly, FeatureMode::StateActionNext]
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            repetitions: default_repetitions(),
            extra_target_shifts: Vec::new(),
            include_identical: true,
            feature_modes: default_modes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemovalConfig {
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
}

fn default_fractions() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4]
}

impl Default for RemovalConfig {
    fn default() -> Self {
        Self { repetitions: default_repetitions(), fractions: default_fractions() }
    }
}

/// One experiment, as read from a TOML file.
///
/// Seeds inside `dve` and `learner` are ignored: every stage seed is derived
/// from `seed` (see [`super::stage_seed`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub source: DomainConfig,
    pub target: DomainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub behavior: QLearningParams,
    pub dve: DveConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub removal: RemovalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let de = toml::Deserializer::parse(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            PipelineError::Config(describe(&path, &inner))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |field: &str, m: String| Err(PipelineError::Config(format!("{field}: {m}")));
        if let Err(e) = self.source.validate() {
            return bad("source", e.to_string());
        }
        if let Err(e) = self.target.validate() {
            return bad("target", e.to_string());
        }
        if std::mem::discriminant(&self.source) != std::mem::discriminant(&self.target)
            || self.source.state_dim() != self.target.state_dim()
            || self.source.n_actions() != self.target.n_actions()
        {
            return bad("target", "source and target must share state and action spaces".into());
        }
        if let Err(e) = self.dve.validate() {
            return bad("dve", e.to_string());
        }
        if let Err(e) = self.learner.validate() {
            return bad("learner", e.to_string());
        }
        if self.data.source_size == 0 || self.data.target_size == 0 {
            return bad("data", "buffer sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.data.explore_eps) {
            return bad("data.explore_eps", format!("{} outside [0, 1]", self.data.explore_eps));
        }
        if self.data.source_size <= self.data.target_size {
            log::warn!(
                "source buffer ({}) is not larger than the target buffer ({})",
                self.data.source_size,
                self.data.target_size
            );
        }
        if self.evaluation.episodes == 0 {
            return bad("evaluation.episodes", "must be at least 1".into());
        }
        if self.benchmark.repetitions == 0 || self.removal.repetitions == 0 {
            return bad("repetitions", "must be at least 1".into());
        }
        if self.benchmark.feature_modes.is_empty() {
            return bad("benchmark.feature_modes", "must not be empty".into());
        }
        if let Some(f) = self.removal.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return bad("removal.fractions", format!("{f} outside [0, 1]"));
        }
        Ok(())
    }
}

/// `"missing field `x`"` at path `a` becomes `a.x: missing field`.
fn describe(path: &str, inner: &str) -> String {
    // toml errors put the position first and the message last.
    let message = if inner.starts_with("TOML parse error") {
        inner.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or(inner)
    } else {
        inner.lines().next().unwrap_or(inner)
    };
    let prefix = if path == "." { String::new() } else { format!("{path}.") };
    if let Some(rest) = message.strip_prefix("missing field `") {
        if let Some(name) = rest.split('`').next() {
            return format!("{prefix}{name}: missing field");
        }
    }
    if path == "." {
        message.to_owned()
    } else {
        format!("{path}: {message}")
    }
}
