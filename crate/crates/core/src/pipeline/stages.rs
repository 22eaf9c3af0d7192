use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::report::{ArmReport, CheckpointEval};
use super::{stage_seed, PipelineError, RunConfig};
use crate::buffer::{self, ReplayBuffer};
use crate::divergence::FeatureMode;
use crate::dve::{self, DveConfig, DveHistory, ValuedBuffer};
use crate::envs::{generate_buffer, greedy_rollout_success, train_behavior, DomainConfig};
use crate::neural::ValueNet;
use crate::offline::{evaluate_policy, train_offline, LearnerConfig, OfflinePolicy, OfflineTraining};

pub const SOURCE_BUFFER: &str = "source.dvrb";
pub const TARGET_BUFFER: &str = "target.dvrb";
pub const DVE_NET: &str = "dve.dvnn";
pub const DVE_HISTORY: &str = "dve_history.csv";
pub const VALUES: &str = "values.csv";
pub const FILTERED_BUFFER: &str = "filtered.dvrb";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVALUATION: &str = "evaluation.csv";
pub const REPORT: &str = "report.json";
pub const TIMING: &str = "timing.json";

pub const ARM_BASELINE: &str = "baseline";
pub const ARM_DVORL: &str = "dvorl";

/// Rollouts used to check a behavior policy after training.
const BEHAVIOR_CHECK_ROLLOUTS: usize = 100;

pub fn mode_name(mode: FeatureMode) -> &'static str {
    match mode {
        FeatureMode::StateOnly => "state_only",
        FeatureMode::StateActionNext => "state_action_next",
    }
}

/// Seed label of a target domain; settings with equal dynamics share seeds.
pub fn domain_label(domain: &DomainConfig) -> String {
    format!("domain:{}", domain.tag())
}

pub fn behavior_seed(cfg: &RunConfig, domain: &DomainConfig, rep: usize) -> u64 {
    stage_seed(cfg.seed, "behavior", &domain_label(domain), rep)
}

pub fn generate_seed(cfg: &RunConfig, role: &str, rep: usize) -> u64 {
    stage_seed(cfg.seed, "generate", role, rep)
}

pub fn dve_config(cfg: &RunConfig, mode: FeatureMode, rep: usize) -> DveConfig {
    DveConfig { feature_mode: mode, seed: stage_seed(cfg.seed, "dve", mode_name(mode), rep), ..cfg.dve.clone() }
}

/// Shared by both arms so they differ only in their buffers.
pub fn learner_config(cfg: &RunConfig, rep: usize) -> LearnerConfig {
    LearnerConfig { seed: stage_seed(cfg.seed, "learner", "offline", rep), ..cfg.learner.clone() }
}

pub fn evaluation_seed(cfg: &RunConfig, target: &DomainConfig, rep: usize) -> u64 {
    stage_seed(cfg.seed, "evaluate", &domain_label(target), rep)
}

/// A buffer and the greedy success rate of the behavior policy that filled it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub buffer: ReplayBuffer,
    pub behavior_success: f64,
}

/// Trains a behavior policy on `domain` and fills a buffer of `size` with it.
/// `role` separates the buffer streams of source and target.
pub fn generate_domain(cfg: &RunConfig, domain: &DomainConfig, role: &str, size: usize, rep: usize) -> Result<Generated, PipelineError> {
    let fail = |e: crate::envs::EnvError| PipelineError::stage("generate")(e.to_string());
    let seed = behavior_seed(cfg, domain, rep);
    let behavior = train_behavior(domain, &cfg.behavior, seed).map_err(fail)?;
    let behavior_success = greedy_rollout_success(domain, &behavior.policy, BEHAVIOR_CHECK_ROLLOUTS, seed).map_err(fail)?;
    let buffer = generate_buffer(domain, &behavior.policy, size, cfg.data.explore_eps, generate_seed(cfg, role, rep)).map_err(fail)?;
    log::info!("generated {role} buffer ({} transitions, behavior success {behavior_success:.2})", buffer.len());
    Ok(Generated { buffer, behavior_success })
}

pub fn generate_pair(cfg: &RunConfig, target: &DomainConfig, rep: usize) -> Result<(Generated, Generated), PipelineError> {
    let source = generate_domain(cfg, &cfg.source, "source", cfg.data.source_size, rep)?;
    let target = generate_domain(cfg, target, "target", cfg.data.target_size, rep)?;
    Ok((source, target))
}

pub fn train_values(
    cfg: &RunConfig,
    source: &ReplayBuffer,
    target: &ReplayBuffer,
    mode: FeatureMode,
    rep: usize,
) -> Result<(ValueNet, DveHistory), PipelineError> {
    let dcfg = dve_config(cfg, mode, rep);
    let out = dve::train_dve(source, target, &dcfg).map_err(|e| PipelineError::stage("train-dve")(e.to_string()))?;
    log::info!("trained value estimator ({} steps, {})", out.1.steps.len(), mode_name(mode));
    Ok(out)
}

pub fn value_source<'a>(cfg: &RunConfig, net: &ValueNet, source: &'a ReplayBuffer) -> Result<ValuedBuffer<'a>, PipelineError> {
    dve::value_buffer(net, source, cfg.dve.batch_size).map_err(|e| PipelineError::stage("value")(e.to_string()))
}

/// Trains the offline learner. A buffer left empty by filtering yields the
/// untrained policy at every checkpoint.
pub fn fit_arm(buffer: &ReplayBuffer, learner: &LearnerConfig) -> Result<OfflineTraining, PipelineError> {
    if buffer.is_empty() {
        log::warn!("training buffer '{}' is empty; using the untrained policy", buffer.domain_tag);
        let n_actions = match buffer.action_spec {
            crate::buffer::ActionSpec::Discrete { n_actions } => n_actions,
            crate::buffer::ActionSpec::Continuous { .. } => {
                return Err(PipelineError::stage("train-rl")("offline learners need discrete actions".into()))
            }
        };
        let policy = OfflinePolicy::untrained(learner, n_actions, buffer.state_dim);
        let checkpoints = learner.checkpoint_iterations().into_iter().map(|it| (it, policy.clone())).collect();
        return Ok(OfflineTraining { policy, sup_norm_deltas: Vec::new(), checkpoints });
    }
    train_offline(buffer, learner).map_err(|e| PipelineError::stage("train-rl")(e.to_string()))
}

/// Evaluates every checkpoint on the same episodes and keeps the best; ties go
/// to the earlier checkpoint.
pub fn evaluate_checkpoints(
    arm: &str,
    buffer_len: usize,
    final_sup_norm_delta: Option<f64>,
    checkpoints: &[(usize, OfflinePolicy)],
    target: &DomainConfig,
    episodes: usize,
    seed: u64,
) -> Result<ArmReport, PipelineError> {
    let mut evals = Vec::with_capacity(checkpoints.len());
    for (iteration, policy) in checkpoints {
        let r = evaluate_policy(policy, target, episodes, seed).map_err(|e| PipelineError::stage("evaluate")(e.to_string()))?;
        evals.push(CheckpointEval { iteration: *iteration, mean_return: r.mean_return, std_error: r.std_error });
    }
    let best = evals
        .iter()
        .fold(None::<&CheckpointEval>, |b, e| match b {
            Some(b) if b.mean_return >= e.mean_return => Some(b),
            _ => Some(e),
        })
        .ok_or_else(|| PipelineError::stage("evaluate")("no checkpoints to evaluate".into()))?
        .clone();
    Ok(ArmReport {
        arm: arm.to_owned(),
        buffer_len,
        final_sup_norm_delta,
        checkpoints: evals,
        best_iteration: best.iteration,
        best_return: best.mean_return,
        best_std_error: best.std_error,
    })
}

/// Trains an arm and evaluates its checkpoints on `target`.
pub fn run_arm(
    arm: &str,
    buffer: &ReplayBuffer,
    learner: &LearnerConfig,
    target: &DomainConfig,
    episodes: usize,
    seed: u64,
) -> Result<ArmReport, PipelineError> {
    let trained = fit_arm(buffer, learner)?;
    evaluate_checkpoints(arm, buffer.len(), trained.sup_norm_deltas.last().copied(), &trained.checkpoints, target, episodes, seed)
}

// File-backed stages. Each reads its inputs from and writes its outputs to `dir`.

fn io_fail(stage: &'static str) -> impl Fn(String) -> PipelineError {
    move |m| PipelineError::Stage { stage, message: m }
}

pub fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::stage("setup")(format!("cannot create {}: {e}", dir.display())))
}

pub fn checkpoint_path(dir: &Path, arm: &str, iteration: usize) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("{arm}_{iteration:06}.dvqt"))
}

fn load_buffer(stage: &'static str, path: &Path) -> Result<ReplayBuffer, PipelineError> {
    buffer::load(path).map_err(|e| io_fail(stage)(format!("{}: {e}", path.display())))
}

/// Writes `source.dvrb` and `target.dvrb`.
pub fn stage_generate(cfg: &RunConfig, dir: &Path) -> Result<(Generated, Generated), PipelineError> {
    ensure_dir(dir)?;
    let (source, target) = generate_pair(cfg, &cfg.target, 0)?;
    for (name, g) in [(SOURCE_BUFFER, &source), (TARGET_BUFFER, &target)] {
        buffer::save(&g.buffer, dir.join(name)).map_err(|e| io_fail("generate")(e.to_string()))?;
    }
    Ok((source, target))
}

/// Reads both buffers; writes `dve.dvnn` and `dve_history.csv`.
pub fn stage_train_dve(cfg: &RunConfig, dir: &Path) -> Result<(ValueNet, DveHistory), PipelineError> {
    let source = load_buffer("train-dve", &dir.join(SOURCE_BUFFER))?;
    let target = load_buffer("train-dve", &dir.join(TARGET_BUFFER))?;
    let (net, history) = train_values(cfg, &source, &target, cfg.dve.feature_mode, 0)?;
    net.save(dir.join(DVE_NET)).map_err(|e| io_fail("train-dve")(e.to_string()))?;
    history.write_csv(dir.join(DVE_HISTORY)).map_err(|e| io_fail("train-dve")(e.to_string()))?;
    Ok((net, history))
}

/// Reads the estimator and the source buffer; writes `values.csv`.
pub fn stage_value(cfg: &RunConfig, dir: &Path) -> Result<Vec<f64>, PipelineError> {
    let net = ValueNet::load(dir.join(DVE_NET)).map_err(|e| io_fail("value")(e.to_string()))?;
    let source = load_buffer("value", &dir.join(SOURCE_BUFFER))?;
    let values = value_source(cfg, &net, &source)?.values;
    dve::write_values_csv(&values, dir.join(VALUES)).map_err(|e| io_fail("value")(e.to_string()))?;
    Ok(values)
}

/// Keeps the rows of `buffer_path` whose value is at least the selection threshold.
pub fn stage_filter(cfg: &RunConfig, buffer_path: &Path, values_path: &Path, out_path: &Path) -> Result<ReplayBuffer, PipelineError> {
    let source = load_buffer("filter", buffer_path)?;
    let values = dve::read_values_csv(values_path).map_err(|e| io_fail("filter")(e.to_string()))?;
    if values.len() != source.len() {
        return Err(io_fail("filter")(format!("{} values for a buffer of {}", values.len(), source.len())));
    }
    let filtered = dve::filter_buffer(&ValuedBuffer { buffer: &source, values }, cfg.dve.selection_threshold);
    buffer::save(&filtered, out_path).map_err(|e| io_fail("filter")(e.to_string()))?;
    Ok(filtered)
}

/// Trains both arms; writes every checkpoint under `checkpoints/`.
pub fn stage_train_rl(cfg: &RunConfig, dir: &Path) -> Result<Vec<(String, usize, OfflineTraining)>, PipelineError> {
    ensure_dir(&dir.join(CHECKPOINT_DIR))?;
    let learner = learner_config(cfg, 0);
    let mut out = Vec::new();
    for (arm, file) in [(ARM_BASELINE, SOURCE_BUFFER), (ARM_DVORL, FILTERED_BUFFER)] {
        let buffer = load_buffer("train-rl", &dir.join(file))?;
        let trained = fit_arm(&buffer, &learner)?;
        for (it, policy) in &trained.checkpoints {
            policy.save(checkpoint_path(dir, arm, *it)).map_err(|e| io_fail("train-rl")(e.to_string()))?;
        }
        out.push((arm.to_owned(), buffer.len(), trained));
    }
    Ok(out)
}

/// Evaluates the saved checkpoints of both arms; writes `evaluation.csv`.
pub fn stage_evaluate(cfg: &RunConfig, dir: &Path) -> Result<Vec<ArmReport>, PipelineError> {
    let seed = evaluation_seed(cfg, &cfg.target, 0);
    let mut arms = Vec::new();
    for (arm, file) in [(ARM_BASELINE, SOURCE_BUFFER), (ARM_DVORL, FILTERED_BUFFER)] {
        let buffer_len = load_buffer("evaluate", &dir.join(file))?.len();
        let mut checkpoints = Vec::new();
        for it in cfg.learner.checkpoint_iterations() {
            let p = OfflinePolicy::load(checkpoint_path(dir, arm, it)).map_err(|e| io_fail("evaluate")(e.to_string()))?;
            checkpoints.push((it, p));
        }
        arms.push(evaluate_checkpoints(arm, buffer_len, None, &checkpoints, &cfg.target, cfg.evaluation.episodes, seed)?);
    }
    write_evaluation_csv(&arms, &dir.join(EVALUATION))?;
    Ok(arms)
}

fn write_evaluation_csv(arms: &[ArmReport], path: &Path) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_fail("evaluate")(e.to_string()))?;
    let fail = |e: csv::Error| io_fail("evaluate")(e.to_string());
    w.write_record(["arm", "iteration", "mean_return", "std_error", "best"]).map_err(fail)?;
    for a in arms {
        for c in &a.checkpoints {
            w.write_record([
                a.arm.clone(),
                c.iteration.to_string(),
                c.mean_return.to_string(),
                c.std_error.to_string(),
                u8::from(c.iteration == a.best_iteration).to_string(),
            ])
            .map_err(fail)?;
        }
    }
    w.flush().map_err(|e| io_fail("evaluate")(e.to_string()))
}

pub fn write_json(stage: &'static str, value: &impl serde::Serialize, path: &Path) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_fail(stage)(e.to_string()))?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(|e| io_fail(stage)(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes()).map_err(|e| io_fail(stage)(e.to_string()))
}
