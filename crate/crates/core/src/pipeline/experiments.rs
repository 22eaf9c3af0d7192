use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::report::{BehaviorSuccess, RemovalRow, RunReport, Seeds, TransferRow};
use super::stages::*;
use super::{BufferStats, DveSummary, PipelineError, RunConfig, ValueSummary};
use crate::dve::{self, RemovalSide};
use crate::envs::DomainConfig;

pub const TRANSFER_CSV: &str = "transfer.csv";
pub const TRANSFER_SUMMARY: &str = "transfer_summary.json";
pub const REMOVAL_ROWS_CSV: &str = "removal_rows.csv";
pub const REMOVAL_CURVE_CSV: &str = "removal_curve.csv";
pub const REMOVAL_SUMMARY: &str = "removal_summary.json";

#[derive(Debug, Serialize)]
struct Timing {
    wall_clock_seconds: f64,
}

fn write_timing(dir: &Path, started: Instant) -> Result<(), PipelineError> {
    write_json("report", &Timing { wall_clock_seconds: started.elapsed().as_secs_f64() }, &dir.join(TIMING))
}

fn seeds(cfg: &RunConfig) -> Seeds {
    Seeds {
        master: cfg.seed,
        behavior_source: behavior_seed(cfg, &cfg.source, 0),
        behavior_target: behavior_seed(cfg, &cfg.target, 0),
        generate_source: generate_seed(cfg, "source", 0),
        generate_target: generate_seed(cfg, "target", 0),
        dve: dve_config(cfg, cfg.dve.feature_mode, 0).seed,
        learner: learner_config(cfg, 0).seed,
        evaluate: evaluation_seed(cfg, &cfg.target, 0),
    }
}

/// Runs every stage into `dir` and writes `report.json` and `timing.json`.
pub fn run_single(cfg: &RunConfig, dir: &Path) -> Result<RunReport, PipelineError> {
    let started = Instant::now();
    let (source, target) = stage_generate(cfg, dir)?;
    let (_, history) = stage_train_dve(cfg, dir)?;
    let values = stage_value(cfg, dir)?;
    let filtered = stage_filter(cfg, &dir.join(SOURCE_BUFFER), &dir.join(VALUES), &dir.join(FILTERED_BUFFER))?;
    let trained = stage_train_rl(cfg, dir)?;
    let mut arms = stage_evaluate(cfg, dir)?;
    for arm in &mut arms {
        arm.final_sup_norm_delta =
            trained.iter().find(|(a, _, _)| *a == arm.arm).and_then(|(_, _, t)| t.sup_norm_deltas.last().copied());
    }

    let report = RunReport {
        config: cfg.clone(),
        seeds: seeds(cfg),
        behavior_success: BehaviorSuccess {
            source_on_source: source.behavior_success,
            target_on_target: target.behavior_success,
        },
        source: BufferStats::of(&source.buffer),
        target: BufferStats::of(&target.buffer),
        filtered: BufferStats::of(&filtered),
        dve: DveSummary::of(&history),
        values: ValueSummary::of(&values, cfg.dve.selection_threshold),
        arms,
        version: env!("CARGO_PKG_VERSION").to_owned(),
    };
    write_json("report", &report, &dir.join(REPORT))?;
    write_timing(dir, started)?;
    Ok(report)
}

/// Mean of one benchmark cell over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferCell {
    pub setting: String,
    pub target_shift: f64,
    pub feature_mode: String,
    pub repetitions: usize,
    pub baseline_mean: f64,
    pub baseline_std_error: f64,
    pub dvorl_mean: f64,
    pub dvorl_std_error: f64,
    pub mean_kept_fraction: f64,
    /// Repetitions where the filtered arm's best return is at least the baseline's.
    pub wins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferOutcome {
    pub rows: Vec<TransferRow>,
    pub cells: Vec<TransferCell>,
}

/// `(name, target)` for every benchmark setting.
pub fn transfer_settings(cfg: &RunConfig) -> Vec<(String, DomainConfig)> {
    let mut out = Vec::new();
    if cfg.benchmark.include_identical {
        out.push(("identical".to_owned(), cfg.source.clone()));
    }
    out.push(("target".to_owned(), cfg.target.clone()));
    for &s in &cfg.benchmark.extra_target_shifts {
        out.push((format!("shift={s}"), cfg.target.with_shift(s)));
    }
    out
}

fn transfer_repetition(cfg: &RunConfig, rep: usize) -> Result<Vec<TransferRow>, PipelineError> {
    let source = generate_domain(cfg, &cfg.source, "source", cfg.data.source_size, rep)?.buffer;
    let learner = learner_config(cfg, rep);
    let baseline = fit_arm(&source, &learner)?;
    let mut rows = Vec::new();
    for (setting, target_cfg) in transfer_settings(cfg) {
        let target = generate_domain(cfg, &target_cfg, "target", cfg.data.target_size, rep)?.buffer;
        let episodes = cfg.evaluation.episodes;
        let eval_seed = evaluation_seed(cfg, &target_cfg, rep);
        let row = |mode: &str, arm: &super::ArmReport| TransferRow {
            repetition: rep,
            setting: setting.clone(),
            target_shift: target_cfg.shift(),
            feature_mode: mode.to_owned(),
            arm: arm.arm.clone(),
            buffer_len: arm.buffer_len,
            mean_return: arm.best_return,
            std_error: arm.best_std_error,
        };
        let base = evaluate_checkpoints(ARM_BASELINE, source.len(), None, &baseline.checkpoints, &target_cfg, episodes, eval_seed)?;
        rows.push(row("none", &base));
        for &mode in &cfg.benchmark.feature_modes {
            let (net, _) = train_values(cfg, &source, &target, mode, rep)?;
            let valued = value_source(cfg, &net, &source)?;
            let filtered = dve::filter_buffer(&valued, cfg.dve.selection_threshold);
            let arm = run_arm(ARM_DVORL, &filtered, &learner, &target_cfg, episodes, eval_seed)?;
            rows.push(row(mode_name(mode), &arm));
        }
    }
    Ok(rows)
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn summarize_transfer(cfg: &RunConfig, rows: &[TransferRow]) -> Vec<TransferCell> {
    let mut cells = Vec::new();
    for (setting, target_cfg) in transfer_settings(cfg) {
        let base: Vec<&TransferRow> = rows.iter().filter(|r| r.setting == setting && r.arm == ARM_BASELINE).collect();
        for &mode in &cfg.benchmark.feature_modes {
            let arm: Vec<&TransferRow> =
                rows.iter().filter(|r| r.setting == setting && r.feature_mode == mode_name(mode)).collect();
            let wins = arm
                .iter()
                .filter(|a| base.iter().any(|b| b.repetition == a.repetition && a.mean_return >= b.mean_return))
                .count();
            let (baseline_mean, baseline_std_error) = mean_and_se(&base.iter().map(|r| r.mean_return).collect::<Vec<_>>());
            let (dvorl_mean, dvorl_std_error) = mean_and_se(&arm.iter().map(|r| r.mean_return).collect::<Vec<_>>());
            let kept: Vec<f64> = arm
                .iter()
                .filter_map(|a| {
                    let b = base.iter().find(|b| b.repetition == a.repetition)?;
                    Some(a.buffer_len as f64 / b.buffer_len.max(1) as f64)
                })
                .collect();
            cells.push(TransferCell {
                setting: setting.clone(),
                target_shift: target_cfg.shift(),
                feature_mode: mode_name(mode).to_owned(),
                repetitions: arm.len(),
                baseline_mean,
                baseline_std_error,
                dvorl_mean,
                dvorl_std_error,
                mean_kept_fraction: mean_and_se(&kept).0,
                wins,
            });
        }
    }
    cells
}

fn write_rows<T: Serialize>(stage: &'static str, rows: &[T], path: &Path) -> Result<(), PipelineError> {
    let fail = |e: csv::Error| PipelineError::stage(stage)(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| PipelineError::stage(stage)(e.to_string()))
}

/// Baseline and filtered arms for every setting, feature mode and repetition.
/// The baseline is trained once per repetition and evaluated on each setting.
pub fn run_transfer_benchmark(cfg: &RunConfig, dir: &Path) -> Result<TransferOutcome, PipelineError> {
    let started = Instant::now();
    ensure_dir(dir)?;
    let per_rep: Vec<Vec<TransferRow>> =
        (0..cfg.benchmark.repetitions).into_par_iter().map(|rep| transfer_repetition(cfg, rep)).collect::<Result<_, _>>()?;
    let rows: Vec<TransferRow> = per_rep.into_iter().flatten().collect();
    let cells = summarize_transfer(cfg, &rows);
    write_rows("bench-transfer", &rows, &dir.join(TRANSFER_CSV))?;
    let outcome = TransferOutcome { rows, cells };
    write_json("bench-transfer", &outcome.cells, &dir.join(TRANSFER_SUMMARY))?;
    write_timing(dir, started)?;
    Ok(outcome)
}

/// One point of the removal curve, averaged over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemovalPoint {
    pub fraction: f64,
    pub side: String,
    pub mean_return: f64,
    pub std_error: f64,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemovalOutcome {
    pub rows: Vec<RemovalRow>,
    pub curve: Vec<RemovalPoint>,
}

const SIDES: [RemovalSide; 2] = [RemovalSide::Highest, RemovalSide::Lowest];

fn removal_repetition(cfg: &RunConfig, rep: usize) -> Result<Vec<RemovalRow>, PipelineError> {
    let (source, target) = generate_pair(cfg, &cfg.target, rep)?;
    let (net, _) = train_values(cfg, &source.buffer, &target.buffer, cfg.dve.feature_mode, rep)?;
    let valued = value_source(cfg, &net, &source.buffer)?;
    let learner = learner_config(cfg, rep);
    let eval_seed = evaluation_seed(cfg, &cfg.target, rep);
    let episodes = cfg.evaluation.episodes;
    let mut rows = Vec::new();
    let mut full = None;
    for &fraction in &cfg.removal.fractions {
        for side in SIDES {
            // Nothing is removed at zero, so both sides share one run.
            let arm = if fraction == 0.0 && full.is_some() {
                full.clone().unwrap()
            } else {
                let kept = dve::exclude_fraction(&valued, fraction, side);
                let arm = run_arm(side.as_str(), &kept, &learner, &cfg.target, episodes, eval_seed)?;
                if fraction == 0.0 {
                    full = Some(arm.clone());
                }
                arm
            };
            rows.push(RemovalRow {
                repetition: rep,
                fraction,
                side: side.as_str().to_owned(),
                buffer_len: arm.buffer_len,
                mean_return: arm.best_return,
                std_error: arm.best_std_error,
            });
        }
    }
    Ok(rows)
}

/// Removes the highest- and lowest-valued fractions of the source buffer and
/// evaluates the learner trained on what is left.
pub fn run_removal_curve(cfg: &RunConfig, dir: &Path) -> Result<RemovalOutcome, PipelineError> {
    let started = Instant::now();
    ensure_dir(dir)?;
    let per_rep: Vec<Vec<RemovalRow>> =
        (0..cfg.removal.repetitions).into_par_iter().map(|rep| removal_repetition(cfg, rep)).collect::<Result<_, _>>()?;
    let rows: Vec<RemovalRow> = per_rep.into_iter().flatten().collect();
    let mut curve = Vec::new();
    for &fraction in &cfg.removal.fractions {
        for side in SIDES {
            let returns: Vec<f64> =
                rows.iter().filter(|r| r.fraction == fraction && r.side == side.as_str()).map(|r| r.mean_return).collect();
            let (mean_return, std_error) = mean_and_se(&returns);
            curve.push(RemovalPoint { fraction, side: side.as_str().to_owned(), mean_return, std_error, repetitions: returns.len() });
        }
    }
    write_rows("bench-removal", &rows, &dir.join(REMOVAL_ROWS_CSV))?;
    write_rows("bench-removal", &curve, &dir.join(REMOVAL_CURVE_CSV))?;
    let outcome = RemovalOutcome { rows, curve };
    write_json("bench-removal", &outcome.curve, &dir.join(REMOVAL_SUMMARY))?;
    write_timing(dir, started)?;
    Ok(outcome)
}
