//! Command-line entry point. Every subcommand reads one TOML config and works
//! inside one output directory.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::pipeline::{self, PipelineError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "dvorl", version, about = "Data valuation for offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out_dir` of the config, then `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train behavior policies and write the source and target buffers.
    Generate(Common),
    /// Train the value estimator on the generated buffers.
    TrainDve(Common),
    /// Value every source transition.
    Value(Common),
    /// Keep the transitions whose value reaches the selection threshold.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        buffer: Option<PathBuf>,
        #[arg(long)]
        values: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train the offline learner on the full and on the filtered buffer.
    TrainRl(Common),
    /// Evaluate every saved checkpoint on the target domain.
    Evaluate(Common),
    /// All of the above in one go, plus `report.json`.
    Run(Common),
    BenchTransfer(Common),
    BenchRemoval(Common),
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, PathBuf), PipelineError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        let out = self.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
        Ok((cfg, out))
    }
}

/// Parses `argv` (program name first) and runs the subcommand; returns the exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(parsed.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Generate(c) => {
            let (cfg, out) = c.resolve()?;
            let (s, t) = pipeline::stage_generate(&cfg, &out)?;
            println!("source {} transitions, target {} transitions", s.buffer.len(), t.buffer.len());
        }
        Command::TrainDve(c) => {
            let (cfg, out) = c.resolve()?;
            let (_, history) = pipeline::stage_train_dve(&cfg, &out)?;
            println!("{} estimator steps", history.steps.len());
        }
        Command::Value(c) => {
            let (cfg, out) = c.resolve()?;
            let values = pipeline::stage_value(&cfg, &out)?;
            println!("{} values written", values.len());
        }
        Command::Filter { common, buffer, values, output } => {
            let (cfg, out) = common.resolve()?;
            let buffer = buffer.unwrap_or_else(|| out.join(pipeline::SOURCE_BUFFER));
            let values = values.unwrap_or_else(|| out.join(pipeline::VALUES));
            let output = output.unwrap_or_else(|| out.join(pipeline::FILTERED_BUFFER));
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                pipeline::ensure_dir(dir)?;
            }
            let filtered = pipeline::stage_filter(&cfg, &buffer, &values, &output)?;
            println!("kept {} transitions", filtered.len());
        }
        Command::TrainRl(c) => {
            let (cfg, out) = c.resolve()?;
            for (arm, len, _) in pipeline::stage_train_rl(&cfg, &out)? {
                println!("{arm}: trained on {len} transitions");
            }
        }
        Command::Evaluate(c) => {
            let (cfg, out) = c.resolve()?;
            for arm in pipeline::stage_evaluate(&cfg, &out)? {
                println!("{}: best return {:.4} ± {:.4} at iteration {}", arm.arm, arm.best_return, arm.best_std_error, arm.best_iteration);
            }
        }
        Command::Run(c) => {
            let (cfg, out) = c.resolve()?;
            let report = pipeline::run_single(&cfg, &out)?;
            for arm in &report.arms {
                println!("{}: best return {:.4} ± {:.4} ({} transitions)", arm.arm, arm.best_return, arm.best_std_error, arm.buffer_len);
            }
        }
        Command::BenchTransfer(c) => {
            let (cfg, out) = c.resolve()?;
            for cell in pipeline::run_transfer_benchmark(&cfg, &out)?.cells {
                println!(
                    "{} / {}: baseline {:.4}, dvorl {:.4}, wins {}/{}",
                    cell.setting, cell.feature_mode, cell.baseline_mean, cell.dvorl_mean, cell.wins, cell.repetitions
                );
            }
        }
        Command::BenchRemoval(c) => {
            let (cfg, out) = c.resolve()?;
            for p in pipeline::run_removal_curve(&cfg, &out)?.curve {
                println!("{:.1} {}: {:.4} ± {:.4}", p.fraction, p.side, p.mean_return, p.std_error);
            }
        }
    }
    Ok(())
}
