//! Command-line front end: experiment runs, theorem verification, the
//! exploding-weight stress comparison, mask inspection, and plot-data export.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use driftlab_core::runner::{
    export_plot_data, run_experiment, ExportKind, RunConfig, RunStatus, StressCondition,
};
use driftlab_core::staircase::build_staircase_mask;
use driftlab_core::verify;

#[derive(Parser)]
#[command(
    name = "driftlab",
    about = "Desk-scale lab for stabilized group-relative policy optimization \
             on masked diffusion language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a configured training run and write its log directory.
    Run {
        /// Path to a key=value config file.
        config: PathBuf,
    },
    /// Run a named theorem/property check, or all of them.
    Verify {
        /// One of the named checks, or "all".
        target: String,
    },
    /// Run a config under both the normal and the exploding-weight condition
    /// and summarize the comparison.
    Stress {
        /// Path to a key=value config file; its stress condition is
        /// overridden per leg.
        config: PathBuf,
    },
    /// Print a staircase attention mask as a 0/1 text grid.
    MaskDump {
        /// Sequence length of one stream (the grid is 2n x 2n).
        #[arg(long)]
        n: usize,
        /// Block size; must divide n.
        #[arg(long)]
        block: usize,
    },
    /// Export tidy plot data from a run directory.
    Export {
        run_dir: PathBuf,
        /// reward_curve | spike_rate | threshold_curve | ratio_norm_scatter
        #[arg(long)]
        kind: String,
    },
}

fn init_thread_pool() {
    if let Ok(threads) = std::env::var("DRIFTLAB_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> Result<()> {
    init_thread_pool();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let summary = run_experiment(&cfg)?;
            println!(
                "run {}: status={} steps={} final_reward={}",
                summary.out_dir.display(),
                summary.status.name(),
                summary.outer_steps_completed,
                summary
                    .final_mean_reward
                    .map(|r| format!("{r:.4}"))
                    .unwrap_or_else(|| "-".into())
            );
            // Collapse is a legitimate experimental outcome, not a failure.
            Ok(())
        }
        Command::Verify { target } => {
            let names: Vec<&str> = if target == "all" {
                verify::all_check_names()
            } else {
                vec![target.as_str()]
            };
            let mut all_pass = true;
            for name in names {
                let report = verify::run_check(name)?;
                println!("{report}");
                all_pass &= report.pass;
            }
            if !all_pass {
                bail!("one or more verification checks failed");
            }
            Ok(())
        }
        Command::Stress { config } => {
            let base = RunConfig::load(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            let mut results = Vec::new();
            for condition in [StressCondition::Normal, StressCondition::Exploding] {
                let mut cfg = base.clone();
                cfg.stress = condition;
                cfg.out_dir = base.out_dir.join(condition.name());
                let summary = run_experiment(&cfg)?;
                println!(
                    "{}: status={} steps={} final_reward={}",
                    condition.name(),
                    summary.status.name(),
                    summary.outer_steps_completed,
                    summary
                        .final_mean_reward
                        .map(|r| format!("{r:.4}"))
                        .unwrap_or_else(|| "-".into())
                );
                results.push((condition, summary));
            }
            let collapsed: Vec<&str> = results
                .iter()
                .filter(|(_, s)| s.status == RunStatus::Collapsed)
                .map(|(c, _)| c.name())
                .collect();
            if collapsed.is_empty() {
                println!("no condition collapsed");
            } else {
                println!("collapsed: {}", collapsed.join(", "));
            }
            Ok(())
        }
        Command::MaskDump { n, block } => {
            let sm = build_staircase_mask(n, block)?;
            print!("{}", sm.mask.to_text_grid());
            Ok(())
        }
        Command::Export { run_dir, kind } => {
            let kind = ExportKind::parse(&kind)?;
            let path = export_plot_data(&run_dir, kind)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}
