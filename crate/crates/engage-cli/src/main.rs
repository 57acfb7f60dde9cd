//! `engage` command-line entry point.
//!
//! Exit codes: 0 success, 2 config/validation error, 3 agent/backend
//! failure, 4 internal invariant violation.

use clap::{Parser, Subcommand};
use engage_cli::commands::{
    cmd_bon, cmd_eval, cmd_explore, cmd_gen_dt, cmd_mine_pairs, cmd_pipeline, cmd_train_dpo,
    cmd_train_rm, cmd_validate, PolicyRef,
};
use engage_cli::{CliError, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "engage",
    about = "Dialogue-tree search, engagement mining and policy alignment pipeline"
)]
struct Cli {
    /// Run-config TOML path.
    #[arg(long, global = true, default_value = "engage.toml")]
    config: PathBuf,

    /// Override the config's root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Redo work even when artifacts already exist.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build one search tree per user condition
    Explore,
    /// Extract chosen/rejected response pairs from explored trees
    MinePairs,
    /// Train the pairwise reward model on mined pairs
    TrainRm,
    /// Generate policy response pairs ranked by the reward model
    GenDt,
    /// Align the policy on the composed preference dataset
    TrainDpo,
    /// Pick the best of N policy samples for one user utterance
    Bon {
        /// User utterance to respond to.
        #[arg(long)]
        context: String,
        /// Candidate count (defaults to the config's eval.bon_n).
        #[arg(long)]
        n: Option<usize>,
        /// Policy to sample: baseline, aligned, or a policy JSON path.
        #[arg(long, default_value = "baseline")]
        policy: String,
    },
    /// Run interactive evaluation episodes against the user simulator
    Eval {
        /// Policy to evaluate: baseline, aligned, bon, mirror, or a path.
        #[arg(long, default_value = "baseline")]
        policy: String,
        /// Episode count (defaults to the config's eval.episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run every stage: explore, mine, train-rm, gen-dt, train-dpo, eval
    Pipeline,
    /// Revalidate the config and every persisted artifact
    Validate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }

    match cli.command {
        Command::Explore => {
            let trees = cmd_explore(&config, cli.force)?;
            println!("explored {} trees -> {}", trees.len(), config.out_dir.display());
        }
        Command::MinePairs => {
            let path = cmd_mine_pairs(&config)?;
            println!("mined pairs -> {}", path.display());
        }
        Command::TrainRm => {
            let path = cmd_train_rm(&config)?;
            println!("reward model -> {}", path.display());
        }
        Command::GenDt => {
            let paths = cmd_gen_dt(&config)?;
            println!("ranked pairs -> {}", paths[0].display());
        }
        Command::TrainDpo => {
            let paths = cmd_train_dpo(&config)?;
            println!("aligned policy -> {}", paths[1].display());
        }
        Command::Bon { context, n, policy } => {
            let response = cmd_bon(&config, &context, n, &PolicyRef::parse(&policy))?;
            println!("{response}");
        }
        Command::Eval { policy, episodes } => {
            let policy_ref = PolicyRef::parse(&policy);
            let (report, path) = cmd_eval(&config, &policy_ref, episodes)?;
            println!(
                "eval[{}]: engaged rate {:.4}, mean donation ${:.2}, mean turns {}, report -> {}",
                policy_ref.label(),
                report.engaged_rate,
                report.mean_donation,
                report
                    .mean_turns
                    .map(|t| format!("{t:.2}"))
                    .unwrap_or_else(|| "n/a".into()),
                path.display()
            );
        }
        Command::Pipeline => {
            let manifest = cmd_pipeline(&config, cli.force)?;
            println!("pipeline complete, manifest -> {}", manifest.display());
        }
        Command::Validate => {
            let summary = cmd_validate(&config)?;
            println!(
                "validated: {} trees, {} mined pairs, {} ranked pairs, {} dataset pairs, {} policies, {} eval reports, {} manifest artifacts",
                summary.trees,
                summary.mined_pairs,
                summary.ranked_pairs,
                summary.dataset_pairs,
                summary.policies,
                summary.eval_reports,
                summary.manifest_artifacts
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
