//! sentidistill: stage-oriented driver for building difficulty-filtered
//! sentiment-analysis distillation datasets.

mod config;
mod manifest;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use log::error;

use sentidistill_core::Error;

use crate::config::{metric_from_str, resolve, PairMethod, PipelineConfig};
use crate::manifest::PipelineLock;
use crate::stages::{run_all, run_stage, StageCtx, StageId};

#[derive(Parser)]
#[command(
    name = "sentidistill",
    version,
    about = "Build difficulty-filtered sentiment-analysis distillation datasets"
)]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "pipeline.toml")]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rerun even when the manifest says the stage is up to date.
    #[arg(long, global = true)]
    force: bool,
    /// Show what would run without executing.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Inject a mock transport failure after N chat calls (testing only).
    #[arg(long, global = true, hide = true)]
    mock_fail_after: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and snapshot the raw corpus.
    Ingest,
    /// Enumerate sentiment attributes for each corpus text.
    Enumerate {
        /// Enumerate at most this many texts.
        #[arg(long)]
        enumeration_limit: Option<usize>,
    },
    /// Threshold attribute mentions into the frequency pool.
    Pool {
        /// Minimum mention count an attribute needs to stay in the pool.
        #[arg(long)]
        min_keep: Option<u64>,
    },
    /// Cluster pooled attributes into perspectives.
    Cluster {
        #[arg(long)]
        damping: Option<f64>,
        #[arg(long)]
        percentile_rate: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        #[arg(long)]
        stable_window: Option<usize>,
    },
    /// Generate open-ended and constrained tasks per perspective.
    Tasks,
    /// Rewrite tasks into full instruction bodies.
    Instructions,
    /// Fill instruction demo pools (rewrites instructions.jsonl).
    Demos {
        #[arg(long)]
        demos_per_task: Option<usize>,
        #[arg(long)]
        balance_ratio: Option<usize>,
    },
    /// Pair instructions with user texts into distillation triples.
    Pair {
        #[arg(long)]
        n_pairs: Option<usize>,
        /// random | attribute
        #[arg(long, value_parser = parse_method)]
        pairing: Option<PairMethod>,
    },
    /// Collect teacher responses (rewrites triples.jsonl; resumable).
    Collect {
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Reserve a warm-up subset of collected triples.
    WarmupSplit {
        #[arg(long)]
        warmup_n: Option<usize>,
    },
    /// Score the remaining triples with a difficulty metric.
    Score {
        /// ranking | perplexity | ifd | length
        #[arg(long)]
        metric: Option<String>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        epsilon_d: Option<f64>,
    },
    /// Filter scored triples by difficulty-prioritized sampling.
    Filter {
        /// prioritized | global | hard_only
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Write the training-ready dataset.
    Export,
    /// Compare externally predicted difficulty scores to the reference.
    ProxyCompare {
        #[arg(long)]
        proxy_scores: Option<PathBuf>,
    },
    /// Summarize pipeline artifacts.
    Report,
    /// Run every stage in order.
    All,
}

fn parse_method(s: &str) -> Result<PairMethod, String> {
    match s {
        "random" => Ok(PairMethod::Random),
        "attribute" => Ok(PairMethod::Attribute),
        other => Err(format!(
            "unknown pairing method {other:?}; expected random or attribute"
        )),
    }
}

fn stage_of(command: &Command) -> Option<StageId> {
    Some(match command {
        Command::Ingest => StageId::Ingest,
        Command::Enumerate { .. } => StageId::Enumerate,
        Command::Pool { .. } => StageId::Pool,
        Command::Cluster { .. } => StageId::Cluster,
        Command::Tasks => StageId::Tasks,
        Command::Instructions => StageId::Instructions,
        Command::Demos { .. } => StageId::Demos,
        Command::Pair { .. } => StageId::Pair,
        Command::Collect { .. } => StageId::Collect,
        Command::WarmupSplit { .. } => StageId::WarmupSplit,
        Command::Score { .. } => StageId::Score,
        Command::Filter { .. } => StageId::Filter,
        Command::Export => StageId::Export,
        Command::ProxyCompare { .. } => StageId::ProxyCompare,
        Command::Report => StageId::Report,
        Command::All => return None,
    })
}

/// Fold per-stage flag overrides into the loaded config before anything
/// is recorded in the manifest.
fn apply_overrides(config: &mut PipelineConfig, command: &Command) -> Result<(), Error> {
    match command {
        Command::Enumerate { enumeration_limit } => {
            if enumeration_limit.is_some() {
                config.attributes.enumeration_limit = *enumeration_limit;
            }
        }
        Command::Pool { min_keep } => {
            if let Some(v) = min_keep {
                config.attributes.min_keep = *v;
            }
        }
        Command::Cluster {
            damping,
            percentile_rate,
            max_iter,
            stable_window,
        } => {
            if let Some(v) = damping {
                config.clustering.damping = *v;
            }
            if let Some(v) = percentile_rate {
                config.clustering.percentile_rate = *v;
            }
            if let Some(v) = max_iter {
                config.clustering.max_iter = *v;
            }
            if let Some(v) = stable_window {
                config.clustering.stable_window = *v;
            }
        }
        Command::Demos {
            demos_per_task,
            balance_ratio,
        } => {
            if let Some(v) = demos_per_task {
                config.instructions.demos_per_task = *v;
            }
            if let Some(v) = balance_ratio {
                config.instructions.balance_ratio = *v;
            }
        }
        Command::Pair { n_pairs, pairing } => {
            if let Some(v) = n_pairs {
                config.pairing.n_pairs = *v;
            }
            if let Some(v) = pairing {
                config.pairing.method = *v;
            }
        }
        Command::Collect { checkpoint_every } => {
            if let Some(v) = checkpoint_every {
                config.pairing.checkpoint_every = *v;
            }
        }
        Command::WarmupSplit { warmup_n } => {
            if let Some(v) = warmup_n {
                config.difficulty.warmup_n = *v;
            }
        }
        Command::Score {
            metric,
            top_p,
            epsilon_d,
        } => {
            if let Some(v) = metric {
                metric_from_str(v)?;
                config.difficulty.metric = v.clone();
            }
            if let Some(v) = top_p {
                config.difficulty.top_p = *v;
            }
            if let Some(v) = epsilon_d {
                config.difficulty.epsilon_d = *v;
            }
        }
        Command::Filter { strategy } => {
            if let Some(v) = strategy {
                config.filter.strategy = v.clone();
            }
        }
        Command::ProxyCompare { proxy_scores } => {
            if proxy_scores.is_some() {
                config.difficulty.proxy_scores = proxy_scores.clone();
            }
        }
        _ => {}
    }
    config.validate()
}

fn real_main(cli: Cli) -> anyhow::Result<()> {
    let mut config = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    apply_overrides(&mut config, &cli.command)?;

    let config_dir = cli
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let out_dir = resolve(&config_dir, &config.out_dir);
    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let _lock = PipelineLock::acquire(&out_dir)?;

    let ctx = StageCtx {
        config,
        config_dir,
        out_dir,
        force: cli.force,
        dry_run: cli.dry_run,
        mock_fail_after: cli.mock_fail_after,
    };
    match stage_of(&cli.command) {
        Some(stage) => {
            run_stage(&ctx, stage)?;
        }
        None => run_all(&ctx)?,
    }
    Ok(())
}

fn exit_code(error: &anyhow::Error) -> u8 {
    match error.downcast_ref::<Error>() {
        Some(Error::MissingStage(_)) => 2,
        Some(Error::Backend(_)) => 3,
        Some(Error::Config(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match real_main(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_all_stage_commands() {
        for stage in crate::stages::ALL {
            let cli = Cli::try_parse_from(["sentidistill", stage.name()]).unwrap();
            assert_eq!(stage_of(&cli.command), Some(stage));
        }
        let cli = Cli::try_parse_from(["sentidistill", "all"]).unwrap();
        assert_eq!(stage_of(&cli.command), None);
    }

    #[test]
    fn overrides_reach_the_config() {
        let mut config = PipelineConfig::default();
        let cli = Cli::try_parse_from([
            "sentidistill",
            "pair",
            "--n-pairs",
            "123",
            "--pairing",
            "attribute",
        ])
        .unwrap();
        apply_overrides(&mut config, &cli.command).unwrap();
        assert_eq!(config.pairing.n_pairs, 123);
        assert_eq!(config.pairing.method, PairMethod::Attribute);
    }

    #[test]
    fn invalid_override_is_a_config_error() {
        let mut config = PipelineConfig::default();
        let cli =
            Cli::try_parse_from(["sentidistill", "score", "--metric", "vibes"]).unwrap();
        let err = apply_overrides(&mut config, &cli.command).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(exit_code(&anyhow::Error::new(err)), 4);
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        let wrap = |e: Error| anyhow::Error::new(e);
        assert_eq!(exit_code(&wrap(Error::MissingStage("score".into()))), 2);
        assert_eq!(exit_code(&wrap(Error::Config("bad".into()))), 4);
        assert_eq!(exit_code(&wrap(Error::Precondition("x".into()))), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("anything else")), 1);
    }
}
