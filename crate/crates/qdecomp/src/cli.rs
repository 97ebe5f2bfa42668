use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use qdecomp_core::rng::{component, stream};
use qdecomp_core::uncertainty::visitation_epistemic_correlation;

use crate::checkpoint::import_checkpoint;
use crate::config::{ExperimentConfig, MapRule};
use crate::error::{Result, RunError};
use crate::formats::{write_map_csv, write_scatter_csv};
use crate::runner::{build_environment, figure_preset, map_from_checkpoint, run, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "qdecomp", version, about = "Epistemic and aleatoric uncertainty maps from quantile ensembles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment described by a JSON or TOML config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-state uncertainty map of a checkpoint as CSV.
    Map {
        #[arg(long)]
        checkpoint: PathBuf,
        /// greedy, fixed:<action> or behavior-weighted (default: the run's rule).
        #[arg(long, value_parser = parse_rule)]
        rule: Option<MapRule>,
        #[arg(long)]
        normalize: bool,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out a checkpoint's greedy policy and print visits against
    /// epistemic uncertainty as CSV.
    Scatter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Rollout seed (default: the run's seed).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the preset behind one figure.
    Replicate {
        #[arg(long, value_parser = ["1a", "1b", "2b"])]
        figure: String,
        #[arg(long)]
        seed: u64,
        /// Output directory (default: runs/<experiment>-seed<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_rule(text: &str) -> std::result::Result<MapRule, String> {
    match text {
        "greedy" => Ok(MapRule::Greedy),
        "behavior-weighted" => Ok(MapRule::BehaviorWeighted),
        _ => text
            .strip_prefix("fixed:")
            .and_then(|a| a.parse().ok())
            .map(MapRule::Fixed)
            .ok_or_else(|| format!("unknown rule `{text}` (greedy, fixed:<action>, behavior-weighted)")),
    }
}

fn open_output(out: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(std::fs::File::create(path).map_err(|e| RunError::io(path, e))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn report_manifest(manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(&manifest.headline).expect("headline serializes");
    println!("{text}");
    eprintln!("wrote {} artifacts to {}", manifest.artifacts.len(), manifest.config.outputs.display());
    Ok(())
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg = cfg.with_seed(seed);
            }
            if let Some(out) = out {
                cfg.outputs = out;
            }
            report_manifest(&run(&cfg)?)
        }
        Command::Map { checkpoint, rule, normalize, out } => {
            let ck = import_checkpoint(&checkpoint)?;
            let (map, env) = map_from_checkpoint(&ck, rule, normalize)?;
            write_map_csv(&map, env.grid.as_ref(), open_output(out.as_ref())?)
        }
        Command::Scatter { checkpoint, episodes, seed, out } => {
            let ck = import_checkpoint(&checkpoint)?;
            let cfg = ck.experiment.as_ref().ok_or_else(|| RunError::Config("checkpoint carries no experiment".into()))?;
            let env = build_environment(cfg)?;
            ck.check_shape(&env.mdp)?;
            let mut rng = stream(seed.unwrap_or(cfg.seed), component::ROLLOUT, 0);
            let episodes = episodes.unwrap_or(cfg.analysis.rollout_episodes);
            let report = visitation_epistemic_correlation(
                &ck.ensemble,
                &env.mdp,
                episodes,
                cfg.analysis.rollout_max_steps,
                &mut rng,
            )?;
            write_scatter_csv(&report, open_output(out.as_ref())?)?;
            eprintln!("spearman {:.4} over {} visited states ({} unvisited)", report.spearman, report.scatter().count(), report.unvisited.len());
            Ok(())
        }
        Command::Replicate { figure, seed, out } => {
            let kind = figure_preset(&figure).ok_or_else(|| RunError::Config(format!("unknown figure {figure}")))?;
            let mut cfg = ExperimentConfig::preset(kind, seed);
            if let Some(out) = out {
                cfg.outputs = out;
            }
            report_manifest(&run(&cfg)?)
        }
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
