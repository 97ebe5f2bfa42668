//! The experiment runner: environment, training, analysis, artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use qdecomp_core::envs::{build_cliff_grid, build_open_grid, build_synthetic_clinical, starve, GridSpec};
use qdecomp_core::rng::{component, stream};
use qdecomp_core::uncertainty::{
    normalize, random_walker_reference, state_map, visitation_epistemic_correlation, UncertaintyMap,
    VisitationReport,
};
use qdecomp_core::{train, AnchoredEnsemble, ReplayBuffer, TabularMdp, Transition};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ascii::render_ascii;
use crate::checkpoint::{export_checkpoint, Checkpoint};
use crate::config::{Emit, ExperimentConfig, ExperimentKind, MapRule};
use crate::error::{Result, RunError};
use crate::formats::{write_map_csv, write_reference_csv, write_scatter_csv};

pub const MANIFEST: &str = "manifest.json";
pub const MAP_CSV: &str = "map.csv";
pub const REFERENCE_CSV: &str = "reference.csv";
pub const SCATTER_CSV: &str = "scatter.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const ASCII: &str = "ascii.txt";

/// An experiment's environment, plus its logged data when it has any.
#[derive(Debug, Clone)]
pub struct Environment {
    pub mdp: TabularMdp,
    pub grid: Option<GridSpec>,
    pub dataset: Option<Vec<Transition>>,
}

pub fn build_environment(cfg: &ExperimentConfig) -> Result<Environment> {
    match (cfg.experiment, &cfg.grid, &cfg.clinical) {
        (ExperimentKind::OpenGridStarved, Some(g), _) => {
            Ok(Environment { mdp: build_open_grid(g)?, grid: Some(g.clone()), dataset: None })
        }
        (ExperimentKind::CliffWind, Some(g), _) => {
            Ok(Environment { mdp: build_cliff_grid(g)?, grid: Some(g.clone()), dataset: None })
        }
        (ExperimentKind::SyntheticClinical, _, Some(c)) => {
            let data = build_synthetic_clinical(c)?;
            Ok(Environment { mdp: data.mdp, grid: None, dataset: Some(data.dataset) })
        }
        _ => Err(RunError::Config(format!("no environment section for {}", cfg.experiment))),
    }
}

/// `counts[s * A + a]`: how often each state-action appears in `data`.
pub fn action_counts<'a>(mdp: &TabularMdp, data: impl IntoIterator<Item = &'a Transition>) -> Vec<f64> {
    let mut counts = vec![0.0; mdp.n_states() * mdp.n_actions()];
    for t in data {
        counts[t.state * mdp.n_actions() + t.action] += 1.0;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Adjacent-pair check of a sequence that should not increase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monotonicity {
    pub values: Vec<f64>,
    /// Adjacent pairs where the value goes up.
    pub violations: usize,
    pub max_violation: f64,
    pub range: f64,
    /// No violation, or a single one smaller than 10% of the range.
    pub holds: bool,
}

impl Monotonicity {
    pub fn non_increasing(values: &[f64]) -> Self {
        let rises: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let range = if values.is_empty() { 0.0 } else { max - min };
        let max_violation = rises.iter().copied().fold(0.0, f64::max);
        let holds = rises.is_empty() || (rises.len() == 1 && max_violation < 0.1 * range);
        Self { values: values.to_vec(), violations: rises.len(), max_violation, range, holds }
    }
}

/// Figures of merit computed during the run; absent when they do not apply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub starved_state: Option<usize>,
    /// 1-based rank by epistemic value among non-terminal states.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub starved_state_epistemic_rank: Option<usize>,
    /// Non-terminal state with the largest epistemic value.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_epistemic_state: Option<usize>,
    /// Max minus min of raw / reference aleatoric over non-terminal states.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaled_aleatoric_spread: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaled_aleatoric_max: Option<f64>,
    /// Raw aleatoric along the wind cells, ordered from start to goal.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wind_aleatoric_monotonicity: Option<Monotonicity>,
    /// Mean epistemic over the right half of the top row.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_right_epistemic: Option<f64>,
    /// Mean epistemic over the non-terminal bottom-row cells.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bottom_row_epistemic: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spearman_rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub visited_states: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unvisited_states: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    pub artifacts: Vec<Artifact>,
    pub headline: Headline,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| RunError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))
    }

    pub fn artifact(&self, name: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    /// Re-hashes every listed artifact under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let path = dir.join(&a.name);
            let bytes = fs::read(&path).map_err(|e| RunError::io(&path, e))?;
            if hex::encode(Sha256::digest(&bytes)) != a.sha256 {
                return Err(RunError::Config(format!("{} does not match its manifest hash", a.name)));
            }
        }
        Ok(())
    }
}

/// Everything a run computes before writing files.
pub struct RunOutcome {
    pub env: Environment,
    pub ensemble: AnchoredEnsemble,
    /// Normalised map, with the random-walker reference attached if configured.
    pub map: UncertaintyMap,
    pub report: Option<VisitationReport>,
    pub headline: Headline,
}

fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Trains and analyses without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let env = build_environment(cfg)?;
    let mdp = &env.mdp;
    let mut buffer = match &env.dataset {
        Some(data) if cfg.train.mode == qdecomp_core::TrainMode::Offline => {
            ReplayBuffer::from_transitions(data, mdp.n_states())?
        }
        _ => ReplayBuffer::new(cfg.train.buffer_capacity, mdp.n_states())?,
    };
    let mut headline = Headline::default();
    if let (Some(grid), Some(s)) = (&env.grid, cfg.analysis.starve) {
        let state = grid.state_of(s.cell)?;
        buffer = starve(buffer, state, s.prob)?;
        headline.starved_state = Some(state);
    }
    let ensemble = train(mdp, &mut buffer, &cfg.train)?;

    let rule = cfg.analysis.rule.to_action_rule(|| match &env.dataset {
        Some(data) if cfg.train.mode == qdecomp_core::TrainMode::Offline => action_counts(mdp, data),
        _ => action_counts(mdp, buffer.entries()),
    });
    let mut map = state_map(&ensemble, mdp, &rule)?;
    if cfg.analysis.reference && env.grid.is_some() {
        map = map.with_reference(random_walker_reference(mdp, &cfg.train)?)?;
    }
    let map = normalize(&map);

    headline.starved_state_epistemic_rank = headline.starved_state.and_then(|s| map.epistemic_rank(s));
    headline.max_epistemic_state = map
        .live()
        .max_by(|&a, &b| map.entries[a].estimate.epistemic.total_cmp(&map.entries[b].estimate.epistemic))
        .map(|i| map.entries[i].estimate.state);
    if map.reference_scale.is_some() {
        let scaled: Vec<f64> = map.live().map(|i| map.scaled_aleatoric(i)).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = scaled.iter().copied().fold(f64::INFINITY, f64::min);
        if !scaled.is_empty() {
            headline.scaled_aleatoric_spread = Some(max - min);
            headline.scaled_aleatoric_max = Some(max);
        }
    }
    if let Some(grid) = &env.grid {
        grid_headline(grid, &map, &mut headline)?;
    }

    let report = if cfg.analysis.rollout_episodes > 0 {
        let mut rng = stream(cfg.seed, component::ROLLOUT, 0);
        let report = visitation_epistemic_correlation(
            &ensemble,
            mdp,
            cfg.analysis.rollout_episodes,
            cfg.analysis.rollout_max_steps,
            &mut rng,
        )?;
        headline.spearman_rho = Some(report.spearman);
        headline.visited_states = Some(report.scatter().count());
        headline.unvisited_states = Some(report.unvisited.len());
        Some(report)
    } else {
        None
    };
    Ok(RunOutcome { env, ensemble, map, report, headline })
}

fn grid_headline(grid: &GridSpec, map: &UncertaintyMap, headline: &mut Headline) -> Result<()> {
    let live_epistemic = |cell| -> Result<Option<f64>> {
        let e = &map.entries[grid.state_of(cell)?];
        Ok((!e.terminal && !grid.is_cliff(cell)).then_some(e.estimate.epistemic))
    };
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);

    let mut top_right = Vec::new();
    for c in grid.width / 2 + 1..=grid.width {
        top_right.extend(live_epistemic((1, c))?);
    }
    let mut bottom = Vec::new();
    for c in 1..=grid.width {
        bottom.extend(live_epistemic((grid.height, c))?);
    }
    headline.top_right_epistemic = mean(top_right);
    headline.bottom_row_epistemic = mean(bottom);

    if !grid.wind_cells.is_empty() && grid.wind_prob > 0.0 {
        let mut cells = grid.wind_cells.clone();
        cells.sort_by_key(|&(r, c)| (c, r));
        if grid.start.1 > grid.goal.1 {
            cells.reverse();
        }
        let values = cells
            .iter()
            .map(|&cell| Ok(map.entries[grid.state_of(cell)?].estimate.aleatoric))
            .collect::<Result<Vec<f64>>>()?;
        headline.wind_aleatoric_monotonicity = Some(Monotonicity::non_increasing(&values));
    }
    Ok(())
}

fn write_artifact(dir: &Path, name: &str, bytes: &[u8], artifacts: &mut Vec<Artifact>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| RunError::io(&path, e))?;
    artifacts.push(Artifact { name: name.into(), sha256: hex::encode(Sha256::digest(bytes)), bytes: bytes.len() as u64 });
    Ok(())
}

/// Runs the experiment and writes the emitted artifacts plus
/// `manifest.json` into `cfg.outputs`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let started_unix_ms = unix_ms();
    cfg.validate()?;
    if cfg.emit.contains(&Emit::Ascii) && !cfg.experiment.is_grid() {
        return Err(RunError::Config("ascii output needs a grid experiment".into()));
    }
    let dir: &PathBuf = &cfg.outputs;
    fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    let out = execute(cfg)?;

    let mut artifacts = Vec::new();
    if cfg.emit.contains(&Emit::Map) {
        let mut buf = Vec::new();
        write_map_csv(&out.map, out.env.grid.as_ref(), &mut buf)?;
        write_artifact(dir, MAP_CSV, &buf, &mut artifacts)?;
        if out.map.reference_scale.is_some() {
            let mut buf = Vec::new();
            write_reference_csv(&out.map, &mut buf)?;
            write_artifact(dir, REFERENCE_CSV, &buf, &mut artifacts)?;
        }
    }
    if cfg.emit.contains(&Emit::Scatter) {
        let Some(report) = &out.report else {
            return Err(RunError::Config("scatter output needs analysis.rollout_episodes > 0".into()));
        };
        let mut buf = Vec::new();
        write_scatter_csv(report, &mut buf)?;
        write_artifact(dir, SCATTER_CSV, &buf, &mut artifacts)?;
    }
    if cfg.emit.contains(&Emit::Checkpoint) {
        let ck = Checkpoint {
            ensemble: out.ensemble.clone(),
            train: cfg.train.clone(),
            // The output location is not part of the experiment.
            experiment: Some(ExperimentConfig { outputs: PathBuf::new(), ..cfg.clone() }),
        };
        let path = dir.join(CHECKPOINT);
        export_checkpoint(&ck, &path)?;
        let bytes = fs::read(&path).map_err(|e| RunError::io(&path, e))?;
        artifacts.push(Artifact { name: CHECKPOINT.into(), sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64 });
    }
    if cfg.emit.contains(&Emit::Ascii) {
        let grid = out.env.grid.as_ref().expect("checked above");
        let mut text = render_ascii(&out.map, grid)?;
        text.push('\n');
        write_artifact(dir, ASCII, text.as_bytes(), &mut artifacts)?;
    }

    let manifest = RunManifest {
        config: cfg.clone(),
        started_unix_ms,
        finished_unix_ms: unix_ms(),
        artifacts,
        headline: out.headline,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| RunError::io(&path, e))?;
    Ok(manifest)
}

/// The preset behind each replicated figure.
pub fn figure_preset(figure: &str) -> Option<ExperimentKind> {
    match figure {
        "1a" => Some(ExperimentKind::OpenGridStarved),
        "1b" => Some(ExperimentKind::CliffWind),
        "2b" => Some(ExperimentKind::SyntheticClinical),
        _ => None,
    }
}

/// Rebuilds the environment a checkpoint was trained on and computes its
/// map under `rule`.
pub fn map_from_checkpoint(ck: &Checkpoint, rule: Option<MapRule>, normalized: bool) -> Result<(UncertaintyMap, Environment)> {
    let cfg = ck.experiment.as_ref().ok_or_else(|| RunError::Config("checkpoint carries no experiment".into()))?;
    let env = build_environment(cfg)?;
    ck.check_shape(&env.mdp)?;
    let rule = rule.unwrap_or(cfg.analysis.rule);
    let rule = match rule {
        MapRule::BehaviorWeighted => match &env.dataset {
            Some(data) => rule.to_action_rule(|| action_counts(&env.mdp, data)),
            None => return Err(RunError::Config("behavior-weighted maps from a checkpoint need logged data".into())),
        },
        other => other.to_action_rule(Vec::new),
    };
    let map = state_map(&ck.ensemble, &env.mdp, &rule)?;
    Ok((if normalized { normalize(&map) } else { map }, env))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonicity_statistic() {
        assert!(Monotonicity::non_increasing(&[0.9, 0.7, 0.4, 0.0]).holds);
        let small = Monotonicity::non_increasing(&[1.0, 1.05, 0.4, 0.0]);
        assert_eq!((small.violations, small.holds), (1, true));
        let large = Monotonicity::non_increasing(&[1.0, 1.2, 0.4, 0.0]);
        assert!(!large.holds);
        let two = Monotonicity::non_increasing(&[1.0, 1.01, 0.4, 0.41]);
        assert_eq!((two.violations, two.holds), (2, false));
    }

    #[test]
    fn figures() {
        assert_eq!(figure_preset("1a"), Some(ExperimentKind::OpenGridStarved));
        assert_eq!(figure_preset("2b"), Some(ExperimentKind::SyntheticClinical));
        assert_eq!(figure_preset("3"), None);
    }
}
