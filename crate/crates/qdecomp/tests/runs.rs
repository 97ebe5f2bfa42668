use std::fs;

use qdecomp::checkpoint::import_checkpoint;
use qdecomp::config::{ConfigFormat, Emit, ExperimentConfig, ExperimentKind, MapRule};
use qdecomp::formats::write_map_csv;
use qdecomp::runner::{map_from_checkpoint, run, RunManifest, ASCII, CHECKPOINT, MAP_CSV, MANIFEST, REFERENCE_CSV, SCATTER_CSV};
use qdecomp_core::SyntheticClinicalSpec;

fn quick(kind: ExperimentKind, seed: u64, dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(kind, seed);
    cfg.outputs = dir.to_path_buf();
    cfg.train.n_steps = 2_000;
    cfg.analysis.rollout_episodes = 20;
    if let Some(c) = &mut cfg.clinical {
        *c = SyntheticClinicalSpec { n_states: 60, n_actions: 4, terminal_frac: 0.05, dataset_size: 3_000, ..c.clone() };
    }
    cfg
}

#[test]
fn grid_run_writes_verified_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(ExperimentKind::OpenGridStarved, 3, dir.path());
    let manifest = run(&cfg).unwrap();
    for name in [MAP_CSV, REFERENCE_CSV, CHECKPOINT, ASCII, MANIFEST] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let loaded = RunManifest::load(dir.path()).unwrap();
    assert_eq!(loaded, manifest);
    loaded.verify(dir.path()).unwrap();
    assert_eq!(manifest.headline.starved_state, Some(24));
    assert!(manifest.headline.starved_state_epistemic_rank.is_some());
    assert!(manifest.headline.scaled_aleatoric_spread.is_some());

    let ascii = fs::read_to_string(dir.path().join(ASCII)).unwrap();
    assert_eq!(ascii.lines().count(), 7);
    assert!(ascii.trim_end().ends_with('G'));

    fs::write(dir.path().join(MAP_CSV), "tampered").unwrap();
    assert!(loaded.verify(dir.path()).is_err());
}

#[test]
fn runs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run(&quick(ExperimentKind::CliffWind, 9, a.path())).unwrap();
    let mb = run(&quick(ExperimentKind::CliffWind, 9, b.path())).unwrap();
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.headline, mb.headline);
    let mc = run(&quick(ExperimentKind::CliffWind, 10, a.path())).unwrap();
    assert_ne!(ma.artifact(CHECKPOINT), mc.artifact(CHECKPOINT));
    assert!(ma.headline.wind_aleatoric_monotonicity.is_some());
}

#[test]
fn empty_emit_still_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(ExperimentKind::CliffWind, 1, dir.path());
    cfg.emit.clear();
    cfg.train.n_steps = 0;
    let manifest = run(&cfg).unwrap();
    assert!(manifest.artifacts.is_empty());
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from(MANIFEST)]);
}

#[test]
fn checkpoint_reproduces_map() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(ExperimentKind::SyntheticClinical, 2, dir.path());
    let manifest = run(&cfg).unwrap();
    assert!(dir.path().join(SCATTER_CSV).exists());
    assert!(manifest.headline.spearman_rho.is_some());

    let ck = import_checkpoint(&dir.path().join(CHECKPOINT)).unwrap();
    assert_eq!(ck.train, cfg.train);
    let (map, env) = map_from_checkpoint(&ck, None, true).unwrap();
    let mut csv = Vec::new();
    write_map_csv(&map, env.grid.as_ref(), &mut csv).unwrap();
    assert_eq!(csv, fs::read(dir.path().join(MAP_CSV)).unwrap());

    let (weighted, _) = map_from_checkpoint(&ck, Some(MapRule::BehaviorWeighted), false).unwrap();
    assert_eq!(weighted.len(), map.len());
}

#[test]
fn config_files_override_presets() {
    let dir = tempfile::tempdir().unwrap();
    let toml = format!(
        "experiment = \"cliff-wind\"\nseed = 4\noutputs = {:?}\nemit = [\"map\"]\n[train]\nn_steps = 500\n[analysis]\nrollout_episodes = 0\n",
        dir.path()
    );
    let cfg = ExperimentConfig::from_str(&toml, ConfigFormat::Toml).unwrap();
    assert_eq!(cfg.train.seed, 4);
    assert_eq!(cfg.emit, [Emit::Map].into());
    assert_eq!(cfg.analysis.rule, MapRule::Fixed(3));
    let manifest = run(&cfg).unwrap();
    assert_eq!(manifest.artifacts.len(), 1);
    assert!(manifest.headline.spearman_rho.is_none());

    let json = r#"{"experiment": "open-grid-starved", "seed": 1, "emit": ["scatter"], "analysis": {"rollout_episodes": 0}}"#;
    let cfg = ExperimentConfig::from_str(json, ConfigFormat::Json).unwrap();
    assert!(run(&ExperimentConfig { outputs: dir.path().join("x"), ..cfg }).is_err());
}
