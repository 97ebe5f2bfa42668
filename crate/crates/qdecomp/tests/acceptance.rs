//! Replication and oracle acceptance checks. Prints one PASS/FAIL line per
//! criterion and exits non-zero if any fails.
//!
//! `cargo test -p qdecomp --test acceptance -- 3 4` runs a subset.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use qdecomp::config::{ExperimentConfig, ExperimentKind};
use qdecomp::runner::{execute, RunManifest, CHECKPOINT, MAP_CSV};
use qdecomp_core::distribution::{exact_return_distribution, DEFAULT_VALUE_RESOLUTION};
use qdecomp_core::envs::{build_bandit, build_open_grid, GridSpec};
use qdecomp_core::mdp::value_iteration;
use qdecomp_core::quantile::{quantile_huber_grad, quantile_huber_loss, taus, QuantileTable};
use qdecomp_core::rng::{component, stream, StreamRng};
use qdecomp_core::uncertainty::{aleatoric_variance, epistemic_variance};
use qdecomp_core::{train, AnchoredEnsemble, ReplayBuffer, TabularMdp, TrainConfig};
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn matrix_ensemble(rows: &[Vec<f64>]) -> AnchoredEnsemble {
    let n = rows[0].len();
    let members = rows.iter().map(|r| QuantileTable::from_values(1, 1, n, r.clone()).unwrap()).collect();
    AnchoredEnsemble::from_parts(members, vec![QuantileTable::zeros(1, 1, n); rows.len()], 0.0, 0.0, 1.0).unwrap()
}

fn components(rows: &[Vec<f64>]) -> (f64, f64) {
    let ens = matrix_ensemble(rows);
    (epistemic_variance(&ens, 0, 0).unwrap(), aleatoric_variance(&ens, 0, 0).unwrap())
}

fn two_pass_variance(rows: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = rows.iter().flatten().copied().collect();
    let m = all.iter().sum::<f64>() / all.len() as f64;
    all.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / all.len() as f64
}

/// A multiple of 2^-20 in [-8, 8]. Sums of a few such values are exact, so a
/// shifted matrix of them is exactly representable.
fn dyadic(rng: &mut StreamRng) -> f64 {
    rng.random_range(-(8i64 << 20)..=(8i64 << 20)) as f64 / (1u64 << 20) as f64
}

fn estimator_identities() -> Verdict {
    let start = Instant::now();
    let mut rng = stream(2024, component::GENERATOR, 0);
    let (mut sum_err, mut shift_mismatch, mut scale_err) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..1_000 {
        let k = rng.random_range(2..=16);
        let n = rng.random_range(2..=32);
        let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| dyadic(&mut rng)).collect()).collect();
        let smooth: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();

        for m in [&rows, &smooth] {
            let (e, a) = components(m);
            sum_err = sum_err.max((e + a - two_pass_variance(m)).abs());
            let c: f64 = rng.random_range(-5.0..5.0);
            let scaled: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
            let (es, as_) = components(&scaled);
            let rel = |x: f64, want: f64| if want == 0.0 { x.abs() } else { ((x - want) / want).abs() };
            scale_err = scale_err.max(rel(es, c * c * e)).max(rel(as_, c * c * a));
        }
        let c = dyadic(&mut rng);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        if components(&shifted) != components(&rows) {
            shift_mismatch += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict {
        id: "1",
        name: "estimator identities",
        pass: sum_err <= 1e-9 && shift_mismatch == 0 && scale_err <= 1e-12 && elapsed < Duration::from_secs(1),
        detail: format!(
            "max |epi+ale-total| {sum_err:.1e}, shift mismatches {shift_mismatch}/1000, max scale rel err {scale_err:.1e}, {}",
            secs(elapsed)
        ),
    }
}

/// Unanchored training with a small Huber threshold and a decaying step:
/// 50,000 online steps with batch 1, so every member takes 50,000 updates.
fn oracle_config(gamma: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.05,
        learning_rate_final: Some(0.001),
        huber_kappa: 0.01,
        gamma,
        n_steps: 50_000,
        batch_size: 1,
        anchor_strength: 0.0,
        seed,
        ..TrainConfig::default()
    }
}

/// Largest distance from a learned level to the exact quantile set, over
/// members, levels and the given state-action pairs.
fn oracle_gap(mdp: &TabularMdp, cfg: &TrainConfig, pairs: &[(usize, usize)], policy: &[usize]) -> f64 {
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, mdp.n_states()).unwrap();
    let ens = train(mdp, &mut buffer, cfg).unwrap();
    let levels = taus(ens.n_quantiles());
    let mut worst = 0.0f64;
    for &(s, a) in pairs {
        let law = exact_return_distribution(mdp, policy, s, a, 200, DEFAULT_VALUE_RESOLUTION).unwrap();
        for m in ens.members() {
            for (v, &tau) in m.row(s, a).iter().zip(&levels) {
                let (lo, hi) = law.quantile_interval(tau);
                worst = worst.max((lo - v).max(v - hi).max(0.0));
            }
        }
    }
    worst
}

fn oracle_equivalence() -> Verdict {
    let start = Instant::now();
    let bandit = build_bandit(0.8, 1.0, -1.0).unwrap();
    let bandit_gap = oracle_gap(&bandit, &oracle_config(bandit.gamma(), 1), &[(0, 0)], &[0, 0, 0]);

    let corridor = build_open_grid(&GridSpec::corridor(3, 0.9)).unwrap();
    let q = value_iteration(&corridor, 1e-12, 10_000);
    let na = corridor.n_actions();
    let policy: Vec<usize> = (0..corridor.n_states())
        .map(|s| (0..na).max_by(|&a, &b| q[s * na + a].total_cmp(&q[s * na + b]).then(b.cmp(&a))).unwrap())
        .collect();
    let pairs: Vec<(usize, usize)> =
        (0..corridor.n_states()).filter(|&s| !corridor.is_terminal(s)).flat_map(|s| (0..na).map(move |a| (s, a))).collect();
    let corridor_gap = oracle_gap(&corridor, &oracle_config(0.9, 2), &pairs, &policy);
    let elapsed = start.elapsed();
    Verdict {
        id: "2",
        name: "oracle equivalence",
        pass: bandit_gap < 0.1 && corridor_gap < 0.1 && elapsed < Duration::from_secs(10),
        detail: format!(
            "bandit max gap {bandit_gap:.4}, corridor max gap {corridor_gap:.4} (50000 updates, lambda 0), {}",
            secs(elapsed)
        ),
    }
}

fn preset_runs(kind: ExperimentKind) -> Vec<(SeedRun, Duration)> {
    SEEDS
        .iter()
        .map(|&seed| {
            let start = Instant::now();
            let out = execute(&ExperimentConfig::preset(kind, seed)).unwrap();
            (SeedRun { seed, headline: out.headline }, start.elapsed())
        })
        .collect()
}

struct SeedRun {
    seed: u64,
    headline: qdecomp::Headline,
}

fn slowest(runs: &[(SeedRun, Duration)]) -> Duration {
    runs.iter().map(|r| r.1).max().unwrap_or_default()
}

fn open_grid(runs: &[(SeedRun, Duration)]) -> Vec<Verdict> {
    let ranks: Vec<usize> = runs.iter().map(|(r, _)| r.headline.starved_state_epistemic_rank.unwrap()).collect();
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let median = sorted[sorted.len() / 2];
    let top3 = ranks.iter().filter(|&&r| r <= 3).count();
    let spreads: Vec<f64> = runs.iter().map(|(r, _)| r.headline.scaled_aleatoric_spread.unwrap()).collect();
    let flat = spreads.iter().filter(|&&s| s < 0.2).count();
    let time_ok = slowest(runs) < Duration::from_secs(120);
    vec![
        Verdict {
            id: "3a",
            name: "open grid: starved centre has top epistemic uncertainty",
            pass: top3 >= 4 && median == 1 && time_ok,
            detail: format!("ranks {ranks:?}, top-3 in {top3}/5, median {median}, slowest seed {}", secs(slowest(runs))),
        },
        Verdict {
            id: "3b",
            name: "open grid: scaled aleatoric spread < 0.2",
            pass: flat >= 4 && time_ok,
            detail: format!(
                "max-min of raw/reference over live states {:?}, below 0.2 in {flat}/5",
                spreads.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()
            ),
        },
    ]
}

fn cliff(runs: &[(SeedRun, Duration)]) -> Vec<Verdict> {
    let mono: Vec<bool> = runs.iter().map(|(r, _)| r.headline.wind_aleatoric_monotonicity.as_ref().unwrap().holds).collect();
    let epi: Vec<(f64, f64)> = runs
        .iter()
        .map(|(r, _)| (r.headline.top_right_epistemic.unwrap(), r.headline.bottom_row_epistemic.unwrap()))
        .collect();
    let mono_count = mono.iter().filter(|&&m| m).count();
    let epi_count = epi.iter().filter(|(t, b)| t > b).count();
    let time_ok = slowest(runs) < Duration::from_secs(120);
    let detail_mono = runs
        .iter()
        .map(|(r, _)| {
            let m = r.headline.wind_aleatoric_monotonicity.as_ref().unwrap();
            format!("seed {}: {} rises, max {:.4} of range {:.4}", r.seed, m.violations, m.max_violation, m.range)
        })
        .collect::<Vec<_>>()
        .join("; ");
    vec![
        Verdict {
            id: "4a",
            name: "cliff: wind-row aleatoric non-increasing toward goal",
            pass: mono_count >= 4 && time_ok,
            detail: format!("{mono_count}/5 ({detail_mono}), slowest seed {}", secs(slowest(runs))),
        },
        Verdict {
            id: "4b",
            name: "cliff: top-right epistemic > bottom row",
            pass: epi_count >= 4 && time_ok,
            detail: format!(
                "{epi_count}/5 ({})",
                epi.iter().map(|(t, b)| format!("{t:.4} vs {b:.4}")).collect::<Vec<_>>().join(", ")
            ),
        },
    ]
}

fn clinical(runs: &[(SeedRun, Duration)]) -> Verdict {
    let rhos: Vec<f64> = runs.iter().map(|(r, _)| r.headline.spearman_rho.unwrap()).collect();
    let count = rhos.iter().filter(|&&r| r <= -0.3).count();
    Verdict {
        id: "5",
        name: "clinical: visits anticorrelate with epistemic uncertainty",
        pass: count >= 4 && slowest(runs) < Duration::from_secs(600),
        detail: format!(
            "spearman {:?}, <= -0.3 in {count}/5, slowest seed {}",
            rhos.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            secs(slowest(runs))
        ),
    }
}

fn determinism() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let replicate = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_qdecomp"))
            .args(["replicate", "--figure", "1a", "--seed", "7", "--out"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        let manifest = RunManifest::load(&out).unwrap();
        manifest.verify(&out).unwrap();
        (fs::read(out.join(MAP_CSV)).unwrap(), manifest.artifact(CHECKPOINT).unwrap().sha256.clone())
    };
    let (map_a, ck_a) = replicate("a");
    let (map_b, ck_b) = replicate("b");
    let elapsed = start.elapsed();
    Verdict {
        id: "6",
        name: "determinism of replicate --figure 1a --seed 7",
        pass: map_a == map_b && ck_a == ck_b && elapsed < Duration::from_secs(300),
        detail: format!(
            "map.csv identical: {}, checkpoint sha256 identical: {} ({}), {}",
            map_a == map_b,
            ck_a == ck_b,
            &ck_a[..16],
            secs(elapsed)
        ),
    }
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut rng = stream(99, component::GENERATOR, 1);
    let mut worst = 0.0f64;
    let mut points = 0;
    while points < 1_000 {
        let kappa: f64 = rng.random_range(0.01..2.0);
        let tau: f64 = rng.random_range(0.001..0.999);
        let u: f64 = rng.random_range(-3.0..3.0) * kappa;
        if u.abs() <= 1e-4 * kappa {
            continue;
        }
        let h = 1e-6 * kappa;
        // u = target - estimate: the estimate's derivative is -d/du
        let fd = -(quantile_huber_loss(u + h, tau, kappa) - quantile_huber_loss(u - h, tau, kappa)) / (2.0 * h);
        worst = worst.max((fd - quantile_huber_grad(u, tau, kappa)).abs());
        points += 1;
    }
    let elapsed = start.elapsed();
    Verdict {
        id: "7",
        name: "gradient check",
        pass: worst < 1e-6 && elapsed < Duration::from_secs(1),
        detail: format!("max |fd - grad| {worst:.2e} over 1000 points, {}", secs(elapsed)),
    }
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| f == id);
    let mut verdicts = Vec::new();
    let mut report = |v: Verdict| {
        println!("criterion {:<3} {} {}: {}", v.id, if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
        verdicts.push(v.pass);
    };
    if wanted("1") {
        report(estimator_identities());
    }
    if wanted("2") {
        report(oracle_equivalence());
    }
    if wanted("3") {
        open_grid(&preset_runs(ExperimentKind::OpenGridStarved)).into_iter().for_each(&mut report);
    }
    if wanted("4") {
        cliff(&preset_runs(ExperimentKind::CliffWind)).into_iter().for_each(&mut report);
    }
    if wanted("5") {
        report(clinical(&preset_runs(ExperimentKind::SyntheticClinical)));
    }
    if wanted("6") {
        report(determinism());
    }
    if wanted("7") {
        report(gradient_check());
    }
    let failed = verdicts.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", verdicts.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
