//! Epistemic / aleatoric decomposition of an ensemble's quantile estimates.
//!
//! At a state-action pair the ensemble holds a `K x N` matrix `y[m][i]`
//! (member `m`, quantile level `i`). With population variances throughout:
//!
//! * epistemic = `mean_i var_m y[m][i]`, disagreement between members;
//! * aleatoric = `var_i mean_m y[m][i]`, spread of the posterior-mean
//!   quantile function.
//!
//! By the law of total variance the two add up to the variance of all
//! `K * N` entries.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::ensemble::{train, AnchoredEnsemble, TrainConfig, TrainMode};
use crate::error::{check_index, Error, Result};
use crate::mdp::{step, MdpBuilder, TabularMdp};
use crate::replay::ReplayBuffer;
use crate::stats::{pairwise_variance, population_variance, spearman};

/// Floor applied to reference values before dividing by them.
pub const REFERENCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyEstimate {
    pub state: usize,
    pub action: usize,
    pub epistemic: f64,
    pub aleatoric: f64,
}

fn check_pair(ens: &AnchoredEnsemble, state: usize, action: usize) -> Result<()> {
    check_index("state", state, ens.n_states())?;
    check_index("action", action, ens.n_actions())
}

fn epistemic_unchecked(ens: &AnchoredEnsemble, state: usize, action: usize) -> f64 {
    let n = ens.n_quantiles();
    let mut column = Vec::with_capacity(ens.n_members());
    let mut total = 0.0;
    for i in 0..n {
        column.clear();
        column.extend(ens.members().iter().map(|m| m.row(state, action)[i]));
        total += pairwise_variance(&column);
    }
    total / n as f64
}

fn aleatoric_unchecked(ens: &AnchoredEnsemble, state: usize, action: usize) -> f64 {
    // variance of the member sums, rescaled, rather than of rounded means
    let k = ens.n_members() as f64;
    let mut sums = vec![0.0; ens.n_quantiles()];
    for m in ens.members() {
        for (acc, v) in sums.iter_mut().zip(m.row(state, action)) {
            *acc += v;
        }
    }
    pairwise_variance(&sums) / (k * k)
}

/// Mean over quantile levels of the across-member population variance.
pub fn epistemic_variance(ens: &AnchoredEnsemble, state: usize, action: usize) -> Result<f64> {
    if ens.n_members() < 2 {
        return Err(Error::DegenerateEnsemble(ens.n_members()));
    }
    check_pair(ens, state, action)?;
    Ok(epistemic_unchecked(ens, state, action))
}

/// Population variance across quantile levels of the ensemble-mean quantiles.
pub fn aleatoric_variance(ens: &AnchoredEnsemble, state: usize, action: usize) -> Result<f64> {
    if ens.n_quantiles() < 2 {
        return Err(Error::DegenerateQuantiles(ens.n_quantiles()));
    }
    check_pair(ens, state, action)?;
    Ok(aleatoric_unchecked(ens, state, action))
}

/// Population variance of all `K * N` values at `(state, action)`.
pub fn total_variance(ens: &AnchoredEnsemble, state: usize, action: usize) -> Result<f64> {
    check_pair(ens, state, action)?;
    let all: Vec<f64> = ens.members().iter().flat_map(|m| m.row(state, action).iter().copied()).collect();
    Ok(population_variance(&all))
}

/// Both components at one state-action pair.
pub fn estimate(ens: &AnchoredEnsemble, state: usize, action: usize) -> Result<UncertaintyEstimate> {
    Ok(UncertaintyEstimate {
        state,
        action,
        epistemic: epistemic_variance(ens, state, action)?,
        aleatoric: aleatoric_variance(ens, state, action)?,
    })
}

/// Which action a per-state map summarises.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionRule {
    /// The ensemble's greedy action.
    Greedy,
    /// The same action everywhere.
    Fixed(usize),
    /// Average of the per-action components weighted by `weights[s * A + a]`
    /// (e.g. behavior visit counts). The reported action is the heaviest one.
    /// States with zero total weight fall back to the greedy action.
    BehaviorWeighted(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    None,
    MinMax,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapEntry {
    pub estimate: UncertaintyEstimate,
    pub terminal: bool,
    /// Min-max scaled components, present after [`normalize`].
    pub normalized: Option<(f64, f64)>,
}

/// Per-state uncertainty with optional normalisation and aleatoric reference.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub entries: Vec<MapEntry>,
    pub normalization: Normalization,
    /// Per-state aleatoric reference; when present, the aleatoric component
    /// is divided by it (floored at [`REFERENCE_FLOOR`]) before normalising.
    pub reference_scale: Option<Vec<f64>>,
}

impl UncertaintyMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Attaches a per-state aleatoric reference.
    pub fn with_reference(mut self, reference: Vec<f64>) -> Result<Self> {
        if reference.len() != self.entries.len() {
            return Err(Error::ShapeMismatch(alloc::format!(
                "reference has {} states, map has {}",
                reference.len(),
                self.entries.len()
            )));
        }
        self.reference_scale = Some(reference);
        Ok(self)
    }

    /// Aleatoric value of entry `index` after reference scaling (raw if no
    /// reference is attached).
    pub fn scaled_aleatoric(&self, index: usize) -> f64 {
        let raw = self.entries[index].estimate.aleatoric;
        match &self.reference_scale {
            Some(r) => raw / r[index].max(REFERENCE_FLOOR),
            None => raw,
        }
    }

    /// Non-terminal entry indices.
    pub fn live(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter(|(_, e)| !e.terminal).map(|(i, _)| i)
    }

    /// 1-based rank of `state` by descending epistemic value among
    /// non-terminal states. `None` for terminal or unknown states.
    pub fn epistemic_rank(&self, state: usize) -> Option<usize> {
        let target = self.entries.iter().find(|e| e.estimate.state == state && !e.terminal)?;
        let above = self
            .entries
            .iter()
            .filter(|e| !e.terminal && e.estimate.epistemic > target.estimate.epistemic)
            .count();
        Some(above + 1)
    }
}

fn weighted_estimate(ens: &AnchoredEnsemble, state: usize, weights: &[f64]) -> Result<Option<UncertaintyEstimate>> {
    let na = ens.n_actions();
    let row = &weights[state * na..(state + 1) * na];
    let total: f64 = row.iter().sum();
    if !(total > 0.0) {
        return Ok(None);
    }
    let mut out = UncertaintyEstimate { state, action: 0, epistemic: 0.0, aleatoric: 0.0 };
    let mut heaviest = f64::NEG_INFINITY;
    for (a, &w) in row.iter().enumerate() {
        if w > heaviest {
            heaviest = w;
            out.action = a;
        }
        if w > 0.0 {
            let e = estimate(ens, state, a)?;
            out.epistemic += w / total * e.epistemic;
            out.aleatoric += w / total * e.aleatoric;
        }
    }
    Ok(Some(out))
}

/// Per-state uncertainty under `rule`. Terminal states are included and
/// flagged; their cells are never trained, so they show the prior spread.
pub fn state_map(ens: &AnchoredEnsemble, mdp: &TabularMdp, rule: &ActionRule) -> Result<UncertaintyMap> {
    if ens.n_states() != mdp.n_states() || ens.n_actions() != mdp.n_actions() {
        return Err(Error::ShapeMismatch("ensemble and MDP shapes differ".into()));
    }
    if let ActionRule::Fixed(a) = rule {
        check_index("action", *a, mdp.n_actions())?;
    }
    if let ActionRule::BehaviorWeighted(w) = rule {
        if w.len() != mdp.n_states() * mdp.n_actions() {
            return Err(Error::ShapeMismatch("behavior weights do not cover every state-action".into()));
        }
    }
    let mut entries = Vec::with_capacity(mdp.n_states());
    for s in 0..mdp.n_states() {
        let est = match rule {
            ActionRule::Greedy => estimate(ens, s, ens.greedy_unchecked(s))?,
            ActionRule::Fixed(a) => estimate(ens, s, *a)?,
            ActionRule::BehaviorWeighted(w) => match weighted_estimate(ens, s, w)? {
                Some(e) => e,
                None => estimate(ens, s, ens.greedy_unchecked(s))?,
            },
        };
        entries.push(MapEntry { estimate: est, terminal: mdp.is_terminal(s), normalized: None });
    }
    Ok(UncertaintyMap { entries, normalization: Normalization::None, reference_scale: None })
}

fn min_max(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn scale(v: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Min-max scales each component to `[0, 1]` across non-terminal states.
/// A constant component maps to zeros; terminal entries get zeros. The
/// aleatoric component is reference-scaled first when a reference is
/// attached. Raw values are kept.
pub fn normalize(map: &UncertaintyMap) -> UncertaintyMap {
    let live: Vec<usize> = map.live().collect();
    let epi = min_max(live.iter().map(|&i| map.entries[i].estimate.epistemic));
    let ale = min_max(live.iter().map(|&i| map.scaled_aleatoric(i)));
    let entries = map
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let normalized = if e.terminal {
                (0.0, 0.0)
            } else {
                (scale(e.estimate.epistemic, epi), scale(map.scaled_aleatoric(i), ale))
            };
            MapEntry { normalized: Some(normalized), ..*e }
        })
        .collect();
    UncertaintyMap {
        entries,
        normalization: Normalization::MinMax,
        reference_scale: map.reference_scale.clone(),
    }
}

/// The same MDP with every action replaced by the uniform mixture of all
/// action kernels. Rewards on a shared successor are averaged with the
/// mixture weights, which preserves expected rewards.
pub fn random_walker_mdp(mdp: &TabularMdp) -> Result<TabularMdp> {
    let na = mdp.n_actions();
    let mut b = MdpBuilder::new(mdp.n_states(), na, mdp.gamma()).initial_state(mdp.initial_state());
    for &t in mdp.terminals() {
        b.terminal(t);
    }
    for s in 0..mdp.n_states() {
        if mdp.is_terminal(s) {
            continue;
        }
        // (next, probability mass, reward-weighted mass)
        let mut mixed: Vec<(usize, f64, f64)> = Vec::new();
        for a in 0..na {
            for o in mdp.outcomes(s, a) {
                let p = o.prob / na as f64;
                match mixed.iter_mut().find(|m| m.0 == o.next) {
                    Some(m) => {
                        m.1 += p;
                        m.2 += p * o.reward;
                    }
                    None => mixed.push((o.next, p, p * o.reward)),
                }
            }
        }
        for a in 0..na {
            for &(next, p, pr) in &mixed {
                b.add(s, a, next, p, pr / p);
            }
        }
    }
    b.build()
}

/// Per-state aleatoric values of an ensemble trained on the random-walker
/// version of `mdp` with `cfg` (always online, fresh buffer).
pub fn random_walker_reference(mdp: &TabularMdp, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let walker = random_walker_mdp(mdp)?;
    let cfg = TrainConfig { mode: TrainMode::Online, ..cfg.clone() };
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity, walker.n_states())?;
    let ens = train(&walker, &mut buffer, &cfg)?;
    let map = state_map(&ens, &walker, &ActionRule::Greedy)?;
    Ok(map.entries.iter().map(|e| e.estimate.aleatoric).collect())
}

/// Visit counts of greedy rollouts against per-state epistemic uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitationReport {
    /// Decisions taken in each state across all rollouts.
    pub visits: Vec<u64>,
    /// Epistemic variance at the greedy action of each state.
    pub epistemic: Vec<f64>,
    /// Spearman correlation over non-terminal states with at least one visit.
    pub spearman: f64,
    /// Non-terminal states never visited (excluded from the correlation).
    pub unvisited: Vec<usize>,
}

impl VisitationReport {
    /// `(state, visits, epistemic)` for the states entering the correlation.
    pub fn scatter(&self) -> impl Iterator<Item = (usize, u64, f64)> + '_ {
        self.visits
            .iter()
            .zip(&self.epistemic)
            .enumerate()
            .filter(|(_, (v, _))| **v > 0)
            .map(|(s, (v, e))| (s, *v, *e))
    }
}

/// Exploration rate of the correlation rollouts.
pub const ROLLOUT_EPSILON: f64 = 0.05;

/// Rolls out the ensemble's greedy policy (with [`ROLLOUT_EPSILON`]
/// exploration) for `n_episodes` episodes of at most `max_steps` steps, then
/// correlates visit counts with epistemic uncertainty.
pub fn visitation_epistemic_correlation<R: Rng + ?Sized>(
    ens: &AnchoredEnsemble,
    mdp: &TabularMdp,
    n_episodes: usize,
    max_steps: usize,
    rng: &mut R,
) -> Result<VisitationReport> {
    if ens.n_states() != mdp.n_states() || ens.n_actions() != mdp.n_actions() {
        return Err(Error::ShapeMismatch("ensemble and MDP shapes differ".into()));
    }
    let ns = mdp.n_states();
    let greedy: Vec<usize> = (0..ns).map(|s| ens.greedy_unchecked(s)).collect();
    let mut visits = vec![0u64; ns];
    for _ in 0..n_episodes {
        let mut state = mdp.initial_state();
        for _ in 0..max_steps {
            if mdp.is_terminal(state) {
                break;
            }
            visits[state] += 1;
            let action = if rng.random::<f64>() < ROLLOUT_EPSILON {
                rng.random_range(0..mdp.n_actions())
            } else {
                greedy[state]
            };
            state = step(mdp, state, action, rng)?.next_state;
        }
    }
    let epistemic: Vec<f64> = (0..ns)
        .map(|s| epistemic_variance(ens, s, greedy[s]))
        .collect::<Result<_>>()?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut unvisited = Vec::new();
    for s in 0..ns {
        if mdp.is_terminal(s) {
            continue;
        }
        if visits[s] == 0 {
            unvisited.push(s);
        } else {
            xs.push(visits[s] as f64);
            ys.push(epistemic[s]);
        }
    }
    let rho = if xs.len() < 2 { 0.0 } else { spearman(&xs, &ys) };
    Ok(VisitationReport { visits, epistemic, spearman: rho, unvisited })
}
