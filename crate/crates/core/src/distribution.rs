//! Exact return distributions by forward enumeration.
//!
//! Used as the validation oracle for the learned quantile tables: the
//! discounted return of a fixed deterministic policy is enumerated over the
//! whole trajectory tree, truncated at a horizon where the remaining
//! discounted reward is negligible.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Default cap on the number of live atoms during enumeration.
pub const ATOM_LIMIT: usize = 1_000_000;

/// Default atom merge resolution.
pub const DEFAULT_VALUE_RESOLUTION: f64 = 1e-6;

/// A discrete law over returns. Atoms are sorted by value, values are
/// distinct, and the probabilities sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnDistribution {
    atoms: Vec<(f64, f64)>,
}

impl ReturnDistribution {
    /// Builds a distribution from `(value, probability)` pairs, merging atoms
    /// closer than `resolution`.
    pub fn new(atoms: Vec<(f64, f64)>, resolution: f64) -> Result<Self> {
        if atoms.iter().any(|&(v, p)| !v.is_finite() || !(p >= 0.0)) {
            return Err(Error::InvalidMdp("non-finite atom or negative probability".into()));
        }
        let atoms = merge_atoms(atoms, resolution);
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidMdp(alloc::format!("atom probabilities sum to {total}")));
        }
        Ok(Self { atoms })
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|&(v, p)| v * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.atoms.iter().map(|&(v, p)| p * (v - m) * (v - m)).sum()
    }

    /// Probability of a return strictly below `x`.
    pub fn mass_below(&self, x: f64) -> f64 {
        self.atoms.iter().filter(|a| a.0 < x).map(|a| a.1).sum()
    }

    /// Lower quantile `inf { x : F(x) >= tau }`.
    pub fn quantile(&self, tau: f64) -> f64 {
        self.quantile_interval(tau).0
    }

    /// The set of minimisers of the expected check loss at level `tau`, as a
    /// closed interval `[inf {F >= tau}, inf {F > tau}]`. The interval is a
    /// single point except where `tau` equals a CDF value exactly.
    pub fn quantile_interval(&self, tau: f64) -> (f64, f64) {
        const EPS: f64 = 1e-12;
        let mut cdf = 0.0;
        let mut lower = None;
        for &(v, p) in &self.atoms {
            cdf += p;
            if lower.is_none() && cdf >= tau - EPS {
                lower = Some(v);
            }
            if cdf > tau + EPS {
                return (lower.unwrap_or(v), v);
            }
        }
        let last = self.atoms.last().map(|a| a.0).unwrap_or(0.0);
        (lower.unwrap_or(last), last)
    }
}

fn merge_atoms(mut atoms: Vec<(f64, f64)>, resolution: f64) -> Vec<(f64, f64)> {
    atoms.retain(|a| a.1 > 0.0);
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    for (v, p) in atoms {
        match merged.last_mut() {
            Some(last) if v - last.0 <= resolution => {
                let total = last.1 + p;
                last.0 = (last.0 * last.1 + v * p) / total;
                last.1 = total;
            }
            _ => merged.push((v, p)),
        }
    }
    merged
}

/// Smallest `H` with `gamma^H * max|r| < 1e-4` (at least 1).
pub fn default_horizon(mdp: &TabularMdp) -> usize {
    let r = mdp.max_abs_reward();
    let mut h = 1;
    let mut scale = mdp.gamma() * r;
    while scale >= 1e-4 && h < 1_000_000 {
        h += 1;
        scale *= mdp.gamma();
    }
    h
}

/// Exact law of the discounted return of taking `action` in `state` and then
/// following the deterministic `policy`, truncated after `horizon`
/// transitions. Atoms within `value_resolution` of each other are merged.
pub fn exact_return_distribution(
    mdp: &TabularMdp,
    policy: &[usize],
    state: usize,
    action: usize,
    horizon: usize,
    value_resolution: f64,
) -> Result<ReturnDistribution> {
    exact_return_distribution_with_limit(mdp, policy, state, action, horizon, value_resolution, ATOM_LIMIT)
}

/// [`exact_return_distribution`] with an explicit atom limit.
pub fn exact_return_distribution_with_limit(
    mdp: &TabularMdp,
    policy: &[usize],
    state: usize,
    action: usize,
    horizon: usize,
    value_resolution: f64,
    atom_limit: usize,
) -> Result<ReturnDistribution> {
    mdp.check_state(state)?;
    mdp.check_action(action)?;
    if policy.len() != mdp.n_states() {
        return Err(Error::ShapeMismatch(alloc::format!(
            "policy covers {} states, MDP has {}",
            policy.len(),
            mdp.n_states()
        )));
    }
    for (s, &a) in policy.iter().enumerate() {
        if !mdp.is_terminal(s) {
            mdp.check_action(a)?;
        }
    }
    if mdp.is_terminal(state) {
        return ReturnDistribution::new(alloc::vec![(0.0, 1.0)], value_resolution);
    }

    // Live branch: (state, return so far, probability). The discount of the
    // next reward is shared by every live branch at a given depth.
    let mut live: Vec<(usize, f64, f64)> = alloc::vec![(state, 0.0, 1.0)];
    let mut finished: Vec<(f64, f64)> = Vec::new();
    let mut discount = 1.0;
    for depth in 0..horizon {
        let mut next_live = Vec::with_capacity(live.len() * 2);
        for &(s, ret, prob) in &live {
            let a = if depth == 0 { action } else { policy[s] };
            for o in mdp.outcomes(s, a) {
                let value = ret + discount * o.reward;
                let p = prob * o.prob;
                if mdp.is_terminal(o.next) {
                    finished.push((value, p));
                } else {
                    next_live.push((o.next, value, p));
                }
            }
        }
        discount *= mdp.gamma();
        live = merge_live(next_live, value_resolution);
        if finished.len() > atom_limit / 2 {
            finished = merge_atoms(finished, value_resolution);
        }
        if live.len() + finished.len() > atom_limit {
            return Err(Error::ExplosionGuard { limit: atom_limit });
        }
        if live.is_empty() {
            break;
        }
    }
    finished.extend(live.into_iter().map(|(_, v, p)| (v, p)));
    ReturnDistribution::new(finished, value_resolution)
}

fn merge_live(mut live: Vec<(usize, f64, f64)>, resolution: f64) -> Vec<(usize, f64, f64)> {
    live.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut merged: Vec<(usize, f64, f64)> = Vec::with_capacity(live.len());
    for (s, v, p) in live {
        match merged.last_mut() {
            Some(last) if last.0 == s && v - last.1 <= resolution => {
                let total = last.2 + p;
                last.1 = (last.1 * last.2 + v * p) / total;
                last.2 = total;
            }
            _ => merged.push((s, v, p)),
        }
    }
    merged
}
