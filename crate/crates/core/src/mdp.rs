//! Finite MDPs, episode simulation and dynamic-programming solvers.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{check_index, Error, Result};

const KERNEL_TOLERANCE: f64 = 1e-9;

/// One branch of a transition kernel: land in `next` with probability `prob`
/// and collect `reward`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub prob: f64,
    pub reward: f64,
}

/// A single environment step.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub terminal: bool,
}

/// A finite MDP with rewards defined on `(state, action, next_state)`.
///
/// Terminal states self-loop with reward 0 under every action. Episodes stop
/// when they enter a terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    initial_state: usize,
    terminals: BTreeSet<usize>,
    is_terminal: Vec<bool>,
    kernel: Vec<Vec<Outcome>>,
}

impl TabularMdp {
    /// Builds an MDP from a full kernel indexed by `state * n_actions + action`.
    ///
    /// Outcomes with zero probability are dropped and duplicate successors are
    /// merged. Fails if any row does not sum to 1, a terminal row is not a
    /// zero-reward self-loop, or an index is out of range.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        initial_state: usize,
        terminals: impl IntoIterator<Item = usize>,
        kernel: Vec<Vec<Outcome>>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp(format!(
                "need at least one state and action, got {n_states}x{n_actions}"
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} not in [0, 1)")));
        }
        check_index("initial state", initial_state, n_states)?;
        if kernel.len() != n_states * n_actions {
            return Err(Error::InvalidMdp(format!(
                "kernel has {} rows, expected {}",
                kernel.len(),
                n_states * n_actions
            )));
        }
        let terminals: BTreeSet<usize> = terminals.into_iter().collect();
        let mut is_terminal = vec![false; n_states];
        for &t in &terminals {
            check_index("terminal state", t, n_states)?;
            is_terminal[t] = true;
        }

        let mut rows = Vec::with_capacity(kernel.len());
        for (row_index, row) in kernel.into_iter().enumerate() {
            let state = row_index / n_actions;
            let action = row_index % n_actions;
            let row = merge_row(row, n_states)?;
            let total: f64 = row.iter().map(|o| o.prob).sum();
            if (total - 1.0).abs() > KERNEL_TOLERANCE {
                return Err(Error::InvalidMdp(format!(
                    "kernel row ({state}, {action}) sums to {total}"
                )));
            }
            if is_terminal[state]
                && !(row.len() == 1 && row[0].next == state && row[0].reward == 0.0)
            {
                return Err(Error::InvalidMdp(format!(
                    "terminal state {state} must self-loop with reward 0"
                )));
            }
            rows.push(row);
        }

        Ok(Self {
            n_states,
            n_actions,
            gamma,
            initial_state,
            terminals,
            is_terminal,
            kernel: rows,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn terminals(&self) -> &BTreeSet<usize> {
        &self.terminals
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.is_terminal.get(state).copied().unwrap_or(false)
    }

    /// Successor branches of `(state, action)`, sorted by successor index.
    pub fn outcomes(&self, state: usize, action: usize) -> &[Outcome] {
        &self.kernel[state * self.n_actions + action]
    }

    /// Largest absolute reward anywhere in the kernel.
    pub fn max_abs_reward(&self) -> f64 {
        self.kernel
            .iter()
            .flatten()
            .map(|o| o.reward.abs())
            .fold(0.0, f64::max)
    }

    /// Same MDP with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::InvalidMdp(format!("gamma {gamma} not in [0, 1)")));
        }
        let mut out = self.clone();
        out.gamma = gamma;
        Ok(out)
    }

    /// Same MDP started from a different state.
    pub fn with_initial_state(&self, initial_state: usize) -> Result<Self> {
        check_index("initial state", initial_state, self.n_states)?;
        let mut out = self.clone();
        out.initial_state = initial_state;
        Ok(out)
    }

    pub(crate) fn check_state(&self, state: usize) -> Result<()> {
        check_index("state", state, self.n_states)
    }

    pub(crate) fn check_action(&self, action: usize) -> Result<()> {
        check_index("action", action, self.n_actions)
    }
}

fn merge_row(mut row: Vec<Outcome>, n_states: usize) -> Result<Vec<Outcome>> {
    for o in &row {
        check_index("successor state", o.next, n_states)?;
        if !(o.prob >= 0.0) || !o.reward.is_finite() {
            return Err(Error::InvalidMdp(format!(
                "bad outcome: next {} prob {} reward {}",
                o.next, o.prob, o.reward
            )));
        }
    }
    row.retain(|o| o.prob > 0.0);
    row.sort_by_key(|o| o.next);
    let mut merged: Vec<Outcome> = Vec::with_capacity(row.len());
    for o in row {
        match merged.last_mut() {
            Some(last) if last.next == o.next => {
                if last.reward != o.reward {
                    return Err(Error::InvalidMdp(format!(
                        "successor {} listed twice with different rewards",
                        o.next
                    )));
                }
                last.prob += o.prob;
            }
            _ => merged.push(o),
        }
    }
    Ok(merged)
}

/// Incremental kernel construction. Rows default to empty; terminal rows are
/// overwritten with zero-reward self-loops at build time.
#[derive(Debug, Clone)]
pub struct MdpBuilder {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    initial_state: usize,
    terminals: BTreeSet<usize>,
    kernel: Vec<Vec<Outcome>>,
}

impl MdpBuilder {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64) -> Self {
        Self {
            n_states,
            n_actions,
            gamma,
            initial_state: 0,
            terminals: BTreeSet::new(),
            kernel: vec![Vec::new(); n_states * n_actions],
        }
    }

    pub fn initial_state(mut self, state: usize) -> Self {
        self.initial_state = state;
        self
    }

    pub fn terminal(&mut self, state: usize) -> &mut Self {
        self.terminals.insert(state);
        self
    }

    /// Adds probability mass `prob` of moving to `next` with `reward`.
    pub fn add(&mut self, state: usize, action: usize, next: usize, prob: f64, reward: f64) -> &mut Self {
        self.kernel[state * self.n_actions + action].push(Outcome { next, prob, reward });
        self
    }

    pub fn build(mut self) -> Result<TabularMdp> {
        for &t in &self.terminals {
            if t >= self.n_states {
                continue;
            }
            for a in 0..self.n_actions {
                self.kernel[t * self.n_actions + a] = vec![Outcome {
                    next: t,
                    prob: 1.0,
                    reward: 0.0,
                }];
            }
        }
        TabularMdp::new(
            self.n_states,
            self.n_actions,
            self.gamma,
            self.initial_state,
            self.terminals,
            self.kernel,
        )
    }
}

/// Samples one transition from `(state, action)`.
pub fn step<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    state: usize,
    action: usize,
    rng: &mut R,
) -> Result<Transition> {
    mdp.check_state(state)?;
    mdp.check_action(action)?;
    if mdp.is_terminal(state) {
        return Err(Error::TerminalStateStep(state));
    }
    let outcomes = mdp.outcomes(state, action);
    let outcome = if outcomes.len() == 1 {
        outcomes[0]
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = outcomes[outcomes.len() - 1];
        for o in outcomes {
            acc += o.prob;
            if u < acc {
                chosen = *o;
                break;
            }
        }
        chosen
    };
    Ok(Transition {
        state,
        action,
        reward: outcome.reward,
        next_state: outcome.next,
        terminal: mdp.is_terminal(outcome.next),
    })
}

/// Rolls out `policy` from the initial state until a terminal state is
/// entered or `max_steps` transitions have been taken.
///
/// The policy receives the current state and the episode's random source.
pub fn sample_episode<R, P>(
    mdp: &TabularMdp,
    mut policy: P,
    rng: &mut R,
    max_steps: usize,
) -> Result<Vec<Transition>>
where
    R: Rng + ?Sized,
    P: FnMut(usize, &mut R) -> usize,
{
    if max_steps == 0 {
        return Err(Error::InvalidMdp("max_steps must be at least 1".into()));
    }
    let mut episode = Vec::new();
    let mut state = mdp.initial_state();
    while episode.len() < max_steps && !mdp.is_terminal(state) {
        let action = policy(state, rng);
        let t = step(mdp, state, action, rng)?;
        state = t.next_state;
        episode.push(t);
    }
    Ok(episode)
}

/// Discounted return of an episode.
pub fn discounted_return(episode: &[Transition], gamma: f64) -> f64 {
    episode
        .iter()
        .rev()
        .fold(0.0, |acc, t| t.reward + gamma * acc)
}

fn backup(mdp: &TabularMdp, values: &[f64], state: usize, action: usize) -> f64 {
    if mdp.is_terminal(state) {
        return 0.0;
    }
    mdp.outcomes(state, action)
        .iter()
        .map(|o| {
            let cont = if mdp.is_terminal(o.next) { 0.0 } else { values[o.next] };
            o.prob * (o.reward + mdp.gamma() * cont)
        })
        .sum()
}

/// Optimal action values `Q*[state * n_actions + action]` by value iteration.
///
/// Terminal states have value 0. Iterates until the sup-norm change drops
/// below `tolerance` or `max_iterations` sweeps have run.
pub fn value_iteration(mdp: &TabularMdp, tolerance: f64, max_iterations: usize) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    for _ in 0..max_iterations {
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            for a in 0..na {
                q[s * na + a] = backup(mdp, &v, s, a);
            }
        }
        for s in 0..ns {
            let best = q[s * na..(s + 1) * na]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            delta = delta.max((best - v[s]).abs());
            v[s] = best;
        }
        if delta < tolerance {
            break;
        }
    }
    q
}

/// Action values of a deterministic policy, `Q^π[state * n_actions + action]`.
pub fn policy_evaluation(
    mdp: &TabularMdp,
    policy: &[usize],
    tolerance: f64,
    max_iterations: usize,
) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut v = vec![0.0; ns];
    for _ in 0..max_iterations {
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            let next = backup(mdp, &v, s, policy[s]);
            delta = delta.max((next - v[s]).abs());
            v[s] = next;
        }
        if delta < tolerance {
            break;
        }
    }
    let mut q = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            q[s * na + a] = backup(mdp, &v, s, a);
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{component, stream};

    fn chain() -> TabularMdp {
        let mut b = MdpBuilder::new(2, 1, 0.9);
        b.add(0, 0, 1, 1.0, 1.0).terminal(1);
        b.build().unwrap()
    }

    fn leaky() -> TabularMdp {
        let mut b = MdpBuilder::new(2, 1, 0.9);
        b.add(0, 0, 1, 0.2, 0.0).add(0, 0, 0, 0.8, 0.0).terminal(1);
        b.build().unwrap()
    }

    #[test]
    fn deterministic_chain_step() {
        let mdp = chain();
        let mut rng = stream(0, component::ENV, 0);
        for _ in 0..10 {
            let t = step(&mdp, 0, 0, &mut rng).unwrap();
            assert_eq!(
                t,
                Transition { state: 0, action: 0, reward: 1.0, next_state: 1, terminal: true }
            );
        }
    }

    #[test]
    fn empirical_kernel_frequency() {
        let mdp = leaky();
        let mut rng = stream(11, component::ENV, 0);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| step(&mdp, 0, 0, &mut rng).unwrap().next_state == 1)
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn step_is_deterministic_per_seed() {
        let mdp = leaky();
        let a: Vec<_> = {
            let mut rng = stream(3, component::ENV, 0);
            (0..50).map(|_| step(&mdp, 0, 0, &mut rng).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut rng = stream(3, component::ENV, 0);
            (0..50).map(|_| step(&mdp, 0, 0, &mut rng).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn step_errors() {
        let mdp = chain();
        let mut rng = stream(0, component::ENV, 0);
        assert_eq!(step(&mdp, 1, 0, &mut rng), Err(Error::TerminalStateStep(1)));
        assert!(matches!(step(&mdp, 5, 0, &mut rng), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(step(&mdp, 0, 3, &mut rng), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn episode_lengths() {
        let mut rng = stream(0, component::ENV, 0);
        let ep = sample_episode(&chain(), |_, _| 0, &mut rng, 10).unwrap();
        assert_eq!(ep.len(), 1);

        let mut b = MdpBuilder::new(2, 1, 0.9);
        b.add(0, 0, 0, 1.0, 0.0).terminal(1);
        let stuck = b.build().unwrap();
        let ep = sample_episode(&stuck, |_, _| 0, &mut rng, 50).unwrap();
        assert_eq!(ep.len(), 50);
        assert!(sample_episode(&stuck, |_, _| 0, &mut rng, 0).is_err());
    }

    #[test]
    fn rejects_bad_kernels() {
        let bad_sum = TabularMdp::new(1, 1, 0.9, 0, [], vec![vec![Outcome { next: 0, prob: 0.5, reward: 0.0 }]]);
        assert!(matches!(bad_sum, Err(Error::InvalidMdp(_))));
        let bad_gamma = TabularMdp::new(1, 1, 1.0, 0, [], vec![vec![Outcome { next: 0, prob: 1.0, reward: 0.0 }]]);
        assert!(matches!(bad_gamma, Err(Error::InvalidMdp(_))));
        let bad_terminal = TabularMdp::new(2, 1, 0.9, 0, [1], vec![
            vec![Outcome { next: 1, prob: 1.0, reward: 0.0 }],
            vec![Outcome { next: 0, prob: 1.0, reward: 0.0 }],
        ]);
        assert!(matches!(bad_terminal, Err(Error::InvalidMdp(_))));
    }

    #[test]
    fn value_iteration_on_leaky_chain() {
        // V = 0.2 * 1 + 0.8 * 0.9 * V
        let mut b = MdpBuilder::new(2, 1, 0.9);
        b.add(0, 0, 1, 0.2, 1.0).add(0, 0, 0, 0.8, 0.0).terminal(1);
        let mdp = b.build().unwrap();
        let q = value_iteration(&mdp, 1e-12, 10_000);
        let expected = 0.2 / (1.0 - 0.8 * 0.9);
        assert!((q[0] - expected).abs() < 1e-9);
        assert_eq!(q[1], 0.0);
        let qp = policy_evaluation(&mdp, &[0, 0], 1e-12, 10_000);
        assert!((qp[0] - expected).abs() < 1e-9);
    }
}
