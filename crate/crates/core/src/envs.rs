//! Grid worlds, the synthetic offline clinical MDP, and replay starvation.
//!
//! Grid coordinates are 1-indexed `(row, col)` with row 1 at the top. The
//! state of cell `(r, c)` is `(r - 1) * width + (c - 1)`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::mdp::{step, MdpBuilder, TabularMdp, Transition};
use crate::replay::ReplayBuffer;
use crate::rng::{component, stream};

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Move {
    pub const ALL: [Move; 4] = [Move::Up, Move::Down, Move::Left, Move::Right];
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub start: Cell,
    pub goal: Cell,
    pub cliff_cells: Vec<Cell>,
    pub wind_prob: f64,
    /// Cells where, once the agent has moved into them, wind pushes it one
    /// row down with probability `wind_prob`.
    pub wind_cells: Vec<Cell>,
    pub step_reward: f64,
    pub goal_reward: f64,
    pub cliff_reward: f64,
    pub gamma: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::open_7x7()
    }
}

impl GridSpec {
    /// 7x7 deterministic grid, start top-left, goal bottom-right.
    pub fn open_7x7() -> Self {
        Self {
            width: 7,
            height: 7,
            start: (1, 1),
            goal: (7, 7),
            cliff_cells: Vec::new(),
            wind_prob: 0.0,
            wind_cells: Vec::new(),
            step_reward: 0.0,
            goal_reward: 1.0,
            cliff_reward: -1.0,
            gamma: 0.99,
        }
    }

    /// 2x6 cliff walk: start bottom-left, goal bottom-right, cliff between
    /// them on the bottom row, wind over the cliff edge on the top row.
    pub fn cliff_2x6() -> Self {
        Self {
            width: 6,
            height: 2,
            start: (2, 1),
            goal: (2, 6),
            cliff_cells: (2..=5).map(|c| (2, c)).collect(),
            wind_prob: 0.2,
            wind_cells: (2..=5).map(|c| (1, c)).collect(),
            step_reward: 0.0,
            goal_reward: 1.0,
            cliff_reward: -1.0,
            gamma: 0.99,
        }
    }

    /// A `1 x length` corridor from the left end to the right end.
    pub fn corridor(length: usize, gamma: f64) -> Self {
        Self {
            width: length,
            height: 1,
            start: (1, 1),
            goal: (1, length),
            gamma,
            ..Self::open_7x7()
        }
    }

    /// Center cell, 1-indexed (the `(4, 4)` cell of a 7x7 grid).
    pub fn center(&self) -> Cell {
        (self.height.div_ceil(2), self.width.div_ceil(2))
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn state_of(&self, cell: Cell) -> Result<usize> {
        let (r, c) = cell;
        if r == 0 || c == 0 || r > self.height || c > self.width {
            return Err(Error::IndexOutOfRange {
                what: "grid cell",
                index: r.max(c),
                limit: self.height.max(self.width),
            });
        }
        Ok((r - 1) * self.width + (c - 1))
    }

    pub fn cell_of(&self, state: usize) -> Result<Cell> {
        if state >= self.n_cells() {
            return Err(Error::IndexOutOfRange { what: "state", index: state, limit: self.n_cells() });
        }
        Ok((state / self.width + 1, state % self.width + 1))
    }

    pub fn is_cliff(&self, cell: Cell) -> bool {
        self.cliff_cells.contains(&cell)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: alloc::string::String| Err(Error::SpecInvalid(msg));
        if self.width == 0 || self.height == 0 {
            return invalid(format!("grid {}x{} is empty", self.height, self.width));
        }
        for &cell in [self.start, self.goal]
            .iter()
            .chain(&self.cliff_cells)
            .chain(&self.wind_cells)
        {
            self.state_of(cell).map_err(|_| Error::SpecInvalid(format!("cell {cell:?} outside grid")))?;
        }
        if self.start == self.goal {
            return invalid("start equals goal".into());
        }
        if self.is_cliff(self.start) || self.is_cliff(self.goal) {
            return invalid("start or goal lies on the cliff".into());
        }
        if !(0.0..=1.0).contains(&self.wind_prob) {
            return invalid(format!("wind probability {} not in [0, 1]", self.wind_prob));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return invalid(format!("gamma {} not in [0, 1)", self.gamma));
        }
        Ok(())
    }

    fn shift(&self, (r, c): Cell, mv: Move) -> Cell {
        match mv {
            Move::Up if r > 1 => (r - 1, c),
            Move::Down if r < self.height => (r + 1, c),
            Move::Left if c > 1 => (r, c - 1),
            Move::Right if c < self.width => (r, c + 1),
            _ => (r, c),
        }
    }

    fn reward_for(&self, cell: Cell) -> f64 {
        if cell == self.goal {
            self.goal_reward
        } else if self.is_cliff(cell) {
            self.cliff_reward
        } else {
            self.step_reward
        }
    }
}

/// 4-action deterministic grid without cliff or wind.
pub fn build_open_grid(spec: &GridSpec) -> Result<TabularMdp> {
    spec.validate()?;
    if spec.wind_prob != 0.0 || !spec.cliff_cells.is_empty() {
        return Err(Error::SpecInvalid("open grid takes no wind and no cliff".into()));
    }
    build_grid(spec)
}

/// Cliff grid with wind. `wind_prob = 0` yields the deterministic cliff world.
pub fn build_cliff_grid(spec: &GridSpec) -> Result<TabularMdp> {
    spec.validate()?;
    if spec.cliff_cells.is_empty() {
        return Err(Error::SpecInvalid("cliff grid needs at least one cliff cell".into()));
    }
    build_grid(spec)
}

/// Generic grid construction. Off-grid moves leave the agent in place. The
/// goal and every cliff cell are terminal. After a move lands in a wind cell,
/// wind pushes the agent one row down with probability `wind_prob`.
pub fn build_grid(spec: &GridSpec) -> Result<TabularMdp> {
    spec.validate()?;
    let n = spec.n_cells();
    let mut b = MdpBuilder::new(n, Move::ALL.len(), spec.gamma).initial_state(spec.state_of(spec.start)?);
    let goal = spec.state_of(spec.goal)?;
    b.terminal(goal);
    for &cell in &spec.cliff_cells {
        b.terminal(spec.state_of(cell)?);
    }
    let wind: BTreeSet<Cell> = spec.wind_cells.iter().copied().collect();
    for s in 0..n {
        let cell = spec.cell_of(s)?;
        if cell == spec.goal || spec.is_cliff(cell) {
            continue;
        }
        for mv in Move::ALL {
            let landed = spec.shift(cell, mv);
            let absorbed = landed == spec.goal || spec.is_cliff(landed);
            let windy = !absorbed && spec.wind_prob > 0.0 && wind.contains(&landed);
            if windy {
                let pushed = spec.shift(landed, Move::Down);
                b.add(s, mv as usize, spec.state_of(landed)?, 1.0 - spec.wind_prob, spec.reward_for(landed));
                b.add(s, mv as usize, spec.state_of(pushed)?, spec.wind_prob, spec.reward_for(pushed));
            } else {
                b.add(s, mv as usize, spec.state_of(landed)?, 1.0, spec.reward_for(landed));
            }
        }
    }
    b.build()
}

/// Returns `buffer` with transitions from `state` kept with probability `p`.
pub fn starve(mut buffer: ReplayBuffer, state: usize, p: f64) -> Result<ReplayBuffer> {
    buffer.set_inclusion_prob(state, p)?;
    Ok(buffer)
}

/// Single-step bandit: one action, reward `win` with probability `p_win`,
/// otherwise `lose`. State 0 is the arm; states 1 and 2 are terminal.
pub fn build_bandit(p_win: f64, win: f64, lose: f64) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&p_win) {
        return Err(Error::SpecInvalid(format!("win probability {p_win} not in [0, 1]")));
    }
    let mut b = MdpBuilder::new(3, 1, 0.9);
    b.add(0, 0, 1, p_win, win).add(0, 0, 2, 1.0 - p_win, lose).terminal(1).terminal(2);
    b.build()
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticClinicalSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// Successors per non-terminal `(s, a)`.
    pub branching: usize,
    /// Fraction of states that are absorbing outcomes (at least two: one
    /// success, one failure).
    pub terminal_frac: f64,
    pub reward_success: f64,
    pub reward_failure: f64,
    pub seed: u64,
    pub behavior_temperature: f64,
    pub gamma: f64,
    /// Transitions in the logged dataset.
    pub dataset_size: usize,
    /// Zipf exponent of successor popularity.
    pub popularity_exponent: f64,
    /// Chance that a successor slot is an outcome state.
    pub outcome_prob: f64,
    pub max_episode_steps: usize,
}

impl Default for SyntheticClinicalSpec {
    fn default() -> Self {
        Self {
            n_states: 752,
            n_actions: 25,
            branching: 4,
            terminal_frac: 2.0 / 752.0,
            reward_success: 1.0,
            reward_failure: -1.0,
            seed: 0,
            behavior_temperature: 1.0,
            gamma: 0.99,
            dataset_size: 200_000,
            popularity_exponent: 1.0,
            outcome_prob: 0.1,
            max_episode_steps: 100,
        }
    }
}

impl SyntheticClinicalSpec {
    pub fn n_terminal(&self) -> usize {
        let n = libm::round(self.terminal_frac * self.n_states as f64) as usize;
        n.max(2)
    }

    fn validate(&self) -> Result<()> {
        let invalid = |msg: alloc::string::String| Err(Error::SpecInvalid(msg));
        if self.n_actions == 0 || self.branching == 0 {
            return invalid("n_actions and branching must be positive".into());
        }
        if !(self.terminal_frac > 0.0 && self.terminal_frac < 1.0) {
            return invalid(format!("terminal_frac {} not in (0, 1)", self.terminal_frac));
        }
        if self.n_states < self.n_terminal() + 1 {
            return invalid(format!("{} states leave no room for non-terminal states", self.n_states));
        }
        if self.branching > self.n_states {
            return invalid(format!("branching {} exceeds state count", self.branching));
        }
        if !(self.behavior_temperature > 0.0) {
            return invalid("behavior temperature must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.outcome_prob) || !(0.0..1.0).contains(&self.gamma) {
            return invalid("outcome_prob must be in [0, 1] and gamma in [0, 1)".into());
        }
        if self.max_episode_steps == 0 {
            return invalid("max_episode_steps must be positive".into());
        }
        Ok(())
    }
}

/// The synthetic clinical MDP together with its logged behavior data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalData {
    pub mdp: TabularMdp,
    pub dataset: Vec<Transition>,
    /// Number of dataset transitions leaving each state.
    pub behavior_visit_counts: Vec<u64>,
    /// Behavior policy, row-major `state * n_actions + action`.
    pub behavior_policy: Vec<f64>,
    pub success_states: Vec<usize>,
    pub failure_states: Vec<usize>,
}

/// Seeded sparse MDP with Zipf-popular successors and two kinds of absorbing
/// outcome, plus a dataset logged by a softmax behavior policy.
///
/// Outcome states take the highest indices, successes first. The initial
/// state is the most popular non-terminal state.
pub fn build_synthetic_clinical(spec: &SyntheticClinicalSpec) -> Result<ClinicalData> {
    spec.validate()?;
    let n = spec.n_states;
    let na = spec.n_actions;
    let n_term = spec.n_terminal();
    let n_live = n - n_term;
    let n_success = n_term.div_ceil(2);
    let success_states: Vec<usize> = (n_live..n_live + n_success).collect();
    let failure_states: Vec<usize> = (n_live + n_success..n).collect();

    let mut rng = stream(spec.seed, component::GENERATOR, 0);

    // Popularity rank -> state via a seeded shuffle.
    let mut by_rank: Vec<usize> = (0..n_live).collect();
    for i in (1..n_live).rev() {
        let j = rng.random_range(0..=i);
        by_rank.swap(i, j);
    }
    let mut cumulative = Vec::with_capacity(n_live);
    let mut acc = 0.0;
    for rank in 0..n_live {
        acc += 1.0 / libm::pow(rank as f64 + 1.0, spec.popularity_exponent);
        cumulative.push(acc);
    }
    let draw_live = |rng: &mut crate::rng::StreamRng| {
        let u = rng.random::<f64>() * acc;
        let rank = cumulative.partition_point(|&c| c <= u).min(n_live - 1);
        by_rank[rank]
    };

    let mut b = MdpBuilder::new(n, na, spec.gamma).initial_state(by_rank[0]);
    for &t in success_states.iter().chain(&failure_states) {
        b.terminal(t);
    }
    let mut successors: Vec<usize> = Vec::with_capacity(spec.branching);
    for s in 0..n_live {
        for a in 0..na {
            let efficacy: f64 = rng.sample(StandardNormal);
            let p_success = 1.0 / (1.0 + libm::exp(-efficacy));
            successors.clear();
            let mut attempts = 0;
            while successors.len() < spec.branching {
                attempts += 1;
                let candidate = if attempts > 256 * spec.branching {
                    // Pathologically small spaces: take the first unused index.
                    (0..n).find(|x| !successors.contains(x)).expect("branching <= n_states")
                } else if rng.random::<f64>() < spec.outcome_prob {
                    if rng.random::<f64>() < p_success {
                        success_states[rng.random_range(0..success_states.len())]
                    } else {
                        failure_states[rng.random_range(0..failure_states.len())]
                    }
                } else {
                    draw_live(&mut rng)
                };
                if !successors.contains(&candidate) {
                    successors.push(candidate);
                }
            }
            let weights: Vec<f64> = successors
                .iter()
                .map(|_| {
                    let w: f64 = rng.sample(Exp1);
                    w.max(1e-12)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            for (&next, w) in successors.iter().zip(&weights) {
                let reward = if success_states.contains(&next) {
                    spec.reward_success
                } else if failure_states.contains(&next) {
                    spec.reward_failure
                } else {
                    0.0
                };
                b.add(s, a, next, w / total, reward);
            }
        }
    }
    let mdp = b.build()?;

    let mut behavior_policy = vec![0.0; n * na];
    for s in 0..n {
        let scores: Vec<f64> = (0..na)
            .map(|_| StandardNormal.sample(&mut rng))
            .map(|x: f64| x / spec.behavior_temperature)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|x| libm::exp(x - max)).collect();
        let z: f64 = exps.iter().sum();
        for (a, e) in exps.iter().enumerate() {
            behavior_policy[s * na + a] = e / z;
        }
    }

    let mut data_rng = stream(spec.seed, component::DATASET, 0);
    let mut dataset = Vec::with_capacity(spec.dataset_size);
    let mut behavior_visit_counts = vec![0u64; n];
    while dataset.len() < spec.dataset_size {
        let mut state = mdp.initial_state();
        for _ in 0..spec.max_episode_steps {
            if dataset.len() == spec.dataset_size || mdp.is_terminal(state) {
                break;
            }
            let row = &behavior_policy[state * na..(state + 1) * na];
            let action = sample_categorical(row, &mut data_rng);
            let t = step(&mdp, state, action, &mut data_rng)?;
            behavior_visit_counts[state] += 1;
            dataset.push(t);
            state = t.next_state;
        }
    }

    Ok(ClinicalData {
        mdp,
        dataset,
        behavior_visit_counts,
        behavior_policy,
        success_states,
        failure_states,
    })
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{value_iteration, Outcome};

    #[test]
    fn open_grid_shape() {
        let spec = GridSpec::open_7x7();
        let mdp = build_open_grid(&spec).unwrap();
        assert_eq!(mdp.n_states(), 49);
        assert_eq!(mdp.n_actions(), 4);
        assert_eq!(mdp.terminals().len(), 1);
        assert_eq!(spec.center(), (4, 4));
        let top = spec.state_of((1, 3)).unwrap();
        assert_eq!(mdp.outcomes(top, Move::Up as usize), &[Outcome { next: top, prob: 1.0, reward: 0.0 }]);
    }

    #[test]
    fn open_grid_optimal_value() {
        let spec = GridSpec::open_7x7();
        let mdp = build_open_grid(&spec).unwrap();
        let q = value_iteration(&mdp, 1e-12, 10_000);
        let start = mdp.initial_state();
        let v = (0..4).map(|a| q[start * 4 + a]).fold(f64::NEG_INFINITY, f64::max);
        let d = 12; // |7 - 1| + |7 - 1|
        assert!((v - 0.99f64.powi(d - 1)).abs() < 1e-9);
    }

    #[test]
    fn coordinates_round_trip() {
        let spec = GridSpec::open_7x7();
        for s in 0..spec.n_cells() {
            assert_eq!(spec.state_of(spec.cell_of(s).unwrap()).unwrap(), s);
        }
        assert!(spec.state_of((0, 1)).is_err());
        assert!(spec.state_of((8, 1)).is_err());
        assert!(spec.cell_of(49).is_err());
    }

    #[test]
    fn open_grid_rejects_wind_and_bad_specs() {
        assert!(matches!(build_open_grid(&GridSpec::cliff_2x6()), Err(Error::SpecInvalid(_))));
        let mut spec = GridSpec::open_7x7();
        spec.goal = spec.start;
        assert!(matches!(build_open_grid(&spec), Err(Error::SpecInvalid(_))));
        let mut spec = GridSpec::cliff_2x6();
        spec.wind_prob = 1.5;
        assert!(matches!(build_cliff_grid(&spec), Err(Error::SpecInvalid(_))));
        let mut spec = GridSpec::cliff_2x6();
        spec.cliff_cells.clear();
        assert!(matches!(build_cliff_grid(&spec), Err(Error::SpecInvalid(_))));
    }

    #[test]
    fn wind_pushes_into_cliff_from_interior_wind_cell() {
        let spec = GridSpec::cliff_2x6();
        let mdp = build_cliff_grid(&spec).unwrap();
        let cell = (1, 3);
        let s = spec.state_of(cell).unwrap();
        for mv in Move::ALL {
            let to_cliff: f64 = mdp
                .outcomes(s, mv as usize)
                .iter()
                .filter(|o| spec.is_cliff(spec.cell_of(o.next).unwrap()))
                .map(|o| o.prob)
                .sum();
            assert!(to_cliff >= 0.2 - 1e-12, "{mv:?}: {to_cliff}");
            for o in mdp.outcomes(s, mv as usize) {
                if spec.is_cliff(spec.cell_of(o.next).unwrap()) {
                    assert!(mdp.is_terminal(o.next));
                    assert_eq!(o.reward, -1.0);
                }
            }
        }
    }

    #[test]
    fn calm_cliff_is_deterministic() {
        let mut spec = GridSpec::cliff_2x6();
        spec.wind_prob = 0.0;
        let mdp = build_cliff_grid(&spec).unwrap();
        for s in 0..mdp.n_states() {
            for a in 0..4 {
                let row = mdp.outcomes(s, a);
                assert_eq!(row.len(), 1);
                assert_eq!(row[0].prob, 1.0);
                if !mdp.is_terminal(s) {
                    let expected = spec.shift(spec.cell_of(s).unwrap(), Move::ALL[a]);
                    assert_eq!(row[0].next, spec.state_of(expected).unwrap());
                }
            }
        }
        // Same kernels as an open grid where cliff cells are plain terminals.
        let mut open = spec.clone();
        open.cliff_cells.clear();
        open.wind_cells.clear();
        let open = build_grid(&open).unwrap();
        for s in 0..mdp.n_states() {
            if mdp.is_terminal(s) {
                continue;
            }
            for a in 0..4 {
                assert_eq!(mdp.outcomes(s, a)[0].next, open.outcomes(s, a)[0].next);
            }
        }
    }

    #[test]
    fn starvation_extremes() {
        let mut rng = stream(2, component::BUFFER, 0);
        let t = Transition { state: 3, action: 0, reward: 0.0, next_state: 4, terminal: false };
        let mut never = starve(ReplayBuffer::new(100, 10).unwrap(), 3, 0.0).unwrap();
        assert!((0..1000).all(|_| !never.push(t, &mut rng)));
        assert!(never.is_empty());
        let mut always = starve(ReplayBuffer::new(100, 10).unwrap(), 3, 1.0).unwrap();
        assert!((0..100).all(|_| always.push(t, &mut rng)));
        assert!(starve(ReplayBuffer::new(100, 10).unwrap(), 10, 0.5).is_err());
    }

    #[test]
    fn clinical_generator_shape_and_determinism() {
        let spec = SyntheticClinicalSpec { dataset_size: 5_000, ..Default::default() };
        let a = build_synthetic_clinical(&spec).unwrap();
        assert_eq!(a.mdp.n_states(), 752);
        assert_eq!(a.mdp.n_actions(), 25);
        assert_eq!(a.mdp.terminals().len(), 2);
        assert_eq!(a.dataset.len(), 5_000);
        for s in 0..752 {
            if a.mdp.is_terminal(s) {
                continue;
            }
            for act in 0..25 {
                let row = a.mdp.outcomes(s, act);
                assert_eq!(row.len(), 4);
                assert!(row.iter().all(|o| o.prob > 0.0));
            }
        }
        let b = build_synthetic_clinical(&spec).unwrap();
        assert_eq!(a, b);
        let c = build_synthetic_clinical(&SyntheticClinicalSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }
}
