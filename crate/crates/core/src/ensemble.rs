//! Anchored ensembles of quantile tables and their TD training loops.
//!
//! Each member is a full [`QuantileTable`] trained on its own replay batches
//! and bootstrapping from its own table. A frozen anchor table drawn from the
//! prior pulls every member back towards a different prior sample, so the
//! spread across members behaves like a posterior spread: wide where data is
//! scarce, narrow where it is plentiful.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_index, Error, Result};
use crate::mdp::{step, TabularMdp, Transition};
use crate::quantile::{quantile_huber_grad, taus, td_targets_into, QuantileTable};
use crate::replay::ReplayBuffer;
use crate::rng::{component, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum TrainMode {
    /// Interact with the environment and learn from the replay buffer.
    #[default]
    Online,
    /// Learn from a fixed, pre-filled buffer without interaction.
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Exploration {
    /// Epsilon-greedy on the ensemble-mean action values.
    #[default]
    EpsilonGreedy,
    /// Act greedily for one uniformly drawn member per episode.
    Thompson,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// If set, the step size decays linearly to this value over `n_steps`.
    pub learning_rate_final: Option<f64>,
    pub huber_kappa: f64,
    pub gamma: f64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Linear decay length; `None` means the first half of training.
    pub epsilon_decay_steps: Option<usize>,
    pub seed: u64,
    pub mode: TrainMode,
    pub exploration: Exploration,
    pub n_members: usize,
    pub n_quantiles: usize,
    pub anchor_strength: f64,
    pub prior_mean: f64,
    pub prior_std: f64,
    pub buffer_capacity: usize,
    pub max_episode_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            learning_rate_final: None,
            huber_kappa: 1.0,
            gamma: 0.99,
            n_steps: 100_000,
            batch_size: 32,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: None,
            seed: 0,
            mode: TrainMode::Online,
            exploration: Exploration::EpsilonGreedy,
            n_members: 8,
            n_quantiles: 8,
            anchor_strength: 0.01,
            prior_mean: 0.0,
            prior_std: 1.0,
            buffer_capacity: 100_000,
            max_episode_steps: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: alloc::string::String| Err(Error::ConfigInvalid(msg));
        if !(self.learning_rate > 0.0) {
            return invalid(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if let Some(end) = self.learning_rate_final {
            if !(end > 0.0) {
                return invalid(format!("learning_rate_final {end} must be positive"));
            }
        }
        if !(self.huber_kappa > 0.0) {
            return invalid(format!("huber_kappa {} must be positive", self.huber_kappa));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return invalid(format!("gamma {} not in [0, 1)", self.gamma));
        }
        for (name, eps) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&eps) {
                return invalid(format!("{name} {eps} not in [0, 1]"));
            }
        }
        if self.batch_size == 0 || self.n_quantiles == 0 || self.buffer_capacity == 0 {
            return invalid("batch_size, n_quantiles and buffer_capacity must be positive".into());
        }
        if self.n_members < 2 {
            return invalid(format!("an ensemble needs at least 2 members, got {}", self.n_members));
        }
        if !(self.anchor_strength >= 0.0) || !(self.prior_std >= 0.0) || !self.prior_mean.is_finite() {
            return invalid("anchor_strength and prior_std must be non-negative".into());
        }
        if self.max_episode_steps == 0 {
            return invalid("max_episode_steps must be positive".into());
        }
        Ok(())
    }

    /// Exploration rate after `step` environment steps.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        let horizon = self.epsilon_decay_steps.unwrap_or(self.n_steps / 2);
        if horizon == 0 || step >= horizon {
            return self.epsilon_end;
        }
        let frac = step as f64 / horizon as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }

    /// Step size for update number `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        match self.learning_rate_final {
            Some(end) if self.n_steps > 1 => {
                let frac = (step as f64 / (self.n_steps - 1) as f64).min(1.0);
                self.learning_rate + (end - self.learning_rate) * frac
            }
            _ => self.learning_rate,
        }
    }

    pub fn update_params(&self, step: usize) -> UpdateParams {
        UpdateParams {
            learning_rate: self.learning_rate_at(step),
            huber_kappa: self.huber_kappa,
            anchor_strength: self.anchor_strength,
            gamma: self.gamma,
        }
    }
}

/// Hyperparameters of one [`update_member`] call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateParams {
    pub learning_rate: f64,
    pub huber_kappa: f64,
    pub anchor_strength: f64,
    pub gamma: f64,
}

/// K quantile tables plus their frozen prior anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchoredEnsemble {
    members: Vec<QuantileTable>,
    anchors: Vec<QuantileTable>,
    anchor_strength: f64,
    prior_mean: f64,
    prior_std: f64,
}

impl AnchoredEnsemble {
    /// Draws `n_members` anchor tables i.i.d. `Normal(prior_mean, prior_std)`
    /// and starts every member at its anchor.
    pub fn from_prior(
        n_states: usize,
        n_actions: usize,
        n_quantiles: usize,
        n_members: usize,
        prior_mean: f64,
        prior_std: f64,
        anchor_strength: f64,
        seed: u64,
    ) -> Result<Self> {
        if n_members < 2 {
            return Err(Error::DegenerateEnsemble(n_members));
        }
        let prior = Normal::new(prior_mean, prior_std)
            .map_err(|e| Error::ConfigInvalid(format!("prior: {e:?}")))?;
        let anchors: Vec<QuantileTable> = (0..n_members)
            .map(|m| {
                let mut rng = stream(seed, component::ANCHOR, m as u32);
                let mut table = QuantileTable::zeros(n_states, n_actions, n_quantiles);
                for v in table.values_mut() {
                    *v = prior.sample(&mut rng);
                }
                table
            })
            .collect();
        Ok(Self {
            members: anchors.clone(),
            anchors,
            anchor_strength,
            prior_mean,
            prior_std,
        })
    }

    /// Ensemble initialised from a training configuration.
    pub fn for_config(n_states: usize, n_actions: usize, cfg: &TrainConfig) -> Result<Self> {
        Self::from_prior(
            n_states,
            n_actions,
            cfg.n_quantiles,
            cfg.n_members,
            cfg.prior_mean,
            cfg.prior_std,
            cfg.anchor_strength,
            cfg.seed,
        )
    }

    /// Reassembles an ensemble from stored tables.
    pub fn from_parts(
        members: Vec<QuantileTable>,
        anchors: Vec<QuantileTable>,
        anchor_strength: f64,
        prior_mean: f64,
        prior_std: f64,
    ) -> Result<Self> {
        if members.len() != anchors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} members but {} anchors",
                members.len(),
                anchors.len()
            )));
        }
        if let Some(first) = members.first() {
            if members.iter().chain(&anchors).any(|t| !t.same_shape(first)) {
                return Err(Error::ShapeMismatch("tables differ in shape".into()));
            }
        }
        Ok(Self { members, anchors, anchor_strength, prior_mean, prior_std })
    }

    pub fn members(&self) -> &[QuantileTable] {
        &self.members
    }

    pub fn anchors(&self) -> &[QuantileTable] {
        &self.anchors
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn n_states(&self) -> usize {
        self.members.first().map_or(0, QuantileTable::n_states)
    }

    pub fn n_actions(&self) -> usize {
        self.members.first().map_or(0, QuantileTable::n_actions)
    }

    pub fn n_quantiles(&self) -> usize {
        self.members.first().map_or(0, QuantileTable::n_quantiles)
    }

    pub fn taus(&self) -> Vec<f64> {
        taus(self.n_quantiles())
    }

    pub fn anchor_strength(&self) -> f64 {
        self.anchor_strength
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn prior_std(&self) -> f64 {
        self.prior_std
    }

    /// Mutable access to one member together with its (read-only) anchor.
    pub fn member_mut(&mut self, m: usize) -> (&mut QuantileTable, &QuantileTable) {
        (&mut self.members[m], &self.anchors[m])
    }

    pub(crate) fn check_state(&self, state: usize) -> Result<()> {
        check_index("state", state, self.n_states())
    }

    /// Ensemble-mean action value without bounds checks.
    #[inline]
    pub(crate) fn mean_value(&self, state: usize, action: usize) -> f64 {
        let total: f64 = self.members.iter().map(|m| m.row(state, action).iter().sum::<f64>()).sum();
        total / (self.members.len() * self.n_quantiles()) as f64
    }

    pub(crate) fn greedy_unchecked(&self, state: usize) -> usize {
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for a in 0..self.n_actions() {
            let v = self.mean_value(state, a);
            if v > best_value {
                best = a;
                best_value = v;
            }
        }
        best
    }
}

/// Action maximising the mean over members and quantiles; ties go to the
/// lowest index.
pub fn greedy_action(ens: &AnchoredEnsemble, state: usize) -> Result<usize> {
    ens.check_state(state)?;
    Ok(ens.greedy_unchecked(state))
}

/// Mean over all `K * N` values at `(state, action)`.
pub fn q_mean(ens: &AnchoredEnsemble, state: usize, action: usize) -> Result<f64> {
    ens.check_state(state)?;
    check_index("action", action, ens.n_actions())?;
    Ok(ens.mean_value(state, action))
}

/// One quantile-regression TD step for a single member.
///
/// Targets are computed from the member's table before any cell moves. Then,
/// transition by transition, every quantile `i` of the visited cell takes a
/// gradient step on the mean quantile Huber loss against the `N` targets
/// plus the anchor penalty `lambda * (value - anchor)^2`. Cells not in the
/// batch are untouched.
pub fn update_member(
    member: &mut QuantileTable,
    anchor: &QuantileTable,
    batch: &[Transition],
    params: &UpdateParams,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if !member.same_shape(anchor) {
        return Err(Error::ShapeMismatch("member and anchor differ in shape".into()));
    }
    for t in batch {
        check_index("state", t.state, member.n_states())?;
        check_index("state", t.next_state, member.n_states())?;
        check_index("action", t.action, member.n_actions())?;
    }
    let n = member.n_quantiles();
    let mut targets = vec![0.0; batch.len() * n];
    update_member_with(member, anchor, batch, params, &taus(n), &mut targets);
    Ok(())
}

/// Unchecked core of [`update_member`] with caller-provided scratch space.
pub(crate) fn update_member_with(
    member: &mut QuantileTable,
    anchor: &QuantileTable,
    batch: &[Transition],
    params: &UpdateParams,
    levels: &[f64],
    targets: &mut [f64],
) {
    let n = member.n_quantiles();
    for (t, out) in batch.iter().zip(targets.chunks_exact_mut(n)) {
        td_targets_into(member, t, params.gamma, out);
    }
    let lr = params.learning_rate;
    let kappa = params.huber_kappa;
    let pull = 2.0 * params.anchor_strength;
    let inv_n = 1.0 / n as f64;
    for (t, row_targets) in batch.iter().zip(targets.chunks_exact(n)) {
        let prior = anchor.row(t.state, t.action);
        let row = member.row_mut(t.state, t.action);
        for ((value, &tau), &a) in row.iter_mut().zip(levels).zip(prior) {
            let v = *value;
            let g: f64 = row_targets
                .iter()
                .map(|&y| quantile_huber_grad(y - v, tau, kappa))
                .sum::<f64>()
                * inv_n;
            *value = v - lr * (g + pull * (v - a));
        }
    }
}

/// Trains a fresh ensemble for `cfg.n_steps` steps.
///
/// Online: act epsilon-greedily on the ensemble mean (or by per-episode
/// Thompson sampling), push each transition through `buffer` (so starvation
/// applies), then update every member on its own uniformly drawn batch.
/// Offline: no interaction, `n_steps` rounds of member updates from the
/// pre-filled `buffer`.
///
/// The result is a pure function of `(env, initial buffer, cfg)`.
pub fn train(env: &TabularMdp, buffer: &mut ReplayBuffer, cfg: &TrainConfig) -> Result<AnchoredEnsemble> {
    let mut ens = AnchoredEnsemble::for_config(env.n_states(), env.n_actions(), cfg)?;
    train_in_place(&mut ens, env, buffer, cfg)?;
    Ok(ens)
}

/// Continues training an existing ensemble.
pub fn train_in_place(
    ens: &mut AnchoredEnsemble,
    env: &TabularMdp,
    buffer: &mut ReplayBuffer,
    cfg: &TrainConfig,
) -> Result<()> {
    cfg.validate()?;
    if ens.n_states() != env.n_states() || ens.n_actions() != env.n_actions() {
        return Err(Error::ShapeMismatch(format!(
            "ensemble is {}x{}, environment is {}x{}",
            ens.n_states(),
            ens.n_actions(),
            env.n_states(),
            env.n_actions()
        )));
    }
    if cfg.mode == TrainMode::Offline && buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }

    let k = ens.n_members();
    let n = ens.n_quantiles();
    let levels = taus(n);
    let mut batch_rngs: Vec<_> = (0..k).map(|m| stream(cfg.seed, component::MEMBER_BATCH, m as u32)).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut targets = vec![0.0; cfg.batch_size * n];

    let mut env_rng = stream(cfg.seed, component::ENV, 0);
    let mut explore_rng = stream(cfg.seed, component::EXPLORE, 0);
    let mut buffer_rng = stream(cfg.seed, component::BUFFER, 0);
    let mut thompson_rng = stream(cfg.seed, component::THOMPSON, 0);

    let mut state = env.initial_state();
    let mut episode_len = 0;
    let mut acting_member = thompson_rng.random_range(0..k);

    for step_index in 0..cfg.n_steps {
        if cfg.mode == TrainMode::Online {
            let action = match cfg.exploration {
                Exploration::EpsilonGreedy => {
                    if explore_rng.random::<f64>() < cfg.epsilon_at(step_index) {
                        explore_rng.random_range(0..env.n_actions())
                    } else {
                        ens.greedy_unchecked(state)
                    }
                }
                Exploration::Thompson => ens.members[acting_member].greedy_action(state),
            };
            let t = step(env, state, action, &mut env_rng)?;
            buffer.push(t, &mut buffer_rng);
            episode_len += 1;
            if t.terminal || episode_len >= cfg.max_episode_steps {
                state = env.initial_state();
                episode_len = 0;
                acting_member = thompson_rng.random_range(0..k);
            } else {
                state = t.next_state;
            }
            if buffer.is_empty() {
                continue;
            }
        }

        let params = cfg.update_params(step_index);
        for (m, rng) in batch_rngs.iter_mut().enumerate() {
            buffer.sample_into(cfg.batch_size, rng, &mut batch)?;
            let (member, anchor) = ens.member_mut(m);
            update_member_with(member, anchor, &batch, &params, &levels, &mut targets);
        }
    }
    Ok(())
}
