//! Tabular quantile functions and the quantile Huber loss.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_index, Error, Result};
use crate::mdp::Transition;

/// Quantile level `i / (N + 1)` for 1-based `i`.
pub fn tau(i: usize, n_quantiles: usize) -> f64 {
    i as f64 / (n_quantiles as f64 + 1.0)
}

/// The `N` quantile levels `1/(N+1), ..., N/(N+1)`.
pub fn taus(n_quantiles: usize) -> Vec<f64> {
    (1..=n_quantiles).map(|i| tau(i, n_quantiles)).collect()
}

/// Quantile estimates for every `(state, action, level)`.
///
/// Values are stored row-major with the quantile index fastest, so
/// [`row`](Self::row) hands back the `N` estimates of one state-action pair
/// as a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTable {
    n_states: usize,
    n_actions: usize,
    n_quantiles: usize,
    values: Vec<f64>,
}

impl QuantileTable {
    pub fn zeros(n_states: usize, n_actions: usize, n_quantiles: usize) -> Self {
        Self::filled(n_states, n_actions, n_quantiles, 0.0)
    }

    pub fn filled(n_states: usize, n_actions: usize, n_quantiles: usize, value: f64) -> Self {
        Self {
            n_states,
            n_actions,
            n_quantiles,
            values: vec![value; n_states * n_actions * n_quantiles],
        }
    }

    /// Wraps raw values laid out as `((state * n_actions) + action) * N + i`.
    pub fn from_values(
        n_states: usize,
        n_actions: usize,
        n_quantiles: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if n_quantiles == 0 || values.len() != n_states * n_actions * n_quantiles {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} values for a {n_states}x{n_actions}x{n_quantiles} table",
                values.len()
            )));
        }
        Ok(Self { n_states, n_actions, n_quantiles, values })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_quantiles(&self) -> usize {
        self.n_quantiles
    }

    pub fn taus(&self) -> Vec<f64> {
        taus(self.n_quantiles)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_shape(&self, other: &QuantileTable) -> bool {
        self.n_states == other.n_states
            && self.n_actions == other.n_actions
            && self.n_quantiles == other.n_quantiles
    }

    #[inline]
    fn offset(&self, state: usize, action: usize) -> usize {
        (state * self.n_actions + action) * self.n_quantiles
    }

    /// The `N` quantile estimates at `(state, action)`.
    #[inline]
    pub fn row(&self, state: usize, action: usize) -> &[f64] {
        let o = self.offset(state, action);
        &self.values[o..o + self.n_quantiles]
    }

    #[inline]
    pub fn row_mut(&mut self, state: usize, action: usize) -> &mut [f64] {
        let o = self.offset(state, action);
        let n = self.n_quantiles;
        &mut self.values[o..o + n]
    }

    pub fn get(&self, state: usize, action: usize, i: usize) -> Result<f64> {
        check_index("state", state, self.n_states)?;
        check_index("action", action, self.n_actions)?;
        check_index("quantile", i, self.n_quantiles)?;
        Ok(self.row(state, action)[i])
    }

    /// Mean over quantiles at `(state, action)`.
    #[inline]
    pub fn mean(&self, state: usize, action: usize) -> f64 {
        self.row(state, action).iter().sum::<f64>() / self.n_quantiles as f64
    }

    /// Action with the largest quantile mean; ties go to the lowest index.
    pub fn greedy_action(&self, state: usize) -> usize {
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for a in 0..self.n_actions {
            let v = self.mean(state, a);
            if v > best_value {
                best = a;
                best_value = v;
            }
        }
        best
    }
}

/// Huber function `L_k(u)`: quadratic within `kappa` of 0, linear outside.
#[inline]
pub fn huber(u: f64, kappa: f64) -> f64 {
    if u.abs() <= kappa {
        0.5 * u * u
    } else {
        kappa * (u.abs() - 0.5 * kappa)
    }
}

/// Quantile Huber loss `|tau - 1{u < 0}| * L_k(u) / k` of the residual
/// `u = target - estimate`.
#[inline]
pub fn quantile_huber_loss(u: f64, tau: f64, kappa: f64) -> f64 {
    let weight = if u < 0.0 { 1.0 - tau } else { tau };
    weight * huber(u, kappa) / kappa
}

/// Derivative of [`quantile_huber_loss`] with respect to the estimate, i.e.
/// `-|tau - 1{u < 0}| * clamp(u / kappa, -1, 1)`.
#[inline]
pub fn quantile_huber_grad(u: f64, tau: f64, kappa: f64) -> f64 {
    let weight = if u < 0.0 { 1.0 - tau } else { tau };
    -weight * (u / kappa).clamp(-1.0, 1.0)
}

/// Bellman targets for one transition, written into `out` (length `N`).
///
/// Terminal transitions give `N` copies of the reward. Otherwise target `j`
/// is `reward + gamma * member[next, a*, j]` where `a*` is the member's own
/// greedy action at the next state.
pub fn td_targets_into(member: &QuantileTable, t: &Transition, gamma: f64, out: &mut [f64]) {
    if t.terminal {
        out.fill(t.reward);
        return;
    }
    let a_star = member.greedy_action(t.next_state);
    for (o, v) in out.iter_mut().zip(member.row(t.next_state, a_star)) {
        *o = t.reward + gamma * v;
    }
}

/// Allocating form of [`td_targets_into`].
pub fn td_targets(member: &QuantileTable, t: &Transition, gamma: f64) -> Result<Vec<f64>> {
    check_index("state", t.state, member.n_states())?;
    check_index("state", t.next_state, member.n_states())?;
    check_index("action", t.action, member.n_actions())?;
    let mut out = vec![0.0; member.n_quantiles()];
    td_targets_into(member, t, gamma, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taus_are_midpoint_levels() {
        assert_eq!(taus(4), vec![0.2, 0.4, 0.6, 0.8]);
        let t = taus(8);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert!(t.iter().enumerate().all(|(i, &x)| x == (i + 1) as f64 / 9.0));
    }

    #[test]
    fn grad_examples() {
        assert_eq!(quantile_huber_grad(0.0, 0.3, 1.0), 0.0);
        assert_eq!(quantile_huber_grad(2.0, 0.5, 1.0), -0.5);
        assert_eq!(quantile_huber_grad(-2.0, 0.5, 1.0), 0.5);
        assert!((quantile_huber_grad(0.5 * 0.7, 0.9, 0.7) + 0.45).abs() < 1e-15);
    }

    #[test]
    fn grad_matches_central_difference() {
        let (tau, kappa) = (0.9, 1.0);
        let u = 0.5;
        // Loss in terms of the estimate y with target fixed at u.
        let loss_y = |y: f64| quantile_huber_loss(u - y, tau, kappa);
        let h = 1e-6;
        let fd = (loss_y(h) - loss_y(-h)) / (2.0 * h);
        assert!((fd - -0.45).abs() < 1e-8, "fd {fd}");
    }

    #[test]
    fn targets() {
        let member = QuantileTable::from_values(2, 1, 2, vec![5.0, 5.0, 0.0, 1.0]).unwrap();
        let t = Transition { state: 0, action: 0, reward: 0.0, next_state: 1, terminal: false };
        assert_eq!(td_targets(&member, &t, 0.9).unwrap(), vec![0.0, 0.9]);

        let member = QuantileTable::zeros(2, 1, 8);
        let t = Transition { state: 0, action: 0, reward: -1.0, next_state: 1, terminal: true };
        assert_eq!(td_targets(&member, &t, 0.9).unwrap(), vec![-1.0; 8]);
    }

    #[test]
    fn target_action_is_member_greedy_with_low_index_ties() {
        // next state 1: action 0 mean 0.3, action 1 mean 0.7
        let member =
            QuantileTable::from_values(2, 2, 2, vec![0.0, 0.0, 0.0, 0.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        assert_eq!(member.greedy_action(1), 1);
        let t = Transition { state: 0, action: 0, reward: 0.0, next_state: 1, terminal: false };
        assert_eq!(td_targets(&member, &t, 1.0).unwrap(), vec![0.6, 0.8]);

        let tied =
            QuantileTable::from_values(2, 2, 2, vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.4, 0.6]).unwrap();
        assert_eq!(tied.greedy_action(1), 0);
        assert_eq!(td_targets(&tied, &t, 1.0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn shape_checks() {
        assert!(QuantileTable::from_values(2, 2, 2, vec![0.0; 7]).is_err());
        let t = QuantileTable::zeros(2, 2, 2);
        assert!(t.get(2, 0, 0).is_err());
        assert!(t.get(0, 0, 2).is_err());
        assert_eq!(t.get(1, 1, 1), Ok(0.0));
    }
}
