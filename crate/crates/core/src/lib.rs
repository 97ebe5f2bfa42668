//! Uncertainty-decomposed distributional reinforcement learning on tabular MDPs.
//!
//! The crate learns a set of quantiles of the return distribution for every
//! state-action pair with quantile-regression TD updates, and keeps an anchored
//! ensemble of such tables as an approximate posterior. From the ensemble the
//! return uncertainty splits into an epistemic part (disagreement between
//! members) and an aleatoric part (spread across quantile levels of the
//! ensemble mean).
//!
//! Everything here is `no_std` with `alloc`. File formats, the experiment
//! runner and the CLI live in the `qdecomp` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod distribution;
pub mod ensemble;
pub mod envs;
mod error;
pub mod mdp;
pub mod quantile;
pub mod replay;
pub mod rng;
pub mod stats;
pub mod uncertainty;

pub use crate::distribution::{exact_return_distribution, ReturnDistribution};
pub use crate::ensemble::{
    greedy_action, q_mean, train, update_member, AnchoredEnsemble, Exploration, TrainConfig,
    TrainMode,
};
pub use crate::envs::{GridSpec, SyntheticClinicalSpec};
pub use crate::error::{Error, Result};
pub use crate::mdp::{sample_episode, step, TabularMdp, Transition};
pub use crate::quantile::{quantile_huber_grad, quantile_huber_loss, td_targets, QuantileTable};
pub use crate::replay::ReplayBuffer;
pub use crate::uncertainty::{
    aleatoric_variance, epistemic_variance, normalize, state_map, ActionRule, UncertaintyEstimate,
    UncertaintyMap,
};
