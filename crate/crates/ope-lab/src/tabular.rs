//! Randomly generated one-hot tabular instances.
//!
//! These instances always satisfy linear realizability (the parameter is the
//! flattened exact q-table) and, with dense random transitions and a uniform
//! sampling distribution, comfortably satisfy the low-distribution-shift
//! assumption. They drive the upper-bound experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::OpeError;
use crate::features::{FeatureSystem, LinearParam, StateDistribution};
use crate::mdp::{exact_values, ActionModel, FiniteMdp, Policy, RewardDist, ValueTable};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomTabularConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// Point-mass rewards are drawn uniformly from `[-scale, scale]`.
    pub reward_scale: f64,
}

/// A random instance bundled with its ground truth.
#[derive(Debug, Clone)]
pub struct TabularInstance {
    pub mdp: FiniteMdp,
    pub policy: Policy,
    pub features: FeatureSystem,
    pub theta: LinearParam,
    pub mu: StateDistribution,
    pub exact: ValueTable,
    pub target_state: usize,
}

/// Draws an instance: dense transition rows from normalized uniforms,
/// point-mass rewards, uniform policy, uniform sampling distribution.
pub fn random_instance(cfg: &RandomTabularConfig, seed: u64) -> Result<TabularInstance> {
    if cfg.n_states == 0 || cfg.n_actions == 0 {
        return Err(OpeError::invalid("need at least one state and one action"));
    }
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) {
        return Err(OpeError::invalid(format!(
            "gamma = {} not strictly inside (0, 1)",
            cfg.gamma
        )));
    }
    if !(cfg.reward_scale >= 0.0 && cfg.reward_scale <= 1.0) {
        return Err(OpeError::invalid(format!(
            "reward_scale = {} not in [0, 1]",
            cfg.reward_scale
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actions: Vec<Vec<ActionModel>> = (0..cfg.n_states)
        .map(|_| {
            (0..cfg.n_actions)
                .map(|_| {
                    let mut row: Vec<f64> =
                        (0..cfg.n_states).map(|_| rng.random::<f64>()).collect();
                    let total: f64 = row.iter().sum();
                    for p in &mut row {
                        *p /= total;
                    }
                    // Renormalize the largest entry so the row sums to one
                    // within the validation tolerance.
                    let residual = 1.0 - row.iter().sum::<f64>();
                    let argmax = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| i)
                        .unwrap_or(0);
                    row[argmax] += residual;
                    let reward =
                        RewardDist::point(rng.random_range(-cfg.reward_scale..=cfg.reward_scale));
                    ActionModel {
                        transition: row,
                        reward,
                    }
                })
                .collect()
        })
        .collect();
    let mdp = FiniteMdp {
        gamma: cfg.gamma,
        actions,
    };
    let violations = mdp.validate();
    if !violations.is_empty() {
        return Err(OpeError::invalid(format!(
            "generated instance invalid: {}",
            violations[0]
        )));
    }
    let policy = Policy::uniform(&mdp);
    let features = FeatureSystem::one_hot(&mdp);
    let exact = exact_values(&mdp, &policy)?;
    let theta = LinearParam::from_q_table(&exact);
    let mu = StateDistribution::uniform_pairs(&mdp);
    Ok(TabularInstance {
        mdp,
        policy,
        features,
        theta,
        mu,
        exact,
        target_state: 0,
    })
}

/// The single-state self-loop oracle: one action, point-mass reward, feature
/// identically 1. Its exact value is `reward / (1 - gamma)` and the solver
/// iterates `theta_{t+1} = reward + gamma theta_t` when run without ridge.
pub fn scalar_instance(gamma: f64, reward: f64) -> Result<TabularInstance> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(OpeError::invalid(format!(
            "gamma = {gamma} not strictly inside (0, 1)"
        )));
    }
    if !(-1.0..=1.0).contains(&reward) {
        return Err(OpeError::invalid(format!(
            "reward = {reward} outside [-1, 1]"
        )));
    }
    let mdp = FiniteMdp {
        gamma,
        actions: vec![vec![ActionModel {
            transition: vec![1.0],
            reward: RewardDist::point(reward),
        }]],
    };
    let policy = Policy::uniform(&mdp);
    let features = FeatureSystem::one_hot(&mdp);
    let exact = exact_values(&mdp, &policy)?;
    let theta = LinearParam::from_q_table(&exact);
    let mu = StateDistribution::uniform_pairs(&mdp);
    Ok(TabularInstance {
        mdp,
        policy,
        features,
        theta,
        mu,
        exact,
        target_state: 0,
    })
}
