//! Finite-state MDP representation, simulation stepping, and an exact
//! policy-evaluation oracle used as ground truth by every other module.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::OpeError;
use crate::Result;

/// Tolerance for probability vectors summing to one.
pub const PROB_SUM_TOL: f64 = 1e-12;

/// Max-norm Bellman residual accepted from the exact solve.
pub const BELLMAN_RESIDUAL_TOL: f64 = 1e-10;

/// Truncation bias target for Monte-Carlo rollouts; the horizon is chosen so
/// that the discarded tail `gamma^H / (1 - gamma)` is below this value.
pub const MC_TRUNCATION_BIAS: f64 = 1e-6;

/// Finite discrete reward distribution with support in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardDist {
    /// `(value, probability)` pairs; probabilities sum to one.
    pub support: Vec<(f64, f64)>,
}

impl RewardDist {
    /// Point mass at `value`.
    pub fn point(value: f64) -> Self {
        RewardDist {
            support: vec![(value, 1.0)],
        }
    }

    /// Two-point distribution on `{+1, -1}` with `P(+1) = p_plus`.
    pub fn bernoulli_pm1(p_plus: f64) -> Self {
        RewardDist {
            support: vec![(1.0, p_plus), (-1.0, 1.0 - p_plus)],
        }
    }

    /// Expected value.
    pub fn mean(&self) -> f64 {
        self.support.iter().map(|(v, p)| v * p).sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.support.len() == 1 {
            return self.support[0].0;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(v, p) in &self.support {
            acc += p;
            if u < acc {
                return v;
            }
        }
        self.support.last().map(|&(v, _)| v).unwrap_or(0.0)
    }
}

/// One action of one state: a transition row over all states plus a reward
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionModel {
    /// Probability of each successor state; length equals `n_states`.
    pub transition: Vec<f64>,
    pub reward: RewardDist,
}

/// Dense tabular MDP. Immutable after construction; shareable across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    pub gamma: f64,
    /// `actions[s][a]` is the model of action `a` in state `s`; states may
    /// have different action counts.
    pub actions: Vec<Vec<ActionModel>>,
}

/// A named invariant violation found by [`FiniteMdp::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub state: Option<usize>,
    pub action: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match (self.state, self.action) {
            (Some(s), Some(a)) => write!(f, "state {s} action {a}: {}", self.message),
            (Some(s), None) => write!(f, "state {s}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

impl FiniteMdp {
    pub fn n_states(&self) -> usize {
        self.actions.len()
    }

    pub fn n_actions(&self, s: usize) -> usize {
        self.actions[s].len()
    }

    /// Total number of state-action pairs.
    pub fn n_pairs(&self) -> usize {
        self.actions.iter().map(|a| a.len()).sum()
    }

    fn check_ids(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.n_states() {
            return Err(OpeError::IndexOutOfRange(format!(
                "state {s} out of range (n_states = {})",
                self.n_states()
            )));
        }
        if a >= self.n_actions(s) {
            return Err(OpeError::IndexOutOfRange(format!(
                "action {a} out of range for state {s} (n_actions = {})",
                self.n_actions(s)
            )));
        }
        Ok(())
    }

    /// Checks every structural invariant and returns the violations found.
    /// An empty list means the MDP is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.n_states();
        if n == 0 {
            out.push(Violation {
                state: None,
                action: None,
                message: "MDP has no states".into(),
            });
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            out.push(Violation {
                state: None,
                action: None,
                message: format!("gamma = {} not strictly inside (0, 1)", self.gamma),
            });
        }
        for (s, acts) in self.actions.iter().enumerate() {
            if acts.is_empty() {
                out.push(Violation {
                    state: Some(s),
                    action: None,
                    message: "state has no actions".into(),
                });
            }
            for (a, model) in acts.iter().enumerate() {
                if model.transition.len() != n {
                    out.push(Violation {
                        state: Some(s),
                        action: Some(a),
                        message: format!(
                            "transition row has length {} (expected {n})",
                            model.transition.len()
                        ),
                    });
                    continue;
                }
                let sum: f64 = model.transition.iter().sum();
                if (sum - 1.0).abs() > PROB_SUM_TOL {
                    out.push(Violation {
                        state: Some(s),
                        action: Some(a),
                        message: format!("transition row sums to {sum}, expected 1"),
                    });
                }
                if let Some(&bad) = model.transition.iter().find(|&&p| p < 0.0) {
                    out.push(Violation {
                        state: Some(s),
                        action: Some(a),
                        message: format!("negative transition probability {bad}"),
                    });
                }
                let rsum: f64 = model.reward.support.iter().map(|(_, p)| p).sum();
                if (rsum - 1.0).abs() > PROB_SUM_TOL {
                    out.push(Violation {
                        state: Some(s),
                        action: Some(a),
                        message: format!("reward probabilities sum to {rsum}, expected 1"),
                    });
                }
                for &(v, p) in &model.reward.support {
                    if !(-1.0..=1.0).contains(&v) {
                        out.push(Violation {
                            state: Some(s),
                            action: Some(a),
                            message: format!("reward outside [-1,1]: {v}"),
                        });
                    }
                    if p < 0.0 {
                        out.push(Violation {
                            state: Some(s),
                            action: Some(a),
                            message: format!("negative reward probability {p}"),
                        });
                    }
                }
            }
        }
        out
    }

    /// Draws one transition: `r ~ R(. | s, a)` then `s_next ~ P(. | s, a)`.
    /// Deterministic given the rng state.
    pub fn step<R: Rng>(&self, s: usize, a: usize, rng: &mut R) -> Result<(f64, usize)> {
        self.check_ids(s, a)?;
        let model = &self.actions[s][a];
        let r = model.reward.sample(rng);
        let s_next = sample_index(&model.transition, rng);
        Ok((r, s_next))
    }
}

/// Draws an index from a probability vector. Point-mass rows short-circuit so
/// the rng is not consumed for degenerate distributions.
pub fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    if let Some(k) = point_mass_index(probs) {
        return k;
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn point_mass_index(probs: &[f64]) -> Option<usize> {
    let mut found = None;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            if found.is_some() {
                return None;
            }
            found = Some(k);
        }
    }
    found
}

/// Stochastic policy: a probability vector over the actions of each state.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub action_dist: Vec<Vec<f64>>,
}

impl Policy {
    /// Uniform policy matching the action layout of `mdp`.
    pub fn uniform(mdp: &FiniteMdp) -> Self {
        Policy {
            action_dist: mdp
                .actions
                .iter()
                .map(|acts| vec![1.0 / acts.len() as f64; acts.len()])
                .collect(),
        }
    }

    pub fn validate(&self, mdp: &FiniteMdp) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.action_dist.len() != mdp.n_states() {
            out.push(Violation {
                state: None,
                action: None,
                message: format!(
                    "policy covers {} states, MDP has {}",
                    self.action_dist.len(),
                    mdp.n_states()
                ),
            });
            return out;
        }
        for (s, dist) in self.action_dist.iter().enumerate() {
            if dist.len() != mdp.n_actions(s) {
                out.push(Violation {
                    state: Some(s),
                    action: None,
                    message: format!(
                        "policy lists {} actions, state has {}",
                        dist.len(),
                        mdp.n_actions(s)
                    ),
                });
                continue;
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                out.push(Violation {
                    state: Some(s),
                    action: None,
                    message: format!("action distribution sums to {sum}, expected 1"),
                });
            }
            if let Some(&bad) = dist.iter().find(|&&p| p < 0.0) {
                out.push(Violation {
                    state: Some(s),
                    action: None,
                    message: format!("negative action probability {bad}"),
                });
            }
        }
        out
    }

    pub fn sample_action<R: Rng>(&self, s: usize, rng: &mut R) -> usize {
        sample_index(&self.action_dist[s], rng)
    }
}

/// Exact state values and state-action values for one policy.
#[derive(Debug, Clone)]
pub struct ValueTable {
    pub v: Vec<f64>,
    pub q: Vec<Vec<f64>>,
}

impl ValueTable {
    /// Largest Bellman residual `|v(s) - sum_a pi(a|s)(r(s,a) + g sum P v)|`.
    pub fn bellman_residual(&self, mdp: &FiniteMdp, policy: &Policy) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..mdp.n_states() {
            let mut rhs = 0.0;
            for (a, model) in mdp.actions[s].iter().enumerate() {
                let future: f64 = model
                    .transition
                    .iter()
                    .zip(&self.v)
                    .map(|(p, v)| p * v)
                    .sum();
                rhs += policy.action_dist[s][a] * (model.reward.mean() + mdp.gamma * future);
            }
            worst = worst.max((self.v[s] - rhs).abs());
        }
        worst
    }
}

/// Solves the Bellman linear system `(I - gamma P^pi) v = r^pi` with a dense
/// LU factorization, then fills in the q-table.
///
/// Fails if the residual check or the `|v| <= 1/(1-gamma)` bound is violated,
/// which signals an invalid MDP or policy upstream.
pub fn exact_values(mdp: &FiniteMdp, policy: &Policy) -> Result<ValueTable> {
    let n = mdp.n_states();
    if n == 0 {
        return Err(OpeError::invalid("MDP has no states"));
    }
    let mut p_pi = DMatrix::<f64>::zeros(n, n);
    let mut r_pi = DVector::<f64>::zeros(n);
    for s in 0..n {
        for (a, model) in mdp.actions[s].iter().enumerate() {
            let w = policy.action_dist[s][a];
            r_pi[s] += w * model.reward.mean();
            for (sn, &p) in model.transition.iter().enumerate() {
                p_pi[(s, sn)] += w * p;
            }
        }
    }
    let system = DMatrix::<f64>::identity(n, n) - mdp.gamma * &p_pi;
    let v = system
        .lu()
        .solve(&r_pi)
        .ok_or_else(|| OpeError::numerical("Bellman system is singular".to_string()))?;

    let q: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            mdp.actions[s]
                .iter()
                .map(|model| {
                    let future: f64 = model
                        .transition
                        .iter()
                        .enumerate()
                        .map(|(sn, &p)| p * v[sn])
                        .sum();
                    model.reward.mean() + mdp.gamma * future
                })
                .collect()
        })
        .collect();
    let v: Vec<f64> = (0..n)
        .map(|s| {
            policy.action_dist[s]
                .iter()
                .zip(&q[s])
                .map(|(w, qv)| w * qv)
                .sum()
        })
        .collect();

    let table = ValueTable { v, q };
    let residual = table.bellman_residual(mdp, policy);
    if residual > BELLMAN_RESIDUAL_TOL {
        return Err(OpeError::numerical(format!(
            "Bellman residual {residual:e} exceeds {BELLMAN_RESIDUAL_TOL:e}"
        )));
    }
    let bound = 1.0 / (1.0 - mdp.gamma) + 1e-9;
    if let Some(s) = table.v.iter().position(|v| v.abs() > bound) {
        return Err(OpeError::numerical(format!(
            "value at state {s} exceeds 1/(1-gamma)"
        )));
    }
    Ok(table)
}

/// Horizon at which the discarded tail of the discounted return is below
/// [`MC_TRUNCATION_BIAS`].
pub fn truncation_horizon(gamma: f64) -> usize {
    ((MC_TRUNCATION_BIAS * (1.0 - gamma)).ln() / gamma.ln()).ceil() as usize
}

/// Monte-Carlo estimate of the discounted return from `s`, truncated at
/// [`truncation_horizon`]. Returns `(mean, standard_error)`.
pub fn monte_carlo_value(
    mdp: &FiniteMdp,
    policy: &Policy,
    s: usize,
    rollouts: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    use rand::SeedableRng;
    use rayon::prelude::*;

    if s >= mdp.n_states() {
        return Err(OpeError::IndexOutOfRange(format!("state {s}")));
    }
    let horizon = truncation_horizon(mdp.gamma);
    let returns: Vec<f64> = (0..rollouts)
        .into_par_iter()
        .map(|k| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut state = s;
            let mut total = 0.0;
            let mut discount = 1.0;
            for _ in 0..horizon {
                let a = policy.sample_action(state, &mut rng);
                let (r, next) = mdp.step(state, a, &mut rng).expect("valid ids");
                total += discount * r;
                discount *= mdp.gamma;
                state = next;
            }
            total
        })
        .collect();
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
