//! The three-group lower-bound construction: a single-action MDP whose value
//! function is linearly realizable, whose feature covariance matrix is
//! `(q/d) I`, and whose target-state value switches between `0` and
//! `2 * eps` depending on a reward parameter that is information-theoretically
//! hard to identify from samples.

use nalgebra::{DMatrix, DVector};

use crate::error::OpeError;
use crate::features::{FeatureSystem, LinearParam, StateDistribution};
use crate::mdp::{ActionModel, FiniteMdp, Policy, RewardDist, ValueTable};
use crate::Result;

/// Parameters of the construction plus every derived analytic quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct HardInstanceSpec {
    pub gamma: f64,
    /// States per level in groups A and B.
    pub m: usize,
    /// Number of levels; the feature dimension is `m * levels`.
    pub levels: usize,
    /// Smallest eigenvalue of the feature covariance matrix times `d`.
    pub q: f64,
    pub eps: f64,
    /// Selects the zero hypothesis (`r0 = 0`) instead of the alternative.
    pub r0_is_zero: bool,
    /// When the spec was derived from `b`, the original base.
    pub b: Option<f64>,
}

impl HardInstanceSpec {
    /// Builds a spec from explicit `(m, levels)`.
    pub fn from_counts(
        gamma: f64,
        m: usize,
        levels: usize,
        q: f64,
        eps: f64,
        r0_is_zero: bool,
    ) -> Result<Self> {
        let spec = HardInstanceSpec {
            gamma,
            m,
            levels,
            q,
            eps,
            r0_is_zero,
            b: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a spec from a base `b > 1` and a dimension `d`:
    /// `m = ceil(b / gamma^2)` and `levels = d / m`, requiring `m | d`.
    pub fn from_base(
        gamma: f64,
        b: f64,
        d: usize,
        q: f64,
        eps: f64,
        r0_is_zero: bool,
    ) -> Result<Self> {
        if b <= 1.0 || !b.is_finite() {
            return Err(OpeError::invalid(format!("b = {b} must satisfy b > 1")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(OpeError::invalid(format!(
                "gamma = {gamma} not strictly inside (0, 1)"
            )));
        }
        let m = (b / (gamma * gamma)).ceil() as usize;
        if d == 0 || !d.is_multiple_of(m) {
            return Err(OpeError::invalid(format!(
                "d = {d} is not a positive multiple of ceil(b/gamma^2) = {m}"
            )));
        }
        let spec = HardInstanceSpec {
            gamma,
            m,
            levels: d / m,
            q,
            eps,
            r0_is_zero,
            b: Some(b),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(OpeError::invalid(format!(
                "gamma = {} not strictly inside (0, 1)",
                self.gamma
            )));
        }
        let g2 = self.gamma * self.gamma;
        if (self.m as f64) < 1.0 / g2 {
            return Err(OpeError::invalid(format!(
                "m = {} violates m >= 1/gamma^2 = {}",
                self.m,
                1.0 / g2
            )));
        }
        if self.levels == 0 {
            return Err(OpeError::invalid("levels must be positive"));
        }
        if !(self.q >= g2 && self.q <= 1.0) {
            return Err(OpeError::invalid(format!(
                "q = {} violates q in [gamma^2, 1] = [{g2}, 1]",
                self.q
            )));
        }
        if !(self.eps > 0.0 && self.eps <= 0.5) {
            return Err(OpeError::invalid(format!(
                "eps = {} violates eps in (0, 1/2]",
                self.eps
            )));
        }
        Ok(())
    }

    /// Feature dimension `d = m * levels`.
    pub fn d(&self) -> usize {
        self.m * self.levels
    }

    /// `d / ceil(b / gamma^2)` when the spec was derived from a base.
    pub fn d_b_gamma(&self) -> Option<usize> {
        self.b.map(|_| self.levels)
    }

    /// Mixture weight of group B in the sampling distribution,
    /// `p = (q - gamma^2) / (1 - gamma^2)`.
    pub fn p(&self) -> f64 {
        let g2 = self.gamma * self.gamma;
        (self.q - g2) / (1.0 - g2)
    }

    /// The reward parameter: `0` or `2 eps / (gamma^(L-1) m^(L/2))`.
    pub fn r0(&self) -> f64 {
        if self.r0_is_zero {
            0.0
        } else {
            2.0 * self.eps
                / (self.gamma.powi(self.levels as i32 - 1)
                    * (self.m as f64).powf(self.levels as f64 / 2.0))
        }
    }

    /// Value of the target state, `0` or `2 eps` (the analytic cancellation
    /// is exact, so this is stored rather than recomputed).
    pub fn target_value(&self) -> f64 {
        if self.r0_is_zero {
            0.0
        } else {
            2.0 * self.eps
        }
    }

    /// `P(+1)` of the informative level-0 reward, `(1 + r0 (1 - gamma)) / 2`.
    pub fn bernoulli_p1(&self) -> f64 {
        (1.0 + self.r0() * (1.0 - self.gamma)) / 2.0
    }

    /// Probability mass of the informative states under the sampling
    /// distribution, `p / levels`.
    pub fn informative_mass(&self) -> f64 {
        self.p() / self.levels as f64
    }

    /// Total number of states, `(2m + 1) L`.
    pub fn n_states(&self) -> usize {
        (2 * self.m + 1) * self.levels
    }
}

/// Which of the three groups a state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    A,
    B,
    C,
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Group::A => write!(f, "A"),
            Group::B => write!(f, "B"),
            Group::C => write!(f, "C"),
        }
    }
}

/// `(group, level, index)` coordinates of a state. Group C states carry
/// index 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLabel {
    pub group: Group,
    pub level: usize,
    pub index: usize,
}

/// The fully constructed instance: MDP, features, linear parameter, sampling
/// distribution, state labels, and the evaluation target.
#[derive(Debug, Clone)]
pub struct HardInstanceBundle {
    pub spec: HardInstanceSpec,
    pub mdp: FiniteMdp,
    /// The trivial single-action policy.
    pub policy: Policy,
    pub features: FeatureSystem,
    pub theta: LinearParam,
    pub mu: StateDistribution,
    pub labels: Vec<StateLabel>,
    /// The state whose value the experiments evaluate.
    pub target_state: usize,
}

impl HardInstanceBundle {
    /// State id of `s'_{l,i}` in group A.
    pub fn group_a_state(&self, level: usize, index: usize) -> usize {
        level * self.spec.m + index
    }

    /// State id of `s_{l,i}` in group B.
    pub fn group_b_state(&self, level: usize, index: usize) -> usize {
        self.spec.d() + level * self.spec.m + index
    }

    /// State id of `s_{l,0}` in group C.
    pub fn group_c_state(&self, level: usize) -> usize {
        2 * self.spec.d() + level
    }

    /// Deterministic successor of a state (all transitions are point masses).
    pub fn successor(&self, s: usize) -> usize {
        self.mdp.actions[s][0]
            .transition
            .iter()
            .position(|&p| p > 0.0)
            .expect("deterministic row")
    }
}

/// Constructs the instance for a validated spec.
pub fn build(spec: &HardInstanceSpec) -> Result<HardInstanceBundle> {
    spec.validate()?;
    let m = spec.m;
    let levels = spec.levels;
    let d = spec.d();
    let n = spec.n_states();
    let r0 = spec.r0();
    let root_m = (m as f64).sqrt();
    let gamma = spec.gamma;

    let mut actions: Vec<Vec<ActionModel>> = Vec::with_capacity(n);
    let mut phi: Vec<Vec<DVector<f64>>> = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut mu_weight = vec![0.0; n];

    let b_state = |l: usize, i: usize| d + l * m + i;
    let c_state = |l: usize| 2 * d + l;
    let point_row = |target: usize| {
        let mut row = vec![0.0; n];
        row[target] = 1.0;
        row
    };
    let basis = |l: usize, i: usize, scale: f64| {
        let mut v = DVector::zeros(d);
        v[l * m + i] = scale;
        v
    };

    // Group A: s'_{l,i} -> s_{l,i}, zero reward, feature gamma * e_{l,i}.
    for l in 0..levels {
        for i in 0..m {
            actions.push(vec![ActionModel {
                transition: point_row(b_state(l, i)),
                reward: RewardDist::point(0.0),
            }]);
            phi.push(vec![basis(l, i, gamma)]);
            labels.push(StateLabel {
                group: Group::A,
                level: l,
                index: i,
            });
        }
    }
    // Group B: level 0 self-loops with the +/-1 reward; level l >= 1 moves to
    // s_{l-1,0} with zero reward. Feature e_{l,i}.
    for l in 0..levels {
        for i in 0..m {
            let (transition, reward) = if l == 0 {
                (
                    point_row(b_state(0, i)),
                    RewardDist::bernoulli_pm1(spec.bernoulli_p1()),
                )
            } else {
                (point_row(c_state(l - 1)), RewardDist::point(0.0))
            };
            actions.push(vec![ActionModel { transition, reward }]);
            phi.push(vec![basis(l, i, 1.0)]);
            labels.push(StateLabel {
                group: Group::B,
                level: l,
                index: i,
            });
        }
    }
    // Group C: level 0 self-loops with reward r0 sqrt(m) (1 - gamma);
    // level l >= 1 moves to s_{l-1,0} with reward r0 (sqrt(m) gamma)^l
    // (sqrt(m) - 1). Feature (1/sqrt(m)) sum_i e_{l,i}.
    for l in 0..levels {
        let (transition, reward_value) = if l == 0 {
            (point_row(c_state(0)), r0 * root_m * (1.0 - gamma))
        } else {
            (
                point_row(c_state(l - 1)),
                r0 * (root_m * gamma).powi(l as i32) * (root_m - 1.0),
            )
        };
        actions.push(vec![ActionModel {
            transition,
            reward: RewardDist::point(reward_value),
        }]);
        let mut v = DVector::zeros(d);
        for i in 0..m {
            v[l * m + i] = 1.0 / root_m;
        }
        phi.push(vec![v]);
        labels.push(StateLabel {
            group: Group::C,
            level: l,
            index: 0,
        });
    }

    // mu = p Unif(G_B) + (1 - p) Unif(G_A); group C carries no mass.
    let p = spec.p();
    let group_size = (m * levels) as f64;
    for l in 0..levels {
        for i in 0..m {
            mu_weight[l * m + i] = (1.0 - p) / group_size;
            mu_weight[b_state(l, i)] = p / group_size;
        }
    }

    let mut theta = DVector::zeros(d);
    for l in 0..levels {
        let value = r0 * (root_m * gamma).powi(l as i32);
        for i in 0..m {
            theta[l * m + i] = value;
        }
    }

    let mdp = FiniteMdp { gamma, actions };
    let violations = mdp.validate();
    if !violations.is_empty() {
        return Err(OpeError::invalid(format!(
            "constructed instance invalid: {}",
            violations[0]
        )));
    }
    let policy = Policy::uniform(&mdp);
    let features = FeatureSystem::new(d, phi)?;
    let mu = StateDistribution::new(mu_weight.into_iter().map(|w| vec![w]).collect())?;
    let target_state = c_state(levels - 1);

    Ok(HardInstanceBundle {
        spec: spec.clone(),
        mdp,
        policy,
        features,
        theta: LinearParam::new(theta)?,
        mu,
        labels,
        target_state,
    })
}

/// Closed-form value table. Since every state has one action, `q == v`.
pub fn analytic_values(spec: &HardInstanceSpec) -> ValueTable {
    let m = spec.m;
    let levels = spec.levels;
    let r0 = spec.r0();
    let root_m = (m as f64).sqrt();
    let mut v = vec![0.0; spec.n_states()];
    for l in 0..levels {
        let level_value = r0 * (root_m * spec.gamma).powi(l as i32);
        for i in 0..m {
            v[l * m + i] = spec.gamma * level_value;
            v[spec.d() + l * m + i] = level_value;
        }
        v[2 * spec.d() + l] = level_value * root_m;
    }
    let q = v.iter().map(|&x| vec![x]).collect();
    ValueTable { v, q }
}

/// Exact covariance matrices of the construction in closed form.
#[derive(Debug, Clone)]
pub struct AnalyticCovariances {
    /// `Lambda = (q/d) I`.
    pub lambda: DMatrix<f64>,
    /// Next-state covariance, block diagonal over levels.
    pub lambda_bar: DMatrix<f64>,
    /// Target-state second moment, `(1/m)` on the top-level block.
    pub lambda_bar0: DMatrix<f64>,
    /// Top eigenvalue of the level-0 block of `lambda_bar`:
    /// `(1 + p m) / d` when there are at least two levels, else `1/d`.
    pub level0_block_top: f64,
}

pub fn analytic_covariances(spec: &HardInstanceSpec) -> AnalyticCovariances {
    let d = spec.d();
    let m = spec.m;
    let levels = spec.levels;
    let p = spec.p();
    let df = d as f64;

    let lambda = DMatrix::<f64>::identity(d, d) * (spec.q / df);

    // Level blocks of the next-state covariance:
    // level 0 receives the self-loop mass (1/d) I_m plus, when a level above
    // exists, the rank-one feed (p/d) 1_{m x m} from level-1 states;
    // middle levels receive ((1-p)/d) I_m + (p/d) 1_{m x m};
    // the top level receives only ((1-p)/d) I_m.
    let mut lambda_bar = DMatrix::<f64>::zeros(d, d);
    for l in 0..levels {
        let (diag, ones) = if l == 0 {
            (1.0 / df, if levels >= 2 { p / df } else { 0.0 })
        } else if l < levels - 1 {
            ((1.0 - p) / df, p / df)
        } else {
            ((1.0 - p) / df, 0.0)
        };
        for i in 0..m {
            for j in 0..m {
                let mut value = if i == j { diag } else { 0.0 };
                value += ones;
                lambda_bar[(l * m + i, l * m + j)] = value;
            }
        }
    }

    let mut lambda_bar0 = DMatrix::<f64>::zeros(d, d);
    let top = levels - 1;
    for i in 0..m {
        for j in 0..m {
            lambda_bar0[(top * m + i, top * m + j)] = 1.0 / m as f64;
        }
    }

    let level0_block_top = if levels >= 2 {
        (1.0 + p * m as f64) / df
    } else {
        1.0 / df
    };

    AnalyticCovariances {
        lambda,
        lambda_bar,
        lambda_bar0,
        level0_block_top,
    }
}
