//! Feature maps, policy-averaged features, linear-realizability checks, and
//! exact feature covariance matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::OpeError;
use crate::mdp::{exact_values, sample_index, FiniteMdp, Policy, ValueTable};
use crate::Result;

/// Slack allowed on the unit-norm feature bound.
pub const FEATURE_NORM_TOL: f64 = 1e-12;

/// Absolute tolerance for positive-semidefiniteness assertions.
pub const PSD_TOL: f64 = 1e-12;

/// Dense feature table indexed by state-action pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSystem {
    pub dim: usize,
    /// `phi[s][a]` is a vector of length `dim`.
    pub phi: Vec<Vec<DVector<f64>>>,
}

impl FeatureSystem {
    pub fn new(dim: usize, phi: Vec<Vec<DVector<f64>>>) -> Result<Self> {
        let fs = FeatureSystem { dim, phi };
        fs.check_norms()?;
        Ok(fs)
    }

    /// One-hot tabular features `phi(s, a) = e_{(s,a)}` matching the action
    /// layout of `mdp`; always linearly realizable.
    pub fn one_hot(mdp: &FiniteMdp) -> Self {
        let dim = mdp.n_pairs();
        let mut offset = 0;
        let phi = mdp
            .actions
            .iter()
            .map(|acts| {
                acts.iter()
                    .map(|_| {
                        let mut e = DVector::zeros(dim);
                        e[offset] = 1.0;
                        offset += 1;
                        e
                    })
                    .collect()
            })
            .collect();
        FeatureSystem { dim, phi }
    }

    fn check_norms(&self) -> Result<()> {
        for (s, acts) in self.phi.iter().enumerate() {
            for (a, v) in acts.iter().enumerate() {
                if v.len() != self.dim {
                    return Err(OpeError::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                let norm = v.norm();
                if norm > 1.0 + FEATURE_NORM_TOL {
                    return Err(OpeError::invalid(format!(
                        "feature norm {norm} at state {s} action {a} exceeds 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn max_norm(&self) -> f64 {
        self.phi
            .iter()
            .flat_map(|acts| acts.iter().map(|v| v.norm()))
            .fold(0.0, f64::max)
    }

    pub fn get(&self, s: usize, a: usize) -> Result<&DVector<f64>> {
        self.phi
            .get(s)
            .and_then(|acts| acts.get(a))
            .ok_or_else(|| OpeError::IndexOutOfRange(format!("state {s} action {a}")))
    }
}

/// Linear parameter of a policy's q-function.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParam {
    pub theta: DVector<f64>,
}

impl LinearParam {
    pub fn new(theta: DVector<f64>) -> Result<Self> {
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(OpeError::invalid("parameter has non-finite entries"));
        }
        Ok(LinearParam { theta })
    }

    /// Flattened exact q-table; realizes one-hot features by construction.
    pub fn from_q_table(table: &ValueTable) -> Self {
        let theta: Vec<f64> = table.q.iter().flatten().copied().collect();
        LinearParam {
            theta: DVector::from_vec(theta),
        }
    }

    pub fn norm(&self) -> f64 {
        self.theta.norm()
    }
}

/// Sampling distribution over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution {
    /// `weight[s][a]`; entries sum to one.
    pub weight: Vec<Vec<f64>>,
}

impl StateDistribution {
    pub fn new(weight: Vec<Vec<f64>>) -> Result<Self> {
        let total: f64 = weight.iter().flatten().sum();
        if (total - 1.0).abs() > crate::mdp::PROB_SUM_TOL {
            return Err(OpeError::invalid(format!(
                "distribution sums to {total}, expected 1"
            )));
        }
        if weight.iter().flatten().any(|&p| p < 0.0) {
            return Err(OpeError::invalid("negative probability in distribution"));
        }
        Ok(StateDistribution { weight })
    }

    /// Uniform over every state-action pair of `mdp`.
    pub fn uniform_pairs(mdp: &FiniteMdp) -> Self {
        let total = mdp.n_pairs() as f64;
        StateDistribution {
            weight: mdp
                .actions
                .iter()
                .map(|acts| vec![1.0 / total; acts.len()])
                .collect(),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let flat: Vec<f64> = self.weight.iter().flatten().copied().collect();
        let k = sample_index(&flat, rng);
        self.unflatten(k)
    }

    fn unflatten(&self, mut k: usize) -> (usize, usize) {
        for (s, acts) in self.weight.iter().enumerate() {
            if k < acts.len() {
                return (s, k);
            }
            k -= acts.len();
        }
        let s = self.weight.len() - 1;
        (s, self.weight[s].len() - 1)
    }

    /// Total-variation distance to another distribution on the same layout.
    pub fn tv_distance(&self, other: &StateDistribution) -> f64 {
        0.5 * self
            .weight
            .iter()
            .flatten()
            .zip(other.weight.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Inner product `phi(s, a) . theta`.
pub fn q_linear(fs: &FeatureSystem, theta: &LinearParam, s: usize, a: usize) -> Result<f64> {
    let phi = fs.get(s, a)?;
    if theta.theta.len() != fs.dim {
        return Err(OpeError::DimensionMismatch {
            expected: fs.dim,
            actual: theta.theta.len(),
        });
    }
    Ok(phi.dot(&theta.theta))
}

/// Policy-averaged feature `sum_a pi(a|s) phi(s, a)`.
pub fn tilde_phi(fs: &FeatureSystem, policy: &Policy, s: usize) -> Result<DVector<f64>> {
    let acts = fs
        .phi
        .get(s)
        .ok_or_else(|| OpeError::IndexOutOfRange(format!("state {s}")))?;
    let mut out = DVector::zeros(fs.dim);
    for (a, phi) in acts.iter().enumerate() {
        out.axpy(policy.action_dist[s][a], phi, 1.0);
    }
    Ok(out)
}

/// Max over state-action pairs of `|phi . theta - Q(s, a)|` against the exact
/// Bellman solve. The caller compares the residual to its own tolerance.
pub fn check_realizability(
    mdp: &FiniteMdp,
    policy: &Policy,
    fs: &FeatureSystem,
    theta: &LinearParam,
) -> Result<f64> {
    let table = exact_values(mdp, policy)?;
    let mut worst: f64 = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions(s) {
            let lin = q_linear(fs, theta, s, a)?;
            worst = worst.max((lin - table.q[s][a]).abs());
        }
    }
    Ok(worst)
}

/// A symmetric covariance matrix together with its spectral summary.
#[derive(Debug, Clone)]
pub struct CovarianceSummary {
    pub matrix: DMatrix<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub trace: f64,
}

impl CovarianceSummary {
    pub fn from_matrix(matrix: DMatrix<f64>) -> Self {
        let eig = matrix.clone().symmetric_eigen();
        let lambda_min = eig.eigenvalues.min();
        let lambda_max = eig.eigenvalues.max();
        let trace = matrix.trace();
        CovarianceSummary {
            matrix,
            lambda_min,
            lambda_max,
            trace,
        }
    }
}

/// Exact feature covariance `sum mu(s,a) phi phi^T`.
pub fn exact_covariance(fs: &FeatureSystem, mu: &StateDistribution) -> Result<CovarianceSummary> {
    if mu.weight.len() != fs.phi.len() {
        return Err(OpeError::DimensionMismatch {
            expected: fs.phi.len(),
            actual: mu.weight.len(),
        });
    }
    let mut m = DMatrix::<f64>::zeros(fs.dim, fs.dim);
    for (s, acts) in mu.weight.iter().enumerate() {
        for (a, &w) in acts.iter().enumerate() {
            if w > 0.0 {
                let phi = fs.get(s, a)?;
                m.syger(w, phi, phi, 1.0);
            }
        }
    }
    m.fill_upper_triangle_with_lower_triangle();
    Ok(CovarianceSummary::from_matrix(m))
}

/// Exact next-state covariance
/// `sum mu(s,a) sum_sbar P(sbar|s,a) tilde_phi(sbar) tilde_phi(sbar)^T`.
pub fn exact_next_covariance(
    mdp: &FiniteMdp,
    fs: &FeatureSystem,
    policy: &Policy,
    mu: &StateDistribution,
) -> Result<CovarianceSummary> {
    let tilde: Vec<DVector<f64>> = (0..mdp.n_states())
        .map(|s| tilde_phi(fs, policy, s))
        .collect::<Result<_>>()?;
    // Aggregate the visit mass of each successor first: the outer-product sum
    // then needs only n_states terms.
    let mut visit = vec![0.0; mdp.n_states()];
    for (s, acts) in mu.weight.iter().enumerate() {
        for (a, &w) in acts.iter().enumerate() {
            if w > 0.0 {
                for (sn, &p) in mdp.actions[s][a].transition.iter().enumerate() {
                    visit[sn] += w * p;
                }
            }
        }
    }
    let mut m = DMatrix::<f64>::zeros(fs.dim, fs.dim);
    for (sn, &w) in visit.iter().enumerate() {
        if w > 0.0 {
            m.syger(w, &tilde[sn], &tilde[sn], 1.0);
        }
    }
    m.fill_upper_triangle_with_lower_triangle();
    Ok(CovarianceSummary::from_matrix(m))
}

/// Rank-one target-state second moment `tilde_phi(s0) tilde_phi(s0)^T`.
pub fn target_covariance(
    fs: &FeatureSystem,
    policy: &Policy,
    target_state: usize,
) -> Result<DMatrix<f64>> {
    let tp = tilde_phi(fs, policy, target_state)?;
    Ok(&tp * tp.transpose())
}

/// Rescales features by `1 / max norm` and the parameter by `max norm`, the
/// explicit normalization transformation. Identity when norms already obey
/// the unit bound.
pub fn normalized(fs: &FeatureSystem, theta: &LinearParam) -> (FeatureSystem, LinearParam) {
    let max_norm = fs.max_norm();
    if max_norm <= 1.0 + FEATURE_NORM_TOL {
        return (fs.clone(), theta.clone());
    }
    let phi = fs
        .phi
        .iter()
        .map(|acts| acts.iter().map(|v| v / max_norm).collect())
        .collect();
    (
        FeatureSystem { dim: fs.dim, phi },
        LinearParam {
            theta: &theta.theta * max_norm,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hard_instance::{build, HardInstanceSpec};
    use crate::mdp::{ActionModel, RewardDist};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn two_pair_system() -> (FeatureSystem, StateDistribution) {
        let fs = FeatureSystem {
            dim: 2,
            phi: vec![vec![
                DVector::from_vec(vec![1.0, 0.0]),
                DVector::from_vec(vec![0.0, 1.0]),
            ]],
        };
        let mu = StateDistribution::new(vec![vec![0.5, 0.5]]).unwrap();
        (fs, mu)
    }

    #[test]
    fn q_linear_zero_theta() {
        let (fs, _) = two_pair_system();
        let theta = LinearParam::new(DVector::zeros(2)).unwrap();
        assert_eq!(q_linear(&fs, &theta, 0, 0).unwrap(), 0.0);
        assert_eq!(q_linear(&fs, &theta, 0, 1).unwrap(), 0.0);
    }

    #[test]
    fn q_linear_rejects_dimension_mismatch() {
        let (fs, _) = two_pair_system();
        let theta = LinearParam::new(DVector::zeros(3)).unwrap();
        assert!(q_linear(&fs, &theta, 0, 0).is_err());
    }

    #[test]
    fn hard_instance_group_b_q_values() {
        let spec = HardInstanceSpec::from_counts(0.9, 2, 2, 1.0, 0.1, false).unwrap();
        let bundle = build(&spec).unwrap();
        let m = spec.m as f64;
        for l in 0..spec.levels {
            for i in 0..spec.m {
                let s = bundle.group_b_state(l, i);
                let got = q_linear(&bundle.features, &bundle.theta, s, 0).unwrap();
                let expected = spec.r0() * (m.sqrt() * spec.gamma).powi(l as i32);
                assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_with_q_table_theta_is_exact() {
        let spec = HardInstanceSpec::from_counts(0.5, 4, 2, 0.7, 0.1, false).unwrap();
        let bundle = build(&spec).unwrap();
        let fs = FeatureSystem::one_hot(&bundle.mdp);
        let table = exact_values(&bundle.mdp, &bundle.policy).unwrap();
        let theta = LinearParam::from_q_table(&table);
        let res = check_realizability(&bundle.mdp, &bundle.policy, &fs, &theta).unwrap();
        assert!(res <= 1e-10, "residual {res}");
    }

    #[test]
    fn tilde_phi_single_action_is_phi() {
        let spec = HardInstanceSpec::from_counts(0.9, 2, 2, 1.0, 0.1, false).unwrap();
        let bundle = build(&spec).unwrap();
        let s = bundle.group_b_state(1, 0);
        let tp = tilde_phi(&bundle.features, &bundle.policy, s).unwrap();
        assert_eq!(&tp, bundle.features.get(s, 0).unwrap());
    }

    #[test]
    fn tilde_phi_uniform_two_actions() {
        let mdp = FiniteMdp {
            gamma: 0.5,
            actions: vec![vec![
                ActionModel {
                    transition: vec![1.0],
                    reward: RewardDist::point(0.0),
                },
                ActionModel {
                    transition: vec![1.0],
                    reward: RewardDist::point(0.0),
                },
            ]],
        };
        let (fs, _) = two_pair_system();
        let policy = Policy::uniform(&mdp);
        let tp = tilde_phi(&fs, &policy, 0).unwrap();
        assert_eq!(tp, DVector::from_vec(vec![0.5, 0.5]));
    }

    #[test]
    fn tilde_phi_hard_instance_group_c() {
        let spec = HardInstanceSpec::from_counts(0.9, 2, 2, 1.0, 0.1, false).unwrap();
        let bundle = build(&spec).unwrap();
        let s = bundle.group_c_state(1);
        let tp = tilde_phi(&bundle.features, &bundle.policy, s).unwrap();
        let m = spec.m as f64;
        for i in 0..spec.m {
            assert_abs_diff_eq!(tp[spec.m + i], 1.0 / m.sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn realizability_on_hard_instances() {
        for r0_zero in [false, true] {
            let spec = HardInstanceSpec::from_counts(0.9, 2, 2, 1.0, 0.1, r0_zero).unwrap();
            let bundle = build(&spec).unwrap();
            let res =
                check_realizability(&bundle.mdp, &bundle.policy, &bundle.features, &bundle.theta)
                    .unwrap();
            assert!(res <= 1e-9, "residual {res}");
        }
    }

    #[test]
    fn perturbed_theta_breaks_realizability() {
        let spec = HardInstanceSpec::from_counts(0.9, 2, 2, 1.0, 0.1, false).unwrap();
        let bundle = build(&spec).unwrap();
        let coord = 0;
        let mut theta = bundle.theta.clone();
        theta.theta[coord] += 0.1;
        // Smallest nonzero magnitude of coordinate `coord` over all features.
        let min_entry = bundle
            .features
            .phi
            .iter()
            .flatten()
            .map(|v| v[coord].abs())
            .filter(|&x| x > 0.0)
            .fold(f64::INFINITY, f64::min);
        let res =
            check_realizability(&bundle.mdp, &bundle.policy, &bundle.features, &theta).unwrap();
        assert!(res >= 0.1 * min_entry - 1e-12, "residual {res}");
    }

    #[test]
    fn exact_covariance_two_pairs() {
        let (fs, mu) = two_pair_system();
        let cov = exact_covariance(&fs, &mu).unwrap();
        assert_abs_diff_eq!(cov.matrix[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(cov.matrix[(1, 1)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(cov.matrix[(0, 1)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cov.lambda_min, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn hard_instance_covariance_is_q_over_d_identity() {
        let spec = HardInstanceSpec::from_counts(0.9, 2, 2, 1.0, 0.1, false).unwrap();
        let bundle = build(&spec).unwrap();
        let cov = exact_covariance(&bundle.features, &bundle.mu).unwrap();
        let expected = spec.q / spec.d() as f64;
        for r in 0..spec.d() {
            for c in 0..spec.d() {
                let want = if r == c { expected } else { 0.0 };
                assert_abs_diff_eq!(cov.matrix[(r, c)], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn normalization_rescales_features_and_theta() {
        let fs = FeatureSystem {
            dim: 1,
            phi: vec![vec![DVector::from_vec(vec![2.0])]],
        };
        let theta = LinearParam::new(DVector::from_vec(vec![3.0])).unwrap();
        let (nfs, ntheta) = normalized(&fs, &theta);
        assert_abs_diff_eq!(nfs.phi[0][0][0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ntheta.theta[0], 6.0, epsilon = 1e-15);
        // Inner products are preserved.
        assert_abs_diff_eq!(q_linear(&nfs, &ntheta, 0, 0).unwrap(), 6.0, epsilon = 1e-12);
    }

    proptest! {
        // Any unit-ball feature system: trace(Lambda) <= 1, lambda_min <= 1/d,
        // matrix symmetric PSD.
        #[test]
        fn covariance_spectral_bounds(
            dim in 1usize..5,
            n_pairs in 1usize..6,
            raw in proptest::collection::vec(-1.0f64..1.0, 30),
            weights in proptest::collection::vec(0.01f64..1.0, 6),
        ) {
            let mut phi = Vec::new();
            for k in 0..n_pairs {
                let mut v = DVector::zeros(dim);
                for j in 0..dim {
                    v[j] = raw[(k * dim + j) % raw.len()];
                }
                let norm = v.norm();
                if norm > 1.0 {
                    v /= norm;
                }
                phi.push(v);
            }
            let total: f64 = weights[..n_pairs].iter().sum();
            let mu = StateDistribution::new(
                vec![weights[..n_pairs].iter().map(|w| w / total).collect()],
            ).unwrap();
            let fs = FeatureSystem { dim, phi: vec![phi] };
            let cov = exact_covariance(&fs, &mu).unwrap();
            prop_assert!(cov.trace <= 1.0 + 1e-12);
            prop_assert!(cov.lambda_min <= 1.0 / dim as f64 + 1e-12);
            prop_assert!(cov.lambda_min >= -PSD_TOL);
            for r in 0..dim {
                for c in 0..dim {
                    prop_assert!((cov.matrix[(r, c)] - cov.matrix[(c, r)]).abs() <= 1e-12);
                }
            }
        }
    }
}
