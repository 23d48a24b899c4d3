//! Empirical side of the sample-complexity lower bound: the exact Bayes
//! error of the optimal distinguisher between the two reward hypotheses,
//! sample-size search, growth sweeps over the number of levels, and
//! Monte-Carlo trials of the likelihood-ratio test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::OpeError;
use crate::hard_instance::{build, Group, HardInstanceBundle, HardInstanceSpec};
use crate::sampler::sample_dataset;
use crate::Result;

/// The two hypotheses an evaluator must distinguish: identical constructions
/// that differ only in the reward parameter (zero vs. alternative).
#[derive(Debug, Clone, PartialEq)]
pub struct DistinguishTask {
    pub spec_null: HardInstanceSpec,
    pub spec_alt: HardInstanceSpec,
}

impl DistinguishTask {
    pub fn new(gamma: f64, m: usize, levels: usize, q: f64, eps: f64) -> Result<Self> {
        let spec_null = HardInstanceSpec::from_counts(gamma, m, levels, q, eps, true)?;
        let spec_alt = HardInstanceSpec::from_counts(gamma, m, levels, q, eps, false)?;
        Ok(DistinguishTask {
            spec_null,
            spec_alt,
        })
    }

    /// `P(+1)` of the informative reward under the alternative; always in
    /// `[1/2, 1]`.
    pub fn bernoulli_p1(&self) -> f64 {
        self.spec_alt.bernoulli_p1()
    }

    /// Probability mass of the informative states under the sampling
    /// distribution.
    pub fn informative_mass(&self) -> f64 {
        self.spec_alt.informative_mass()
    }

    /// Expected number of informative samples in a dataset of size `n`,
    /// rounded to the nearest integer.
    pub fn informative_count(&self, n: u64) -> u64 {
        (n as f64 * self.informative_mass()).round() as u64
    }
}

/// Exact equal-prior Bayes error of distinguishing `Bin(n0, 1/2)` from
/// `Bin(n0, p1)` observations, `(1/2) sum_k min(f0(k), f1(k))`.
///
/// The likelihood ratio is monotone in the count of `+1` outcomes, so the
/// minimum switches at a single threshold `k*` and the sum collapses to
/// binomial CDF terms, `(1/2)(F1(k*-1) + 1 - F0(k*-1))`, which stays exact
/// for counts up to 1e8.
pub fn exact_bayes_error(task: &DistinguishTask, n0: u64) -> f64 {
    let p1 = task.bernoulli_p1();
    if n0 == 0 || p1 <= 0.5 {
        return 0.5;
    }
    // Smallest k with f1(k) >= f0(k): k ln(p1/(1-p1)) >= n0 ln(0.5/(1-p1)).
    let slope = p1.ln() - (1.0 - p1).ln();
    let offset = (0.5f64).ln() - (1.0 - p1).ln();
    let kstar = ((n0 as f64) * offset / slope - 1e-12).ceil() as i64;
    let km1 = kstar - 1;
    let cdf = |p: f64, x: i64| -> f64 {
        if x < 0 {
            0.0
        } else if x as u64 >= n0 {
            1.0
        } else {
            Binomial::new(p, n0).expect("valid binomial").cdf(x as u64)
        }
    };
    0.5 * (cdf(p1, km1) + 1.0 - cdf(0.5, km1))
}

/// A sample-size requirement, possibly unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NStar {
    Finite(u64),
    /// No finite dataset reaches the target error (zero informative mass).
    Infinite,
}

impl NStar {
    pub fn finite(&self) -> Option<u64> {
        match self {
            NStar::Finite(n) => Some(*n),
            NStar::Infinite => None,
        }
    }
}

impl std::fmt::Display for NStar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NStar::Finite(n) => write!(f, "{n}"),
            NStar::Infinite => write!(f, "inf"),
        }
    }
}

/// Smallest total dataset size `N` whose expected informative count reaches
/// `exact_bayes_error <= target_error`, found by doubling then bisection.
pub fn required_n_for_error(task: &DistinguishTask, target_error: f64) -> Result<NStar> {
    if !(target_error > 0.0 && target_error <= 0.5) {
        return Err(OpeError::invalid(format!(
            "target_error = {target_error} not in (0, 0.5]"
        )));
    }
    let err_at = |n: u64| exact_bayes_error(task, task.informative_count(n));
    if err_at(0) <= target_error {
        return Ok(NStar::Finite(0));
    }
    if task.informative_mass() <= 0.0 {
        return Ok(NStar::Infinite);
    }
    let mut lo = 0u64;
    let mut hi = 1u64;
    while err_at(hi) > target_error {
        lo = hi;
        hi = hi.saturating_mul(2);
        if hi > 1 << 62 {
            return Err(OpeError::numerical(
                "sample-size search exceeded 2^62 without reaching the target",
            ));
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if err_at(mid) <= target_error {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(NStar::Finite(hi))
}

/// One row of a growth sweep over the level count.
#[derive(Debug, Clone, Copy)]
pub struct GrowthPoint {
    pub levels: usize,
    pub d: usize,
    pub n_star: NStar,
    /// `N*(L) / N*(previous L)`; absent on the first row or when either side
    /// is unbounded.
    pub ratio: Option<f64>,
    /// `(L / previous L) * m * gamma^2`, the predicted growth of the ratio.
    pub predicted_ratio: Option<f64>,
}

/// Sweeps the required sample size over a range of level counts.
pub fn growth_ratio_sweep(
    gamma: f64,
    m: usize,
    q: f64,
    eps: f64,
    target_error: f64,
    levels: &[usize],
) -> Result<Vec<GrowthPoint>> {
    if levels.is_empty() || levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OpeError::invalid("levels must be strictly increasing"));
    }
    let stars: Vec<(usize, NStar)> = levels
        .par_iter()
        .map(|&l| {
            let task = DistinguishTask::new(gamma, m, l, q, eps)?;
            Ok((l, required_n_for_error(&task, target_error)?))
        })
        .collect::<Result<_>>()?;
    let mg2 = m as f64 * gamma * gamma;
    let mut out = Vec::with_capacity(stars.len());
    for (idx, &(l, n_star)) in stars.iter().enumerate() {
        let (ratio, predicted_ratio) = if idx == 0 {
            (None, None)
        } else {
            let (prev_l, prev_star) = stars[idx - 1];
            let ratio = match (n_star, prev_star) {
                (NStar::Finite(a), NStar::Finite(b)) if b > 0 => Some(a as f64 / b as f64),
                _ => None,
            };
            (ratio, Some(l as f64 / prev_l as f64 * mg2))
        };
        out.push(GrowthPoint {
            levels: l,
            d: m * l,
            n_star,
            ratio,
            predicted_ratio,
        });
    }
    Ok(out)
}

/// Outcome of one Monte-Carlo distinguishing trial.
#[derive(Debug, Clone, Copy)]
pub struct TrialOutcome {
    pub truth_is_alt: bool,
    pub decided_alt: bool,
    pub correct: bool,
    /// The implied value estimate at the target state, `0` or `2 eps`.
    pub estimate: f64,
    /// Number of informative records observed.
    pub informative: u64,
}

fn run_trial(
    task: &DistinguishTask,
    null_bundle: &HardInstanceBundle,
    alt_bundle: &HardInstanceBundle,
    n: usize,
    seed: u64,
) -> Result<TrialOutcome> {
    // Auxiliary fair draw on a stream disjoint from the dataset's streams.
    let mut aux = ChaCha8Rng::seed_from_u64(seed);
    aux.set_stream(u64::MAX);
    let truth_is_alt: bool = aux.random();
    let bundle = if truth_is_alt {
        alt_bundle
    } else {
        null_bundle
    };

    let ds = sample_dataset(&bundle.mdp, &bundle.mu, n, seed)?;
    let mut informative = 0u64;
    let mut plus = 0u64;
    for rec in &ds.records {
        let label = bundle.labels[rec.state];
        if label.group == Group::B && label.level == 0 {
            informative += 1;
            if rec.reward > 0.0 {
                plus += 1;
            }
        }
    }
    let p1 = task.bernoulli_p1();
    let llr = plus as f64 * (p1 / 0.5).ln() + (informative - plus) as f64 * ((1.0 - p1) / 0.5).ln();
    let decided_alt = llr >= 0.0;
    Ok(TrialOutcome {
        truth_is_alt,
        decided_alt,
        correct: decided_alt == truth_is_alt,
        estimate: if decided_alt {
            task.spec_alt.target_value()
        } else {
            0.0
        },
        informative,
    })
}

/// Runs the likelihood-ratio test on a fresh dataset whose generating
/// hypothesis is chosen by an auxiliary fair draw from `seed`.
pub fn monte_carlo_trial(task: &DistinguishTask, n: usize, seed: u64) -> Result<TrialOutcome> {
    let null_bundle = build(&task.spec_null)?;
    let alt_bundle = build(&task.spec_alt)?;
    run_trial(task, &null_bundle, &alt_bundle, n, seed)
}

/// Empirical error rate of the distinguishing test at a given dataset size.
#[derive(Debug, Clone, Copy)]
pub struct ErrorRatePoint {
    pub n: usize,
    pub trials: usize,
    pub empirical_error: f64,
    /// Exact Bayes error at the expected informative count.
    pub exact_error: f64,
    /// Binomial standard error of the empirical rate.
    pub se: f64,
}

/// Runs `trials` seeded Monte-Carlo trials in parallel; trial `t` uses a
/// stream derived from `(master_seed, t)`.
pub fn monte_carlo_error_rate(
    task: &DistinguishTask,
    n: usize,
    trials: usize,
    master_seed: u64,
) -> Result<ErrorRatePoint> {
    if trials == 0 {
        return Err(OpeError::invalid("trials must be >= 1"));
    }
    let null_bundle = build(&task.spec_null)?;
    let alt_bundle = build(&task.spec_alt)?;
    let errors: u64 = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let seed = master_seed ^ t.wrapping_mul(0x9E3779B97F4A7C15);
            let outcome = run_trial(task, &null_bundle, &alt_bundle, n, seed)?;
            Ok(u64::from(!outcome.correct))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let empirical_error = errors as f64 / trials as f64;
    let exact_error = exact_bayes_error(task, task.informative_count(n as u64));
    let se = (empirical_error * (1.0 - empirical_error) / trials as f64)
        .sqrt()
        .max((0.25 / trials as f64).sqrt() * 1e-6);
    Ok(ErrorRatePoint {
        n,
        trials,
        empirical_error,
        exact_error,
        se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use statrs::function::gamma::ln_gamma;

    fn canonical_task() -> DistinguishTask {
        DistinguishTask::new(0.9, 2, 2, 1.0, 0.1).unwrap()
    }

    /// Log-space brute-force oracle: sums `min(f0, f1)` term by term.
    fn brute_force_bayes_error(n0: u64, p1: f64) -> f64 {
        let (lp1, lq1) = (p1.ln(), (1.0 - p1).ln());
        let lhalf = 0.5f64.ln();
        let mut total = 0.0;
        for k in 0..=n0 {
            let lc = ln_gamma(n0 as f64 + 1.0)
                - ln_gamma(k as f64 + 1.0)
                - ln_gamma((n0 - k) as f64 + 1.0);
            let f0 = lc + n0 as f64 * lhalf;
            let f1 = lc + k as f64 * lp1 + (n0 - k) as f64 * lq1;
            total += f0.min(f1).exp();
        }
        0.5 * total
    }

    #[test]
    fn zero_samples_is_coin_flip() {
        assert_eq!(exact_bayes_error(&canonical_task(), 0), 0.5);
    }

    #[test]
    fn error_nonincreasing_in_n0() {
        let task = canonical_task();
        let mut prev = 0.5;
        for n0 in [0u64, 1, 2, 5, 10, 100, 1000, 10_000, 100_000] {
            let e = exact_bayes_error(&task, n0);
            assert!(e <= prev + 1e-12, "n0={n0}: {e} > {prev}");
            assert!((0.0..=0.5).contains(&e));
            prev = e;
        }
    }

    #[test]
    fn matches_brute_force_and_normal_approximation() {
        let task = canonical_task();
        let p1 = task.bernoulli_p1();
        assert_abs_diff_eq!(p1, 0.5055555555555555, epsilon = 1e-15);
        let exact = exact_bayes_error(&task, 10_000);
        let brute = brute_force_bayes_error(10_000, p1);
        assert_abs_diff_eq!(exact, brute, epsilon = 1e-10);
        // Frozen from the brute-force oracle.
        assert_abs_diff_eq!(exact, 0.2892511584476558, epsilon = 1e-9);
        // Normal approximation Phi(-sqrt(n0) (p1 - 1/2)), within 10%.
        use statrs::distribution::{ContinuousCDF, Normal};
        let approx = Normal::new(0.0, 1.0)
            .unwrap()
            .cdf(-(10_000f64).sqrt() * (p1 - 0.5));
        assert!((exact - approx).abs() / exact <= 0.10);
    }

    #[test]
    fn brute_force_agreement_across_sizes() {
        let task = DistinguishTask::new(0.5, 4, 2, 0.7, 0.2).unwrap();
        let p1 = task.bernoulli_p1();
        for n0 in [1u64, 3, 17, 128, 1001] {
            let exact = exact_bayes_error(&task, n0);
            let brute = brute_force_bayes_error(n0, p1);
            assert_abs_diff_eq!(exact, brute, epsilon = 1e-10);
        }
    }

    #[test]
    fn target_half_needs_no_samples() {
        let task = canonical_task();
        assert_eq!(required_n_for_error(&task, 0.5).unwrap(), NStar::Finite(0));
    }

    #[test]
    fn q_at_gamma_squared_is_unreachable() {
        let task = DistinguishTask::new(0.9, 2, 2, 0.81, 0.1).unwrap();
        assert_abs_diff_eq!(task.informative_mass(), 0.0, epsilon = 1e-15);
        assert_eq!(required_n_for_error(&task, 0.1).unwrap(), NStar::Infinite);
    }

    #[test]
    fn required_n_is_minimal() {
        let task = canonical_task();
        let n = required_n_for_error(&task, 0.25).unwrap().finite().unwrap();
        assert!(n > 0);
        let err_at = |n: u64| exact_bayes_error(&task, task.informative_count(n));
        assert!(err_at(n) <= 0.25);
        assert!(err_at(n - 1) > 0.25);
    }

    #[test]
    fn growth_sweep_shapes() {
        let points = growth_ratio_sweep(0.9, 2, 1.0, 0.1, 0.25, &[2, 3, 4]).unwrap();
        assert_eq!(points.len(), 3);
        assert!(points[0].ratio.is_none());
        for p in &points[1..] {
            let r = p.ratio.unwrap();
            assert!(r >= 1.0, "more levels never need fewer samples: {r}");
            let pred = p.predicted_ratio.unwrap();
            assert!(pred > 1.0);
        }
        // d column tracks m * L.
        assert_eq!(points[2].d, 8);
    }

    #[test]
    fn sweep_rejects_nonincreasing_levels() {
        assert!(growth_ratio_sweep(0.9, 2, 1.0, 0.1, 0.25, &[3, 2]).is_err());
    }

    #[test]
    fn trial_with_no_data_is_a_coin_flip() {
        let task = canonical_task();
        let mut wrong = 0;
        let trials = 400;
        for seed in 0..trials {
            let outcome = monte_carlo_trial(&task, 0, seed).unwrap();
            assert_eq!(outcome.informative, 0);
            // No data: the equal-prior rule picks the alternative.
            assert!(outcome.decided_alt);
            if !outcome.correct {
                wrong += 1;
            }
        }
        let rate = wrong as f64 / trials as f64;
        let se = (0.5 * 0.5 / trials as f64).sqrt();
        assert!((rate - 0.5).abs() <= 3.0 * se, "rate {rate}");
    }

    #[test]
    fn monte_carlo_matches_exact_error() {
        let task = canonical_task();
        let n_star = required_n_for_error(&task, 0.25).unwrap().finite().unwrap() as usize;
        let point = monte_carlo_error_rate(&task, n_star, 2000, 99).unwrap();
        assert!(
            (point.empirical_error - point.exact_error).abs() <= 3.0 * point.se,
            "empirical {} exact {} se {}",
            point.empirical_error,
            point.exact_error,
            point.se
        );
    }

    #[test]
    fn generous_sample_budget_reaches_low_error() {
        let task = canonical_task();
        let n_star = required_n_for_error(&task, 0.05).unwrap().finite().unwrap() as usize;
        let point = monte_carlo_error_rate(&task, 10 * n_star, 100, 11).unwrap();
        assert!(
            point.empirical_error <= 0.05 + 3.0 * point.se,
            "rate {} at n = {}",
            point.empirical_error,
            point.n
        );
    }

    #[test]
    fn trials_are_deterministic_per_seed() {
        let task = canonical_task();
        let a = monte_carlo_trial(&task, 100, 7).unwrap();
        let b = monte_carlo_trial(&task, 100, 7).unwrap();
        assert_eq!(a.correct, b.correct);
        assert_eq!(a.estimate, b.estimate);
        assert_eq!(a.informative, b.informative);
    }
}
