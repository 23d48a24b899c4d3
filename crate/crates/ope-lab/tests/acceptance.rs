//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line (run with `cargo test --test acceptance -- --nocapture`).

use std::time::Instant;

use rayon::prelude::*;

use ope_lab::diagnostics::{concentration_check, empirical_covariances};
use ope_lab::features::{check_realizability, exact_covariance, exact_next_covariance};
use ope_lab::hard_instance::{analytic_covariances, analytic_values, build, HardInstanceSpec};
use ope_lab::lowerbound::{
    growth_ratio_sweep, monte_carlo_error_rate, required_n_for_error, DistinguishTask, NStar,
};
use ope_lab::lspe::{
    decompose, regularization_lambda, run_lspe, shift_constants, squared_error_bound, LspeConfig,
};
use ope_lab::mdp::exact_values;
use ope_lab::sampler::sample_dataset;
use ope_lab::tabular::{random_instance, scalar_instance, RandomTabularConfig, TabularInstance};

/// Prints the criterion verdict even when the test panics.
struct Criterion {
    id: usize,
    name: &'static str,
    start: Instant,
}

impl Criterion {
    fn start(id: usize, name: &'static str) -> Self {
        Criterion {
            id,
            name,
            start: Instant::now(),
        }
    }
}

impl Drop for Criterion {
    fn drop(&mut self) {
        let verdict = if std::thread::panicking() {
            "FAIL"
        } else {
            "PASS"
        };
        println!(
            "criterion {} ({}): {} [{:.1}s]",
            self.id,
            self.name,
            verdict,
            self.start.elapsed().as_secs_f64()
        );
    }
}

const GRID_GAMMAS: [f64; 3] = [0.5, 0.9, 0.95];
const GRID_LEVELS: [usize; 3] = [1, 2, 4];
const GRID_EPS: f64 = 0.1;

fn grid_ms(gamma: f64) -> Vec<usize> {
    let g2 = gamma * gamma;
    let mut ms = vec![(1.0 / g2).ceil() as usize, (1.5 / g2).ceil() as usize];
    ms.dedup();
    ms
}

fn grid_qs(gamma: f64) -> [f64; 3] {
    let g2 = gamma * gamma;
    [g2, (g2 + 1.0) / 2.0, 1.0]
}

fn grid_specs() -> Vec<HardInstanceSpec> {
    let mut specs = Vec::new();
    for &gamma in &GRID_GAMMAS {
        for m in grid_ms(gamma) {
            for &levels in &GRID_LEVELS {
                for q in grid_qs(gamma) {
                    for r0_zero in [false, true] {
                        specs.push(
                            HardInstanceSpec::from_counts(gamma, m, levels, q, GRID_EPS, r0_zero)
                                .expect("grid spec valid"),
                        );
                    }
                }
            }
        }
    }
    specs
}

#[test]
fn criterion_1_hard_instance_analytic_suite() {
    let crit = Criterion::start(1, "hard-instance analytic suite");
    let specs = grid_specs();
    assert!(!specs.is_empty());
    for spec in &specs {
        let bundle = build(spec).unwrap();
        let ctx = format!(
            "gamma={} m={} L={} q={} r0_zero={}",
            spec.gamma, spec.m, spec.levels, spec.q, spec.r0_is_zero
        );

        let violations = bundle.mdp.validate();
        assert!(violations.is_empty(), "{ctx}: {:?}", violations);
        assert_eq!(
            bundle.mdp.n_states(),
            (2 * spec.m + 1) * spec.levels,
            "{ctx}"
        );

        let cov = exact_covariance(&bundle.features, &bundle.mu).unwrap();
        let scale = spec.q / spec.d() as f64;
        for r in 0..spec.d() {
            for c in 0..spec.d() {
                let want = if r == c { scale } else { 0.0 };
                assert!(
                    (cov.matrix[(r, c)] - want).abs() <= 1e-12,
                    "{ctx}: covariance entry ({r},{c})"
                );
            }
        }

        let residual =
            check_realizability(&bundle.mdp, &bundle.policy, &bundle.features, &bundle.theta)
                .unwrap();
        assert!(residual <= 1e-9, "{ctx}: realizability residual {residual}");

        let exact = exact_values(&bundle.mdp, &bundle.policy).unwrap();
        let analytic = analytic_values(spec);
        for s in 0..spec.n_states() {
            assert!(
                (exact.v[s] - analytic.v[s]).abs() <= 1e-9,
                "{ctx}: state {s} exact {} analytic {}",
                exact.v[s],
                analytic.v[s]
            );
        }

        // The target value is 0 or 2 eps exactly (the cancellation in the
        // closed form is algebraic, not numerical).
        let target = spec.target_value();
        assert!(
            target == 0.0 || target == 2.0 * GRID_EPS,
            "{ctx}: target {target}"
        );
        assert!(
            (analytic.v[bundle.target_state] - target).abs() <= 1e-12,
            "{ctx}: analytic target"
        );
        assert!(
            (exact.v[bundle.target_state] - target).abs() <= 1e-9,
            "{ctx}: exact target"
        );
    }
    assert!(
        crit.start.elapsed().as_secs_f64() < 10.0,
        "analytic suite exceeded 10 s"
    );
}

#[test]
fn criterion_2_shift_violation_reproduction() {
    let crit = Criterion::start(2, "shift-violation reproduction");
    let _ = &crit;
    for spec in grid_specs().iter().filter(|s| !s.r0_is_zero) {
        let g2 = spec.gamma * spec.gamma;
        if (spec.d() as f64) * g2 <= 1.0 {
            continue;
        }
        let ctx = format!(
            "gamma={} m={} L={} q={}",
            spec.gamma, spec.m, spec.levels, spec.q
        );
        let bundle = build(spec).unwrap();
        let cov = analytic_covariances(spec);
        let direct_bar =
            exact_next_covariance(&bundle.mdp, &bundle.features, &bundle.policy, &bundle.mu)
                .unwrap();
        assert!(
            (&cov.lambda_bar - &direct_bar.matrix).abs().max() <= 1e-12,
            "{ctx}: closed form vs direct summation"
        );
        let shift = shift_constants(
            &cov.lambda,
            &cov.lambda_bar,
            &cov.lambda_bar0,
            0.1,
            spec.gamma,
        )
        .unwrap();

        let p = spec.p();
        let d = spec.d() as f64;
        let m = spec.m as f64;
        if spec.levels >= 2 {
            // The construction violates low distribution shift:
            // lambda_max(Lambda^{-1/2} LambdaBar Lambda^{-1/2}) >= 1/gamma^2.
            assert!(
                shift.c >= 1.0 / g2 - 1e-9,
                "{ctx}: c = {} < 1/gamma^2 = {}",
                shift.c,
                1.0 / g2
            );
            // Strict violation away from the q = gamma^2 boundary, where the
            // ratio equals 1/gamma^2 exactly and the flag is a coin toss of
            // eigensolver rounding.
            if p > 1e-12 {
                assert!(!shift.assumption_holds, "{ctx}: c = {}", shift.c);
            }

            // Level-0 block of LambdaBar is (1/d)(p 1_{m x m} + I_m); its top
            // eigenvalue (1 + p m)/d appears in LambdaBar's spectrum.
            for i in 0..spec.m {
                for j in 0..spec.m {
                    let want = (p + if i == j { 1.0 } else { 0.0 }) / d;
                    assert!(
                        (direct_bar.matrix[(i, j)] - want).abs() <= 1e-12,
                        "{ctx}: block entry ({i},{j})"
                    );
                }
            }
            let block_top = (1.0 + p * m) / d;
            assert!((cov.level0_block_top - block_top).abs() <= 1e-15, "{ctx}");
            let eigs = cov.lambda_bar.clone().symmetric_eigen().eigenvalues;
            assert!(
                eigs.iter().any(|&e| (e - block_top).abs() <= 1e-10),
                "{ctx}: block eigenvalue {block_top} not in spectrum {:?}",
                eigs.as_slice()
            );
        } else {
            // One level: every state in the sampled support self-loops onto a
            // unit-norm basis feature, so LambdaBar = (1/d) I and the shift
            // ratio is exactly 1/q, which meets 1/gamma^2 only at q = gamma^2.
            assert!(
                (shift.c - 1.0 / spec.q).abs() <= 1e-9,
                "{ctx}: c = {}",
                shift.c
            );
            let violates = shift.c >= 1.0 / g2 - 1e-9;
            assert_eq!(violates, spec.q <= g2 + 1e-12, "{ctx}");
        }
    }
}

/// Shared family for criteria 3-5: random 8-state one-hot instances that
/// satisfy the low-distribution-shift assumption.
fn criterion3_family() -> (RandomTabularConfig, Vec<TabularInstance>) {
    let cfg = RandomTabularConfig {
        n_states: 8,
        n_actions: 2,
        gamma: 0.5,
        reward_scale: 0.1,
    };
    let instances: Vec<TabularInstance> = (0..20)
        .map(|i| random_instance(&cfg, 9000 + i).unwrap())
        .collect();
    (cfg, instances)
}

fn instance_shift(inst: &TabularInstance, eta: f64) -> ope_lab::lspe::ShiftConstants {
    let lambda = exact_covariance(&inst.features, &inst.mu).unwrap();
    let lambda_bar =
        exact_next_covariance(&inst.mdp, &inst.features, &inst.policy, &inst.mu).unwrap();
    let lambda_bar0 =
        ope_lab::features::target_covariance(&inst.features, &inst.policy, inst.target_state)
            .unwrap();
    shift_constants(
        &lambda.matrix,
        &lambda_bar.matrix,
        &lambda_bar0,
        eta,
        inst.mdp.gamma,
    )
    .unwrap()
}

fn criterion3_cfg(inst: &TabularInstance, n: usize) -> LspeConfig {
    let (delta, eta) = (0.1, 0.5);
    let shift = instance_shift(inst, eta);
    assert!(shift.beta < 1.0);
    let lambda = regularization_lambda(n, inst.features.dim, delta, eta).unwrap();
    let t = ope_lab::lspe::default_iterations(Some(shift.beta), 0.1);
    LspeConfig::new(lambda, t, eta, delta).unwrap()
}

#[test]
fn criterion_3_lspe_correctness_oracle() {
    let crit = Criterion::start(3, "lspe correctness oracle");

    // Scalar oracle: geometric convergence, exact up to rounding.
    let inst = scalar_instance(0.5, 1.0).unwrap();
    let ds = sample_dataset(&inst.mdp, &inst.mu, 7, 1).unwrap();
    let cfg = LspeConfig::new(0.0, 60, 0.5, 0.1).unwrap();
    let run = run_lspe(&ds, &inst.features, &inst.policy, 0.5, &cfg, 0).unwrap();
    for t in 1..=60usize {
        let err = (run.theta_trace[t][0] - 2.0).abs();
        let allowed = 0.5f64.powi(t as i32) * 2.0 + 1e-10;
        assert!(err <= allowed, "T={t}: err {err} > {allowed}");
    }

    // Random tabular family: 20 instances x 50 seeds at n = 1e5.
    let (_, instances) = criterion3_family();
    let n = 100_000;
    let eps = 0.1;
    let results: Vec<(usize, usize)> = instances
        .par_iter()
        .enumerate()
        .map(|(idx, inst)| {
            let cfg = criterion3_cfg(inst, n);
            let hits = (0..50u64)
                .map(|k| {
                    let seed = 77_000 + (idx as u64) * 50 + k;
                    let ds = sample_dataset(&inst.mdp, &inst.mu, n, seed).unwrap();
                    let run = run_lspe(
                        &ds,
                        &inst.features,
                        &inst.policy,
                        inst.mdp.gamma,
                        &cfg,
                        inst.target_state,
                    )
                    .unwrap();
                    let err = (run.target_estimate - inst.exact.v[inst.target_state]).abs();
                    usize::from(err <= eps)
                })
                .sum();
            (idx, hits)
        })
        .collect();
    for (idx, hits) in results {
        assert!(
            hits >= 45,
            "instance {idx}: only {hits}/50 seeds within eps"
        );
    }
    assert!(
        crit.start.elapsed().as_secs_f64() < 300.0,
        "lspe oracle exceeded 5 min"
    );
}

#[test]
fn criterion_4_q_diff_equivalence() {
    let crit = Criterion::start(4, "q-diff equivalence");
    let _ = &crit;
    let (_, instances) = criterion3_family();
    instances.par_iter().enumerate().for_each(|(idx, inst)| {
        let n = 10_000;
        let cfg = criterion3_cfg(inst, n);
        for k in 0..3u64 {
            let ds = sample_dataset(&inst.mdp, &inst.mu, n, 31_000 + idx as u64 * 3 + k).unwrap();
            let dec = decompose(
                &ds,
                &inst.features,
                &inst.policy,
                inst.mdp.gamma,
                &cfg,
                &inst.theta,
                &inst.exact,
                inst.target_state,
            )
            .unwrap();
            assert!(
                dec.route_rel_diff <= 1e-8,
                "instance {idx} seed {k}: route gap {}",
                dec.route_rel_diff
            );
            assert!(
                dec.sq_err_rel_diff <= 1e-8,
                "instance {idx} seed {k}: squared-error gap {}",
                dec.sq_err_rel_diff
            );
        }
    });
}

#[test]
fn criterion_5_error_bound_validity() {
    let crit = Criterion::start(5, "error-bound validity");
    let _ = &crit;
    let (_, instances) = criterion3_family();
    let n = 100_000;
    let (delta, eta) = (0.1, 0.5);
    let outcomes: Vec<bool> = instances
        .par_iter()
        .enumerate()
        .flat_map_iter(|(idx, inst)| {
            let shift = instance_shift(inst, eta);
            assert!(
                shift.bound_applicable,
                "instance {idx} must satisfy the shift assumption"
            );
            let cfg = criterion3_cfg(inst, n);
            let bound = squared_error_bound(
                shift.c,
                shift.c0,
                eta,
                inst.mdp.gamma,
                inst.features.dim,
                delta,
                n,
                cfg.t_iters,
                inst.theta.norm(),
            )
            .unwrap();
            let exact_v = inst.exact.v[inst.target_state];
            (0..10u64)
                .map(|k| {
                    let seed = 55_000 + (idx as u64) * 10 + k;
                    let ds = sample_dataset(&inst.mdp, &inst.mu, n, seed).unwrap();
                    let run = run_lspe(
                        &ds,
                        &inst.features,
                        &inst.policy,
                        inst.mdp.gamma,
                        &cfg,
                        inst.target_state,
                    )
                    .unwrap();
                    (run.target_estimate - exact_v).powi(2) > bound
                })
                .collect::<Vec<_>>()
        })
        .collect();
    assert!(outcomes.len() >= 100, "need at least 100 pooled seeds");
    let violations = outcomes.iter().filter(|&&v| v).count();
    let fraction = violations as f64 / outcomes.len() as f64;
    assert!(
        fraction <= delta + 0.05,
        "bound violated in {fraction} of runs"
    );
}

#[test]
fn criterion_6_matrix_concentration() {
    let crit = Criterion::start(6, "matrix concentration");
    let _ = &crit;
    let spec = HardInstanceSpec::from_counts(0.9, 2, 2, 1.0, GRID_EPS, false).unwrap();
    let bundle = build(&spec).unwrap();
    let cov = analytic_covariances(&spec);
    let (n, delta) = (10_000, 0.05);
    let violations: usize = (0..200u64)
        .into_par_iter()
        .map(|seed| {
            let ds = sample_dataset(&bundle.mdp, &bundle.mu, n, 140_000 + seed).unwrap();
            let emp = empirical_covariances(&ds, &bundle.features, &bundle.policy).unwrap();
            let report = concentration_check(&emp, &cov.lambda, &cov.lambda_bar, delta).unwrap();
            usize::from(!report.both_within())
        })
        .sum();
    let fraction = violations as f64 / 200.0;
    assert!(
        fraction <= 2.0 * delta + 0.05,
        "concentration violated in {fraction} of runs"
    );
}

#[test]
fn criterion_7_lower_bound_scaling() {
    let crit = Criterion::start(7, "lower-bound scaling");
    let (gamma, m, q, eps) = (0.9, 2usize, 1.0, 0.1);

    // Growth ratios over levels at target error 0.1.
    let levels: Vec<usize> = (2..=8).collect();
    let points = growth_ratio_sweep(gamma, m, q, eps, 0.1, &levels).unwrap();
    for p in &points[1..] {
        let ratio = p.ratio.expect("finite sample sizes");
        let predicted = p.predicted_ratio.expect("predicted ratio");
        let rel = ratio / predicted;
        assert!(
            (0.75..=1.25).contains(&rel),
            "L={}: ratio {ratio} vs predicted {predicted}",
            p.levels
        );
    }

    // eps^-2 scaling within a factor 1.5 at fixed L = 2.
    let n_star = |eps: f64| -> f64 {
        let task = DistinguishTask::new(gamma, m, 2, q, eps).unwrap();
        required_n_for_error(&task, 0.1).unwrap().finite().unwrap() as f64
    };
    let (n05, n10, n20) = (n_star(0.05), n_star(0.1), n_star(0.2));
    for (big, small) in [(n05, n10), (n10, n20)] {
        let rel = (big / small) / 4.0;
        assert!(
            (1.0 / 1.5..=1.5).contains(&rel),
            "eps^-2 scaling off: ratio {big}/{small}"
        );
    }

    // 1/(q - gamma^2) scaling over a 3-point q grid near the lower edge.
    let g2 = gamma * gamma;
    let n_star_q = |q: f64| -> f64 {
        let task = DistinguishTask::new(gamma, m, 2, q, eps).unwrap();
        required_n_for_error(&task, 0.1).unwrap().finite().unwrap() as f64
    };
    let qs = [g2 + 0.02, g2 + 0.04, g2 + 0.08];
    for pair in qs.windows(2) {
        let expected = (pair[1] - g2) / (pair[0] - g2);
        let got = n_star_q(pair[0]) / n_star_q(pair[1]);
        let rel = got / expected;
        assert!(
            (1.0 / 1.5..=1.5).contains(&rel),
            "1/(q-gamma^2) scaling off at q pair {pair:?}: {got} vs {expected}"
        );
    }

    // Infinite sentinel at q = gamma^2.
    let task = DistinguishTask::new(gamma, m, 2, g2, eps).unwrap();
    assert_eq!(required_n_for_error(&task, 0.1).unwrap(), NStar::Infinite);

    // Monte-Carlo error rate matches the exact Bayes error within 3 se.
    let task = DistinguishTask::new(gamma, m, 2, q, eps).unwrap();
    let n_mc = required_n_for_error(&task, 0.25).unwrap().finite().unwrap() as usize;
    let point = monte_carlo_error_rate(&task, n_mc, 2000, 4242).unwrap();
    assert!(
        (point.empirical_error - point.exact_error).abs() <= 3.0 * point.se,
        "empirical {} vs exact {} (se {})",
        point.empirical_error,
        point.exact_error,
        point.se
    );
    assert!(
        crit.start.elapsed().as_secs_f64() < 600.0,
        "lower-bound suite exceeded 10 min"
    );
}

#[test]
fn criterion_8_determinism() {
    let crit = Criterion::start(8, "determinism");
    let _ = &crit;
    use ope_lab::cli::commands;
    use ope_lab::cli::config::KeyValues;

    let dir = tempfile::tempdir().unwrap();
    let out = |name: &str| dir.path().join(name).display().to_string();

    let run_twice =
        |build_kv: &dyn Fn() -> KeyValues,
         run: &dyn Fn(KeyValues) -> ope_lab::Result<commands::CommandOutput>| {
            let first = run(build_kv()).unwrap();
            let before: Vec<Vec<u8>> = first
                .files
                .iter()
                .map(|p| std::fs::read(p).unwrap())
                .collect();
            let second = run(build_kv()).unwrap();
            assert_eq!(first.files, second.files);
            for (path, old) in second.files.iter().zip(before) {
                let new = std::fs::read(path).unwrap();
                assert_eq!(old, new, "{} changed between runs", path.display());
            }
        };

    let spec_kv = |out_name: String| -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("gamma", "0.9".into());
        kv.set("m", "2".into());
        kv.set("L", "2".into());
        kv.set("q", "1.0".into());
        kv.set("eps", "0.1".into());
        kv.set("out", out_name);
        kv
    };

    let sample_out = out("sample");
    run_twice(
        &|| {
            let mut kv = spec_kv(sample_out.clone());
            kv.set("n", "500".into());
            kv.set("seed", "31".into());
            kv
        },
        &commands::run_sample,
    );

    let lspe_out = out("lspe");
    run_twice(
        &|| {
            let mut kv = spec_kv(lspe_out.clone());
            kv.set("n", "2000".into());
            kv.set("seed", "32".into());
            kv.set("t", "20".into());
            kv
        },
        &commands::run_lspe_cmd,
    );

    let diag_out = out("diag");
    run_twice(
        &|| {
            let mut kv = spec_kv(diag_out.clone());
            kv.set("n", "2000".into());
            kv.set("seed", "33".into());
            kv
        },
        &commands::run_diagnose,
    );

    let lower_out = out("lower");
    run_twice(
        &|| {
            let mut kv = KeyValues::default();
            kv.set("gamma", "0.9".into());
            kv.set("m", "2".into());
            kv.set("q", "1.0".into());
            kv.set("target_error", "0.25".into());
            kv.set("l_min", "2".into());
            kv.set("l_max", "3".into());
            kv.set("trials", "50".into());
            kv.set("seed", "34".into());
            kv.set("out", lower_out.clone());
            kv
        },
        &commands::run_lower_sweep,
    );

    let upper_out = out("upper");
    run_twice(
        &|| {
            let mut kv = KeyValues::default();
            kv.set("instances", "2".into());
            kv.set("seeds", "2".into());
            kv.set("n_grid", "1000".into());
            kv.set("seed", "35".into());
            kv.set("out", upper_out.clone());
            kv
        },
        &commands::run_upper_sweep,
    );

    let instance_out = out("instance");
    run_twice(&|| spec_kv(instance_out.clone()), &commands::run_instance);
}
