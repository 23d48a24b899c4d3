//! Subcommand implementations. Every command resolves and validates its full
//! configuration before touching the filesystem, computes in memory, then
//! writes CSV artifacts plus a key=value summary carrying the config hash,
//! the master seed, and the library version.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::{required, KeyValues};
use super::csvio::{
    self, config_hash, emit_csv, format_real, write_dataset, write_features, write_instance_table,
    write_kv,
};
use crate::diagnostics::{audit_assumptions, concentration_check, empirical_covariances};
use crate::error::OpeError;
use crate::hard_instance::{analytic_covariances, build, HardInstanceBundle, HardInstanceSpec};
use crate::lowerbound::{
    growth_ratio_sweep, monte_carlo_error_rate, required_n_for_error, DistinguishTask, NStar,
};
use crate::lspe::{
    default_iterations, regularization_lambda, run_lspe, shift_constants, squared_error_bound,
    LspeConfig, ShiftConstants,
};
use crate::mdp::exact_values;
use crate::sampler::sample_dataset;
use crate::tabular::{random_instance, scalar_instance, RandomTabularConfig};
use crate::Result;

/// Files written by a command, in creation order.
#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Derives an independent stream seed from the master seed, a lane tag, and
/// an index; used by sweeps so cells are reproducible in isolation.
pub fn derive_seed(master: u64, lane: u64, idx: u64) -> u64 {
    splitmix64(master ^ lane.rotate_left(17) ^ splitmix64(idx))
}

fn out_path(prefix: &Path, suffix: &str) -> PathBuf {
    let mut os = prefix.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

/// Output paths are checked up front so validation failures never leave
/// partial artifacts behind.
fn check_out_prefix(prefix: &Path) -> Result<()> {
    let parent = match prefix.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(OpeError::Config(format!(
            "output directory '{}' does not exist",
            parent.display()
        )));
    }
    Ok(())
}

fn write_summary(
    path: &Path,
    command: &str,
    resolved: &[(String, String)],
    seed: Option<u64>,
    extra: Vec<(String, String)>,
) -> Result<()> {
    let mut pairs = vec![
        ("command".to_string(), command.to_string()),
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("config_hash".to_string(), config_hash(resolved)),
        (
            "seed".to_string(),
            seed.map_or_else(|| "none".to_string(), |s| s.to_string()),
        ),
    ];
    pairs.extend(extra);
    write_kv(path, &pairs)
}

/// Pulls the hard-instance keys out of a config: either `m` and `L`, or `b`
/// and `d`.
pub fn resolve_spec(kv: &mut KeyValues) -> Result<(HardInstanceSpec, Vec<(String, String)>)> {
    let gamma = required(kv.take_f64("gamma", None)?, "gamma")?;
    let q = required(kv.take_f64("q", None)?, "q")?;
    let eps = kv.take_f64("eps", Some(0.1))?.expect("default");
    let r0_zero = kv.take_bool("r0_zero", false)?;
    let m = kv.take_u64("m", None)?;
    let levels = kv.take_u64("L", None)?;
    let b = kv.take_f64("b", None)?;
    let d = kv.take_u64("d", None)?;
    let spec = match (m, levels, b, d) {
        (Some(m), Some(l), None, None) => {
            HardInstanceSpec::from_counts(gamma, m as usize, l as usize, q, eps, r0_zero)?
        }
        (None, None, Some(b), Some(d)) => {
            HardInstanceSpec::from_base(gamma, b, d as usize, q, eps, r0_zero)?
        }
        _ => {
            return Err(OpeError::Config(
                "specify either both 'm' and 'L', or both 'b' and 'd'".into(),
            ))
        }
    };
    let mut resolved = vec![
        ("gamma".to_string(), format_real(gamma)),
        ("m".to_string(), spec.m.to_string()),
        ("L".to_string(), spec.levels.to_string()),
        ("q".to_string(), format_real(q)),
        ("eps".to_string(), format_real(eps)),
        ("r0_zero".to_string(), r0_zero.to_string()),
    ];
    if let Some(b) = b {
        resolved.push(("b".to_string(), format_real(b)));
    }
    Ok((spec, resolved))
}

fn shift_of_bundle(bundle: &HardInstanceBundle, eta: f64) -> Result<ShiftConstants> {
    let cov = analytic_covariances(&bundle.spec);
    shift_constants(
        &cov.lambda,
        &cov.lambda_bar,
        &cov.lambda_bar0,
        eta,
        bundle.spec.gamma,
    )
}

/// `instance`: build, audit, and export the hard instance.
pub fn run_instance(mut kv: KeyValues) -> Result<CommandOutput> {
    let (spec, mut resolved) = resolve_spec(&mut kv)?;
    let eta = kv.take_f64("eta", Some(0.1))?.expect("default");
    let out = PathBuf::from(kv.take_string("out", Some("instance")).expect("default"));
    kv.finish()?;
    check_out_prefix(&out)?;
    resolved.push(("eta".to_string(), format_real(eta)));
    resolved.push(("out".to_string(), out.display().to_string()));

    let bundle = build(&spec)?;
    let audit = audit_assumptions(
        &bundle.mdp,
        &bundle.policy,
        &bundle.features,
        &bundle.theta,
        &bundle.mu,
        bundle.target_state,
        eta,
    )?;
    let cov = analytic_covariances(&spec);

    let states_path = out_path(&out, "_states.csv");
    let features_path = out_path(&out, "_features.csv");
    let audit_path = out_path(&out, "_audit.txt");
    let summary_path = out_path(&out, "_summary.txt");

    write_instance_table(&states_path, &bundle)?;
    write_features(&features_path, &bundle.features)?;
    write_kv(
        &audit_path,
        &[
            ("n_states".into(), spec.n_states().to_string()),
            ("d".into(), spec.d().to_string()),
            ("p".into(), format_real(spec.p())),
            ("r0".into(), format_real(spec.r0())),
            ("target_state".into(), bundle.target_state.to_string()),
            ("target_value".into(), format_real(spec.target_value())),
            (
                "realizability_residual".into(),
                format_real(audit.realizability_residual),
            ),
            (
                "max_feature_norm".into(),
                format_real(audit.max_feature_norm),
            ),
            ("lambda_min".into(), format_real(audit.lambda_min)),
            ("lambda_trace".into(), format_real(audit.lambda_trace)),
            ("c".into(), format_real(audit.shift.c)),
            ("c0".into(), format_real(audit.shift.c0)),
            ("beta".into(), format_real(audit.shift.beta)),
            ("low_shift".into(), audit.shift.assumption_holds.to_string()),
            (
                "bound_applicable".into(),
                audit.shift.bound_applicable.to_string(),
            ),
            (
                "level0_block_top_eigenvalue".into(),
                format_real(cov.level0_block_top),
            ),
        ],
    )?;
    write_summary(
        &summary_path,
        "instance",
        &resolved,
        None,
        vec![
            ("states_csv".into(), states_path.display().to_string()),
            ("features_csv".into(), features_path.display().to_string()),
            ("audit".into(), audit_path.display().to_string()),
        ],
    )?;
    Ok(CommandOutput {
        files: vec![states_path, features_path, audit_path, summary_path],
    })
}

/// `sample`: draw an offline dataset and persist it with its metadata.
pub fn run_sample(mut kv: KeyValues) -> Result<CommandOutput> {
    let (spec, mut resolved) = resolve_spec(&mut kv)?;
    let n = required(kv.take_u64("n", None)?, "n")? as usize;
    let seed = required(kv.take_u64("seed", None)?, "seed")?;
    let out = PathBuf::from(kv.take_string("out", Some("sample")).expect("default"));
    kv.finish()?;
    check_out_prefix(&out)?;
    resolved.push(("n".to_string(), n.to_string()));
    resolved.push(("seed".to_string(), seed.to_string()));
    resolved.push(("out".to_string(), out.display().to_string()));

    let bundle = build(&spec)?;
    let ds = sample_dataset(&bundle.mdp, &bundle.mu, n, seed)?;
    let dataset_path = out_path(&out, "_dataset.csv");
    let summary_path = out_path(&out, "_summary.txt");
    write_dataset(&dataset_path, &ds, spec.gamma, spec.d())?;
    write_summary(
        &summary_path,
        "sample",
        &resolved,
        Some(seed),
        vec![
            ("n".into(), n.to_string()),
            ("instance_hash".into(), ds.instance_hash.clone()),
            ("dataset_csv".into(), dataset_path.display().to_string()),
        ],
    )?;
    Ok(CommandOutput {
        files: vec![
            dataset_path.clone(),
            csvio::meta_path(&dataset_path),
            summary_path,
        ],
    })
}

/// `lspe`: run the solver on a stored or freshly sampled dataset and report
/// the estimate, the ground truth, and the error bound when applicable.
pub fn run_lspe_cmd(mut kv: KeyValues) -> Result<CommandOutput> {
    let (spec, mut resolved) = resolve_spec(&mut kv)?;
    let eta = kv.take_f64("eta", Some(0.1))?.expect("default");
    let delta = kv.take_f64("delta", Some(0.05))?.expect("default");
    let dataset_path = kv.take_string("dataset", None).map(PathBuf::from);
    let n_key = kv.take_u64("n", None)?;
    let seed = kv.take_u64("seed", None)?;
    let t_flag = kv.take_u64("t", None)?;
    let lambda_flag = kv.take_f64("lambda", None)?;
    let out = PathBuf::from(kv.take_string("out", Some("lspe")).expect("default"));
    kv.finish()?;
    check_out_prefix(&out)?;

    let bundle = build(&spec)?;
    let ds = match &dataset_path {
        Some(path) => {
            let ds = csvio::read_dataset(path)?;
            let expected = crate::sampler::instance_digest(&bundle.mdp, &bundle.mu);
            if ds.instance_hash != expected {
                return Err(OpeError::invalid(format!(
                    "dataset instance hash {} does not match configured instance {expected}",
                    ds.instance_hash
                )));
            }
            ds
        }
        None => {
            let n = required(n_key, "n")? as usize;
            let seed = required(seed, "seed")?;
            sample_dataset(&bundle.mdp, &bundle.mu, n, seed)?
        }
    };
    let n = ds.n();
    let shift = shift_of_bundle(&bundle, eta)?;
    let lambda = match lambda_flag {
        Some(l) => l,
        None => regularization_lambda(n, spec.d(), delta, eta)?,
    };
    let t_iters = match t_flag {
        Some(t) => t as usize,
        None => default_iterations((shift.beta < 1.0).then_some(shift.beta), spec.eps),
    };
    let cfg = LspeConfig::new(lambda, t_iters, eta, delta)?;
    let run = run_lspe(
        &ds,
        &bundle.features,
        &bundle.policy,
        spec.gamma,
        &cfg,
        bundle.target_state,
    )?;
    let exact = exact_values(&bundle.mdp, &bundle.policy)?;
    let v_exact = exact.v[bundle.target_state];
    let abs_err = (run.target_estimate - v_exact).abs();
    let bound = squared_error_bound(
        shift.c,
        shift.c0,
        eta,
        spec.gamma,
        spec.d(),
        delta,
        n,
        t_iters,
        bundle.theta.norm(),
    )
    .map(format_real)
    .unwrap_or_else(|_| "nan".to_string());

    resolved.extend([
        ("eta".to_string(), format_real(eta)),
        ("delta".to_string(), format_real(delta)),
        ("lambda".to_string(), format_real(lambda)),
        ("t".to_string(), t_iters.to_string()),
        ("out".to_string(), out.display().to_string()),
    ]);

    let trace_path = out_path(&out, "_trace.csv");
    let summary_path = out_path(&out, "_summary.txt");
    let rows: Vec<Vec<String>> = run
        .v_hat_target
        .iter()
        .enumerate()
        .map(|(t, &v)| vec![t.to_string(), format_real(v)])
        .collect();
    emit_csv(&trace_path, &["t", "v_hat"], &rows)?;
    write_summary(
        &summary_path,
        "lspe",
        &resolved,
        Some(ds.seed),
        vec![
            ("n".into(), n.to_string()),
            ("lambda".into(), format_real(lambda)),
            ("t".into(), t_iters.to_string()),
            ("c".into(), format_real(shift.c)),
            ("c0".into(), format_real(shift.c0)),
            ("beta".into(), format_real(shift.beta)),
            ("low_shift".into(), shift.assumption_holds.to_string()),
            ("v_hat".into(), format_real(run.target_estimate)),
            ("v_exact".into(), format_real(v_exact)),
            ("abs_err".into(), format_real(abs_err)),
            ("bound_sq".into(), bound),
        ],
    )?;
    Ok(CommandOutput {
        files: vec![trace_path, summary_path],
    })
}

/// `diagnose`: empirical covariances against exact ones plus the assumption
/// audit.
pub fn run_diagnose(mut kv: KeyValues) -> Result<CommandOutput> {
    let (spec, mut resolved) = resolve_spec(&mut kv)?;
    let eta = kv.take_f64("eta", Some(0.1))?.expect("default");
    let delta = kv.take_f64("delta", Some(0.05))?.expect("default");
    let n = required(kv.take_u64("n", None)?, "n")? as usize;
    let seed = required(kv.take_u64("seed", None)?, "seed")?;
    let out = PathBuf::from(kv.take_string("out", Some("diagnose")).expect("default"));
    kv.finish()?;
    check_out_prefix(&out)?;
    resolved.extend([
        ("eta".to_string(), format_real(eta)),
        ("delta".to_string(), format_real(delta)),
        ("n".to_string(), n.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("out".to_string(), out.display().to_string()),
    ]);

    let bundle = build(&spec)?;
    let ds = sample_dataset(&bundle.mdp, &bundle.mu, n, seed)?;
    let emp = empirical_covariances(&ds, &bundle.features, &bundle.policy)?;
    let cov = analytic_covariances(&spec);
    let report = concentration_check(&emp, &cov.lambda, &cov.lambda_bar, delta)?;
    let audit = audit_assumptions(
        &bundle.mdp,
        &bundle.policy,
        &bundle.features,
        &bundle.theta,
        &bundle.mu,
        bundle.target_state,
        eta,
    )?;

    let coverage_path = out_path(&out, "_coverage.csv");
    let summary_path = out_path(&out, "_summary.txt");
    emit_csv(
        &coverage_path,
        &["matrix", "deviation", "bound", "margin", "within"],
        &[
            vec![
                "lambda".into(),
                format_real(report.dev_lambda),
                format_real(report.bound),
                format_real(report.margin_lambda),
                report.lambda_within.to_string(),
            ],
            vec![
                "lambda_bar".into(),
                format_real(report.dev_lambda_bar),
                format_real(report.bound),
                format_real(report.margin_lambda_bar),
                report.lambda_bar_within.to_string(),
            ],
        ],
    )?;
    write_summary(
        &summary_path,
        "diagnose",
        &resolved,
        Some(seed),
        vec![
            ("n".into(), n.to_string()),
            (
                "realizability_residual".into(),
                format_real(audit.realizability_residual),
            ),
            (
                "max_feature_norm".into(),
                format_real(audit.max_feature_norm),
            ),
            ("lambda_min".into(), format_real(audit.lambda_min)),
            ("c".into(), format_real(audit.shift.c)),
            ("c0".into(), format_real(audit.shift.c0)),
            ("low_shift".into(), audit.shift.assumption_holds.to_string()),
            ("bound".into(), format_real(report.bound)),
            ("dev_lambda".into(), format_real(report.dev_lambda)),
            ("dev_lambda_bar".into(), format_real(report.dev_lambda_bar)),
            ("within".into(), report.both_within().to_string()),
        ],
    )?;
    Ok(CommandOutput {
        files: vec![coverage_path, summary_path],
    })
}

/// `lower-sweep`: required-sample growth over levels plus Monte-Carlo
/// verification of the exact Bayes error.
pub fn run_lower_sweep(mut kv: KeyValues) -> Result<CommandOutput> {
    let gamma = required(kv.take_f64("gamma", None)?, "gamma")?;
    let m = required(kv.take_u64("m", None)?, "m")? as usize;
    let q = required(kv.take_f64("q", None)?, "q")?;
    let eps = kv.take_f64("eps", Some(0.1))?.expect("default");
    let target_error = kv.take_f64("target_error", Some(0.1))?.expect("default");
    let l_min = kv.take_u64("l_min", Some(2))?.expect("default") as usize;
    let l_max = kv.take_u64("l_max", Some(8))?.expect("default") as usize;
    let mc_levels = kv
        .take_u64("mc_levels", Some(l_min as u64))?
        .expect("default") as usize;
    let mc_target = kv.take_f64("mc_target", Some(0.25))?.expect("default");
    let trials = kv.take_u64("trials", Some(2000))?.expect("default") as usize;
    let seed = required(kv.take_u64("seed", None)?, "seed")?;
    let out = PathBuf::from(kv.take_string("out", Some("lower")).expect("default"));
    kv.finish()?;
    check_out_prefix(&out)?;
    if l_min < 1 || l_max < l_min {
        return Err(OpeError::Config(format!(
            "level range [{l_min}, {l_max}] is empty or invalid"
        )));
    }

    let resolved = vec![
        ("gamma".to_string(), format_real(gamma)),
        ("m".to_string(), m.to_string()),
        ("q".to_string(), format_real(q)),
        ("eps".to_string(), format_real(eps)),
        ("target_error".to_string(), format_real(target_error)),
        ("l_min".to_string(), l_min.to_string()),
        ("l_max".to_string(), l_max.to_string()),
        ("mc_levels".to_string(), mc_levels.to_string()),
        ("mc_target".to_string(), format_real(mc_target)),
        ("trials".to_string(), trials.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("out".to_string(), out.display().to_string()),
    ];

    let levels: Vec<usize> = (l_min..=l_max).collect();
    let points = growth_ratio_sweep(gamma, m, q, eps, target_error, &levels)?;
    let growth_rows: Vec<Vec<String>> = points
        .iter()
        .map(|p| {
            vec![
                p.levels.to_string(),
                p.d.to_string(),
                p.n_star.to_string(),
                p.ratio.map(format_real).unwrap_or_default(),
                p.predicted_ratio.map(format_real).unwrap_or_default(),
            ]
        })
        .collect();

    let task = DistinguishTask::new(gamma, m, mc_levels, q, eps)?;
    let mc_rows: Vec<Vec<String>> = match required_n_for_error(&task, mc_target)? {
        NStar::Infinite => Vec::new(),
        NStar::Finite(n_star) => {
            let grid = [n_star / 2, n_star, n_star * 2];
            grid.into_iter()
                .filter(|&n| n > 0)
                .map(|n| {
                    let point = monte_carlo_error_rate(&task, n as usize, trials, seed)?;
                    Ok(vec![
                        point.n.to_string(),
                        format_real(point.empirical_error),
                        format_real(point.exact_error),
                        format_real(point.se),
                    ])
                })
                .collect::<Result<_>>()?
        }
    };

    let growth_path = out_path(&out, "_growth.csv");
    let mc_path = out_path(&out, "_mc.csv");
    let summary_path = out_path(&out, "_summary.txt");
    emit_csv(
        &growth_path,
        &["L", "d", "N_star", "ratio", "predicted_ratio"],
        &growth_rows,
    )?;
    emit_csv(
        &mc_path,
        &["n", "empirical_error", "exact_error", "se"],
        &mc_rows,
    )?;
    write_summary(
        &summary_path,
        "lower-sweep",
        &resolved,
        Some(seed),
        vec![
            ("levels".into(), format!("{l_min}..{l_max}")),
            ("growth_csv".into(), growth_path.display().to_string()),
            ("mc_csv".into(), mc_path.display().to_string()),
        ],
    )?;
    Ok(CommandOutput {
        files: vec![growth_path, mc_path, summary_path],
    })
}

/// `upper-sweep`: error-vs-sample-size curves for the solver, either on the
/// random tabular family (`mode=tabular`) or on the single-state oracle
/// (`mode=scalar`, error vs iteration count).
pub fn run_upper_sweep(mut kv: KeyValues) -> Result<CommandOutput> {
    let mode = kv.take_string("mode", Some("tabular")).expect("default");
    match mode.as_str() {
        "tabular" => run_upper_sweep_tabular(kv),
        "scalar" => run_upper_sweep_scalar(kv),
        other => Err(OpeError::Config(format!(
            "key 'mode': expected 'tabular' or 'scalar', got '{other}'"
        ))),
    }
}

fn run_upper_sweep_scalar(mut kv: KeyValues) -> Result<CommandOutput> {
    let gamma = kv.take_f64("gamma", Some(0.5))?.expect("default");
    let t_max = kv.take_u64("t_max", Some(60))?.expect("default") as usize;
    let n = kv.take_u64("n", Some(7))?.expect("default") as usize;
    let out = PathBuf::from(kv.take_string("out", Some("upper")).expect("default"));
    kv.finish()?;
    check_out_prefix(&out)?;
    if n == 0 || t_max == 0 {
        return Err(OpeError::Config("n and t_max must be positive".into()));
    }
    let resolved = vec![
        ("mode".to_string(), "scalar".to_string()),
        ("gamma".to_string(), format_real(gamma)),
        ("t_max".to_string(), t_max.to_string()),
        ("n".to_string(), n.to_string()),
        ("out".to_string(), out.display().to_string()),
    ];

    let inst = scalar_instance(gamma, 1.0)?;
    let ds = sample_dataset(&inst.mdp, &inst.mu, n, 0)?;
    let cfg = LspeConfig::new(0.0, t_max, 0.5, 0.1)?;
    let run = run_lspe(&ds, &inst.features, &inst.policy, gamma, &cfg, 0)?;
    let v_true = 1.0 / (1.0 - gamma);
    let rows: Vec<Vec<String>> = run
        .theta_trace
        .iter()
        .enumerate()
        .skip(1)
        .map(|(t, theta)| {
            vec![
                t.to_string(),
                format_real(theta[0]),
                format_real((theta[0] - v_true).abs()),
            ]
        })
        .collect();
    let curve_path = out_path(&out, "_scalar.csv");
    let summary_path = out_path(&out, "_summary.txt");
    emit_csv(&curve_path, &["t", "theta_hat", "abs_err"], &rows)?;
    write_summary(
        &summary_path,
        "upper-sweep",
        &resolved,
        None,
        vec![
            ("v_exact".into(), format_real(v_true)),
            ("curve_csv".into(), curve_path.display().to_string()),
        ],
    )?;
    Ok(CommandOutput {
        files: vec![curve_path, summary_path],
    })
}

fn run_upper_sweep_tabular(mut kv: KeyValues) -> Result<CommandOutput> {
    let n_states = kv.take_u64("n_states", Some(8))?.expect("default") as usize;
    let n_actions = kv.take_u64("n_actions", Some(2))?.expect("default") as usize;
    let gamma = kv.take_f64("gamma", Some(0.5))?.expect("default");
    let reward_scale = kv.take_f64("reward_scale", Some(0.1))?.expect("default");
    let instances = kv.take_u64("instances", Some(20))?.expect("default") as usize;
    let seeds = kv.take_u64("seeds", Some(50))?.expect("default") as usize;
    let n_grid = kv.take_u64_list("n_grid", &[1_000, 10_000, 100_000])?;
    let delta = kv.take_f64("delta", Some(0.1))?.expect("default");
    let eta = kv.take_f64("eta", Some(0.5))?.expect("default");
    let t_flag = kv.take_u64("t", None)?;
    let seed = required(kv.take_u64("seed", None)?, "seed")?;
    let out = PathBuf::from(kv.take_string("out", Some("upper")).expect("default"));
    kv.finish()?;
    check_out_prefix(&out)?;
    if instances == 0 || seeds == 0 || n_grid.is_empty() {
        return Err(OpeError::Config(
            "instances, seeds, and n_grid must be nonempty".into(),
        ));
    }

    let resolved = vec![
        ("mode".to_string(), "tabular".to_string()),
        ("n_states".to_string(), n_states.to_string()),
        ("n_actions".to_string(), n_actions.to_string()),
        ("gamma".to_string(), format_real(gamma)),
        ("reward_scale".to_string(), format_real(reward_scale)),
        ("instances".to_string(), instances.to_string()),
        ("seeds".to_string(), seeds.to_string()),
        (
            "n_grid".to_string(),
            n_grid
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("delta".to_string(), format_real(delta)),
        ("eta".to_string(), format_real(eta)),
        ("seed".to_string(), seed.to_string()),
        ("out".to_string(), out.display().to_string()),
    ];

    let cfg = RandomTabularConfig {
        n_states,
        n_actions,
        gamma,
        reward_scale,
    };

    struct Cell {
        instance: usize,
        data_seed: u64,
        n: usize,
    }
    let mut cells = Vec::new();
    for inst_idx in 0..instances {
        for k in 0..seeds {
            for &n in &n_grid {
                cells.push(Cell {
                    instance: inst_idx,
                    data_seed: derive_seed(seed, 2, (inst_idx * seeds + k) as u64),
                    n: n as usize,
                });
            }
        }
    }

    // One prepared instance per index; cells share them read-only.
    let prepared: Vec<_> = (0..instances)
        .map(|idx| {
            let inst = random_instance(&cfg, derive_seed(seed, 1, idx as u64))?;
            let lambda_cov = crate::features::exact_covariance(&inst.features, &inst.mu)?;
            let lambda_bar = crate::features::exact_next_covariance(
                &inst.mdp,
                &inst.features,
                &inst.policy,
                &inst.mu,
            )?;
            let lambda_bar0 = crate::features::target_covariance(
                &inst.features,
                &inst.policy,
                inst.target_state,
            )?;
            let shift = shift_constants(
                &lambda_cov.matrix,
                &lambda_bar.matrix,
                &lambda_bar0,
                eta,
                gamma,
            )?;
            Ok((inst, shift))
        })
        .collect::<Result<_>>()?;

    let rows: Vec<Vec<String>> = cells
        .par_iter()
        .map(|cell| {
            let (inst, shift) = &prepared[cell.instance];
            let ds = sample_dataset(&inst.mdp, &inst.mu, cell.n, cell.data_seed)?;
            let d = inst.features.dim;
            let lambda = regularization_lambda(cell.n, d, delta, eta)?;
            let t_iters = match t_flag {
                Some(t) => t as usize,
                None => default_iterations((shift.beta < 1.0).then_some(shift.beta), 0.1),
            };
            let run_cfg = LspeConfig::new(lambda, t_iters, eta, delta)?;
            let run = run_lspe(
                &ds,
                &inst.features,
                &inst.policy,
                gamma,
                &run_cfg,
                inst.target_state,
            )?;
            let v_exact = inst.exact.v[inst.target_state];
            let abs_err = (run.target_estimate - v_exact).abs();
            let bound = squared_error_bound(
                shift.c,
                shift.c0,
                eta,
                gamma,
                d,
                delta,
                cell.n,
                t_iters,
                inst.theta.norm(),
            )
            .map(format_real)
            .unwrap_or_else(|_| "nan".to_string());
            Ok(vec![
                cell.instance.to_string(),
                cell.data_seed.to_string(),
                cell.n.to_string(),
                format_real(shift.c),
                format_real(shift.c0),
                format_real(shift.beta),
                t_iters.to_string(),
                format_real(lambda),
                format_real(v_exact),
                format_real(run.target_estimate),
                format_real(abs_err),
                format_real(abs_err * abs_err),
                bound,
            ])
        })
        .collect::<Result<_>>()?;

    let errors_path = out_path(&out, "_errors.csv");
    let summary_path = out_path(&out, "_summary.txt");
    emit_csv(
        &errors_path,
        &[
            "instance",
            "data_seed",
            "n",
            "c",
            "c0",
            "beta",
            "t",
            "lambda",
            "v_exact",
            "v_hat",
            "abs_err",
            "sq_err",
            "bound_sq",
        ],
        &rows,
    )?;
    write_summary(
        &summary_path,
        "upper-sweep",
        &resolved,
        Some(seed),
        vec![
            ("cells".into(), rows.len().to_string()),
            ("errors_csv".into(), errors_path.display().to_string()),
        ],
    )?;
    Ok(CommandOutput {
        files: vec![errors_path, summary_path],
    })
}
