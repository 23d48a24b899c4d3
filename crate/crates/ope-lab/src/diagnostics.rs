//! Empirical covariance estimation, matrix-concentration checks, and
//! assumption audits for arbitrary instance/dataset pairs.

use nalgebra::DMatrix;

use crate::error::OpeError;
use crate::features::{
    check_realizability, exact_covariance, exact_next_covariance, target_covariance, FeatureSystem,
    LinearParam, StateDistribution,
};
use crate::lspe::{shift_constants, ShiftConstants, C1};
use crate::mdp::{FiniteMdp, Policy};
use crate::sampler::OfflineDataset;
use crate::Result;

/// Spectral norm of a symmetric matrix: the largest absolute eigenvalue.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(0.0f64, |acc, &e| acc.max(e.abs()))
}

/// The deviation threshold `C1 sqrt(ln(2d / delta) / n)`.
pub fn concentration_bound(n: usize, d: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(OpeError::EmptyDataset);
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(OpeError::invalid(format!("delta = {delta} not in (0, 1)")));
    }
    Ok(C1 * ((2.0 * d as f64 / delta).ln() / n as f64).sqrt())
}

/// Empirical Gram matrices of a dataset.
#[derive(Debug, Clone)]
pub struct EmpiricalCovariances {
    /// `(1/N) Phi^T Phi`.
    pub lambda_emp: DMatrix<f64>,
    /// `(1/N) PhiBar^T PhiBar` with rows `tilde_phi(sbar_i)`.
    pub lambda_bar_emp: DMatrix<f64>,
    pub n: usize,
}

/// Streams over the dataset once, accumulating both Gram matrices.
pub fn empirical_covariances(
    ds: &OfflineDataset,
    fs: &FeatureSystem,
    policy: &Policy,
) -> Result<EmpiricalCovariances> {
    if ds.records.is_empty() {
        return Err(OpeError::EmptyDataset);
    }
    let d = fs.dim;
    let n_states = fs.phi.len();
    let mut tilde_cache: Vec<Option<nalgebra::DVector<f64>>> = vec![None; n_states];
    let mut lambda = DMatrix::<f64>::zeros(d, d);
    let mut lambda_bar = DMatrix::<f64>::zeros(d, d);
    for rec in &ds.records {
        let phi = fs.get(rec.state, rec.action)?;
        lambda.syger(1.0, phi, phi, 1.0);
        if rec.next_state >= n_states {
            return Err(OpeError::IndexOutOfRange(format!(
                "next state {}",
                rec.next_state
            )));
        }
        if tilde_cache[rec.next_state].is_none() {
            tilde_cache[rec.next_state] =
                Some(crate::features::tilde_phi(fs, policy, rec.next_state)?);
        }
        let tp = tilde_cache[rec.next_state].as_ref().expect("filled");
        lambda_bar.syger(1.0, tp, tp, 1.0);
    }
    lambda.fill_upper_triangle_with_lower_triangle();
    lambda_bar.fill_upper_triangle_with_lower_triangle();
    let nf = ds.n() as f64;
    Ok(EmpiricalCovariances {
        lambda_emp: lambda / nf,
        lambda_bar_emp: lambda_bar / nf,
        n: ds.n(),
    })
}

/// Outcome of comparing empirical deviations to the concentration threshold.
#[derive(Debug, Clone, Copy)]
pub struct ConcentrationReport {
    pub bound: f64,
    pub dev_lambda: f64,
    pub dev_lambda_bar: f64,
    /// `bound - deviation` for each matrix; negative margins fail.
    pub margin_lambda: f64,
    pub margin_lambda_bar: f64,
    pub lambda_within: bool,
    pub lambda_bar_within: bool,
}

impl ConcentrationReport {
    pub fn both_within(&self) -> bool {
        self.lambda_within && self.lambda_bar_within
    }
}

/// Compares both spectral deviations to `C1 sqrt(ln(2d/delta) / n)`.
pub fn concentration_check(
    emp: &EmpiricalCovariances,
    exact_lambda: &DMatrix<f64>,
    exact_lambda_bar: &DMatrix<f64>,
    delta: f64,
) -> Result<ConcentrationReport> {
    let d = exact_lambda.nrows();
    let bound = concentration_bound(emp.n, d, delta)?;
    let dev_lambda = spectral_norm(&(&emp.lambda_emp - exact_lambda));
    let dev_lambda_bar = spectral_norm(&(&emp.lambda_bar_emp - exact_lambda_bar));
    Ok(ConcentrationReport {
        bound,
        dev_lambda,
        dev_lambda_bar,
        margin_lambda: bound - dev_lambda,
        margin_lambda_bar: bound - dev_lambda_bar,
        lambda_within: dev_lambda <= bound,
        lambda_bar_within: dev_lambda_bar <= bound,
    })
}

/// Consolidated audit of the working assumptions for one instance.
#[derive(Debug, Clone, Copy)]
pub struct AssumptionAudit {
    /// Max residual of the linear q-function against the exact solve.
    pub realizability_residual: f64,
    /// Largest feature norm; must not exceed 1.
    pub max_feature_norm: f64,
    pub lambda_min: f64,
    pub lambda_trace: f64,
    pub shift: ShiftConstants,
}

/// Audits one instance: realizability residual, feature norms, coverage
/// eigenvalue, and the distribution-shift constants.
#[allow(clippy::too_many_arguments)]
pub fn audit_assumptions(
    mdp: &FiniteMdp,
    policy: &Policy,
    fs: &FeatureSystem,
    theta: &LinearParam,
    mu: &StateDistribution,
    target_state: usize,
    eta: f64,
) -> Result<AssumptionAudit> {
    let realizability_residual = check_realizability(mdp, policy, fs, theta)?;
    let max_feature_norm = fs.max_norm();
    let lambda = exact_covariance(fs, mu)?;
    let lambda_bar = exact_next_covariance(mdp, fs, policy, mu)?;
    let lambda_bar0 = target_covariance(fs, policy, target_state)?;
    let shift = shift_constants(
        &lambda.matrix,
        &lambda_bar.matrix,
        &lambda_bar0,
        eta,
        mdp.gamma,
    )?;
    Ok(AssumptionAudit {
        realizability_residual,
        max_feature_norm,
        lambda_min: lambda.lambda_min,
        lambda_trace: lambda.trace,
        shift,
    })
}
