//! Zero-mean Gaussian mixture and mixture-of-factor-analyzers priors, fitted
//! by EM, and the componentwise Bussgang estimators built on them.

mod estimator;
mod gmm;
mod kmeans;

pub(crate) use kmeans::kmeans_labels;
mod mfa;

pub use estimator::{estimate_bgmm, estimate_bmfa, responsibilities_quantized, MixtureEstimator};
pub use gmm::{fit_gmm, CovStructure, GmmModel};
pub use mfa::{fit_mfa, MfaModel};

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::linalg::{cholesky_whitener, hermitize, matmul, matmul_adj, CMatrix, C64};

/// Relative diagonal regularization added to every fitted covariance.
pub const REGULARIZATION: f64 = 1e-6;

/// A component whose effective sample count falls below this is re-seeded.
pub const COLLAPSE_COUNT: f64 = 0.01;

/// Stopping rule of an EM run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Relative change of the mean log-likelihood below which EM stops.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6 }
    }
}

/// Trace of an EM run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitReport {
    /// Mean per-sample log-likelihood, one entry per E-step (the first is
    /// the initialization).
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    /// Number of component re-seedings after collapse. Iterations with a
    /// re-seeding are not covered by the monotonicity guarantee.
    pub reinitialized: usize,
    /// Indices into `log_likelihood` whose preceding M-step re-seeded a
    /// component.
    pub reseeded_at: Vec<usize>,
}

impl FitReport {
    pub fn iterations(&self) -> usize {
        self.log_likelihood.len().saturating_sub(1)
    }
}

/// Weights and per-component covariances of a zero-mean mixture.
pub trait MixturePrior {
    fn weights(&self) -> &[f64];
    fn component_covariances(&self) -> Vec<CMatrix>;
}

/// Posterior component probabilities, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(pub DMatrix<f64>);

impl Responsibilities {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn num_samples(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.0.ncols()
    }
}

/// Log-density of every column of `data` under `CN(0, C)`, given the whitener
/// `L^{-1}` and `ln det C` of `C`.
pub(crate) fn gaussian_log_density(whitener: &CMatrix, log_det: f64, data: &CMatrix) -> Vec<f64> {
    let n = data.nrows() as f64;
    let z = matmul(whitener, data);
    let constant = -n * PI.ln() - log_det;
    z.column_iter()
        .map(|c| constant - c.iter().map(|v| v.norm_sqr()).sum::<f64>())
        .collect()
}

/// Normalizes log-joint values (`K x T`, indexed `[k][t]`) into
/// responsibilities in place and returns the per-sample log-evidence.
///
/// A sample with no finite log-density gets uniform responsibilities.
pub(crate) fn normalize_log_joint(log_joint: &mut [Vec<f64>]) -> Vec<f64> {
    let k = log_joint.len();
    let t = log_joint.first().map_or(0, |v| v.len());
    let mut evidence = vec![0.0; t];
    let mut degenerate = 0usize;
    for (s, ev) in evidence.iter_mut().enumerate() {
        let max = log_joint.iter().map(|row| row[s]).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            degenerate += 1;
            for row in log_joint.iter_mut() {
                row[s] = 1.0 / k as f64;
            }
            *ev = f64::NEG_INFINITY;
            continue;
        }
        let sum: f64 = log_joint.iter().map(|row| (row[s] - max).exp()).sum();
        let lse = max + sum.ln();
        for row in log_joint.iter_mut() {
            row[s] = (row[s] - lse).exp();
        }
        *ev = lse;
    }
    if degenerate > 0 {
        log::warn!("{degenerate} samples had no finite component density; using uniform responsibilities");
    }
    evidence
}

/// E-step: responsibilities (`[k][t]`) and mean log-likelihood of the columns
/// of `data` under the mixture `(weights, covs)`.
pub(crate) fn e_step(weights: &[f64], covs: &[CMatrix], data: &CMatrix) -> Result<(Vec<Vec<f64>>, f64)> {
    if weights.len() != covs.len() {
        return Err(invalid("weights and covariances differ in length"));
    }
    let mut log_joint = covs
        .par_iter()
        .zip(weights.par_iter())
        .map(|(c, &w)| {
            let (whitener, log_det) = cholesky_whitener(c)?;
            let mut l = gaussian_log_density(&whitener, log_det, data);
            let lw = w.ln();
            l.iter_mut().for_each(|x| *x += lw);
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()?;
    let evidence = normalize_log_joint(&mut log_joint);
    let mean = evidence.iter().sum::<f64>() / evidence.len().max(1) as f64;
    Ok((log_joint, mean))
}

/// `sum_t w_t x_t x_t^H / sum_t w_t` and `sum_t w_t`.
pub(crate) fn weighted_scatter(data: &CMatrix, weights: &[f64]) -> (CMatrix, f64) {
    let total: f64 = weights.iter().sum();
    let mut scaled = data.clone();
    for (mut col, &w) in scaled.column_iter_mut().zip(weights) {
        col.scale_mut(w.max(0.0));
    }
    let s = hermitize(&matmul_adj(&scaled, data));
    (s / C64::new(total.max(f64::MIN_POSITIVE), 0.0), total)
}

/// Expected complete-data objective of one component, per unit weight:
/// `-(ln det C + tr(C^{-1} S))`.
pub(crate) fn component_objective(c: &CMatrix, scatter: &CMatrix) -> Result<f64> {
    let (whitener, log_det) = cholesky_whitener(c)?;
    let m = matmul(&whitener, scatter);
    let tr: f64 = m
        .iter()
        .zip(whitener.iter())
        .map(|(a, b)| (a * b.conj()).re)
        .sum();
    Ok(-(log_det + tr))
}
