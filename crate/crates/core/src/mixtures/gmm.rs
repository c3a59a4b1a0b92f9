//! Zero-mean GMM with full, Toeplitz or circulant component covariances.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::kmeans::kmeans_labels;
use super::{
    component_objective, e_step, weighted_scatter, EmOptions, FitReport, MixturePrior, COLLAPSE_COUNT,
    REGULARIZATION,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::{
    circulant_from_spectrum, dft_matrix, hermitize, matmul, matmul_adj, toeplitz_hermitian, trace_real, CMatrix,
    HermitianEigen, C64,
};

/// Constraint imposed on every component covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CovStructure {
    Full,
    Toeplitz,
    Circulant,
}

impl CovStructure {
    pub const ALL: [CovStructure; 3] = [CovStructure::Full, CovStructure::Toeplitz, CovStructure::Circulant];

    pub fn name(self) -> &'static str {
        match self {
            CovStructure::Full => "full",
            CovStructure::Toeplitz => "toeplitz",
            CovStructure::Circulant => "circulant",
        }
    }
}

impl fmt::Display for CovStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CovStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CovStructure::Full),
            "toeplitz" => Ok(CovStructure::Toeplitz),
            "circulant" => Ok(CovStructure::Circulant),
            other => Err(invalid(format!("unknown covariance structure '{other}'"))),
        }
    }
}

/// Trained zero-mean Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    covariances: Vec<CMatrix>,
    structure: CovStructure,
    spectra: Option<Vec<Vec<f64>>>,
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(invalid("mixture needs at least one component"));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(invalid("mixture weights must be finite and nonnegative"));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("mixture weights sum to {sum}, expected 1")));
    }
    Ok(())
}

fn normalized(mut weights: Vec<f64>) -> Vec<f64> {
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    weights
}

impl GmmModel {
    /// Model with explicit covariances. Circulant models must be built with
    /// [`GmmModel::from_spectra`].
    pub fn new(weights: Vec<f64>, covariances: Vec<CMatrix>, structure: CovStructure) -> Result<Self> {
        check_weights(&weights)?;
        if weights.len() != covariances.len() {
            return Err(invalid("weights and covariances differ in length"));
        }
        let n = covariances[0].nrows();
        if covariances.iter().any(|c| c.nrows() != n || c.ncols() != n) {
            return Err(invalid("component covariances must all be N x N"));
        }
        if structure == CovStructure::Circulant {
            let f = dft_matrix(n);
            let spectra = covariances
                .iter()
                .map(|c| matmul_adj(&matmul(&f, c), &f).diagonal().iter().map(|z| z.re).collect())
                .collect::<Vec<Vec<f64>>>();
            return Self::from_spectra(weights, spectra);
        }
        Ok(Self { weights: normalized(weights), covariances, structure, spectra: None })
    }

    /// Circulant model `F^H diag(c_k) F` from per-component spectra.
    pub fn from_spectra(weights: Vec<f64>, spectra: Vec<Vec<f64>>) -> Result<Self> {
        check_weights(&weights)?;
        if weights.len() != spectra.len() {
            return Err(invalid("weights and spectra differ in length"));
        }
        let n = spectra[0].len();
        if n == 0 || spectra.iter().any(|s| s.len() != n || s.iter().any(|v| !(*v >= 0.0))) {
            return Err(invalid("spectra must be nonnegative and of equal length"));
        }
        let covariances = spectra.iter().map(|s| circulant_from_spectrum(s)).collect();
        Ok(Self {
            weights: normalized(weights),
            covariances,
            structure: CovStructure::Circulant,
            spectra: Some(spectra),
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn antennas(&self) -> usize {
        self.covariances[0].nrows()
    }

    pub fn structure(&self) -> CovStructure {
        self.structure
    }

    pub fn covariances(&self) -> &[CMatrix] {
        &self.covariances
    }

    pub fn spectra(&self) -> Option<&[Vec<f64>]> {
        self.spectra.as_deref()
    }

    /// Mean per-sample log-likelihood of the columns of `data`.
    pub fn log_likelihood(&self, data: &CMatrix) -> Result<f64> {
        Ok(e_step(&self.weights, &self.covariances, data)?.1)
    }
}

impl MixturePrior for GmmModel {
    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn component_covariances(&self) -> Vec<CMatrix> {
        self.covariances.clone()
    }
}

/// One component during fitting.
#[derive(Debug, Clone)]
pub(crate) struct Component {
    pub cov: CMatrix,
    pub spectrum: Option<Vec<f64>>,
}

impl Component {
    fn mix(&self, other: &Component, alpha: f64) -> Component {
        let a = C64::new(alpha, 0.0);
        let b = C64::new(1.0 - alpha, 0.0);
        match (&self.spectrum, &other.spectrum) {
            (Some(s), Some(o)) => {
                let spectrum: Vec<f64> = s.iter().zip(o).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
                Component { cov: circulant_from_spectrum(&spectrum), spectrum: Some(spectrum) }
            }
            _ => Component { cov: &self.cov * b + &other.cov * a, spectrum: None },
        }
    }
}

/// Maps a Hermitian scatter matrix onto the structure, adding
/// `REGULARIZATION * trace / N` to the diagonal (or spectrum).
pub(crate) fn project(structure: CovStructure, scatter: &CMatrix) -> Component {
    let n = scatter.nrows();
    let eps = REGULARIZATION * trace_real(scatter).abs().max(f64::MIN_POSITIVE) / n as f64;
    match structure {
        CovStructure::Full => {
            let mut c = hermitize(scatter);
            for i in 0..n {
                c[(i, i)] += eps;
            }
            Component { cov: c, spectrum: None }
        }
        CovStructure::Toeplitz => {
            let mut col: Vec<C64> = (0..n)
                .map(|m| (0..n - m).map(|i| scatter[(i + m, i)]).sum::<C64>() / (n - m) as f64)
                .collect();
            col[0] = C64::new(col[0].re, 0.0);
            let t = toeplitz_hermitian(&col);
            let min = HermitianEigen::new(&t).min();
            col[0] += eps + (-min).max(0.0);
            Component { cov: toeplitz_hermitian(&col), spectrum: None }
        }
        CovStructure::Circulant => {
            let f = dft_matrix(n);
            let d = matmul_adj(&matmul(&f, scatter), &f);
            let spectrum: Vec<f64> = d.diagonal().iter().map(|z| z.re.max(0.0) + eps).collect();
            Component { cov: circulant_from_spectrum(&spectrum), spectrum: Some(spectrum) }
        }
    }
}

/// Generalized M-step for one component: the projected scatter is accepted
/// if it does not lower the component objective; otherwise the step towards
/// it is halved up to ten times before the old covariance is kept.
pub(crate) fn safeguarded_update(old: &Component, candidate: Component, scatter: &CMatrix) -> Result<Component> {
    let q_old = component_objective(&old.cov, scatter)?;
    let mut alpha = 1.0;
    for _ in 0..=10 {
        let trial = if alpha == 1.0 { candidate.clone() } else { old.mix(&candidate, alpha) };
        if let Ok(q) = component_objective(&trial.cov, scatter) {
            if q >= q_old {
                return Ok(trial);
            }
        }
        alpha *= 0.5;
    }
    Ok(old.clone())
}

pub(crate) fn reseed<R: Rng + ?Sized>(structure: CovStructure, data: &CMatrix, rng: &mut R) -> Component {
    let t = rng.random_range(0..data.ncols());
    let h = data.column(t).into_owned();
    let n = h.len();
    let mut c = &h * h.adjoint();
    let load = h.norm_squared() / n as f64;
    for i in 0..n {
        c[(i, i)] += load.max(f64::MIN_POSITIVE);
    }
    project(structure, &c)
}

fn initial_components<R: Rng + ?Sized>(
    data: &CMatrix,
    k: usize,
    structure: CovStructure,
    rng: &mut R,
) -> (Vec<f64>, Vec<Component>) {
    let t = data.ncols();
    let labels = kmeans_labels(data, k, rng);
    let global = weighted_scatter(data, &vec![1.0; t]).0;
    let mut weights = Vec::with_capacity(k);
    let mut comps = Vec::with_capacity(k);
    for j in 0..k {
        let member: Vec<f64> = labels.iter().map(|&l| if l == j { 1.0 } else { 0.0 }).collect();
        let count: f64 = member.iter().sum();
        let scatter = if count >= 2.0 { weighted_scatter(data, &member).0 } else { global.clone() };
        weights.push(count.max(1.0));
        comps.push(project(structure, &scatter));
    }
    (normalized(weights), comps)
}

fn validate(data: &CMatrix, k: usize) -> Result<()> {
    if k == 0 {
        return Err(invalid("component count must be at least 1"));
    }
    if data.nrows() == 0 {
        return Err(invalid("samples must have at least one entry"));
    }
    if data.ncols() < 10 * k {
        return Err(invalid(format!("need at least 10 K = {} samples, got {}", 10 * k, data.ncols())));
    }
    Ok(())
}

/// Fits a zero-mean GMM to the columns of `data` by EM.
///
/// The per-sample log-likelihood is nondecreasing over iterations (up to
/// rounding), except after a collapsed component is re-seeded.
pub fn fit_gmm<R: Rng + ?Sized>(
    data: &CMatrix,
    k: usize,
    structure: CovStructure,
    opts: EmOptions,
    rng: &mut R,
) -> Result<(GmmModel, FitReport)> {
    validate(data, k)?;
    let t = data.ncols() as f64;
    let (mut weights, mut comps) = initial_components(data, k, structure, rng);
    let covs = |comps: &[Component]| comps.iter().map(|c| c.cov.clone()).collect::<Vec<_>>();

    let (mut resp, mut ll) = e_step(&weights, &covs(&comps), data)?;
    let mut report = FitReport { log_likelihood: vec![ll], ..Default::default() };
    for _ in 0..opts.max_iter {
        let mut reseeded = false;
        let mut new_weights = Vec::with_capacity(k);
        for (j, comp) in comps.iter_mut().enumerate() {
            let (scatter, count) = weighted_scatter(data, &resp[j]);
            if count < COLLAPSE_COUNT {
                log::warn!("GMM component {j} collapsed (weight {count:e}); re-seeding from a random sample");
                *comp = reseed(structure, data, rng);
                new_weights.push(1.0 / k as f64);
                reseeded = true;
                continue;
            }
            new_weights.push(count / t);
            *comp = safeguarded_update(comp, project(structure, &scatter), &scatter)?;
        }
        weights = normalized(new_weights);
        if reseeded {
            report.reinitialized += 1;
            report.reseeded_at.push(report.log_likelihood.len());
        }
        let prev = ll;
        (resp, ll) = e_step(&weights, &covs(&comps), data)?;
        report.log_likelihood.push(ll);
        if !reseeded && (ll - prev).abs() <= opts.tol * prev.abs().max(1e-300) {
            report.converged = true;
            break;
        }
    }
    let model = match structure {
        CovStructure::Circulant => {
            GmmModel::from_spectra(weights, comps.into_iter().map(|c| c.spectrum.expect("circulant")).collect())?
        }
        _ => GmmModel::new(weights, covs(&comps), structure)?,
    };
    Ok((model, report))
}
