//! Zero-mean mixture of factor analyzers with isotropic noise floors,
//! `C_k = W_k W_k^H + ψ_k I`.

use rand::Rng;

use super::kmeans::kmeans_labels;
use super::{
    component_objective, e_step, weighted_scatter, EmOptions, FitReport, MixturePrior, COLLAPSE_COUNT, REGULARIZATION,
};
use crate::error::{invalid, Result};
use crate::linalg::{matmul_adj, trace_real, CMatrix, HermitianEigen, C64};

/// Trained mixture of factor analyzers.
#[derive(Debug, Clone, PartialEq)]
pub struct MfaModel {
    weights: Vec<f64>,
    loadings: Vec<CMatrix>,
    psi: Vec<f64>,
}

impl MfaModel {
    pub fn new(weights: Vec<f64>, loadings: Vec<CMatrix>, psi: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != loadings.len() || weights.len() != psi.len() {
            return Err(invalid("weights, loadings and noise floors must have equal nonzero length"));
        }
        let (n, l) = (loadings[0].nrows(), loadings[0].ncols());
        if l >= n || loadings.iter().any(|w| w.nrows() != n || w.ncols() != l) {
            return Err(invalid(format!("loadings must all be N x L with L < N, got {n} x {l}")));
        }
        if psi.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(invalid("noise floors must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mixture weights must be a probability vector (sum {sum})")));
        }
        let weights = weights.iter().map(|w| w / sum).collect();
        Ok(Self { weights, loadings, psi })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn antennas(&self) -> usize {
        self.loadings[0].nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.loadings[0].ncols()
    }

    pub fn loadings(&self) -> &[CMatrix] {
        &self.loadings
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn covariance(&self, k: usize) -> CMatrix {
        factor_covariance(&self.loadings[k], self.psi[k])
    }

    pub fn log_likelihood(&self, data: &CMatrix) -> Result<f64> {
        Ok(e_step(&self.weights, &self.component_covariances(), data)?.1)
    }
}

impl MixturePrior for MfaModel {
    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn component_covariances(&self) -> Vec<CMatrix> {
        (0..self.num_components()).map(|k| self.covariance(k)).collect()
    }
}

fn factor_covariance(w: &CMatrix, psi: f64) -> CMatrix {
    let mut c = matmul_adj(w, w);
    for i in 0..c.nrows() {
        c[(i, i)] += psi;
    }
    c
}

/// Maximum-likelihood factor analyzer for a scatter matrix: the leading `l`
/// eigenpairs give the loadings, the mean of the rest the noise floor.
fn ppca(scatter: &CMatrix, l: usize) -> (CMatrix, f64) {
    let n = scatter.nrows();
    let eig = HermitianEigen::new(scatter);
    let floor = REGULARIZATION * trace_real(scatter).abs().max(f64::MIN_POSITIVE) / n as f64;
    let tail = n - l;
    let psi = (eig.values.iter().take(tail).sum::<f64>() / tail as f64).max(floor);
    let mut w = CMatrix::zeros(n, l);
    for j in 0..l {
        let idx = n - 1 - j;
        let scale = (eig.values[idx] - psi).max(0.0).sqrt();
        w.set_column(j, &(eig.vectors.column(idx) * C64::new(scale, 0.0)));
    }
    (w, psi)
}

/// Fits a zero-mean MFA with `k` components of latent dimension `l` by EM.
pub fn fit_mfa<R: Rng + ?Sized>(
    data: &CMatrix,
    k: usize,
    l: usize,
    opts: EmOptions,
    rng: &mut R,
) -> Result<(MfaModel, FitReport)> {
    let n = data.nrows();
    if k == 0 || l == 0 || l >= n {
        return Err(invalid(format!("need K >= 1 and 1 <= L < N, got K = {k}, L = {l}, N = {n}")));
    }
    if data.ncols() < 10 * k {
        return Err(invalid(format!("need at least 10 K = {} samples, got {}", 10 * k, data.ncols())));
    }
    let t = data.ncols() as f64;
    let labels = kmeans_labels(data, k, rng);
    let global = weighted_scatter(data, &vec![1.0; data.ncols()]).0;
    let mut weights = Vec::with_capacity(k);
    let mut factors = Vec::with_capacity(k);
    for j in 0..k {
        let member: Vec<f64> = labels.iter().map(|&lab| if lab == j { 1.0 } else { 0.0 }).collect();
        let count: f64 = member.iter().sum();
        let scatter = if count >= 2.0 { weighted_scatter(data, &member).0 } else { global.clone() };
        weights.push(count.max(1.0) / t);
        factors.push(ppca(&scatter, l));
    }
    let norm: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= norm);

    let covs = |f: &[(CMatrix, f64)]| f.iter().map(|(w, p)| factor_covariance(w, *p)).collect::<Vec<_>>();
    let (mut resp, mut ll) = e_step(&weights, &covs(&factors), data)?;
    let mut report = FitReport { log_likelihood: vec![ll], ..Default::default() };
    for _ in 0..opts.max_iter {
        let mut reseeded = false;
        for (j, factor) in factors.iter_mut().enumerate() {
            let (scatter, count) = weighted_scatter(data, &resp[j]);
            if count < COLLAPSE_COUNT {
                log::warn!("MFA component {j} collapsed (weight {count:e}); re-seeding from a random sample");
                let h = data.column(rng.random_range(0..data.ncols())).into_owned();
                let mut c = &h * h.adjoint();
                let load = (h.norm_squared() / n as f64).max(f64::MIN_POSITIVE);
                for i in 0..n {
                    c[(i, i)] += load;
                }
                *factor = ppca(&c, l);
                weights[j] = 1.0 / k as f64;
                reseeded = true;
                continue;
            }
            weights[j] = count / t;
            let candidate = ppca(&scatter, l);
            let q_new = component_objective(&factor_covariance(&candidate.0, candidate.1), &scatter);
            let q_old = component_objective(&factor_covariance(&factor.0, factor.1), &scatter)?;
            if matches!(q_new, Ok(q) if q >= q_old) {
                *factor = candidate;
            }
        }
        let norm: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= norm);
        if reseeded {
            report.reinitialized += 1;
            report.reseeded_at.push(report.log_likelihood.len());
        }
        let prev = ll;
        (resp, ll) = e_step(&weights, &covs(&factors), data)?;
        report.log_likelihood.push(ll);
        if !reseeded && (ll - prev).abs() <= opts.tol * prev.abs().max(1e-300) {
            report.converged = true;
            break;
        }
    }
    let (loadings, psi) = factors.into_iter().unzip();
    Ok((MfaModel::new(weights, loadings, psi)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::sample_channels;
    use crate::linalg::{relative_frobenius, sample_covariance};
    use crate::rng::stream;

    #[test]
    fn isotropic_data_gives_noise_floor() {
        let mut rng = stream(5, 0);
        let cov = CMatrix::identity(6, 6) * C64::new(2.5, 0.0);
        let data = sample_channels(&cov, 20_000, &mut rng).unwrap();
        let (model, _) = fit_mfa(&data, 1, 2, EmOptions::default(), &mut rng).unwrap();
        assert!((model.psi()[0] - 2.5).abs() < 0.05 * 2.5, "psi {}", model.psi()[0]);
        let w = &model.loadings()[0];
        assert!(w.norm() < 0.2 * (2.5f64 * 6.0).sqrt());
    }

    #[test]
    fn full_rank_factor_matches_sample_covariance() {
        let mut rng = stream(6, 0);
        let cov = CMatrix::from_fn(5, 5, |i, j| C64::from_polar(0.8f64.powi((i as i32 - j as i32).abs()), 0.4 * (i as f64 - j as f64)));
        let data = sample_channels(&cov, 5000, &mut rng).unwrap();
        let (model, _) = fit_mfa(&data, 1, 4, EmOptions::default(), &mut rng).unwrap();
        assert!(relative_frobenius(&model.covariance(0), &sample_covariance(&data)) < 0.1);
    }

    #[test]
    fn weights_stay_normalized_and_ll_monotone() {
        let mut rng = stream(7, 0);
        let a = sample_channels(&CMatrix::from_fn(6, 6, |i, j| C64::new(0.9f64.powi((i as i32 - j as i32).abs()), 0.0)), 300, &mut rng).unwrap();
        let data = CMatrix::from_fn(6, 600, |i, t| if t < 300 { a[(i, t)] } else { a[(i, t - 300)] * C64::new(0.0, 2.0) + C64::new(0.1 * i as f64, 0.0) });
        for iters in [0, 1, 7] {
            let (model, report) = fit_mfa(&data, 3, 2, EmOptions { max_iter: iters, tol: 0.0 }, &mut rng).unwrap();
            assert!((model.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for w in report.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-8);
            }
        }
        assert!(fit_mfa(&data, 1, 6, EmOptions::default(), &mut rng).is_err());
    }
}
