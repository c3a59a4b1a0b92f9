//! Componentwise Bussgang estimation: every component contributes its
//! conditional LMMSE filter, weighted by its posterior probability given the
//! quantized observation.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{gaussian_log_density, normalize_log_joint, GmmModel, MfaModel, MixturePrior, Responsibilities};
use crate::bussgang::{BussgangContext, CovarianceMode, LmmseFilter};
use crate::error::{invalid, Result};
use crate::frontend::{PilotConfig, QuantizerSpec};
use crate::linalg::{cholesky_whitener, matmul, CMatrix, HermitianSolver};

#[derive(Debug, Clone)]
struct Component {
    log_weight: f64,
    whitener: CMatrix,
    log_det: f64,
    filter: LmmseFilter,
}

/// Precomputed filters and observation densities of a mixture prior for one
/// `(pilots, σ², quantizer)` setting.
///
/// Components are stored in a canonical order (by weight, then covariance
/// entries) so the output does not depend on how the prior labels them.
#[derive(Debug, Clone)]
pub struct MixtureEstimator {
    antennas: usize,
    observation_len: usize,
    components: Vec<Component>,
    /// `order[i]` is the prior's index of stored component `i`.
    order: Vec<usize>,
}

fn canonical_cmp(wa: f64, ca: &CMatrix, wb: f64, cb: &CMatrix) -> Ordering {
    wa.total_cmp(&wb).then_with(|| {
        for (x, y) in ca.iter().zip(cb.iter()) {
            let o = x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im));
            if o != Ordering::Equal {
                return o;
            }
        }
        Ordering::Equal
    })
}

impl MixtureEstimator {
    pub fn new(
        weights: &[f64],
        covariances: &[CMatrix],
        pilots: &PilotConfig,
        sigma2: f64,
        q: &QuantizerSpec,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != covariances.len() {
            return Err(invalid("mixture needs matching nonempty weights and covariances"));
        }
        let antennas = covariances[0].nrows();
        let mut order: Vec<usize> = (0..weights.len()).collect();
        order.sort_by(|&a, &b| canonical_cmp(weights[a], &covariances[a], weights[b], &covariances[b]));
        let components = order
            .par_iter()
            .map(|&k| {
                let c_h = &covariances[k];
                let ctx = BussgangContext::for_channel(c_h, pilots, sigma2, q, CovarianceMode::Approximate)?;
                let solver = HermitianSolver::new(&ctx.c_r)?;
                let filter = LmmseFilter::from_solver(&solver, &ctx, c_h, pilots);
                let (whitener, log_det) = cholesky_whitener(&ctx.c_r)?;
                Ok(Component { log_weight: weights[k].ln(), whitener, log_det, filter })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { antennas, observation_len: antennas * pilots.len(), components, order })
    }

    pub fn from_prior(
        prior: &impl MixturePrior,
        pilots: &PilotConfig,
        sigma2: f64,
        q: &QuantizerSpec,
    ) -> Result<Self> {
        Self::new(prior.weights(), &prior.component_covariances(), pilots, sigma2, q)
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    /// Filter of the prior's component `k`.
    pub fn filter(&self, k: usize) -> &LmmseFilter {
        let pos = self.order.iter().position(|&o| o == k).expect("component index in range");
        &self.components[pos].filter
    }

    fn check(&self, r: &CMatrix) -> Result<()> {
        if r.nrows() != self.observation_len {
            return Err(invalid(format!(
                "observation length {} does not match N P = {}",
                r.nrows(),
                self.observation_len
            )));
        }
        Ok(())
    }

    /// Responsibilities in canonical component order, indexed `[k][t]`.
    fn canonical_responsibilities(&self, r: &CMatrix) -> Vec<Vec<f64>> {
        let mut log_joint: Vec<Vec<f64>> = self
            .components
            .par_iter()
            .map(|c| {
                let mut l = gaussian_log_density(&c.whitener, c.log_det, r);
                l.iter_mut().for_each(|x| *x += c.log_weight);
                l
            })
            .collect();
        normalize_log_joint(&mut log_joint);
        log_joint
    }

    /// `p(k | r_t)` for every column of `r`, columns in the prior's order.
    pub fn responsibilities(&self, r: &CMatrix) -> Result<Responsibilities> {
        self.check(r)?;
        let canon = self.canonical_responsibilities(r);
        let mut m = DMatrix::zeros(r.ncols(), self.components.len());
        for (pos, &k) in self.order.iter().enumerate() {
            for (t, &p) in canon[pos].iter().enumerate() {
                m[(t, k)] = p;
            }
        }
        Ok(Responsibilities(m))
    }

    fn combine(&self, r: &CMatrix, canon: &[Vec<f64>]) -> CMatrix {
        let mut out = CMatrix::zeros(self.antennas, r.ncols());
        for (c, p) in self.components.iter().zip(canon) {
            let y = matmul(&c.filter.matrix, r);
            for (t, &w) in p.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for i in 0..self.antennas {
                    out[(i, t)] += y[(i, t)] * w;
                }
            }
        }
        out
    }

    /// `sum_k p(k | r) W_k r` for every column of `r`.
    pub fn estimate(&self, r: &CMatrix) -> Result<CMatrix> {
        self.check(r)?;
        let canon = self.canonical_responsibilities(r);
        Ok(self.combine(r, &canon))
    }

    /// Convex combination with externally supplied responsibilities
    /// (`T x K`, prior order).
    pub fn estimate_with(&self, r: &CMatrix, resp: &Responsibilities) -> Result<CMatrix> {
        self.check(r)?;
        let m = resp.matrix();
        if m.nrows() != r.ncols() || m.ncols() != self.components.len() {
            return Err(invalid("responsibility matrix does not match observations and components"));
        }
        let canon: Vec<Vec<f64>> = self.order.iter().map(|&k| m.column(k).iter().copied().collect()).collect();
        Ok(self.combine(r, &canon))
    }
}

/// `p(k | r)` under the Gaussian approximation of the quantized observation.
pub fn responsibilities_quantized(
    prior: &impl MixturePrior,
    r: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
) -> Result<Responsibilities> {
    MixtureEstimator::from_prior(prior, pilots, sigma2, q)?.responsibilities(r)
}

/// BGMM estimate of every column of `r`.
pub fn estimate_bgmm(
    model: &GmmModel,
    r: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
) -> Result<CMatrix> {
    MixtureEstimator::from_prior(model, pilots, sigma2, q)?.estimate(r)
}

/// BMFA estimate of every column of `r`.
pub fn estimate_bmfa(
    model: &MfaModel,
    r: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
) -> Result<CMatrix> {
    MixtureEstimator::from_prior(model, pilots, sigma2, q)?.estimate(r)
}
