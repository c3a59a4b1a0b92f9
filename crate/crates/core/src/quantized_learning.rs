//! Learning second-order statistics from quantized observations only.
//!
//! The covariance of a Gaussian input is recovered in two independent parts:
//! the correlation matrix from the signs of the samples (inverse arcsine
//! law) and the per-entry variances from the fraction of samples falling
//! inside each positive threshold, which follows a half-normal CDF in the
//! unknown standard deviation. The GMM fit without ground-truth channels
//! runs EM with this recovery in its M-step.

use std::f64::consts::{FRAC_2_SQRT_PI, PI, SQRT_2};

use rand::Rng;

use crate::bussgang::{BussgangContext, CovarianceMode};
use crate::error::{invalid, Result};
use crate::frontend::{one_bit, QuantizerSpec};
use crate::linalg::{psd_project, trace_real, CMatrix, HermitianEigen, C64};
use crate::mixtures::{e_step, weighted_scatter, EmOptions, FitReport, GmmModel, CovStructure, COLLAPSE_COUNT, REGULARIZATION};
use crate::special::{erf, erf_inv};

/// Gauss-Newton iteration cap.
pub const MAX_GN_ITERATIONS: usize = 50;
/// Convergence threshold on the relative change of `ξ²`.
pub const GN_TOLERANCE: f64 = 1e-5;
const MIN_XI: f64 = 1e-8;
const MAX_HALVINGS: usize = 10;

/// Outcome of one variance solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceFit {
    /// Recovered complex variance `2 ξ²`.
    pub variance: f64,
    /// Recovered per-real-dimension standard deviation.
    pub xi: f64,
    pub iterations: usize,
    pub converged: bool,
    /// False when every sample probability was 0 or 1, so only the clamped
    /// starting point is available.
    pub identifiable: bool,
}

/// Half-normal CDF equations `erf(τ̃_i / (√2 ξ)) = p̂_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfEquationSystem {
    /// `τ̃_i` for each equation.
    pub thresholds: Vec<f64>,
    /// Sample probability `p̂_i` for each equation.
    pub probabilities: Vec<f64>,
    /// Effective sample count, used to clamp the starting point.
    pub samples: f64,
}

impl CdfEquationSystem {
    /// Appends the equations of `other` (pooling dimensions).
    pub fn extend(&mut self, other: &CdfEquationSystem) {
        self.thresholds.extend_from_slice(&other.thresholds);
        self.probabilities.extend_from_slice(&other.probabilities);
        self.samples = self.samples.max(other.samples);
    }

    fn sse(&self, xi: f64) -> f64 {
        self.thresholds
            .iter()
            .zip(&self.probabilities)
            .map(|(t, p)| {
                let r = erf(t / (SQRT_2 * xi)) - p;
                r * r
            })
            .sum()
    }

    /// Starting point from the equation of the largest threshold, with `p̂`
    /// clamped to `[1/(2T), 1 - 1/(2T)]`.
    fn initial_xi(&self) -> f64 {
        let (i, &tau) = self
            .thresholds
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("nonempty equation system");
        let eps = 0.5 / self.samples.max(1.0);
        let p = self.probabilities[i].clamp(eps, 1.0 - eps);
        (tau / (SQRT_2 * erf_inv(p))).max(MIN_XI)
    }

    /// Damped Gauss-Newton solve in `ξ`.
    pub fn solve(&self) -> VarianceFit {
        let identifiable = self.probabilities.iter().any(|&p| p > 0.0 && p < 1.0);
        let mut xi = self.initial_xi();
        let fit = |xi: f64, iterations, converged| VarianceFit {
            variance: 2.0 * xi * xi,
            xi,
            iterations,
            converged,
            identifiable,
        };
        if !identifiable {
            return fit(xi, 0, false);
        }
        let mut sse = self.sse(xi);
        for it in 1..=MAX_GN_ITERATIONS {
            let (mut jtj, mut jtr) = (0.0, 0.0);
            for (&t, &p) in self.thresholds.iter().zip(&self.probabilities) {
                let a = t / SQRT_2;
                let r = erf(a / xi) - p;
                let j = -FRAC_2_SQRT_PI * (-(a / xi).powi(2)).exp() * a / (xi * xi);
                jtj += j * j;
                jtr += j * r;
            }
            if jtj <= 0.0 || !jtj.is_finite() {
                log::warn!("Gauss-Newton stalled at ξ = {xi:e}: vanishing Jacobian");
                return fit(xi, it, false);
            }
            let mut step = -jtr / jtj;
            let mut next = (xi + step).max(MIN_XI);
            let mut next_sse = self.sse(next);
            let mut halvings = 0;
            while next_sse > sse && halvings < MAX_HALVINGS {
                step *= 0.5;
                next = (xi + step).max(MIN_XI);
                next_sse = self.sse(next);
                halvings += 1;
            }
            if next_sse > sse {
                // No descent along the Gauss-Newton direction: xi is a
                // stationary point up to rounding.
                return fit(xi, it, true);
            }
            let change = (next * next - xi * xi).abs();
            xi = next;
            sse = next_sse;
            if change < GN_TOLERANCE * xi * xi {
                return fit(xi, it, true);
            }
        }
        log::warn!("Gauss-Newton did not converge in {MAX_GN_ITERATIONS} iterations (ξ = {xi:e})");
        fit(xi, MAX_GN_ITERATIONS, false)
    }
}

fn check_weights(samples: &CMatrix, weights: Option<&[f64]>) -> Result<()> {
    if samples.ncols() < 2 {
        return Err(invalid("covariance recovery needs at least two samples"));
    }
    if let Some(w) = weights {
        if w.len() != samples.ncols() {
            return Err(invalid(format!("{} weights for {} samples", w.len(), samples.ncols())));
        }
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("weights must be nonnegative with a positive sum"));
        }
    }
    Ok(())
}

fn uniform_weights(samples: &CMatrix, weights: Option<&[f64]>) -> Vec<f64> {
    weights.map_or_else(|| vec![1.0; samples.ncols()], <[f64]>::to_vec)
}

/// Correlation matrix estimate from the signs of the samples (columns of
/// `samples`): weighted one-bit sample covariance followed by the inverse
/// arcsine law. The result has a unit diagonal but may be indefinite.
pub fn recover_correlation(samples: &CMatrix, weights: Option<&[f64]>) -> Result<CMatrix> {
    check_weights(samples, weights)?;
    let w = uniform_weights(samples, weights);
    let signs = samples.map(one_bit);
    let (c1, _) = weighted_scatter(&signs, &w);
    let n = c1.nrows();
    let half_pi = PI / 2.0;
    Ok(CMatrix::from_fn(n, n, |i, j| {
        if i == j {
            C64::new(1.0, 0.0)
        } else {
            let z = c1[(i, j)];
            C64::new((half_pi * z.re).sin(), (half_pi * z.im).sin())
        }
    }))
}

fn require_multibit(q: &QuantizerSpec) -> Result<()> {
    match q.bits() {
        Some(b) if b >= 2 => Ok(()),
        Some(_) => Err(invalid(
            "variance recovery needs B >= 2: one-bit data carries no amplitude information",
        )),
        None => Err(invalid("variance recovery needs a finite-resolution quantizer")),
    }
}

/// Per-entry equation systems (real and imaginary parts pooled) for every
/// row of `samples`.
pub fn equation_systems(
    samples: &CMatrix,
    weights: Option<&[f64]>,
    q: &QuantizerSpec,
) -> Result<Vec<CdfEquationSystem>> {
    require_multibit(q)?;
    check_weights(samples, weights)?;
    let w = uniform_weights(samples, weights);
    let total: f64 = w.iter().sum();
    let taus = q.positive_thresholds();
    let systems = (0..samples.nrows())
        .map(|n| {
            let mut thresholds = Vec::with_capacity(2 * taus.len());
            let mut probabilities = Vec::with_capacity(2 * taus.len());
            for part in [|z: C64| z.re, |z: C64| z.im] {
                // Weighted histogram of how many positive thresholds each
                // amplitude exceeds; quantized amplitudes sit at cell centers,
                // so no sample lies on a threshold.
                let mut hist = vec![0.0; taus.len() + 1];
                for (t, &wt) in w.iter().enumerate() {
                    let a = part(samples[(n, t)]).abs();
                    let above = taus.iter().take_while(|&&tau| tau < a).count();
                    hist[above] += wt;
                }
                let mut cumulative = 0.0;
                for (i, &tau) in taus.iter().enumerate() {
                    cumulative += hist[i];
                    thresholds.push(tau);
                    probabilities.push((cumulative / total).clamp(0.0, 1.0));
                }
            }
            CdfEquationSystem { thresholds, probabilities, samples: total }
        })
        .collect();
    Ok(systems)
}

/// Complex variance of every entry of the quantizer input, from the
/// quantized samples (columns of `samples`).
///
/// With `shared_variance` all entries' equations are pooled into one solve
/// and the common estimate is returned for every entry.
pub fn recover_variances(
    samples: &CMatrix,
    weights: Option<&[f64]>,
    q: &QuantizerSpec,
    shared_variance: bool,
) -> Result<Vec<VarianceFit>> {
    let systems = equation_systems(samples, weights, q)?;
    if shared_variance {
        let mut pooled = systems[0].clone();
        for s in &systems[1..] {
            pooled.extend(s);
        }
        let fit = pooled.solve();
        return Ok(vec![fit; systems.len()]);
    }
    Ok(systems.iter().map(CdfEquationSystem::solve).collect())
}

/// Covariance estimate `diag(Ĉ)^{1/2} R̂ diag(Ĉ)^{1/2}` of the quantizer input.
pub fn recover_covariance(
    samples: &CMatrix,
    weights: Option<&[f64]>,
    q: &QuantizerSpec,
    shared_variance: bool,
) -> Result<CMatrix> {
    let variances = recover_variances(samples, weights, q, shared_variance)?;
    let corr = recover_correlation(samples, weights)?;
    let sd: Vec<f64> = variances.iter().map(|v| v.variance.sqrt()).collect();
    Ok(CMatrix::from_fn(corr.nrows(), corr.ncols(), |i, j| corr[(i, j)] * (sd[i] * sd[j])))
}

/// `||C - Ĉ||_F² / ||C||_F²`.
pub fn recovery_nmse(truth: &CMatrix, estimate: &CMatrix) -> f64 {
    (truth - estimate).norm_squared() / truth.norm_squared()
}

/// Diagnostics of a GMM fit on quantized data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuantizedFitReport {
    pub em: FitReport,
    /// Number of rebuilt observation covariances that needed PSD clamping.
    pub psd_repairs: usize,
    /// Total Gauss-Newton solves and how many did not converge.
    pub variance_solves: usize,
    pub unconverged_solves: usize,
}

/// One M-step of the quantized-data GMM fit for one component: returns the
/// channel covariance and the observation covariance used by the next E-step.
fn quantized_m_step(
    r: &CMatrix,
    resp: &[f64],
    sigma2: f64,
    q: &QuantizerSpec,
    report: &mut QuantizedFitReport,
) -> Result<(CMatrix, CMatrix)> {
    let n = r.nrows();
    let variances = recover_variances(r, Some(resp), q, false)?;
    report.variance_solves += variances.len();
    report.unconverged_solves += variances.iter().filter(|v| !v.converged).count();
    let corr = recover_correlation(r, Some(resp))?;
    let sd: Vec<f64> = variances.iter().map(|v| v.variance.sqrt()).collect();
    let mut c_y = CMatrix::from_fn(n, n, |i, j| corr[(i, j)] * (sd[i] * sd[j]));
    for i in 0..n {
        c_y[(i, i)] -= sigma2;
    }
    let (mut c_h, _) = psd_project(&c_y);
    let eps = REGULARIZATION * trace_real(&c_h).abs().max(sigma2).max(f64::MIN_POSITIVE) / n as f64;
    for i in 0..n {
        c_h[(i, i)] += eps;
    }
    let c_r = observation_covariance(&c_h, sigma2, q, report)?;
    Ok((c_h, c_r))
}

/// Exact-diagonal observation covariance of `c_h + σ² I`, clamped to PSD if
/// the mixed construction is indefinite.
fn observation_covariance(c_h: &CMatrix, sigma2: f64, q: &QuantizerSpec, report: &mut QuantizedFitReport) -> Result<CMatrix> {
    let n = c_h.nrows();
    let mut c_y = c_h.clone();
    for i in 0..n {
        c_y[(i, i)] += sigma2;
    }
    let c_r = BussgangContext::new(&c_y, q, CovarianceMode::ExactDiagonal)?.c_r;
    let min = HermitianEigen::new(&c_r).min();
    if min < -1e-8 * trace_real(&c_r) / n as f64 {
        log::warn!("rebuilt observation covariance is indefinite (min eigenvalue {min:e}); clamping");
        report.psd_repairs += 1;
        return Ok(psd_project(&c_r).0);
    }
    Ok(c_r)
}

/// Fits a zero-mean GMM channel prior from single-snapshot quantized
/// observations `r = Q_B(h + n)` (columns of `r`) with known noise variance.
///
/// The log-likelihood in the report is that of the Gaussian approximation of
/// the observations; it is not guaranteed to be monotone.
pub fn fit_gmm_quantized<R: Rng + ?Sized>(
    r: &CMatrix,
    k: usize,
    sigma2: f64,
    q: &QuantizerSpec,
    opts: EmOptions,
    rng: &mut R,
) -> Result<(GmmModel, QuantizedFitReport)> {
    require_multibit(q)?;
    if k == 0 {
        return Err(invalid("component count must be at least 1"));
    }
    if r.ncols() < 10 * k {
        return Err(invalid(format!("need at least 10 K = {} samples, got {}", 10 * k, r.ncols())));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("noise variance must be finite and >= 0, got {sigma2}")));
    }
    let t = r.ncols() as f64;
    let mut report = QuantizedFitReport::default();

    let labels = crate::mixtures::kmeans_labels(r, k, rng);
    let mut weights = Vec::with_capacity(k);
    let mut c_h = Vec::with_capacity(k);
    let mut c_r = Vec::with_capacity(k);
    for j in 0..k {
        let member: Vec<f64> = labels.iter().map(|&l| if l == j { 1.0 } else { 0.0 }).collect();
        let count: f64 = member.iter().sum();
        let member = if count >= 2.0 { member } else { vec![1.0; r.ncols()] };
        let (h, obs) = quantized_m_step(r, &member, sigma2, q, &mut report)?;
        weights.push(count.max(1.0) / t);
        c_h.push(h);
        c_r.push(obs);
    }
    let norm: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= norm);

    let (mut resp, mut ll) = e_step(&weights, &c_r, r)?;
    report.em.log_likelihood.push(ll);
    for _ in 0..opts.max_iter {
        let mut reseeded = false;
        for j in 0..k {
            let count: f64 = resp[j].iter().sum();
            if count < COLLAPSE_COUNT {
                log::warn!("quantized GMM component {j} collapsed (weight {count:e}); re-seeding");
                let pick = rng.random_range(0..r.ncols());
                let mut w = vec![0.0; r.ncols()];
                // The sample and a random tenth of the data seed the component.
                w[pick] = 1.0;
                for x in w.iter_mut() {
                    if rng.random::<f64>() < 0.1 {
                        *x = 1.0;
                    }
                }
                let (h, obs) = quantized_m_step(r, &w, sigma2, q, &mut report)?;
                c_h[j] = h;
                c_r[j] = obs;
                weights[j] = 1.0 / k as f64;
                reseeded = true;
                continue;
            }
            weights[j] = count / t;
            let (h, obs) = quantized_m_step(r, &resp[j], sigma2, q, &mut report)?;
            c_h[j] = h;
            c_r[j] = obs;
        }
        let norm: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= norm);
        if reseeded {
            report.em.reinitialized += 1;
            report.em.reseeded_at.push(report.em.log_likelihood.len());
        }
        let prev = ll;
        (resp, ll) = e_step(&weights, &c_r, r)?;
        report.em.log_likelihood.push(ll);
        if !reseeded && (ll - prev).abs() <= opts.tol * prev.abs().max(1e-300) {
            report.em.converged = true;
            break;
        }
    }
    Ok((GmmModel::new(weights, c_h, CovStructure::Full)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::sample_channels;
    use crate::frontend::make_quantizer;
    use crate::rng::stream;

    #[test]
    fn single_threshold_inverts_erf() {
        let p = erf(1.0 / SQRT_2);
        assert!((p - 0.6827).abs() < 1e-4);
        let sys = CdfEquationSystem { thresholds: vec![1.0], probabilities: vec![p], samples: 1e6 };
        let fit = sys.solve();
        assert!((fit.xi - 1.0).abs() < 1e-10, "xi {}", fit.xi);
        assert!((fit.variance - 2.0).abs() < 1e-9);
        assert!(fit.converged && fit.identifiable);
    }

    #[test]
    fn degenerate_probabilities_fall_back_to_clamped_start() {
        let sys = CdfEquationSystem { thresholds: vec![0.5, 1.0], probabilities: vec![1.0, 1.0], samples: 100.0 };
        let fit = sys.solve();
        assert!(!fit.identifiable);
        let want = 1.0 / (SQRT_2 * erf_inv(1.0 - 1.0 / 200.0));
        assert!((fit.xi - want).abs() < 1e-12);
    }

    #[test]
    fn one_bit_and_identity_rejected() {
        let r = CMatrix::from_element(2, 20, C64::new(0.5, 0.5));
        assert!(recover_variances(&r, None, &QuantizerSpec::uniform(1, 1.0).unwrap(), false).is_err());
        assert!(recover_variances(&r, None, &QuantizerSpec::identity(), false).is_err());
        assert!(fit_gmm_quantized(&r, 1, 0.1, &QuantizerSpec::uniform(1, 1.0).unwrap(), EmOptions::default(), &mut stream(0, 0)).is_err());
    }

    #[test]
    fn correlation_has_unit_diagonal_and_weighting_selects_subset() {
        let mut rng = stream(4, 0);
        let cov = CMatrix::from_fn(3, 3, |i, j| C64::new(0.6f64.powi((i as i32 - j as i32).abs()), 0.0));
        let y = sample_channels(&cov, 400, &mut rng).unwrap();
        let q = make_quantizer(3, 0.0).unwrap();
        let r = y.map(|z| q.quantize_scalar(z));
        let mut w = vec![0.0; 400];
        w[..150].iter_mut().for_each(|x| *x = 1.0);
        let weighted = recover_correlation(&r, Some(&w)).unwrap();
        let subset = recover_correlation(&r.columns(0, 150).into_owned(), None).unwrap();
        assert!((weighted - &subset).iter().all(|z| z.norm() < 1e-14));
        for i in 0..3 {
            assert_eq!(subset[(i, i)], C64::new(1.0, 0.0));
        }
    }

    #[test]
    fn probabilities_are_monotone() {
        let mut rng = stream(8, 0);
        let y = sample_channels(&CMatrix::identity(2, 2), 1000, &mut rng).unwrap();
        let q = make_quantizer(4, 0.0).unwrap();
        let r = y.map(|z| q.quantize_scalar(z));
        for sys in equation_systems(&r, None, &q).unwrap() {
            let half = sys.thresholds.len() / 2;
            for part in [&sys.probabilities[..half], &sys.probabilities[half..]] {
                assert!(part.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn variance_recovery_is_scale_equivariant() {
        let mut rng = stream(9, 0);
        let y = sample_channels(&CMatrix::identity(3, 3), 2000, &mut rng).unwrap();
        let q = make_quantizer(3, 0.0).unwrap();
        let r = y.map(|z| q.quantize_scalar(z));
        let base = recover_variances(&r, None, &q, false).unwrap();
        for alpha in [0.25, 4.0, 1024.0] {
            let qa = QuantizerSpec::uniform(3, q.delta() * alpha).unwrap();
            let ra = r.map(|z| z * alpha);
            let scaled = recover_variances(&ra, None, &qa, false).unwrap();
            for (a, b) in base.iter().zip(&scaled) {
                assert_eq!(a.xi * alpha, b.xi);
            }
        }
    }

    #[test]
    fn noiseless_single_component_is_projected_recovery() {
        let mut rng = stream(10, 0);
        let cov = CMatrix::from_fn(3, 3, |i, j| C64::from_polar(0.7f64.powi((i as i32 - j as i32).abs()), 0.3 * (i as f64 - j as f64)));
        let y = sample_channels(&cov, 2000, &mut rng).unwrap();
        let q = make_quantizer(3, 0.0).unwrap();
        let r = y.map(|z| q.quantize_scalar(z));
        let (model, _) = fit_gmm_quantized(&r, 1, 0.0, &q, EmOptions { max_iter: 3, tol: 0.0 }, &mut rng).unwrap();
        let (want, _) = psd_project(&recover_covariance(&r, None, &q, false).unwrap());
        assert!(crate::linalg::relative_frobenius(&model.covariances()[0], &want) < 1e-5);
    }
}
