//! Bussgang decomposition of the quantizer: gains, output covariances and the
//! conditional linear MMSE filter built on them.
//!
//! For a Gaussian input `y ~ N_C(0, C_y)` the quantizer output decomposes as
//! `r = B y + q` with a diagonal gain `B` and a distortion `q` uncorrelated
//! with `y`.

use std::f64::consts::{FRAC_2_PI, PI};

use nalgebra::DVector;

use crate::error::{invalid, Result};
use crate::frontend::{PilotConfig, QuantizerSpec};
use crate::linalg::{adj_matmul, hermitize, matmul, CMatrix, HermitianSolver, C64};
use crate::special::normal_cdf;

/// How the off-diagonal structure of a multi-bit output covariance is built.
///
/// One-bit outputs always use the exact arcsine law and the identity
/// quantizer always returns `C_y`; the mode only matters for `B > 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovarianceMode {
    /// `ρ² C_y + (1 - ρ²) diag(C_y)` with `ρ` the average gain.
    #[default]
    Approximate,
    /// Exact per-entry output variances on the diagonal and `B C_y B`
    /// off the diagonal.
    ExactDiagonal,
}

/// Bussgang gain of a zero-mean complex Gaussian scalar with variance `var`.
pub fn gain_scalar(var: f64, q: &QuantizerSpec) -> Result<f64> {
    if !(var > 0.0 && var.is_finite()) {
        return Err(invalid(format!("input variance must be positive, got {var}")));
    }
    if q.is_identity() {
        return Ok(1.0);
    }
    let delta = q.delta();
    let sum: f64 = q.thresholds().iter().map(|t| (-t * t / var).exp()).sum();
    Ok(delta / (PI * var).sqrt() * sum)
}

/// Derivative of [`gain_scalar`] with respect to the variance.
pub fn gain_scalar_derivative(var: f64, q: &QuantizerSpec) -> Result<f64> {
    if !(var > 0.0 && var.is_finite()) {
        return Err(invalid(format!("input variance must be positive, got {var}")));
    }
    if q.is_identity() {
        return Ok(0.0);
    }
    let delta = q.delta();
    let pre = delta / PI.sqrt();
    let d = q
        .thresholds()
        .iter()
        .map(|t| {
            let e = (-t * t / var).exp();
            e * (t * t * var.powf(-2.5) - 0.5 * var.powf(-1.5))
        })
        .sum::<f64>();
    Ok(pre * d)
}

/// Diagonal of the Bussgang gain matrix for input covariance `c_y`.
pub fn bussgang_gain(c_y: &CMatrix, q: &QuantizerSpec) -> Result<DVector<f64>> {
    let gains = c_y
        .diagonal()
        .iter()
        .map(|d| gain_scalar(d.re, q))
        .collect::<Result<Vec<_>>>()?;
    Ok(DVector::from_vec(gains))
}

/// Output variance `E|Q(y)|²` for `y ~ N_C(0, var)`, summed over the cells.
pub fn quantized_variance(var: f64, q: &QuantizerSpec) -> Result<f64> {
    if !(var > 0.0 && var.is_finite()) {
        return Err(invalid(format!("input variance must be positive, got {var}")));
    }
    if q.is_identity() {
        return Ok(var);
    }
    let scale = (2.0 / var).sqrt();
    let t = q.thresholds();
    let mut total = 0.0;
    for (i, &label) in q.labels().iter().enumerate() {
        let upper = if i < t.len() { normal_cdf(scale * t[i]) } else { 1.0 };
        let lower = if i > 0 { normal_cdf(scale * t[i - 1]) } else { 0.0 };
        total += 2.0 * label * label * (upper - lower);
    }
    Ok(total)
}

/// Average gain `min(mean(B_ii), 1)` used by the approximate covariance.
pub fn average_gain(gain: &DVector<f64>) -> f64 {
    if gain.is_empty() {
        return 1.0;
    }
    gain.mean().min(1.0)
}

fn arcsine_law(c_y: &CMatrix) -> CMatrix {
    let n = c_y.nrows();
    let inv_sd: Vec<f64> = c_y.diagonal().iter().map(|d| 1.0 / d.re.sqrt()).collect();
    CMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return C64::new(1.0, 0.0);
        }
        let z = c_y[(i, j)] * (inv_sd[i] * inv_sd[j]);
        C64::new(z.re.clamp(-1.0, 1.0).asin(), z.im.clamp(-1.0, 1.0).asin()) * FRAC_2_PI
    })
}

/// Bussgang quantities of one input covariance.
#[derive(Debug, Clone)]
pub struct BussgangContext {
    pub c_y: CMatrix,
    pub gain: DVector<f64>,
    pub c_r: CMatrix,
    pub rho: f64,
}

impl BussgangContext {
    pub fn new(c_y: &CMatrix, q: &QuantizerSpec, mode: CovarianceMode) -> Result<Self> {
        let gain = bussgang_gain(c_y, q)?;
        let rho = average_gain(&gain);
        let c_r = match q.bits() {
            None => c_y.clone(),
            Some(1) => arcsine_law(c_y),
            Some(_) => match mode {
                CovarianceMode::Approximate => {
                    let mut c_r = c_y * C64::new(rho * rho, 0.0);
                    for i in 0..c_y.nrows() {
                        c_r[(i, i)] = C64::new(c_y[(i, i)].re, 0.0);
                    }
                    c_r
                }
                CovarianceMode::ExactDiagonal => {
                    let n = c_y.nrows();
                    let mut c_r = CMatrix::from_fn(n, n, |i, j| c_y[(i, j)] * (gain[i] * gain[j]));
                    for i in 0..n {
                        c_r[(i, i)] = C64::new(quantized_variance(c_y[(i, i)].re, q)?, 0.0);
                    }
                    c_r
                }
            },
        };
        Ok(Self { c_y: c_y.clone(), gain, c_r: hermitize(&c_r), rho })
    }

    /// Context of `y = A h + n` for channel covariance `c_h`.
    pub fn for_channel(
        c_h: &CMatrix,
        pilots: &PilotConfig,
        sigma2: f64,
        q: &QuantizerSpec,
        mode: CovarianceMode,
    ) -> Result<Self> {
        Self::new(&receive_covariance(c_h, pilots, sigma2)?, q, mode)
    }
}

/// `A C_h A^H + σ² I`.
pub fn receive_covariance(c_h: &CMatrix, pilots: &PilotConfig, sigma2: f64) -> Result<CMatrix> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("noise variance must be positive, got {sigma2}")));
    }
    let mut c_y = pilots.spread_covariance(c_h);
    for i in 0..c_y.nrows() {
        c_y[(i, i)] += sigma2;
    }
    Ok(c_y)
}

/// Quantized output covariance for input covariance `c_y`.
pub fn quantized_covariance(c_y: &CMatrix, q: &QuantizerSpec, mode: CovarianceMode) -> Result<CMatrix> {
    Ok(BussgangContext::new(c_y, q, mode)?.c_r)
}

/// Linear estimator `ĥ = W r`.
#[derive(Debug, Clone)]
pub struct LmmseFilter {
    pub matrix: CMatrix,
}

impl LmmseFilter {
    /// `W = C_h A^H B C_r^{-1}` for a precomputed context of `c_h`.
    pub fn from_context(ctx: &BussgangContext, c_h: &CMatrix, pilots: &PilotConfig) -> Result<Self> {
        let solver = HermitianSolver::new(&ctx.c_r)?;
        Ok(Self::from_solver(&solver, ctx, c_h, pilots))
    }

    pub(crate) fn from_solver(
        solver: &HermitianSolver,
        ctx: &BussgangContext,
        c_h: &CMatrix,
        pilots: &PilotConfig,
    ) -> Self {
        let cross = cross_covariance(ctx, c_h, pilots);
        Self { matrix: solver.solve(&cross).adjoint() }
    }

    /// Applies the filter to every column of `r`.
    pub fn apply(&self, r: &CMatrix) -> CMatrix {
        matmul(&self.matrix, r)
    }
}

/// Conditional linear MMSE filter for channel covariance `c_h_given_c`.
pub fn conditional_lmmse(
    c_h_given_c: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
) -> Result<LmmseFilter> {
    conditional_lmmse_with(c_h_given_c, pilots, sigma2, q, CovarianceMode::Approximate)
}

pub fn conditional_lmmse_with(
    c_h_given_c: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
    mode: CovarianceMode,
) -> Result<LmmseFilter> {
    let ctx = BussgangContext::for_channel(c_h_given_c, pilots, sigma2, q, mode)?;
    LmmseFilter::from_context(&ctx, c_h_given_c, pilots)
}

fn check_batch(r: &CMatrix, n: usize, pilots: &PilotConfig) -> Result<()> {
    if r.nrows() != n * pilots.len() {
        return Err(invalid(format!(
            "observation length {} does not match N P = {}",
            r.nrows(),
            n * pilots.len()
        )));
    }
    Ok(())
}

/// Per-sample Bussgang estimator with the true covariance of each channel.
/// Column `t` of `r` is filtered with `genie_covs[t]`.
pub fn estimate_buss_genie(
    r: &CMatrix,
    genie_covs: &[CMatrix],
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
) -> Result<CMatrix> {
    if genie_covs.len() != r.ncols() {
        return Err(invalid(format!(
            "{} genie covariances for {} observations",
            genie_covs.len(),
            r.ncols()
        )));
    }
    let n = genie_covs.first().map_or(0, |c| c.nrows());
    check_batch(r, n, pilots)?;
    let mut out = CMatrix::zeros(n, r.ncols());
    for (t, cov) in genie_covs.iter().enumerate() {
        let w = conditional_lmmse(cov, pilots, sigma2, q)?;
        out.set_column(t, &(&w.matrix * r.column(t)));
    }
    Ok(out)
}

/// Bussgang estimator with one global (sample) covariance.
pub fn estimate_buss_scov(
    r: &CMatrix,
    sample_cov: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
) -> Result<CMatrix> {
    check_batch(r, sample_cov.nrows(), pilots)?;
    Ok(conditional_lmmse(sample_cov, pilots, sigma2, q)?.apply(r))
}

/// Least-squares estimate after undoing the Bussgang gain:
/// `ĥ = A^H (r ./ b) / P`.
pub fn estimate_bls(
    r: &CMatrix,
    sample_cov: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
) -> Result<CMatrix> {
    let n = sample_cov.nrows();
    check_batch(r, n, pilots)?;
    let c_y = receive_covariance(sample_cov, pilots, sigma2)?;
    let gain = bussgang_gain(&c_y, q)?;
    let p = pilots.len();
    let mut out = CMatrix::zeros(n, r.ncols());
    for (bp, &a) in pilots.values().iter().enumerate() {
        let w = a.conj() / p as f64;
        for t in 0..r.ncols() {
            for i in 0..n {
                out[(i, t)] += w * r[(bp * n + i, t)] / gain[bp * n + i];
            }
        }
    }
    Ok(out)
}

/// Cross covariance `E[r h^H] = B A C_h` implied by a context.
pub fn cross_covariance(ctx: &BussgangContext, c_h: &CMatrix, pilots: &PilotConfig) -> CMatrix {
    let n = c_h.nrows();
    let mut cross = CMatrix::zeros(n * pilots.len(), n);
    for (p, &a) in pilots.values().iter().enumerate() {
        for j in 0..n {
            for i in 0..n {
                cross[(p * n + i, j)] = c_h[(i, j)] * a * ctx.gain[p * n + i];
            }
        }
    }
    cross
}

/// `W^H W` trace, i.e. `||W||_F²`.
pub fn filter_energy(w: &LmmseFilter) -> f64 {
    adj_matmul(&w.matrix, &w.matrix).trace().re
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{make_pilots, make_quantizer, QuantizerSpec};
    use crate::linalg::{relative_frobenius, HermitianEigen};
    use proptest::prelude::*;
    use std::f64::consts::SQRT_2;

    fn real_matrix(rows: &[&[f64]]) -> CMatrix {
        CMatrix::from_fn(rows.len(), rows.len(), |i, j| C64::new(rows[i][j], 0.0))
    }

    #[test]
    fn one_bit_gain_at_unit_variance() {
        let q = QuantizerSpec::uniform(1, 1.0).unwrap();
        let g = bussgang_gain(&CMatrix::identity(3, 3), &q).unwrap();
        for &x in g.iter() {
            assert!((x - (2.0 / PI).sqrt()).abs() < 1e-15);
        }
        let g = gain_scalar(4.0, &q).unwrap();
        assert!((g - (2.0 / PI).sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_diagonal_is_rejected() {
        let q = QuantizerSpec::uniform(2, 1.0).unwrap();
        let c = real_matrix(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert!(bussgang_gain(&c, &q).is_err());
    }

    #[test]
    fn gain_derivative_matches_finite_difference() {
        for bits in [1, 2, 3] {
            let q = make_quantizer(bits, 0.5).unwrap();
            for var in [0.3, 1.0, 2.5] {
                let h = 1e-6;
                let fd = (gain_scalar(var + h, &q).unwrap() - gain_scalar(var - h, &q).unwrap()) / (2.0 * h);
                let an = gain_scalar_derivative(var, &q).unwrap();
                assert!((fd - an).abs() < 1e-7, "bits {bits} var {var}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn one_bit_covariance_examples() {
        let q = QuantizerSpec::uniform(1, SQRT_2).unwrap();
        let c_r = quantized_covariance(&CMatrix::identity(4, 4), &q, CovarianceMode::Approximate).unwrap();
        assert!(relative_frobenius(&c_r, &CMatrix::identity(4, 4)) < 1e-15);

        let c_y = real_matrix(&[&[1.0, 0.5], &[0.5, 1.0]]);
        let c_r = quantized_covariance(&c_y, &q, CovarianceMode::Approximate).unwrap();
        assert!((c_r[(0, 1)].re - 1.0 / 3.0).abs() < 1e-14);
        assert!(c_r[(0, 1)].im.abs() < 1e-15);
    }

    #[test]
    fn one_bit_output_variance_is_one() {
        let q = QuantizerSpec::uniform(1, SQRT_2).unwrap();
        for var in [0.01, 0.7, 1.0, 30.0] {
            assert!((quantized_variance(var, &q).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn arcsine_round_trip() {
        for i in 0..=20 {
            let x = -1.0 + 0.1 * i as f64;
            let y = (PI / 2.0 * FRAC_2_PI * f64::asin(x)).sin();
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_diagonal_uses_output_variances() {
        let q = make_quantizer(3, 0.2).unwrap();
        let c_y = real_matrix(&[&[1.2, 0.4, 0.1], &[0.4, 1.2, 0.4], &[0.1, 0.4, 1.2]]);
        let ctx = BussgangContext::new(&c_y, &q, CovarianceMode::ExactDiagonal).unwrap();
        for i in 0..3 {
            let v = quantized_variance(1.2, &q).unwrap();
            assert!((ctx.c_r[(i, i)].re - v).abs() < 1e-8);
            for j in 0..3 {
                if i != j {
                    let want = c_y[(i, j)].re * ctx.gain[i] * ctx.gain[j];
                    assert!((ctx.c_r[(i, j)].re - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn identity_quantizer_gives_classical_lmmse() {
        let pilots = make_pilots(2).unwrap();
        let c_h = CMatrix::from_fn(3, 3, |i, j| C64::from_polar(0.8f64.powi((i as i32 - j as i32).abs()), 0.3 * (i as f64 - j as f64)));
        let sigma2 = 0.4;
        let w = conditional_lmmse(&c_h, &pilots, sigma2, &QuantizerSpec::identity()).unwrap();
        // C_h A^H (A C_h A^H + σ² I)^{-1} computed with a plain inverse.
        let a = CMatrix::from_fn(6, 3, |r, c| if r % 3 == c { pilots.values()[r / 3] } else { C64::new(0.0, 0.0) });
        let c_y = &a * &c_h * a.adjoint() + CMatrix::identity(6, 6) * C64::new(sigma2, 0.0);
        let want = &c_h * a.adjoint() * c_y.try_inverse().unwrap();
        assert!(relative_frobenius(&w.matrix, &want) < 1e-10);
    }

    #[test]
    fn zero_signal_gives_zero_filter() {
        let pilots = make_pilots(1).unwrap();
        for bits in [1, 2, 4] {
            let q = make_quantizer(bits, 1.0).unwrap();
            let w = conditional_lmmse(&CMatrix::zeros(4, 4), &pilots, 1.0, &q).unwrap();
            assert!(w.matrix.iter().all(|z| z.norm() == 0.0));
        }
    }

    #[test]
    fn filter_vanishes_as_noise_grows() {
        let pilots = make_pilots(1).unwrap();
        let c_h = CMatrix::from_fn(4, 4, |i, j| C64::new(0.9f64.powi((i as i32 - j as i32).abs()), 0.0));
        for bits in [1, 3] {
            let mut last = f64::INFINITY;
            for k in 0..=10 {
                let sigma2 = 10f64.powf(k as f64 / 10.0) * 10.0;
                let q = make_quantizer(bits, sigma2).unwrap();
                let e = filter_energy(&conditional_lmmse(&c_h, &pilots, sigma2, &q).unwrap());
                assert!(e < last, "bits {bits}: energy {e} not below {last}");
                last = e;
            }
        }
    }

    #[test]
    fn bls_inverts_gain_without_noise_structure() {
        let pilots = make_pilots(3).unwrap();
        let q = QuantizerSpec::identity();
        let h = CMatrix::from_fn(4, 1, |i, _| C64::new(i as f64, -1.0));
        let r = CMatrix::from_column_slice(12, 1, &pilots.apply(h.as_slice()));
        let est = estimate_bls(&r, &CMatrix::identity(4, 4), &pilots, 0.1, &q).unwrap();
        assert!(relative_frobenius(&est, &h) < 1e-14);
    }

    fn arb_covariance(n: usize) -> impl Strategy<Value = CMatrix> {
        proptest::collection::vec(-1.0f64..1.0, 2 * n * n).prop_map(move |v| {
            let g = CMatrix::from_fn(n, n, |i, j| C64::new(v[2 * (i * n + j)], v[2 * (i * n + j) + 1]));
            let mut c = &g * g.adjoint();
            for i in 0..n {
                c[(i, i)] += C64::new(0.05, 0.0);
            }
            c
        })
    }

    proptest! {
        #[test]
        fn output_covariance_is_psd(c_y in arb_covariance(5), bits in 1u32..5) {
            let q = make_quantizer(bits, 0.3).unwrap();
            let c_r = quantized_covariance(&c_y, &q, CovarianceMode::Approximate).unwrap();
            let bound = -1e-8 * c_r.trace().re / 5.0;
            prop_assert!(HermitianEigen::new(&c_r).min() >= bound);
        }

        #[test]
        fn matched_gains_lie_in_unit_interval(var in 1.001f64..1e3, bits in 1u32..9) {
            let q = make_quantizer(bits, var - 1.0).unwrap();
            let g = gain_scalar(var, &q).unwrap();
            prop_assert!(g > 0.0 && g <= 1.0 + 1e-12);
        }
    }
}
