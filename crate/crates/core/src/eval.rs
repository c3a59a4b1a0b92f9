//! Error and achievable-rate metrics and the Monte Carlo sweep over SNR.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::bussgang::{
    estimate_bls, estimate_buss_genie, estimate_buss_scov, BussgangContext, CovarianceMode,
};
use crate::channels::observe_dataset;
use crate::error::{invalid, Result};
use crate::frontend::{make_quantizer_for, snr_db_to_sigma2, PilotConfig, QuantizerSpec};
use crate::linalg::{CMatrix, C64};
use crate::mixtures::{GmmModel, MfaModel, MixtureEstimator};
use crate::rng::{child_seed, stream};
use crate::vae::{estimate_bvae, estimate_dnn, MlpParams, VaeModel};

/// `(1 / (N T)) sum_t ||h_t - ĥ_t||²` over the columns of the batches.
pub fn nmse(truth: &CMatrix, estimate: &CMatrix) -> Result<f64> {
    if truth.shape() != estimate.shape() || truth.is_empty() {
        return Err(invalid(format!("truth {:?} and estimate {:?} shapes differ or are empty", truth.shape(), estimate.shape())));
    }
    Ok((truth - estimate).norm_squared() / truth.len() as f64)
}

/// Achievable-rate lower bound and how many samples it left out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateBound {
    /// Bits per channel use.
    pub rate: f64,
    /// Samples with an all-zero estimate, for which the combiner is
    /// undefined.
    pub excluded: usize,
}

/// Use-and-then-forget lower bound of the single-user uplink
/// `r = Q(h s + n)` with the normalized matched combiner `g = ĥ / ||ĥ||²`.
///
/// The effective gain is `E[g^H B h]`; its fluctuation and the quantization
/// distortion `E[g^H C_q g]`, `C_q = C_r - B C_h B^H`, are treated as
/// Gaussian noise. `B` and `C_r` follow from `C_y = C_h + σ² I` with the
/// global channel covariance `c_h`.
pub fn rate_lower_bound(
    estimates: &CMatrix,
    truths: &CMatrix,
    sigma2: f64,
    q: &QuantizerSpec,
    c_h: &CMatrix,
) -> Result<RateBound> {
    let n = truths.nrows();
    if estimates.shape() != truths.shape() || c_h.shape() != (n, n) {
        return Err(invalid("estimates, truths and covariance dimensions disagree"));
    }
    let mut c_y = c_h.clone();
    for i in 0..n {
        c_y[(i, i)] += sigma2;
    }
    let ctx = BussgangContext::new(&c_y, q, CovarianceMode::Approximate)?;
    let gain = &ctx.gain;
    let c_q = CMatrix::from_fn(n, n, |i, j| ctx.c_r[(i, j)] - c_h[(i, j)] * (gain[i] * gain[j]));

    let terms: Vec<Option<(C64, f64)>> = (0..truths.ncols())
        .into_par_iter()
        .map(|t| {
            let est = estimates.column(t);
            let energy = est.norm_squared();
            if energy == 0.0 {
                return None;
            }
            let g = est / C64::new(energy, 0.0);
            let signal: C64 = (0..n).map(|i| g[i].conj() * truths[(i, t)] * gain[i]).sum();
            let distortion = (g.adjoint() * &c_q * &g)[(0, 0)].re;
            Some((signal, distortion))
        })
        .collect();
    let kept: Vec<(C64, f64)> = terms.iter().flatten().copied().collect();
    let excluded = terms.len() - kept.len();
    if excluded > 0 {
        log::warn!("{excluded} samples with all-zero channel estimates excluded from the rate bound");
    }
    if kept.is_empty() {
        return Ok(RateBound { rate: 0.0, excluded });
    }
    let count = kept.len() as f64;
    let mean: C64 = kept.iter().map(|k| k.0).sum::<C64>() / count;
    let var = kept.iter().map(|k| (k.0 - mean).norm_sqr()).sum::<f64>() / count;
    let dist = kept.iter().map(|k| k.1).sum::<f64>() / count;
    let sinr = mean.norm_sqr() / (var + dist);
    Ok(RateBound { rate: (1.0 + sinr).log2(), excluded })
}

/// Channel estimators compared by the sweep.
#[derive(Debug, Clone)]
pub enum Estimator {
    /// Bussgang LMMSE with each sample's true covariance.
    BussGenie,
    /// Bussgang LMMSE with the global sample covariance.
    BussScov,
    /// Bussgang gain inversion with the global sample covariance.
    Bls,
    Gmm(GmmModel),
    Mfa(MfaModel),
    Vae(VaeModel),
    Dnn(MlpParams),
}

/// An estimator as it appears in the results table.
#[derive(Debug, Clone)]
pub struct NamedEstimator {
    pub name: String,
    pub estimator: Estimator,
    /// Evaluate only at this SNR (models trained for one noise level).
    pub snr_db: Option<f64>,
}

impl NamedEstimator {
    pub fn new(name: impl Into<String>, estimator: Estimator) -> Self {
        Self { name: name.into(), estimator, snr_db: None }
    }

    fn components(&self) -> (Option<usize>, Option<usize>) {
        match &self.estimator {
            Estimator::Gmm(m) => (Some(m.num_components()), None),
            Estimator::Mfa(m) => (Some(m.num_components()), Some(m.latent_dim())),
            Estimator::Vae(m) => (None, Some(m.latent_dim())),
            _ => (None, None),
        }
    }
}

/// Test channels with everything the estimators may need.
#[derive(Debug, Clone)]
pub struct TestSet {
    /// `N x T`.
    pub channels: CMatrix,
    /// True per-sample covariances (for the genie estimator).
    pub genie_covariances: Option<Vec<CMatrix>>,
    /// Global sample covariance of the training channels.
    pub sample_covariance: CMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub scenario: String,
    pub snr_db: Vec<f64>,
    /// `None` is infinite resolution.
    pub bits: Option<u32>,
    pub pilots: usize,
    pub seed: u64,
    /// Measure wall time per cell; off by default so that output is
    /// reproducible byte for byte.
    pub timing: bool,
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub estimator: String,
    pub scenario: String,
    pub snr_db: f64,
    #[serde(serialize_with = "serialize_bits")]
    pub bits: Option<u32>,
    pub pilots: usize,
    pub antennas: usize,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub nmse: f64,
    pub rate_lb: f64,
    pub t_test: usize,
    pub seconds: f64,
}

fn serialize_bits<S: serde::Serializer>(bits: &Option<u32>, s: S) -> Result<S::Ok, S::Error> {
    match bits {
        Some(b) => s.serialize_u32(*b),
        None => s.serialize_str("inf"),
    }
}

/// Estimates of `r` for one estimator at one noise level.
pub fn run_estimator(
    est: &Estimator,
    r: &CMatrix,
    test: &TestSet,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
) -> Result<CMatrix> {
    match est {
        Estimator::BussGenie => {
            let covs = test
                .genie_covariances
                .as_ref()
                .ok_or_else(|| invalid("the genie estimator needs per-sample covariances"))?;
            let chunk = 256;
            let parts = (0..r.ncols().div_ceil(chunk))
                .into_par_iter()
                .map(|c| {
                    let (start, len) = (c * chunk, chunk.min(r.ncols() - c * chunk));
                    estimate_buss_genie(&r.columns(start, len).into_owned(), &covs[start..start + len], pilots, sigma2, q)
                })
                .collect::<Result<Vec<_>>>()?;
            let n = test.channels.nrows();
            let mut out = CMatrix::zeros(n, r.ncols());
            for (c, part) in parts.into_iter().enumerate() {
                out.columns_mut(c * chunk, part.ncols()).copy_from(&part);
            }
            Ok(out)
        }
        Estimator::BussScov => estimate_buss_scov(r, &test.sample_covariance, pilots, sigma2, q),
        Estimator::Bls => estimate_bls(r, &test.sample_covariance, pilots, sigma2, q),
        Estimator::Gmm(m) => MixtureEstimator::from_prior(m, pilots, sigma2, q)?.estimate(r),
        Estimator::Mfa(m) => MixtureEstimator::from_prior(m, pilots, sigma2, q)?.estimate(r),
        Estimator::Vae(m) => estimate_bvae(m, r, pilots, sigma2, q),
        Estimator::Dnn(net) => estimate_dnn(net, r),
    }
}

/// Evaluates every estimator at every SNR of the sweep. All estimators see
/// the same observation realizations at a given SNR.
pub fn run_sweep(cfg: &SweepConfig, test: &TestSet, estimators: &[NamedEstimator]) -> Result<Vec<EvalRecord>> {
    let pilots = crate::frontend::make_pilots(cfg.pilots)?;
    let (n, t) = (test.channels.nrows(), test.channels.ncols());
    if t == 0 {
        return Err(invalid("empty test set"));
    }
    let global = crate::linalg::sample_covariance(&test.channels);
    let mut records = Vec::new();
    for (i, &snr) in cfg.snr_db.iter().enumerate() {
        let sigma2 = snr_db_to_sigma2(snr);
        let q = make_quantizer_for(cfg.bits, sigma2)?;
        let noise_seed = child_seed(&mut stream(cfg.seed, i as u64));
        let obs = observe_dataset(&test.channels, &pilots, sigma2, &q, noise_seed);
        let active: Vec<&NamedEstimator> =
            estimators.iter().filter(|e| e.snr_db.is_none_or(|s| (s - snr).abs() < 1e-9)).collect();
        let cells = active
            .par_iter()
            .map(|e| {
                let start = Instant::now();
                let est = run_estimator(&e.estimator, &obs.samples, test, &pilots, sigma2, &q)?;
                let seconds = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
                let rate = rate_lower_bound(&est, &test.channels, sigma2, &q, &global)?;
                let (k, l) = e.components();
                Ok(EvalRecord {
                    estimator: e.name.clone(),
                    scenario: cfg.scenario.clone(),
                    snr_db: snr,
                    bits: cfg.bits,
                    pilots: cfg.pilots,
                    antennas: n,
                    k,
                    l,
                    nmse: nmse(&test.channels, &est)?,
                    rate_lb: rate.rate,
                    t_test: t,
                    seconds,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(cells);
    }
    Ok(records)
}

/// Writes records as CSV with the column order of [`EvalRecord`].
pub fn write_csv<W: Write>(records: &[EvalRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    if records.is_empty() {
        w.write_record(["estimator", "scenario", "snr_db", "bits", "pilots", "antennas", "K", "L", "nmse", "rate_lb", "t_test", "seconds"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::make_quantizer;
    use crate::rng::complex_normal;

    fn random(n: usize, t: usize, seed: u64) -> CMatrix {
        let mut rng = stream(seed, 0);
        CMatrix::from_fn(n, t, |_, _| complex_normal(&mut rng))
    }

    #[test]
    fn nmse_definition() {
        let h = random(4, 50, 1);
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        let e = random(4, 50, 2);
        let got = nmse(&h, &(&h + &e)).unwrap();
        assert!((got - e.norm_squared() / 200.0).abs() < 1e-15);
        let zero = nmse(&h, &CMatrix::zeros(4, 50)).unwrap();
        assert!((zero - h.norm_squared() / 200.0).abs() < 1e-15);
        assert!(nmse(&h, &CMatrix::zeros(4, 49)).is_err());
    }

    #[test]
    fn perfect_csi_scalar_awgn() {
        let h = CMatrix::from_element(1, 100, C64::new(1.0, 0.0));
        let sigma2 = 0.25;
        let rate = rate_lower_bound(&h, &h, sigma2, &QuantizerSpec::identity(), &CMatrix::identity(1, 1)).unwrap();
        assert!((rate.rate - (1.0 + 1.0 / sigma2).log2()).abs() < 1e-12);
        assert_eq!(rate.excluded, 0);
    }

    #[test]
    fn rate_ignores_estimate_scale_and_skips_zero_estimates() {
        let h = random(4, 200, 3);
        let est = &h + random(4, 200, 4) * C64::new(0.3, 0.0);
        let q = make_quantizer(2, 0.1).unwrap();
        let c = CMatrix::identity(4, 4);
        let a = rate_lower_bound(&est, &h, 0.1, &q, &c).unwrap().rate;
        let b = rate_lower_bound(&(&est * C64::new(7.5, 0.0)), &h, 0.1, &q, &c).unwrap().rate;
        assert!((a - b).abs() < 1e-10 * a);
        let mut with_zero = est.clone();
        with_zero.column_mut(0).fill(C64::new(0.0, 0.0));
        assert_eq!(rate_lower_bound(&with_zero, &h, 0.1, &q, &c).unwrap().excluded, 1);
    }

    #[test]
    fn csv_layout() {
        let rec = EvalRecord {
            estimator: "bls".into(),
            scenario: "s".into(),
            snr_db: 5.0,
            bits: None,
            pilots: 1,
            antennas: 8,
            k: Some(4),
            l: None,
            nmse: 0.5,
            rate_lb: 1.25,
            t_test: 10,
            seconds: 0.0,
        };
        let mut buf = Vec::new();
        write_csv(&[rec], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "estimator,scenario,snr_db,bits,pilots,antennas,K,L,nmse,rate_lb,t_test,seconds\nbls,s,5.0,inf,1,8,4,,0.5,1.25,10,0.0\n"
        );
    }
}
