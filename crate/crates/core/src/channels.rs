//! 3GPP-style spatial channel model for a uniform linear array.
//!
//! A channel is conditionally Gaussian given its cluster parameters `δ`
//! (cluster angles, path gains and angular spread):
//! `h | δ ~ CN(0, C_δ)` with
//! `C_δ = ∫ ω(γ; δ) t(γ) t(γ)^H dγ`, where `t(γ)` is the half-wavelength ULA
//! steering vector `[1, e^{jπ sin γ}, ..., e^{jπ(N-1) sin γ}]` and `ω` is a
//! gain-weighted sum of Laplace densities centred at the cluster angles.
//!
//! `CN(0, C)` is circularly symmetric: real and imaginary parts are jointly
//! Gaussian with covariance `Re(C)/2`, and every variance quoted in this crate
//! is the complex variance `E|x|^2`.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, numerical, Result};
use crate::frontend::{PilotConfig, QuantizerSpec};
use crate::linalg::{matmul, toeplitz_hermitian, CMatrix, CVector, HermitianEigen, C64};
use crate::rng::{child_seed, complex_normal, stream};

/// Default per-cluster angular standard deviation.
pub const DEFAULT_ANGLE_SPREAD_DEG: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterParams {
    /// Cluster centre angles in `[0, 2π)`.
    pub angles: Vec<f64>,
    /// Path gains, summing to one.
    pub gains: Vec<f64>,
    /// Standard deviation of each cluster's Laplace density, in radians.
    pub angle_spread: f64,
}

impl ClusterParams {
    pub fn new(angles: Vec<f64>, gains: Vec<f64>, angle_spread: f64) -> Result<Self> {
        if angles.is_empty() || angles.len() != gains.len() {
            return Err(invalid("angles and gains must be non-empty and of equal length"));
        }
        if gains.iter().any(|&g| !(g >= 0.0)) || (gains.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(invalid("gains must be nonnegative and sum to one"));
        }
        if !(angle_spread > 0.0 && angle_spread.is_finite()) {
            return Err(invalid(format!("angle spread must be positive, got {angle_spread}")));
        }
        Ok(Self { angles, gains, angle_spread })
    }

    pub fn num_clusters(&self) -> usize {
        self.angles.len()
    }
}

/// Draws cluster angles uniformly on `[0, 2π)` and uniform path gains
/// normalized to sum to one.
pub fn draw_cluster_params<R: Rng + ?Sized>(
    rng: &mut R,
    num_clusters: usize,
    angle_spread: f64,
) -> Result<ClusterParams> {
    if num_clusters == 0 {
        return Err(invalid("cluster count must be at least 1"));
    }
    let angles: Vec<f64> = (0..num_clusters).map(|_| rng.random::<f64>() * TAU).collect();
    let raw: Vec<f64> = (0..num_clusters).map(|_| rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let gains = if total > 0.0 {
        let mut g: Vec<f64> = raw.iter().map(|x| x / total).collect();
        // Put the rounding residue on the last gain so the sum is exact.
        let head: f64 = g[..num_clusters - 1].iter().sum();
        g[num_clusters - 1] = 1.0 - head;
        g
    } else {
        vec![1.0 / num_clusters as f64; num_clusters]
    };
    ClusterParams::new(angles, gains, angle_spread)
}

/// Channel covariance for fixed cluster parameters, normalized to trace `N`.
#[derive(Debug, Clone)]
pub struct GenieCovariance {
    matrix: CMatrix,
    params: ClusterParams,
    eigen: HermitianEigen,
}

impl GenieCovariance {
    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn params(&self) -> &ClusterParams {
        &self.params
    }

    pub fn eigen(&self) -> &HermitianEigen {
        &self.eigen
    }
}

/// First column `c[m] = ∫ ω(γ) e^{jπ m sin γ} dγ` of the Toeplitz covariance.
///
/// Each Laplace term is integrated in local coordinates `u = γ - θ` over
/// `|u| <= min(π, 25 b)` (tail mass below `e^{-25}`), with composite Simpson
/// rules on both sides of the cusp. The step resolves both the Laplace decay
/// `b` and the steering-vector phase rate `π N`.
fn covariance_column(params: &ClusterParams, n: usize) -> Vec<C64> {
    let b = params.angle_spread / std::f64::consts::SQRT_2;
    let half_width = (25.0 * b).min(PI);
    let step = (b / 12.0).min(1.0 / (12.0 * PI * n as f64));
    let intervals = {
        let k = (half_width / step).ceil() as usize;
        k + (k % 2)
    };
    let h = half_width / intervals as f64;
    let mut col = vec![C64::new(0.0, 0.0); n];
    let mut phasors = vec![C64::new(0.0, 0.0); n];
    for (&theta, &gain) in params.angles.iter().zip(&params.gains) {
        if gain == 0.0 {
            continue;
        }
        let mut acc = vec![C64::new(0.0, 0.0); n];
        let mut mass = 0.0;
        for side in [-1.0, 1.0] {
            for i in 0..=intervals {
                let u = side * i as f64 * h;
                let simpson = if i == 0 || i == intervals {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                let w = simpson * h / 3.0 * (-(u.abs()) / b).exp() / (2.0 * b);
                mass += w;
                let base = C64::from_polar(1.0, PI * (theta + u).sin());
                let mut z = C64::new(1.0, 0.0);
                for p in phasors.iter_mut() {
                    *p = z;
                    z *= base;
                }
                for (a, p) in acc.iter_mut().zip(&phasors) {
                    *a += p * w;
                }
            }
        }
        for (c, a) in col.iter_mut().zip(acc) {
            *c += a * (gain / mass);
        }
    }
    col
}

/// Genie covariance `C_δ` of the cluster parameters for `n` antennas.
///
/// Negative eigenvalues from quadrature roundoff are clamped to zero; a
/// violation larger than `1e-8 trace / N` is reported as a numerical error.
pub fn genie_covariance(params: &ClusterParams, n: usize) -> Result<GenieCovariance> {
    if n == 0 {
        return Err(invalid("antenna count must be at least 1"));
    }
    let col = covariance_column(params, n);
    let scale = 1.0 / col[0].re;
    let col: Vec<C64> = col.iter().map(|c| c * scale).collect();
    let toeplitz = toeplitz_hermitian(&col);
    let eigen = HermitianEigen::new(&toeplitz);
    let min = eigen.min();
    if min < -1e-8 {
        return Err(numerical(format!("covariance quadrature is not PSD (min eigenvalue {min:e})")));
    }
    let (matrix, eigen) = if min < 0.0 {
        let clamped = HermitianEigen {
            values: eigen.values.map(|l| l.max(0.0)),
            vectors: eigen.vectors,
        };
        let mut m = clamped.reconstruct_with(|l| l);
        let tr: f64 = m.diagonal().iter().map(|z| z.re).sum();
        let s = n as f64 / tr;
        m *= C64::new(s, 0.0);
        let eigen = HermitianEigen { values: clamped.values * s, vectors: clamped.vectors };
        (m, eigen)
    } else {
        (toeplitz, eigen)
    };
    Ok(GenieCovariance { matrix, params: params.clone(), eigen })
}

/// `count` draws from `CN(0, C)` given an eigendecomposition of `C`, as the
/// columns of an `N x count` matrix. Negative eigenvalues are treated as zero.
pub fn sample_from_eigen<R: Rng + ?Sized>(eigen: &HermitianEigen, count: usize, rng: &mut R) -> CMatrix {
    let n = eigen.values.len();
    let mut factor = eigen.vectors.clone();
    for (j, &l) in eigen.values.iter().enumerate() {
        factor.column_mut(j).scale_mut(l.max(0.0).sqrt());
    }
    let white = CMatrix::from_fn(n, count, |_, _| complex_normal(rng));
    matmul(&factor, &white)
}

/// Draws `count` channels from `CN(0, C)` (columns of the result).
pub fn sample_channels<R: Rng + ?Sized>(cov: &CMatrix, count: usize, rng: &mut R) -> Result<CMatrix> {
    if count == 0 {
        return Err(invalid("sample count must be at least 1"));
    }
    if !cov.is_square() {
        return Err(invalid("covariance must be square"));
    }
    Ok(sample_from_eigen(&HermitianEigen::new(cov), count, rng))
}

/// Channel model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub antennas: usize,
    pub clusters: usize,
    /// Per-cluster angular standard deviation in radians.
    pub angle_spread: f64,
}

impl ScenarioConfig {
    pub fn new(antennas: usize, clusters: usize) -> Self {
        Self { antennas, clusters, angle_spread: DEFAULT_ANGLE_SPREAD_DEG.to_radians() }
    }

    /// Short identifier used in result tables, e.g. `3gpp-c1-n32`.
    pub fn id(&self) -> String {
        format!("3gpp-c{}-n{}", self.clusters, self.antennas)
    }

    fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.clusters == 0 {
            return Err(invalid("antennas and clusters must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub scenario: String,
    pub clusters: usize,
    pub seed: u64,
}

/// Ground-truth channels, one sample per column.
#[derive(Debug, Clone)]
pub struct ChannelDataset {
    pub samples: CMatrix,
    /// Cluster parameters per sample, when generated in-process.
    pub params: Option<Vec<ClusterParams>>,
    pub meta: DatasetMeta,
}

impl ChannelDataset {
    pub fn antennas(&self) -> usize {
        self.samples.nrows()
    }

    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }

    /// Genie covariance of sample `t`.
    pub fn genie_covariance(&self, t: usize) -> Result<GenieCovariance> {
        let params = self
            .params
            .as_ref()
            .ok_or_else(|| invalid("dataset carries no cluster parameters"))?;
        genie_covariance(&params[t], self.antennas())
    }
}

/// Noisy quantized pilot observations, one sample per column (`NP x T`).
#[derive(Debug, Clone)]
pub struct ObservationDataset {
    pub samples: CMatrix,
    pub antennas: usize,
    pub pilots: PilotConfig,
    pub sigma2: f64,
    pub quantizer: QuantizerSpec,
}

impl ObservationDataset {
    pub fn len(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.ncols() == 0
    }
}

fn draw_channel(scenario: &ScenarioConfig, seed: u64, index: usize) -> Result<(CVector, ClusterParams)> {
    let mut rng = stream(seed, index as u64);
    let params = draw_cluster_params(&mut rng, scenario.clusters, scenario.angle_spread)?;
    let cov = genie_covariance(&params, scenario.antennas)?;
    let h = sample_from_eigen(cov.eigen(), 1, &mut rng);
    Ok((h.column(0).into_owned(), params))
}

/// Dataset of `t` channels, each with freshly drawn cluster parameters.
///
/// Sample `i` uses its own random stream, so the result is identical for any
/// thread count.
pub fn build_dataset_h<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    t: usize,
    rng: &mut R,
) -> Result<ChannelDataset> {
    build_dataset_h_seeded(scenario, t, child_seed(rng))
}

pub fn build_dataset_h_seeded(scenario: &ScenarioConfig, t: usize, seed: u64) -> Result<ChannelDataset> {
    scenario.validate()?;
    let draws: Vec<(CVector, ClusterParams)> =
        (0..t).into_par_iter().map(|i| draw_channel(scenario, seed, i)).collect::<Result<_>>()?;
    let mut samples = CMatrix::zeros(scenario.antennas, t);
    let mut params = Vec::with_capacity(t);
    for (i, (h, p)) in draws.into_iter().enumerate() {
        samples.set_column(i, &h);
        params.push(p);
    }
    Ok(ChannelDataset {
        samples,
        params: Some(params),
        meta: DatasetMeta { scenario: scenario.id(), clusters: scenario.clusters, seed },
    })
}

/// Dataset of `t` quantized observations `Q(A h + n)` of fresh channels.
pub fn build_dataset_r<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    t: usize,
    sigma2: f64,
    quantizer: &QuantizerSpec,
    pilots: &PilotConfig,
    rng: &mut R,
) -> Result<ObservationDataset> {
    let channels = build_dataset_h(scenario, t, rng)?;
    let noise_seed = child_seed(rng);
    Ok(observe_dataset(&channels.samples, pilots, sigma2, quantizer, noise_seed))
}

/// Quantized observations of given channels, one noise stream per sample.
pub fn observe_dataset(
    channels: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    quantizer: &QuantizerSpec,
    seed: u64,
) -> ObservationDataset {
    let n = channels.nrows();
    let cols: Vec<Vec<C64>> = (0..channels.ncols())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, i as u64);
            crate::frontend::observe(channels.column(i).as_slice(), pilots, sigma2, quantizer, &mut rng)
        })
        .collect();
    let mut samples = CMatrix::zeros(n * pilots.len(), channels.ncols());
    for (i, c) in cols.into_iter().enumerate() {
        samples.set_column(i, &CVector::from_vec(c));
    }
    ObservationDataset {
        samples,
        antennas: n,
        pilots: pilots.clone(),
        sigma2,
        quantizer: quantizer.clone(),
    }
}
