//! Receiver front end: pilot design, AWGN and uniform scalar quantization.
//!
//! The quantized observation of one channel realization `h` is
//! `r = Q_B(A h + n)` with `A = a ⊗ I_N`, i.e. the `P` received pilot columns
//! stacked into one vector of length `N P` (pilot-major blocks of `N`).

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::sync::OnceLock;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::linalg::{CMatrix, CVector, C64};
use crate::rng::complex_normal;
use crate::special::{normal_cdf, normal_pdf};

/// Largest supported quantizer resolution.
pub const MAX_BITS: u32 = 8;

/// Pilot vector `a` with `||a||^2 = P`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotConfig {
    values: Vec<C64>,
}

impl PilotConfig {
    /// Wraps arbitrary pilots, checking the power constraint.
    pub fn from_values(values: Vec<C64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("pilot vector must not be empty"));
        }
        let p = values.len() as f64;
        let power: f64 = values.iter().map(|v| v.norm_sqr()).sum();
        if (power - p).abs() > 1e-10 * p {
            return Err(invalid(format!("pilot power {power} differs from P = {p}")));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    /// `A h` for `A = a ⊗ I_N`.
    pub fn apply(&self, h: &[C64]) -> Vec<C64> {
        self.values
            .iter()
            .flat_map(|&a| h.iter().map(move |&x| a * x))
            .collect()
    }

    /// `A C A^H`, the `NP x NP` matrix with blocks `a_p conj(a_q) C`.
    pub fn spread_covariance(&self, c: &CMatrix) -> CMatrix {
        let n = c.nrows();
        let p = self.len();
        let mut out = CMatrix::zeros(n * p, n * p);
        for (bp, &ap) in self.values.iter().enumerate() {
            for (bq, &aq) in self.values.iter().enumerate() {
                let w = ap * aq.conj();
                out.view_mut((bp * n, bq * n), (n, n)).copy_from(&(c * w));
            }
        }
        out
    }
}

/// Pilots with equidistant amplitudes in `[1/2, 1]` and phases in `[0, pi/2)`,
/// normalized to `||a||^2 = P`. A single pilot is the unit scalar.
pub fn make_pilots(p: usize) -> Result<PilotConfig> {
    if p == 0 {
        return Err(invalid("pilot count must be at least 1"));
    }
    if p == 1 {
        return PilotConfig::from_values(vec![C64::new(1.0, 0.0)]);
    }
    let raw: Vec<C64> = (0..p)
        .map(|i| {
            let amplitude = 0.5 + i as f64 / (2.0 * (p - 1) as f64);
            C64::from_polar(amplitude, PI / (2.0 * p as f64) * i as f64)
        })
        .collect();
    let norm: f64 = raw.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    let scale = (p as f64).sqrt() / norm;
    PilotConfig::from_values(raw.into_iter().map(|v| v * scale).collect())
}

/// Uniform mid-rise quantizer applied independently to real and imaginary
/// parts, or the identity ("infinite resolution") pass-through.
///
/// For `B` bits there are `2^B - 1` finite thresholds `Δ (i - 2^{B-1})` and
/// `2^B` labels at the cell midpoints; the outer cells are open, so inputs
/// beyond the outermost threshold saturate to the outermost label.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerSpec {
    bits: Option<u32>,
    delta: f64,
    thresholds: Vec<f64>,
    labels: Vec<f64>,
}

impl QuantizerSpec {
    /// Pass-through quantizer used for unquantized baselines.
    pub fn identity() -> Self {
        Self { bits: None, delta: 0.0, thresholds: Vec::new(), labels: Vec::new() }
    }

    /// Uniform quantizer with explicit step size.
    ///
    /// One-bit quantization always uses labels `±1/√2` (step `√2`), so the
    /// complex output has unit modulus regardless of `delta`.
    pub fn uniform(bits: u32, delta: f64) -> Result<Self> {
        if !(1..=MAX_BITS).contains(&bits) {
            return Err(invalid(format!("bits must be in [1, {MAX_BITS}], got {bits}")));
        }
        let delta = if bits == 1 { SQRT_2 } else { delta };
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(invalid(format!("step size must be positive, got {delta}")));
        }
        let levels = 1usize << bits;
        let half = (levels / 2) as f64;
        let thresholds = (1..levels).map(|i| delta * (i as f64 - half)).collect();
        let labels = (1..=levels).map(|i| delta * (i as f64 - half - 0.5)).collect();
        Ok(Self { bits: Some(bits), delta, thresholds, labels })
    }

    pub fn bits(&self) -> Option<u32> {
        self.bits
    }

    pub fn is_identity(&self) -> bool {
        self.bits.is_none()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Finite thresholds `τ_1 .. τ_{2^B - 1}`.
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Finite positive thresholds `τ̃_i = τ_{i + 2^{B-1}}`, `i = 1 .. 2^{B-1} - 1`.
    pub fn positive_thresholds(&self) -> &[f64] {
        match self.bits {
            None => &[],
            Some(b) => {
                let mid = 1usize << (b - 1);
                &self.thresholds[mid..]
            }
        }
    }

    /// Label index of a real input: the number of finite thresholds `<= x`.
    fn cell(&self, x: f64) -> usize {
        let levels = self.labels.len();
        let raw = (x / self.delta).floor() + (levels / 2) as f64;
        raw.clamp(0.0, (levels - 1) as f64) as usize
    }

    pub fn quantize_real(&self, x: f64) -> f64 {
        if self.is_identity() {
            return x;
        }
        self.labels[self.cell(x)]
    }

    pub fn quantize_scalar(&self, y: C64) -> C64 {
        C64::new(self.quantize_real(y.re), self.quantize_real(y.im))
    }

    /// Elementwise quantization of a complex vector.
    pub fn quantize(&self, y: &[C64]) -> Vec<C64> {
        y.iter().map(|&v| self.quantize_scalar(v)).collect()
    }
}

/// One-bit reduction `(sign(Re) + j sign(Im)) / √2`.
pub fn one_bit(y: C64) -> C64 {
    let s = |x: f64| if x >= 0.0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    C64::new(s(y.re), s(y.im))
}

/// Mean squared error of the `bits`-bit uniform quantizer with step `delta`
/// for a standard normal input, in closed form.
pub fn uniform_quantizer_mse(bits: u32, delta: f64) -> f64 {
    let levels = 1usize << bits;
    let half = (levels / 2) as f64;
    (1..=levels)
        .map(|i| {
            let lo = if i == 1 { f64::NEG_INFINITY } else { delta * (i as f64 - 1.0 - half) };
            let hi = if i == levels { f64::INFINITY } else { delta * (i as f64 - half) };
            let label = delta * (i as f64 - half - 0.5);
            let mass = normal_cdf(hi) - normal_cdf(lo);
            let x_phi = |x: f64| if x.is_finite() { x * normal_pdf(x) } else { 0.0 };
            let pdf = |x: f64| if x.is_finite() { normal_pdf(x) } else { 0.0 };
            // E[(x - l)^2; lo <= x < hi]
            mass * (1.0 + label * label) + x_phi(lo) - x_phi(hi) - 2.0 * label * (pdf(lo) - pdf(hi))
        })
        .sum()
}

/// MSE-optimal uniform step size for a standard normal input.
///
/// Grid search at 0.01 resolution followed by golden-section refinement to
/// 1e-6; computed once per process.
pub fn optimal_step(bits: u32) -> Result<f64> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(invalid(format!("bits must be in [1, {MAX_BITS}], got {bits}")));
    }
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| (1..=MAX_BITS).map(minimize_step).collect());
    Ok(table[bits as usize - 1])
}

fn minimize_step(bits: u32) -> f64 {
    let f = |d: f64| uniform_quantizer_mse(bits, d);
    let grid_best = (1..=400)
        .map(|i| i as f64 * 0.01)
        .min_by(|a, b| f(*a).total_cmp(&f(*b)))
        .expect("non-empty grid");
    let (mut lo, mut hi) = ((grid_best - 0.01).max(1e-4), grid_best + 0.01);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-6 {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Quantizer for `bits` bits at noise variance `sigma2`, with the step scaled
/// for a complex Gaussian input of variance `1 + sigma2`:
/// `Δ = sqrt((1 + σ²)/2) Δ*`.
pub fn make_quantizer(bits: u32, sigma2: f64) -> Result<QuantizerSpec> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("noise variance must be finite and >= 0, got {sigma2}")));
    }
    let step = optimal_step(bits)?;
    QuantizerSpec::uniform(bits, ((1.0 + sigma2) / 2.0).sqrt() * step)
}

/// Quantizer for an optional bit depth (`None` is infinite resolution).
pub fn make_quantizer_for(bits: Option<u32>, sigma2: f64) -> Result<QuantizerSpec> {
    match bits {
        None => Ok(QuantizerSpec::identity()),
        Some(b) => make_quantizer(b, sigma2),
    }
}

/// `r = Q_B(A h + n)` with `n ~ CN(0, sigma2 I)`.
pub fn observe<R: Rng + ?Sized>(
    h: &[C64],
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
    rng: &mut R,
) -> Vec<C64> {
    let noise_std = sigma2.sqrt();
    let mut y = pilots.apply(h);
    if sigma2 > 0.0 {
        for v in &mut y {
            *v += complex_normal(rng) * noise_std;
        }
    }
    q.quantize(&y)
}

/// Column-wise [`observe`] over a batch of channels (`N x T`).
pub fn observe_batch<R: Rng + ?Sized>(
    channels: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
    rng: &mut R,
) -> CMatrix {
    let n = channels.nrows();
    let np = n * pilots.len();
    let mut out = CMatrix::zeros(np, channels.ncols());
    for (t, h) in channels.column_iter().enumerate() {
        let r = observe(h.as_slice(), pilots, sigma2, q, rng);
        out.set_column(t, &CVector::from_vec(r));
    }
    out
}

/// SNR in dB to noise variance under `E||h||^2 = N`.
pub fn snr_db_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}
