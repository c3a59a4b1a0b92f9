//! VAE with a Gaussian latent and a circulant-covariance decoder, and the
//! estimator it parameterizes.

use std::f64::consts::FRAC_2_PI;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use super::network::{pilot_features, MlpParams};
use crate::autodiff::{Graph, Var};
use crate::bussgang::{conditional_lmmse, gain_scalar};
use crate::error::{invalid, Result};
use crate::frontend::{PilotConfig, QuantizerSpec};
use crate::linalg::{adj_matmul, circulant_from_spectrum, dft_matrix, matmul, CMatrix, C64};

/// Layer widths of the three networks of a [`VaeModel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VaeWidths {
    /// Channel counts of the 1x1 convolution stack, `2P -> ... -> 2`; empty
    /// for a single pilot.
    pub conv: Vec<usize>,
    /// `2N -> ... -> 2L`.
    pub encoder: Vec<usize>,
    /// `L -> ... -> N`.
    pub decoder: Vec<usize>,
}

impl VaeWidths {
    /// Four-layer encoder `2N -> max(2N, 128)` followed by a geometric taper
    /// to `2L`, a mirrored decoder, and `ceil(P/2)` convolution layers
    /// tapering `2P` channels to 2.
    pub fn default_for(antennas: usize, latent: usize, pilots: usize) -> Self {
        let first = (2 * antennas).max(128);
        let out = 2 * latent;
        let ratio = (out as f64 / first as f64).powf(1.0 / 3.0);
        let hidden: Vec<usize> = (0..3).map(|i| ((first as f64 * ratio.powi(i)).round() as usize).max(out)).collect();
        let encoder = [vec![2 * antennas], hidden.clone(), vec![out]].concat();
        let decoder = [vec![latent], hidden.iter().rev().copied().collect(), vec![antennas]].concat();
        let conv = if pilots > 1 {
            let layers = pilots.div_ceil(2);
            let step = (1.0 / pilots as f64).powf(1.0 / layers as f64);
            (0..=layers)
                .map(|i| ((2 * pilots) as f64 * step.powi(i as i32)).round().max(2.0) as usize)
                .collect()
        } else {
            Vec::new()
        };
        Self { conv, encoder, decoder }
    }
}

/// Trained or freshly initialized VAE.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    antennas: usize,
    latent: usize,
    pilots: usize,
    conv: Option<MlpParams>,
    encoder: MlpParams,
    decoder: MlpParams,
}

impl VaeModel {
    pub fn new(
        antennas: usize,
        latent: usize,
        pilots: usize,
        conv: Option<MlpParams>,
        encoder: MlpParams,
        decoder: MlpParams,
    ) -> Result<Self> {
        if latent == 0 || latent >= antennas || pilots == 0 {
            return Err(invalid(format!("need 1 <= L < N and P >= 1, got N = {antennas}, L = {latent}, P = {pilots}")));
        }
        match (&conv, pilots) {
            (None, 1) => {}
            (Some(c), p) if p > 1 && c.input_dim() == 2 * p && c.output_dim() == 2 => {}
            _ => return Err(invalid("a 2P -> 2 convolution stack is required exactly when P > 1")),
        }
        if encoder.input_dim() != 2 * antennas || encoder.output_dim() != 2 * latent {
            return Err(invalid(format!("encoder must map {} -> {}", 2 * antennas, 2 * latent)));
        }
        if decoder.input_dim() != latent || decoder.output_dim() != antennas {
            return Err(invalid(format!("decoder must map {latent} -> {antennas}")));
        }
        Ok(Self { antennas, latent, pilots, conv, encoder, decoder })
    }

    pub fn init<R: Rng + ?Sized>(antennas: usize, latent: usize, pilots: usize, rng: &mut R) -> Result<Self> {
        Self::init_with_widths(antennas, latent, pilots, &VaeWidths::default_for(antennas, latent, pilots), rng)
    }

    pub fn init_with_widths<R: Rng + ?Sized>(
        antennas: usize,
        latent: usize,
        pilots: usize,
        widths: &VaeWidths,
        rng: &mut R,
    ) -> Result<Self> {
        let conv = if pilots > 1 { Some(MlpParams::init(&widths.conv, rng)?) } else { None };
        let encoder = MlpParams::init(&widths.encoder, rng)?;
        let decoder = MlpParams::init(&widths.decoder, rng)?;
        Self::new(antennas, latent, pilots, conv, encoder, decoder)
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn latent_dim(&self) -> usize {
        self.latent
    }

    pub fn pilots(&self) -> usize {
        self.pilots
    }

    pub fn conv(&self) -> Option<&MlpParams> {
        self.conv.as_ref()
    }

    pub fn encoder(&self) -> &MlpParams {
        &self.encoder
    }

    pub fn decoder(&self) -> &MlpParams {
        &self.decoder
    }

    pub fn widths(&self) -> VaeWidths {
        VaeWidths {
            conv: self.conv.as_ref().map_or_else(Vec::new, MlpParams::widths),
            encoder: self.encoder.widths(),
            decoder: self.decoder.widths(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// All parameter arrays: convolution stack, encoder, decoder.
    pub fn arrays(&self) -> Vec<&Array2<f64>> {
        let mut out = self.conv.as_ref().map_or_else(Vec::new, MlpParams::arrays);
        out.extend(self.encoder.arrays());
        out.extend(self.decoder.arrays());
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.conv.as_mut().map_or_else(Vec::new, MlpParams::arrays_mut);
        out.extend(self.encoder.arrays_mut());
        out.extend(self.decoder.arrays_mut());
        out
    }

    /// Names of the parameter blocks in [`Self::arrays`] order.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        let mut push = |net: &str, mlp: &MlpParams| {
            for i in 0..mlp.layers().len() {
                names.push(format!("{net}.{i}.weight"));
                names.push(format!("{net}.{i}.bias"));
            }
        };
        if let Some(c) = &self.conv {
            push("conv", c);
        }
        push("encoder", &self.encoder);
        push("decoder", &self.decoder);
        names
    }

    fn check_observations(&self, r: &CMatrix) -> Result<()> {
        if r.nrows() != self.antennas * self.pilots {
            return Err(invalid(format!(
                "observations have {} rows, model expects N P = {}",
                r.nrows(),
                self.antennas * self.pilots
            )));
        }
        Ok(())
    }

    /// Records the encoder on observations `r` (`NP x T`); returns the
    /// latent mean and log-variance, both `T x L`.
    pub(crate) fn encode_graph(&self, g: &mut Graph, r: &CMatrix, params: &[Var]) -> Result<(Var, Var)> {
        self.check_observations(r)?;
        let t = r.ncols();
        let x = g.leaf(pilot_features(r, self.antennas));
        let mut offset = 0;
        let x = match &self.conv {
            Some(c) => {
                let n = c.arrays().len();
                let y = c.forward(g, x, &params[..n]);
                offset = n;
                g.reshape(y, t, 2 * self.antennas)
            }
            None => g.reshape(x, t, 2 * self.antennas),
        };
        let n_enc = self.encoder.arrays().len();
        let out = self.encoder.forward(g, x, &params[offset..offset + n_enc]);
        let mu = g.columns(out, 0, self.latent);
        let logvar = g.columns(out, self.latent, self.latent);
        Ok((mu, logvar))
    }

    /// Records the decoder; returns `log c` (`T x N`).
    pub(crate) fn decode_graph(&self, g: &mut Graph, z: Var, params: &[Var]) -> Var {
        let n_dec = self.decoder.arrays().len();
        self.decoder.forward(g, z, &params[params.len() - n_dec..])
    }

    /// Latent means `T x L` of observations `r`.
    pub fn encode_mean(&self, r: &CMatrix) -> Result<Array2<f64>> {
        self.check_observations(r)?;
        let x = pilot_features(r, self.antennas);
        let x = match &self.conv {
            Some(c) => c.evaluate(&x),
            None => x,
        };
        let x = x.into_shape_with_order((r.ncols(), 2 * self.antennas)).expect("two channels per antenna");
        let out = self.encoder.evaluate(&x);
        Ok(out.slice(ndarray::s![.., ..self.latent]).to_owned())
    }

    /// Spectra `c_θ(z)` (`T x N`, strictly positive) for latent rows `z`.
    pub fn decode(&self, z: &Array2<f64>) -> Array2<f64> {
        self.decoder.evaluate(z).mapv(f64::exp)
    }

    /// Spectra of the circulant channel covariances for observations `r`,
    /// decoded at the latent mean.
    pub fn spectra(&self, r: &CMatrix) -> Result<Array2<f64>> {
        Ok(self.decode(&self.encode_mean(r)?))
    }
}

/// Bussgang LMMSE estimate of single-pilot observations `r` (`N x T`) for
/// per-sample circulant channel covariances `F^H diag(c_t) F`, with `c_t`
/// the rows of `spectra`.
///
/// Circulant structure is preserved by the quantizer (its output covariance
/// depends on the entries only through the lag), so the filter is diagonal
/// in the DFT domain and no matrix is factorized.
pub fn circulant_estimate(spectra: &Array2<f64>, r: &CMatrix, sigma2: f64, q: &QuantizerSpec) -> Result<CMatrix> {
    let (t, n) = spectra.dim();
    if r.nrows() != n || r.ncols() != t {
        return Err(invalid(format!("observations {}x{} do not match spectra {t}x{n}", r.nrows(), r.ncols())));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("noise variance must be positive, got {sigma2}")));
    }
    let f = dft_matrix(n);
    let sqrt_n = (n as f64).sqrt();
    // First columns of the receive covariances, one per sample.
    let s_y = CMatrix::from_fn(n, t, |k, s| C64::new(spectra[(s, k)] + sigma2, 0.0));
    let cols = adj_matmul(&f, &s_y) / C64::new(sqrt_n, 0.0);
    let mut gains = vec![0.0; t];
    let mut cols_r = cols.clone();
    for s in 0..t {
        let d = cols[(0, s)].re;
        gains[s] = gain_scalar(d, q)?;
        match q.bits() {
            None => {}
            Some(1) => {
                cols_r[(0, s)] = C64::new(1.0, 0.0);
                for m in 1..n {
                    let z = cols[(m, s)] / d;
                    cols_r[(m, s)] = C64::new(z.re.clamp(-1.0, 1.0).asin(), z.im.clamp(-1.0, 1.0).asin()) * FRAC_2_PI;
                }
            }
            Some(_) => {
                let rho = gains[s].min(1.0);
                for m in 1..n {
                    cols_r[(m, s)] *= rho * rho;
                }
            }
        }
    }
    let lambda_r = matmul(&f, &cols_r) * C64::new(sqrt_n, 0.0);
    let mut x = matmul(&f, r);
    for s in 0..t {
        for k in 0..n {
            let lam = lambda_r[(k, s)].re.max(f64::MIN_POSITIVE);
            x[(k, s)] *= gains[s] * spectra[(s, k)] / lam;
        }
    }
    Ok(adj_matmul(&f, &x))
}

/// VAE-parameterized Bussgang estimator: the encoder's latent mean is
/// decoded into a circulant channel covariance per observation, which then
/// defines a conditional Bussgang LMMSE filter.
pub fn estimate_bvae(
    model: &VaeModel,
    r: &CMatrix,
    pilots: &PilotConfig,
    sigma2: f64,
    q: &QuantizerSpec,
) -> Result<CMatrix> {
    if pilots.len() != model.pilots() {
        return Err(invalid(format!("model expects {} pilots, got {}", model.pilots(), pilots.len())));
    }
    let spectra = model.spectra(r)?;
    if pilots.len() == 1 && pilots.values()[0] == C64::new(1.0, 0.0) {
        return circulant_estimate(&spectra, r, sigma2, q);
    }
    let n = model.antennas();
    let cols = (0..r.ncols())
        .into_par_iter()
        .map(|t| {
            let c = circulant_from_spectrum(spectra.row(t).as_slice().expect("contiguous row"));
            let w = conditional_lmmse(&c, pilots, sigma2, q)?;
            Ok(w.apply(&r.columns(t, 1).into_owned()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CMatrix::from_fn(n, r.ncols(), |i, t| cols[t][(i, 0)]))
}
