//! Negative ELBO of the VAE on channels and on quantized observations.

use ndarray::Array2;
use rand::Rng;

use super::model::VaeModel;
use crate::autodiff::{Graph, Var};
use crate::bussgang::{gain_scalar, gain_scalar_derivative};
use crate::error::{invalid, numerical, Result};
use crate::frontend::QuantizerSpec;
use crate::linalg::{dft_matrix, matmul, CMatrix};
use crate::rng::standard_normal;

/// Noise and quantizer of the observations a quantized loss is evaluated on,
/// one entry per sample.
#[derive(Debug, Clone, Copy)]
pub struct ObservationNoise<'a> {
    pub sigma2: &'a [f64],
    pub quantizers: &'a [QuantizerSpec],
}

/// Inputs of one loss evaluation on a batch of `T` samples.
#[derive(Debug, Clone)]
pub struct LossBatch<'a> {
    /// Encoder input, `NP x T`.
    pub encoder_input: &'a CMatrix,
    /// Vector scored by the decoder distribution, `N x T`.
    pub target: &'a CMatrix,
    /// `None` scores `target` as a channel; otherwise as a quantized
    /// observation whose covariance is derived from the decoded spectrum.
    pub noise: Option<ObservationNoise<'a>>,
}

/// Mean loss over a batch and its gradient per parameter array.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub gradients: Vec<Array2<f64>>,
}

/// `|F x_t|²` as a `T x N` array.
pub fn fourier_power(x: &CMatrix) -> Array2<f64> {
    let fx = matmul(&dft_matrix(x.nrows()), x);
    Array2::from_shape_fn((x.ncols(), x.nrows()), |(t, k)| fx[(k, t)].norm_sqr())
}

/// Standard normal draws for the reparameterized latent, `T x L`.
pub fn latent_noise<R: Rng + ?Sized>(t: usize, latent: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((t, latent), || standard_normal(rng))
}

/// Records the mean negative ELBO of a batch; `power` is the Fourier power
/// of the target and `eps` the latent noise.
pub(crate) fn record_loss(
    model: &VaeModel,
    g: &mut Graph,
    params: &[Var],
    batch: &LossBatch<'_>,
    power: &Array2<f64>,
    eps: &Array2<f64>,
) -> Result<Var> {
    let (t, n) = (batch.target.ncols(), model.antennas());
    if batch.target.nrows() != n || batch.encoder_input.ncols() != t {
        return Err(invalid(format!(
            "target is {}x{}, expected {n} rows and {} columns",
            batch.target.nrows(),
            t,
            batch.encoder_input.ncols()
        )));
    }
    let (mu, logvar) = model.encode_graph(g, batch.encoder_input, params)?;
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let e = g.leaf(eps.clone());
    let spread = g.mul(std, e);
    let z = g.add(mu, spread);
    let log_c = model.decode_graph(g, z, params);
    let p = g.leaf(power.clone());

    let data = match batch.noise {
        None => {
            // log c + p / c with the division written as p exp(-log c).
            let neg = g.scale(log_c, -1.0);
            let inv = g.exp(neg);
            let quad = g.mul(p, inv);
            g.add(log_c, quad)
        }
        Some(noise) => {
            if noise.sigma2.len() != t || noise.quantizers.len() != t {
                return Err(invalid("noise description must have one entry per sample"));
            }
            let c = g.exp(log_c);
            let sig = g.leaf(Array2::from_shape_fn((t, 1), |(s, _)| noise.sigma2[s]));
            let sig_b = g.broadcast_col(sig, n);
            let c_y = g.add(c, sig_b);
            let level = g.row_mean(c_y);
            let levels: Vec<f64> = g.value(level).iter().copied().collect();
            for (s, &d) in levels.iter().enumerate() {
                let gain = gain_scalar(d, &noise.quantizers[s])?;
                g.note_branch(gain < 1.0);
            }
            let rho = g.unary(level, |s, d| {
                let q = &noise.quantizers[s];
                let gain = gain_scalar(d, q).unwrap_or(1.0);
                if gain < 1.0 {
                    (gain, gain_scalar_derivative(d, q).unwrap_or(0.0))
                } else {
                    (1.0, 0.0)
                }
            });
            let rho2 = g.square(rho);
            let rho2_b = g.broadcast_col(rho2, n);
            let scaled = g.mul(rho2_b, c_y);
            let neg = g.scale(rho2, -1.0);
            let rest = g.add_scalar(neg, 1.0);
            let floor = g.mul(rest, level);
            let floor_b = g.broadcast_col(floor, n);
            let c_r = g.add(scaled, floor_b);
            let log_cr = g.ln(c_r);
            let inv = g.recip(c_r);
            let quad = g.mul(p, inv);
            g.add(log_cr, quad)
        }
    };
    let data_sum = g.sum(data);

    let var = g.exp(logvar);
    let diff = g.sub(var, logvar);
    let mu2 = g.square(mu);
    let kl_terms = g.add(diff, mu2);
    let kl_raw = g.sum(kl_terms);
    // 0.5 * sum(mu² + σ² - log σ² - 1)
    let kl_shift = g.add_scalar(kl_raw, -((t * model.latent_dim()) as f64));
    let kl = g.scale(kl_shift, 0.5);

    let total = g.add(data_sum, kl);
    Ok(g.scale(total, 1.0 / t as f64))
}

fn register(model: &VaeModel, g: &mut Graph) -> Vec<Var> {
    model.arrays().into_iter().map(|a| g.leaf(a.clone())).collect()
}

/// Loss and gradients for a batch with explicit latent noise.
pub fn loss_with_noise(model: &VaeModel, batch: &LossBatch<'_>, eps: &Array2<f64>) -> Result<LossOutput> {
    let power = fourier_power(batch.target);
    let mut g = Graph::new();
    let params = register(model, &mut g);
    let out = record_loss(model, &mut g, &params, batch, &power, eps)?;
    let value = g.value(out)[(0, 0)];
    if !value.is_finite() {
        return Err(numerical(format!("non-finite VAE loss {value}")));
    }
    let grads = g.backward(out);
    let shapes: Vec<_> = model.arrays().iter().map(|a| a.dim()).collect();
    let gradients = params.iter().zip(shapes).map(|(&v, s)| grads.get(v, s)).collect();
    Ok(LossOutput { value, gradients })
}

fn loss_value(model: &VaeModel, batch: &LossBatch<'_>, power: &Array2<f64>, eps: &Array2<f64>) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let params = register(model, &mut g);
    let out = record_loss(model, &mut g, &params, batch, power, eps)?;
    Ok((g.value(out)[(0, 0)], g.branch_pattern().to_vec()))
}

/// Negative ELBO of channels `h` (`N x T`) with the encoder also fed `h`.
pub fn elbo_loss<R: Rng + ?Sized>(model: &VaeModel, h: &CMatrix, rng: &mut R) -> Result<LossOutput> {
    let eps = latent_noise(h.ncols(), model.latent_dim(), rng);
    loss_with_noise(model, &LossBatch { encoder_input: h, target: h, noise: None }, &eps)
}

/// Negative ELBO of single-snapshot quantized observations `r = Q(h + n)`
/// (`N x T`), scored under the observation covariance implied by the
/// decoded channel spectrum, noise variance `sigma2` and quantizer `q`.
pub fn elbo_loss_quantized<R: Rng + ?Sized>(
    model: &VaeModel,
    r: &CMatrix,
    sigma2: f64,
    q: &QuantizerSpec,
    rng: &mut R,
) -> Result<LossOutput> {
    if model.pilots() != 1 {
        return Err(invalid("the quantized loss assumes single-snapshot observations"));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("noise variance must be finite and >= 0, got {sigma2}")));
    }
    let sig = vec![sigma2; r.ncols()];
    let qs = vec![q.clone(); r.ncols()];
    let eps = latent_noise(r.ncols(), model.latent_dim(), rng);
    let noise = ObservationNoise { sigma2: &sig, quantizers: &qs };
    loss_with_noise(model, &LossBatch { encoder_input: r, target: r, noise: Some(noise) }, &eps)
}

/// Agreement of reverse-mode gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Per parameter block: name and the largest absolute deviation divided
    /// by the largest gradient magnitude of the block.
    pub blocks: Vec<(String, f64)>,
    /// Perturbations skipped because they switched a ReLU or clamp branch.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.1).fold(0.0, f64::max)
    }
}

/// Finite-difference step of [`gradient_check`].
pub const FD_STEP: f64 = 1e-5;

/// Compares the gradients of the loss on `batch` (fixed latent noise `eps`)
/// with central finite differences for every parameter.
pub fn gradient_check(model: &VaeModel, batch: &LossBatch<'_>, eps: &Array2<f64>) -> Result<GradCheckReport> {
    let analytic = loss_with_noise(model, batch, eps)?;
    let power = fourier_power(batch.target);
    let (_, base_pattern) = loss_value(model, batch, &power, eps)?;
    let names = model.block_names();
    let mut blocks = Vec::with_capacity(names.len());
    let mut skipped = 0;
    let mut probe = model.clone();
    for (b, name) in names.into_iter().enumerate() {
        let grad = &analytic.gradients[b];
        let mut numeric = Array2::zeros(grad.raw_dim());
        let mut valid = Array2::from_elem(grad.raw_dim(), true);
        for idx in ndarray::indices(grad.raw_dim()) {
            let orig = probe.arrays()[b][idx];
            probe.arrays_mut()[b][idx] = orig + FD_STEP;
            let (up, up_pattern) = loss_value(&probe, batch, &power, eps)?;
            probe.arrays_mut()[b][idx] = orig - FD_STEP;
            let (down, down_pattern) = loss_value(&probe, batch, &power, eps)?;
            probe.arrays_mut()[b][idx] = orig;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                valid[idx] = false;
                skipped += 1;
                continue;
            }
            numeric[idx] = (up - down) / (2.0 * FD_STEP);
        }
        let mut scale = 0.0f64;
        let mut dev = 0.0f64;
        for ((a, n), ok) in grad.iter().zip(&numeric).zip(&valid) {
            if *ok {
                scale = scale.max(a.abs()).max(n.abs());
                dev = dev.max((a - n).abs());
            }
        }
        blocks.push((name, if scale > 0.0 { dev / scale } else { dev }));
    }
    Ok(GradCheckReport { blocks, skipped })
}
