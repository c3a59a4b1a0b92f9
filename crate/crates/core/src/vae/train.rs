//! Minibatch training with Adam and best-validation model selection.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use super::loss::{fourier_power, latent_noise, loss_with_noise, record_loss, LossBatch, LossOutput, ObservationNoise};
use super::model::VaeModel;
use crate::autodiff::Graph;
use crate::error::{invalid, numerical, Result};
use crate::frontend::{make_quantizer_for, observe, snr_db_to_sigma2, PilotConfig, QuantizerSpec};
use crate::linalg::{CMatrix, CVector};
use crate::rng::{child_seed, stream};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub validation_fraction: f64,
    /// SNR range in dB from which per-sample noise levels are drawn when
    /// observations are simulated from channels.
    pub snr_db_range: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 256,
            epochs: 200,
            validation_fraction: 0.1,
            snr_db_range: (-10.0, 20.0),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(invalid("learning rate and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("moment decays must lie in [0, 1)"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(invalid("validation fraction must lie in (0, 1)"));
        }
        if !(self.snr_db_range.0 <= self.snr_db_range.1) {
            return Err(invalid("SNR range must be ordered"));
        }
        Ok(())
    }
}

/// Training data of the VAE and the DNN baseline.
#[derive(Debug, Clone, Copy)]
pub enum TrainingData<'a> {
    /// Ground-truth channels (`N x T`). Each epoch draws fresh noise levels
    /// from the configured SNR range and feeds the resulting quantized pilot
    /// observations to the encoder, while the decoder scores the channel.
    Channels { h: &'a CMatrix, pilots: &'a PilotConfig, bits: Option<u32> },
    /// Single-snapshot quantized observations (`N x T`) with the noise
    /// variance each was taken at.
    Quantized { r: &'a CMatrix, sigma2: &'a [f64], bits: Option<u32> },
}

impl TrainingData<'_> {
    fn len(&self) -> usize {
        match self {
            TrainingData::Channels { h, .. } => h.ncols(),
            TrainingData::Quantized { r, .. } => r.ncols(),
        }
    }
}

/// One line of training progress. Epoch 0 is the initial model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

/// Adam moments for a list of parameter arrays.
#[derive(Debug, Clone)]
pub(crate) struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    pub(crate) fn new(shapes: &[(usize, usize)], cfg: &TrainConfig) -> Self {
        Self {
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            step: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
        }
    }

    pub(crate) fn update(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            });
        }
    }
}

/// Observations of the selected channels with per-sample noise levels
/// drawn uniformly in dB.
#[derive(Debug, Clone)]
pub(crate) struct SimulatedObservations {
    pub r: CMatrix,
}

pub(crate) fn simulate_observations(
    h: &CMatrix,
    pilots: &PilotConfig,
    bits: Option<u32>,
    snr_db_range: (f64, f64),
    seed: u64,
) -> Result<SimulatedObservations> {
    let draws = (0..h.ncols())
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, t as u64);
            let (lo, hi) = snr_db_range;
            let snr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let sigma2 = snr_db_to_sigma2(snr);
            let q = make_quantizer_for(bits, sigma2)?;
            Ok(observe(h.column(t).as_slice(), pilots, sigma2, &q, &mut rng))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut r = CMatrix::zeros(h.nrows() * pilots.len(), h.ncols());
    for (t, col) in draws.into_iter().enumerate() {
        r.set_column(t, &CVector::from_vec(col));
    }
    Ok(SimulatedObservations { r })
}

pub(crate) fn select_columns(x: &CMatrix, idx: &[usize]) -> CMatrix {
    CMatrix::from_fn(x.nrows(), idx.len(), |i, j| x[(i, idx[j])])
}

/// Random train/validation split of `0..t`.
pub(crate) fn split_indices<R: Rng + ?Sized>(t: usize, fraction: f64, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = ((t as f64) * fraction).round() as usize;
    if n_val == 0 || n_val >= t {
        return Err(invalid(format!("{t} samples are too few for a validation split of {fraction}")));
    }
    let mut idx: Vec<usize> = (0..t).collect();
    idx.shuffle(rng);
    let val = idx.split_off(t - n_val);
    Ok((idx, val))
}

/// Generic epoch loop: `epoch_data` prepares per-epoch inputs, `batch_loss`
/// evaluates a minibatch, `val_loss` scores the current model.
pub(crate) fn run_epochs<M: Clone, E, R: Rng + ?Sized>(
    model: &mut M,
    params: fn(&mut M) -> Vec<&mut Array2<f64>>,
    train: &[usize],
    cfg: &TrainConfig,
    rng: &mut R,
    mut epoch_data: impl FnMut(&mut R) -> Result<E>,
    batch_loss: impl Fn(&M, &E, &[usize], &mut R) -> Result<LossOutput>,
    val_loss: impl Fn(&M) -> Result<f64>,
) -> Result<TrainReport> {
    let shapes: Vec<_> = params(model).iter().map(|a| a.dim()).collect();
    let mut adam = Adam::new(&shapes, cfg);
    let initial = val_loss(model)?;
    let mut history = vec![EpochRecord { epoch: 0, train_loss: None, val_loss: initial }];
    log::info!("epoch 0 val_loss {initial:.6}");
    let (mut best, mut best_epoch) = (model.clone(), 0);
    let mut best_val = initial;
    let mut order = train.to_vec();
    let mut diverged = 0;
    for epoch in 1..=cfg.epochs {
        let data = epoch_data(rng)?;
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let out = batch_loss(model, &data, chunk, rng)?;
            total += out.value * chunk.len() as f64;
            count += chunk.len();
            adam.update(params(model), &out.gradients);
        }
        let train_loss = total / count.max(1) as f64;
        let val = val_loss(model)?;
        if !val.is_finite() {
            return Err(numerical(format!("validation loss became non-finite at epoch {epoch}")));
        }
        history.push(EpochRecord { epoch, train_loss: Some(train_loss), val_loss: val });
        log::info!("epoch {epoch} train_loss {train_loss:.6} val_loss {val:.6}");
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.clone();
        }
        if val > initial + 10.0 * initial.abs() {
            diverged += 1;
            if diverged >= 3 {
                return Err(numerical(format!(
                    "training diverged: validation loss {val:e} exceeded ten times the initial {initial:e} for 3 epochs"
                )));
            }
        } else {
            diverged = 0;
        }
    }
    *model = best;
    Ok(TrainReport { history, best_epoch })
}

const EVAL_CHUNK: usize = 2048;

/// Loss value of the VAE on a fixed set, in chunks, without gradients.
fn evaluate_vae(
    model: &VaeModel,
    input: &CMatrix,
    target: &CMatrix,
    noise: Option<(&[f64], &[QuantizerSpec])>,
    eps: &Array2<f64>,
) -> Result<f64> {
    let t = target.ncols();
    let mut total = 0.0;
    for start in (0..t).step_by(EVAL_CHUNK) {
        let len = EVAL_CHUNK.min(t - start);
        let inp = input.columns(start, len).into_owned();
        let tgt = target.columns(start, len).into_owned();
        let noise = noise.map(|(s, q)| ObservationNoise { sigma2: &s[start..start + len], quantizers: &q[start..start + len] });
        let batch = LossBatch { encoder_input: &inp, target: &tgt, noise };
        let e = eps.slice(ndarray::s![start..start + len, ..]).to_owned();
        let mut g = Graph::new();
        let params: Vec<_> = model.arrays().into_iter().map(|a| g.leaf(a.clone())).collect();
        let out = record_loss(model, &mut g, &params, &batch, &fourier_power(&tgt), &e)?;
        total += g.value(out)[(0, 0)] * len as f64;
    }
    Ok(total / t as f64)
}

/// Trains `model` in place and returns the progress history. The returned
/// parameters are those of the epoch with the lowest validation loss.
pub fn train_vae<R: Rng + ?Sized>(
    model: &mut VaeModel,
    data: TrainingData<'_>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (train, val) = split_indices(data.len(), cfg.validation_fraction, rng)?;
    let val_eps = latent_noise(val.len(), model.latent_dim(), rng);
    match data {
        TrainingData::Channels { h, pilots, bits } => {
            if h.nrows() != model.antennas() || pilots.len() != model.pilots() {
                return Err(invalid("channel dimension or pilot count does not match the model"));
            }
            let h_val = select_columns(h, &val);
            let obs_val = simulate_observations(&h_val, pilots, bits, cfg.snr_db_range, child_seed(rng))?;
            let h_train = select_columns(h, &train);
            let positions: Vec<usize> = (0..train.len()).collect();
            run_epochs(
                model,
                VaeModel::arrays_mut,
                &positions,
                cfg,
                rng,
                |rng| simulate_observations(&h_train, pilots, bits, cfg.snr_db_range, child_seed(rng)),
                |m, obs, idx, rng| {
                    let inp = select_columns(&obs.r, idx);
                    let tgt = select_columns(&h_train, idx);
                    let eps = latent_noise(idx.len(), m.latent_dim(), rng);
                    loss_with_noise(m, &LossBatch { encoder_input: &inp, target: &tgt, noise: None }, &eps)
                },
                |m| evaluate_vae(m, &obs_val.r, &h_val, None, &val_eps),
            )
        }
        TrainingData::Quantized { r, sigma2, bits } => {
            if model.pilots() != 1 || r.nrows() != model.antennas() {
                return Err(invalid("quantized training needs single-snapshot observations matching the model"));
            }
            if sigma2.len() != r.ncols() {
                return Err(invalid("one noise variance per observation is required"));
            }
            let quantizers = sigma2.iter().map(|&s| make_quantizer_for(bits, s)).collect::<Result<Vec<_>>>()?;
            let r_val = select_columns(r, &val);
            let s_val: Vec<f64> = val.iter().map(|&i| sigma2[i]).collect();
            let q_val: Vec<QuantizerSpec> = val.iter().map(|&i| quantizers[i].clone()).collect();
            run_epochs(
                model,
                VaeModel::arrays_mut,
                &train,
                cfg,
                rng,
                |_| Ok(()),
                |m, _, idx, rng| {
                    let batch_r = select_columns(r, idx);
                    let s: Vec<f64> = idx.iter().map(|&i| sigma2[i]).collect();
                    let q: Vec<QuantizerSpec> = idx.iter().map(|&i| quantizers[i].clone()).collect();
                    let eps = latent_noise(idx.len(), m.latent_dim(), rng);
                    let noise = ObservationNoise { sigma2: &s, quantizers: &q };
                    loss_with_noise(m, &LossBatch { encoder_input: &batch_r, target: &batch_r, noise: Some(noise) }, &eps)
                },
                |m| evaluate_vae(m, &r_val, &r_val, Some((&s_val, &q_val)), &val_eps),
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::sample_channels;
    use crate::frontend::make_pilots;
    use crate::linalg::{circulant_from_spectrum, CMatrix};

    #[test]
    fn adam_moves_against_the_gradient() {
        let cfg = TrainConfig { learning_rate: 0.1, ..Default::default() };
        let mut adam = Adam::new(&[(1, 2)], &cfg);
        let mut p = Array2::from_elem((1, 2), 1.0);
        adam.update(vec![&mut p], &[ndarray::array![[2.0, -0.5]]]);
        // First step has magnitude lr per coordinate.
        assert!((p[(0, 0)] - 0.9).abs() < 1e-6 && (p[(0, 1)] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn training_is_deterministic_and_improves_validation() {
        let spectrum = [2.0, 1.0, 0.3, 0.1, 0.1, 0.3, 1.0, 2.0];
        let cov = circulant_from_spectrum(&spectrum);
        let h = sample_channels(&cov, 400, &mut stream(1, 0)).unwrap();
        let pilots = make_pilots(1).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 64, snr_db_range: (10.0, 10.0), ..Default::default() };
        let run = || {
            let mut rng = stream(2, 0);
            let mut model = VaeModel::init(8, 2, 1, &mut rng).unwrap();
            let report = train_vae(&mut model, TrainingData::Channels { h: &h, pilots: &pilots, bits: None }, &cfg, &mut rng).unwrap();
            (model, report)
        };
        let (a, report) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        assert!(report.history[report.best_epoch].val_loss < report.history[0].val_loss);
        assert_eq!(report.history.len(), 5);
    }

    #[test]
    fn too_small_validation_split_is_rejected() {
        let h = CMatrix::zeros(8, 5);
        let pilots = make_pilots(1).unwrap();
        let mut rng = stream(3, 0);
        let mut model = VaeModel::init(8, 2, 1, &mut rng).unwrap();
        let cfg = TrainConfig { validation_fraction: 0.05, ..Default::default() };
        assert!(train_vae(&mut model, TrainingData::Channels { h: &h, pilots: &pilots, bits: None }, &cfg, &mut rng).is_err());
    }
}
