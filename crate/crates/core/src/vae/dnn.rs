//! Feed-forward network mapping pilot observations directly to channel
//! estimates, trained with the squared error.

use ndarray::Array2;
use rand::Rng;

use super::loss::LossOutput;
use super::network::{complex_to_rows, rows_to_complex, MlpParams};
use super::train::{run_epochs, select_columns, simulate_observations, split_indices, TrainConfig, TrainReport};
use crate::autodiff::Graph;
use crate::error::{invalid, Result};
use crate::frontend::PilotConfig;
use crate::linalg::CMatrix;
use crate::rng::child_seed;

/// Widths `2NP -> 2N² -> 2N² -> 2N`.
pub fn dnn_widths(antennas: usize, pilots: usize) -> Vec<usize> {
    let hidden = 2 * antennas * antennas;
    vec![2 * antennas * pilots, hidden, hidden, 2 * antennas]
}

fn mse_loss(net: &MlpParams, r: &CMatrix, h: &CMatrix) -> LossOutput {
    let mut g = Graph::new();
    let params: Vec<_> = net.arrays().into_iter().map(|a| g.leaf(a.clone())).collect();
    let x = g.leaf(complex_to_rows(r));
    let y = net.forward(&mut g, x, &params);
    let target = g.leaf(complex_to_rows(h));
    let diff = g.sub(y, target);
    let sq = g.square(diff);
    let total = g.sum(sq);
    let out = g.scale(total, 1.0 / h.ncols() as f64);
    let grads = g.backward(out);
    let gradients = params.iter().zip(net.arrays()).map(|(&v, a)| grads.get(v, a.dim())).collect();
    LossOutput { value: g.value(out)[(0, 0)], gradients }
}

fn mse_value(net: &MlpParams, r: &CMatrix, h: &CMatrix) -> f64 {
    let err = net.evaluate(&complex_to_rows(r)) - complex_to_rows(h);
    err.mapv(|v| v * v).sum() / h.ncols() as f64
}

/// Trains the baseline on channels `h` (`N x T`) with observations simulated
/// across the configured SNR range.
pub fn train_dnn_baseline<R: Rng + ?Sized>(
    h: &CMatrix,
    pilots: &PilotConfig,
    bits: Option<u32>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(MlpParams, TrainReport)> {
    let n = h.nrows();
    let mut net = MlpParams::init(&dnn_widths(n, pilots.len()), rng)?;
    let (train, val) = split_indices(h.ncols(), cfg.validation_fraction, rng)?;
    let h_val = select_columns(h, &val);
    let obs_val = simulate_observations(&h_val, pilots, bits, cfg.snr_db_range, child_seed(rng))?;
    let h_train = select_columns(h, &train);
    let positions: Vec<usize> = (0..train.len()).collect();
    let report = run_epochs(
        &mut net,
        MlpParams::arrays_mut,
        &positions,
        cfg,
        rng,
        |rng| simulate_observations(&h_train, pilots, bits, cfg.snr_db_range, child_seed(rng)),
        |m, obs, idx, _| Ok(mse_loss(m, &select_columns(&obs.r, idx), &select_columns(&h_train, idx))),
        |m| Ok(mse_value(m, &obs_val.r, &h_val)),
    )?;
    Ok((net, report))
}

/// Channel estimates (`N x T`) of observations `r` (`NP x T`).
pub fn estimate_dnn(net: &MlpParams, r: &CMatrix) -> Result<CMatrix> {
    if net.input_dim() != 2 * r.nrows() || !net.output_dim().is_multiple_of(2) {
        return Err(invalid(format!("network expects {} inputs, observations have {}", net.input_dim(), 2 * r.nrows())));
    }
    let out: Array2<f64> = net.evaluate(&complex_to_rows(r));
    Ok(rows_to_complex(&out))
}
