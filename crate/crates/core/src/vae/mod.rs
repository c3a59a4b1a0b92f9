//! Variational autoencoder with a circulant-covariance decoder, its training
//! on channels or quantized observations, the estimator it parameterizes,
//! and a direct-regression network baseline.

mod dnn;
mod loss;
mod model;
mod network;
mod train;

pub use dnn::{dnn_widths, estimate_dnn, train_dnn_baseline};
pub use loss::{
    elbo_loss, elbo_loss_quantized, fourier_power, gradient_check, latent_noise, loss_with_noise, GradCheckReport,
    LossBatch, LossOutput, ObservationNoise, FD_STEP,
};
pub use model::{circulant_estimate, estimate_bvae, VaeModel, VaeWidths};
pub use network::{complex_to_rows, pilot_features, rows_to_complex, Activation, Layer, MlpParams};
pub use train::{train_vae, EpochRecord, TrainConfig, TrainReport, TrainingData};
