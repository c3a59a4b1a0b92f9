//! Channel estimation for massive MIMO receivers with coarsely quantized
//! outputs, built on conditionally Gaussian latent models (GMM, MFA, VAE)
//! and a per-condition Bussgang decomposition.

pub mod autodiff;
pub mod bussgang;
pub mod channels;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod io;
pub mod linalg;
pub mod mixtures;
pub mod quantized_learning;
pub mod rng;
pub mod special;
pub mod vae;

pub use channels::{ChannelDataset, ClusterParams, GenieCovariance, ObservationDataset, ScenarioConfig};
pub use error::{Error, Result};
pub use eval::{EvalRecord, Estimator, NamedEstimator, SweepConfig, TestSet};
pub use frontend::{PilotConfig, QuantizerSpec};
pub use linalg::{CMatrix, CVector, C64};
pub use mixtures::{CovStructure, EmOptions, FitReport, GmmModel, MfaModel};
pub use vae::{MlpParams, VaeModel};
