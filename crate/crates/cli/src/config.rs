//! Run configuration: a TOML file with a `version` key. Every section and
//! field is optional; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use qcest::channels::DEFAULT_ANGLE_SPREAD_DEG;
use qcest::CovStructure;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Bit depth, `"inf"` for an unquantized receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bits(pub Option<u32>);

impl Serialize for Bits {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(b) => s.serialize_u32(b),
            None => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Bits {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct BitsVisitor;
        impl Visitor<'_> for BitsVisitor {
            type Value = Bits;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a positive bit count or \"inf\"")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Bits, E> {
                u32::try_from(v).ok().filter(|&b| b > 0).map(|b| Bits(Some(b))).ok_or_else(|| E::custom(format!("invalid bit count {v}")))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Bits, E> {
                match v {
                    "inf" => Ok(Bits(None)),
                    _ => Err(E::custom(format!("expected \"inf\", got \"{v}\""))),
                }
            }
        }
        d.deserialize_any(BitsVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub antennas: usize,
    pub clusters: usize,
    pub angle_spread_deg: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self { antennas: 32, clusters: 1, angle_spread_deg: DEFAULT_ANGLE_SPREAD_DEG }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendSection {
    pub pilots: usize,
    pub bits: Bits,
    /// Evaluation SNR grid.
    pub snr_db: Vec<f64>,
}

impl Default for FrontendSection {
    fn default() -> Self {
        Self { pilots: 1, bits: Bits(Some(1)), snr_db: vec![-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_samples: usize,
    pub test_samples: usize,
    /// Noise level of generated quantized training observations.
    pub observation_snr_db: f64,
    /// Channel dataset to train on instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { train_samples: 100_000, test_samples: 10_000, observation_snr_db: 10.0, train_path: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// GMM fitted on channels.
    Gmm,
    /// MFA fitted on channels.
    Mfa,
    /// GMM fitted on quantized observations at `data.observation_snr_db`.
    GmmQuantized,
    /// VAE trained on channels (encoder sees simulated observations).
    Vae,
    /// VAE trained on quantized observations at `data.observation_snr_db`.
    VaeQuantized,
    /// Direct regression network.
    Dnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub components: usize,
    pub latent_dim: usize,
    pub structure: String,
    pub max_iter: usize,
    pub tol: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// SNR range for networks trained on simulated observations.
    pub train_snr_db: [f64; 2],
    /// Output file; defaults to `model.qcm` or `model.qcv` in the output
    /// directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Gmm,
            components: 16,
            latent_dim: 16,
            structure: CovStructure::Full.name().to_string(),
            max_iter: 100,
            tol: 1e-6,
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            train_snr_db: [-10.0, 20.0],
            path: None,
        }
    }
}

/// A stored model to include in an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub path: PathBuf,
    /// Evaluate only at this SNR.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Built-in baselines: `buss_genie`, `buss_scov`, `bls`.
    pub estimators: Vec<String>,
    /// Training channels used for the global sample covariance (a prefix of
    /// the training set).
    pub scov_samples: usize,
    pub models: Vec<ModelEntry>,
    /// Record wall time per cell (makes the CSV non-reproducible).
    pub timing: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            estimators: vec!["buss_genie".into(), "buss_scov".into(), "bls".into()],
            scov_samples: 10_000,
            models: Vec::new(),
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverSection {
    pub bits: Vec<u32>,
    pub samples: Vec<usize>,
    pub trials: usize,
}

impl Default for RecoverSection {
    fn default() -> Self {
        Self { bits: vec![2, 3], samples: vec![1_000, 10_000, 100_000], trials: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub frontend: FrontendSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub recover: RecoverSection,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            out: default_out(),
            scenario: ScenarioSection::default(),
            frontend: FrontendSection::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            eval: EvalSection::default(),
            recover: RecoverSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != CONFIG_VERSION {
            return Err(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.scenario.antennas == 0 || self.scenario.clusters == 0 || !(self.scenario.angle_spread_deg > 0.0) {
            return Err("scenario needs antennas >= 1, clusters >= 1 and a positive angle spread".into());
        }
        if self.frontend.pilots == 0 || self.frontend.snr_db.is_empty() {
            return Err("frontend needs pilots >= 1 and a nonempty SNR grid".into());
        }
        if self.data.train_samples == 0 || self.data.test_samples == 0 {
            return Err("sample counts must be positive".into());
        }
        self.structure()?;
        for name in &self.eval.estimators {
            if !["buss_genie", "buss_scov", "bls"].contains(&name.as_str()) {
                return Err(format!("unknown estimator \"{name}\" (expected buss_genie, buss_scov or bls)"));
            }
        }
        Ok(())
    }

    pub fn structure(&self) -> Result<CovStructure, String> {
        self.model.structure.parse().map_err(|e: qcest::Error| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
