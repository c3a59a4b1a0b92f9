use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use qcest::channels::{build_dataset_h_seeded, draw_cluster_params, genie_covariance, observe_dataset, sample_channels};
use qcest::eval::{run_sweep, write_csv};
use qcest::frontend::{make_pilots, make_quantizer, make_quantizer_for, snr_db_to_sigma2};
use qcest::io::{load_model, read_dataset, read_dataset_header, save_model, write_channels, write_observations, DatasetFile, ModelFile};
use qcest::linalg::sample_covariance;
use qcest::mixtures::{fit_gmm, fit_mfa};
use qcest::quantized_learning::{fit_gmm_quantized, recover_covariance, recover_variances, recovery_nmse};
use qcest::rng::{child_seed, stream};
use qcest::vae::{train_dnn_baseline, train_vae, TrainConfig, TrainingData};
use qcest::{CMatrix, EmOptions, Estimator, NamedEstimator, ObservationDataset, ScenarioConfig, SweepConfig, TestSet, VaeModel};

use crate::config::{ModelKind, RunConfig};
use crate::{CliError, Context};

/// Independent seeds for the parts of a run.
#[derive(Clone, Copy)]
enum Part {
    TrainChannels = 0,
    TestChannels = 1,
    ObservationNoise = 2,
    Training = 3,
    Sweep = 4,
    Recovery = 5,
}

fn seed_for(cfg: &RunConfig, part: Part) -> u64 {
    child_seed(&mut stream(cfg.seed, part as u64))
}

fn scenario(cfg: &RunConfig) -> ScenarioConfig {
    ScenarioConfig {
        antennas: cfg.scenario.antennas,
        clusters: cfg.scenario.clusters,
        angle_spread: cfg.scenario.angle_spread_deg.to_radians(),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Core(format!("creating {}", cfg.out.display()), e.into()))?;
    Ok(&cfg.out)
}

fn training_channels(cfg: &RunConfig, count: usize) -> Result<CMatrix, CliError> {
    match &cfg.data.train_path {
        Some(path) => match read_dataset(path).context(|| format!("reading {}", path.display()))?.1 {
            DatasetFile::Channels(h) => {
                if h.nrows() != cfg.scenario.antennas {
                    return Err(CliError::Config(format!(
                        "{} holds {} antennas, the scenario has {}",
                        path.display(),
                        h.nrows(),
                        cfg.scenario.antennas
                    )));
                }
                Ok(h.columns(0, count.min(h.ncols())).into_owned())
            }
            DatasetFile::Observations(_) => {
                Err(CliError::Config(format!("{} holds observations, not channels", path.display())))
            }
        },
        None => Ok(build_dataset_h_seeded(&scenario(cfg), count, seed_for(cfg, Part::TrainChannels))
            .context(|| "generating training channels".into())?
            .samples),
    }
}

/// Quantized pilot observations of the training channels at the configured
/// observation SNR.
fn training_observations(cfg: &RunConfig, h: &CMatrix) -> Result<ObservationDataset, CliError> {
    let sigma2 = snr_db_to_sigma2(cfg.data.observation_snr_db);
    let pilots = make_pilots(cfg.frontend.pilots).context(|| "pilots".into())?;
    let q = make_quantizer_for(cfg.frontend.bits.0, sigma2).context(|| "quantizer".into())?;
    Ok(observe_dataset(h, &pilots, sigma2, &q, seed_for(cfg, Part::ObservationNoise)))
}

pub fn generate(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let train = training_channels(cfg, cfg.data.train_samples)?;
    let test = build_dataset_h_seeded(&scenario(cfg), cfg.data.test_samples, seed_for(cfg, Part::TestChannels))
        .context(|| "generating test channels".into())?;
    let obs = training_observations(cfg, &train)?;
    for (name, result) in [
        ("h_train.qce", write_channels(&dir.join("h_train.qce"), &train)),
        ("h_test.qce", write_channels(&dir.join("h_test.qce"), &test.samples)),
        ("r_train.qce", write_observations(&dir.join("r_train.qce"), &obs)),
    ] {
        result.context(|| format!("writing {}", dir.join(name).display()))?;
        log::info!("wrote {}", dir.join(name).display());
    }
    Ok(())
}

fn train_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.model.learning_rate,
        batch_size: cfg.model.batch_size,
        epochs: cfg.model.epochs,
        snr_db_range: (cfg.model.train_snr_db[0], cfg.model.train_snr_db[1]),
        ..TrainConfig::default()
    }
}

fn default_model_path(cfg: &RunConfig, kind: ModelKind) -> PathBuf {
    let ext = match kind {
        ModelKind::Gmm | ModelKind::Mfa | ModelKind::GmmQuantized => "qcm",
        ModelKind::Vae | ModelKind::VaeQuantized | ModelKind::Dnn => "qcv",
    };
    cfg.out.join(format!("model.{ext}"))
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    out_dir(cfg)?;
    let h = training_channels(cfg, cfg.data.train_samples)?;
    let mut rng = stream(seed_for(cfg, Part::Training), 0);
    let opts = EmOptions { max_iter: cfg.model.max_iter, tol: cfg.model.tol };
    let m = &cfg.model;
    let bits = cfg.frontend.bits.0;
    let pilots = make_pilots(cfg.frontend.pilots).context(|| "pilots".into())?;
    let ctx = || format!("training {:?}", m.kind);
    let model = match m.kind {
        ModelKind::Gmm => {
            let structure = cfg.structure().map_err(CliError::Config)?;
            let (model, report) = fit_gmm(&h, m.components, structure, opts, &mut rng).context(ctx)?;
            log::info!("EM ran {} iterations, final log-likelihood {:.4}", report.iterations(), report.log_likelihood.last().unwrap_or(&f64::NAN));
            ModelFile::Gmm(model)
        }
        ModelKind::Mfa => {
            let (model, report) = fit_mfa(&h, m.components, m.latent_dim, opts, &mut rng).context(ctx)?;
            log::info!("EM ran {} iterations, final log-likelihood {:.4}", report.iterations(), report.log_likelihood.last().unwrap_or(&f64::NAN));
            ModelFile::Mfa(model)
        }
        ModelKind::GmmQuantized => {
            let obs = training_observations(cfg, &h)?;
            let (model, report) =
                fit_gmm_quantized(&obs.samples, m.components, obs.sigma2, &obs.quantizer, opts, &mut rng).context(ctx)?;
            log::info!(
                "EM ran {} iterations; {} PSD repairs, {} of {} variance solves unconverged",
                report.em.iterations(),
                report.psd_repairs,
                report.unconverged_solves,
                report.variance_solves
            );
            ModelFile::Gmm(model)
        }
        ModelKind::Vae | ModelKind::VaeQuantized => {
            let mut model = VaeModel::init(h.nrows(), m.latent_dim, pilots.len(), &mut rng).context(ctx)?;
            let tc = train_config(cfg);
            let report = if m.kind == ModelKind::Vae {
                train_vae(&mut model, TrainingData::Channels { h: &h, pilots: &pilots, bits }, &tc, &mut rng).context(ctx)?
            } else {
                let obs = training_observations(cfg, &h)?;
                let sigma2 = vec![obs.sigma2; obs.len()];
                train_vae(&mut model, TrainingData::Quantized { r: &obs.samples, sigma2: &sigma2, bits }, &tc, &mut rng)
                    .context(ctx)?
            };
            log::info!("best validation loss {:.4} at epoch {}", report.history[report.best_epoch].val_loss, report.best_epoch);
            ModelFile::Vae(model)
        }
        ModelKind::Dnn => {
            let (net, report) = train_dnn_baseline(&h, &pilots, bits, &train_config(cfg), &mut rng).context(ctx)?;
            log::info!("best validation loss {:.4} at epoch {}", report.history[report.best_epoch].val_loss, report.best_epoch);
            ModelFile::Dnn(net)
        }
    };
    let path = m.path.clone().unwrap_or_else(|| default_model_path(cfg, m.kind));
    save_model(&path, &model).context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {} model to {}", model.kind(), path.display());
    Ok(())
}

pub fn recover(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let n = cfg.scenario.antennas;
    let base = seed_for(cfg, Part::Recovery);
    let path = dir.join("recovery.csv");
    let file = File::create(&path).map_err(|e| CliError::Core(format!("writing {}", path.display()), e.into()))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| CliError::Core(format!("writing {}", path.display()), e.into());
    w.write_record(["bits", "samples", "trial", "nmse", "max_gn_iterations", "unconverged"]).map_err(csv_err)?;
    for &bits in &cfg.recover.bits {
        let q = make_quantizer(bits, 0.0).context(|| "quantizer".into())?;
        for &t in &cfg.recover.samples {
            let mut errors = Vec::with_capacity(cfg.recover.trials);
            for trial in 0..cfg.recover.trials {
                let mut rng = stream(base, trial as u64);
                let params = draw_cluster_params(&mut rng, cfg.scenario.clusters, cfg.scenario.angle_spread_deg.to_radians())
                    .context(|| "cluster parameters".into())?;
                let c = genie_covariance(&params, n).context(|| "covariance".into())?.matrix().clone();
                let mut sample_rng = stream(base ^ t as u64, trial as u64 + 1);
                let r = sample_channels(&c, t, &mut sample_rng).context(|| "sampling".into())?.map(|z| q.quantize_scalar(z));
                let fits = recover_variances(&r, None, &q, false).context(|| "variance recovery".into())?;
                let err = recovery_nmse(&c, &recover_covariance(&r, None, &q, false).context(|| "covariance recovery".into())?);
                let max_it = fits.iter().map(|f| f.iterations).max().unwrap_or(0);
                let unconverged = fits.iter().filter(|f| !f.converged).count();
                w.write_record([bits.to_string(), t.to_string(), trial.to_string(), err.to_string(), max_it.to_string(), unconverged.to_string()])
                    .map_err(csv_err)?;
                errors.push(err);
            }
            errors.sort_by(f64::total_cmp);
            log::info!("B = {bits}, T = {t}: median recovery NMSE {:.3e}", errors[errors.len() / 2]);
        }
    }
    w.flush().map_err(|e| CliError::Core(format!("writing {}", path.display()), e.into()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_estimator(path: &Path) -> Result<Estimator, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("model file {} does not exist", path.display())));
    }
    Ok(match load_model(path).context(|| format!("reading model {}", path.display()))? {
        ModelFile::Gmm(m) => Estimator::Gmm(m),
        ModelFile::Mfa(m) => Estimator::Mfa(m),
        ModelFile::Vae(m) => Estimator::Vae(m),
        ModelFile::Dnn(m) => Estimator::Dnn(m),
    })
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    // Load models first so that a bad path fails before any simulation.
    let mut estimators = Vec::new();
    for entry in &cfg.eval.models {
        let mut e = NamedEstimator::new(entry.name.clone(), load_estimator(&entry.path)?);
        e.snr_db = entry.snr_db;
        estimators.push(e);
    }
    let builtins = cfg.eval.estimators.iter().map(|name| {
        let est = match name.as_str() {
            "buss_genie" => Estimator::BussGenie,
            "buss_scov" => Estimator::BussScov,
            _ => Estimator::Bls,
        };
        NamedEstimator::new(name.clone(), est)
    });
    estimators.splice(0..0, builtins);
    if estimators.is_empty() {
        return Err(CliError::Config("no estimators configured".into()));
    }
    let dir = out_dir(cfg)?;

    let sc = scenario(cfg);
    let test = build_dataset_h_seeded(&sc, cfg.data.test_samples, seed_for(cfg, Part::TestChannels))
        .context(|| "generating test channels".into())?;
    let genie = if estimators.iter().any(|e| matches!(e.estimator, Estimator::BussGenie)) {
        Some(
            (0..test.len())
                .map(|t| Ok(test.genie_covariance(t)?.matrix().clone()))
                .collect::<qcest::Result<Vec<_>>>()
                .context(|| "genie covariances".into())?,
        )
    } else {
        None
    };
    let scov = sample_covariance(&training_channels(cfg, cfg.eval.scov_samples)?);
    let set = TestSet { channels: test.samples, genie_covariances: genie, sample_covariance: scov };
    let sweep = SweepConfig {
        scenario: sc.id(),
        snr_db: cfg.frontend.snr_db.clone(),
        bits: cfg.frontend.bits.0,
        pilots: cfg.frontend.pilots,
        seed: seed_for(cfg, Part::Sweep),
        timing: cfg.eval.timing,
    };
    let records = run_sweep(&sweep, &set, &estimators).context(|| "evaluation sweep".into())?;
    let path = dir.join("results.csv");
    let file = File::create(&path).map_err(|e| CliError::Core(format!("writing {}", path.display()), e.into()))?;
    write_csv(&records, BufWriter::new(file)).context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {} rows to {}", records.len(), path.display());
    Ok(())
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let mut magic = [0u8; 8];
    {
        use std::io::Read;
        let mut f = File::open(path).map_err(|e| CliError::Core(format!("opening {}", path.display()), e.into()))?;
        f.read_exact(&mut magic)
            .map_err(|_| CliError::Core(format!("reading {}", path.display()), qcest::Error::Format("file is too short".into())))?;
    }
    if &magic == b"QCEDATA1" {
        let h = read_dataset_header(path).context(|| format!("reading {}", path.display()))?;
        let (_, data) = read_dataset(path).context(|| format!("reading {}", path.display()))?;
        println!("format: QCE1 dataset (version {})", h.version);
        println!("antennas: {}\npilots: {}\nsamples: {}", h.antennas, h.pilots, h.len);
        match data {
            DatasetFile::Channels(_) => println!("content: channels"),
            DatasetFile::Observations(obs) => {
                println!("content: quantized observations");
                match obs.quantizer.bits() {
                    Some(b) => println!("bits: {b}\nstep: {}", obs.quantizer.delta()),
                    None => println!("bits: inf"),
                }
                println!("noise variance: {}", obs.sigma2);
            }
        }
        return Ok(());
    }
    let model = load_model(path).context(|| format!("reading {}", path.display()))?;
    println!("kind: {}", model.kind());
    match &model {
        ModelFile::Gmm(m) => println!("components: {}\nantennas: {}", m.num_components(), m.antennas()),
        ModelFile::Mfa(m) => println!("components: {}\nantennas: {}\nlatent dim: {}", m.num_components(), m.antennas(), m.latent_dim()),
        ModelFile::Vae(m) => println!(
            "antennas: {}\nlatent dim: {}\npilots: {}\nparameters: {}",
            m.antennas(),
            m.latent_dim(),
            m.pilots(),
            m.num_params()
        ),
        ModelFile::Dnn(net) => println!("layers: {:?}\nparameters: {}", net.widths(), net.num_params()),
    }
    Ok(())
}
