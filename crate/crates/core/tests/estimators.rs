//! Desk-scale benchmark oracles for the learned estimators, the rate bound
//! and the evaluation sweep.

use qcest::bussgang::estimate_buss_scov;
use qcest::channels::{build_dataset_h_seeded, observe_dataset, sample_channels, ScenarioConfig};
use qcest::eval::{nmse, rate_lower_bound, run_sweep, write_csv};
use qcest::frontend::{make_pilots, make_quantizer, snr_db_to_sigma2};
use qcest::linalg::{circulant_from_spectrum, dft_matrix, sample_covariance};
use qcest::mixtures::{estimate_bgmm, fit_gmm};
use qcest::rng::{complex_normal, stream};
use qcest::vae::{estimate_bvae, train_vae, TrainConfig, TrainingData};
use qcest::{CMatrix, CovStructure, EmOptions, Estimator, NamedEstimator, SweepConfig, TestSet, VaeModel, C64};

#[test]
fn circulant_fit_recovers_spectrum() {
    let spectrum = [3.0, 1.5, 0.5, 0.2, 0.1, 0.2, 0.5, 2.0];
    let cov = circulant_from_spectrum(&spectrum);
    let h = sample_channels(&cov, 20_000, &mut stream(1, 0)).unwrap();
    let (model, _) = fit_gmm(&h, 1, CovStructure::Circulant, EmOptions::default(), &mut stream(2, 0)).unwrap();
    let f = dft_matrix(8);
    let fitted = (&f * &model.covariances()[0] * f.adjoint()).diagonal().map(|z| z.re);
    let truth = nalgebra::DVector::from_row_slice(&spectrum);
    let err = (fitted - &truth).norm() / truth.norm();
    assert!(err < 0.05, "{err}");
}

#[test]
fn bgmm_beats_sample_covariance_estimator() {
    let scenario = ScenarioConfig::new(8, 1);
    let train = build_dataset_h_seeded(&scenario, 20_000, 3).unwrap();
    let test = build_dataset_h_seeded(&scenario, 10_000, 4).unwrap();
    let (model, _) = fit_gmm(&train.samples, 4, CovStructure::Full, EmOptions::default(), &mut stream(5, 0)).unwrap();
    let pilots = make_pilots(1).unwrap();
    let sigma2 = snr_db_to_sigma2(10.0);
    let q = make_quantizer(1, sigma2).unwrap();
    let obs = observe_dataset(&test.samples, &pilots, sigma2, &q, 6);
    let gmm = nmse(&test.samples, &estimate_bgmm(&model, &obs.samples, &pilots, sigma2, &q).unwrap()).unwrap();
    let scov = sample_covariance(&train.samples);
    let base = nmse(&test.samples, &estimate_buss_scov(&obs.samples, &scov, &pilots, sigma2, &q).unwrap()).unwrap();
    assert!(gmm < base, "BGMM {gmm}, Buss-Scov {base}");
}

#[test]
fn vae_learns_a_circulant_spectrum() {
    let spectrum = [2.0, 1.0, 0.3, 0.1, 0.1, 0.3, 1.0, 2.0];
    let cov = circulant_from_spectrum(&spectrum);
    let h = sample_channels(&cov, 5_000, &mut stream(7, 0)).unwrap();
    let pilots = make_pilots(1).unwrap();
    let mut rng = stream(8, 0);
    let mut model = VaeModel::init(8, 2, 1, &mut rng).unwrap();
    let cfg = TrainConfig { epochs: 40, batch_size: 128, snr_db_range: (30.0, 30.0), ..Default::default() };
    train_vae(&mut model, TrainingData::Channels { h: &h, pilots: &pilots, bits: None }, &cfg, &mut rng).unwrap();
    let val = sample_channels(&cov, 1_000, &mut stream(9, 0)).unwrap();
    let spectra = model.spectra(&val).unwrap();
    let mean = spectra.mean_axis(ndarray::Axis(0)).unwrap();
    let truth = ndarray::Array1::from(spectrum.to_vec());
    let err = (&mean - &truth).mapv(|x| x * x).sum().sqrt() / truth.mapv(|x| x * x).sum().sqrt();
    assert!(err < 0.2, "learned {mean}, relative error {err}");
}

#[test]
fn vae_beats_sample_covariance_estimator() {
    let scenario = ScenarioConfig::new(32, 1);
    let train = build_dataset_h_seeded(&scenario, 20_000, 10).unwrap();
    let test = build_dataset_h_seeded(&scenario, 5_000, 11).unwrap();
    let pilots = make_pilots(1).unwrap();
    let mut rng = stream(12, 0);
    let mut model = VaeModel::init(32, 8, 1, &mut rng).unwrap();
    let cfg = TrainConfig { epochs: 30, batch_size: 128, ..Default::default() };
    train_vae(&mut model, TrainingData::Channels { h: &train.samples, pilots: &pilots, bits: Some(1) }, &cfg, &mut rng).unwrap();
    let sigma2 = snr_db_to_sigma2(5.0);
    let q = make_quantizer(1, sigma2).unwrap();
    let obs = observe_dataset(&test.samples, &pilots, sigma2, &q, 13);
    let vae = nmse(&test.samples, &estimate_bvae(&model, &obs.samples, &pilots, sigma2, &q).unwrap()).unwrap();
    let scov = sample_covariance(&train.samples);
    let base = nmse(&test.samples, &estimate_buss_scov(&obs.samples, &scov, &pilots, sigma2, &q).unwrap()).unwrap();
    assert!(vae < base, "BVAE {vae}, Buss-Scov {base}");
}

#[test]
fn independent_estimates_carry_no_rate() {
    let n = 8;
    let t = 20_000;
    let mut rng = stream(14, 0);
    let h = CMatrix::from_fn(n, t, |_, _| complex_normal(&mut rng));
    let est = CMatrix::from_fn(n, t, |_, _| complex_normal(&mut rng));
    let sigma2 = 0.1;
    let q = make_quantizer(2, sigma2).unwrap();
    let c_h = CMatrix::identity(n, n);
    let bound = rate_lower_bound(&est, &h, sigma2, &q, &c_h).unwrap();
    // The numerator is the squared sample mean of g^H B h; compare it with
    // the squared 4-sigma envelope of that mean.
    let g = qcest::bussgang::bussgang_gain(&(c_h.clone() * C64::new(1.0 + sigma2, 0.0)), &q).unwrap()[0];
    let terms: Vec<C64> = (0..t)
        .map(|j| {
            let e = est.column(j);
            (e.adjoint() * h.column(j))[(0, 0)] * g / e.norm_squared()
        })
        .collect();
    let mean: C64 = terms.iter().sum::<C64>() / t as f64;
    let var = terms.iter().map(|z| (z - mean).norm_sqr()).sum::<f64>() / t as f64;
    assert!(mean.norm() < 4.0 * (var / t as f64).sqrt(), "{mean}");
    assert!(bound.rate < 1e-2, "{bound:?}");
}

fn sweep_fixture() -> (SweepConfig, TestSet) {
    let scenario = ScenarioConfig::new(8, 1);
    let train = build_dataset_h_seeded(&scenario, 2_000, 15).unwrap();
    let test = build_dataset_h_seeded(&scenario, 500, 16).unwrap();
    let genie = (0..test.len()).map(|t| test.genie_covariance(t).unwrap().matrix().clone()).collect();
    let cfg = SweepConfig { scenario: scenario.id(), snr_db: vec![-5.0, 5.0, 15.0], bits: Some(1), pilots: 1, seed: 17, timing: false };
    let set = TestSet { channels: test.samples, genie_covariances: Some(genie), sample_covariance: sample_covariance(&train.samples) };
    (cfg, set)
}

#[test]
fn sweep_is_reproducible_and_orders_genie_first() {
    let (cfg, test) = sweep_fixture();
    let estimators = vec![
        NamedEstimator::new("buss_genie", Estimator::BussGenie),
        NamedEstimator::new("buss_scov", Estimator::BussScov),
        NamedEstimator::new("bls", Estimator::Bls),
    ];
    let a = run_sweep(&cfg, &test, &estimators).unwrap();
    let b = run_sweep(&cfg, &test, &estimators).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 9);
    for snr in &cfg.snr_db {
        let at = |name: &str| a.iter().find(|r| r.estimator == name && r.snr_db == *snr).unwrap().nmse;
        assert!(at("buss_genie") <= at("buss_scov"), "SNR {snr}");
    }
    let mut csv_a = Vec::new();
    let mut csv_b = Vec::new();
    write_csv(&a, &mut csv_a).unwrap();
    write_csv(&b, &mut csv_b).unwrap();
    assert_eq!(csv_a, csv_b);
}

#[test]
fn nmse_is_invariant_to_test_order() {
    let (_, test) = sweep_fixture();
    let mut rng = stream(18, 0);
    let est = test.channels.map(|z| z * 0.7) + CMatrix::from_fn(8, test.channels.ncols(), |_, _| complex_normal(&mut rng) * 0.1);
    let t = test.channels.ncols();
    let perm: Vec<usize> = (0..t).rev().collect();
    let a = nmse(&test.channels, &est).unwrap();
    let b = nmse(&test.channels.select_columns(&perm), &est.select_columns(&perm)).unwrap();
    assert!((a - b).abs() <= 1e-12 * a);
}
