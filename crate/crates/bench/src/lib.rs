//! Shared fixtures for the benchmarks.

use qcest::channels::{build_dataset_h_seeded, observe_dataset, ScenarioConfig};
use qcest::frontend::{make_pilots, make_quantizer, snr_db_to_sigma2};
use qcest::{CMatrix, ObservationDataset};

/// One-cluster channels (`N x T`).
pub fn channels(antennas: usize, count: usize, seed: u64) -> CMatrix {
    build_dataset_h_seeded(&ScenarioConfig::new(antennas, 1), count, seed).expect("valid scenario").samples
}

/// Single-pilot quantized observations of `h` at `snr_db`.
pub fn observations(h: &CMatrix, bits: u32, snr_db: f64, seed: u64) -> ObservationDataset {
    let sigma2 = snr_db_to_sigma2(snr_db);
    let q = make_quantizer(bits, sigma2).expect("valid bit depth");
    observe_dataset(h, &make_pilots(1).expect("one pilot"), sigma2, &q, seed)
}
