//! k-means++ seeding of mixture components.
//!
//! Channels are compared after removing the common phase and the norm:
//! `f = h conj(h_0) / (|h_0| ||h||)`, so two realizations of the same
//! covariance that differ by a global phase or gain land close together.

use rand::Rng;

use crate::linalg::{CMatrix, C64};

const LLOYD_ITERATIONS: usize = 20;

fn features(data: &CMatrix) -> Vec<Vec<C64>> {
    data.column_iter()
        .map(|col| {
            let norm = col.norm();
            let first = col[0];
            let phase = if first.norm() > 0.0 { first.conj() / first.norm() } else { C64::new(1.0, 0.0) };
            let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
            col.iter().map(|&v| v * phase * scale).collect()
        })
        .collect()
}

fn distance(a: &[C64], b: &[C64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum()
}

/// Cluster label of every column of `data` (`k` clusters).
pub(crate) fn kmeans_labels<R: Rng + ?Sized>(data: &CMatrix, k: usize, rng: &mut R) -> Vec<usize> {
    let feats = features(data);
    let t = feats.len();
    if k <= 1 || t == 0 {
        return vec![0; t];
    }
    let mut centers: Vec<Vec<C64>> = vec![feats[rng.random_range(0..t)].clone()];
    let mut nearest: Vec<f64> = feats.iter().map(|f| distance(f, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = t - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..t)
        };
        centers.push(feats[pick].clone());
        let c = centers.last().expect("just pushed");
        for (d, f) in nearest.iter_mut().zip(&feats) {
            *d = d.min(distance(f, c));
        }
    }

    let dim = feats[0].len();
    let mut labels = vec![0usize; t];
    for _ in 0..LLOYD_ITERATIONS {
        let mut changed = false;
        for (label, f) in labels.iter_mut().zip(&feats) {
            let best = centers
                .iter()
                .enumerate()
                .map(|(j, c)| (j, distance(f, c)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| j)
                .unwrap_or(0);
            if best != *label {
                *label = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![C64::new(0.0, 0.0); dim]; k];
        let mut counts = vec![0usize; k];
        for (&label, f) in labels.iter().zip(&feats) {
            counts[label] += 1;
            for (s, v) in sums[label].iter_mut().zip(f) {
                *s += v;
            }
        }
        for (j, center) in centers.iter_mut().enumerate() {
            if counts[j] > 0 {
                *center = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn separates_two_directions() {
        let mut data = CMatrix::zeros(2, 40);
        for t in 0..40 {
            let g = C64::from_polar(1.0 + t as f64 * 0.01, t as f64);
            if t % 2 == 0 {
                data[(0, t)] = g;
                data[(1, t)] = g * 0.05;
            } else {
                data[(0, t)] = g * 0.05;
                data[(1, t)] = g;
            }
        }
        let labels = kmeans_labels(&data, 2, &mut stream(3, 0));
        for t in 2..40 {
            assert_eq!(labels[t], labels[t % 2]);
        }
        assert_ne!(labels[0], labels[1]);
    }
}
