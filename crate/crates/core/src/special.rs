//! Scalar special functions used by the quantizer statistics.

use std::f64::consts::{PI, SQRT_2};

/// Standard normal cumulative distribution function.
///
/// Evaluated through `erfc`, so the lower tail keeps full relative accuracy.
pub fn normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Inverse error function on `(-1, 1)`, polished by Newton steps on `erf`.
pub fn erf_inv(p: f64) -> f64 {
    if p <= -1.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = statrs::function::erf::erf_inv(p);
    for _ in 0..3 {
        let slope = 2.0 / PI.sqrt() * (-x * x).exp();
        if slope <= f64::MIN_POSITIVE {
            break;
        }
        let step = (erf(x) - p) / slope;
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12, "{}", normal_cdf(1.0) - 0.841_344_746_068_542_9);
        assert!((normal_cdf(-3.0) - 0.001_349_898_031_630_094_6).abs() < 1e-12);
        assert!((normal_cdf(-8.0) - 6.220_960_574_271_785e-16).abs() < 1e-25);
    }

    #[test]
    fn erf_inv_round_trip() {
        for &p in &[-0.999, -0.5, 0.0, 0.1, 0.6827, 0.99, 0.999_999] {
            let x = erf_inv(p);
            assert!((erf(x) - p).abs() < 1e-14, "p={p}");
        }
    }
}
