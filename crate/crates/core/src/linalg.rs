//! Dense complex linear algebra helpers.
//!
//! Matrices are `nalgebra` column-major storage. Large products go through
//! `ndarray`'s complex GEMM on zero-copy views of that storage; eigen and
//! Cholesky factorizations come from `nalgebra`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};
use num_complex::Complex64;

use crate::error::{numerical, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

fn view(m: &CMatrix) -> ArrayView2<'_, C64> {
    ArrayView2::from_shape((m.nrows(), m.ncols()).f(), m.as_slice()).expect("column-major view")
}

fn gemm_views(a: ArrayView2<'_, C64>, b: ArrayView2<'_, C64>) -> CMatrix {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    let (m, n) = (a.nrows(), b.ncols());
    let mut out = CMatrix::zeros(m, n);
    if a.ncols() == 0 {
        return out;
    }
    {
        let mut ov = ArrayViewMut2::from_shape((m, n).f(), out.as_mut_slice()).expect("view");
        general_mat_mul(ONE, &a, &b, ZERO, &mut ov);
    }
    out
}

/// `a * b` through the blocked complex GEMM kernel.
pub fn matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    gemm_views(view(a), view(b))
}

/// `a * b^H`, evaluated as `conj(conj(a) b^T)` so that only an elementwise
/// copy is made, never a transposed one.
pub fn matmul_adj(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let ac = a.map(|z| z.conj());
    gemm_views(view(&ac), view(b).t()).map(|z| z.conj())
}

/// `a^H * b`, evaluated as `conj(a^T conj(b))`.
pub fn adj_matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let bc = b.map(|z| z.conj());
    gemm_views(view(a).t(), view(&bc)).map(|z| z.conj())
}

/// `(m + m^H) / 2`.
pub fn hermitize(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

pub fn trace_real(m: &CMatrix) -> f64 {
    m.diagonal().iter().map(|z| z.re).sum()
}

pub fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `||a - b||_F / ||b||_F`.
pub fn relative_frobenius(a: &CMatrix, b: &CMatrix) -> f64 {
    frobenius(&(a - b)) / frobenius(b)
}

pub fn is_hermitian(m: &CMatrix, rel_tol: f64) -> bool {
    m.is_square() && frobenius(&(m - m.adjoint())) <= rel_tol * frobenius(m).max(f64::MIN_POSITIVE)
}

/// Eigendecomposition of a Hermitian matrix with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: DVector<f64>,
    pub vectors: CMatrix,
}

impl HermitianEigen {
    pub fn new(m: &CMatrix) -> Self {
        let eig = hermitize(m).symmetric_eigen();
        let n = eig.eigenvalues.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = CMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        Self { values, vectors }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `V diag(f(lambda)) V^H`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> CMatrix {
        let mut scaled = self.vectors.clone();
        for (j, &lam) in self.values.iter().enumerate() {
            let s = f(lam);
            scaled.column_mut(j).scale_mut(s);
        }
        hermitize(&matmul_adj(&scaled, &self.vectors))
    }
}

/// Projects onto the PSD cone by clamping negative eigenvalues to zero.
/// Returns the projection and the smallest eigenvalue before clamping.
pub fn psd_project(m: &CMatrix) -> (CMatrix, f64) {
    let eig = HermitianEigen::new(m);
    let min = eig.min();
    if min >= 0.0 {
        return (hermitize(m), min);
    }
    (eig.reconstruct_with(|l| l.max(0.0)), min)
}

/// Condition number above which a Hermitian system gets diagonal jitter.
pub const MAX_CONDITION: f64 = 1e12;

/// Solver for Hermitian positive definite systems.
///
/// If the matrix is indefinite or its condition number exceeds
/// [`MAX_CONDITION`], `1e-10 * trace / n` is added to the diagonal once; if
/// that does not fix it the construction fails.
#[derive(Debug, Clone)]
pub struct HermitianSolver {
    eig: HermitianEigen,
    jittered: bool,
}

impl HermitianSolver {
    pub fn new(m: &CMatrix) -> Result<Self> {
        let n = m.nrows();
        let eig = HermitianEigen::new(m);
        if Self::well_posed(&eig) {
            return Ok(Self { eig, jittered: false });
        }
        let jitter = 1e-10 * trace_real(m).abs() / n.max(1) as f64;
        let mut loaded = m.clone();
        for i in 0..n {
            loaded[(i, i)] += jitter;
        }
        let eig = HermitianEigen::new(&loaded);
        if Self::well_posed(&eig) {
            return Ok(Self { eig, jittered: true });
        }
        Err(numerical(format!(
            "Hermitian system singular after jitter (eigenvalues in [{:e}, {:e}])",
            eig.min(),
            eig.max()
        )))
    }

    fn well_posed(eig: &HermitianEigen) -> bool {
        let (lo, hi) = (eig.min(), eig.max());
        lo > 0.0 && lo.is_finite() && hi / lo <= MAX_CONDITION
    }

    pub fn jittered(&self) -> bool {
        self.jittered
    }

    /// Solves `M X = B`.
    pub fn solve(&self, b: &CMatrix) -> CMatrix {
        let v = &self.eig.vectors;
        let mut tmp = adj_matmul(v, b);
        for (i, &lam) in self.eig.values.iter().enumerate() {
            tmp.row_mut(i).scale_mut(1.0 / lam);
        }
        matmul(v, &tmp)
    }

    pub fn inverse(&self) -> CMatrix {
        self.eig.reconstruct_with(|l| 1.0 / l)
    }

    pub fn log_det(&self) -> f64 {
        self.eig.values.iter().map(|l| l.ln()).sum()
    }
}

/// Whitening transform for a Hermitian positive definite matrix `C = L L^H`:
/// returns `(L^{-1}, ln det C)`. One diagonal-loading retry on failure.
pub fn cholesky_whitener(m: &CMatrix) -> Result<(CMatrix, f64)> {
    let n = m.nrows();
    let attempt = |mat: CMatrix| {
        mat.cholesky().map(|ch| {
            let l = ch.l();
            let log_det = 2.0 * l.diagonal().iter().map(|z| z.re.ln()).sum::<f64>();
            let inv = l
                .solve_lower_triangular(&CMatrix::identity(n, n))
                .expect("triangular factor with positive diagonal");
            (inv, log_det)
        })
    };
    if let Some(out) = attempt(hermitize(m)) {
        return Ok(out);
    }
    let jitter = 1e-10 * trace_real(m).abs().max(f64::MIN_POSITIVE) / n as f64;
    let mut loaded = hermitize(m);
    for i in 0..n {
        loaded[(i, i)] += jitter;
    }
    attempt(loaded).ok_or_else(|| numerical("covariance is not positive definite"))
}

/// Hermitian Toeplitz matrix from its first column.
pub fn toeplitz_hermitian(first_col: &[C64]) -> CMatrix {
    let n = first_col.len();
    CMatrix::from_fn(n, n, |i, j| {
        if i >= j {
            first_col[i - j]
        } else {
            first_col[j - i].conj()
        }
    })
}

/// Unitary DFT matrix, `F[k, m] = exp(-j 2 pi k m / n) / sqrt(n)`.
pub fn dft_matrix(n: usize) -> CMatrix {
    let scale = 1.0 / (n as f64).sqrt();
    CMatrix::from_fn(n, n, |k, m| {
        let phase = -2.0 * PI * ((k * m) % n) as f64 / n as f64;
        C64::from_polar(scale, phase)
    })
}

/// Circulant matrix `F^H diag(spectrum) F`.
pub fn circulant_from_spectrum(spectrum: &[f64]) -> CMatrix {
    let n = spectrum.len();
    let col: Vec<C64> = (0..n)
        .map(|m| {
            spectrum
                .iter()
                .enumerate()
                .map(|(k, &c)| C64::from_polar(c, 2.0 * PI * ((k * m) % n) as f64 / n as f64))
                .sum::<C64>()
                / n as f64
        })
        .collect();
    CMatrix::from_fn(n, n, |i, j| col[(i + n - j) % n])
}

/// Sample covariance `(1/T) sum_t x_t x_t^H` of the columns of `samples`.
pub fn sample_covariance(samples: &CMatrix) -> CMatrix {
    let t = samples.ncols().max(1) as f64;
    hermitize(&matmul_adj(samples, samples)) / C64::new(t, 0.0)
}
