//! Dense symmetric positive-definite factorization with jitter escalation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// First relative jitter tried after a plain factorization fails.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Lower Cholesky factor of `A + jitter·I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: DMatrix<f64>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
}

impl SpdFactor {
    /// Factors `a`, escalating a diagonal jitter `c·mean(diag a)` with
    /// `c = 1e-10, 1e-9, …, 1e-4` when the plain factorization fails.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Ok(Self {
                l: DMatrix::zeros(0, 0),
                jitter: 0.0,
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Factorization("matrix has non-finite entries".into()));
        }
        if let Some(ch) = a.clone().cholesky() {
            return Ok(Self { l: ch.unpack(), jitter: 0.0 });
        }
        let mean_diag = a.diagonal().iter().sum::<f64>() / n as f64;
        let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * scale;
            let mut aj = a.clone();
            for i in 0..n {
                aj[(i, i)] += jitter;
            }
            if let Some(ch) = aj.cholesky() {
                return Ok(Self { l: ch.unpack(), jitter });
            }
            rel *= 10.0;
        }
        let min_diag = a.diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
        Err(Error::Factorization(format!(
            "not positive definite after jitter {:.1e}·mean(diag) (n = {n}, mean diag = {mean_diag:.3e}, min diag = {min_diag:.3e})",
            JITTER_MAX
        )))
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `log |A + jitter·I|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `L y = b` in place.
    pub fn forward_solve(&self, b: &mut [f64]) {
        let n = self.dim();
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_solve(&self, y: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[(k, i)] * y[k];
            }
            y[i] = s / self.l[(i, i)];
        }
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_solve(&mut x);
        self.backward_solve(&mut x);
        x
    }

    /// Dense inverse `A⁻¹`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        // L⁻¹ column by column, then A⁻¹ = L⁻ᵀ L⁻¹.
        let mut linv = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            linv[(j, j)] = 1.0 / self.l[(j, j)];
            for i in j + 1..n {
                let mut s = 0.0;
                for k in j..i {
                    s -= self.l[(i, k)] * linv[(k, j)];
                }
                linv[(i, j)] = s / self.l[(i, i)];
            }
        }
        linv.tr_mul(&linv)
    }

    /// Reconstructs `L Lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.solve(b.as_slice()))
    }

    /// Factor of `[[A, c], [cᵀ, d]]` from the factor of `A` in `O(n²)`.
    /// The jitter already applied to `A` is added to `d` as well; if the
    /// new pivot is not safely positive the whole matrix is refactored.
    pub fn extended(&self, c: &[f64], d: f64) -> Result<Self> {
        let n = self.dim();
        if c.len() != n {
            return Err(Error::invalid("extension column has wrong length"));
        }
        let mut l_row = c.to_vec();
        self.forward_solve(&mut l_row);
        let dj = d + self.jitter;
        let pivot = dj - l_row.iter().map(|v| v * v).sum::<f64>();
        if pivot > 1e-12 * dj.abs().max(f64::MIN_POSITIVE) && pivot.is_finite() {
            let mut l = self.l.clone().resize(n + 1, n + 1, 0.0);
            for (j, v) in l_row.iter().enumerate() {
                l[(n, j)] = *v;
            }
            l[(n, n)] = pivot.sqrt();
            return Ok(Self { l, jitter: self.jitter });
        }
        let mut full = self.reconstruct().resize(n + 1, n + 1, 0.0);
        for i in 0..n {
            full[(i, i)] -= self.jitter;
            full[(n, i)] = c[i];
            full[(i, n)] = c[i];
        }
        full[(n, n)] = d;
        Self::new(full)
    }
}
