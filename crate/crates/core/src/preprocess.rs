//! Fixed, non-learnable CSI preprocessing: the spatial autocorrelation
//! matrix of a measurement, packed into a single real matrix that feeds the
//! convolutional encoder.
//!
//! The autocorrelation `C = H H†` cancels any per-subcarrier common phase
//! (timing or carrier frequency offsets) and any global scaling, which is
//! exactly why it is computed before the learnable layers. Since `C` is
//! Hermitian it is fully described by one real matrix: the strict upper
//! triangle carries real parts, the strict lower triangle carries imaginary
//! parts, and the diagonal carries the (real) diagonal of `C`. The packed
//! matrix is scaled by `1/‖C‖_F` so every entry lands in `[-1, 1]`.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_complex::Complex64;

use crate::csi::CsiMatrix;
use crate::flt;

/// Relative tolerance for the Hermitian check in [`pack`].
const HERMITIAN_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum PreprocessError {
    /// Input CSI contains NaN or infinite entries.
    NonFinite,
    /// `pack` was handed a matrix that is not Hermitian within tolerance.
    NotHermitian { max_asymmetry: f64 },
    /// All-zero CSI cannot be normalized.
    ZeroMatrix,
}

impl fmt::Display for PreprocessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonFinite => write!(f, "CSI matrix has non-finite entries"),
            Self::NotHermitian { max_asymmetry } => {
                write!(f, "matrix is not Hermitian (max relative asymmetry {max_asymmetry:.3e})")
            }
            Self::ZeroMatrix => write!(f, "all-zero CSI matrix cannot be packed"),
        }
    }
}

impl core::error::Error for PreprocessError {}

/// Real-packed, Frobenius-normalized autocorrelation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedInput {
    side: usize,
    matrix: Vec<f64>,
    norm_factor: f64,
}

impl PreprocessedInput {
    /// Direct constructor for crate-internal tests; regular code goes
    /// through [`pack`].
    #[cfg(test)]
    pub(crate) fn from_raw(side: usize, matrix: Vec<f64>, norm_factor: f64) -> Self {
        assert_eq!(matrix.len(), side * side);
        Self { side, matrix, norm_factor }
    }

    /// Side length of the square packed matrix (the antenna count).
    pub fn side(&self) -> usize {
        self.side
    }

    /// Row-major packed entries, all in `[-1, 1]`.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.side + c]
    }

    /// The Frobenius norm of `C` that was divided out.
    pub fn norm_factor(&self) -> f64 {
        self.norm_factor
    }

    /// Rebuilds `C` (times `norm_factor`) from the packed layout using
    /// Hermitian symmetry. Inverse of [`pack`] up to the normalization.
    pub fn reconstruct(&self) -> CsiMatrix {
        let b = self.side;
        CsiMatrix::from_fn(b, b, |i, j| {
            let v = if i == j {
                Complex64::new(self.get(i, i), 0.0)
            } else if i < j {
                Complex64::new(self.get(i, j), -self.get(j, i))
            } else {
                Complex64::new(self.get(j, i), self.get(i, j))
            };
            v * self.norm_factor
        })
    }
}

/// Spatial autocorrelation `C = H H†` (antennas × antennas, Hermitian PSD).
pub fn autocorrelate(h: &CsiMatrix) -> Result<CsiMatrix, PreprocessError> {
    if !h.is_finite() {
        return Err(PreprocessError::NonFinite);
    }
    let b = h.rows();
    let mut c = CsiMatrix::zeros(b, b);
    for i in 0..b {
        let row_i = h.row(i);
        for j in i..b {
            let row_j = h.row(j);
            let mut acc = Complex64::new(0.0, 0.0);
            for (a, bb) in row_i.iter().zip(row_j) {
                acc += a * bb.conj();
            }
            c.set(i, j, acc);
            if i != j {
                c.set(j, i, acc.conj());
            }
        }
    }
    Ok(c)
}

/// Packs a Hermitian matrix into the real layout described in the module
/// docs, normalized by its Frobenius norm.
pub fn pack(c: &CsiMatrix) -> Result<PreprocessedInput, PreprocessError> {
    assert_eq!(c.rows(), c.cols(), "autocorrelation matrix must be square");
    if !c.is_finite() {
        return Err(PreprocessError::NonFinite);
    }
    let fro = c.fro_norm();
    if fro == 0.0 {
        return Err(PreprocessError::ZeroMatrix);
    }
    let b = c.rows();
    let mut max_asym = 0.0f64;
    for i in 0..b {
        for j in i..b {
            let d = c.get(i, j) - c.get(j, i).conj();
            let asym = flt::sqrt(d.norm_sqr()) / fro;
            if asym > max_asym {
                max_asym = asym;
            }
        }
    }
    if max_asym > HERMITIAN_REL_TOL {
        return Err(PreprocessError::NotHermitian { max_asymmetry: max_asym });
    }

    let mut matrix = vec![0.0f64; b * b];
    for i in 0..b {
        for j in 0..b {
            let v = if i == j {
                c.get(i, i).re
            } else if i < j {
                c.get(i, j).re
            } else {
                c.get(i, j).im
            };
            matrix[i * b + j] = v / fro;
        }
    }
    Ok(PreprocessedInput { side: b, matrix, norm_factor: fro })
}

/// Full preprocessing stage: autocorrelate then pack.
pub fn preprocess(h: &CsiMatrix) -> Result<PreprocessedInput, PreprocessError> {
    pack(&autocorrelate(h)?)
}
