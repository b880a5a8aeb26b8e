//! Containers, seeded randomness and norm helpers shared by every module.

mod matrix;
pub mod mat1;
mod rng;

pub use matrix::{dot, norm, DenseMatrix, DenseVector};
pub use rng::{gaussian_matrix, SeededRng};

use crate::error::{Result, SaraError};

/// Rescales every row to Euclidean norm `radius`.
pub fn normalize_rows_to_radius(mat: &DenseMatrix, radius: f64) -> Result<DenseMatrix> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(SaraError::InvalidArgument(format!(
            "radius must be positive and finite, got {radius}"
        )));
    }
    let mut out = mat.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let n = norm(row);
        if n == 0.0 {
            return Err(SaraError::ZeroRow { row: i });
        }
        let s = radius / n;
        row.iter_mut().for_each(|x| *x *= s);
    }
    Ok(out)
}

/// Running tally of floating-point operations, two per multiply-add.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FlopCounter(pub u64);

impl FlopCounter {
    pub fn add(&mut self, n: u64) {
        self.0 += n;
    }

    pub fn add_matmul(&mut self, n: usize, k: usize, p: usize) {
        self.0 += 2 * (n as u64) * (k as u64) * (p as u64);
    }

    pub fn get(&self) -> u64 {
        self.0
    }
}
