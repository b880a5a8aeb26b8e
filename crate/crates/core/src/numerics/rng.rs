//! Seeded, splittable random streams.
//!
//! A [`SeededRng`] is a ChaCha8 stream keyed by 32 bytes. Substreams are keyed
//! by `SHA-256(parent_key || label)`, so deriving a substream never consumes
//! from the parent and adding a new consumer leaves every existing stream
//! untouched.
//!
//! Gaussian variates come from `rand_distr::StandardNormal` (the ziggurat
//! transform of uniform 64-bit draws). The lockfile pins the crate, which
//! keeps a given seed reproducible inside this repository.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::matrix::{DenseMatrix, DenseVector};
use crate::error::{Result, SaraError};

#[derive(Clone, Debug)]
pub struct SeededRng {
    key: [u8; 32],
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"sara-seed");
        hasher.update(seed.to_le_bytes());
        Self::from_key(hasher.finalize().into())
    }

    fn from_key(key: [u8; 32]) -> Self {
        Self {
            key,
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Independent stream for `label`; does not advance `self`.
    pub fn substream(&self, label: &str) -> SeededRng {
        let mut hasher = Sha256::new();
        hasher.update(self.key);
        hasher.update(label.as_bytes());
        Self::from_key(hasher.finalize().into())
    }

    /// Shorthand for `substream(&format!("{label}/{index}"))`.
    pub fn indexed(&self, label: &str, index: u64) -> SeededRng {
        self.substream(&format!("{label}/{index}"))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out {
            *x = self.standard_normal();
        }
    }

    pub fn normal_vector(&mut self, len: usize) -> DenseVector {
        let mut data = vec![0.0; len];
        self.fill_normal(&mut data);
        DenseVector::from_raw(data)
    }
}

/// Matrix with i.i.d. standard normal entries.
pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Result<DenseMatrix> {
    if rows == 0 || cols == 0 {
        return Err(SaraError::InvalidArgument(format!(
            "gaussian_matrix needs positive dimensions, got {rows}x{cols}"
        )));
    }
    let mut data = vec![0.0; rows * cols];
    rng.fill_normal(&mut data);
    Ok(DenseMatrix::from_raw(rows, cols, data))
}
