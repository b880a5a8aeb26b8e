//! Attention engines.
//!
//! * [`exact_softmax_attention`]: scores `exp(qᵀk)` normalized per row.
//! * [`kernel_attention_quadratic`]: materializes the M×N matrix of feature
//!   dot products `φ_q(x_i)ᵀφ_k(y_j)`; the reference for the linear engine.
//! * [`kernel_attention_linear`]: accumulates `Ψ = Σ_j V_j φ_k(y_j)ᵀ` and
//!   `Γ = Σ_j φ_k(y_j)` once, then answers each query as `Ψφ_q(x_i) / Γφ_q(x_i)`
//!   without ever forming an M×N matrix.
//!
//! No causal masking: all attention here is bidirectional.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Result, SaraError};
use crate::feature_maps::{apply_counted, FeatureMapSpec};
use crate::numerics::{self, DenseMatrix, DenseVector, FlopCounter, SeededRng};

/// Normalizers at or below this value raise [`SaraError::DegenerateRow`].
pub const DENOMINATOR_EPS: f64 = 1e-12;

/// Tolerance on the row sum accepted by [`score_stats`] and friends.
pub const DISTRIBUTION_TOL: f64 = 1e-8;

/// Teacher projections: queries are `X·W_Q`, keys are `X·W_K`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerParams {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
}

impl AttentionLayerParams {
    pub fn new(w_q: DenseMatrix, w_k: DenseMatrix) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return Err(shape_mismatch(
                "AttentionLayerParams",
                format!("{:?}", w_q.shape()),
                format!("{:?}", w_k.shape()),
            ));
        }
        Ok(Self { w_q, w_k })
    }

    /// `W_Q = W_K = scale·I`.
    pub fn scaled_identity(d: usize, scale: f64) -> Self {
        let w = DenseMatrix::identity(d).scaled(scale);
        Self { w_q: w.clone(), w_k: w }
    }

    /// Independent projections `radius·O` with `O` a random d×d orthogonal
    /// matrix, so unit-norm tokens map to queries and keys of norm `radius`.
    pub fn random_orthogonal(rng: &SeededRng, d: usize, radius: f64) -> Result<Self> {
        let w_q = random_orthogonal(&mut rng.substream("w_q"), d)?.scaled(radius);
        let w_k = random_orthogonal(&mut rng.substream("w_k"), d)?.scaled(radius);
        Self::new(w_q, w_k)
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_qk(&self) -> usize {
        self.w_q.cols()
    }

    pub fn queries(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        x.matmul(&self.w_q)
    }

    pub fn keys(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        x.matmul(&self.w_k)
    }
}

/// Gram-Schmidt on a Gaussian matrix; columns come out orthonormal.
fn random_orthogonal(rng: &mut SeededRng, d: usize) -> Result<DenseMatrix> {
    let g = numerics::gaussian_matrix(rng, d, d)?;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut c: Vec<f64> = (0..d).map(|i| g.get(i, j)).collect();
        // two passes keep the basis orthogonal to machine precision
        for _ in 0..2 {
            for prev in &cols {
                let p = numerics::dot(&c, prev);
                c.iter_mut().zip(prev).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = numerics::norm(&c);
        c.iter_mut().for_each(|x| *x /= n);
        cols.push(c);
    }
    DenseMatrix::from_fn(d, d, |i, j| cols[j][i])
}

/// Flop tallies for one engine call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCounts {
    /// Feature-map evaluation, shared by both kernel engines.
    pub feature_map: u64,
    /// Work that scales with M·N (score matrix, normalization, weighting).
    pub quadratic_flops: u64,
    /// Ψ/Γ accumulation and per-query products.
    pub linear_flops: u64,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.feature_map + self.quadratic_flops + self.linear_flops
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// M×d_v weighted values.
    pub values: DenseMatrix,
    /// Row-stochastic M×N scores; absent for the linear engine unless
    /// reconstructed on request.
    pub scores: Option<DenseMatrix>,
    /// Per-query normalizers. For the softmax engine this is the max-shifted
    /// sum `Σ_l exp(q·k_l − max_l q·k_l)`.
    pub denominators: DenseVector,
    pub flops: FlopCounts,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EngineOptions {
    /// Added to every kernel-engine normalizer before the degeneracy check.
    /// Zero unless a caller opts in.
    pub denom_stabilizer: f64,
    /// Linear engine only: rebuild the score matrix via the quadratic engine.
    pub reconstruct_scores: bool,
    /// Parallelize over query rows. Results do not depend on thread count.
    pub parallel: bool,
}

fn check_qkv(q_cols: usize, k: &DenseMatrix, v: &DenseMatrix, context: &'static str) -> Result<()> {
    if k.rows() == 0 {
        return Err(SaraError::InvalidArgument(format!("{context}: need at least one key")));
    }
    if q_cols != k.cols() {
        return Err(shape_mismatch(context, format!("query/key width {q_cols}"), k.cols()));
    }
    if k.rows() != v.rows() {
        return Err(shape_mismatch(context, format!("{} value rows", k.rows()), v.rows()));
    }
    Ok(())
}

/// Softmax attention with per-row max subtraction.
pub fn exact_softmax_attention(
    q: &DenseMatrix,
    k: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<AttentionOutput> {
    check_qkv(q.cols(), k, v, "exact_softmax_attention")?;
    let (m_rows, n, d_v) = (q.rows(), k.rows(), v.cols());
    let mut flops = FlopCounter::default();
    let mut scores = q.matmul_transposed(k)?;
    flops.add_matmul(m_rows, q.cols(), n);
    let mut denominators = Vec::with_capacity(m_rows);
    for i in 0..m_rows {
        let row = scores.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        row.iter_mut().for_each(|s| *s /= sum);
        denominators.push(sum);
    }
    flops.add(3 * (m_rows * n) as u64);
    let values = scores.matmul(v)?;
    flops.add_matmul(m_rows, n, d_v);
    Ok(AttentionOutput {
        values,
        scores: Some(scores),
        denominators: DenseVector::from_raw(denominators),
        flops: FlopCounts {
            quadratic_flops: flops.get(),
            ..Default::default()
        },
    })
}

fn features(
    phi_q: &FeatureMapSpec,
    phi_k: &FeatureMapSpec,
    xq: &DenseMatrix,
    xk: &DenseMatrix,
    v: &DenseMatrix,
    context: &'static str,
) -> Result<(DenseMatrix, DenseMatrix, u64)> {
    if phi_q.output_dim() != phi_k.output_dim() {
        return Err(shape_mismatch(
            context,
            format!("matching feature dims ({})", phi_q.output_dim()),
            phi_k.output_dim(),
        ));
    }
    if xk.rows() == 0 {
        return Err(SaraError::InvalidArgument(format!("{context}: need at least one key")));
    }
    if xk.rows() != v.rows() {
        return Err(shape_mismatch(context, format!("{} value rows", xk.rows()), v.rows()));
    }
    let mut flops = FlopCounter::default();
    let fq = apply_counted(phi_q, xq, &mut flops)?;
    let fk = apply_counted(phi_k, xk, &mut flops)?;
    Ok((fq, fk, flops.get()))
}

fn guard(row: usize, denominator: f64) -> Result<f64> {
    if denominator > DENOMINATOR_EPS {
        Ok(denominator)
    } else {
        Err(SaraError::DegenerateRow { row, denominator })
    }
}

pub fn kernel_attention_quadratic(
    phi_q: &FeatureMapSpec,
    phi_k: &FeatureMapSpec,
    xq: &DenseMatrix,
    xk: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<AttentionOutput> {
    kernel_attention_quadratic_with(phi_q, phi_k, xq, xk, v, EngineOptions::default())
}

pub fn kernel_attention_quadratic_with(
    phi_q: &FeatureMapSpec,
    phi_k: &FeatureMapSpec,
    xq: &DenseMatrix,
    xk: &DenseMatrix,
    v: &DenseMatrix,
    opts: EngineOptions,
) -> Result<AttentionOutput> {
    let (fq, fk, feature_flops) = features(phi_q, phi_k, xq, xk, v, "kernel_attention_quadratic")?;
    quadratic_from_features(&fq, &fk, v, opts, feature_flops)
}

pub(crate) fn quadratic_from_features(
    fq: &DenseMatrix,
    fk: &DenseMatrix,
    v: &DenseMatrix,
    opts: EngineOptions,
    feature_flops: u64,
) -> Result<AttentionOutput> {
    let (m_rows, n, m, d_v) = (fq.rows(), fk.rows(), fq.cols(), v.cols());

    let answer = |i: usize, scores: &mut [f64], out: &mut [f64]| -> Result<f64> {
        let phi = fq.row(i);
        for (s, k) in scores.iter_mut().zip(fk.row_iter()) {
            *s = numerics::dot(phi, k);
        }
        let den = guard(i, scores.iter().sum::<f64>() + opts.denom_stabilizer)?;
        scores.iter_mut().for_each(|s| *s /= den);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (&s, val) in scores.iter().zip(v.row_iter()) {
            out.iter_mut().zip(val).for_each(|(o, &x)| *o += s * x);
        }
        Ok(den)
    };

    let mut scores = DenseMatrix::zeros(m_rows, n);
    let mut values = DenseMatrix::zeros(m_rows, d_v);
    let denominators: Vec<f64> = if opts.parallel && n > 0 && d_v > 0 {
        scores
            .as_mut_slice()
            .par_chunks_mut(n)
            .zip(values.as_mut_slice().par_chunks_mut(d_v))
            .enumerate()
            .map(|(i, (s, out))| answer(i, s, out))
            .collect::<Result<_>>()?
    } else {
        let mut dens = Vec::with_capacity(m_rows);
        for i in 0..m_rows {
            dens.push(answer(i, scores.row_mut(i), values.row_mut(i))?);
        }
        dens
    };

    let mut flops = FlopCounter::default();
    flops.add_matmul(m_rows, m, n);
    flops.add(2 * (m_rows * n) as u64);
    flops.add_matmul(m_rows, n, d_v);
    Ok(AttentionOutput {
        values,
        scores: Some(scores),
        denominators: DenseVector::from_raw(denominators),
        flops: FlopCounts {
            feature_map: feature_flops,
            quadratic_flops: flops.get(),
            linear_flops: 0,
        },
    })
}

pub fn kernel_attention_linear(
    phi_q: &FeatureMapSpec,
    phi_k: &FeatureMapSpec,
    xq: &DenseMatrix,
    xk: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<AttentionOutput> {
    kernel_attention_linear_with(phi_q, phi_k, xq, xk, v, EngineOptions::default())
}

pub fn kernel_attention_linear_with(
    phi_q: &FeatureMapSpec,
    phi_k: &FeatureMapSpec,
    xq: &DenseMatrix,
    xk: &DenseMatrix,
    v: &DenseMatrix,
    opts: EngineOptions,
) -> Result<AttentionOutput> {
    let (fq, fk, feature_flops) = features(phi_q, phi_k, xq, xk, v, "kernel_attention_linear")?;
    let mut out = linear_from_features(&fq, &fk, v, opts, feature_flops)?;
    if opts.reconstruct_scores {
        out.scores = quadratic_from_features(&fq, &fk, v, opts, 0)?.scores;
    }
    Ok(out)
}

/// Accumulators of the linear engine: `Ψᵀ` stored m×d_v and `Γ` of length m.
pub(crate) struct Accumulators {
    pub psi_t: DenseMatrix,
    pub gamma: Vec<f64>,
}

pub(crate) fn accumulate(fk: &DenseMatrix, v: &DenseMatrix) -> Accumulators {
    let (m, d_v) = (fk.cols(), v.cols());
    let mut psi_t = DenseMatrix::zeros(m, d_v);
    let mut gamma = vec![0.0; m];
    for (phi, val) in fk.row_iter().zip(v.row_iter()) {
        for (l, &p) in phi.iter().enumerate() {
            gamma[l] += p;
            psi_t.row_mut(l).iter_mut().zip(val).for_each(|(acc, &x)| *acc += p * x);
        }
    }
    Accumulators { psi_t, gamma }
}

pub(crate) fn linear_from_features(
    fq: &DenseMatrix,
    fk: &DenseMatrix,
    v: &DenseMatrix,
    opts: EngineOptions,
    feature_flops: u64,
) -> Result<AttentionOutput> {
    let (m_rows, n, m, d_v) = (fq.rows(), fk.rows(), fq.cols(), v.cols());
    let acc = accumulate(fk, v);

    let answer = |i: usize, out: &mut [f64]| -> Result<f64> {
        let phi = fq.row(i);
        let den = guard(i, numerics::dot(&acc.gamma, phi) + opts.denom_stabilizer)?;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (l, &p) in phi.iter().enumerate() {
            out.iter_mut()
                .zip(acc.psi_t.row(l))
                .for_each(|(o, &s)| *o += p * s);
        }
        out.iter_mut().for_each(|o| *o /= den);
        Ok(den)
    };

    let mut values = DenseMatrix::zeros(m_rows, d_v);
    let denominators: Vec<f64> = if opts.parallel && d_v > 0 {
        values
            .as_mut_slice()
            .par_chunks_mut(d_v)
            .enumerate()
            .map(|(i, out)| answer(i, out))
            .collect::<Result<_>>()?
    } else {
        let mut dens = Vec::with_capacity(m_rows);
        for i in 0..m_rows {
            dens.push(answer(i, values.row_mut(i))?);
        }
        dens
    };

    let mut flops = FlopCounter::default();
    flops.add_matmul(n, m, d_v);
    flops.add((n * m) as u64);
    flops.add((m_rows * (2 * m * d_v + 2 * m + d_v)) as u64);
    Ok(AttentionOutput {
        values,
        scores: None,
        denominators: DenseVector::from_raw(denominators),
        flops: FlopCounts {
            feature_map: feature_flops,
            quadratic_flops: 0,
            linear_flops: flops.get(),
        },
    })
}

/// Summary of one score row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    /// Shannon entropy in nats, with `0·ln 0 = 0`.
    pub entropy: f64,
    pub max_score: f64,
    pub top_k_indices: Vec<usize>,
}

pub(crate) fn check_distribution(row: &[f64]) -> Result<()> {
    if let Some(j) = row.iter().position(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(SaraError::NotADistribution(format!(
            "entry {j} is {}",
            row[j]
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(SaraError::NotADistribution(format!("sums to {total}")));
    }
    Ok(())
}

pub(crate) fn entropy(row: &[f64]) -> f64 {
    -row.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Indices of the `k` largest entries, descending, ties to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn score_stats(row: &DenseVector, k: usize) -> Result<ScoreStats> {
    let row = row.as_slice();
    check_distribution(row)?;
    Ok(ScoreStats {
        entropy: entropy(row),
        max_score: row.iter().copied().fold(0.0, f64::max),
        top_k_indices: top_k_indices(row, k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_maps::{FeatureKind, SaraParams};
    use crate::numerics::gaussian_matrix;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_single_key() {
        let q = m(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let k = m(&[&[0.3, 0.3]]);
        let v = m(&[&[4.0, 5.0, 6.0]]);
        let out = exact_softmax_attention(&q, &k, &v).unwrap();
        let s = out.scores.unwrap();
        assert!(s.as_slice().iter().all(|&x| x == 1.0));
        assert_eq!(out.values.row(0), &[4.0, 5.0, 6.0]);
        assert_eq!(out.values.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn softmax_zero_query_is_uniform() {
        let q = m(&[&[0.0, 0.0]]);
        let k = m(&[&[9.0, -1.0], &[0.2, 3.0], &[-5.0, -5.0], &[1.0, 1.0]]);
        let v = DenseMatrix::identity(4);
        let out = exact_softmax_attention(&q, &k, &v).unwrap();
        for &s in out.scores.unwrap().as_slice() {
            assert!((s - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_brute_force() {
        let q = m(&[&[1.0, 0.0], &[0.0, -1.0], &[1.0, 1.0]]);
        let k = m(&[&[2.0, 1.0], &[-1.0, 1.0], &[0.0, 2.0]]);
        let v = m(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 5.0]]);
        let out = exact_softmax_attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            let w: Vec<f64> = (0..3)
                .map(|j| (q.get(i, 0) * k.get(j, 0) + q.get(i, 1) * k.get(j, 1)).exp())
                .collect();
            let z: f64 = w.iter().sum();
            for c in 0..2 {
                let expect: f64 = (0..3).map(|j| w[j] / z * v.get(j, c)).sum();
                assert!((out.values.get(i, c) - expect).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn softmax_shape_errors() {
        let q = DenseMatrix::zeros(2, 3);
        assert!(exact_softmax_attention(&q, &DenseMatrix::zeros(2, 2), &DenseMatrix::zeros(2, 1)).is_err());
        assert!(exact_softmax_attention(&q, &DenseMatrix::zeros(2, 3), &DenseMatrix::zeros(3, 1)).is_err());
        assert!(exact_softmax_attention(&q, &DenseMatrix::zeros(0, 3), &DenseMatrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn identity_gram_peaks_on_match() {
        let id = FeatureMapSpec::Identity { dim: 3 };
        let x = DenseMatrix::identity(3);
        // a small positive shift keeps every normalizer away from zero
        let xs = DenseMatrix::from_fn(3, 3, |i, j| x.get(i, j) + 0.01).unwrap();
        let v = DenseMatrix::identity(3);
        let out = kernel_attention_quadratic(&id, &id, &xs, &xs, &v).unwrap();
        let s = out.scores.unwrap();
        for i in 0..3 {
            assert_eq!(top_k_indices(s.row(i), 1), vec![i]);
        }
        let raw = x.matmul_transposed(&x).unwrap();
        assert_eq!(raw, DenseMatrix::identity(3));
    }

    #[test]
    fn relu_gram_hand_computed() {
        let relu = FeatureMapSpec::Elementwise {
            f: FeatureKind::Relu,
            dim: 4,
        };
        let xq = m(&[
            &[1.0, -1.0, 2.0, 0.0],
            &[0.5, 0.5, -2.0, 1.0],
            &[-1.0, 3.0, 0.0, 0.0],
            &[2.0, 2.0, 2.0, 2.0],
        ]);
        let xk = m(&[
            &[1.0, 0.0, 0.0, 1.0],
            &[-1.0, 2.0, 1.0, 0.0],
            &[0.0, 0.0, 3.0, -1.0],
            &[1.0, 1.0, 1.0, 1.0],
        ]);
        let v = m(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 2.0], &[-1.0, 3.0]]);
        let out = kernel_attention_quadratic(&relu, &relu, &xq, &xk, &v).unwrap();
        let r = |x: f64| x.max(0.0);
        for i in 0..4 {
            let w: Vec<f64> = (0..4)
                .map(|j| (0..4).map(|c| r(xq.get(i, c)) * r(xk.get(j, c))).sum())
                .collect();
            let z: f64 = w.iter().sum();
            for c in 0..2 {
                let expect: f64 = (0..4).map(|j| w[j] / z * v.get(j, c)).sum();
                assert!((out.values.get(i, c) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_key_returns_value_row() {
        let spec = FeatureMapSpec::Elementwise {
            f: FeatureKind::Exp,
            dim: 2,
        };
        let xq = m(&[&[0.3, -0.1], &[1.0, 2.0]]);
        let xk = m(&[&[0.5, 0.5]]);
        let v = m(&[&[7.0, -3.0]]);
        let lin = kernel_attention_linear(&spec, &spec, &xq, &xk, &v).unwrap();
        let quad = kernel_attention_quadratic(&spec, &spec, &xq, &xk, &v).unwrap();
        for i in 0..2 {
            for c in 0..2 {
                assert!((lin.values.get(i, c) - v.get(0, c)).abs() <= 1e-15 * v.get(0, c).abs());
            }
        }
        assert!(quad.scores.unwrap().as_slice().iter().all(|&s| s == 1.0));
        assert!(lin.scores.is_none());
    }

    #[test]
    fn dead_relu_is_degenerate() {
        let relu = FeatureMapSpec::Elementwise {
            f: FeatureKind::Relu,
            dim: 2,
        };
        let x = m(&[&[-1.0, -0.5], &[0.0, -2.0]]);
        let v = DenseMatrix::identity(2);
        assert!(matches!(
            kernel_attention_linear(&relu, &relu, &x, &x, &v),
            Err(SaraError::DegenerateRow { row: 0, .. })
        ));
        assert!(matches!(
            kernel_attention_quadratic(&relu, &relu, &x, &x, &v),
            Err(SaraError::DegenerateRow { row: 0, .. })
        ));
        let opts = EngineOptions {
            denom_stabilizer: 1e-6,
            ..Default::default()
        };
        let out = kernel_attention_linear_with(&relu, &relu, &x, &x, &v, opts).unwrap();
        assert!(out.values.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mismatched_feature_dims() {
        let a = FeatureMapSpec::Identity { dim: 2 };
        let b = FeatureMapSpec::PositiveRf {
            projection: DenseMatrix::zeros(3, 2),
        };
        let x = DenseMatrix::zeros(1, 2);
        assert!(matches!(
            kernel_attention_linear(&a, &b, &x, &x, &DenseMatrix::zeros(1, 1)),
            Err(SaraError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn reconstructed_scores_match_quadratic() {
        let g = gaussian_matrix(&mut SeededRng::new(1), 8, 3).unwrap();
        let spec = FeatureMapSpec::PositiveRf { projection: g };
        let x = gaussian_matrix(&mut SeededRng::new(2), 5, 3).unwrap();
        let v = gaussian_matrix(&mut SeededRng::new(3), 5, 2).unwrap();
        let opts = EngineOptions {
            reconstruct_scores: true,
            ..Default::default()
        };
        let lin = kernel_attention_linear_with(&spec, &spec, &x, &x, &v, opts).unwrap();
        let quad = kernel_attention_quadratic(&spec, &spec, &x, &x, &v).unwrap();
        assert_eq!(lin.scores.unwrap(), quad.scores.unwrap());
    }

    #[test]
    fn parallel_matches_serial_bitwise() {
        let p = SaraParams::gaussian(&SeededRng::new(9), 16, 4, 0.5).unwrap();
        let (q, k) = FeatureMapSpec::sara_pair(FeatureKind::Exp, p);
        let x = gaussian_matrix(&mut SeededRng::new(10), 200, 4).unwrap();
        let v = gaussian_matrix(&mut SeededRng::new(11), 200, 3).unwrap();
        let serial = kernel_attention_linear(&q, &k, &x, &x, &v).unwrap();
        let par = kernel_attention_linear_with(
            &q,
            &k,
            &x,
            &x,
            &v,
            EngineOptions {
                parallel: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(serial.values, par.values);
    }

    #[test]
    fn flop_counters_scale() {
        let run = |n: usize| {
            let spec = FeatureMapSpec::Elementwise {
                f: FeatureKind::Exp,
                dim: 4,
            };
            let x = DenseMatrix::zeros(n, 4);
            let v = DenseMatrix::zeros(n, 3);
            let q = kernel_attention_quadratic(&spec, &spec, &x, &x, &v).unwrap().flops;
            let l = kernel_attention_linear(&spec, &spec, &x, &x, &v).unwrap().flops;
            (q.quadratic_flops, l.linear_flops)
        };
        let (q1, l1) = run(50);
        let (q2, l2) = run(100);
        assert_eq!(q2, 4 * q1);
        assert_eq!(l2, 2 * l1);
    }

    #[test]
    fn score_stats_examples() {
        let u = score_stats(&DenseVector::filled(4, 0.25), 2).unwrap();
        assert!((u.entropy - 4f64.ln()).abs() < 1e-15);
        assert_eq!(u.max_score, 0.25);
        assert_eq!(u.top_k_indices, vec![0, 1]);

        let one_hot = DenseVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        let s = score_stats(&one_hot, 1).unwrap();
        assert_eq!(s.entropy, 0.0);
        assert_eq!(s.max_score, 1.0);
        assert_eq!(s.top_k_indices, vec![1]);

        let p = DenseVector::new(vec![0.7, 0.2, 0.1]).unwrap();
        let s = score_stats(&p, 3).unwrap();
        let expect = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((s.entropy - expect).abs() < 1e-15);
        assert!((s.entropy - 0.8018).abs() < 5e-5);
        assert_eq!(s.top_k_indices, vec![0, 1, 2]);

        assert!(matches!(
            score_stats(&DenseVector::new(vec![0.5, 0.6]).unwrap(), 1),
            Err(SaraError::NotADistribution(_))
        ));
        assert!(score_stats(&DenseVector::new(vec![1.5, -0.5]).unwrap(), 1).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(seed in any::<u64>(), mq in 1usize..6, n in 1usize..9) {
            let root = SeededRng::new(seed);
            let q = gaussian_matrix(&mut root.substream("q"), mq, 3).unwrap();
            let k = gaussian_matrix(&mut root.substream("k"), n, 3).unwrap();
            let v = gaussian_matrix(&mut root.substream("v"), n, 2).unwrap();
            let c = root.substream("c").normal_vector(3);
            let shifted = DenseMatrix::from_fn(n, 3, |i, j| k.get(i, j) + c.get(j)).unwrap();
            let a = exact_softmax_attention(&q, &k, &v).unwrap().scores.unwrap();
            let b = exact_softmax_attention(&q, &shifted, &v).unwrap().scores.unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
            for r in a.row_iter() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
                prop_assert!(r.iter().all(|&s| s >= 0.0));
            }
        }
    }
}
