//! Executable checks for the softmax-kernel estimators.
//!
//! For `|x| = |y| = r` and a Gaussian `G` (m×d), the randomized exp features
//! `exp(G x)` satisfy `E[exp(Gx)ᵀexp(Gy)] = m·e^{r²}·exp(xᵀy)`. The normalized
//! estimate `K̂ = exp(Gx)ᵀexp(Gy) / (m·e^{r²})` therefore has mean `exp(xᵀy)`,
//! variance `(1/m)·e^{-(|x|²+|y|²)}·(e^{2|z|²} − e^{|z|²})` with `z = x + y`,
//! and Chebyshev gives `P[|K̂ − K| > t·sd] ≤ 1/t²`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{exact_softmax_attention, kernel_attention_linear, AttentionLayerParams};
use crate::error::{shape_mismatch, Result, SaraError};
use crate::feature_maps::{apply_feature_map, sara_from_theorem, FeatureKind, FeatureMapSpec};
use crate::numerics::{self, gaussian_matrix, DenseMatrix, DenseVector, SeededRng};

/// Trials per RNG substream; fixed so results do not depend on thread count.
const TRIAL_CHUNK: usize = 2048;

/// Relative difference treated as rounding in exceedance counts.
const ROUNDING_SLACK: f64 = 1e-12;

const NORM_TOL: f64 = 1e-9;

pub fn softmax_kernel(x: &DenseVector, y: &DenseVector) -> Result<f64> {
    Ok(x.dot(y)?.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    /// `exp(xᵀy)`.
    pub target: f64,
    pub mc_mean: f64,
    /// Standard error of `mc_mean`; `+∞` with a single trial.
    pub mc_stderr: f64,
    /// Unbiased sample variance of a single estimate; `+∞` with a single trial.
    pub mc_variance: f64,
    pub trials: usize,
    pub m: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct RunningStats {
    n: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: RunningStats) -> RunningStats {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        RunningStats { n, mean, m2 }
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Squared common norm of `x` and `y`; errors if the norms differ.
fn common_radius_sq(x: &DenseVector, y: &DenseVector) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape_mismatch("estimator inputs", x.len(), y.len()));
    }
    let (nx, ny) = (x.norm(), y.norm());
    if (nx - ny).abs() > NORM_TOL * nx.max(1.0) {
        return Err(SaraError::NormMismatch {
            expected: nx,
            actual: ny,
        });
    }
    let sx = x.dot(x)?;
    let sy = y.dot(y)?;
    Ok(0.5 * (sx + sy))
}

/// One draw of `K̂` for a given projection.
pub fn normalized_estimate(g: &DenseMatrix, x: &DenseVector, y: &DenseVector) -> Result<f64> {
    let r2 = common_radius_sq(x, y)?;
    estimate_with(g.clone(), x, y, r2)
}

fn estimate_with(g: DenseMatrix, x: &DenseVector, y: &DenseVector, r2: f64) -> Result<f64> {
    let m = g.rows();
    let spec = FeatureMapSpec::Randomized {
        f: FeatureKind::Exp,
        projection: g,
    };
    let xy = DenseMatrix::from_rows(&[x.as_slice(), y.as_slice()])?;
    let phi = apply_feature_map(&spec, &xy)?;
    Ok(numerics::dot(phi.row(0), phi.row(1)) / (m as f64 * r2.exp()))
}

/// Runs `trials` fresh-`G` draws in fixed chunks, each chunk on its own
/// substream, and folds the per-chunk results in chunk order.
fn fold_trials<T: Send>(
    x: &DenseVector,
    y: &DenseVector,
    m: usize,
    trials: usize,
    rng: &SeededRng,
    init: impl Fn() -> T + Sync,
    step: impl Fn(&mut T, f64) + Sync,
    merge: impl Fn(T, T) -> T,
) -> Result<T> {
    let r2 = common_radius_sq(x, y)?;
    if m == 0 || trials == 0 {
        return Err(SaraError::InvalidArgument(format!(
            "need m >= 1 and trials >= 1, got m={m}, trials={trials}"
        )));
    }
    let d = x.len();
    let chunks = trials.div_ceil(TRIAL_CHUNK);
    let partials: Vec<T> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<T> {
            let mut local = rng.indexed("trial-chunk", c as u64);
            let count = TRIAL_CHUNK.min(trials - c * TRIAL_CHUNK);
            let mut acc = init();
            for _ in 0..count {
                let g = gaussian_matrix(&mut local, m, d)?;
                step(&mut acc, estimate_with(g, x, y, r2)?);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(partials.into_iter().fold(init(), merge))
}

/// Monte Carlo mean of `K̂` over `trials` independent projections.
pub fn mc_unbiasedness(
    x: &DenseVector,
    y: &DenseVector,
    m: usize,
    trials: usize,
    rng: &SeededRng,
) -> Result<EstimatorReport> {
    let stats = fold_trials(
        x,
        y,
        m,
        trials,
        rng,
        RunningStats::default,
        RunningStats::push,
        RunningStats::merge,
    )?;
    let variance = stats.variance();
    Ok(EstimatorReport {
        target: softmax_kernel(x, y)?,
        mc_mean: stats.mean,
        mc_stderr: (variance / stats.n as f64).sqrt(),
        mc_variance: variance,
        trials: stats.n,
        m,
    })
}

/// Closed-form variance of `K̂`.
pub fn variance_closed_form(x: &DenseVector, y: &DenseVector, m: usize) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape_mismatch("variance_closed_form", x.len(), y.len()));
    }
    let z: Vec<f64> = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a + b).collect();
    let z2 = numerics::dot(&z, &z);
    let xy2 = x.dot(x)? + y.dot(y)?;
    // e^{-(|x|²+|y|²)}·(e^{2|z|²} − e^{|z|²}) = e^{|z|² − |x|² − |y|²}·expm1(|z|²)
    Ok((z2 - xy2).exp() * z2.exp_m1() / m as f64)
}

/// Deviation radius `t·sd(K̂)` for inputs of norm `r` at angle `theta`.
pub fn chebyshev_radius(m: usize, r: f64, theta: f64, t: f64) -> f64 {
    let c = theta.cos();
    let r2 = r * r;
    let tail = (-(-2.0 * r2 * (1.0 + c)).exp_m1()).max(0.0);
    t / (m as f64).sqrt() * (r2 * (2.0 * c + 1.0)).exp() * tail.sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    pub empirical_tail: f64,
    /// `1/t²`.
    pub bound: f64,
    pub radius: f64,
    /// Binomial standard error at the bound, `sqrt(b(1−b)/trials)`.
    pub stderr: f64,
    pub trials: usize,
    pub exceedances: usize,
}

impl TailReport {
    pub fn within_bound(&self) -> bool {
        self.empirical_tail <= self.bound + 3.0 * self.stderr
    }
}

/// Frequency of `|K̂ − K| > chebyshev_radius` over fresh projections.
pub fn chebyshev_tail_check(
    x: &DenseVector,
    y: &DenseVector,
    m: usize,
    t: f64,
    trials: usize,
    rng: &SeededRng,
) -> Result<TailReport> {
    if !(t > 0.0) {
        return Err(SaraError::InvalidArgument(format!("t must be positive, got {t}")));
    }
    let r2 = common_radius_sq(x, y)?;
    let r = r2.sqrt();
    let cos = if r2 > 0.0 { (x.dot(y)? / r2).clamp(-1.0, 1.0) } else { 1.0 };
    let radius = chebyshev_radius(m, r, cos.acos(), t);
    let target = softmax_kernel(x, y)?;
    let threshold = radius + ROUNDING_SLACK * target;
    let exceedances = fold_trials(
        x,
        y,
        m,
        trials,
        rng,
        || 0usize,
        |n, k_hat| {
            if (k_hat - target).abs() > threshold {
                *n += 1;
            }
        },
        |a, b| a + b,
    )?;
    let bound = 1.0 / (t * t);
    Ok(TailReport {
        empirical_tail: exceedances as f64 / trials as f64,
        bound,
        radius,
        stderr: (bound.min(1.0) * (1.0 - bound.min(1.0)) / trials as f64).sqrt(),
        trials,
        exceedances,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremSetting {
    /// Smallest kernel entry.
    pub tau: f64,
    /// Largest kernel entry.
    pub rho: f64,
    pub delta: f64,
    pub m_queries: usize,
    pub n_keys: usize,
    pub radius: f64,
    pub a: f64,
}

impl TheoremSetting {
    fn validate(&self) -> Result<()> {
        let ok = self.tau > 0.0
            && self.tau <= self.rho
            && self.rho.is_finite()
            && self.delta > 0.0
            && self.radius > 0.0
            && self.a < 0.0
            && self.m_queries >= 1
            && self.n_keys >= 1;
        if ok {
            Ok(())
        } else {
            Err(SaraError::InvalidArgument(format!("invalid theorem setting {self:?}")))
        }
    }
}

/// Feature count `⌈(2ρ²/(δ²τ²))·ln(2MN)·exp(−r²/A)⌉ + 1`.
pub fn theorem_m(setting: &TheoremSetting) -> Result<usize> {
    setting.validate()?;
    let s = setting;
    let ratio = s.rho / (s.delta * s.tau);
    let bracket = 2.0 * ratio * ratio
        * (2.0 * s.m_queries as f64 * s.n_keys as f64).ln()
        * (-(s.radius * s.radius) / s.a).exp();
    if !(bracket.is_finite() && bracket < 1e15) {
        return Err(SaraError::InvalidArgument(format!(
            "feature count {bracket:e} is out of range"
        )));
    }
    Ok(bracket.ceil() as usize + 1)
}

/// Largest absolute entrywise difference.
pub fn sup_norm_error(exact: &DenseMatrix, approx: &DenseMatrix) -> Result<f64> {
    exact.max_abs_diff(approx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    /// Setting with τ, ρ and r measured from the inputs.
    pub setting: TheoremSetting,
    pub m_used: usize,
    /// Sup-norm error of the row-normalized attention matrix, per seed.
    pub errors_per_seed: Vec<f64>,
    /// Sup-norm error of the unnormalized kernel estimate `φ_Qᵀφ_K/(m·e^{r²})`.
    pub kernel_errors_per_seed: Vec<f64>,
    /// Largest relative error `|K̂ − K|/K` over entries, per seed.
    pub kernel_rel_errors_per_seed: Vec<f64>,
    pub fraction_within_delta: f64,
    pub median_error: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Builds the closed-form SARA parameters with `m = theorem_m(...)` once per
/// seed, evaluates the attention matrix through the linear engine (values set
/// to the identity so the output rows are the scores) and measures it against
/// exact softmax attention.
pub fn theorem_end_to_end(
    delta: f64,
    a: f64,
    layer: &AttentionLayerParams,
    xq: &DenseMatrix,
    xk: &DenseMatrix,
    seeds: &[u64],
) -> Result<TheoremReport> {
    if seeds.is_empty() {
        return Err(SaraError::InvalidArgument("need at least one seed".into()));
    }
    let q = layer.queries(xq)?;
    let k = layer.keys(xk)?;
    let norms: Vec<f64> = q.row_norms().into_iter().chain(k.row_norms()).collect();
    let radius = norms[0];
    for &n in &norms {
        if (n - radius).abs() > NORM_TOL * radius.max(1.0) {
            return Err(SaraError::NormMismatch {
                expected: radius,
                actual: n,
            });
        }
    }
    let kernel = q.matmul_transposed(&k)?;
    let kernel = DenseMatrix::from_raw(
        kernel.rows(),
        kernel.cols(),
        kernel.as_slice().iter().map(|x| x.exp()).collect(),
    );
    let tau = kernel.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let rho = kernel.as_slice().iter().copied().fold(0.0, f64::max);
    let setting = TheoremSetting {
        tau,
        rho,
        delta,
        m_queries: q.rows(),
        n_keys: k.rows(),
        radius,
        a,
    };
    let m = theorem_m(&setting)?;

    let n = k.rows();
    let eye = DenseMatrix::identity(n);
    let exact = exact_softmax_attention(&q, &k, &eye)?
        .scores
        .expect("softmax engine always returns scores");
    let normalizer = m as f64 * (radius * radius).exp();

    let mut errors = Vec::with_capacity(seeds.len());
    let mut kernel_errors = Vec::with_capacity(seeds.len());
    let mut kernel_rel = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = SeededRng::new(seed).substream("theorem-g");
        let g = gaussian_matrix(&mut rng, m, layer.d_qk())?;
        let params = sara_from_theorem(&g, &layer.w_q, &layer.w_k, a)?;
        let (phi_q, phi_k) = FeatureMapSpec::sara_pair(FeatureKind::Exp, params);
        let approx = kernel_attention_linear(&phi_q, &phi_k, xq, xk, &eye)?.values;
        errors.push(sup_norm_error(&exact, &approx)?);

        let fq = apply_feature_map(&phi_q, xq)?;
        let fk = apply_feature_map(&phi_k, xk)?;
        let k_hat = fq.matmul_transposed(&fk)?.scaled(1.0 / normalizer);
        kernel_errors.push(sup_norm_error(&kernel, &k_hat)?);
        let rel = kernel
            .as_slice()
            .iter()
            .zip(k_hat.as_slice())
            .map(|(k, kh)| (k - kh).abs() / k)
            .fold(0.0, f64::max);
        kernel_rel.push(rel);
    }
    let within = errors.iter().filter(|&&e| e <= delta).count();
    Ok(TheoremReport {
        setting,
        m_used: m,
        fraction_within_delta: within as f64 / errors.len() as f64,
        median_error: median(&errors),
        errors_per_seed: errors,
        kernel_errors_per_seed: kernel_errors,
        kernel_rel_errors_per_seed: kernel_rel,
    })
}

/// Unit-norm token rows rescaled so that `layer` maps them to queries (or
/// keys) of norm exactly `radius`.
pub fn tokens_with_projected_radius(
    tokens: &DenseMatrix,
    projection: &DenseMatrix,
    radius: f64,
) -> Result<DenseMatrix> {
    let projected = tokens.matmul(projection)?;
    let mut out = tokens.clone();
    for (i, n) in projected.row_norms().into_iter().enumerate() {
        if n == 0.0 {
            return Err(SaraError::ZeroRow { row: i });
        }
        let s = radius / n;
        out.row_mut(i).iter_mut().for_each(|x| *x *= s);
    }
    Ok(out)
}
