//! Feature maps φ turning queries and keys into nonnegative features whose dot
//! products stand in for the softmax kernel.
//!
//! * `Elementwise(f)`: `f` applied coordinate-wise.
//! * `Randomized(f, G)`: `f(G z)` for a fixed projection `G` (Gaussian in practice).
//! * `PositiveRf(G)`: positive random features `exp(-|z|²/2) exp(G z) / √m`.
//! * `Sara(f, side, params)`: the learnable map `v ⊙ f(G_side z)` acting on raw
//!   token embeddings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Result, SaraError};
use crate::numerics::{self, mat1, DenseMatrix, DenseVector, FlopCounter, SeededRng};

/// Scalar nonlinearity used by elementwise, randomized and SARA maps.
///
/// `Square` is `x ↦ x²`; some write-ups call it "sqrt", which is accepted as an alias.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Relu,
    Exp,
    #[serde(alias = "sqrt")]
    Square,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Relu, FeatureKind::Exp, FeatureKind::Square];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            FeatureKind::Relu => x.max(0.0),
            FeatureKind::Exp => x.exp(),
            FeatureKind::Square => x * x,
        }
    }

    /// Derivative; ReLU uses the subgradient 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            FeatureKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            FeatureKind::Exp => x.exp(),
            FeatureKind::Square => 2.0 * x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Relu => "relu",
            FeatureKind::Exp => "exp",
            FeatureKind::Square => "square",
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureKind {
    type Err = SaraError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(FeatureKind::Relu),
            "exp" => Ok(FeatureKind::Exp),
            "square" | "sqrt" => Ok(FeatureKind::Square),
            other => Err(SaraError::InvalidArgument(format!(
                "unknown feature kind {other:?} (expected relu, exp or square)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Key,
}

/// Learnable SARA parameters: a shared scale `v` and one projection per side.
#[derive(Clone, Debug, PartialEq)]
pub struct SaraParams {
    pub v: DenseVector,
    pub g_q: DenseMatrix,
    pub g_k: DenseMatrix,
}

impl SaraParams {
    pub fn new(v: DenseVector, g_q: DenseMatrix, g_k: DenseMatrix) -> Result<Self> {
        if g_q.shape() != g_k.shape() {
            return Err(shape_mismatch(
                "SaraParams",
                format!("G_K shaped like G_Q {:?}", g_q.shape()),
                format!("{:?}", g_k.shape()),
            ));
        }
        if v.len() != g_q.rows() {
            return Err(shape_mismatch("SaraParams v", g_q.rows(), v.len()));
        }
        if !g_q.is_finite() || !g_k.is_finite() {
            return Err(SaraError::NonFinite {
                context: "SaraParams",
                index: 0,
            });
        }
        Ok(Self { v, g_q, g_k })
    }

    pub fn m(&self) -> usize {
        self.v.len()
    }

    pub fn d(&self) -> usize {
        self.g_q.cols()
    }

    pub fn projection(&self, side: Side) -> &DenseMatrix {
        match side {
            Side::Query => &self.g_q,
            Side::Key => &self.g_k,
        }
    }

    /// `v = 1`, projections with i.i.d. `N(0, sigma²)` entries drawn from
    /// the `g_q` and `g_k` substreams of `rng`.
    pub fn gaussian(rng: &SeededRng, m: usize, d: usize, sigma: f64) -> Result<Self> {
        let g_q = numerics::gaussian_matrix(&mut rng.substream("g_q"), m, d)?.scaled(sigma);
        let g_k = numerics::gaussian_matrix(&mut rng.substream("g_k"), m, d)?.scaled(sigma);
        Self::new(DenseVector::filled(m, 1.0), g_q, g_k)
    }

    /// `v = 1` and `G_Q = W_Qᵀ`, `G_K = W_Kᵀ`, so `m = d_QK` and the features
    /// start as `f` applied to the teacher's queries and keys.
    pub fn from_projections(w_q: &DenseMatrix, w_k: &DenseMatrix) -> Result<Self> {
        Self::new(
            DenseVector::filled(w_q.cols(), 1.0),
            w_q.transpose(),
            w_k.transpose(),
        )
    }

    /// Persists as `v.mat1` (m×1), `g_q.mat1`, `g_k.mat1` and `params.json`.
    pub fn save(&self, dir: impl AsRef<Path>, meta: &SaraParamsMeta) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let v = DenseMatrix::from_raw(self.m(), 1, self.v.as_slice().to_vec());
        mat1::save(dir.join("v.mat1"), &v)?;
        mat1::save(dir.join("g_q.mat1"), &self.g_q)?;
        mat1::save(dir.join("g_k.mat1"), &self.g_k)?;
        std::fs::write(dir.join("params.json"), serde_json::to_string_pretty(meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, SaraParamsMeta)> {
        let dir = dir.as_ref();
        let meta: SaraParamsMeta = serde_json::from_slice(&std::fs::read(dir.join("params.json"))?)?;
        let v = mat1::load(dir.join("v.mat1"))?;
        if v.cols() != 1 {
            return Err(SaraError::Format(format!("v.mat1 must be m x 1, got {:?}", v.shape())));
        }
        let params = Self::new(
            DenseVector::new(v.into_vec())?,
            mat1::load(dir.join("g_q.mat1"))?,
            mat1::load(dir.join("g_k.mat1"))?,
        )?;
        if params.m() != meta.m || params.d() != meta.d {
            return Err(SaraError::Format(format!(
                "sidecar says m={}, d={} but matrices are m={}, d={}",
                meta.m,
                meta.d,
                params.m(),
                params.d()
            )));
        }
        Ok((params, meta))
    }
}

/// JSON sidecar stored next to persisted [`SaraParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaraParamsMeta {
    pub m: usize,
    pub d: usize,
    pub f: FeatureKind,
    /// The `A` used when the parameters came from the closed-form construction.
    pub a_if_constructed: Option<f64>,
}

#[derive(Clone, Debug)]
pub enum FeatureMapSpec {
    Identity { dim: usize },
    Elementwise { f: FeatureKind, dim: usize },
    Randomized { f: FeatureKind, projection: DenseMatrix },
    PositiveRf { projection: DenseMatrix },
    Sara { f: FeatureKind, side: Side, params: Arc<SaraParams> },
}

impl FeatureMapSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            FeatureMapSpec::Identity { dim } | FeatureMapSpec::Elementwise { dim, .. } => *dim,
            FeatureMapSpec::Randomized { projection, .. } | FeatureMapSpec::PositiveRf { projection } => {
                projection.cols()
            }
            FeatureMapSpec::Sara { params, .. } => params.d(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            FeatureMapSpec::Identity { dim } | FeatureMapSpec::Elementwise { dim, .. } => *dim,
            FeatureMapSpec::Randomized { projection, .. } | FeatureMapSpec::PositiveRf { projection } => {
                projection.rows()
            }
            FeatureMapSpec::Sara { params, .. } => params.m(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            FeatureMapSpec::Identity { .. } => "identity".into(),
            FeatureMapSpec::Elementwise { f, .. } => format!("elementwise-{f}"),
            FeatureMapSpec::Randomized { f, projection } => format!("randomized-{f}-m{}", projection.rows()),
            FeatureMapSpec::PositiveRf { projection } => format!("positive-rf-m{}", projection.rows()),
            FeatureMapSpec::Sara { f, params, .. } => format!("sara-{f}-m{}", params.m()),
        }
    }

    /// Query/key pair of SARA maps sharing `params`.
    pub fn sara_pair(f: FeatureKind, params: SaraParams) -> (FeatureMapSpec, FeatureMapSpec) {
        let params = Arc::new(params);
        (
            FeatureMapSpec::Sara {
                f,
                side: Side::Query,
                params: Arc::clone(&params),
            },
            FeatureMapSpec::Sara {
                f,
                side: Side::Key,
                params,
            },
        )
    }
}

/// Applies `spec` to every row of `z` (n×d), giving n×m features.
pub fn apply_feature_map(spec: &FeatureMapSpec, z: &DenseMatrix) -> Result<DenseMatrix> {
    apply_counted(spec, z, &mut FlopCounter::default())
}

pub(crate) fn apply_counted(
    spec: &FeatureMapSpec,
    z: &DenseMatrix,
    flops: &mut FlopCounter,
) -> Result<DenseMatrix> {
    if z.cols() != spec.input_dim() {
        return Err(shape_mismatch(
            "apply_feature_map input dim",
            spec.input_dim(),
            z.cols(),
        ));
    }
    let n = z.rows();
    let out = match spec {
        FeatureMapSpec::Identity { .. } => z.clone(),
        FeatureMapSpec::Elementwise { f, .. } => {
            flops.add((n * z.cols()) as u64);
            map_entries(z, |_, x| f.apply(x))
        }
        FeatureMapSpec::Randomized { f, projection } => {
            flops.add_matmul(n, z.cols(), projection.rows());
            flops.add((n * projection.rows()) as u64);
            let pre = z.matmul_transposed(projection)?;
            map_entries(&pre, |_, x| f.apply(x))
        }
        FeatureMapSpec::PositiveRf { projection } => {
            let m = projection.rows();
            flops.add_matmul(n, z.cols(), m);
            flops.add((2 * n * z.cols() + 2 * n * m) as u64);
            let pre = z.matmul_transposed(projection)?;
            let half_sq: Vec<f64> = z.row_iter().map(|r| 0.5 * numerics::dot(r, r)).collect();
            let scale = 1.0 / (m as f64).sqrt();
            // exp(-|z|²/2)·exp(g·z) folded into one exponent
            map_entries(&pre, |i, x| scale * (x - half_sq[i]).exp())
        }
        FeatureMapSpec::Sara { f, side, params } => {
            let g = params.projection(*side);
            flops.add_matmul(n, z.cols(), g.rows());
            flops.add((2 * n * g.rows()) as u64);
            let pre = z.matmul_transposed(g)?;
            let v = params.v.as_slice();
            let mut out = map_entries(&pre, |_, x| f.apply(x));
            for i in 0..n {
                out.row_mut(i).iter_mut().zip(v).for_each(|(o, vi)| *o *= vi);
            }
            out
        }
    };
    check_finite(&out)?;
    Ok(out)
}

fn map_entries(a: &DenseMatrix, f: impl Fn(usize, f64) -> f64) -> DenseMatrix {
    let cols = a.cols().max(1);
    let data = a
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, &x)| f(k / cols, x))
        .collect();
    DenseMatrix::from_raw(a.rows(), a.cols(), data)
}

fn check_finite(out: &DenseMatrix) -> Result<()> {
    match out.as_slice().iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(k) => Err(SaraError::Overflow {
            row: k / out.cols(),
            col: k % out.cols(),
        }),
    }
}

/// Closed-form SARA parameters for `f = exp` from a Gaussian `G` (m×d_QK) and
/// teacher projections `W_Q`, `W_K` (d×d_QK):
///
/// `G_Q = √(1-4A)·G·W_Qᵀ`, `G_K = √(1-4A)·G·W_Kᵀ`,
/// `v_i = (1-4A)^{d_QK/4}·exp(A·|g_i|²)`.
///
/// The projections are stored composed (m×d) so the maps act on raw
/// embeddings. With these parameters `φ_Q(x)ᵀφ_K(y) / (m·e^{r²})` is an
/// unbiased estimate of `exp(qᵀk)` when `|q| = |k| = r`. As `A → 0` the
/// construction degenerates to `v = 1` with unscaled projections, i.e. plain
/// randomized exp features; that boundary is excluded.
pub fn sara_from_theorem(
    g: &DenseMatrix,
    w_q: &DenseMatrix,
    w_k: &DenseMatrix,
    a: f64,
) -> Result<SaraParams> {
    if !(a < 0.0) {
        return Err(SaraError::NonNegativeA(a));
    }
    if w_q.shape() != w_k.shape() {
        return Err(shape_mismatch(
            "sara_from_theorem W_K",
            format!("{:?}", w_q.shape()),
            format!("{:?}", w_k.shape()),
        ));
    }
    let d_qk = g.cols();
    if w_q.cols() != d_qk {
        return Err(shape_mismatch("sara_from_theorem d_QK", d_qk, w_q.cols()));
    }
    let base = 1.0 - 4.0 * a;
    let c = base.sqrt();
    let g_q = g.matmul_transposed(w_q)?.scaled(c);
    let g_k = g.matmul_transposed(w_k)?.scaled(c);
    let prefactor = base.powf(d_qk as f64 / 4.0);
    let v = g
        .row_iter()
        .map(|row| prefactor * (a * numerics::dot(row, row)).exp())
        .collect();
    SaraParams::new(DenseVector::new(v)?, g_q, g_k)
}
