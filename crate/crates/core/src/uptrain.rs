//! Distillation of a frozen softmax-attention teacher into a SARA
//! linear-attention student.
//!
//! The student's trainable state is `(v, G_Q, G_K)`; the teacher projections
//! are only read. Gradients are derived by hand (reverse mode through the
//! feature maps and either the Ψ/Γ accumulation or the score matrix) and
//! checked against central finite differences in the tests.

use serde::{Deserialize, Serialize};

use crate::attention::{
    self, check_distribution, exact_softmax_attention, kernel_attention_linear_with,
    AttentionLayerParams, AttentionOutput, EngineOptions, DENOMINATOR_EPS,
};
use crate::error::{shape_mismatch, Result, SaraError};
use crate::feature_maps::{sara_from_theorem, FeatureKind, FeatureMapSpec, SaraParams};
use crate::numerics::{self, gaussian_matrix, DenseMatrix, DenseVector, SeededRng};

/// Loss above which a run is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitKind {
    /// Closed-form construction with the given `A < 0` (meaningful for `f = exp`).
    TheoremConstruction { a: f64 },
    /// `v = 1`, projections with i.i.d. `N(0, σ²)` entries; `σ` defaults to `1/√d`.
    GaussianScaled {
        #[serde(default)]
        sigma_init: Option<f64>,
    },
    /// `v = 1`, `G_Q = W_Qᵀ`, `G_K = W_Kᵀ` (forces `m = d_QK`).
    TeacherProjections,
}

impl Default for InitKind {
    fn default() -> Self {
        InitKind::GaussianScaled { sigma_init: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared difference of the attention outputs.
    #[default]
    OutputMse,
    /// Mean over rows of `KL(teacher_row ‖ student_row)`.
    RowKl,
}

fn default_lr() -> f64 {
    1e-2
}
fn default_momentum() -> f64 {
    0.9
}
fn default_one() -> usize {
    1
}
fn default_radius() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillationConfig {
    pub f: FeatureKind,
    #[serde(default)]
    pub init: InitKind,
    #[serde(default)]
    pub loss: LossKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub steps: usize,
    /// Token sets averaged per step.
    #[serde(default = "default_one")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    /// Feature count; ignored for `TeacherProjections`.
    pub m: usize,
    /// Tokens per set.
    pub tokens: usize,
    /// Embedding width (also `d_QK` of the synthetic teacher).
    pub d: usize,
    pub d_v: usize,
    /// Norm of the teacher's queries and keys for unit-norm tokens.
    #[serde(default = "default_radius")]
    pub teacher_radius: f64,
    /// Reuse the same `batch` token sets at every step instead of fresh ones.
    #[serde(default)]
    pub fixed_data: bool,
    /// Added to every student normalizer; 0 keeps dead rows an error.
    #[serde(default)]
    pub denom_stabilizer: f64,
}

impl DistillationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SaraError::InvalidArgument(msg));
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be nonnegative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch < 1 || self.tokens < 1 || self.d < 1 || self.d_v < 1 {
            return bad("batch, tokens, d and d_v must all be >= 1".into());
        }
        if self.m < 1 && self.init != InitKind::TeacherProjections {
            return bad("m must be >= 1".into());
        }
        if !(self.denom_stabilizer >= 0.0 && self.denom_stabilizer.is_finite()) {
            return bad(format!("denom_stabilizer must be nonnegative, got {}", self.denom_stabilizer));
        }
        if self.denom_stabilizer > 0.0 && self.loss == LossKind::RowKl {
            return bad("row_kl needs exact row normalization; drop denom_stabilizer".into());
        }
        if let InitKind::TheoremConstruction { a } = self.init {
            if !(a < 0.0) {
                return Err(SaraError::NonNegativeA(a));
            }
        }
        Ok(())
    }

    /// Synthetic teacher for this config: random orthogonal projections of
    /// norm `teacher_radius`.
    pub fn teacher(&self) -> Result<AttentionLayerParams> {
        AttentionLayerParams::random_orthogonal(
            &SeededRng::new(self.seed).substream("teacher"),
            self.d,
            self.teacher_radius,
        )
    }

    pub fn data(&self) -> SyntheticTokens {
        SyntheticTokens {
            rng: SeededRng::new(self.seed).substream("data"),
            tokens: self.tokens,
            d: self.d,
            d_v: self.d_v,
            fixed: self.fixed_data,
        }
    }
}

/// One token set: queries attend from `xq` to `xk`, weighting rows of `v`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub xq: DenseMatrix,
    pub xk: DenseMatrix,
    pub v: DenseMatrix,
}

pub trait DataGenerator {
    /// Token set `set` of training step `step`.
    fn batch(&mut self, step: usize, set: usize) -> Result<Batch>;
}

/// Unit-norm Gaussian tokens with Gaussian values; self-attention.
#[derive(Clone, Debug)]
pub struct SyntheticTokens {
    pub rng: SeededRng,
    pub tokens: usize,
    pub d: usize,
    pub d_v: usize,
    pub fixed: bool,
}

impl DataGenerator for SyntheticTokens {
    fn batch(&mut self, step: usize, set: usize) -> Result<Batch> {
        let label = if self.fixed {
            format!("set-{set}")
        } else {
            format!("step-{step}/set-{set}")
        };
        let root = self.rng.substream(&label);
        let raw = gaussian_matrix(&mut root.substream("x"), self.tokens, self.d)?;
        let x = numerics::normalize_rows_to_radius(&raw, 1.0)?;
        let v = gaussian_matrix(&mut root.substream("v"), self.tokens, self.d_v)?;
        Ok(Batch { xq: x.clone(), xk: x, v })
    }
}

/// Fixed list of batches cycled by set index; the step is ignored.
pub struct FixedBatches(pub Vec<Batch>);

impl DataGenerator for FixedBatches {
    fn batch(&mut self, _step: usize, set: usize) -> Result<Batch> {
        Ok(self.0[set % self.0.len()].clone())
    }
}

/// Softmax attention with `Q = X·W_Q`, `K = X·W_K`.
pub fn teacher_forward(layer: &AttentionLayerParams, x: &DenseMatrix, v: &DenseMatrix) -> Result<AttentionOutput> {
    teacher_forward_cross(layer, x, x, v)
}

pub fn teacher_forward_cross(
    layer: &AttentionLayerParams,
    xq: &DenseMatrix,
    xk: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<AttentionOutput> {
    exact_softmax_attention(&layer.queries(xq)?, &layer.keys(xk)?, v)
}

/// SARA maps on both sides fed to the linear engine. `with_scores` rebuilds
/// the score matrix through the quadratic engine (needed for `RowKl`).
pub fn student_forward(
    params: &SaraParams,
    f: FeatureKind,
    xq: &DenseMatrix,
    xk: &DenseMatrix,
    v: &DenseMatrix,
    with_scores: bool,
) -> Result<AttentionOutput> {
    student_forward_with(params, f, xq, xk, v, with_scores, 0.0)
}

pub fn student_forward_with(
    params: &SaraParams,
    f: FeatureKind,
    xq: &DenseMatrix,
    xk: &DenseMatrix,
    v: &DenseMatrix,
    with_scores: bool,
    denom_stabilizer: f64,
) -> Result<AttentionOutput> {
    let (phi_q, phi_k) = FeatureMapSpec::sara_pair(f, params.clone());
    let opts = EngineOptions {
        reconstruct_scores: with_scores,
        denom_stabilizer,
        ..Default::default()
    };
    kernel_attention_linear_with(&phi_q, &phi_k, xq, xk, v, opts)
}

pub fn distill_loss(kind: LossKind, student: &AttentionOutput, teacher: &AttentionOutput) -> Result<f64> {
    match kind {
        LossKind::OutputMse => {
            let (s, t) = (&student.values, &teacher.values);
            if s.shape() != t.shape() {
                return Err(shape_mismatch(
                    "distill_loss values",
                    format!("{:?}", t.shape()),
                    format!("{:?}", s.shape()),
                ));
            }
            let n = s.as_slice().len().max(1) as f64;
            Ok(s.as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n)
        }
        LossKind::RowKl => {
            let missing = || SaraError::InvalidArgument("RowKl needs student and teacher scores".into());
            let s = student.scores.as_ref().ok_or_else(missing)?;
            let t = teacher.scores.as_ref().ok_or_else(missing)?;
            row_kl(t, s)
        }
    }
}

/// Mean over rows of `KL(p_row ‖ q_row)` with `0·ln 0 = 0`.
pub fn row_kl(p: &DenseMatrix, q: &DenseMatrix) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(shape_mismatch(
            "row_kl",
            format!("{:?}", p.shape()),
            format!("{:?}", q.shape()),
        ));
    }
    let mut total = 0.0;
    for (pr, qr) in p.row_iter().zip(q.row_iter()) {
        check_distribution(pr)?;
        check_distribution(qr)?;
        for (&a, &b) in pr.iter().zip(qr) {
            if a > 0.0 {
                total += a * (a / b).ln();
            }
        }
    }
    Ok(total / p.rows().max(1) as f64)
}

/// Gradient of the distillation loss with the shape of [`SaraParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct SaraGrad {
    pub v: Vec<f64>,
    pub g_q: DenseMatrix,
    pub g_k: DenseMatrix,
}

impl SaraGrad {
    fn zeros_like(p: &SaraParams) -> Self {
        Self {
            v: vec![0.0; p.m()],
            g_q: DenseMatrix::zeros(p.m(), p.d()),
            g_k: DenseMatrix::zeros(p.m(), p.d()),
        }
    }

    fn add_scaled(&mut self, other: &SaraGrad, s: f64) {
        self.v.iter_mut().zip(&other.v).for_each(|(a, b)| *a += s * b);
        axpy(self.g_q.as_mut_slice(), other.g_q.as_slice(), s);
        axpy(self.g_k.as_mut_slice(), other.g_k.as_slice(), s);
    }

    pub fn norm(&self) -> f64 {
        (numerics::dot(&self.v, &self.v)
            + numerics::dot(self.g_q.as_slice(), self.g_q.as_slice())
            + numerics::dot(self.g_k.as_slice(), self.g_k.as_slice()))
        .sqrt()
    }

    /// Flattened as `v`, then `G_Q`, then `G_K` (row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.v.clone();
        out.extend_from_slice(self.g_q.as_slice());
        out.extend_from_slice(self.g_k.as_slice());
        out
    }
}

fn axpy(y: &mut [f64], x: &[f64], s: f64) {
    y.iter_mut().zip(x).for_each(|(a, b)| *a += s * b);
}

/// Same flattening as [`SaraGrad::flatten`].
pub fn flatten_params(p: &SaraParams) -> Vec<f64> {
    let mut out = p.v.as_slice().to_vec();
    out.extend_from_slice(p.g_q.as_slice());
    out.extend_from_slice(p.g_k.as_slice());
    out
}

pub fn unflatten_params(flat: &[f64], m: usize, d: usize) -> Result<SaraParams> {
    if flat.len() != m + 2 * m * d {
        return Err(shape_mismatch("unflatten_params", m + 2 * m * d, flat.len()));
    }
    SaraParams::new(
        DenseVector::new(flat[..m].to_vec())?,
        DenseMatrix::new(m, d, flat[m..m + m * d].to_vec())?,
        DenseMatrix::new(m, d, flat[m + m * d..].to_vec())?,
    )
}

/// Cached side of the student forward pass.
struct SideCache {
    pre: DenseMatrix,
    act: DenseMatrix,
    feat: DenseMatrix,
}

fn side_forward(x: &DenseMatrix, g: &DenseMatrix, v: &[f64], f: FeatureKind) -> Result<SideCache> {
    let pre = x.matmul_transposed(g)?;
    let act_data: Vec<f64> = pre.as_slice().iter().map(|&a| f.apply(a)).collect();
    let m = g.rows();
    let feat_data: Vec<f64> = act_data
        .iter()
        .enumerate()
        .map(|(k, &h)| h * v[k % m])
        .collect();
    if let Some(k) = feat_data.iter().position(|x| !x.is_finite()) {
        return Err(SaraError::Overflow {
            row: k / m,
            col: k % m,
        });
    }
    Ok(SideCache {
        act: DenseMatrix::from_raw(pre.rows(), m, act_data),
        feat: DenseMatrix::from_raw(pre.rows(), m, feat_data),
        pre,
    })
}

/// Pulls feature gradients back to `v` and the projection on one side.
fn side_backward(
    cache: &SideCache,
    g_feat: &DenseMatrix,
    x: &DenseMatrix,
    v: &[f64],
    f: FeatureKind,
    grad_v: &mut [f64],
) -> Result<DenseMatrix> {
    let m = v.len();
    let mut g_pre = DenseMatrix::zeros(cache.pre.rows(), m);
    for i in 0..cache.pre.rows() {
        let (pre, act, gf) = (cache.pre.row(i), cache.act.row(i), g_feat.row(i));
        let out = g_pre.row_mut(i);
        for l in 0..m {
            grad_v[l] += gf[l] * act[l];
            out[l] = gf[l] * v[l] * f.derivative(pre[l]);
        }
    }
    // dL/dG = g_preᵀ · x
    g_pre.transpose().matmul(x)
}

/// Loss and exact gradient for a single token set.
pub fn loss_and_grad(
    params: &SaraParams,
    f: FeatureKind,
    batch: &Batch,
    teacher: &AttentionOutput,
    kind: LossKind,
) -> Result<(f64, SaraGrad)> {
    loss_and_grad_with(params, f, batch, teacher, kind, 0.0)
}

/// [`loss_and_grad`] with an additive normalizer stabilizer.
pub fn loss_and_grad_with(
    params: &SaraParams,
    f: FeatureKind,
    batch: &Batch,
    teacher: &AttentionOutput,
    kind: LossKind,
    denom_stabilizer: f64,
) -> Result<(f64, SaraGrad)> {
    let v = params.v.as_slice();
    let q = side_forward(&batch.xq, &params.g_q, v, f)?;
    let k = side_forward(&batch.xk, &params.g_k, v, f)?;
    let (n_q, m) = (q.feat.rows(), params.m());

    let (loss, g_fq, g_fk) = match kind {
        LossKind::OutputMse => output_mse_backward(&q.feat, &k.feat, &batch.v, &teacher.values, denom_stabilizer)?,
        LossKind::RowKl => {
            let t = teacher
                .scores
                .as_ref()
                .ok_or_else(|| SaraError::InvalidArgument("RowKl needs teacher scores".into()))?;
            row_kl_backward(&q.feat, &k.feat, t, denom_stabilizer)?
        }
    };
    debug_assert_eq!(g_fq.shape(), (n_q, m));

    let mut grad = SaraGrad::zeros_like(params);
    grad.g_q = side_backward(&q, &g_fq, &batch.xq, v, f, &mut grad.v)?;
    grad.g_k = side_backward(&k, &g_fk, &batch.xk, v, f, &mut grad.v)?;
    Ok((loss, grad))
}

type Backward = (f64, DenseMatrix, DenseMatrix);

/// Output MSE through the Ψ/Γ accumulation.
fn output_mse_backward(
    fq: &DenseMatrix,
    fk: &DenseMatrix,
    values: &DenseMatrix,
    target: &DenseMatrix,
    stabilizer: f64,
) -> Result<Backward> {
    let (n_q, m, d_v) = (fq.rows(), fq.cols(), values.cols());
    if target.shape() != (n_q, d_v) {
        return Err(shape_mismatch(
            "output_mse target",
            format!("({n_q}, {d_v})"),
            format!("{:?}", target.shape()),
        ));
    }
    let acc = attention::accumulate(fk, values);
    let scale = 1.0 / (n_q * d_v).max(1) as f64;

    let mut loss = 0.0;
    let mut g_fq = DenseMatrix::zeros(n_q, m);
    let mut g_psi_t = DenseMatrix::zeros(m, d_v);
    let mut g_gamma = vec![0.0; m];
    let mut out = vec![0.0; d_v];
    let mut g_num = vec![0.0; d_v];
    for i in 0..n_q {
        let phi = fq.row(i);
        let den = numerics::dot(&acc.gamma, phi) + stabilizer;
        if den <= DENOMINATOR_EPS {
            return Err(SaraError::DegenerateRow { row: i, denominator: den });
        }
        out.iter_mut().for_each(|o| *o = 0.0);
        for (l, &p) in phi.iter().enumerate() {
            axpy(&mut out, acc.psi_t.row(l), p);
        }
        out.iter_mut().for_each(|o| *o /= den);

        let mut g_den = 0.0;
        for c in 0..d_v {
            let diff = out[c] - target.get(i, c);
            loss += diff * diff;
            let g_out = 2.0 * diff * scale;
            g_num[c] = g_out / den;
            g_den -= g_out * out[c] / den;
        }
        let gq = g_fq.row_mut(i);
        for l in 0..m {
            gq[l] = numerics::dot(acc.psi_t.row(l), &g_num) + acc.gamma[l] * g_den;
            axpy(g_psi_t.row_mut(l), &g_num, phi[l]);
            g_gamma[l] += phi[l] * g_den;
        }
    }

    let mut g_fk = DenseMatrix::zeros(fk.rows(), m);
    for j in 0..fk.rows() {
        let val = values.row(j);
        let gk = g_fk.row_mut(j);
        for l in 0..m {
            gk[l] = numerics::dot(g_psi_t.row(l), val) + g_gamma[l];
        }
    }
    Ok((loss * scale, g_fq, g_fk))
}

/// Row KL through the explicit score matrix.
fn row_kl_backward(fq: &DenseMatrix, fk: &DenseMatrix, teacher: &DenseMatrix, stabilizer: f64) -> Result<Backward> {
    let (n_q, n_k) = (fq.rows(), fk.rows());
    if teacher.shape() != (n_q, n_k) {
        return Err(shape_mismatch(
            "row_kl teacher scores",
            format!("({n_q}, {n_k})"),
            format!("{:?}", teacher.shape()),
        ));
    }
    let p = fq.matmul_transposed(fk)?;
    let scale = 1.0 / n_q.max(1) as f64;
    let mut loss = 0.0;
    let mut g_p = DenseMatrix::zeros(n_q, n_k);
    for i in 0..n_q {
        let (pr, tr) = (p.row(i), teacher.row(i));
        check_distribution(tr)?;
        let den: f64 = pr.iter().sum::<f64>() + stabilizer;
        if den <= DENOMINATOR_EPS {
            return Err(SaraError::DegenerateRow { row: i, denominator: den });
        }
        let t_sum: f64 = tr.iter().sum();
        let gr = g_p.row_mut(i);
        for j in 0..n_k {
            let t = tr[j];
            gr[j] = scale * t_sum / den;
            if t > 0.0 {
                loss += t * (t * den / pr[j]).ln();
                gr[j] -= scale * t / pr[j];
            }
        }
    }
    let g_fq = g_p.matmul(fk)?;
    let g_fk = g_p.transpose().matmul(fq)?;
    Ok((loss * scale, g_fq, g_fk))
}

/// Exact gradient of the loss on one token set; see [`loss_and_grad`].
pub fn grad_params(
    params: &SaraParams,
    f: FeatureKind,
    batch: &Batch,
    teacher: &AttentionOutput,
    kind: LossKind,
) -> Result<SaraGrad> {
    loss_and_grad(params, f, batch, teacher, kind).map(|(_, g)| g)
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    /// Loss at each step, measured before that step's update.
    pub loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub final_params: SaraParams,
}

impl TrainHistory {
    /// `step,loss,grad_norm` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,grad_norm\n");
        for (i, (l, g)) in self.loss.iter().zip(&self.grad_norm).enumerate() {
            out.push_str(&format!("{i},{l:e},{g:e}\n"));
        }
        out
    }

    /// Trailing moving average with window `w`, one value per full window.
    pub fn moving_average(&self, w: usize) -> Vec<f64> {
        if w == 0 || self.loss.len() < w {
            return Vec::new();
        }
        self.loss.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
    }
}

pub fn initial_params(config: &DistillationConfig, layer: &AttentionLayerParams) -> Result<SaraParams> {
    let rng = SeededRng::new(config.seed).substream("init");
    match config.init {
        InitKind::TheoremConstruction { a } => {
            let g = gaussian_matrix(&mut rng.substream("g"), config.m, layer.d_qk())?;
            sara_from_theorem(&g, &layer.w_q, &layer.w_k, a)
        }
        InitKind::GaussianScaled { sigma_init } => {
            let sigma = sigma_init.unwrap_or(1.0 / (layer.d() as f64).sqrt());
            SaraParams::gaussian(&rng, config.m, layer.d(), sigma)
        }
        InitKind::TeacherProjections => SaraParams::from_projections(&layer.w_q, &layer.w_k),
    }
}

/// Mean loss of `params` over the given token sets.
pub fn evaluate_loss(
    params: &SaraParams,
    f: FeatureKind,
    layer: &AttentionLayerParams,
    batches: &[Batch],
    kind: LossKind,
    denom_stabilizer: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        let teacher = teacher_forward_cross(layer, &b.xq, &b.xk, &b.v)?;
        let student = student_forward_with(params, f, &b.xq, &b.xk, &b.v, kind == LossKind::RowKl, denom_stabilizer)?;
        total += distill_loss(kind, &student, &teacher)?;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Gradient descent with heavy-ball momentum on `(v, G_Q, G_K)`:
/// `u ← μ·u + ∇L`, `θ ← θ − η·u`.
pub fn uptrain(
    config: &DistillationConfig,
    layer: &AttentionLayerParams,
    data: &mut dyn DataGenerator,
) -> Result<TrainHistory> {
    let params = initial_params(config, layer)?;
    uptrain_from(config, layer, params, data)
}

pub fn uptrain_from(
    config: &DistillationConfig,
    layer: &AttentionLayerParams,
    init: SaraParams,
    data: &mut dyn DataGenerator,
) -> Result<TrainHistory> {
    config.validate()?;
    if init.d() != layer.d() {
        return Err(shape_mismatch("uptrain params", layer.d(), init.d()));
    }
    let (m, d) = (init.m(), init.d());
    let mut theta = flatten_params(&init);
    let mut velocity = vec![0.0; theta.len()];
    let mut history = TrainHistory {
        loss: Vec::with_capacity(config.steps),
        grad_norm: Vec::with_capacity(config.steps),
        final_params: init,
    };
    let weight = 1.0 / config.batch as f64;

    for step in 0..config.steps {
        let params = unflatten_params(&theta, m, d)?;
        let mut grad = SaraGrad::zeros_like(&params);
        let mut loss = 0.0;
        for set in 0..config.batch {
            let b = data.batch(step, set)?;
            let teacher = teacher_forward_cross(layer, &b.xq, &b.xk, &b.v)?;
            let (l, g) = match loss_and_grad_with(&params, config.f, &b, &teacher, config.loss, config.denom_stabilizer) {
                Ok(r) => r,
                Err(SaraError::Overflow { .. }) => return Err(SaraError::DivergenceDetected { step, loss: f64::INFINITY }),
                Err(e) => return Err(e),
            };
            loss += weight * l;
            grad.add_scaled(&g, weight);
        }
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(SaraError::DivergenceDetected { step, loss });
        }
        history.loss.push(loss);
        history.grad_norm.push(grad.norm());

        for ((t, u), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(grad.flatten()) {
            *u = config.momentum * *u + g;
            *t -= config.learning_rate * *u;
        }
    }
    history.final_params = unflatten_params(&theta, m, d)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(f: FeatureKind) -> DistillationConfig {
        DistillationConfig {
            f,
            init: InitKind::default(),
            loss: LossKind::OutputMse,
            learning_rate: 1e-2,
            momentum: 0.9,
            steps: 5,
            batch: 1,
            seed: 3,
            m: 4,
            tokens: 6,
            d: 3,
            d_v: 2,
            teacher_radius: 1.0,
            fixed_data: false,
            denom_stabilizer: 0.0,
        }
    }

    #[test]
    fn zero_projections_give_uniform_teacher() {
        let layer = AttentionLayerParams::new(DenseMatrix::zeros(3, 2), DenseMatrix::zeros(3, 2)).unwrap();
        let b = config(FeatureKind::Exp).data().batch(0, 0).unwrap();
        let out = teacher_forward(&layer, &b.xq, &b.v).unwrap();
        for &s in out.scores.unwrap().as_slice() {
            assert!((s - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_teacher_matches_softmax() {
        let layer = AttentionLayerParams::scaled_identity(3, 1.0);
        let x = DenseMatrix::identity(3);
        let v = DenseMatrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let t = teacher_forward(&layer, &x, &v).unwrap();
        let s = exact_softmax_attention(&x, &x, &v).unwrap();
        assert_eq!(t.values, s.values);
    }

    #[test]
    fn teacher_is_composition() {
        let cfg = DistillationConfig {
            tokens: 8,
            ..config(FeatureKind::Exp)
        };
        let layer = cfg.teacher().unwrap();
        let b = cfg.data().batch(0, 0).unwrap();
        let t = teacher_forward(&layer, &b.xq, &b.v).unwrap();
        let q = b.xq.matmul(&layer.w_q).unwrap();
        let k = b.xq.matmul(&layer.w_k).unwrap();
        let manual = exact_softmax_attention(&q, &k, &b.v).unwrap();
        assert_eq!(t.values, manual.values);
    }

    #[test]
    fn loss_examples() {
        let out = |values: DenseMatrix, scores: Option<DenseMatrix>| AttentionOutput {
            denominators: DenseVector::filled(values.rows(), 1.0),
            values,
            scores,
            flops: Default::default(),
        };
        let a = out(DenseMatrix::identity(2), Some(DenseMatrix::identity(2)));
        let z = out(DenseMatrix::zeros(2, 2), None);
        assert_eq!(distill_loss(LossKind::OutputMse, &a, &a).unwrap(), 0.0);
        assert_eq!(distill_loss(LossKind::RowKl, &a, &a).unwrap(), 0.0);
        assert_eq!(distill_loss(LossKind::OutputMse, &a, &z).unwrap(), 0.5);
        assert!(distill_loss(LossKind::RowKl, &a, &z).is_err());

        let one_hot = DenseMatrix::from_rows(&[[0.0, 0.0, 1.0, 0.0]]).unwrap();
        let uniform = DenseMatrix::from_rows(&[[0.25; 4]]).unwrap();
        let kl = row_kl(&one_hot, &uniform).unwrap();
        assert!((kl - 4f64.ln()).abs() < 1e-15);
        assert_eq!(row_kl(&uniform, &one_hot).unwrap(), f64::INFINITY);
        let bad = DenseMatrix::from_rows(&[[0.5, 0.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(row_kl(&bad, &uniform), Err(SaraError::NotADistribution(_))));
    }

    #[test]
    fn analytic_loss_matches_engine_loss() {
        let cfg = config(FeatureKind::Exp);
        let layer = cfg.teacher().unwrap();
        let params = initial_params(&cfg, &layer).unwrap();
        let b = cfg.data().batch(0, 0).unwrap();
        let teacher = teacher_forward(&layer, &b.xq, &b.v).unwrap();
        for kind in [LossKind::OutputMse, LossKind::RowKl] {
            let (l, _) = loss_and_grad(&params, cfg.f, &b, &teacher, kind).unwrap();
            let student = student_forward(&params, cfg.f, &b.xq, &b.xk, &b.v, true).unwrap();
            let reference = distill_loss(kind, &student, &teacher).unwrap();
            assert!((l - reference).abs() <= 1e-12 * reference.abs().max(1e-12), "{kind:?}: {l} vs {reference}");
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        // teacher outputs taken from the student itself
        let cfg = config(FeatureKind::Exp);
        let layer = cfg.teacher().unwrap();
        let params = initial_params(&cfg, &layer).unwrap();
        let b = cfg.data().batch(0, 0).unwrap();
        let student = student_forward(&params, cfg.f, &b.xq, &b.xk, &b.v, true).unwrap();
        for kind in [LossKind::OutputMse, LossKind::RowKl] {
            let (l, g) = loss_and_grad(&params, cfg.f, &b, &student, kind).unwrap();
            assert!(l.abs() < 1e-15);
            assert!(g.norm() < 1e-12, "{kind:?}: {}", g.norm());
        }
    }

    #[test]
    fn dead_relu_rows_get_no_gradient() {
        // feature 1 never fires on either side; feature 0 keeps normalizers positive
        let x = DenseMatrix::from_rows(&[[1.0, 0.5], [0.8, 0.2], [0.3, 0.9]]).unwrap();
        let params = SaraParams::new(
            DenseVector::new(vec![1.0, 1.0]).unwrap(),
            DenseMatrix::from_rows(&[[1.0, 1.0], [-1.0, -1.0]]).unwrap(),
            DenseMatrix::from_rows(&[[1.0, 0.5], [-2.0, -1.0]]).unwrap(),
        )
        .unwrap();
        let v = DenseMatrix::from_rows(&[[1.0], [-1.0], [0.5]]).unwrap();
        let b = Batch { xq: x.clone(), xk: x.clone(), v };
        let layer = AttentionLayerParams::scaled_identity(2, 1.0);
        let teacher = teacher_forward(&layer, &x, &b.v).unwrap();
        let g = grad_params(&params, FeatureKind::Relu, &b, &teacher, LossKind::OutputMse).unwrap();
        assert!(g.g_q.row(1).iter().all(|&x| x == 0.0));
        assert!(g.g_k.row(1).iter().all(|&x| x == 0.0));
        assert_eq!(g.v[1], 0.0);
        // a single live feature cancels in Ψφ/Γφ on the query side, but not on the key side
        assert!(g.g_k.row(0).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let cfg = DistillationConfig {
            learning_rate: 0.0,
            fixed_data: true,
            steps: 6,
            ..config(FeatureKind::Relu)
        };
        let layer = cfg.teacher().unwrap();
        let h = uptrain(&cfg, &layer, &mut cfg.data()).unwrap();
        assert!(h.loss.iter().all(|&l| l.to_bits() == h.loss[0].to_bits()));
        assert_eq!(h.final_params, initial_params(&cfg, &layer).unwrap());
    }

    #[test]
    fn config_validation() {
        let ok = config(FeatureKind::Exp);
        assert!(ok.validate().is_ok());
        assert!(DistillationConfig { steps: 0, ..ok.clone() }.validate().is_err());
        assert!(DistillationConfig { momentum: 1.0, ..ok.clone() }.validate().is_err());
        assert!(DistillationConfig { learning_rate: -1.0, ..ok.clone() }.validate().is_err());
        assert!(matches!(
            DistillationConfig {
                init: InitKind::TheoremConstruction { a: 0.1 },
                ..ok
            }
            .validate(),
            Err(SaraError::NonNegativeA(_))
        ));
    }

    #[test]
    fn config_json_rejects_unknown_fields() {
        let good = r#"{"f":"relu","steps":3,"m":4,"tokens":6,"d":3,"d_v":2,
                       "init":{"kind":"gaussian_scaled"}}"#;
        let cfg: DistillationConfig = serde_json::from_str(good).unwrap();
        assert_eq!(cfg.learning_rate, 1e-2);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.init, InitKind::GaussianScaled { sigma_init: None });
        let bad = r#"{"f":"relu","steps":3,"m":4,"tokens":6,"d":3,"d_v":2,"stpes":1}"#;
        assert!(serde_json::from_str::<DistillationConfig>(bad).is_err());
    }

    #[test]
    fn divergence_is_detected() {
        let cfg = DistillationConfig {
            learning_rate: 1e4,
            momentum: 0.0,
            steps: 50,
            ..config(FeatureKind::Exp)
        };
        let layer = cfg.teacher().unwrap();
        assert!(matches!(
            uptrain(&cfg, &layer, &mut cfg.data()),
            Err(SaraError::DivergenceDetected { .. }) | Err(SaraError::DegenerateRow { .. })
        ));
    }

    #[test]
    fn csv_has_header_and_one_row_per_step() {
        let cfg = DistillationConfig {
            steps: 1,
            ..config(FeatureKind::Square)
        };
        let layer = cfg.teacher().unwrap();
        let h = uptrain(&cfg, &layer, &mut cfg.data()).unwrap();
        let csv = h.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "step,loss,grad_norm");
        assert!(lines[1].starts_with("0,"));
    }
}
