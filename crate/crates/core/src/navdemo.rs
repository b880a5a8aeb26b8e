//! Attention-driven action selection on synthetic scenes.
//!
//! Each target embedding scores every image patch through a kernel; the
//! scores weight per-patch base actions, or pick one action by top-k
//! truncated sampling. Kernels can be exact softmax or any feature-map pair,
//! which lets the demo measure how closely a linear-attention student
//! reproduces the spiky exact score rows.

use serde::{Deserialize, Serialize};

use crate::attention::{
    check_distribution, entropy, exact_softmax_attention, kernel_attention_linear,
    kernel_attention_quadratic_with, top_k_indices, AttentionLayerParams, EngineOptions,
};
use crate::error::{shape_mismatch, Result, SaraError};
use crate::feature_maps::FeatureMapSpec;
use crate::numerics::{dot, gaussian_matrix, norm, normalize_rows_to_radius, DenseMatrix, DenseVector, SeededRng};
use crate::uptrain::{uptrain_from, Batch, DistillationConfig, FixedBatches, TrainHistory};

const UNIT_TOL: f64 = 1e-9;

/// Patches with unit-norm keys, unit-norm targets and per-patch base actions.
/// Queries are `targets·W_Q` and keys `patch_keys·W_K`.
#[derive(Clone, Debug)]
pub struct Scene {
    pub patch_keys: DenseMatrix,
    pub targets: DenseMatrix,
    pub base_actions: DenseMatrix,
    pub layer: AttentionLayerParams,
}

impl Scene {
    pub fn new(
        patch_keys: DenseMatrix,
        targets: DenseMatrix,
        base_actions: DenseMatrix,
        layer: AttentionLayerParams,
    ) -> Result<Self> {
        if patch_keys.rows() == 0 || targets.rows() == 0 {
            return Err(SaraError::InvalidArgument("scene needs at least one patch and one target".into()));
        }
        if targets.cols() != patch_keys.cols() {
            return Err(shape_mismatch("scene targets", patch_keys.cols(), targets.cols()));
        }
        if base_actions.rows() != patch_keys.rows() {
            return Err(shape_mismatch("scene base actions", patch_keys.rows(), base_actions.rows()));
        }
        if layer.d() != patch_keys.cols() {
            return Err(shape_mismatch("scene layer", patch_keys.cols(), layer.d()));
        }
        for (name, m) in [("patch key", &patch_keys), ("target", &targets)] {
            if let Some((i, n)) = m.row_norms().into_iter().enumerate().find(|(_, n)| (n - 1.0).abs() > UNIT_TOL) {
                return Err(SaraError::InvalidArgument(format!("{name} {i} has norm {n}, expected 1")));
            }
        }
        Ok(Scene { patch_keys, targets, base_actions, layer })
    }

    pub fn n_patches(&self) -> usize {
        self.patch_keys.rows()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.rows()
    }

    /// The scene as a single distillation token set.
    pub fn batch(&self) -> Batch {
        Batch {
            xq: self.targets.clone(),
            xk: self.patch_keys.clone(),
            v: self.base_actions.clone(),
        }
    }

    fn target(&self, i: usize) -> Result<DenseMatrix> {
        if i >= self.n_targets() {
            return Err(SaraError::InvalidArgument(format!(
                "target index {i} out of range for {} targets",
                self.n_targets()
            )));
        }
        Ok(DenseMatrix::from_raw(1, self.targets.cols(), self.targets.row(i).to_vec()))
    }
}

/// Parameters of the clustered synthetic scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub patches: usize,
    pub targets: usize,
    pub d: usize,
    pub d_a: usize,
    pub clusters: usize,
    /// Spread of keys around their cluster direction.
    pub noise: f64,
    /// Weight of a direction shared by every cluster; larger values squeeze
    /// the embeddings into a narrower cone.
    pub anisotropy: f64,
    /// Query/key norm; the layer is `radius·I`.
    pub radius: f64,
    /// Smallest allowed ratio between a target's best and second-best exact
    /// kernel values.
    pub min_margin: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { patches: 64, targets: 8, d: 8, d_a: 2, clusters: 4, noise: 0.5, anisotropy: 1.0, radius: 2.0, min_margin: 1.25 }
    }
}

/// Keys scattered around a few cluster directions; each target sits near a
/// distinct patch so its best match is well defined.
pub fn synthetic_scene(config: &SceneConfig, rng: &SeededRng) -> Result<Scene> {
    let SceneConfig { patches, targets, d, d_a, clusters, noise, anisotropy, radius, min_margin } = *config;
    if clusters == 0 || targets > patches {
        return Err(SaraError::InvalidArgument(format!(
            "need clusters >= 1 and targets <= patches, got {clusters} clusters, {targets} targets, {patches} patches"
        )));
    }
    if !(noise >= 0.0 && anisotropy >= 0.0 && radius > 0.0 && min_margin >= 1.0) {
        return Err(SaraError::InvalidArgument(format!(
            "need noise, anisotropy >= 0, radius > 0 and min_margin >= 1; got {noise}, {anisotropy}, {radius}, {min_margin}"
        )));
    }
    let shared = normalize_rows_to_radius(&gaussian_matrix(&mut rng.substream("shared"), 1, d)?, 1.0)?;
    let raw = normalize_rows_to_radius(&gaussian_matrix(&mut rng.substream("centers"), clusters, d)?, 1.0)?;
    let centers = DenseMatrix::from_fn(clusters, d, |k, c| raw.get(k, c) + anisotropy * shared.get(0, c))?;
    let centers = normalize_rows_to_radius(&centers, 1.0)?;
    let jitter = gaussian_matrix(&mut rng.substream("key-noise"), patches, d)?;
    let keys = DenseMatrix::from_fn(patches, d, |j, c| centers.get(j % clusters, c) + noise * jitter.get(j, c))?;
    let keys = normalize_rows_to_radius(&keys, 1.0)?;

    // anchors are drawn without replacement; a target is kept only if its
    // best patch beats the runner-up by `min_margin`
    let mut pick = rng.substream("anchors");
    let wobble = gaussian_matrix(&mut rng.substream("target-noise"), patches, d)?;
    let mut pool: Vec<usize> = (0..patches).collect();
    let mut tgt = Vec::with_capacity(targets * d);
    let mut attempt = 0;
    while tgt.len() < targets * d {
        if pool.is_empty() {
            return Err(SaraError::InvalidArgument(format!(
                "only {} of {targets} targets reach margin {min_margin}",
                tgt.len() / d
            )));
        }
        let anchor = pool.swap_remove(pick.index(pool.len()));
        let raw: Vec<f64> = (0..d).map(|c| keys.get(anchor, c) + 0.1 * noise * wobble.get(attempt, c)).collect();
        attempt += 1;
        let n = norm(&raw);
        let t: Vec<f64> = raw.iter().map(|x| x / n).collect();
        let mut logits: Vec<f64> = keys.row_iter().map(|k| radius * radius * dot(&t, k)).collect();
        logits.sort_by(|a, b| b.total_cmp(a));
        if patches == 1 || (logits[0] - logits[1]).exp() >= min_margin {
            tgt.extend(t);
        }
    }
    let tgt = DenseMatrix::new(targets, d, tgt)?;

    let actions = gaussian_matrix(&mut rng.substream("actions"), patches, d_a)?;
    Scene::new(keys, tgt, actions, AttentionLayerParams::scaled_identity(d, radius))
}

/// How a target scores patches.
#[derive(Clone, Debug)]
pub enum KernelSpec {
    ExactSoftmax,
    /// Feature maps on both sides. SARA maps read the raw embeddings (their
    /// projections replace the layer's); every other map reads the layer's
    /// queries and keys.
    Features { phi_q: FeatureMapSpec, phi_k: FeatureMapSpec },
}

impl KernelSpec {
    pub fn features(phi_q: FeatureMapSpec, phi_k: FeatureMapSpec) -> Self {
        KernelSpec::Features { phi_q, phi_k }
    }

    pub fn label(&self) -> String {
        match self {
            KernelSpec::ExactSoftmax => "softmax".into(),
            KernelSpec::Features { phi_q, .. } => phi_q.label(),
        }
    }

    fn inputs(&self, scene: &Scene, xq: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        match self {
            KernelSpec::Features { phi_q: FeatureMapSpec::Sara { .. }, .. } => {
                Ok((xq.clone(), scene.patch_keys.clone()))
            }
            _ => Ok((scene.layer.queries(xq)?, scene.layer.keys(&scene.patch_keys)?)),
        }
    }

    /// Score rows for the given target embeddings.
    fn scores(&self, scene: &Scene, xq: &DenseMatrix) -> Result<DenseMatrix> {
        let (q, k) = self.inputs(scene, xq)?;
        let out = match self {
            KernelSpec::ExactSoftmax => exact_softmax_attention(&q, &k, &scene.base_actions)?,
            KernelSpec::Features { phi_q, phi_k } => {
                let opts = EngineOptions { reconstruct_scores: true, ..Default::default() };
                kernel_attention_quadratic_with(phi_q, phi_k, &q, &k, &scene.base_actions, opts)?
            }
        };
        Ok(out.scores.expect("score-producing engine"))
    }
}

/// Normalized kernel scores of one target over all patches.
pub fn action_distribution(scene: &Scene, target_index: usize, kernel: &KernelSpec) -> Result<DenseVector> {
    let xq = scene.target(target_index)?;
    let scores = kernel.scores(scene, &xq)?;
    Ok(DenseVector::from_raw(scores.into_vec()))
}

/// Score-weighted base action. Feature kernels go through the linear engine.
pub fn expected_action(scene: &Scene, target_index: usize, kernel: &KernelSpec) -> Result<DenseVector> {
    let xq = scene.target(target_index)?;
    let (q, k) = kernel.inputs(scene, &xq)?;
    let out = match kernel {
        KernelSpec::ExactSoftmax => exact_softmax_attention(&q, &k, &scene.base_actions)?,
        KernelSpec::Features { phi_q, phi_k } => kernel_attention_linear(phi_q, phi_k, &q, &k, &scene.base_actions)?,
    };
    Ok(DenseVector::from_raw(out.values.into_vec()))
}

/// Draws one index among the `k` highest scores, proportionally to the
/// renormalized scores.
pub fn topk_truncated_sample(scores: &DenseVector, k: usize, rng: &mut SeededRng) -> Result<usize> {
    if k == 0 {
        return Err(SaraError::InvalidArgument("k must be >= 1".into()));
    }
    let row = scores.as_slice();
    check_distribution(row)?;
    let top = top_k_indices(row, k);
    let mass: f64 = top.iter().map(|&j| row[j]).sum();
    if !(mass > 0.0) {
        return Ok(top[0]);
    }
    let mut u = rng.uniform() * mass;
    for &j in &top {
        u -= row[j];
        if u < 0.0 {
            return Ok(j);
        }
    }
    Ok(*top.iter().rev().find(|&&j| row[j] > 0.0).unwrap_or(&top[0]))
}

/// Agreement of one kernel's score rows with the exact softmax rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub label: String,
    pub tv_distance: Vec<f64>,
    pub argmax_agree: Vec<bool>,
    /// Kernel entropy minus reference entropy; positive means flatter.
    pub entropy_gap: Vec<f64>,
}

impl AgreementReport {
    pub fn mean_tv(&self) -> f64 {
        mean(&self.tv_distance)
    }

    pub fn argmax_rate(&self) -> f64 {
        self.argmax_agree.iter().filter(|&&a| a).count() as f64 / self.argmax_agree.len().max(1) as f64
    }

    pub fn mean_entropy_gap(&self) -> f64 {
        mean(&self.entropy_gap)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn compare_kernels(scene: &Scene, kernels: &[KernelSpec]) -> Result<Vec<AgreementReport>> {
    let reference = KernelSpec::ExactSoftmax.scores(scene, &scene.targets)?;
    kernels
        .iter()
        .map(|kernel| {
            let scores = kernel.scores(scene, &scene.targets)?;
            let mut report = AgreementReport {
                label: kernel.label(),
                tv_distance: Vec::new(),
                argmax_agree: Vec::new(),
                entropy_gap: Vec::new(),
            };
            for (p, q) in reference.row_iter().zip(scores.row_iter()) {
                let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
                report.tv_distance.push(tv.min(1.0));
                report.argmax_agree.push(top_k_indices(p, 1) == top_k_indices(q, 1));
                report.entropy_gap.push(entropy(q) - entropy(p));
            }
            Ok(report)
        })
        .collect()
}

/// Distills SARA parameters against the scene's own layer, training on
/// `train_scenes` (the layer must match).
pub fn distill_for_scenes(
    config: &DistillationConfig,
    layer: &AttentionLayerParams,
    init: crate::feature_maps::SaraParams,
    train_scenes: &[Scene],
) -> Result<TrainHistory> {
    if train_scenes.is_empty() {
        return Err(SaraError::InvalidArgument("need at least one training scene".into()));
    }
    let mut data = FixedBatches(train_scenes.iter().map(Scene::batch).collect());
    uptrain_from(config, layer, init, &mut data)
}
