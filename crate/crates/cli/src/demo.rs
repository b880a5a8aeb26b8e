//! Exact vs approximate attention control on a synthetic scene.

use serde::{Deserialize, Serialize};

use sara_core::feature_maps::{FeatureKind, FeatureMapSpec, SaraParams};
use sara_core::navdemo::{
    action_distribution, compare_kernels, distill_for_scenes, synthetic_scene, topk_truncated_sample,
    AgreementReport, KernelSpec, Scene, SceneConfig,
};
use sara_core::numerics::{gaussian_matrix, SeededRng};
use sara_core::uptrain::{initial_params, DistillationConfig, InitKind, LossKind};

use crate::config::{DemoSettings, RunConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSummary {
    pub label: String,
    pub mean_tv: f64,
    pub argmax_rate: f64,
    pub mean_entropy_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub seed: u64,
    pub scene: SceneConfig,
    pub reports: Vec<AgreementReport>,
    pub summary: Vec<KernelSummary>,
    pub student_label: String,
    pub distill_loss_first: f64,
    pub distill_loss_last: f64,
    /// Patch picked per target by top-k sampling from the exact scores.
    pub sampled_patches: Vec<usize>,
    /// Mean TV within tolerance and every argmax matched.
    pub student_meets_target: bool,
    /// Every emitted score row is a distribution.
    pub pass: bool,
}

impl DemoReport {
    pub fn student(&self) -> &KernelSummary {
        self.summary.iter().find(|s| s.label == self.student_label).expect("student is always compared")
    }

    pub fn summary_for(&self, label: &str) -> Option<&KernelSummary> {
        self.summary.iter().find(|s| s.label == label)
    }
}

/// Distills a SARA student on `scene` with the demo settings.
pub fn distill_student(settings: &DemoSettings, scene: &Scene, seed: u64) -> anyhow::Result<(SaraParams, f64, f64)> {
    let dist = &settings.distill;
    let init = if dist.f == FeatureKind::Exp {
        InitKind::TheoremConstruction { a: dist.a }
    } else {
        InitKind::default()
    };
    let cfg = DistillationConfig {
        f: dist.f,
        init,
        loss: LossKind::RowKl,
        learning_rate: dist.learning_rate,
        momentum: dist.momentum,
        steps: dist.steps,
        batch: 1,
        seed,
        m: dist.m,
        tokens: scene.n_patches(),
        d: settings.scene.d,
        d_v: settings.scene.d_a,
        teacher_radius: settings.scene.radius,
        fixed_data: true,
        denom_stabilizer: 0.0,
    };
    let params = initial_params(&cfg, &scene.layer)?;
    let history = distill_for_scenes(&cfg, &scene.layer, params, std::slice::from_ref(scene))?;
    let first = history.loss[0];
    let last = *history.loss.last().expect("steps >= 1");
    Ok((history.final_params, first, last))
}

pub fn run_demo(config: &RunConfig) -> anyhow::Result<DemoReport> {
    let settings = &config.demo;
    let root = SeededRng::new(config.seed).substream("demo");
    let scene = synthetic_scene(&settings.scene, &root.substream("scene"))?;
    let d = settings.scene.d;

    let mut kernels = vec![
        KernelSpec::features(
            FeatureMapSpec::Elementwise { f: FeatureKind::Relu, dim: d },
            FeatureMapSpec::Elementwise { f: FeatureKind::Relu, dim: d },
        ),
        KernelSpec::features(
            FeatureMapSpec::Elementwise { f: FeatureKind::Exp, dim: d },
            FeatureMapSpec::Elementwise { f: FeatureKind::Exp, dim: d },
        ),
    ];
    for &m in &settings.random_features {
        let projection = gaussian_matrix(&mut root.indexed("positive-rf", m as u64), m, d)?;
        let phi = FeatureMapSpec::PositiveRf { projection };
        kernels.push(KernelSpec::features(phi.clone(), phi));
    }
    let (params, first, last) = distill_student(settings, &scene, config.seed)?;
    let (phi_q, phi_k) = FeatureMapSpec::sara_pair(settings.distill.f, params);
    let student = KernelSpec::features(phi_q, phi_k);
    let student_label = format!("{}-distilled", student.label());
    kernels.push(student);

    let mut reports = compare_kernels(&scene, &kernels)?;
    reports.last_mut().expect("student pushed").label = student_label.clone();

    let mut valid = true;
    let mut sampler = root.substream("sampling");
    let mut sampled_patches = Vec::with_capacity(scene.n_targets());
    for i in 0..scene.n_targets() {
        let scores = action_distribution(&scene, i, &KernelSpec::ExactSoftmax)?;
        sampled_patches.push(topk_truncated_sample(&scores, settings.top_k, &mut sampler)?);
        for kernel in &kernels {
            let s = action_distribution(&scene, i, kernel)?;
            let total: f64 = s.as_slice().iter().sum();
            valid &= s.as_slice().iter().all(|&p| p >= 0.0) && (total - 1.0).abs() <= 1e-10;
        }
    }

    let summary: Vec<KernelSummary> = reports
        .iter()
        .map(|r| KernelSummary {
            label: r.label.clone(),
            mean_tv: r.mean_tv(),
            argmax_rate: r.argmax_rate(),
            mean_entropy_gap: r.mean_entropy_gap(),
        })
        .collect();
    let s = summary.last().expect("student summary");
    let student_meets_target = s.mean_tv <= config.tolerances.demo_tv && s.argmax_rate == 1.0;
    Ok(DemoReport {
        seed: config.seed,
        scene: settings.scene.clone(),
        reports,
        summary,
        student_label,
        distill_loss_first: first,
        distill_loss_last: last,
        sampled_patches,
        student_meets_target,
        pass: valid,
    })
}
