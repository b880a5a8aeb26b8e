//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use serde_json::json;

use sara_cli::bench::{crossover, ratio, run_bench, Engine};
use sara_cli::config::{DemoDistill, RunConfig};
use sara_cli::demo::run_demo;
use sara_cli::verify::{mean_checks, tail_checks, theorem_check, variance_checks};
use sara_core::attention::{kernel_attention_linear, kernel_attention_quadratic, AttentionLayerParams};
use sara_core::feature_maps::{FeatureKind, FeatureMapSpec, SaraParams};
use sara_core::navdemo::SceneConfig;
use sara_core::numerics::{gaussian_matrix, normalize_rows_to_radius, DenseMatrix, DenseVector, SeededRng};
use sara_core::theory::{theorem_m, TheoremSetting};
use sara_core::uptrain::{
    distill_loss, evaluate_loss, flatten_params, grad_params, initial_params, student_forward, teacher_forward,
    unflatten_params, uptrain, Batch, DataGenerator, DistillationConfig, InitKind, LossKind,
};
use sara_core::SaraError;

struct Outcome {
    pass: bool,
    summary: String,
    /// Serialized measurements, compared bit-for-bit across reruns.
    report: String,
}

type Criterion = fn() -> anyhow::Result<Outcome>;

// 1 ------------------------------------------------------------------------

fn relative_gap(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| {
            let scale = x.abs().max(y.abs());
            if scale == 0.0 { 0.0 } else { (x - y).abs() / scale }
        })
        .fold(0.0, f64::max)
}

fn feature_pairs(f: FeatureKind, d: usize, rng: &SeededRng) -> anyhow::Result<Vec<(FeatureMapSpec, FeatureMapSpec)>> {
    let elem = FeatureMapSpec::Elementwise { f, dim: d };
    let params = SaraParams::gaussian(&rng.substream("sara"), 6, d, 0.7)?;
    Ok(vec![(elem.clone(), elem), FeatureMapSpec::sara_pair(f, params)])
}

fn oracle_equivalence() -> anyhow::Result<Outcome> {
    let d = 4;
    let sizes = [1usize, 7, 64];
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    for f in FeatureKind::ALL {
        for seed in 0..20u64 {
            let root = SeededRng::new(seed).substream(f.name());
            for &mq in &sizes {
                for &nk in &sizes {
                    let rng = root.indexed("mq", mq as u64).indexed("nk", nk as u64);
                    // shifted inputs keep every ReLU normalizer positive
                    let shift = |m: DenseMatrix| DenseMatrix::new(m.rows(), m.cols(), m.as_slice().iter().map(|x| 0.5 * x + 0.5).collect());
                    let q = shift(gaussian_matrix(&mut rng.substream("q"), mq, d)?)?;
                    let k = shift(gaussian_matrix(&mut rng.substream("k"), nk, d)?)?;
                    let v_pos = DenseMatrix::new(nk, 3, rng.substream("vp").normal_vector(nk * 3).as_slice().iter().map(|x| 1.0 + 0.25 * x.tanh()).collect())?;
                    for (phi_q, phi_k) in feature_pairs(f, d, &rng)? {
                        let lin = kernel_attention_linear(&phi_q, &phi_k, &q, &k, &v_pos);
                        let quad = kernel_attention_quadratic(&phi_q, &phi_k, &q, &k, &v_pos);
                        match (lin, quad) {
                            (Ok(a), Ok(b)) => worst = worst.max(relative_gap(&a.values, &b.values)),
                            (Err(SaraError::DegenerateRow { row: r1, .. }), Err(SaraError::DegenerateRow { row: r2, .. })) if r1 == r2 => {}
                            (a, b) => anyhow::bail!("engines disagree on failure: {:?} vs {:?}", a.err(), b.err()),
                        }
                        cases += 1;
                    }
                }
            }
        }
    }
    let pass = worst <= 1e-10;
    Ok(Outcome {
        pass,
        summary: format!("{cases} cases, worst entrywise relative gap {worst:.2e} (limit 1e-10)"),
        report: json!({"cases": cases, "worst": worst}).to_string(),
    })
}

// 2-5 ----------------------------------------------------------------------

fn lemma1_unbiasedness() -> anyhow::Result<Outcome> {
    let checks = mean_checks(&RunConfig::default())?;
    let worst = checks.iter().map(|c| c.z).fold(0.0, f64::max);
    let trials = checks.iter().map(|c| c.report.trials).min().unwrap_or(0);
    Ok(Outcome {
        pass: checks.iter().all(|c| c.pass) && checks.len() == 15 && trials >= 200_000,
        summary: format!("{} (r, θ, m) cases at {trials} trials, worst |mean − K| = {worst:.2} stderr (limit 4)", checks.len()),
        report: serde_json::to_string(&checks)?,
    })
}

fn lemma2_variance() -> anyhow::Result<Outcome> {
    let checks = variance_checks(&RunConfig::default())?;
    let parts: Vec<String> = checks
        .iter()
        .map(|c| {
            if c.closed_form < 1e-6 {
                format!("θ={:.2}: |Δ|={:.1e}", c.theta, (c.empirical - c.closed_form).abs())
            } else {
                format!("θ={:.2}: rel {:.3}", c.theta, (c.empirical - c.closed_form).abs() / c.closed_form)
            }
        })
        .collect();
    let has_zero = checks.iter().any(|c| c.theta == std::f64::consts::PI);
    Ok(Outcome {
        pass: checks.iter().all(|c| c.pass) && has_zero,
        summary: parts.join(", "),
        report: serde_json::to_string(&checks)?,
    })
}

fn lemma2_tail() -> anyhow::Result<Outcome> {
    let checks = tail_checks(&RunConfig::default())?;
    let parts: Vec<String> = checks
        .iter()
        .map(|c| format!("t={}: {:.4} ≤ {:.4}", c.t, c.report.empirical_tail, c.report.bound))
        .collect();
    Ok(Outcome {
        pass: checks.iter().all(|c| c.pass) && checks.iter().all(|c| c.report.trials >= 50_000),
        summary: parts.join(", "),
        report: serde_json::to_string(&checks)?,
    })
}

fn theorem_end_to_end() -> anyhow::Result<Outcome> {
    let check = theorem_check(&RunConfig::default())?;
    let r = &check.report;
    let s = &r.setting;
    let shape_ok = s.m_queries == 8 && s.n_keys == 8 && (s.radius - 0.5).abs() < 1e-12 && r.errors_per_seed.len() == 20;
    Ok(Outcome {
        pass: check.pass && shape_ok,
        summary: format!(
            "m={} median sup error {:.4} (δ=0.2), {:.0}% of seeds within δ; reference m={}",
            r.m_used,
            r.median_error,
            100.0 * r.fraction_within_delta,
            check.reference_m
        ),
        report: serde_json::to_string(&check)?,
    })
}

// 6 ------------------------------------------------------------------------

const FD_H: f64 = 1e-5;

fn gradient_instance(f: FeatureKind, seed: u64) -> anyhow::Result<(SaraParams, Batch, AttentionLayerParams)> {
    let root = SeededRng::new(seed);
    let layer = AttentionLayerParams::random_orthogonal(&root.substream("layer"), 3, 1.0)?;
    let mut x = gaussian_matrix(&mut root.substream("x"), 6, 3)?;
    let mut g_q = gaussian_matrix(&mut root.substream("gq"), 4, 3)?.scaled(0.6);
    let mut g_k = gaussian_matrix(&mut root.substream("gk"), 4, 3)?.scaled(0.6);
    if f == FeatureKind::Relu {
        let map = |m: &DenseMatrix, g: fn(f64) -> f64| DenseMatrix::new(m.rows(), m.cols(), m.as_slice().iter().map(|&v| g(v)).collect());
        x = map(&x, |v| v.abs() + 0.2)?;
        g_q = map(&g_q, |v| v + 0.5)?;
        g_k = map(&g_k, |v| v + 0.5)?;
    }
    let x = normalize_rows_to_radius(&x, 1.0)?;
    let v = gaussian_matrix(&mut root.substream("v"), 6, 2)?;
    let scales = root.substream("scale").normal_vector(4);
    let vv = DenseVector::new(scales.as_slice().iter().map(|s| 0.8 + 0.3 * s).collect())?;
    Ok((SaraParams::new(vv, g_q, g_k)?, Batch { xq: x.clone(), xk: x, v }, layer))
}

fn gradient_check() -> anyhow::Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut partials = 0usize;
    let mut failures = 0usize;
    for f in FeatureKind::ALL {
        for kind in [LossKind::OutputMse, LossKind::RowKl] {
            let (params, batch, layer) = gradient_instance(f, 1)?;
            let teacher = teacher_forward(&layer, &batch.xq, &batch.v)?;
            let analytic = grad_params(&params, f, &batch, &teacher, kind)?.flatten();
            let theta = flatten_params(&params);
            let loss_at = |flat: &[f64]| -> anyhow::Result<f64> {
                let p = unflatten_params(flat, params.m(), params.d())?;
                let s = student_forward(&p, f, &batch.xq, &batch.xk, &batch.v, kind == LossKind::RowKl)?;
                Ok(distill_loss(kind, &s, &teacher)?)
            };
            for k in 0..theta.len() {
                let (mut plus, mut minus) = (theta.clone(), theta.clone());
                plus[k] += FD_H;
                minus[k] -= FD_H;
                let fd = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * FD_H);
                let tol = (1e-4 * analytic[k].abs().max(fd.abs())).max(1e-7);
                let ratio = (analytic[k] - fd).abs() / tol;
                worst = worst.max(ratio);
                failures += usize::from(ratio > 1.0);
                partials += 1;
            }
        }
    }
    Ok(Outcome {
        pass: failures == 0,
        summary: format!("{partials} partials over 3 kinds × 2 losses, worst error/tolerance {worst:.3}"),
        report: json!({"partials": partials, "worst": worst, "failures": failures}).to_string(),
    })
}

// 7 ------------------------------------------------------------------------

fn relu_config() -> DistillationConfig {
    DistillationConfig {
        f: FeatureKind::Relu,
        init: InitKind::default(),
        loss: LossKind::OutputMse,
        learning_rate: 0.1,
        momentum: 0.9,
        steps: 500,
        batch: 1,
        seed: 1,
        m: 8,
        tokens: 8,
        d: 8,
        d_v: 4,
        teacher_radius: 1.0,
        fixed_data: true,
        denom_stabilizer: 1e-6,
    }
}

fn uptraining() -> anyhow::Result<Outcome> {
    let cfg = relu_config();
    let layer = cfg.teacher()?;
    let w_before = (layer.w_q.clone(), layer.w_k.clone());
    let history = uptrain(&cfg, &layer, &mut cfg.data())?;
    let batches = vec![cfg.data().batch(0, 0)?];
    let final_loss = evaluate_loss(&history.final_params, cfg.f, &layer, &batches, cfg.loss, cfg.denom_stabilizer)?;
    let adapt = final_loss / history.loss[0];
    let teacher_frozen = w_before == (layer.w_q.clone(), layer.w_k.clone());

    let exp_cfg = DistillationConfig {
        f: FeatureKind::Exp,
        tokens: 8,
        d: 4,
        m: 1,
        teacher_radius: 0.5,
        fixed_data: true,
        denom_stabilizer: 0.0,
        ..cfg.clone()
    };
    let exp_layer = exp_cfg.teacher()?;
    let batch = exp_cfg.data().batch(0, 0)?;
    let q = exp_layer.queries(&batch.xq)?;
    let k = exp_layer.keys(&batch.xk)?;
    let kernel: Vec<f64> = q.matmul_transposed(&k)?.as_slice().iter().map(|x| x.exp()).collect();
    let m = theorem_m(&TheoremSetting {
        tau: kernel.iter().copied().fold(f64::INFINITY, f64::min),
        rho: kernel.iter().copied().fold(0.0, f64::max),
        delta: 0.2,
        m_queries: 8,
        n_keys: 8,
        radius: 0.5,
        a: -1.0,
    })?;
    let step0 = |init: InitKind| -> anyhow::Result<f64> {
        let c = DistillationConfig { init, m, ..exp_cfg.clone() };
        let p = initial_params(&c, &exp_layer)?;
        Ok(evaluate_loss(&p, FeatureKind::Exp, &exp_layer, std::slice::from_ref(&batch), LossKind::OutputMse, 0.0)?)
    };
    let theorem_loss = step0(InitKind::TheoremConstruction { a: -1.0 })?;
    let random_loss = step0(InitKind::default())?;
    let advantage = random_loss / theorem_loss;

    Ok(Outcome {
        pass: adapt <= 0.1 && advantage >= 10.0 && teacher_frozen,
        summary: format!(
            "ReLU m=d=8: final/step-0 OutputMSE {adapt:.4} (limit 0.1); exp step-0 loss random/closed-form {advantage:.1}× at m={m} (limit 10×)"
        ),
        report: json!({
            "relu_step0": history.loss[0], "relu_final": final_loss, "relu_history": history.loss,
            "exp_m": m, "theorem_loss": theorem_loss, "random_loss": random_loss
        })
        .to_string(),
    })
}

// 8 ------------------------------------------------------------------------

fn navdemo_agreement() -> anyhow::Result<Outcome> {
    let mut config = RunConfig::default();
    config.demo.scene = SceneConfig { d: 8, patches: 64, ..SceneConfig::default() };
    config.demo.random_features = vec![64];
    config.demo.distill = DemoDistill::default();
    let report = run_demo(&config)?;
    let student = report.student();
    let relu = report.summary_for("elementwise-relu").expect("relu baseline");
    let pass = report.pass
        && student.mean_tv <= 0.05
        && student.argmax_rate == 1.0
        && relu.mean_entropy_gap > 0.0
        && report.scene.patches == 64;
    Ok(Outcome {
        pass,
        summary: format!(
            "distilled SARA mean TV {:.4}, argmax {:.0}%; ReLU mean TV {:.3}, entropy gap {:+.3}",
            student.mean_tv,
            100.0 * student.argmax_rate,
            relu.mean_tv,
            relu.mean_entropy_gap
        ),
        report: serde_json::to_string(&report)?,
    })
}

// 9 ------------------------------------------------------------------------

fn scaling_shape() -> anyhow::Result<Outcome> {
    let mut config = RunConfig::default();
    config.grid = vec![32, 64, 128, 256, 512, 1024, 2048];
    let records = run_bench(&config, &[Engine::Quadratic, Engine::Linear], false)?;
    let flops = |e| ratio(&records, e, 1024, 2048, |r| r.flops).unwrap_or(f64::NAN);
    let wall = |e| ratio(&records, e, 1024, 2048, |r| r.wall_time_ns).unwrap_or(f64::NAN);
    let (fl, fq, wl, wq) = (flops(Engine::Linear), flops(Engine::Quadratic), wall(Engine::Linear), wall(Engine::Quadratic));
    let cross = crossover(&records);
    let pass = (1.9..=2.1).contains(&fl)
        && (3.9..=4.1).contains(&fq)
        && (1.5..=2.8).contains(&wl)
        && (3.0..=5.5).contains(&wq)
        && cross.is_some();
    Ok(Outcome {
        pass,
        summary: format!(
            "flop ratios linear {fl:.3}, quadratic {fq:.3}; wall ratios linear {wl:.2}, quadratic {wq:.2}; linear faster from N={}",
            cross.map_or("never".to_string(), |n| n.to_string())
        ),
        report: String::new(),
    })
}

// 10 -----------------------------------------------------------------------

const DETERMINISTIC: [Criterion; 8] = [
    oracle_equivalence,
    lemma1_unbiasedness,
    lemma2_variance,
    lemma2_tail,
    theorem_end_to_end,
    gradient_check,
    uptraining,
    navdemo_agreement,
];

fn main() -> ExitCode {
    let names = [
        "oracle equivalence",
        "lemma 1 unbiasedness",
        "lemma 2 variance",
        "lemma 2 tail",
        "end-to-end approximation",
        "gradient check",
        "up-training adaptation",
        "navdemo agreement",
        "scaling shape",
    ];
    let budgets = [10, 60, 60, 60, 60, 60, 300, 300, 120].map(Duration::from_secs);
    let criteria: Vec<Criterion> = DETERMINISTIC.iter().copied().chain([scaling_shape as Criterion]).collect();

    let mut all_pass = true;
    let mut first_reports = Vec::new();
    for (i, run) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let (pass, summary, report) = match outcome {
            Ok(o) => (o.pass && elapsed <= budgets[i], o.summary, Some(o.report)),
            Err(e) => (false, format!("error: {e:#}"), None),
        };
        all_pass &= pass;
        println!(
            "[{}] {}. {}: {} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            names[i],
            summary,
            elapsed.as_secs_f64()
        );
        if i < DETERMINISTIC.len() {
            first_reports.push(report);
        }
    }

    let start = Instant::now();
    let mut mismatched = Vec::new();
    for (i, run) in DETERMINISTIC.iter().enumerate() {
        let again = run().ok().map(|o| o.report);
        if again.is_none() || again != first_reports[i] {
            mismatched.push(i + 1);
        }
    }
    let pass = mismatched.is_empty();
    all_pass &= pass;
    println!(
        "[{}] 10. determinism: {} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        if pass { "criteria 1-8 reproduced bit-identical reports".to_string() } else { format!("reports differ for criteria {mismatched:?}") },
        start.elapsed().as_secs_f64()
    );

    if all_pass { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
