//! Estimator and end-to-end approximation checks with a JSON report.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use sara_core::attention::AttentionLayerParams;
use sara_core::numerics::{gaussian_matrix, normalize_rows_to_radius, DenseVector, SeededRng};
use sara_core::theory::{
    chebyshev_tail_check, mc_unbiasedness, theorem_end_to_end, theorem_m, variance_closed_form, EstimatorReport,
    TailReport, TheoremReport, TheoremSetting,
};

use crate::config::RunConfig;

/// `(r, θ)` pairs for the mean checks.
pub const MEAN_SETTINGS: [(f64, f64); 5] = [(0.5, 0.0), (0.5, PI / 2.0), (1.0, PI / 2.0), (1.0, 2.0 * PI / 3.0), (0.8, 5.0 * PI / 6.0)];
/// `(r, θ)` pairs for the variance checks; `θ = π` has zero variance.
pub const VARIANCE_SETTINGS: [(f64, f64); 3] = [(0.5, PI / 2.0), (1.0, 2.0 * PI / 3.0), (1.0, PI)];
/// `(r, θ)` of the tail checks.
pub const TAIL_SETTING: (f64, f64) = (1.0, PI / 2.0);

/// Vectors of norm `r` at angle `theta` in the first two coordinates of R⁴.
pub fn pair(r: f64, theta: f64) -> (DenseVector, DenseVector) {
    let x = DenseVector::new(vec![r, 0.0, 0.0, 0.0]).expect("finite");
    let y = DenseVector::new(vec![r * theta.cos(), r * theta.sin(), 0.0, 0.0]).expect("finite");
    (x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCheck {
    pub r: f64,
    pub theta: f64,
    pub report: EstimatorReport,
    /// `|mean − K| / stderr`.
    pub z: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceCheck {
    pub r: f64,
    pub theta: f64,
    pub m: usize,
    pub closed_form: f64,
    pub empirical: f64,
    pub trials: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailCheck {
    pub r: f64,
    pub theta: f64,
    pub m: usize,
    pub t: f64,
    pub report: TailReport,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub report: TheoremReport,
    /// Feature count of the reference setting `ρ/τ = 2, δ = 0.5, M = N = 4, r = 1, A = −1`.
    pub reference_m: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub lemma1: Vec<MeanCheck>,
    pub lemma2_variance: Vec<VarianceCheck>,
    pub lemma2_tail: Vec<TailCheck>,
    pub theorem1: TheoremCheck,
    pub pass: bool,
}

pub fn mean_checks(config: &RunConfig) -> anyhow::Result<Vec<MeanCheck>> {
    let root = SeededRng::new(config.seed).substream("lemma1");
    let mut out = Vec::new();
    for (i, &(r, theta)) in MEAN_SETTINGS.iter().enumerate() {
        let (x, y) = pair(r, theta);
        for &m in &config.verify.mean_features {
            let rng = root.indexed("setting", i as u64).indexed("m", m as u64);
            let report = mc_unbiasedness(&x, &y, m, config.verify.mean_trials, &rng)?;
            let diff = (report.mc_mean - report.target).abs();
            let z = if report.mc_stderr > 0.0 { diff / report.mc_stderr } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
            let pass = diff <= config.tolerances.mean_sigmas * report.mc_stderr;
            out.push(MeanCheck { r, theta, report, z, pass });
        }
    }
    Ok(out)
}

pub fn variance_checks(config: &RunConfig) -> anyhow::Result<Vec<VarianceCheck>> {
    let root = SeededRng::new(config.seed).substream("lemma2-variance");
    let m = config.verify.variance_features;
    let tol = config.tolerances;
    let mut out = Vec::new();
    for (i, &(r, theta)) in VARIANCE_SETTINGS.iter().enumerate() {
        let (x, y) = pair(r, theta);
        let closed = variance_closed_form(&x, &y, m)?;
        let report = mc_unbiasedness(&x, &y, m, config.verify.variance_trials, &root.indexed("setting", i as u64))?;
        let empirical = report.mc_variance;
        let pass = if closed < 1e-6 {
            (empirical - closed).abs() <= tol.variance_abs
        } else {
            (empirical - closed).abs() <= tol.variance_rel * closed
        };
        out.push(VarianceCheck { r, theta, m, closed_form: closed, empirical, trials: report.trials, pass });
    }
    Ok(out)
}

pub fn tail_checks(config: &RunConfig) -> anyhow::Result<Vec<TailCheck>> {
    let root = SeededRng::new(config.seed).substream("lemma2-tail");
    let (r, theta) = TAIL_SETTING;
    let (x, y) = pair(r, theta);
    let m = config.verify.tail_features;
    let mut out = Vec::new();
    for (i, &t) in config.verify.tail_t.iter().enumerate() {
        let report = chebyshev_tail_check(&x, &y, m, t, config.verify.tail_trials, &root.indexed("t", i as u64))?;
        let pass = report.empirical_tail <= report.bound + config.tolerances.tail_sigmas * report.stderr;
        out.push(TailCheck { r, theta, m, t, report, pass });
    }
    Ok(out)
}

pub fn theorem_check(config: &RunConfig) -> anyhow::Result<TheoremCheck> {
    let v = &config.verify;
    let root = SeededRng::new(config.seed).substream("theorem1");
    let layer = AttentionLayerParams::random_orthogonal(&root.substream("layer"), v.theorem_d_qk, 1.0)?;
    let tokens = |label: &str| -> anyhow::Result<_> {
        let raw = gaussian_matrix(&mut root.substream(label), v.theorem_tokens, v.theorem_d_qk)?;
        Ok(normalize_rows_to_radius(&raw, v.theorem_radius)?)
    };
    let (xq, xk) = (tokens("queries")?, tokens("keys")?);
    let seeds: Vec<u64> = (0..v.theorem_seeds as u64).collect();
    let report = theorem_end_to_end(config.tolerances.delta, v.theorem_a, &layer, &xq, &xk, &seeds)?;
    let reference_m = theorem_m(&TheoremSetting {
        tau: 1.0,
        rho: 2.0,
        delta: 0.5,
        m_queries: 4,
        n_keys: 4,
        radius: 1.0,
        a: -1.0,
    })?;
    let pass = report.median_error <= config.tolerances.delta && reference_m == 303;
    Ok(TheoremCheck { report, reference_m, pass })
}

pub fn run_verify(config: &RunConfig) -> anyhow::Result<VerifyReport> {
    let lemma1 = mean_checks(config)?;
    let lemma2_variance = variance_checks(config)?;
    let lemma2_tail = tail_checks(config)?;
    let theorem1 = theorem_check(config)?;
    let pass = lemma1.iter().all(|c| c.pass)
        && lemma2_variance.iter().all(|c| c.pass)
        && lemma2_tail.iter().all(|c| c.pass)
        && theorem1.pass;
    Ok(VerifyReport { seed: config.seed, lemma1, lemma2_variance, lemma2_tail, theorem1, pass })
}
