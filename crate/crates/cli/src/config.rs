//! JSON run configuration shared by the `verify`, `bench` and `demo`
//! subcommands. Unknown fields are rejected; every section is optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use sara_core::feature_maps::FeatureKind;
use sara_core::navdemo::SceneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subcommand {
    Verify,
    Bench,
    Uptrain,
    Demo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub d: usize,
    pub d_qk: usize,
    pub d_v: usize,
    pub m: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { d: 64, d_qk: 64, d_v: 64, m: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Allowed `|mean − K|` in Monte Carlo standard errors.
    pub mean_sigmas: f64,
    pub variance_rel: f64,
    /// Absolute variance tolerance used when the closed form is below `1e-6`.
    pub variance_abs: f64,
    /// Allowed excess of the tail frequency over `1/t²`, in binomial standard errors.
    pub tail_sigmas: f64,
    /// Target sup-norm error of the attention matrix.
    pub delta: f64,
    /// Agreement targets of the distilled student in the demo.
    pub demo_tv: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            mean_sigmas: 4.0,
            variance_rel: 0.05,
            variance_abs: 1e-8,
            tail_sigmas: 3.0,
            delta: 0.2,
            demo_tv: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    pub mean_trials: usize,
    pub mean_features: Vec<usize>,
    pub variance_trials: usize,
    pub variance_features: usize,
    pub tail_trials: usize,
    pub tail_features: usize,
    pub tail_t: Vec<f64>,
    pub theorem_seeds: usize,
    pub theorem_tokens: usize,
    pub theorem_d_qk: usize,
    pub theorem_radius: f64,
    pub theorem_a: f64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            mean_trials: 200_000,
            mean_features: vec![1, 8, 64],
            variance_trials: 200_000,
            variance_features: 8,
            tail_trials: 50_000,
            tail_features: 8,
            tail_t: vec![2.0, 4.0, 8.0],
            theorem_seeds: 20,
            theorem_tokens: 8,
            theorem_d_qk: 4,
            theorem_radius: 0.5,
            theorem_a: -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub warmup: usize,
    pub repeats: usize,
    /// Let the engines split query rows across threads.
    pub parallel: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings { warmup: 3, repeats: 11, parallel: false }
    }
}

/// Distillation of the demo's SARA student against the scene layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoDistill {
    pub f: FeatureKind,
    pub m: usize,
    /// `A` of the closed-form initialization.
    pub a: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
}

impl Default for DemoDistill {
    fn default() -> Self {
        DemoDistill { f: FeatureKind::Exp, m: 256, a: -0.5, learning_rate: 0.3, momentum: 0.9, steps: 3000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSettings {
    pub scene: SceneConfig,
    /// Feature counts of the positive random-feature baselines.
    pub random_features: Vec<usize>,
    pub distill: DemoDistill,
    /// Top-k truncation of the sampled actions.
    pub top_k: usize,
}

impl Default for DemoSettings {
    fn default() -> Self {
        DemoSettings {
            scene: SceneConfig { d: 64, ..SceneConfig::default() },
            random_features: vec![64, 512],
            distill: DemoDistill::default(),
            top_k: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When present, must match the subcommand being run.
    pub subcommand: Option<Subcommand>,
    pub seed: u64,
    pub dims: Dims,
    /// Sequence lengths of the benchmark sweep.
    pub grid: Vec<usize>,
    pub tolerances: Tolerances,
    pub out: Option<PathBuf>,
    /// Feature kinds exercised by the engine checks.
    pub features: Vec<FeatureKind>,
    pub verify: VerifySettings,
    pub bench: BenchSettings,
    pub demo: DemoSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            subcommand: None,
            seed: 0,
            dims: Dims::default(),
            grid: vec![32, 64, 128, 256, 512, 1024, 2048],
            tolerances: Tolerances::default(),
            out: None,
            features: FeatureKind::ALL.to_vec(),
            verify: VerifySettings::default(),
            bench: BenchSettings::default(),
            demo: DemoSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self, running: Subcommand) -> anyhow::Result<()> {
        if let Some(s) = self.subcommand {
            if s != running {
                bail!("config is for {s:?}, not {running:?}");
            }
        }
        let Dims { d, d_qk, d_v, m } = self.dims;
        for (name, v) in [("dims.d", d), ("dims.d_qk", d_qk), ("dims.d_v", d_v), ("dims.m", m)] {
            if v < 1 {
                bail!("{name} must be >= 1");
            }
        }
        if running == Subcommand::Bench {
            if self.grid.is_empty() || self.grid.contains(&0) {
                bail!("grid must be a nonempty list of positive lengths");
            }
            if self.bench.repeats < 5 {
                bail!("bench.repeats must be >= 5, got {}", self.bench.repeats);
            }
        }
        if self.demo.top_k < 1 {
            bail!("demo.top_k must be >= 1");
        }
        Ok(())
    }
}

/// Parses JSON, reporting the field path and line/column of any error.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> anyhow::Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        anyhow::anyhow!("at `{path}` (line {}, column {}): {inner}", inner.line(), inner.column())
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_json(&text).with_context(|| format!("invalid config {}", path.display()))
}
