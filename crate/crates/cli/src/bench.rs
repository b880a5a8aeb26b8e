//! Timing sweep of the quadratic and linear engines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use sara_core::attention::{kernel_attention_linear_with, kernel_attention_quadratic_with, EngineOptions};
use sara_core::feature_maps::FeatureMapSpec;
use sara_core::numerics::{gaussian_matrix, normalize_rows_to_radius, SeededRng};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Quadratic,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EngineChoice {
    Quadratic,
    Linear,
    Both,
}

impl EngineChoice {
    pub fn engines(self) -> Vec<Engine> {
        match self {
            EngineChoice::Quadratic => vec![Engine::Quadratic],
            EngineChoice::Linear => vec![Engine::Linear],
            EngineChoice::Both => vec![Engine::Quadratic, Engine::Linear],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub engine: Engine,
    pub sequence_len: usize,
    pub queries: usize,
    pub features: usize,
    /// Median over the timed repeats.
    pub wall_time_ns: u64,
    pub repeats: usize,
    /// Attention flops of the engine proper (feature maps excluded).
    pub flops: u64,
}

/// Times each engine at every grid length with `M = N` on shared inputs:
/// positive random features, unit-norm queries and keys. Repeats run in
/// rounds over all (length, engine) points so that slow periods of the host
/// spread across the sweep instead of skewing one point.
pub fn run_bench(config: &RunConfig, engines: &[Engine], parallel: bool) -> anyhow::Result<Vec<BenchRecord>> {
    let dims = config.dims;
    let root = SeededRng::new(config.seed).substream("bench");
    let projection = gaussian_matrix(&mut root.substream("projection"), dims.m, dims.d_qk)?;
    let phi = FeatureMapSpec::PositiveRf { projection };
    let opts = EngineOptions { parallel, ..Default::default() };

    let mut inputs = Vec::with_capacity(config.grid.len());
    for &n in &config.grid {
        let data = root.indexed("length", n as u64);
        let q = normalize_rows_to_radius(&gaussian_matrix(&mut data.substream("q"), n, dims.d_qk)?, 1.0)?;
        let k = normalize_rows_to_radius(&gaussian_matrix(&mut data.substream("k"), n, dims.d_qk)?, 1.0)?;
        let v = gaussian_matrix(&mut data.substream("v"), n, dims.d_v)?;
        inputs.push((n, q, k, v));
    }
    let points: Vec<(usize, Engine)> =
        (0..inputs.len()).flat_map(|i| engines.iter().map(move |&e| (i, e))).collect();
    let run = |(i, engine): (usize, Engine)| {
        let (_, q, k, v) = &inputs[i];
        match engine {
            Engine::Quadratic => {
                kernel_attention_quadratic_with(&phi, &phi, q, k, v, opts).map(|o| o.flops.quadratic_flops)
            }
            Engine::Linear => kernel_attention_linear_with(&phi, &phi, q, k, v, opts).map(|o| o.flops.linear_flops),
        }
    };

    for _ in 0..config.bench.warmup {
        for &p in &points {
            std::hint::black_box(run(p)?);
        }
    }
    let mut times = vec![Vec::with_capacity(config.bench.repeats); points.len()];
    let mut flops = vec![0; points.len()];
    for _ in 0..config.bench.repeats {
        for (j, &p) in points.iter().enumerate() {
            let start = Instant::now();
            flops[j] = std::hint::black_box(run(p)?);
            times[j].push(start.elapsed().as_nanos() as u64);
        }
    }
    Ok(points
        .iter()
        .zip(times.iter_mut().zip(flops))
        .map(|(&(i, engine), (t, flops))| {
            t.sort_unstable();
            let n = inputs[i].0;
            BenchRecord {
                engine,
                sequence_len: n,
                queries: n,
                features: dims.m,
                wall_time_ns: t[t.len() / 2].max(1),
                repeats: t.len(),
                flops,
            }
        })
        .collect())
}

/// Ratio of the metric at `to` over the metric at `from` for one engine.
pub fn ratio(records: &[BenchRecord], engine: Engine, from: usize, to: usize, metric: impl Fn(&BenchRecord) -> u64) -> Option<f64> {
    let at = |n| records.iter().find(|r| r.engine == engine && r.sequence_len == n).map(&metric);
    Some(at(to)? as f64 / at(from)? as f64)
}

/// Smallest grid length from which the linear engine is faster at every
/// longer length, if any.
pub fn crossover(records: &[BenchRecord]) -> Option<usize> {
    let mut lengths: Vec<usize> = records.iter().map(|r| r.sequence_len).collect();
    lengths.sort_unstable();
    lengths.dedup();
    let faster = |n: usize| {
        let t = |e| records.iter().find(|r| r.engine == e && r.sequence_len == n).map(|r| r.wall_time_ns);
        matches!((t(Engine::Linear), t(Engine::Quadratic)), (Some(l), Some(q)) if l < q)
    };
    let mut start = None;
    for &n in &lengths {
        if faster(n) {
            start.get_or_insert(n);
        } else {
            start = None;
        }
    }
    start
}
