//! CSV and JSON artifacts.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use sara_core::feature_maps::{SaraParams, SaraParamsMeta};
use sara_core::uptrain::TrainHistory;

use crate::bench::BenchRecord;
use crate::demo::DemoReport;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> anyhow::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn bench_csv(path: &Path, records: &[BenchRecord]) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["engine", "sequence_len", "queries", "features", "wall_time_ns", "repeats", "flops"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn demo_csv(path: &Path, report: &DemoReport) -> anyhow::Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["kernel", "target", "tv_distance", "argmax_agree", "entropy_gap"])?;
    for r in &report.reports {
        for i in 0..r.tv_distance.len() {
            w.write_record([
                r.label.clone(),
                i.to_string(),
                r.tv_distance[i].to_string(),
                r.argmax_agree[i].to_string(),
                r.entropy_gap[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn history_csv(path: &Path, history: &TrainHistory) -> anyhow::Result<()> {
    fs::write(path, history.to_csv()).with_context(|| format!("writing {}", path.display()))
}

pub fn save_params(dir: &Path, params: &SaraParams, meta: &SaraParamsMeta) -> anyhow::Result<()> {
    params.save(dir, meta).with_context(|| format!("saving parameters to {}", dir.display()))
}
