//! `uptrain` subcommand: distills a synthetic teacher and writes the history
//! and the learned parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sara_core::feature_maps::SaraParamsMeta;
use sara_core::numerics::mat1;
use sara_core::uptrain::{uptrain, DistillationConfig, InitKind, TrainHistory};

use crate::output::{history_csv, save_params, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: DistillationConfig,
    pub steps: usize,
    pub loss_first: f64,
    pub loss_last: f64,
    pub loss_ratio: f64,
}

pub fn run_uptrain(config: &DistillationConfig) -> anyhow::Result<TrainHistory> {
    config.validate()?;
    let layer = config.teacher()?;
    Ok(uptrain(config, &layer, &mut config.data())?)
}

/// Writes `history.csv`, `summary.json`, the teacher projections and the
/// final parameters under `out/params`.
pub fn write_uptrain(out: &Path, config: &DistillationConfig, history: &TrainHistory) -> anyhow::Result<TrainSummary> {
    history_csv(&out.join("history.csv"), history)?;
    let layer = config.teacher()?;
    mat1::save(out.join("teacher_w_q.mat1"), &layer.w_q)?;
    mat1::save(out.join("teacher_w_k.mat1"), &layer.w_k)?;
    let params = &history.final_params;
    let meta = SaraParamsMeta {
        m: params.m(),
        d: params.d(),
        f: config.f,
        a_if_constructed: match config.init {
            InitKind::TheoremConstruction { a } => Some(a),
            _ => None,
        },
    };
    save_params(&out.join("params"), params, &meta)?;
    let first = history.loss[0];
    let last = *history.loss.last().expect("steps >= 1");
    let summary = TrainSummary {
        config: config.clone(),
        steps: history.loss.len(),
        loss_first: first,
        loss_last: last,
        loss_ratio: last / first,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
