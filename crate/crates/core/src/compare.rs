//! Side-by-side training runs at matched expected k.

use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::ActivationStore;
use crate::error::{Result, SaeError};
use crate::train::{train, TrainInputs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub policy: String,
    pub expected_k: f64,
    pub seed: u64,
    pub fvu: f64,
    pub mse: f64,
    pub mean_l0: f64,
    pub dead_count: usize,
    pub dying_count: usize,
    pub recovery_score: Option<f64>,
}

/// Trains every `(label, config)` once per seed and evaluates on `eval`.
/// Rows come back sorted by label, then seed.
pub fn compare_runs(
    train_store: &ActivationStore,
    eval_store: &ActivationStore,
    truth: Option<ArrayView2<'_, f64>>,
    configs: &[(String, RunConfig)],
    seeds: &[u64],
) -> Result<Vec<CompareRow>> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(SaeError::invalid(
            "compare needs at least one config and one seed",
        ));
    }
    let widths: Vec<usize> = configs.iter().map(|(_, c)| c.width_multiple).collect();
    if widths.windows(2).any(|w| w[0] != w[1]) {
        return Err(SaeError::invalid(
            "compared configs must share the dictionary width",
        ));
    }
    let jobs: Vec<(&str, RunConfig)> = configs
        .iter()
        .flat_map(|(label, c)| {
            seeds.iter().map(move |&s| {
                let mut c = c.clone();
                c.seed = s;
                (label.as_str(), c)
            })
        })
        .collect();
    let mut rows = jobs
        .par_iter()
        .map(|(label, cfg)| {
            let out = train(&TrainInputs {
                config: cfg,
                train: train_store,
                eval: Some(eval_store),
                truth,
                out: None,
            })?;
            let eval = out.report.eval.as_ref().expect("eval store was supplied");
            Ok(CompareRow {
                label: (*label).to_string(),
                policy: out.report.final_policy.clone(),
                expected_k: out.report.expected_k,
                seed: cfg.seed,
                fvu: eval.fvu,
                mse: eval.mse,
                mean_l0: eval.mean_l0,
                dead_count: out.report.dead_count,
                dying_count: out.report.dying_count,
                recovery_score: eval.recovery_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.label.cmp(&b.label).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}

pub fn write_compare_csv(path: &Path, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| SaeError::io(path, e))?;
    Ok(())
}

pub fn read_compare_csv(path: &Path) -> Result<Vec<CompareRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(SaeError::from))
        .collect()
}

/// Mean FVU, dead and dying counts per label.
pub fn summarize(rows: &[CompareRow]) -> Vec<(String, f64, f64, f64, f64)> {
    let mut labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    labels.dedup();
    labels
        .into_iter()
        .map(|label| {
            let group: Vec<&CompareRow> = rows.iter().filter(|r| r.label == label).collect();
            let n = group.len() as f64;
            let mean = |f: &dyn Fn(&CompareRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            (
                label.to_string(),
                mean(&|r| r.expected_k),
                mean(&|r| r.fvu),
                mean(&|r| r.dead_count as f64),
                mean(&|r| r.dying_count as f64),
            )
        })
        .collect()
}
