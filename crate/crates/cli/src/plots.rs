//! Plot-ready CSV tables. No rendering happens here.

use std::fs;
use std::path::Path;

use serde::Serialize;
use sparsealloc::compare::{read_compare_csv, summarize};
use sparsealloc::zipf::read_density_csv;
use sparsealloc::{SaeError, TrainReport};

use crate::args::ExportPlotsArgs;
use crate::{CliError, CliResult};

#[derive(Serialize)]
struct DensityRow {
    rank: usize,
    density: f64,
    zipf_fit: Option<f64>,
}

#[derive(Serialize)]
struct FptRow {
    features: usize,
    tokens: usize,
}

#[derive(Serialize)]
struct ProgressiveRow {
    k: usize,
    mse: f64,
}

#[derive(Serialize)]
struct ParetoRow {
    recipe: String,
    expected_k: f64,
    fvu: f64,
    dead: f64,
    dying: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(SaeError::from)?;
    for r in rows {
        w.serialize(r).map_err(SaeError::from)?;
    }
    w.flush().map_err(|e| SaeError::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(())
}

pub fn export(a: ExportPlotsArgs) -> CliResult<()> {
    if a.run.is_none() && a.compare.is_none() {
        return Err(CliError::Usage(
            "export-plots needs --run and/or --compare".into(),
        ));
    }
    fs::create_dir_all(&a.out).map_err(|e| SaeError::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut written = Vec::new();

    if let Some(run) = &a.run {
        let report_path = run.join("report.json");
        let text = fs::read_to_string(&report_path).map_err(|e| SaeError::Io {
            path: report_path.clone(),
            source: e,
        })?;
        let report: TrainReport = serde_json::from_str(&text).map_err(SaeError::from)?;

        let densities = read_density_csv(&run.join("densities_final.csv"))?;
        let predicted = report.zipf_fit.as_ref().map(|f| f.predicted.as_slice());
        let rows = densities
            .iter()
            .enumerate()
            .map(|(i, &density)| DensityRow {
                rank: i + 1,
                density,
                zipf_fit: predicted.and_then(|p| p.get(i).copied()),
            });
        write_rows(&a.out.join("density_vs_rank.csv"), rows)?;
        written.push("density_vs_rank.csv");

        if let Some(e) = &report.eval {
            let fpt = e.fpt_histogram.iter().enumerate().map(|(c, &n)| FptRow {
                features: c,
                tokens: n,
            });
            write_rows(&a.out.join("features_per_token.csv"), fpt)?;
            let prog = e
                .progressive_curve
                .iter()
                .map(|&(k, mse)| ProgressiveRow { k, mse });
            write_rows(&a.out.join("progressive_codes.csv"), prog)?;
            written.extend(["features_per_token.csv", "progressive_codes.csv"]);
        }
    }

    if let Some(path) = &a.compare {
        let rows = read_compare_csv(path)?;
        let summary = summarize(&rows)
            .into_iter()
            .map(|(recipe, expected_k, fvu, dead, dying)| ParetoRow {
                recipe,
                expected_k,
                fvu,
                dead,
                dying,
            });
        write_rows(&a.out.join("fvu_vs_k.csv"), summary)?;
        write_rows(
            &a.out.join("dead_counts.csv"),
            rows.iter().map(DeadRow::from),
        )?;
        written.extend(["fvu_vs_k.csv", "dead_counts.csv"]);
    }

    for name in written {
        outln!("{}", a.out.join(name).display());
    }
    Ok(())
}

#[derive(Serialize)]
struct DeadRow<'a> {
    recipe: &'a str,
    seed: u64,
    dead: usize,
    dying: usize,
}

impl<'a> From<&'a sparsealloc::CompareRow> for DeadRow<'a> {
    fn from(r: &'a sparsealloc::CompareRow) -> Self {
        DeadRow {
            recipe: &r.label,
            seed: r.seed,
            dead: r.dead_count,
            dying: r.dying_count,
        }
    }
}
