// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{OrthogonalityReport, RunReport, RunStore, SweepGrid};
use crate::error::Result;
use crate::game::Factor;
use crate::stats::INTERCEPT;

pub const MANIFEST_NAME: &str = "manifest.txt";

/// One row per trial: factor levels, decision and logic check.
pub fn trials_csv(store: &RunStore) -> String {
    let mut s = String::from("index,gender,age,instruction,meeting,decision,logic_pass\n");
    for r in &store.records {
        let c = &r.config;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.index,
            c.gender.word(),
            c.age,
            c.instruction.word(),
            c.meeting.word(),
            r.decision.map(|d| d.to_string()).unwrap_or_default(),
            u8::from(r.logic_pass)
        );
    }
    s
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

/// Descriptive tables and regression of one run.
pub fn write_run_report(dir: &Path, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    write(dir, "table2.csv", &report.regression.to_csv())?;
    write(dir, "table_a1.csv", &report.categorical_csv())?;
    write(dir, "age_histogram.csv", &report.age_histogram_csv())?;
    write(dir, "summary.csv", &report.summary_csv())?;
    Ok(())
}

/// Heatmaps, difference maps, ordered coefficients and the orthogonality summary.
pub fn write_sweep_report(dir: &Path, grid: &SweepGrid, ortho: &OrthogonalityReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let variables = Factor::ALL.iter().map(|f| f.name()).chain([INTERCEPT]);
    for v in variables {
        write(dir, &format!("heatmap_coef_{v}.csv"), &grid.coefficient_heatmap_csv(v))?;
        write(dir, &format!("heatmap_sig_{v}.csv"), &grid.significance_heatmap_csv(v))?;
    }
    for f in Factor::ALL.iter().filter(|&&f| f != ortho.steered) {
        write(
            dir,
            &format!("heatmap_diff_{}.csv", f.name()),
            &ortho.difference_heatmap_csv(grid, f.name()),
        )?;
    }
    write(dir, "heatmap_pass_count.csv", &grid.pass_count_heatmap_csv())?;
    write(dir, "heatmap_flags.csv", &ortho.flag_heatmap_csv(grid))?;
    write(dir, "ordered_coefficients.csv", &ortho.ordered_coefficients_csv())?;
    write(dir, "orthogonality_summary.csv", &ortho.summary_csv())?;
    write(dir, "cells.csv", &cells_csv(grid))?;
    Ok(())
}

fn cells_csv(grid: &SweepGrid) -> String {
    let mut s = String::from("layer,alpha,status,trials,pass_count,nonzero_rate,separation\n");
    for c in &grid.cells {
        let status = match &c.status {
            super::CellStatus::Completed => "completed",
            super::CellStatus::Missing { .. } => "missing",
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c.layer,
            c.alpha,
            status,
            c.trials,
            c.pass_count,
            c.nonzero_rate.map(|r| r.to_string()).unwrap_or_default(),
            c.regression
                .as_ref()
                .map(|r| u8::from(r.separation).to_string())
                .unwrap_or_default()
        );
    }
    s
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).map(|p| p != Path::new(MANIFEST_NAME)).unwrap_or(true) {
            out.push(path);
        }
    }
    Ok(())
}

/// Writes `sha256  relative/path` for every file under `dir`, sorted by path.
pub fn write_manifest(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut entries: Vec<(String, String)> = files
        .iter()
        .map(|p| -> Result<(String, String)> {
            let rel = p
                .strip_prefix(dir)
                .unwrap_or(p)
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            Ok((rel, hex::encode(Sha256::digest(fs::read(p)?))))
        })
        .collect::<Result<_>>()?;
    entries.sort();
    let mut text = String::new();
    for (rel, hash) in &entries {
        let _ = writeln!(text, "{hash}  {rel}");
    }
    fs::write(dir.join(MANIFEST_NAME), text)?;
    Ok(entries)
}
