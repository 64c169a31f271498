// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{RunStore, SweepGrid};
use crate::error::{Error, Result};
use crate::game::{Factor, Gender, Instruction, Meeting};
use crate::stats::{self, encode_design, fit_logistic, RegressionResult, INTERCEPT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub label: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalBlock {
    pub name: String,
    pub rows: Vec<CategoryRow>,
}

fn block(name: &str, counts: &[(&str, usize)]) -> CategoricalBlock {
    let total: usize = counts.iter().map(|c| c.1).sum();
    CategoricalBlock {
        name: name.to_owned(),
        rows: counts
            .iter()
            .map(|&(label, count)| CategoryRow {
                label: label.to_owned(),
                count,
                percent: if total == 0 { 0.0 } else { 100.0 * count as f64 / total as f64 },
            })
            .collect(),
    }
}

/// Descriptive tables and the regression of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub records: usize,
    pub pass_count: usize,
    pub pass_rate: f64,
    /// Over logic-pass trials.
    pub categorical: Vec<CategoricalBlock>,
    /// `(age, count)` over logic-pass trials for every age in range.
    pub age_histogram: Vec<(u32, usize)>,
    pub regression: RegressionResult,
}

impl RunReport {
    pub fn categorical_csv(&self) -> String {
        let mut s = String::from("block,label,count,percent\n");
        for b in &self.categorical {
            for r in &b.rows {
                let _ = writeln!(s, "{},{},{},{}", b.name, r.label, r.count, r.percent);
            }
        }
        s
    }

    pub fn age_histogram_csv(&self) -> String {
        let mut s = String::from("age,count\n");
        for (a, c) in &self.age_histogram {
            let _ = writeln!(s, "{a},{c}");
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let r = &self.regression;
        format!(
            "records,pass_count,pass_rate,n,pseudo_r2,log_likelihood,null_log_likelihood,converged,separation\n{},{},{},{},{},{},{},{},{}\n",
            self.records,
            self.pass_count,
            self.pass_rate,
            r.n,
            r.pseudo_r2,
            r.log_likelihood,
            r.null_log_likelihood,
            r.converged,
            r.separation
        )
    }
}

/// Categorical distributions, age histogram and regression of a completed run.
pub fn analyze_run(store: &RunStore) -> Result<RunReport> {
    if !store.manifest.complete {
        return Err(Error::Contract(format!(
            "run {} is incomplete{}",
            store.manifest.run_id,
            store
                .manifest
                .failure
                .as_deref()
                .map(|f| format!(": {f}"))
                .unwrap_or_default()
        )));
    }
    let regression = fit_logistic(&encode_design(&store.records)?)?;
    let passing: Vec<_> = store.records.iter().filter(|r| r.logic_pass).collect();
    let count = |f: &dyn Fn(&&crate::game::TrialRecord) -> bool| passing.iter().filter(|r| f(r)).count();
    let categorical = vec![
        block(
            "gender",
            &[
                ("male", count(&|r| r.config.gender == Gender::Male)),
                ("female", count(&|r| r.config.gender == Gender::Female)),
            ],
        ),
        block(
            "game_type",
            &[
                ("give", count(&|r| r.config.instruction == Instruction::Give)),
                ("take", count(&|r| r.config.instruction == Instruction::Take)),
            ],
        ),
        block(
            "social_distance",
            &[
                ("stranger", count(&|r| r.config.meeting == Meeting::Stranger)),
                ("meet", count(&|r| r.config.meeting == Meeting::Meet)),
            ],
        ),
        block(
            "amount_transferred",
            &[
                ("0", count(&|r| r.decision == Some(0))),
                ("non_zero", count(&|r| r.decision != Some(0))),
            ],
        ),
    ];
    let mut ages: BTreeMap<u32, usize> = (crate::game::MIN_AGE..=crate::game::MAX_AGE).map(|a| (a, 0)).collect();
    for r in &passing {
        *ages.entry(r.config.age).or_default() += 1;
    }
    Ok(RunReport {
        run_id: store.manifest.run_id.clone(),
        records: store.records.len(),
        pass_count: passing.len(),
        pass_rate: passing.len() as f64 / store.records.len() as f64,
        categorical,
        age_histogram: ages.into_iter().collect(),
        regression,
    })
}

/// One sweep cell against the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellComparison {
    pub layer: usize,
    pub alpha: f64,
    pub completed: bool,
    /// `(variable, manipulated - baseline)` for every non-steered factor.
    pub differences: Vec<(String, f64)>,
    /// `(variable, CIs disjoint)` for every non-steered factor.
    pub flags: Vec<(String, bool)>,
    pub steered_coefficient: Option<f64>,
    pub steered_significant: bool,
    pub robust: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalitySummary {
    pub cells: usize,
    pub completed: usize,
    pub significant: usize,
    pub robust: usize,
    /// `robust / significant`; `None` without significant cells.
    pub robust_ratio: Option<f64>,
    /// Share of completed cells in which any non-steered flag fires.
    pub flagged_fraction: f64,
    /// Per non-steered variable: share of completed cells flagged.
    pub flag_rates: Vec<(String, f64)>,
    /// Pearson correlation between alpha and each variable's coefficient
    /// over completed cells; `None` when undefined.
    pub alpha_correlations: Vec<(String, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    pub steered: Factor,
    pub cells: Vec<CellComparison>,
    pub summary: OrthogonalitySummary,
}

impl OrthogonalityReport {
    /// Rows are layers, columns alphas, values `manipulated - baseline`.
    pub fn difference_heatmap_csv(&self, grid: &SweepGrid, variable: &str) -> String {
        let by_cell: BTreeMap<(usize, u64), Option<f64>> = self
            .cells
            .iter()
            .map(|c| {
                let d = c.differences.iter().find(|d| d.0 == variable).map(|d| d.1);
                ((c.layer, c.alpha.to_bits()), d)
            })
            .collect();
        grid.heatmap_csv(|cell| {
            by_cell
                .get(&(cell.layer, cell.alpha.to_bits()))
                .copied()
                .flatten()
                .map(|d| d.to_string())
        })
    }

    /// Rows are layers, columns alphas, values 1 when any non-steered flag fires.
    pub fn flag_heatmap_csv(&self, grid: &SweepGrid) -> String {
        let by_cell: BTreeMap<(usize, u64), &CellComparison> =
            self.cells.iter().map(|c| ((c.layer, c.alpha.to_bits()), c)).collect();
        grid.heatmap_csv(|cell| {
            by_cell
                .get(&(cell.layer, cell.alpha.to_bits()))
                .filter(|c| c.completed)
                .map(|c| u8::from(c.flags.iter().any(|f| f.1)).to_string())
        })
    }

    /// Significant steered coefficients sorted ascending.
    pub fn ordered_coefficients_csv(&self) -> String {
        let mut rows: Vec<&CellComparison> = self
            .cells
            .iter()
            .filter(|c| c.steered_significant)
            .collect();
        rows.sort_by(|a, b| {
            a.steered_coefficient
                .unwrap_or(0.0)
                .total_cmp(&b.steered_coefficient.unwrap_or(0.0))
                .then(a.layer.cmp(&b.layer))
                .then(a.alpha.total_cmp(&b.alpha))
        });
        let mut s = String::from("rank,layer,alpha,coef,robust\n");
        for (i, c) in rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                i + 1,
                c.layer,
                c.alpha,
                c.steered_coefficient.unwrap_or(f64::NAN),
                u8::from(c.robust)
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let s = &self.summary;
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "steered,{}", self.steered);
        let _ = writeln!(out, "cells,{}", s.cells);
        let _ = writeln!(out, "completed,{}", s.completed);
        let _ = writeln!(out, "significant,{}", s.significant);
        let _ = writeln!(out, "robust,{}", s.robust);
        let _ = writeln!(
            out,
            "robust_ratio,{}",
            s.robust_ratio.map(|r| r.to_string()).unwrap_or_default()
        );
        let _ = writeln!(out, "flagged_fraction,{}", s.flagged_fraction);
        for (v, r) in &s.flag_rates {
            let _ = writeln!(out, "flag_rate_{v},{r}");
        }
        for (v, r) in &s.alpha_correlations {
            let _ = writeln!(
                out,
                "alpha_correlation_{v},{}",
                r.map(|r| r.to_string()).unwrap_or_default()
            );
        }
        out
    }
}

/// Compares every sweep cell with the baseline regression. A cell is robust
/// when the steered coefficient is significant and no other factor's
/// interval separates from its baseline interval.
pub fn orthogonality_report(baseline: &RegressionResult, grid: &SweepGrid) -> Result<OrthogonalityReport> {
    let steered = grid.config.factor;
    let others: Vec<&str> = Factor::ALL
        .iter()
        .filter(|&&f| f != steered)
        .map(|f| f.name())
        .collect();
    for v in others.iter().copied().chain([steered.name()]) {
        if baseline.coefficient(v).is_none() {
            return Err(Error::Contract(format!("baseline result has no variable `{v}`")));
        }
    }

    let mut cells = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        let mut cmp = CellComparison {
            layer: cell.layer,
            alpha: cell.alpha,
            completed: false,
            differences: Vec::new(),
            flags: Vec::new(),
            steered_coefficient: None,
            steered_significant: false,
            robust: false,
        };
        if let (true, Some(r)) = (cell.is_completed(), &cell.regression) {
            cmp.completed = true;
            for v in &others {
                let b = baseline.coefficient(v).expect("checked above");
                let m = r
                    .coefficient(v)
                    .ok_or_else(|| Error::Contract(format!("cell result has no variable `{v}`")))?;
                cmp.differences.push(((*v).to_owned(), m.estimate - b.estimate));
                cmp.flags.push(((*v).to_owned(), stats::ci_overlap_flag(baseline, r, v)?));
            }
            let s = r
                .coefficient(steered.name())
                .ok_or_else(|| Error::Contract("cell result lacks the steered variable".into()))?;
            cmp.steered_coefficient = Some(s.estimate);
            cmp.steered_significant = s.significant();
            cmp.robust = cmp.steered_significant && !cmp.flags.iter().any(|f| f.1);
        }
        cells.push(cmp);
    }

    let done: Vec<&CellComparison> = cells.iter().filter(|c| c.completed).collect();
    let completed = done.len();
    let significant = done.iter().filter(|c| c.steered_significant).count();
    let robust = done.iter().filter(|c| c.robust).count();
    let frac = |n: usize| if completed == 0 { 0.0 } else { n as f64 / completed as f64 };
    let flag_rates = others
        .iter()
        .enumerate()
        .map(|(i, v)| ((*v).to_owned(), frac(done.iter().filter(|c| c.flags[i].1).count())))
        .collect();
    let alphas: Vec<f64> = grid
        .cells
        .iter()
        .filter(|c| c.is_completed() && c.regression.is_some())
        .map(|c| c.alpha)
        .collect();
    let alpha_correlations = Factor::ALL
        .iter()
        .map(|f| f.name())
        .chain([INTERCEPT])
        .map(|v| {
            let coefs: Vec<f64> = grid
                .cells
                .iter()
                .filter(|c| c.is_completed())
                .filter_map(|c| c.regression.as_ref())
                .filter_map(|r| r.coefficient(v).map(|c| c.estimate))
                .collect();
            (v.to_owned(), stats::pearson(&alphas, &coefs).ok())
        })
        .collect();

    Ok(OrthogonalityReport {
        steered,
        summary: OrthogonalitySummary {
            cells: cells.len(),
            completed,
            significant,
            robust,
            robust_ratio: (significant > 0).then(|| robust as f64 / significant as f64),
            flagged_fraction: frac(done.iter().filter(|c| c.flags.iter().any(|f| f.1)).count()),
            flag_rates,
            alpha_correlations,
        },
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, CapturePosition, ModelConfig};
    use crate::runner::{run_baseline, CellStatus, GridSpec, SweepCell, SweepConfig};

    #[test]
    fn tiny_run_is_refused() {
        let m = build_model(ModelConfig::default()).unwrap();
        let s = run_baseline(&m, 1, 1, CapturePosition::LastPromptToken).unwrap();
        assert_eq!(s.records.len(), 1);
        assert!(matches!(analyze_run(&s), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn report_blocks_and_percentages() {
        let m = build_model(ModelConfig::default()).unwrap();
        let s = run_baseline(&m, 120, 2, CapturePosition::LastPromptToken).unwrap();
        let r = analyze_run(&s).unwrap();
        let names: Vec<_> = r.categorical.iter().map(|b| b.name.as_str()).collect();
        assert_eq!(names, ["gender", "game_type", "social_distance", "amount_transferred"]);
        for b in &r.categorical {
            let total: f64 = b.rows.iter().map(|r| r.percent).sum();
            assert!((total - 100.0).abs() < 0.1);
            assert_eq!(b.rows.iter().map(|r| r.count).sum::<usize>(), r.pass_count);
        }
        assert_eq!(r.categorical[3].rows.len(), 2);
        assert_eq!(r.regression.n, r.pass_count);
        assert_eq!(r.age_histogram.len(), 41);
    }

    #[test]
    fn self_comparison_has_no_flags() {
        let m = build_model(ModelConfig::default()).unwrap();
        let s = run_baseline(&m, 150, 4, CapturePosition::LastPromptToken).unwrap();
        let base = analyze_run(&s).unwrap().regression;
        let mut cfg = SweepConfig::new(8, 1);
        cfg.grid = GridSpec {
            alphas: vec![0.0, 1.0],
            layers: vec![1],
        };
        let cell = |alpha: f64| SweepCell {
            layer: 1,
            alpha,
            design_seed: 0,
            status: CellStatus::Completed,
            trials: 150,
            pass_count: base.n,
            nonzero_rate: None,
            regression: Some(base.clone()),
        };
        let grid = SweepGrid {
            config: cfg,
            baseline_run_id: String::new(),
            model_hash: String::new(),
            injections: Vec::new(),
            cells: vec![cell(0.0), cell(1.0)],
        };
        let rep = orthogonality_report(&base, &grid).unwrap();
        assert!(rep.cells.iter().all(|c| c.differences.iter().all(|d| d.1 == 0.0)));
        assert!(rep.cells.iter().all(|c| c.flags.iter().all(|f| !f.1)));
        assert_eq!(rep.summary.flagged_fraction, 0.0);
    }
}
