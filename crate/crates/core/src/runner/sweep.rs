// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, run_trials, RunStore};
use crate::error::{Error, Result};
use crate::game::Factor;
use crate::model::{CapturePosition, LanguageModel, DEFAULT_MAX_ALPHA};
use crate::stats::{encode_design, fit_logistic, RegressionResult};
use crate::steering::{
    self, extract_default_iv, extract_dv_vector, partial_against_others, InjectionVector,
    DV_ANCHOR_HIGH, DV_ANCHOR_LOW, MIN_GROUP_SIZE,
};
use crate::vecspace::Vector;

pub const DEFAULT_CELL_K: usize = 100;

/// The `(layer, alpha)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub layers: Vec<usize>,
}

impl GridSpec {
    /// Integer coefficients -30..=30 over layers 1..L-1.
    pub fn default_for(num_layers: usize) -> Self {
        Self {
            alphas: (-30..=30).map(f64::from).collect(),
            layers: (1..num_layers).collect(),
        }
    }

    pub fn cell_count(&self) -> usize {
        self.alphas.len() * self.layers.len()
    }

    pub fn validate(&self, num_layers: usize, max_alpha: f64) -> Result<()> {
        if self.alphas.is_empty() || self.layers.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        if let Some(l) = self.layers.iter().find(|&&l| l == 0 || l >= num_layers) {
            return Err(Error::Config(format!(
                "sweep layer {l} outside 1..={}",
                num_layers - 1
            )));
        }
        if let Some(a) = self.alphas.iter().find(|a| !a.is_finite() || a.abs() > max_alpha) {
            return Err(Error::Config(format!("sweep alpha {a} exceeds bound {max_alpha}")));
        }
        let mut l = self.layers.clone();
        l.sort_unstable();
        l.dedup();
        let mut a = self.alphas.clone();
        a.sort_by(f64::total_cmp);
        a.dedup();
        if l.len() != self.layers.len() || a.len() != self.alphas.len() {
            return Err(Error::Config("sweep grid has duplicate entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub factor: Factor,
    pub grid: GridSpec,
    pub k: usize,
    pub seed: u64,
    pub mode: InjectionVector,
    pub anchors: (i32, i32),
    pub min_group_size: usize,
    pub max_alpha: f64,
    pub capture: CapturePosition,
}

impl SweepConfig {
    pub fn new(num_layers: usize, seed: u64) -> Self {
        Self {
            factor: Factor::Female,
            grid: GridSpec::default_for(num_layers),
            k: DEFAULT_CELL_K,
            seed,
            mode: InjectionVector::DvProjection,
            anchors: (DV_ANCHOR_LOW, DV_ANCHOR_HIGH),
            min_group_size: MIN_GROUP_SIZE,
            max_alpha: DEFAULT_MAX_ALPHA,
            capture: CapturePosition::LastPromptToken,
        }
    }
}

/// Injected direction at one layer, shared by every cell of that layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInjection {
    pub layer: usize,
    pub vector: Option<Vector>,
    /// Signed length of the projection onto the decision vector.
    pub signed_magnitude: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Missing { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub layer: usize,
    pub alpha: f64,
    pub design_seed: u64,
    pub status: CellStatus,
    pub trials: usize,
    pub pass_count: usize,
    /// Share of logic-pass trials with a non-zero transfer.
    pub nonzero_rate: Option<f64>,
    pub regression: Option<RegressionResult>,
}

impl SweepCell {
    pub fn is_completed(&self) -> bool {
        self.status == CellStatus::Completed
    }

    pub fn significant(&self, variable: &str) -> Option<bool> {
        self.regression
            .as_ref()
            .and_then(|r| r.coefficient(variable))
            .map(|c| c.significant())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub config: SweepConfig,
    pub baseline_run_id: String,
    pub model_hash: String,
    pub injections: Vec<LayerInjection>,
    /// Row-major: layers outer, alphas inner.
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn completed(&self) -> usize {
        self.cells.iter().filter(|c| c.is_completed()).count()
    }

    pub fn missing(&self) -> usize {
        self.cells.len() - self.completed()
    }

    pub fn cell(&self, layer: usize, alpha: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.layer == layer && c.alpha == alpha)
    }

    /// Rows are layers, columns alphas; missing cells are empty fields.
    pub fn heatmap_csv(&self, value: impl Fn(&SweepCell) -> Option<String>) -> String {
        let g = &self.config.grid;
        let mut s = String::from("layer");
        for a in &g.alphas {
            let _ = write!(s, ",{a}");
        }
        s.push('\n');
        for (li, layer) in g.layers.iter().enumerate() {
            let _ = write!(s, "{layer}");
            for ai in 0..g.alphas.len() {
                let cell = &self.cells[li * g.alphas.len() + ai];
                s.push(',');
                if let Some(v) = value(cell) {
                    s.push_str(&v);
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn coefficient_heatmap_csv(&self, variable: &str) -> String {
        self.heatmap_csv(|c| {
            c.regression
                .as_ref()
                .and_then(|r| r.coefficient(variable))
                .map(|x| x.estimate.to_string())
        })
    }

    pub fn significance_heatmap_csv(&self, variable: &str) -> String {
        self.heatmap_csv(|c| c.significant(variable).map(|s| u8::from(s).to_string()))
    }

    pub fn pass_count_heatmap_csv(&self) -> String {
        self.heatmap_csv(|c| c.is_completed().then(|| c.pass_count.to_string()))
    }
}

/// Design seed of cell `index` in a sweep seeded with `seed`.
pub fn cell_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 1 + index as u64)
}

/// Builds the injected direction for `cfg.factor` at `layer` from the
/// baseline captures. Failures are recorded in the returned value.
pub fn layer_injection(baseline: &RunStore, cfg: &SweepConfig, layer: usize) -> LayerInjection {
    let build = || -> Result<(Vector, f64)> {
        let dv = extract_dv_vector(&baseline.records, layer, cfg.anchors.0, cfg.anchors.1, cfg.min_group_size)?;
        let ivs = Factor::ALL
            .iter()
            .map(|&f| extract_default_iv(&baseline.records, f, layer, cfg.min_group_size))
            .collect::<Result<Vec<_>>>()?;
        let partial = partial_against_others(cfg.factor, &ivs)?;
        let (p, mag) = steering::project_onto_dv(&partial, &dv)?;
        let v = match cfg.mode {
            InjectionVector::DvProjection => p,
            InjectionVector::FullPartial => partial.vector,
        };
        Ok((v, mag))
    };
    match build() {
        Ok((v, m)) => LayerInjection {
            layer,
            vector: Some(v),
            signed_magnitude: Some(m),
            error: None,
        },
        Err(e) => LayerInjection {
            layer,
            vector: None,
            signed_magnitude: None,
            error: Some(e.to_string()),
        },
    }
}

/// Injects `alpha * p` for every grid cell, where `p` is built once per
/// layer from the baseline captures, and fits the standard regression on
/// each cell's logic-pass trials.
pub fn run_sweep<M: LanguageModel + ?Sized>(
    model: &M,
    baseline: &RunStore,
    config: &SweepConfig,
) -> Result<SweepGrid> {
    config.grid.validate(model.num_layers(), config.max_alpha)?;
    if config.k == 0 {
        return Err(Error::Config("cells need at least one trial".into()));
    }
    if baseline.manifest.model_hash != model.config_hash() {
        return Err(Error::Contract(
            "baseline store was produced by a different model".into(),
        ));
    }
    let injections: Vec<LayerInjection> = config
        .grid
        .layers
        .par_iter()
        .map(|&l| layer_injection(baseline, config, l))
        .collect();

    let na = config.grid.alphas.len();
    let cells = (0..config.grid.cell_count())
        .into_par_iter()
        .map(|idx| {
            let inj = &injections[idx / na];
            let alpha = config.grid.alphas[idx % na];
            let design_seed = cell_seed(config.seed, idx);
            let mut cell = SweepCell {
                layer: inj.layer,
                alpha,
                design_seed,
                status: CellStatus::Completed,
                trials: 0,
                pass_count: 0,
                nonzero_rate: None,
                regression: None,
            };
            let missing = |mut c: SweepCell, reason: String| {
                c.status = CellStatus::Missing { reason };
                c
            };
            let Some(vector) = &inj.vector else {
                return missing(cell, format!("extraction failed: {}", inj.error.clone().unwrap_or_default()));
            };
            let spec = match steering::make_injection_spec(
                vector,
                inj.layer,
                alpha,
                model.num_layers(),
                config.max_alpha,
            ) {
                Ok(s) => s,
                Err(e) => return missing(cell, e.to_string()),
            };
            let (records, failure) = run_trials(model, design_seed, config.k, Some(&spec), config.capture, false);
            cell.trials = records.len();
            if let Some(e) = failure {
                return missing(cell, format!("model failure: {e}"));
            }
            let passing: Vec<_> = records.iter().filter(|r| r.logic_pass).collect();
            cell.pass_count = passing.len();
            if !passing.is_empty() {
                let nz = passing.iter().filter(|r| r.decision != Some(0)).count();
                cell.nonzero_rate = Some(nz as f64 / passing.len() as f64);
            }
            match encode_design(&records).and_then(|d| fit_logistic(&d)) {
                Ok(r) => {
                    cell.regression = Some(r);
                    cell
                }
                Err(e) => missing(cell, format!("regression failed: {e}")),
            }
        })
        .collect();

    Ok(SweepGrid {
        config: config.clone(),
        baseline_run_id: baseline.manifest.run_id.clone(),
        model_hash: baseline.manifest.model_hash.clone(),
        injections,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_arithmetic() {
        assert_eq!(GridSpec::default_for(32).cell_count(), 1891);
        assert_eq!(GridSpec::default_for(8).cell_count(), 427);
        assert_eq!(GridSpec::default_for(8).alphas.len(), 61);
    }

    #[test]
    fn grid_validation() {
        let g = GridSpec::default_for(8);
        assert!(g.validate(8, 30.0).is_ok());
        assert!(g.validate(8, 29.0).is_err());
        assert!(GridSpec { layers: vec![8], ..g.clone() }.validate(8, 30.0).is_err());
        assert!(GridSpec { layers: vec![1, 1], ..g.clone() }.validate(8, 30.0).is_err());
        assert!(GridSpec { alphas: vec![], ..g }.validate(8, 30.0).is_err());
    }

    #[test]
    fn cell_seeds_are_distinct() {
        let seeds: std::collections::HashSet<u64> = (0..427).map(|i| cell_seed(9, i)).collect();
        assert_eq!(seeds.len(), 427);
    }
}
