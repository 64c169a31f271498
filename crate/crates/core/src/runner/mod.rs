// SPDX-License-Identifier: MIT OR Apache-2.0

//! Baseline runs, the injection sweep, analysis and on-disk stores.

pub mod artifacts;
mod report;
mod store;
mod sweep;

pub use report::{
    analyze_run, orthogonality_report, CategoricalBlock, CategoryRow, CellComparison,
    OrthogonalitySummary, OrthogonalityReport, RunReport,
};
pub use store::{RunKind, RunManifest, RunStore, STORE_SCHEMA_VERSION};
pub use sweep::{
    cell_seed, layer_injection, run_sweep, DEFAULT_CELL_K, CellStatus, GridSpec, LayerInjection, SweepCell, SweepConfig, SweepGrid,
};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{self, TrialRecord};
use crate::model::{CapturePosition, CaptureSet, InjectionSpec, LanguageModel};

pub const DEFAULT_BASELINE_K: usize = 1000;

/// Runs trial `index` of a design.
pub fn run_trial<M: LanguageModel + ?Sized>(
    model: &M,
    design_seed: u64,
    index: u64,
    injection: Option<&InjectionSpec>,
    capture: CapturePosition,
    keep_captures: bool,
) -> Result<TrialRecord> {
    let config = game::sample_config(design_seed, index);
    let prompt = model.tokenizer().encode(&game::build_prompt(&config))?;
    let g = model.generate_with_capture(&prompt, injection, capture, config.trial_seed)?;
    let checked = game::parse_and_check(&config, &g.text);
    let captures = if keep_captures {
        g.captures
    } else {
        CaptureSet {
            position: capture,
            layers: Vec::new(),
        }
    };
    Ok(TrialRecord {
        index,
        config,
        response_text: g.text,
        decision: checked.decision,
        logic_pass: checked.logic_pass,
        captures,
    })
}

/// Runs trials `0..k` in parallel. On a model failure returns the records
/// before the first failing index together with the error.
pub fn run_trials<M: LanguageModel + ?Sized>(
    model: &M,
    design_seed: u64,
    k: usize,
    injection: Option<&InjectionSpec>,
    capture: CapturePosition,
    keep_captures: bool,
) -> (Vec<TrialRecord>, Option<Error>) {
    let results: Vec<Result<TrialRecord>> = (0..k as u64)
        .into_par_iter()
        .map(|i| run_trial(model, design_seed, i, injection, capture, keep_captures))
        .collect();
    let mut records = Vec::with_capacity(k);
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => return (records, Some(e)),
        }
    }
    (records, None)
}

/// `k` uninjected trials with captures at every layer. A model failure
/// yields a store marked incomplete rather than an error.
pub fn run_baseline<M: LanguageModel + ?Sized>(
    model: &M,
    k: usize,
    design_seed: u64,
    capture: CapturePosition,
) -> Result<RunStore> {
    run_store(model, RunKind::Baseline, k, design_seed, None, capture, true)
}

/// `k` trials under a single injection.
pub fn run_steered<M: LanguageModel + ?Sized>(
    model: &M,
    k: usize,
    design_seed: u64,
    injection: &InjectionSpec,
    capture: CapturePosition,
) -> Result<RunStore> {
    run_store(model, RunKind::Steer, k, design_seed, Some(injection), capture, true)
}

fn run_store<M: LanguageModel + ?Sized>(
    model: &M,
    kind: RunKind,
    k: usize,
    design_seed: u64,
    injection: Option<&InjectionSpec>,
    capture: CapturePosition,
    keep_captures: bool,
) -> Result<RunStore> {
    if k == 0 {
        return Err(Error::Contract("a run needs at least one trial".into()));
    }
    let mut store = RunStore::new(
        RunManifest::new(kind, model.config_hash(), design_seed, k, capture, injection.cloned()),
    );
    let (records, failure) = run_trials(model, design_seed, k, injection, capture, keep_captures);
    for r in records {
        store.append(r);
    }
    match failure {
        None => store.finish(),
        Some(e) => store.abort(e.to_string()),
    }
    Ok(store)
}

/// Independent 64-bit seed for sub-task `stream` of a master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng.next_u64()
}
