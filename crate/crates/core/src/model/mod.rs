// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoder-only transformer runtime with residual-stream capture and
//! injection hooks, plus a planted ground truth to validate extraction.
//!
//! Layer indices are 1-based: `r^(l)` is the residual stream after decoder
//! block `l`, for `l = 1..=L`. An injection at layer `l` adds `alpha * p` to
//! that stream before block `l + 1` reads it; injecting after the final
//! block is not allowed.
//!
//! # Planted backend
//!
//! Block 1 carries a fixed "persona reader" attention head. Factor-level
//! tokens carry a salience feature and a component along their factor's
//! planted unit direction `u_X`. The reader head attends evenly to salient
//! tokens, copies the `u_X` components into the residual stream and writes
//! `sum_X beta_X * x_X` along the decision direction `w_D`. Every other
//! head and MLP has its output projected off `w_D`, and the decision head
//! reads `w_D . r^(L)` linearly, so the log-odds of transferring 10 versus
//! 0 equal `beta_0 + sum_X beta_X * x_X` plus whatever an injection adds
//! along `w_D`.
//!
//! Decoding is greedy over Gumbel-perturbed logits (the Gumbel-max form of
//! sampling at temperature 1). The perturbations are drawn from a ChaCha
//! stream seeded per trial, so a seed fixes the output exactly.

mod tokenizer;
mod transformer;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::game::Factor;
use crate::kv::KvFile;
use crate::vecspace::Vector;

pub use tokenizer::{TokenId, Tokenizer, EOS, NEWLINE};
pub use transformer::ToyTransformer;

/// Default bound on `|alpha|`.
pub const DEFAULT_MAX_ALPHA: f64 = 30.0;

/// Hard cap on generated tokens.
pub const MAX_NEW_TOKENS: usize = 128;

/// Knobs of the planted ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    /// Log-odds weight per factor, indexed by [`Factor::index`]. Binary
    /// factors are coded 1 for give / meet / female; age is in years.
    pub weights: [f64; 4],
    /// Log-odds of transferring at the all-zero coding.
    pub intercept: f64,
    /// Embedding gain per factor: the size of a two-level contrast along
    /// `u_X`. Age tokens carry `gain` per ten years.
    pub gains: [f64; 4],
    /// Per-position nuisance noise in the embedding, orthogonal to every
    /// planted direction.
    pub noise_sd: f64,
    /// Probability that the allocation line contains an arithmetic slip.
    pub logic_fail_rate: f64,
}

impl PlantedConfig {
    pub const DEFAULT_GAIN: f64 = 4.0;

    pub fn with_gain(gain: f64) -> Self {
        Self {
            gains: [gain; 4],
            ..Self::default()
        }
    }

    pub fn weight(&self, f: Factor) -> f64 {
        self.weights[f.index()]
    }
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            weights: [1.059, 0.815, 0.5, 0.001],
            intercept: 0.64,
            gains: [Self::DEFAULT_GAIN; 4],
            noise_sd: 0.1,
            logic_fail_rate: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub planted: PlantedConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            hidden_dim: 64,
            seed: 7,
            planted: PlantedConfig::default(),
        }
    }
}

/// Planted directions occupy 7 orthonormal slots (4 factors, decision,
/// salience, bias) and the attention heads need some room besides.
pub const MIN_HIDDEN_DIM: usize = 16;

impl ModelConfig {
    pub const FILE_KEYS: [&'static str; 6] = [
        "layers",
        "hidden_dim",
        "seed",
        "noise_sd",
        "planting_gain",
        "logic_fail_rate",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config(format!(
                "layers must be at least 2, got {}",
                self.num_layers
            )));
        }
        if self.hidden_dim < MIN_HIDDEN_DIM {
            return Err(Error::Config(format!(
                "hidden_dim must be at least {MIN_HIDDEN_DIM}, got {}",
                self.hidden_dim
            )));
        }
        let p = &self.planted;
        if !(p.noise_sd.is_finite() && p.noise_sd >= 0.0) {
            return Err(Error::Config(format!("noise_sd must be >= 0, got {}", p.noise_sd)));
        }
        if !(0.0..=1.0).contains(&p.logic_fail_rate) {
            return Err(Error::Config(format!(
                "logic_fail_rate must be in [0, 1], got {}",
                p.logic_fail_rate
            )));
        }
        for f in Factor::ALL {
            let (g, w) = (p.gains[f.index()], p.weights[f.index()]);
            if !g.is_finite() || !w.is_finite() {
                return Err(Error::Config(format!("non-finite planting for {f}")));
            }
            if g == 0.0 && w != 0.0 {
                return Err(Error::Config(format!(
                    "{f}: a nonzero decision weight needs a nonzero planting gain"
                )));
            }
        }
        if !p.intercept.is_finite() {
            return Err(Error::Config("non-finite intercept".into()));
        }
        Ok(())
    }

    /// Overlays the model keys of a `key = value` file onto `self`.
    /// Keys outside [`FILE_KEYS`](Self::FILE_KEYS) are left to the caller.
    pub fn apply_kv(&mut self, kv: &KvFile) -> Result<()> {
        if let Some(v) = kv.get("layers")? {
            self.num_layers = v;
        }
        if let Some(v) = kv.get("hidden_dim")? {
            self.hidden_dim = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get("noise_sd")? {
            self.planted.noise_sd = v;
        }
        if let Some(v) = kv.get::<f64>("planting_gain")? {
            self.planted.gains = [v; 4];
        }
        if let Some(v) = kv.get("logic_fail_rate")? {
            self.planted.logic_fail_rate = v;
        }
        Ok(())
    }

    /// Parses a model config file; unknown keys are rejected.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(&Self::FILE_KEYS)?;
        let mut cfg = Self::default();
        cfg.apply_kv(&kv)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization of every field, used for hashing.
    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }
}

/// The exact ground truth a [`ToyTransformer`] was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffects {
    /// Unit direction per factor, indexed by [`Factor::index`].
    pub factor_directions: [Vector; 4],
    pub decision_direction: Vector,
    pub weights: [f64; 4],
    pub intercept: f64,
    pub gains: [f64; 4],
    pub noise_sd: f64,
    pub logic_fail_rate: f64,
    /// Layer whose output first carries the planted factor components.
    pub planting_layer: usize,
}

impl PlantedEffects {
    pub fn direction(&self, f: Factor) -> &Vector {
        &self.factor_directions[f.index()]
    }

    /// Log-odds of a non-zero transfer for a factor coding.
    pub fn log_odds(&self, give: bool, meet: bool, female: bool, age: f64) -> f64 {
        self.intercept
            + self.weights[0] * f64::from(u8::from(give))
            + self.weights[1] * f64::from(u8::from(meet))
            + self.weights[2] * f64::from(u8::from(female))
            + self.weights[3] * age
    }
}

/// Which token's residual stream a trial's capture records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapturePosition {
    #[default]
    LastPromptToken,
    MeanPrompt,
    FirstGenerated,
}

/// Residual streams `r^(1..=L)` at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureSet {
    pub position: CapturePosition,
    pub layers: Vec<Vector>,
}

impl CaptureSet {
    /// Stream after layer `layer` (1-based).
    pub fn at(&self, layer: usize) -> Option<&Vector> {
        layer.checked_sub(1).and_then(|i| self.layers.get(i))
    }
}

/// Token positions an injection applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionScope {
    #[default]
    AllPositions,
    GeneratedOnly,
}

/// Adds `alpha * vector` to the residual stream after block `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub layer: usize,
    pub alpha: f64,
    pub vector: Vector,
    pub scope: PositionScope,
}

impl InjectionSpec {
    /// Checks the layer against a model depth and `|alpha|` against a bound.
    pub fn new(
        layer: usize,
        alpha: f64,
        vector: Vector,
        scope: PositionScope,
        num_layers: usize,
        max_alpha: f64,
    ) -> Result<Self> {
        if layer == 0 || layer >= num_layers {
            return Err(Error::Contract(format!(
                "injection layer {layer} outside 1..={} (the final block cannot be injected)",
                num_layers - 1
            )));
        }
        if !alpha.is_finite() || alpha.abs() > max_alpha {
            return Err(Error::Contract(format!(
                "|alpha| = {} exceeds the bound {max_alpha}",
                alpha.abs()
            )));
        }
        Ok(Self {
            layer,
            alpha,
            vector,
            scope,
        })
    }
}

/// Output of one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub captures: CaptureSet,
    /// Log-odds of transferring 10 rather than 0 at the decision slot.
    pub decision_log_odds: Option<f64>,
}

/// A model that can run the trial loop.
pub trait LanguageModel: Sync {
    fn num_layers(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn tokenizer(&self) -> &Tokenizer;
    /// Stable identifier of the weights, recorded with every run.
    fn config_hash(&self) -> String;

    fn generate_with_capture(
        &self,
        prompt: &[TokenId],
        injection: Option<&InjectionSpec>,
        capture: CapturePosition,
        seed: u64,
    ) -> Result<Generation>;
}

/// Builds the planted toy transformer.
pub fn build_model(config: ModelConfig) -> Result<ToyTransformer> {
    ToyTransformer::new(config)
}

/// Ground truth of a planted model.
pub fn planted_truth(model: &ToyTransformer) -> PlantedEffects {
    model.planted().clone()
}
