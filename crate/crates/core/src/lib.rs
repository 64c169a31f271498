// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering-vector laboratory for a persona-conditioned dictator game.
//!
//! The pipeline extracts mean-difference vectors from a transformer's
//! residual streams, removes shared components, projects them onto a
//! decision direction and injects the result during generation. A toy
//! transformer with planted directions stands behind [`model::LanguageModel`]
//! so every stage can be checked against known ground truth.

pub mod error;
pub mod game;
pub mod kv;
pub mod model;
pub mod runner;
pub mod stats;
pub mod steering;
pub mod vecspace;

pub use error::{Error, Result};
