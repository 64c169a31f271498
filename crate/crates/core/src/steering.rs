// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering vectors: factor contrasts, partial vectors, the decision
//! contrast, projections and injection specs.
//!
//! Sign conventions are fixed: a factor vector points from the `from`
//! level's mean to the `to` level's mean, and the decision vector points
//! from the low anchor to the high anchor. A positive projection magnitude
//! therefore pushes toward the high anchor.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Factor, Level, TrialRecord};
use crate::model::{InjectionSpec, PositionScope};
use crate::vecspace::{self, Vector, EPSILON};

pub const MIN_GROUP_SIZE: usize = 10;
pub const DV_ANCHOR_LOW: i32 = 0;
pub const DV_ANCHOR_HIGH: i32 = 10;

/// What a steering vector contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Contrast {
    Factor { factor: Factor, from: Level, to: Level },
    Decision { low: i32, high: i32 },
}

impl Contrast {
    pub fn factor(self) -> Option<Factor> {
        match self {
            Self::Factor { factor, .. } => Some(factor),
            Self::Decision { .. } => None,
        }
    }

    pub fn label(self) -> String {
        match self {
            Self::Factor { factor, from, to } => format!("{factor}:{from}->{to}"),
            Self::Decision { low, high } => format!("decision:{low}->{high}"),
        }
    }
}

/// `v = R(to) - R(from)` at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub layer: usize,
    pub contrast: Contrast,
    pub vector: Vector,
    pub n_from: usize,
    pub n_to: usize,
}

/// A steering vector with other factors' directions removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSteeringVector {
    pub base: SteeringVector,
    pub conditioned_on: Vec<Contrast>,
    pub vector: Vector,
    /// Conditioners that added no new direction.
    pub skipped_conditioners: Vec<Contrast>,
    pub degenerate: bool,
}

impl PartialSteeringVector {
    /// Wraps a vector that is conditioned on nothing.
    pub fn unconditioned(base: SteeringVector) -> Self {
        Self {
            vector: base.vector.clone(),
            base,
            conditioned_on: Vec::new(),
            skipped_conditioners: Vec::new(),
            degenerate: false,
        }
    }

    pub fn layer(&self) -> usize {
        self.base.layer
    }
}

fn capture_at(r: &TrialRecord, layer: usize) -> Result<&Vector> {
    r.captures.at(layer).ok_or_else(|| {
        Error::InsufficientData(format!("record {} has no capture at layer {layer}", r.index))
    })
}

fn group_mean<'a>(
    members: impl Iterator<Item = &'a TrialRecord>,
    layer: usize,
    min_group_size: usize,
    name: &str,
) -> Result<(Vector, usize)> {
    let vectors = members
        .map(|r| capture_at(r, layer))
        .collect::<Result<Vec<_>>>()?;
    if vectors.len() < min_group_size.max(1) {
        return Err(Error::InsufficientData(format!(
            "group `{name}` at layer {layer} has {} records, need {}",
            vectors.len(),
            min_group_size.max(1)
        )));
    }
    Ok((vecspace::mean(vectors.iter().copied())?, vectors.len()))
}

/// Mean-difference vector between two levels of one factor. Other factors
/// are left unconditioned.
pub fn extract_iv_vector(
    records: &[TrialRecord],
    factor: Factor,
    from: Level,
    to: Level,
    layer: usize,
    min_group_size: usize,
) -> Result<SteeringVector> {
    if from.factor() != factor || to.factor() != factor {
        return Err(Error::Contract(format!(
            "levels {from} and {to} do not both belong to factor {factor}"
        )));
    }
    if from == to {
        return Err(Error::Contract(format!("contrast {from} -> {to} is degenerate")));
    }
    let (m_from, n_from) = group_mean(
        records.iter().filter(|r| r.config.has_level(from)),
        layer,
        min_group_size,
        &format!("{factor}={from}"),
    )?;
    let (m_to, n_to) = group_mean(
        records.iter().filter(|r| r.config.has_level(to)),
        layer,
        min_group_size,
        &format!("{factor}={to}"),
    )?;
    Ok(SteeringVector {
        layer,
        contrast: Contrast::Factor { factor, from, to },
        vector: m_to.sub(&m_from)?,
        n_from,
        n_to,
    })
}

/// [`extract_iv_vector`] with the factor's default contrast.
pub fn extract_default_iv(
    records: &[TrialRecord],
    factor: Factor,
    layer: usize,
    min_group_size: usize,
) -> Result<SteeringVector> {
    let (from, to) = factor.default_contrast();
    extract_iv_vector(records, factor, from, to, layer, min_group_size)
}

/// Decision vector `R(D = high) - R(D = low)` over logic-pass records.
pub fn extract_dv_vector(
    records: &[TrialRecord],
    layer: usize,
    anchor_low: i32,
    anchor_high: i32,
    min_group_size: usize,
) -> Result<SteeringVector> {
    if anchor_low == anchor_high {
        return Err(Error::Contract(format!(
            "decision anchors are both {anchor_low}"
        )));
    }
    let with = |d: i32| {
        records
            .iter()
            .filter(move |r| r.logic_pass && r.decision == Some(d))
    };
    let (m_low, n_from) = group_mean(with(anchor_low), layer, min_group_size, &format!("D={anchor_low}"))?;
    let (m_high, n_to) = group_mean(with(anchor_high), layer, min_group_size, &format!("D={anchor_high}"))?;
    Ok(SteeringVector {
        layer,
        contrast: Contrast::Decision {
            low: anchor_low,
            high: anchor_high,
        },
        vector: m_high.sub(&m_low)?,
        n_from,
        n_to,
    })
}

/// Decision vector with the factor vectors removed, for studies of how much
/// of the outcome contrast the inputs explain.
pub fn extract_dv_vector_orthogonalized(
    records: &[TrialRecord],
    layer: usize,
    anchor_low: i32,
    anchor_high: i32,
    min_group_size: usize,
) -> Result<PartialSteeringVector> {
    let dv = extract_dv_vector(records, layer, anchor_low, anchor_high, min_group_size)?;
    let ivs = Factor::ALL
        .iter()
        .map(|&f| extract_default_iv(records, f, layer, min_group_size))
        .collect::<Result<Vec<_>>>()?;
    partial_vector(&dv, &ivs)
}

/// Removes the conditioners' span from `target`, in the order given.
pub fn partial_vector(
    target: &SteeringVector,
    conditioners: &[SteeringVector],
) -> Result<PartialSteeringVector> {
    if let Some(c) = conditioners.iter().find(|c| c.layer != target.layer) {
        return Err(Error::Contract(format!(
            "conditioner {} is at layer {}, target at layer {}",
            c.contrast.label(),
            c.layer,
            target.layer
        )));
    }
    let against: Vec<Vector> = conditioners.iter().map(|c| c.vector.clone()).collect();
    let o = vecspace::orthogonalize(&target.vector, &against)?;
    Ok(PartialSteeringVector {
        base: target.clone(),
        conditioned_on: conditioners.iter().map(|c| c.contrast).collect(),
        vector: o.vector,
        skipped_conditioners: o.skipped.iter().map(|&i| conditioners[i].contrast).collect(),
        degenerate: o.degenerate,
    })
}

/// Partial vector of `factor` against every other vector in `ivs`, in
/// canonical factor order.
pub fn partial_against_others(factor: Factor, ivs: &[SteeringVector]) -> Result<PartialSteeringVector> {
    let mut ordered: Vec<&SteeringVector> = ivs.iter().collect();
    ordered.sort_by_key(|v| v.contrast.factor());
    let target = ordered
        .iter()
        .find(|v| v.contrast.factor() == Some(factor))
        .ok_or_else(|| Error::Contract(format!("no vector for factor {factor}")))?;
    let others: Vec<SteeringVector> = ordered
        .iter()
        .filter(|v| v.contrast.factor() != Some(factor))
        .map(|v| (*v).clone())
        .collect();
    partial_vector(target, &others)
}

/// `p = (<v, v_D>/|v_D|^2) v_D` and the signed length `<v, v_D>/|v_D|`.
pub fn project_onto_dv(partial: &PartialSteeringVector, dv: &SteeringVector) -> Result<(Vector, f64)> {
    if partial.layer() != dv.layer {
        return Err(Error::Contract(format!(
            "partial vector at layer {}, decision vector at layer {}",
            partial.layer(),
            dv.layer
        )));
    }
    let n = dv.vector.norm();
    if n <= EPSILON {
        return Err(Error::DegenerateVector(format!(
            "decision vector at layer {} has zero norm",
            dv.layer
        )));
    }
    let p = vecspace::project(&partial.vector, &dv.vector)?;
    let magnitude = vecspace::dot(&partial.vector, &dv.vector)? / n;
    Ok((p, magnitude))
}

/// Which vector an injection adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionVector {
    #[default]
    DvProjection,
    /// The raw partial vector, for comparison studies only.
    FullPartial,
}

/// Wraps a projected vector as an injection at `layer` with coefficient `alpha`.
pub fn make_injection_spec(
    p: &Vector,
    layer: usize,
    alpha: f64,
    num_layers: usize,
    max_alpha: f64,
) -> Result<InjectionSpec> {
    InjectionSpec::new(layer, alpha, p.clone(), PositionScope::AllPositions, num_layers, max_alpha)
}

/// Builds the injection for a partial vector, projecting it onto the
/// decision vector unless `mode` asks for the raw partial.
pub fn injection_for(
    partial: &PartialSteeringVector,
    dv: &SteeringVector,
    mode: InjectionVector,
    alpha: f64,
    num_layers: usize,
    max_alpha: f64,
) -> Result<InjectionSpec> {
    let v = match mode {
        InjectionVector::DvProjection => project_onto_dv(partial, dv)?.0,
        InjectionVector::FullPartial => partial.vector.clone(),
    };
    make_injection_spec(&v, partial.layer(), alpha, num_layers, max_alpha)
}

/// One factor at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layer: usize,
    pub factor: Factor,
    pub cosine: f64,
    pub dot: f64,
    pub partial_dot: f64,
}

/// Factor-versus-decision relations across all layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub num_layers: usize,
    pub rows: Vec<ProfileRow>,
    /// Partial dots with the framing factor left out of both targets and
    /// conditioners; `cosine` and `dot` repeat the main view.
    pub without_framing: Vec<ProfileRow>,
}

impl LayerProfile {
    pub fn series(&self, factor: Factor) -> Vec<&ProfileRow> {
        self.rows.iter().filter(|r| r.factor == factor).collect()
    }

    pub fn to_csv(&self) -> String {
        rows_csv(&self.rows)
    }

    pub fn without_framing_csv(&self) -> String {
        rows_csv(&self.without_framing)
    }
}

fn rows_csv(rows: &[ProfileRow]) -> String {
    let mut s = String::from("layer,factor,cosine,dot,partial_dot\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.layer, r.factor, r.cosine, r.dot, r.partial_dot);
    }
    s
}

/// Profiles `factors` against the decision vector at every captured layer.
pub fn layer_profile(
    records: &[TrialRecord],
    factors: &[Factor],
    anchors: (i32, i32),
    min_group_size: usize,
) -> Result<LayerProfile> {
    let num_layers = records
        .first()
        .map(|r| r.captures.layers.len())
        .ok_or_else(|| Error::InsufficientData("no records".into()))?;
    let mut factors = factors.to_vec();
    factors.sort();
    factors.dedup();

    let per_layer = (1..=num_layers)
        .into_par_iter()
        .map(|layer| -> Result<(Vec<ProfileRow>, Vec<ProfileRow>)> {
            let dv = extract_dv_vector(records, layer, anchors.0, anchors.1, min_group_size)?;
            let ivs = factors
                .iter()
                .map(|&f| extract_default_iv(records, f, layer, min_group_size))
                .collect::<Result<Vec<_>>>()?;
            let non_framing: Vec<SteeringVector> = ivs
                .iter()
                .filter(|v| v.contrast.factor() != Some(Factor::GiveTake))
                .cloned()
                .collect();
            let mut main = Vec::new();
            let mut reduced = Vec::new();
            for (f, iv) in factors.iter().zip(&ivs) {
                let cosine = vecspace::cosine(&iv.vector, &dv.vector)?;
                let dot = vecspace::dot(&iv.vector, &dv.vector)?;
                let partial = partial_against_others(*f, &ivs)?;
                main.push(ProfileRow {
                    layer,
                    factor: *f,
                    cosine,
                    dot,
                    partial_dot: vecspace::dot(&partial.vector, &dv.vector)?,
                });
                if *f != Factor::GiveTake {
                    let partial = partial_against_others(*f, &non_framing)?;
                    reduced.push(ProfileRow {
                        layer,
                        factor: *f,
                        cosine,
                        dot,
                        partial_dot: vecspace::dot(&partial.vector, &dv.vector)?,
                    });
                }
            }
            Ok((main, reduced))
        })
        .collect::<Result<Vec<_>>>()?;

    let (mut rows, mut without_framing) = (Vec::new(), Vec::new());
    for (m, r) in per_layer {
        rows.extend(m);
        without_framing.extend(r);
    }
    Ok(LayerProfile {
        num_layers,
        rows,
        without_framing,
    })
}

/// Header of a persisted vector file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum VectorMeta {
    Steering {
        layer: usize,
        contrast: Contrast,
        n_from: usize,
        n_to: usize,
    },
    Partial {
        layer: usize,
        contrast: Contrast,
        conditioned_on: Vec<Contrast>,
        skipped_conditioners: Vec<Contrast>,
        degenerate: bool,
    },
    Projection {
        layer: usize,
        contrast: Contrast,
        signed_magnitude: f64,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dim: usize,
    meta: VectorMeta,
}

const VECTOR_FORMAT: &str = "steerlab-vector";
const VECTOR_VERSION: u32 = 1;

/// Writes one JSON header line followed by little-endian f64 components.
pub fn write_vector_file(path: &Path, meta: &VectorMeta, vector: &Vector) -> Result<()> {
    let header = Header {
        format: VECTOR_FORMAT.into(),
        version: VECTOR_VERSION,
        dim: vector.dim(),
        meta: meta.clone(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for c in vector.as_slice() {
        bytes.extend_from_slice(&c.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_vector_file(path: &Path) -> Result<(VectorMeta, Vector)> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.format != VECTOR_FORMAT || header.version != VECTOR_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != header.dim * 8 {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {}", payload.len(), header.dim * 8),
        ));
    }
    let comps = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let v = Vector::new(comps).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header.meta, v))
}

impl SteeringVector {
    pub fn meta(&self) -> VectorMeta {
        VectorMeta::Steering {
            layer: self.layer,
            contrast: self.contrast,
            n_from: self.n_from,
            n_to: self.n_to,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_vector_file(path, &self.meta(), &self.vector)
    }

    pub fn load(path: &Path) -> Result<Self> {
        match read_vector_file(path)? {
            (
                VectorMeta::Steering {
                    layer,
                    contrast,
                    n_from,
                    n_to,
                },
                vector,
            ) => Ok(Self {
                layer,
                contrast,
                vector,
                n_from,
                n_to,
            }),
            _ => Err(Error::format(path, "not a steering vector")),
        }
    }
}
