// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense real-vector algebra used by every steering construction.
//!
//! All operations are pure and work on immutable [`Vector`] values. The
//! zero-norm guard [`EPSILON`] is applied relative to the input scale where
//! a vector is compared against a quantity derived from itself (e.g. a
//! residual after orthogonalization), and absolutely everywhere else.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero-norm guard.
pub const EPSILON: f64 = 1e-12;

/// A finite, non-empty vector of `f64` components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting empty input and non-finite components.
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Contract("vector must have at least one component".into()));
        }
        if let Some(i) = components.iter().position(|c| !c.is_finite()) {
            return Err(Error::Contract(format!(
                "component {i} is not finite ({})",
                components[i]
            )));
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "zero-dimensional vector");
        Self(vec![0.0; dim])
    }

    /// Unit vector along axis `i`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    /// Wraps components that are finite by construction.
    pub(crate) fn from_raw(components: Vec<f64>) -> Self {
        debug_assert!(!components.is_empty());
        debug_assert!(components.iter().all(|c| c.is_finite()));
        Self(components)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self::from_raw(self.0.iter().map(|x| x * factor).collect())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_dims(self, other)?;
        Ok(Self::from_raw(
            self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect(),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dims(self, other)?;
        Ok(Self::from_raw(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    /// `self + factor * other`.
    pub fn add_scaled(&self, factor: f64, other: &Self) -> Result<Self> {
        check_dims(self, other)?;
        Ok(Self::from_raw(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + factor * b)
                .collect(),
        ))
    }

    /// Unit vector in the same direction.
    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n <= EPSILON {
            return Err(Error::DegenerateVector(format!(
                "cannot normalize vector with norm {n:e}"
            )));
        }
        Ok(self.scale(1.0 / n))
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(value: Vector) -> Self {
        value.0
    }
}

fn check_dims(a: &Vector, b: &Vector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(())
}

/// Sum of component-wise products.
pub fn dot(a: &Vector, b: &Vector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum())
}

/// Cosine of the angle between `a` and `b`.
///
/// Zero-norm inputs are an error rather than a silent zero: a cosine against
/// a vector with no direction is undefined.
pub fn cosine(a: &Vector, b: &Vector) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na <= EPSILON || nb <= EPSILON {
        return Err(Error::DegenerateVector(format!(
            "cosine of vectors with norms {na:e} and {nb:e}"
        )));
    }
    Ok((dot(a, b)? / (na * nb)).clamp(-1.0, 1.0))
}

/// Orthogonal projection of `a` onto the line spanned by `onto`.
pub fn project(a: &Vector, onto: &Vector) -> Result<Vector> {
    check_dims(a, onto)?;
    let nn = dot(onto, onto)?;
    if nn.sqrt() <= EPSILON {
        return Err(Error::DegenerateVector(format!(
            "projection onto vector with norm {:e}",
            nn.sqrt()
        )));
    }
    Ok(onto.scale(dot(a, onto)? / nn))
}

/// Result of removing a set of conditioning directions from a target.
#[derive(Debug, Clone, PartialEq)]
pub struct Orthogonalized {
    pub vector: Vector,
    /// Indices (into the conditioner list) that were numerically dependent on
    /// earlier conditioners and therefore contributed no new direction.
    pub skipped: Vec<usize>,
    /// Set when the target was zero or lay entirely inside the conditioner span.
    pub degenerate: bool,
}

/// Removes from `target` every component lying in the span of `against`.
///
/// Conditioners are processed in the order given. Each is first
/// orthonormalized against the already-accepted ones with modified
/// Gram-Schmidt plus one re-orthogonalization pass; a conditioner whose
/// remainder falls below the zero-norm guard is recorded in `skipped`. The
/// target is then swept against the accepted basis twice.
///
/// With a single conditioner `c` this is `t - (<t,c>/|c|^2) c`.
pub fn orthogonalize(target: &Vector, against: &[Vector]) -> Result<Orthogonalized> {
    for c in against {
        check_dims(target, c)?;
    }

    let mut basis: Vec<Vector> = Vec::with_capacity(against.len());
    let mut skipped = Vec::new();
    for (i, c) in against.iter().enumerate() {
        let scale = c.norm();
        let mut r = c.clone();
        for _ in 0..2 {
            for q in &basis {
                let coef = dot(&r, q)?;
                r = r.add_scaled(-coef, q)?;
            }
        }
        let rn = r.norm();
        if rn <= EPSILON * scale.max(1.0) {
            skipped.push(i);
            continue;
        }
        basis.push(r.scale(1.0 / rn));
    }

    let tn = target.norm();
    if tn == 0.0 {
        return Ok(Orthogonalized {
            vector: Vector::zeros(target.dim()),
            skipped,
            degenerate: true,
        });
    }

    let mut out = target.clone();
    if let [q] = basis.as_slice() {
        // Single direction: apply the textbook formula against the raw
        // conditioner so the result matches it to rounding.
        let c = &against[first_kept(&skipped, against.len())];
        out = out.add_scaled(-dot(&out, c)? / dot(c, c)?, c)?;
        let coef = dot(&out, q)?;
        out = out.add_scaled(-coef, q)?;
    } else {
        for _ in 0..2 {
            for q in &basis {
                let coef = dot(&out, q)?;
                out = out.add_scaled(-coef, q)?;
            }
        }
    }

    if out.norm() <= EPSILON * tn.max(1.0) * 1e2 {
        return Ok(Orthogonalized {
            vector: Vector::zeros(target.dim()),
            skipped,
            degenerate: true,
        });
    }
    Ok(Orthogonalized {
        vector: out,
        skipped,
        degenerate: false,
    })
}

fn first_kept(skipped: &[usize], n: usize) -> usize {
    (0..n).find(|i| !skipped.contains(i)).unwrap_or(0)
}

/// Component-wise mean of a non-empty set of equal-dimension vectors.
pub fn mean<'a>(vectors: impl IntoIterator<Item = &'a Vector>) -> Result<Vector> {
    let mut iter = vectors.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::InsufficientData("mean of an empty set".into()))?;
    let mut acc = first.0.clone();
    let mut n = 1usize;
    for v in iter {
        check_dims(first, v)?;
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += x;
        }
        n += 1;
    }
    let inv = 1.0 / n as f64;
    Ok(Vector::from_raw(acc.into_iter().map(|a| a * inv).collect()))
}
