// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logistic regression of the transfer indicator on the trial factors.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::game::{Factor, Gender, Instruction, Meeting, TrialRecord};

pub const CI_Z: f64 = 1.96;
pub const SIGNIFICANCE: f64 = 0.05;
pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-8;
pub const MIN_ROWS: usize = 20;
/// Coefficients beyond this size with a standard error larger than the
/// estimate itself are treated as quasi-separation.
pub const SEPARATION_BETA: f64 = 15.0;
pub const INTERCEPT: &str = "intercept";
/// Floor on IRLS weights so separated fits keep a finite information matrix.
const MIN_WEIGHT: f64 = 1e-12;

/// Column names of the standard design, in table order.
pub fn standard_columns() -> Vec<String> {
    Factor::ALL
        .iter()
        .map(|f| f.name().to_owned())
        .chain([INTERCEPT.to_owned()])
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub columns: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

impl DesignMatrix {
    pub fn new(columns: Vec<String>, rows: &[Vec<f64>], y: Vec<f64>) -> Result<Self> {
        if rows.len() != y.len() {
            return Err(Error::Contract(format!(
                "{} rows but {} outcomes",
                rows.len(),
                y.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != columns.len()) {
            return Err(Error::DimensionMismatch {
                expected: columns.len(),
                actual: r.len(),
            });
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("outcomes must be 0 or 1".into()));
        }
        let x = DMatrix::from_fn(rows.len(), columns.len(), |i, j| rows[i][j]);
        Ok(Self { columns, x, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Standard design over logic-pass records; `y = 1` iff the transfer is non-zero.
pub fn encode_design(records: &[TrialRecord]) -> Result<DesignMatrix> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for r in records.iter().filter(|r| r.logic_pass) {
        let Some(d) = r.decision else { continue };
        let c = &r.config;
        rows.push(vec![
            f64::from(u8::from(c.instruction == Instruction::Give)),
            f64::from(u8::from(c.meeting == Meeting::Meet)),
            f64::from(u8::from(c.gender == Gender::Female)),
            f64::from(c.age),
            1.0,
        ]);
        y.push(if d != 0 { 1.0 } else { 0.0 });
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("no logic-pass records".into()));
    }
    DesignMatrix::new(standard_columns(), &rows, y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub z: f64,
    pub p: f64,
}

impl Coefficient {
    pub fn significant(&self) -> bool {
        self.p < SIGNIFICANCE
    }

    /// `(exp(b), exp(ci_low), exp(ci_high))`.
    pub fn odds_ratio(&self) -> (f64, f64, f64) {
        (self.estimate.exp(), self.ci_low.exp(), self.ci_high.exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub coefficients: Vec<Coefficient>,
    pub n: usize,
    pub log_likelihood: f64,
    pub null_log_likelihood: f64,
    pub pseudo_r2: f64,
    pub converged: bool,
    pub iterations: usize,
    pub separation: bool,
}

impl RegressionResult {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.estimate).collect()
    }

    /// `variable,coef,ci_low,ci_high,p`, one row per coefficient.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variable,coef,ci_low,ci_high,p\n");
        for c in &self.coefficients {
            let _ = writeln!(s, "{},{},{},{},{}", c.name, c.estimate, c.ci_low, c.ci_high, c.p);
        }
        s
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood of `beta`.
pub fn log_likelihood(x: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> f64 {
    let b = DVector::from_column_slice(beta);
    let eta = x * b;
    eta.iter().zip(y).map(|(e, yi)| yi * e - softplus(*e)).sum()
}

/// Gradient of [`log_likelihood`] at `beta`.
pub fn score(x: &DMatrix<f64>, y: &[f64], beta: &[f64]) -> Vec<f64> {
    let b = DVector::from_column_slice(beta);
    let eta = x * b;
    let resid = DVector::from_iterator(y.len(), eta.iter().zip(y).map(|(e, yi)| yi - sigmoid(*e)));
    (x.transpose() * resid).iter().copied().collect()
}

fn null_log_likelihood(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let ones: f64 = y.iter().sum();
    let p = ones / n;
    if p == 0.0 || p == 1.0 {
        return 0.0;
    }
    ones * p.ln() + (n - ones) * (1.0 - p).ln()
}

/// Maximum-likelihood logistic fit by iteratively reweighted least squares.
pub fn fit_logistic(design: &DesignMatrix) -> Result<RegressionResult> {
    let n = design.n();
    let k = design.columns.len();
    if n < MIN_ROWS {
        return Err(Error::InsufficientData(format!(
            "{n} usable rows, need at least {MIN_ROWS}"
        )));
    }
    let x = &design.x;
    let y = &design.y;

    let xtx = x.transpose() * x;
    let eig = xtx.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
    if !(lo > hi * 1e-12) {
        return Err(Error::SingularDesign(format!(
            "X'X has eigenvalues in [{lo:e}, {hi:e}]"
        )));
    }

    let mut beta = DVector::<f64>::zeros(k);
    let mut converged = false;
    let mut iterations = 0;
    let mut info = xtx;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let eta = x * &beta;
        let mu: Vec<f64> = eta.iter().map(|&e| sigmoid(e)).collect();
        let mut h = DMatrix::<f64>::zeros(k, k);
        let mut g = DVector::<f64>::zeros(k);
        for i in 0..n {
            let w = (mu[i] * (1.0 - mu[i])).max(MIN_WEIGHT);
            let r = y[i] - mu[i];
            for a in 0..k {
                let xa = x[(i, a)];
                g[a] += xa * r;
                for b in 0..=a {
                    h[(a, b)] += w * xa * x[(i, b)];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                h[(b, a)] = h[(a, b)];
            }
        }
        let Some(chol) = h.clone().cholesky() else {
            if iterations == 1 {
                return Err(Error::SingularDesign("information matrix is not positive definite".into()));
            }
            break;
        };
        let step = chol.solve(&g);
        if !step.iter().all(|b| b.is_finite()) {
            break;
        }
        beta += &step;
        info = h;
        if step.amax() < TOLERANCE {
            converged = true;
            break;
        }
    }

    // Standard errors from the information matrix at the final estimate.
    let eta = x * &beta;
    let mut h = DMatrix::<f64>::zeros(k, k);
    for i in 0..n {
        let m = sigmoid(eta[i]);
        let w = (m * (1.0 - m)).max(MIN_WEIGHT);
        for a in 0..k {
            for b in 0..k {
                h[(a, b)] += w * x[(i, a)] * x[(i, b)];
            }
        }
    }
    let cov = h
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| info.try_inverse())
        .ok_or_else(|| Error::SingularDesign("information matrix is singular".into()))?;

    let all_same = y.iter().all(|&v| v == y[0]);
    let mut separation = all_same;
    let coefficients = (0..k)
        .map(|j| {
            let estimate = beta[j];
            let se = cov[(j, j)].max(0.0).sqrt();
            if estimate.abs() > SEPARATION_BETA && se > estimate.abs() {
                separation = true;
            }
            let z = estimate / se;
            Coefficient {
                name: design.columns[j].clone(),
                estimate,
                se,
                ci_low: estimate - CI_Z * se,
                ci_high: estimate + CI_Z * se,
                z,
                p: erfc(z.abs() / std::f64::consts::SQRT_2),
            }
        })
        .collect();

    let ll = log_likelihood(x, y, beta.as_slice());
    let ll_null = null_log_likelihood(y);
    let mut result = RegressionResult {
        coefficients,
        n,
        log_likelihood: ll,
        null_log_likelihood: ll_null,
        pseudo_r2: 0.0,
        converged,
        iterations,
        separation,
    };
    result.pseudo_r2 = pseudo_r2(&result);
    Ok(result)
}

/// McFadden's `1 - ll / ll_null`; zero when the null likelihood is exact.
pub fn pseudo_r2(result: &RegressionResult) -> f64 {
    if result.null_log_likelihood == 0.0 {
        return 0.0;
    }
    1.0 - result.log_likelihood / result.null_log_likelihood
}

/// True iff the two 95% intervals for `variable` are disjoint. Touching
/// endpoints overlap.
pub fn ci_overlap_flag(
    baseline: &RegressionResult,
    manipulated: &RegressionResult,
    variable: &str,
) -> Result<bool> {
    fn get<'r>(r: &'r RegressionResult, variable: &str, which: &str) -> Result<&'r Coefficient> {
        r.coefficient(variable)
            .ok_or_else(|| Error::Contract(format!("{which} result has no variable `{variable}`")))
    }
    let a = get(baseline, variable, "baseline")?;
    let b = get(manipulated, variable, "manipulated")?;
    Ok(intervals_disjoint((a.ci_low, a.ci_high), (b.ci_low, b.ci_high)))
}

pub fn intervals_disjoint(a: (f64, f64), b: (f64, f64)) -> bool {
    a.1 < b.0 || b.1 < a.0
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    pearson(&ranks(a), &ranks(b))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            out[t] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; errors when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InsufficientData("correlation needs two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::DegenerateVector("constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}
