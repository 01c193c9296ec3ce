//! Dense kernels and the differentiable scalar functions the losses are built from.
//!
//! All reductions run left to right in index order, so results are
//! bit-reproducible for a given input.

use std::ops::Deref;

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before every logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

/// Vectors with a norm below this are rejected by [`cosine_similarity`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Tolerance on `sum == 1` for [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Finite real vector holding logits or features.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite entry at index {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

/// Probability vector over `K >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "probability vector needs at least 2 entries, got {}",
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("probability {v} at index {i} outside [0, 1]")));
            }
        }
        let sum = ordered_sum(values.iter().copied());
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("uniform over 0 classes"));
        }
        Self::new(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::invalid(format!("class {class} out of range for K = {k}")));
        }
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Self::new(v)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |acc, v| acc + v)
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    ordered_sum(u.iter().zip(v).map(|(a, b)| a * b))
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: length mismatch {a} vs {b}")));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// `exp(z_k / tau) / sum_m exp(z_m / tau)` with max-subtraction.
pub fn softmax_with_temperature(z: &[f64], tau: f64) -> Result<ProbVector> {
    check_tau(tau)?;
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite logit at index {i}")));
    }
    if z.len() < 2 {
        return Err(Error::invalid("softmax needs at least 2 logits"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total = ordered_sum(exps.iter().copied());
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

pub fn softmax(z: &[f64]) -> Result<ProbVector> {
    softmax_with_temperature(z, 1.0)
}

/// `-sum_k target_k * ln(max(pred_k, LOG_CLAMP))`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(target.len(), pred.len(), "cross_entropy")?;
    Ok(-ordered_sum(
        target.iter().zip(pred).map(|(&t, &p)| t * p.max(LOG_CLAMP).ln()),
    ))
}

/// Shannon entropy `H(p) = H(p, p)`.
pub fn entropy(p: &[f64]) -> f64 {
    -ordered_sum(p.iter().map(|&v| v * v.max(LOG_CLAMP).ln()))
}

/// `H(target, pred) - H(target)`.
pub fn kl_divergence(target: &[f64], pred: &[f64]) -> Result<f64> {
    Ok(cross_entropy(target, pred)? - cross_entropy(target, target)?)
}

/// Cosine of the angle between `u` and `v`, clamped into `[-1, 1]`.
///
/// Near-zero inputs are an error rather than a silent 0, since a default
/// similarity would corrupt any ranking built on top of it.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    check_len(u.len(), v.len(), "cosine_similarity")?;
    let nu = norm(u);
    let nv = norm(v);
    if nu < NORM_FLOOR || nv < NORM_FLOOR {
        return Err(Error::DegenerateVector(format!(
            "cosine similarity of vectors with norms {nu:e} and {nv:e}"
        )));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Pulls an upstream gradient `dL/dp` back through `p = softmax(z / tau)`.
///
/// `dL/dz_k = p_k (g_k - <g, p>) / tau`
pub fn softmax_backward(p: &[f64], tau: f64, upstream: &[f64]) -> Vec<f64> {
    let inner = dot(upstream, p);
    p.iter()
        .zip(upstream)
        .map(|(&pk, &gk)| pk * (gk - inner) / tau)
        .collect()
}

/// Gradient of `cos(u, v)` with respect to `u`.
pub fn cosine_gradient(u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let c = cosine_similarity(u, v)?;
    let nu = norm(u);
    let nv = norm(v);
    Ok(u.iter()
        .zip(v)
        .map(|(&a, &b)| b / (nu * nv) - c * a / (nu * nu))
        .collect())
}

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max_i |g_a - g_n| / max(1, |g_a|, |g_n|)`
    pub max_relative_error: f64,
    pub worst_parameter_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub const DEFAULT_GRAD_EPS: f64 = 1e-4;

/// Central-difference gradient of a scalar function.
pub fn numeric_gradient<F>(f: F, params: &[f64], epsilon: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        probe[i] = params[i] + epsilon;
        let plus = f(&probe)?;
        probe[i] = params[i] - epsilon;
        let minus = f(&probe)?;
        probe[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericInstability(format!(
                "non-finite loss while probing coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Compares the analytic gradient returned by `loss_fn` at `params` against
/// central finite differences of its value.
pub fn grad_check<F>(loss_fn: F, params: &[f64], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let (value, analytic) = loss_fn(params)?;
    if !value.is_finite() {
        return Err(Error::NumericInstability("non-finite loss at the base point".into()));
    }
    check_len(analytic.len(), params.len(), "grad_check analytic gradient")?;
    let numeric = numeric_gradient(|p| loss_fn(p).map(|(v, _)| v), params, epsilon)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&ga, &gn)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (ga - gn).abs() / 1f64.max(ga.abs()).max(gn.abs());
        if err > report.max_relative_error {
            report = GradCheckReport {
                max_relative_error: err,
                worst_parameter_index: i,
                analytic: ga,
                numeric: gn,
            };
        }
    }
    Ok(report)
}

pub fn argmax(values: &[f64]) -> usize {
    // strict `>` keeps the lowest index on ties
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
