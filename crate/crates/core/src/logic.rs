//! Product real-logic semantics over batches of truth degrees.
//!
//! Connectives act elementwise on [`TruthTensor`]s. The two quantifiers are
//! generalized means: `exists` is the power mean of the truth values and
//! `forall` is one minus the power mean of their complements. Both reduce a
//! tensor to a single truth degree.
//!
//! The same formulas are available as differentiable graph nodes in
//! [`crate::autodiff`]; the functions here are the exact `f64` reference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default exponent of both generalized-mean aggregators.
pub const DEFAULT_P: f64 = 2.0;

/// Guard used by [`batch_normalize`] when the batch range collapses.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// A non-empty batch of truth degrees, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthTensor(Vec<f64>);

impl TruthTensor {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("truth tensor must hold at least one value".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("truth value {v} outside [0, 1]")));
        }
        Ok(TruthTensor(values))
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![value])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::shape(op, format!("{} vs {}", self.len(), other.len())));
        }
        // The connectives are closed on [0,1]; clamping only absorbs rounding.
        Ok(TruthTensor(
            self.0.iter().zip(&other.0).map(|(&a, &b)| f(a, b).clamp(0.0, 1.0)).collect(),
        ))
    }
}

/// Exponent shared by the `exists`/`forall` aggregators.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub p: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig { p: DEFAULT_P }
    }
}

impl AggregatorConfig {
    pub fn new(p: f64) -> Result<Self> {
        let cfg = AggregatorConfig { p };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p.is_finite() && self.p >= 1.0) {
            return Err(Error::Config(format!("aggregator exponent p = {} must be >= 1", self.p)));
        }
        Ok(())
    }
}

/// Standard negation `1 - a`.
pub fn negate(a: &TruthTensor) -> TruthTensor {
    TruthTensor(a.0.iter().map(|&v| 1.0 - v).collect())
}

/// Product t-norm `a * b`.
pub fn tnorm(a: &TruthTensor, b: &TruthTensor) -> Result<TruthTensor> {
    a.zip_with(b, "tnorm", |x, y| x * y)
}

/// Dual t-conorm `a + b - a * b`.
pub fn tconorm(a: &TruthTensor, b: &TruthTensor) -> Result<TruthTensor> {
    a.zip_with(b, "tconorm", |x, y| x + y - x * y)
}

/// Reichenbach implication `1 - a + a * b`.
pub fn implies(a: &TruthTensor, b: &TruthTensor) -> Result<TruthTensor> {
    a.zip_with(b, "implies", |x, y| 1.0 - x + x * y)
}

/// Power mean `((1/n) sum a_i^p)^(1/p)`.
pub fn power_mean(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("aggregation over an empty set".into()));
    }
    let n = values.len() as f64;
    let s = values.iter().map(|v| v.powf(p)).sum::<f64>() / n;
    Ok(s.powf(1.0 / p))
}

/// Existential quantifier: generalized mean of the truth values.
pub fn exists(a: &TruthTensor, cfg: AggregatorConfig) -> Result<f64> {
    Ok(power_mean(&a.0, cfg.p)?.clamp(0.0, 1.0))
}

/// Universal quantifier: generalized mean with respect to the error `1 - a`.
pub fn forall(a: &TruthTensor, cfg: AggregatorConfig) -> Result<f64> {
    let err: Vec<f64> = a.0.iter().map(|v| 1.0 - v).collect();
    Ok((1.0 - power_mean(&err, cfg.p)?).clamp(0.0, 1.0))
}

/// Per-batch min-max rescaling of raw nonnegative predicate outputs into
/// `[0, 1]`: `(x - min) / (max - min + eps)`. A batch whose range is below
/// `eps` maps to all zeros.
pub fn batch_normalize(raw: &[f64]) -> Result<TruthTensor> {
    if raw.is_empty() {
        return Err(Error::Domain("cannot normalize an empty batch".into()));
    }
    if let Some(v) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite predicate value {v}")));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range < NORMALIZE_EPS {
        return Ok(TruthTensor(vec![0.0; raw.len()]));
    }
    let denom = range + NORMALIZE_EPS;
    Ok(TruthTensor(raw.iter().map(|&v| ((v - lo) / denom).clamp(0.0, 1.0)).collect()))
}
