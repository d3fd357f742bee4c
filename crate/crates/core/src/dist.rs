//! Exact categorical distributions and the divergences built on them.
//!
//! Everything here works over small vocabularies with exact sums. All
//! divergences are in nats. Probabilities are floored at [`PROB_FLOOR`]
//! inside logarithms only; stored distributions are never modified.

use std::fmt;

use thiserror::Error;

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `|sum - 1|` accepted when constructing a [`Categorical`].
pub const SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("distribution is empty")]
    Empty,
    #[error("entry {index} is not a valid probability: {value}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("skew parameter {0} outside [0, 1]")]
    InvalidSkew(f64),
    #[error("non-finite logit at index {index}: {value}")]
    NonFiniteLogit { index: usize, value: f64 },
}

pub type Result<T> = std::result::Result<T, DistError>;

/// A probability vector over a finite vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates and wraps a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DistError::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(DistError::InvalidEntry { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(DistError::NotNormalized(sum));
        }
        Ok(Self { probs })
    }

    /// Softmax of a logit vector, computed with max-subtraction.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(DistError::Empty);
        }
        check_logits(logits)?;
        Ok(Self {
            probs: softmax(logits),
        })
    }

    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(DistError::Empty);
        }
        Ok(Self {
            probs: vec![1.0 / size as f64; size],
        })
    }

    pub fn point_mass(size: usize, index: usize) -> Result<Self> {
        if size == 0 {
            return Err(DistError::Empty);
        }
        if index >= size {
            return Err(DistError::DimensionMismatch {
                left: index,
                right: size,
            });
        }
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    /// Index of the largest probability, ties broken by the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// Inverse-CDF draw for a uniform `u` in `[0, 1)`.
    ///
    /// Mass is never assigned to zero-probability entries; rounding at the
    /// top of the CDF falls back to the last positive entry.
    pub fn inverse_cdf(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                acc += p;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

impl fmt::Display for Categorical {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, p) in self.probs.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{p:.6}")?;
        }
        write!(f, ")")
    }
}

/// Skew between teacher and student in a mixture, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct SkewParam(f64);

impl SkewParam {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(DistError::InvalidSkew(alpha));
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub(crate) fn check_logits(logits: &[f64]) -> Result<()> {
    for (index, &value) in logits.iter().enumerate() {
        if !value.is_finite() {
            return Err(DistError::NonFiniteLogit { index, value });
        }
    }
    Ok(())
}

/// Numerically stable softmax. Inputs are assumed finite.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&z| z - lse).collect()
}

#[inline]
fn floored_ln(x: f64) -> f64 {
    x.max(PROB_FLOOR).ln()
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(DistError::DimensionMismatch { left: a, right: b });
    }
    Ok(())
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (floored_ln(pi) - floored_ln(qi)))
        .sum();
    sum.max(0.0)
}

/// `KL(p || q) = sum_i p_i ln(p_i / q_i)` with `0 ln 0 = 0`.
pub fn kl(p: &Categorical, q: &Categorical) -> Result<f64> {
    same_len(p.len(), q.len())?;
    Ok(kl_raw(&p.probs, &q.probs))
}

fn mix(p: &[f64], q: &[f64], alpha: f64) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| alpha * pi + (1.0 - alpha) * qi)
        .collect()
}

/// Elementwise `alpha * p + (1 - alpha) * q`.
pub fn skew_mixture(p: &Categorical, q: &Categorical, alpha: SkewParam) -> Result<Categorical> {
    same_len(p.len(), q.len())?;
    Ok(Categorical {
        probs: mix(&p.probs, &q.probs, alpha.0),
    })
}

/// Skew KL: `KL(p || alpha p + (1 - alpha) q)`.
pub fn skl(p: &Categorical, q: &Categorical, alpha: SkewParam) -> Result<f64> {
    same_len(p.len(), q.len())?;
    let m = mix(&p.probs, &q.probs, alpha.0);
    Ok(kl_raw(&p.probs, &m))
}

/// Skew reverse KL: `KL(q || (1 - alpha) p + alpha q)`.
pub fn srkl(p: &Categorical, q: &Categorical, alpha: SkewParam) -> Result<f64> {
    same_len(p.len(), q.len())?;
    let m = mix(&q.probs, &p.probs, alpha.0);
    Ok(kl_raw(&q.probs, &m))
}

/// Pulls a gradient with respect to `q` back through `q = softmax(z)`.
fn softmax_pullback(q: &[f64], dq: &[f64]) -> Vec<f64> {
    let inner: f64 = q.iter().zip(dq).map(|(qi, gi)| qi * gi).sum();
    q.iter().zip(dq).map(|(qi, gi)| qi * (gi - inner)).collect()
}

/// Gradient of `skl(p, softmax(logits), alpha)` with respect to `logits`.
pub fn skl_grad_logits(p: &Categorical, logits: &[f64], alpha: SkewParam) -> Result<Vec<f64>> {
    same_len(p.len(), logits.len())?;
    check_logits(logits)?;
    let a = alpha.0;
    if a == 1.0 {
        return Ok(vec![0.0; logits.len()]);
    }
    let q = softmax(logits);
    let m = mix(&p.probs, &q, a);
    // d/dq_j of -sum_i p_i ln m_i
    let dq: Vec<f64> = p
        .probs
        .iter()
        .zip(&m)
        .map(|(&pi, &mi)| {
            if pi > 0.0 {
                -pi * (1.0 - a) / mi.max(PROB_FLOOR)
            } else {
                0.0
            }
        })
        .collect();
    Ok(softmax_pullback(&q, &dq))
}

/// Gradient of `srkl(p, softmax(logits), alpha)` with respect to `logits`.
pub fn srkl_grad_logits(p: &Categorical, logits: &[f64], alpha: SkewParam) -> Result<Vec<f64>> {
    same_len(p.len(), logits.len())?;
    check_logits(logits)?;
    let a = alpha.0;
    if a == 1.0 {
        return Ok(vec![0.0; logits.len()]);
    }
    let q = softmax(logits);
    let n = mix(&q, &p.probs, a);
    // d/dq_j of sum_i q_i (ln q_i - ln n_i), with n = a q + (1 - a) p
    let dq: Vec<f64> = q
        .iter()
        .zip(&n)
        .map(|(&qi, &ni)| floored_ln(qi) + 1.0 - floored_ln(ni) - a * qi / ni.max(PROB_FLOOR))
        .collect();
    Ok(softmax_pullback(&q, &dq))
}

/// Gradient of `KL(p || softmax(logits))`, i.e. `softmax(logits) - p`.
pub fn kl_grad_logits(p: &Categorical, logits: &[f64]) -> Result<Vec<f64>> {
    same_len(p.len(), logits.len())?;
    check_logits(logits)?;
    Ok(softmax(logits)
        .into_iter()
        .zip(&p.probs)
        .map(|(qi, pi)| qi - pi)
        .collect())
}
