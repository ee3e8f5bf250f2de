//! Per-dimension categorical distributions over the `K` clean tokens.

use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Floor applied to log-probabilities before they enter a softmax or a KL term.
pub const LOG_FLOOR: f64 = -30.0;

const ROW_TOLERANCE: f64 = 1e-8;

/// `rows` independent categorical distributions over `cols` tokens, stored row-major.
///
/// Used both for denoiser outputs and for the variational parameters being optimized.
/// Rows never carry a MASK column: clean data is never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalField {
    rows: usize,
    cols: usize,
    probs: Vec<f64>,
}

impl CategoricalField {
    pub fn new(rows: usize, cols: usize, probs: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter(
                "categorical field needs at least one row and column".into(),
            ));
        }
        if probs.len() != rows * cols {
            return Err(shape_err(rows * cols, probs.len()));
        }
        for (i, row) in probs.chunks(cols).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite())
                || (sum - 1.0).abs() > ROW_TOLERANCE
            {
                return Err(Error::NotNormalized { row: i, sum });
            }
        }
        Ok(Self { rows, cols, probs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err(format!("rows of length {cols}"), "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            probs: vec![1.0 / cols as f64; rows * cols],
        }
    }

    pub fn one_hot(cols: usize, tokens: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; tokens.len() * cols];
        for (i, &k) in tokens.iter().enumerate() {
            if k >= cols {
                return Err(Error::TokenOutOfRange {
                    token: k,
                    limit: cols,
                });
            }
            probs[i * cols + k] = 1.0;
        }
        Self::new(tokens.len(), cols, probs)
    }

    /// Row-wise softmax of unconstrained logits.
    pub fn from_logits(rows: usize, cols: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != rows * cols {
            return Err(shape_err(rows * cols, logits.len()));
        }
        let mut probs = Vec::with_capacity(logits.len());
        for row in logits.chunks(cols) {
            probs.extend(softmax(row));
        }
        Self::new(rows, cols, probs)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Natural logs clamped at [`LOG_FLOOR`].
    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|&p| clamped_ln(p)).collect()
    }

    pub fn argmax(&self) -> Vec<usize> {
        (0..self.rows).map(|i| argmax(self.row(i))).collect()
    }

    /// Probability of a full token assignment under the product distribution.
    pub fn joint_prob(&self, tokens: &[usize]) -> f64 {
        tokens
            .iter()
            .enumerate()
            .map(|(i, &k)| self.probs[i * self.cols + k])
            .product()
    }
}

pub fn clamped_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

/// Inverse-CDF draw from a probability vector. Consumes exactly one uniform.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        acc += p;
        if target < acc {
            return k;
        }
    }
    last_positive
}
