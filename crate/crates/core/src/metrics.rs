//! Reconstruction and distributional metrics.

use crate::error::{shape_err, Error, Result};

const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// `f64::INFINITY` for an exact reconstruction.
    pub psnr_db: f64,
    pub mse: f64,
    pub token_accuracy: f64,
}

pub fn mse(x: &[f64], x_ref: &[f64]) -> Result<f64> {
    if x.len() != x_ref.len() {
        return Err(shape_err(x_ref.len(), x.len()));
    }
    if x.is_empty() {
        return Err(Error::InvalidParameter("empty signal".into()));
    }
    Ok(x.iter().zip(x_ref).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}

/// `10 log10(peak^2 / mse)`.
pub fn psnr(x: &[f64], x_ref: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak {peak} must be positive")));
    }
    let m = mse(x, x_ref)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / m).log10()
    })
}

/// `max - min` of the reference, or 1 when the reference is constant.
pub fn dynamic_range(x_ref: &[f64]) -> f64 {
    let lo = x_ref.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x_ref.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(shape_err(p.len(), q.len()));
    }
    for (row, d) in [p, q].into_iter().enumerate() {
        let sum: f64 = d.iter().sum();
        if d.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::NotNormalized { row, sum });
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

pub fn token_accuracy(tokens: &[usize], truth: &[usize]) -> Result<f64> {
    if tokens.len() != truth.len() {
        return Err(shape_err(truth.len(), tokens.len()));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidParameter("empty token field".into()));
    }
    let hits = tokens.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / tokens.len() as f64)
}

pub fn report(x: &[f64], x_ref: &[f64], peak: f64, tokens: &[usize], truth: &[usize]) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr_db: psnr(x, x_ref, peak)?,
        mse: mse(x, x_ref)?,
        token_accuracy: token_accuracy(tokens, truth)?,
    })
}
