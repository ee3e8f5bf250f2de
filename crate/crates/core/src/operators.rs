//! Linear forward operators and the Gaussian measurement model.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum LinearOperator {
    Identity { dim: usize },
    /// Keeps the listed coordinates, in order (inpainting).
    Mask { dim: usize, kept: Vec<usize> },
    /// Averages consecutive blocks of `factor` coordinates.
    Downsample { dim: usize, factor: usize },
    /// Same-size convolution with a centred odd-length kernel, zero padded.
    Blur { dim: usize, kernel: Vec<f64> },
    /// Explicit row-major matrix.
    Dense { rows: usize, cols: usize, data: Vec<f64> },
}

impl LinearOperator {
    pub fn identity(dim: usize) -> Self {
        LinearOperator::Identity { dim }
    }

    pub fn mask(dim: usize, kept: Vec<usize>) -> Result<Self> {
        if kept.is_empty() {
            return Err(Error::InvalidParameter(
                "masking operator must keep at least one coordinate".into(),
            ));
        }
        if let Some(&bad) = kept.iter().find(|&&i| i >= dim) {
            return Err(Error::InvalidParameter(format!(
                "kept index {bad} outside signal of length {dim}"
            )));
        }
        Ok(LinearOperator::Mask { dim, kept })
    }

    pub fn downsample(dim: usize, factor: usize) -> Result<Self> {
        if factor == 0 || !dim.is_multiple_of(factor) {
            return Err(Error::InvalidParameter(format!(
                "downsampling factor {factor} must divide signal length {dim}"
            )));
        }
        Ok(LinearOperator::Downsample { dim, factor })
    }

    pub fn blur(dim: usize, len: usize, std: f64) -> Result<Self> {
        Ok(LinearOperator::Blur {
            dim,
            kernel: gaussian_kernel(len, std)?,
        })
    }

    pub fn dense(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(rows * cols, data.len()));
        }
        Ok(LinearOperator::Dense { rows, cols, data })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim }
            | LinearOperator::Mask { dim, .. }
            | LinearOperator::Downsample { dim, .. }
            | LinearOperator::Blur { dim, .. } => *dim,
            LinearOperator::Dense { cols, .. } => *cols,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LinearOperator::Identity { dim } | LinearOperator::Blur { dim, .. } => *dim,
            LinearOperator::Mask { kept, .. } => kept.len(),
            LinearOperator::Downsample { dim, factor } => dim / factor,
            LinearOperator::Dense { rows, .. } => *rows,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LinearOperator::Identity { .. } => "identity",
            LinearOperator::Mask { .. } => "mask",
            LinearOperator::Downsample { .. } => "downsample",
            LinearOperator::Blur { .. } => "blur",
            LinearOperator::Dense { .. } => "dense",
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(shape_err(self.input_dim(), x.len()));
        }
        Ok(match self {
            LinearOperator::Identity { .. } => x.to_vec(),
            LinearOperator::Mask { kept, .. } => kept.iter().map(|&i| x[i]).collect(),
            LinearOperator::Downsample { factor, .. } => x
                .chunks(*factor)
                .map(|c| c.iter().sum::<f64>() / *factor as f64)
                .collect(),
            LinearOperator::Blur { dim, kernel } => {
                let half = (kernel.len() / 2) as isize;
                (0..*dim as isize)
                    .map(|i| {
                        kernel
                            .iter()
                            .enumerate()
                            .filter_map(|(j, w)| {
                                let src = i + j as isize - half;
                                (0..*dim as isize).contains(&src).then(|| w * x[src as usize])
                            })
                            .sum()
                    })
                    .collect()
            }
            LinearOperator::Dense { rows, cols, data } => (0..*rows)
                .map(|r| data[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        })
    }

    /// `A^T v`.
    pub fn adjoint(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.output_dim() {
            return Err(shape_err(self.output_dim(), v.len()));
        }
        let n = self.input_dim();
        Ok(match self {
            LinearOperator::Identity { .. } => v.to_vec(),
            LinearOperator::Mask { kept, .. } => {
                let mut out = vec![0.0; n];
                for (&i, &val) in kept.iter().zip(v) {
                    out[i] += val;
                }
                out
            }
            LinearOperator::Downsample { factor, .. } => v
                .iter()
                .flat_map(|&val| std::iter::repeat_n(val / *factor as f64, *factor))
                .collect(),
            LinearOperator::Blur { dim, kernel } => {
                let half = (kernel.len() / 2) as isize;
                let mut out = vec![0.0; n];
                for i in 0..*dim as isize {
                    for (j, w) in kernel.iter().enumerate() {
                        let src = i + j as isize - half;
                        if (0..*dim as isize).contains(&src) {
                            out[src as usize] += w * v[i as usize];
                        }
                    }
                }
                out
            }
            LinearOperator::Dense { rows, cols, data } => {
                let mut out = vec![0.0; *cols];
                for r in 0..*rows {
                    for (o, a) in out.iter_mut().zip(&data[r * cols..(r + 1) * cols]) {
                        *o += a * v[r];
                    }
                }
                out
            }
        })
    }

    /// Explicit matrix, row-major. Handy for tests and small problems.
    pub fn to_dense(&self) -> Vec<f64> {
        let (m, n) = (self.output_dim(), self.input_dim());
        let mut out = vec![0.0; m * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply(&e).expect("unit vector has the input length");
            for (i, v) in col.into_iter().enumerate() {
                out[i * n + j] = v;
            }
            e[j] = 0.0;
        }
        out
    }
}

/// Discrete Gaussian of odd length `len` centred at `(len-1)/2`, normalized to sum to 1.
pub fn gaussian_kernel(len: usize, std: f64) -> Result<Vec<f64>> {
    if len == 0 || len.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "blur kernel length {len} must be odd"
        )));
    }
    if !(std > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "blur standard deviation {std} must be positive"
        )));
    }
    let c = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * std * std)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProblem {
    pub op: LinearOperator,
    pub y: Vec<f64>,
    pub sigma_eta: f64,
}

impl LinearProblem {
    pub fn new(op: LinearOperator, y: Vec<f64>, sigma_eta: f64) -> Result<Self> {
        if y.len() != op.output_dim() {
            return Err(shape_err(op.output_dim(), y.len()));
        }
        if !(sigma_eta >= 0.0) || !sigma_eta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "noise level {sigma_eta} must be finite and non-negative"
            )));
        }
        Ok(Self { op, y, sigma_eta })
    }

    /// `y = A x0 + sigma * xi`.
    pub fn simulate<R: Rng + ?Sized>(
        op: LinearOperator,
        x0_true: &[f64],
        sigma_eta: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let clean = op.apply(x0_true)?;
        let y = clean
            .into_iter()
            .map(|v| v + sigma_eta * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(op, y, sigma_eta)
    }

    /// `y - A x0`.
    pub fn residual(&self, x0: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .y
            .iter()
            .zip(self.op.apply(x0)?)
            .map(|(y, ax)| y - ax)
            .collect())
    }

    pub fn squared_residual(&self, x0: &[f64]) -> Result<f64> {
        Ok(self.residual(x0)?.iter().map(|r| r * r).sum())
    }

    pub fn residual_norm(&self, x0: &[f64]) -> Result<f64> {
        Ok(self.squared_residual(x0)?.sqrt())
    }

    /// `-||y - A x0||^2 / (2 sigma^2)`, Gaussian constant dropped.
    pub fn log_likelihood(&self, x0: &[f64]) -> Result<f64> {
        if self.sigma_eta <= 0.0 {
            return Err(Error::InvalidParameter(
                "log-likelihood needs a positive noise level".into(),
            ));
        }
        Ok(-self.squared_residual(x0)? / (2.0 * self.sigma_eta * self.sigma_eta))
    }
}

/// One value per line, `{:e}` round-trip precision.
pub fn write_vector(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let mut s = String::with_capacity(values.len() * 24);
    for v in values {
        s.push_str(&format!("{v:e}\n"));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Whitespace-separated floats; blank lines and `#` comments ignored.
pub fn read_vector(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            out.push(tok.parse().map_err(|_| Error::Config {
                line: n + 1,
                message: format!("not a number: {tok:?}"),
            })?);
        }
    }
    Ok(out)
}
