//! Codebook lookup and decoding into signal space, hard (tokens) or soft (Gumbel-Softmax).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::field::{softmax, LOG_FLOOR};
use crate::noise::TokenField;

/// `K` embedding vectors of dimension `d_b`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    num_tokens: usize,
    dim: usize,
    vectors: Vec<f64>,
}

impl Codebook {
    pub fn new(vectors: &[Vec<f64>]) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.is_empty() || dim == 0 {
            return Err(Error::InvalidParameter("codebook must be non-empty".into()));
        }
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(shape_err(format!("vectors of length {dim}"), "ragged codebook"));
        }
        if vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("codebook has non-finite entries".into()));
        }
        Ok(Self {
            num_tokens: vectors.len(),
            dim,
            vectors: vectors.concat(),
        })
    }

    /// Entries drawn i.i.d. from `N(0, scale^2)`.
    pub fn random<R: Rng + ?Sized>(num_tokens: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let vectors = (0..num_tokens * dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            num_tokens,
            dim,
            vectors,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    /// Stacked embeddings `Z` for a clean token field, flattened row-major (`d_z * d_b`).
    pub fn assign(&self, z0: &TokenField) -> Result<Vec<f64>> {
        z0.ensure_clean()?;
        if z0.num_tokens() != self.num_tokens {
            return Err(shape_err(self.num_tokens, z0.num_tokens()));
        }
        Ok(z0
            .tokens()
            .iter()
            .flat_map(|&k| self.vector(k).iter().copied())
            .collect())
    }

    /// Weighted sums `sum_k w_{i,k} b_k` for a `d_z x K` weight matrix.
    pub fn mix(&self, weights: &[f64]) -> Vec<f64> {
        let k = self.num_tokens;
        let mut out = Vec::with_capacity(weights.len() / k * self.dim);
        for row in weights.chunks(k) {
            let mut acc = vec![0.0; self.dim];
            for (kk, &w) in row.iter().enumerate() {
                for (a, b) in acc.iter_mut().zip(self.vector(kk)) {
                    *a += w * b;
                }
            }
            out.extend(acc);
        }
        out
    }
}

/// Affine map from stacked embeddings to signal space.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecoder {
    input_dim: usize,
    output_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearDecoder {
    pub fn new(input_dim: usize, output_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != input_dim * output_dim {
            return Err(shape_err(input_dim * output_dim, weight.len()));
        }
        if bias.len() != output_dim {
            return Err(shape_err(output_dim, bias.len()));
        }
        Ok(Self {
            input_dim,
            output_dim,
            weight,
            bias,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        (0..dim).for_each(|i| weight[i * dim + i] = 1.0);
        Self {
            input_dim: dim,
            output_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    /// Weights `N(0, 1/input_dim)`, zero bias.
    pub fn random<R: Rng + ?Sized>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let scale = (1.0 / input_dim as f64).sqrt();
        let weight = (0..input_dim * output_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            input_dim,
            output_dim,
            weight,
            bias: vec![0.0; output_dim],
        }
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn forward(&self, z: &[f64]) -> Vec<f64> {
        matvec(&self.weight, self.output_dim, self.input_dim, z)
            .into_iter()
            .zip(&self.bias)
            .map(|(a, b)| a + b)
            .collect()
    }
}

/// One hidden `tanh` layer: `x = W2 tanh(W1 z + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDecoder {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl MlpDecoder {
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut draw = |n: usize, fan_in: usize| -> Vec<f64> {
            let s = (1.0 / fan_in as f64).sqrt();
            (0..n)
                .map(|_| s * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let w1 = draw(hidden_dim * input_dim, input_dim);
        let b1 = draw(hidden_dim, 4);
        let w2 = draw(output_dim * hidden_dim, hidden_dim);
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            w1,
            b1,
            w2,
            b2: vec![0.0; output_dim],
        }
    }

    fn hidden(&self, z: &[f64]) -> Vec<f64> {
        matvec(&self.w1, self.hidden_dim, self.input_dim, z)
            .into_iter()
            .zip(&self.b1)
            .map(|(a, b)| (a + b).tanh())
            .collect()
    }

    fn forward(&self, z: &[f64]) -> Vec<f64> {
        let h = self.hidden(z);
        matvec(&self.w2, self.output_dim, self.hidden_dim, &h)
            .into_iter()
            .zip(&self.b2)
            .map(|(a, b)| a + b)
            .collect()
    }

    fn backward(&self, z: &[f64], grad_out: &[f64]) -> Vec<f64> {
        let h = self.hidden(z);
        let gh = matvec_t(&self.w2, self.output_dim, self.hidden_dim, grad_out);
        let pre: Vec<f64> = gh.iter().zip(&h).map(|(g, h)| g * (1.0 - h * h)).collect();
        matvec_t(&self.w1, self.hidden_dim, self.input_dim, &pre)
    }
}

/// Decoder `D: R^{d_z x d_b} -> R^{d_x0}` acting on flattened stacked embeddings.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Linear(LinearDecoder),
    Mlp(MlpDecoder),
}

impl Decoder {
    pub fn input_dim(&self) -> usize {
        match self {
            Decoder::Linear(d) => d.input_dim,
            Decoder::Mlp(d) => d.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Decoder::Linear(d) => d.output_dim,
            Decoder::Mlp(d) => d.output_dim,
        }
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(shape_err(self.input_dim(), z.len()));
        }
        Ok(match self {
            Decoder::Linear(d) => d.forward(z),
            Decoder::Mlp(d) => d.forward(z),
        })
    }

    /// Vector-Jacobian product: gradient with respect to `z` given `grad_out = dL/dx`.
    pub fn backward(&self, z: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(shape_err(self.input_dim(), z.len()));
        }
        if grad_out.len() != self.output_dim() {
            return Err(shape_err(self.output_dim(), grad_out.len()));
        }
        Ok(match self {
            Decoder::Linear(d) => matvec_t(&d.weight, d.output_dim, d.input_dim, grad_out),
            Decoder::Mlp(d) => d.backward(z, grad_out),
        })
    }
}

fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| m[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, a) in out.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
            *o += a * v[r];
        }
    }
    out
}

fn check_pair(cb: &Codebook, dec: &Decoder, dims: usize) -> Result<()> {
    if dims * cb.dim() != dec.input_dim() {
        return Err(shape_err(
            format!("decoder input {} = d_z * d_b", dims * cb.dim()),
            dec.input_dim(),
        ));
    }
    Ok(())
}

/// `x0 = D(Z)` with `Z_i = b_{z0_i}`.
pub fn hard_decode(cb: &Codebook, dec: &Decoder, z0: &TokenField) -> Result<Vec<f64>> {
    check_pair(cb, dec, z0.len())?;
    dec.decode(&cb.assign(z0)?)
}

/// i.i.d. standard Gumbel noise, `rows x cols`.
pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Vec<f64> {
    const EPS: f64 = 1e-12;
    (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random::<f64>().clamp(EPS, 1.0 - EPS);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Soft one-hot samples `softmax((max(log_alpha, floor) + g) / tau)` per row.
pub fn soft_samples(log_alpha: &[f64], gumbel: &[f64], cols: usize, tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature {tau} must be positive")));
    }
    if log_alpha.len() != gumbel.len() || cols == 0 || !log_alpha.len().is_multiple_of(cols) {
        return Err(shape_err(log_alpha.len(), gumbel.len()));
    }
    let mut out = Vec::with_capacity(log_alpha.len());
    for (la, g) in log_alpha.chunks(cols).zip(gumbel.chunks(cols)) {
        let scaled: Vec<f64> = la
            .iter()
            .zip(g)
            .map(|(l, g)| (l.max(LOG_FLOOR) + g) / tau)
            .collect();
        out.extend(softmax(&scaled));
    }
    Ok(out)
}

/// Gumbel-Softmax dequantization: soft samples weight the codebook, the mix is decoded.
pub fn soft_decode(
    cb: &Codebook,
    dec: &Decoder,
    log_alpha: &[f64],
    gumbel: &[f64],
    tau: f64,
) -> Result<Vec<f64>> {
    let k = cb.num_tokens();
    if !log_alpha.len().is_multiple_of(k) {
        return Err(shape_err(format!("multiple of K={k}"), log_alpha.len()));
    }
    check_pair(cb, dec, log_alpha.len() / k)?;
    let w = soft_samples(log_alpha, gumbel, k, tau)?;
    dec.decode(&cb.mix(&w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::argmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Codebook, Decoder, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = Codebook::random(4, 2, 1.0, &mut rng);
        let dec = Decoder::Linear(LinearDecoder::random(6, 5, &mut rng));
        (cb, dec, rng)
    }

    #[test]
    fn identity_decoder_returns_embedding() {
        let cb = Codebook::new(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let dec = Decoder::Linear(LinearDecoder::identity(2));
        let z = TokenField::new(vec![1], 2).unwrap();
        assert_eq!(hard_decode(&cb, &dec, &z).unwrap(), vec![-3.0, 0.5]);
    }

    #[test]
    fn zero_codebook_gives_bias() {
        let cb = Codebook::new(&[vec![0.0], vec![0.0]]).unwrap();
        let dec = Decoder::Linear(
            LinearDecoder::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![0.1, 0.2, 0.3]).unwrap(),
        );
        let z = TokenField::new(vec![1, 0], 2).unwrap();
        assert_eq!(hard_decode(&cb, &dec, &z).unwrap(), vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn hard_decode_rejects_mask() {
        let (cb, dec, _) = setup(1);
        let z = TokenField::new(vec![0, 4, 1], 4).unwrap();
        assert!(matches!(
            hard_decode(&cb, &dec, &z),
            Err(Error::MaskedToken { dim: 1 })
        ));
    }

    #[test]
    fn soft_matches_hard_for_one_hot_weights() {
        let (cb, dec, _) = setup(2);
        let z = TokenField::new(vec![3, 0, 2], 4).unwrap();
        let hard = hard_decode(&cb, &dec, &z).unwrap();
        let mut w = vec![0.0; 12];
        for (i, &k) in z.tokens().iter().enumerate() {
            w[i * 4 + k] = 1.0;
        }
        let soft = dec.decode(&cb.mix(&w)).unwrap();
        assert_eq!(soft, hard);
    }

    #[test]
    fn uniform_soft_samples_decode_mean_embedding() {
        let (cb, dec, _) = setup(3);
        let la = vec![(0.25f64).ln(); 12];
        let g = vec![0.0; 12];
        let x = soft_decode(&cb, &dec, &la, &g, 1.0).unwrap();
        let mean: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|k| cb.vector(k)[j]).sum::<f64>() / 4.0)
            .collect();
        let z: Vec<f64> = (0..3).flat_map(|_| mean.clone()).collect();
        let want = dec.decode(&z).unwrap();
        for (a, b) in x.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn low_temperature_approaches_argmax() {
        let (_, _, mut rng) = setup(4);
        for _ in 0..50 {
            let la: Vec<f64> = (0..12).map(|_| rng.random::<f64>().ln()).collect();
            let g = sample_gumbel(&mut rng, 3, 4);
            let soft = soft_samples(&la, &g, 4, 0.01).unwrap();
            for i in 0..3 {
                let perturbed: Vec<f64> = (0..4).map(|k| la[i * 4 + k] + g[i * 4 + k]).collect();
                let mut sorted = perturbed.clone();
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                // Only meaningful when the top two are separated well beyond tau.
                if sorted[0] - sorted[1] < 0.2 {
                    continue;
                }
                let best = argmax(&perturbed);
                for k in 0..4 {
                    let target = if k == best { 1.0 } else { 0.0 };
                    assert!((soft[i * 4 + k] - target).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn concentrated_alpha_matches_hard_decode() {
        let (cb, dec, mut rng) = setup(5);
        let z = TokenField::new(vec![1, 1, 3], 4).unwrap();
        let mut la = vec![(1e-12f64 / 3.0).ln(); 12];
        for (i, &k) in z.tokens().iter().enumerate() {
            la[i * 4 + k] = (1.0 - 1e-12f64).ln();
        }
        let g = sample_gumbel(&mut rng, 3, 4);
        let soft = soft_decode(&cb, &dec, &la, &g, 1.0).unwrap();
        let hard = hard_decode(&cb, &dec, &z).unwrap();
        for (a, b) in soft.iter().zip(&hard) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn soft_samples_on_simplex_and_reject_bad_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let la: Vec<f64> = (0..20).map(|i| -(i as f64)).collect();
        let g = sample_gumbel(&mut rng, 5, 4);
        let w = soft_samples(&la, &g, 4, 0.5).unwrap();
        for row in w.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
        assert!(soft_samples(&la, &g, 4, 0.0).is_err());
        assert!(soft_samples(&la, &g, 4, -1.0).is_err());
    }

    #[test]
    fn gumbel_is_reproducible_finite_and_has_euler_mean() {
        let a = sample_gumbel(&mut ChaCha8Rng::seed_from_u64(9), 10, 10);
        let b = sample_gumbel(&mut ChaCha8Rng::seed_from_u64(9), 10, 10);
        assert_eq!(a, b);
        let draws = sample_gumbel(&mut ChaCha8Rng::seed_from_u64(10), 1000, 1000);
        assert!(draws.iter().all(|x| x.is_finite()));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5772156649).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn linear_soft_decode_is_affine_in_weights() {
        let (cb, dec, mut rng) = setup(7);
        let w1: Vec<f64> = soft_samples(
            &[0.0; 12],
            &sample_gumbel(&mut rng, 3, 4),
            4,
            1.0,
        )
        .unwrap();
        let w2: Vec<f64> = soft_samples(
            &[0.0; 12],
            &sample_gumbel(&mut rng, 3, 4),
            4,
            1.0,
        )
        .unwrap();
        let lam = 0.3;
        let mixed: Vec<f64> = w1.iter().zip(&w2).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let x1 = dec.decode(&cb.mix(&w1)).unwrap();
        let x2 = dec.decode(&cb.mix(&w2)).unwrap();
        let xm = dec.decode(&cb.mix(&mixed)).unwrap();
        for ((a, b), m) in x1.iter().zip(&x2).zip(&xm) {
            assert!((lam * a + (1.0 - lam) * b - m).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dec = Decoder::Mlp(MlpDecoder::random(4, 6, 3, &mut rng));
        let z: Vec<f64> = (0..4).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let gout = vec![0.3, -1.2, 0.7];
        let g = dec.backward(&z, &gout).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut zp = z.clone();
            zp[j] += h;
            let mut zm = z.clone();
            zm[j] -= h;
            let fp: f64 = dec.decode(&zp).unwrap().iter().zip(&gout).map(|(a, b)| a * b).sum();
            let fm: f64 = dec.decode(&zm).unwrap().iter().zip(&gout).map(|(a, b)| a * b).sum();
            assert!(((fp - fm) / (2.0 * h) - g[j]).abs() < 1e-7);
        }
    }
}
