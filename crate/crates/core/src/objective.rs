//! Per-step variational loss and its analytic gradient with respect to the logits.
//!
//! `loss = eta_kl * KL(alpha || prior_out) + w * mean_g ||y - A D(sum_k zhat_k b_k)||^2`
//! with `alpha = softmax(logits)` row-wise and `zhat = softmax((log alpha + g) / tau)`.

use rand::Rng;

use crate::decoder::{sample_gumbel, soft_samples, Codebook, Decoder};
use crate::error::{shape_err, Error, Result};
use crate::field::{log_softmax, CategoricalField, LOG_FLOOR};
use crate::operators::LinearProblem;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub eta_kl: f64,
    /// Weight on the squared residual. 1 reproduces the plain objective.
    pub likelihood_weight: f64,
    pub tau: f64,
    pub n_mc: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            eta_kl: 1.0,
            likelihood_weight: 1.0,
            tau: 1.0,
            n_mc: 1,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_kl >= 0.0) || !self.eta_kl.is_finite() {
            return Err(Error::InvalidParameter(format!("eta_kl {} must be >= 0", self.eta_kl)));
        }
        if !(self.likelihood_weight >= 0.0) || !self.likelihood_weight.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "likelihood weight {} must be >= 0",
                self.likelihood_weight
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidParameter(format!("tau {} must be > 0", self.tau)));
        }
        if self.n_mc == 0 {
            return Err(Error::InvalidParameter("n_mc must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gumbel noise shared between a loss evaluation and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GumbelDraws {
    rows: usize,
    cols: usize,
    draws: Vec<Vec<f64>>,
}

impl GumbelDraws {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n_mc: usize, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            draws: (0..n_mc).map(|_| sample_gumbel(rng, rows, cols)).collect(),
        }
    }

    pub fn from_draws(rows: usize, cols: usize, draws: Vec<Vec<f64>>) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::InvalidParameter("need at least one Gumbel draw".into()));
        }
        if let Some(d) = draws.iter().find(|d| d.len() != rows * cols) {
            return Err(shape_err(rows * cols, d.len()));
        }
        Ok(Self { rows, cols, draws })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.draws[i]
    }
}

/// `sum_i sum_k p log(p / q)` with `0 log 0 = 0` and `log q` clamped.
pub fn kl_categorical_fields(p: &CategoricalField, q: &CategoricalField) -> Result<f64> {
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(shape_err(
            format!("{}x{}", q.rows(), q.cols()),
            format!("{}x{}", p.rows(), p.cols()),
        ));
    }
    Ok(p
        .as_slice()
        .iter()
        .zip(q.log_probs())
        .map(|(&pi, lq)| if pi > 0.0 { pi * (pi.ln() - lq) } else { 0.0 })
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Unweighted KL to the prior output.
    pub kl: f64,
    /// Unweighted mean squared residual over the Gumbel draws.
    pub data_fit: f64,
    pub loss: f64,
    /// Row-major `d_z x K`; empty when not requested.
    pub gradient: Vec<f64>,
}

/// Everything the loss depends on besides the logits and the Gumbel draws.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub prior_out: &'a CategoricalField,
    pub problem: &'a LinearProblem,
    pub codebook: &'a Codebook,
    pub decoder: &'a Decoder,
    pub config: ObjectiveConfig,
}

impl<'a> Objective<'a> {
    pub fn new(
        prior_out: &'a CategoricalField,
        problem: &'a LinearProblem,
        codebook: &'a Codebook,
        decoder: &'a Decoder,
        config: ObjectiveConfig,
    ) -> Result<Self> {
        config.validate()?;
        if prior_out.cols() != codebook.num_tokens() {
            return Err(shape_err(codebook.num_tokens(), prior_out.cols()));
        }
        if prior_out.rows() * codebook.dim() != decoder.input_dim() {
            return Err(shape_err(decoder.input_dim(), prior_out.rows() * codebook.dim()));
        }
        if decoder.output_dim() != problem.op.input_dim() {
            return Err(shape_err(problem.op.input_dim(), decoder.output_dim()));
        }
        Ok(Self {
            prior_out,
            problem,
            codebook,
            decoder,
            config,
        })
    }

    pub fn rows(&self) -> usize {
        self.prior_out.rows()
    }

    pub fn cols(&self) -> usize {
        self.prior_out.cols()
    }

    pub fn sample_draws<R: Rng + ?Sized>(&self, rng: &mut R) -> GumbelDraws {
        GumbelDraws::sample(rng, self.config.n_mc, self.rows(), self.cols())
    }

    pub fn loss(&self, logits: &[f64], draws: &GumbelDraws) -> Result<f64> {
        Ok(self.evaluate(logits, draws, false)?.loss)
    }

    pub fn loss_and_gradient(&self, logits: &[f64], draws: &GumbelDraws) -> Result<Evaluation> {
        self.evaluate(logits, draws, true)
    }

    fn evaluate(&self, logits: &[f64], draws: &GumbelDraws, want_grad: bool) -> Result<Evaluation> {
        let (rows, cols) = (self.rows(), self.cols());
        if logits.len() != rows * cols {
            return Err(shape_err(rows * cols, logits.len()));
        }
        if draws.rows != rows || draws.cols != cols {
            return Err(shape_err(
                format!("{rows}x{cols} Gumbel draws"),
                format!("{}x{}", draws.rows, draws.cols),
            ));
        }
        let cfg = self.config;
        let log_alpha: Vec<f64> = logits.chunks(cols).flat_map(log_softmax).collect();
        let alpha: Vec<f64> = log_alpha.iter().map(|l| l.exp()).collect();
        let log_q = self.prior_out.log_probs();

        let mut grad = if want_grad { vec![0.0; rows * cols] } else { Vec::new() };

        let mut kl = 0.0;
        for i in 0..rows {
            let r = i * cols..(i + 1) * cols;
            let kl_i: f64 = alpha[r.clone()]
                .iter()
                .zip(&log_alpha[r.clone()])
                .zip(&log_q[r.clone()])
                .map(|((a, la), lq)| a * (la - lq))
                .sum();
            kl += kl_i;
            if want_grad && cfg.eta_kl != 0.0 {
                for j in r {
                    grad[j] += cfg.eta_kl * alpha[j] * ((log_alpha[j] - log_q[j]) - kl_i);
                }
            }
        }

        let mut data_fit = 0.0;
        let scale = cfg.likelihood_weight / draws.len() as f64;
        for g in &draws.draws {
            let zhat = soft_samples(&log_alpha, g, cols, cfg.tau)?;
            let z = self.codebook.mix(&zhat);
            let x = self.decoder.decode(&z)?;
            let resid = self.problem.residual(&x)?;
            data_fit += resid.iter().map(|r| r * r).sum::<f64>();
            if !want_grad || scale == 0.0 {
                continue;
            }
            let neg2r: Vec<f64> = resid.iter().map(|r| -2.0 * r).collect();
            let dx = self.problem.op.adjoint(&neg2r)?;
            let dz = self.decoder.backward(&z, &dx)?;
            let db = self.codebook.dim();
            for i in 0..rows {
                let dzi = &dz[i * db..(i + 1) * db];
                let h: Vec<f64> = (0..cols)
                    .map(|k| dzi.iter().zip(self.codebook.vector(k)).map(|(a, b)| a * b).sum())
                    .collect();
                let zi = &zhat[i * cols..(i + 1) * cols];
                let mean_h: f64 = zi.iter().zip(&h).map(|(a, b)| a * b).sum();
                // d/d(log alpha), zero where the floor is active.
                let v: Vec<f64> = (0..cols)
                    .map(|j| {
                        if log_alpha[i * cols + j] < LOG_FLOOR {
                            0.0
                        } else {
                            zi[j] * (h[j] - mean_h) / cfg.tau
                        }
                    })
                    .collect();
                let vsum: f64 = v.iter().sum();
                for m in 0..cols {
                    grad[i * cols + m] += scale * (v[m] - alpha[i * cols + m] * vsum);
                }
            }
        }
        data_fit /= draws.len() as f64;

        Ok(Evaluation {
            kl,
            data_fit,
            loss: cfg.eta_kl * kl + cfg.likelihood_weight * data_fit,
            gradient: grad,
        })
    }
}

/// Central finite differences of `f` at `x`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let up = f(&probe)?;
        probe[j] = x[j] - step;
        let down = f(&probe)?;
        probe[j] = x[j];
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

/// `max |g - fd| / max(max |fd|, 1e-8)`.
pub fn gradient_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{LinearDecoder, MlpDecoder};
    use crate::operators::LinearOperator;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    struct Fixture {
        prior: CategoricalField,
        prob: LinearProblem,
        cb: Codebook,
        dec: Decoder,
    }

    fn fixture(seed: u64, mlp: bool, op: &str) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, dz, db, dx) = (3, 4, 2, 8);
        let cb = Codebook::random(k, db, 1.0, &mut rng);
        let dec = if mlp {
            Decoder::Mlp(MlpDecoder::random(dz * db, 6, dx, &mut rng))
        } else {
            Decoder::Linear(LinearDecoder::random(dz * db, dx, &mut rng))
        };
        let logits: Vec<f64> = (0..dz * k).map(|_| rng.sample(StandardNormal)).collect();
        let prior = CategoricalField::from_logits(dz, k, &logits).unwrap();
        let op = match op {
            "mask" => LinearOperator::mask(dx, vec![1, 3, 4, 6]).unwrap(),
            "downsample" => LinearOperator::downsample(dx, 2).unwrap(),
            "blur" => LinearOperator::blur(dx, 3, 0.8).unwrap(),
            _ => LinearOperator::identity(dx),
        };
        let y = (0..op.output_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let prob = LinearProblem::new(op, y, 0.1).unwrap();
        Fixture { prior, prob, cb, dec }
    }

    fn cfg(eta: f64, w: f64) -> ObjectiveConfig {
        ObjectiveConfig {
            eta_kl: eta,
            likelihood_weight: w,
            tau: 0.7,
            n_mc: 2,
        }
    }

    #[test]
    fn kl_known_value() {
        let p = CategoricalField::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let q = CategoricalField::from_rows(&[vec![0.25, 0.75]]).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_categorical_fields(&p, &q).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.14384).abs() < 1e-5);
        assert_eq!(kl_categorical_fields(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_additive_over_rows() {
        let p = CategoricalField::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let q = CategoricalField::from_rows(&[vec![0.5, 0.5], vec![0.1, 0.9]]).unwrap();
        let p0 = CategoricalField::from_rows(&[p.row(0).to_vec()]).unwrap();
        let q0 = CategoricalField::from_rows(&[q.row(0).to_vec()]).unwrap();
        let p1 = CategoricalField::from_rows(&[p.row(1).to_vec()]).unwrap();
        let q1 = CategoricalField::from_rows(&[q.row(1).to_vec()]).unwrap();
        let sum = kl_categorical_fields(&p0, &q0).unwrap() + kl_categorical_fields(&p1, &q1).unwrap();
        assert!((kl_categorical_fields(&p, &q).unwrap() - sum).abs() < 1e-15);
    }

    #[test]
    fn kl_shape_mismatch() {
        let p = CategoricalField::uniform(2, 3);
        let q = CategoricalField::uniform(3, 3);
        assert!(kl_categorical_fields(&p, &q).is_err());
    }

    #[test]
    fn zero_when_prior_matches_and_data_fits() {
        let f = fixture(1, false, "identity");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obj0 = Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, cfg(1.0, 1.0)).unwrap();
        let draws = obj0.sample_draws(&mut rng);
        let logits: Vec<f64> = f.prior.as_slice().iter().map(|p| p.ln()).collect();
        // Build y from the first draw and use a single draw so the fit is exact.
        let single = GumbelDraws::from_draws(4, 3, vec![draws.draw(0).to_vec()]).unwrap();
        let zhat = soft_samples(&logits, draws.draw(0), 3, 0.7).unwrap();
        let x = f.dec.decode(&f.cb.mix(&zhat)).unwrap();
        let prob = LinearProblem::new(f.prob.op.clone(), x, 0.1).unwrap();
        let obj = Objective::new(&f.prior, &prob, &f.cb, &f.dec, cfg(1.0, 1.0)).unwrap();
        let e = obj.loss_and_gradient(&logits, &single).unwrap();
        assert!(e.loss.abs() < 1e-12, "{}", e.loss);
        assert!(e.gradient.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn recomposition_matches_independent_path() {
        let f = fixture(3, true, "blur");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = ObjectiveConfig { n_mc: 1, ..cfg(0.8, 1.3) };
        let obj = Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, c).unwrap();
        let logits: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let draws = obj.sample_draws(&mut rng);
        let alpha = CategoricalField::from_logits(4, 3, &logits).unwrap();
        let kl = kl_categorical_fields(&alpha, &f.prior).unwrap();
        let la = alpha.log_probs();
        let x = crate::decoder::soft_decode(&f.cb, &f.dec, &la, draws.draw(0), c.tau).unwrap();
        let ax = f.prob.op.to_dense();
        let n = x.len();
        let mut sq = 0.0;
        for (i, y) in f.prob.y.iter().enumerate() {
            let v: f64 = (0..n).map(|j| ax[i * n + j] * x[j]).sum();
            sq += (y - v).powi(2);
        }
        let want = 0.8 * kl + 1.3 * sq;
        let got = obj.loss(&logits, &draws).unwrap();
        assert!((got - want).abs() < 1e-10 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn kl_only_stationary_at_prior() {
        let f = fixture(5, false, "identity");
        let obj = Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, cfg(1.0, 0.0)).unwrap();
        let draws = obj.sample_draws(&mut ChaCha8Rng::seed_from_u64(6));
        let logits: Vec<f64> = f.prior.as_slice().iter().map(|p| p.ln() + 3.0).collect();
        let g = obj.loss_and_gradient(&logits, &draws).unwrap().gradient;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-8, "{norm}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut worst: f64 = 0.0;
        let mut seed = 10;
        for op in ["identity", "mask", "downsample", "blur"] {
            for mlp in [false, true] {
                seed += 1;
                let f = fixture(seed, mlp, op);
                let obj = Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, cfg(0.5, 1.0)).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                let logits: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
                let draws = obj.sample_draws(&mut rng);
                let g = obj.loss_and_gradient(&logits, &draws).unwrap().gradient;
                let fd = finite_difference_gradient(|l| obj.loss(l, &draws), &logits, 1e-5).unwrap();
                worst = worst.max(gradient_relative_error(&g, &fd));
            }
        }
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn likelihood_gradient_scales_with_weight() {
        let f = fixture(20, true, "mask");
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let base = Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, cfg(0.0, 1.0)).unwrap();
        let draws = base.sample_draws(&mut rng);
        let g1 = base.loss_and_gradient(&logits, &draws).unwrap().gradient;
        let scaled = Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, cfg(0.0, 2.5)).unwrap();
        let g2 = scaled.loss_and_gradient(&logits, &draws).unwrap().gradient;
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.5 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn shift_invariance_per_row() {
        let f = fixture(30, true, "downsample");
        let obj = Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, cfg(0.7, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let logits: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let draws = obj.sample_draws(&mut rng);
        let shifted: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(j, l)| l + [5.0, -3.0, 0.25, 12.0][j / 3])
            .collect();
        let a = obj.loss(&logits, &draws).unwrap();
        let b = obj.loss(&shifted, &draws).unwrap();
        assert!((a - b).abs() <= 1e-9, "{a} {b}");
    }

    #[test]
    fn monte_carlo_standard_error_is_consistent() {
        let f = fixture(40, false, "identity");
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let logits: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let one = Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, ObjectiveConfig { n_mc: 1, ..cfg(0.0, 1.0) }).unwrap();
        let singles: Vec<f64> = (0..1000)
            .map(|_| one.loss(&logits, &one.sample_draws(&mut rng)).unwrap())
            .collect();
        let mean = singles.iter().sum::<f64>() / 1000.0;
        let var = singles.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0;
        let se = (var / 1000.0).sqrt();
        let big = Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, ObjectiveConfig { n_mc: 1000, ..cfg(0.0, 1.0) }).unwrap();
        let batch: Vec<f64> = (0..20)
            .map(|_| big.loss(&logits, &big.sample_draws(&mut rng)).unwrap())
            .collect();
        let bmean = batch.iter().sum::<f64>() / 20.0;
        let bsd = (batch.iter().map(|v| (v - bmean).powi(2)).sum::<f64>() / 19.0).sqrt();
        assert!(bsd > 0.6 * se && bsd < 1.5 * se, "batch sd {bsd}, predicted {se}");
        assert!((bmean - mean).abs() < 5.0 * se);
    }

    #[test]
    fn rejects_bad_config() {
        let f = fixture(50, false, "identity");
        for c in [
            ObjectiveConfig { tau: 0.0, ..Default::default() },
            ObjectiveConfig { n_mc: 0, ..Default::default() },
            ObjectiveConfig { eta_kl: -1.0, ..Default::default() },
        ] {
            assert!(Objective::new(&f.prior, &f.prob, &f.cb, &f.dec, c).is_err());
        }
    }
}
