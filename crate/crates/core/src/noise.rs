//! Mask-absorbing transition schedule and the kernels derived from it.
//!
//! Tokens are 0-based: `0..K` are codebook entries and `K` is MASK. Step `t = 0`
//! denotes clean data (keep-probability 1, no leak, no mask).

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::field::{sample_categorical, CategoricalField};

/// A vector of `d_z` token indices, each in `0..=K` where `K` is MASK.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenField {
    tokens: Vec<usize>,
    num_tokens: usize,
}

impl TokenField {
    pub fn new(tokens: Vec<usize>, num_tokens: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidParameter("token field must be non-empty".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t > num_tokens) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                limit: num_tokens + 1,
            });
        }
        Ok(Self { tokens, num_tokens })
    }

    pub fn all_masked(dims: usize, num_tokens: usize) -> Self {
        Self {
            tokens: vec![num_tokens; dims],
            num_tokens,
        }
    }

    pub fn mask_token(&self) -> usize {
        self.num_tokens
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, i: usize) -> usize {
        self.tokens[i]
    }

    pub fn set(&mut self, i: usize, token: usize) -> Result<()> {
        if token > self.num_tokens {
            return Err(Error::TokenOutOfRange {
                token,
                limit: self.num_tokens + 1,
            });
        }
        self.tokens[i] = token;
        Ok(())
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.num_tokens
    }

    pub fn masked_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_masked(i)).count()
    }

    pub fn is_clean(&self) -> bool {
        self.masked_count() == 0
    }

    pub fn ensure_clean(&self) -> Result<()> {
        match (0..self.len()).find(|&i| self.is_masked(i)) {
            Some(dim) => Err(Error::MaskedToken { dim }),
            None => Ok(()),
        }
    }
}

impl std::fmt::Display for TokenField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, &t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            if t == self.num_tokens {
                f.write_str("M")?;
            } else {
                write!(f, "{t}")?;
            }
        }
        Ok(())
    }
}

/// Endpoint values of the linearly interpolated cumulative schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleEndpoints {
    pub alpha_bar_first: f64,
    pub alpha_bar_last: f64,
    pub gamma_bar_first: f64,
    pub gamma_bar_last: f64,
}

impl Default for ScheduleEndpoints {
    fn default() -> Self {
        Self {
            alpha_bar_first: 0.99999,
            alpha_bar_last: 0.000009,
            gamma_bar_first: 0.000009,
            gamma_bar_last: 0.99999,
        }
    }
}

/// Per-step parameters of `Q_t`: keep, leak to each other token, mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepParams {
    pub keep: f64,
    pub leak: f64,
    pub mask: f64,
}

/// Cumulative keep / leak / mask probabilities for steps `0..=T`.
///
/// `gamma_bar` holds the mask mass actually used by every kernel: the interpolated
/// nominal value plus the `beta_bar` residual left over by the `(K+1)` divisor, so that
/// `alpha_bar + K * beta_bar + gamma_bar = 1` holds exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSchedule {
    num_steps: usize,
    num_tokens: usize,
    alpha_bar: Vec<f64>,
    beta_bar: Vec<f64>,
    gamma_bar: Vec<f64>,
    gamma_bar_nominal: Vec<f64>,
}

impl TransitionSchedule {
    /// Linear interpolation of `alpha_bar` and the nominal `gamma_bar` between the endpoints,
    /// with `beta_bar = (1 - alpha_bar - gamma_bar) / (K + 1)`.
    pub fn build(num_steps: usize, num_tokens: usize, ends: ScheduleEndpoints) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if num_tokens < 2 {
            return Err(Error::InvalidSchedule("K must be at least 2".into()));
        }
        let ScheduleEndpoints {
            alpha_bar_first: a1,
            alpha_bar_last: at,
            gamma_bar_first: g1,
            gamma_bar_last: gt,
        } = ends;
        for (name, v) in [
            ("alpha_bar_first", a1),
            ("alpha_bar_last", at),
            ("gamma_bar_first", g1),
            ("gamma_bar_last", gt),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidSchedule(format!("{name}={v} not in (0,1)")));
            }
        }
        if num_steps == 1 {
            if a1 != at || g1 != gt {
                return Err(Error::InvalidSchedule(
                    "a single-step schedule needs identical first and last endpoints".into(),
                ));
            }
        } else {
            if a1 <= at {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar must decrease ({a1} -> {at})"
                )));
            }
            if g1 >= gt {
                return Err(Error::InvalidSchedule(format!(
                    "gamma_bar must increase ({g1} -> {gt})"
                )));
            }
        }

        let k = num_tokens as f64;
        let mut alpha_bar = vec![1.0];
        let mut beta_bar = vec![0.0];
        let mut gamma_bar = vec![0.0];
        let mut gamma_bar_nominal = vec![0.0];
        for t in 1..=num_steps {
            let frac = if num_steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (num_steps - 1) as f64
            };
            let a = a1 + frac * (at - a1);
            let g = g1 + frac * (gt - g1);
            let b = (1.0 - a - g) / (k + 1.0);
            if b < 0.0 {
                return Err(Error::InvalidSchedule(format!(
                    "negative beta_bar at t={t}: alpha_bar + gamma_bar = {}",
                    a + g
                )));
            }
            alpha_bar.push(a);
            beta_bar.push(b);
            gamma_bar.push(1.0 - a - k * b);
            gamma_bar_nominal.push(g);
        }
        Ok(Self {
            num_steps,
            num_tokens,
            alpha_bar,
            beta_bar,
            gamma_bar,
            gamma_bar_nominal,
        })
    }

    /// Schedule from explicit cumulative keep and mask probabilities for `t = 1..=T`.
    /// The leak is whatever mass remains, shared equally among the `K` tokens.
    pub fn from_cumulative(num_tokens: usize, alpha_bar: &[f64], gamma_bar: &[f64]) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.len() != gamma_bar.len() {
            return Err(shape_err(alpha_bar.len(), gamma_bar.len()));
        }
        if num_tokens < 2 {
            return Err(Error::InvalidSchedule("K must be at least 2".into()));
        }
        let k = num_tokens as f64;
        let mut a_all = vec![1.0];
        let mut b_all = vec![0.0];
        let mut g_all = vec![0.0];
        for (t, (&a, &g)) in alpha_bar.iter().zip(gamma_bar).enumerate() {
            let b = (1.0 - a - g) / k;
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&g) || b < -1e-15 {
                return Err(Error::InvalidSchedule(format!(
                    "step {}: alpha_bar={a}, gamma_bar={g}",
                    t + 1
                )));
            }
            if a > *a_all.last().unwrap() || g < *g_all.last().unwrap() {
                return Err(Error::InvalidSchedule(format!(
                    "step {}: alpha_bar must not increase and gamma_bar must not decrease",
                    t + 1
                )));
            }
            a_all.push(a);
            b_all.push(b.max(0.0));
            g_all.push(g);
        }
        Ok(Self {
            num_steps: alpha_bar.len(),
            num_tokens,
            alpha_bar: a_all,
            beta_bar: b_all,
            gamma_bar_nominal: g_all.clone(),
            gamma_bar: g_all,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn mask_token(&self) -> usize {
        self.num_tokens
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        self.beta_bar[t]
    }

    /// Total MASK probability at step `t`.
    pub fn gamma_bar(&self, t: usize) -> f64 {
        self.gamma_bar[t]
    }

    /// Interpolated mask probability before the leak residual is folded in.
    pub fn gamma_bar_nominal(&self, t: usize) -> f64 {
        self.gamma_bar_nominal[t]
    }

    /// Whether the terminal distribution is effectively all-MASK.
    pub fn is_terminal_all_mask(&self) -> bool {
        self.gamma_bar[self.num_steps] >= 0.99
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.num_steps,
            });
        }
        Ok(())
    }

    /// Recovers `(alpha_t, beta_t, gamma_t)` from consecutive cumulative values.
    pub fn step_params(&self, t: usize) -> Result<StepParams> {
        self.check_step(t)?;
        let keep = if self.alpha_bar[t - 1] > 0.0 {
            self.alpha_bar[t] / self.alpha_bar[t - 1]
        } else {
            0.0
        };
        let unmasked_prev = 1.0 - self.gamma_bar[t - 1];
        let mask = if unmasked_prev > 0.0 {
            1.0 - (1.0 - self.gamma_bar[t]) / unmasked_prev
        } else {
            1.0
        };
        let leak = (1.0 - keep - mask) / self.num_tokens as f64;
        let tol = 1e-12;
        if !(-tol..=1.0 + tol).contains(&keep) || !(-tol..=1.0 + tol).contains(&mask) || leak < -tol
        {
            return Err(Error::InvalidSchedule(format!(
                "step {t}: recovered alpha_t={keep}, beta_t={leak}, gamma_t={mask}"
            )));
        }
        Ok(StepParams {
            keep: keep.clamp(0.0, 1.0),
            leak: leak.max(0.0),
            mask: mask.clamp(0.0, 1.0),
        })
    }

    /// The per-step kernel `Q_t`, indexed `[to][from]`; each column is a distribution.
    pub fn single_step_matrix(&self, t: usize) -> Result<StepMatrix> {
        let StepParams { keep, leak, mask } = self.step_params(t)?;
        let n = self.num_tokens + 1;
        let m = self.num_tokens;
        let mut data = vec![0.0; n * n];
        for from in 0..m {
            for to in 0..m {
                data[to * n + from] = leak + if to == from { keep } else { 0.0 };
            }
            data[m * n + from] = mask;
        }
        data[m * n + m] = 1.0;
        Ok(StepMatrix { size: n, data })
    }

    /// `q(z_t | z_0)` for one dimension, a distribution over `K + 1` states.
    /// `t = 0` gives the one-hot of `z0_token`.
    pub fn cumulative_forward_dist(&self, t: usize, z0_token: usize) -> Result<Vec<f64>> {
        if t > self.num_steps {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.num_steps,
            });
        }
        if z0_token == self.num_tokens {
            return Err(Error::MaskedToken { dim: 0 });
        }
        if z0_token > self.num_tokens {
            return Err(Error::TokenOutOfRange {
                token: z0_token,
                limit: self.num_tokens,
            });
        }
        let b = self.beta_bar[t];
        let mut dist = vec![b; self.num_tokens + 1];
        dist[z0_token] += self.alpha_bar[t];
        dist[self.num_tokens] = self.gamma_bar[t];
        Ok(dist)
    }

    /// Independent per-dimension draws of `z_t ~ q(z_t | z_0)`.
    pub fn sample_zt_given_z0<R: Rng + ?Sized>(
        &self,
        t: usize,
        z0: &TokenField,
        rng: &mut R,
    ) -> Result<TokenField> {
        z0.ensure_clean()?;
        self.check_tokens(z0)?;
        let mut out = Vec::with_capacity(z0.len());
        for &tok in z0.tokens() {
            let dist = self.cumulative_forward_dist(t, tok)?;
            out.push(sample_categorical(&dist, rng));
        }
        TokenField::new(out, self.num_tokens)
    }

    /// Posterior `q(z_{t-1} | z_0, z_t)` of the Markov forward chain for one dimension.
    pub fn markov_posterior(&self, t: usize, z0_token: usize, zt_token: usize) -> Result<Vec<f64>> {
        self.check_step(t)?;
        if zt_token > self.num_tokens {
            return Err(Error::TokenOutOfRange {
                token: zt_token,
                limit: self.num_tokens + 1,
            });
        }
        let q_step = self.single_step_matrix(t)?;
        let prev = self.cumulative_forward_dist(t - 1, z0_token)?;
        let denom = self.cumulative_forward_dist(t, z0_token)?[zt_token];
        if denom <= 0.0 {
            return Err(Error::Unreachable);
        }
        Ok((0..=self.num_tokens)
            .map(|m| q_step.get(zt_token, m) * prev[m] / denom)
            .collect())
    }

    /// Reverse kernel of the Markov variant for one dimension:
    /// `sum_k alpha_k q(z_{t-1} | z_0 = k, z_t)` over the clean tokens that can reach `z_t`.
    pub fn markov_reverse_kernel(&self, t: usize, alpha_row: &[f64], zt_token: usize) -> Result<Vec<f64>> {
        if alpha_row.len() != self.num_tokens {
            return Err(shape_err(self.num_tokens, alpha_row.len()));
        }
        let mut out = vec![0.0; self.num_tokens + 1];
        let mut weight = 0.0;
        for (k, &a) in alpha_row.iter().enumerate() {
            if a <= 0.0 {
                continue;
            }
            match self.markov_posterior(t, k, zt_token) {
                Ok(post) => {
                    weight += a;
                    for (o, p) in out.iter_mut().zip(post) {
                        *o += a * p;
                    }
                }
                Err(Error::Unreachable) => {}
                Err(e) => return Err(e),
            }
        }
        if weight <= 0.0 {
            return Err(Error::Unreachable);
        }
        out.iter_mut().for_each(|o| *o /= weight);
        Ok(out)
    }

    /// Star-shaped reverse kernel: per dimension, `sum_k alpha_{i,k} q(z_{t-1} | z_0 = k)`.
    /// For `t = 1` the result is `alpha` itself padded with a zero MASK column.
    pub fn star_reverse_kernel(&self, t: usize, alpha: &CategoricalField) -> Result<Vec<Vec<f64>>> {
        self.check_step(t)?;
        if alpha.cols() != self.num_tokens {
            return Err(shape_err(self.num_tokens, alpha.cols()));
        }
        let prev = t - 1;
        let (a, b, g) = (self.alpha_bar[prev], self.beta_bar[prev], self.gamma_bar[prev]);
        let mut out = Vec::with_capacity(alpha.rows());
        for i in 0..alpha.rows() {
            let row = alpha.row(i);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-8 {
                return Err(Error::NotNormalized { row: i, sum });
            }
            let mut dist: Vec<f64> = row.iter().map(|&p| a * p + b * sum).collect();
            dist.push(g * sum);
            out.push(dist);
        }
        Ok(out)
    }

    fn check_tokens(&self, z: &TokenField) -> Result<()> {
        if z.num_tokens() != self.num_tokens {
            return Err(shape_err(
                format!("K={}", self.num_tokens),
                format!("K={}", z.num_tokens()),
            ));
        }
        Ok(())
    }
}

/// Square column-stochastic matrix indexed `[to][from]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatrix {
    size: usize,
    data: Vec<f64>,
}

impl StepMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, to: usize, from: usize) -> f64 {
        self.data[to * self.size + from]
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.size)
            .map(|to| (0..self.size).map(|from| self.get(to, from) * v[from]).sum())
            .collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.size)
            .map(|from| (0..self.size).map(|to| self.get(to, from)).sum())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn generic(t: usize, k: usize) -> TransitionSchedule {
        TransitionSchedule::build(
            t,
            k,
            ScheduleEndpoints {
                alpha_bar_first: 0.95,
                alpha_bar_last: 0.01,
                gamma_bar_first: 0.02,
                gamma_bar_last: 0.97,
            },
        )
        .unwrap()
    }

    #[test]
    fn default_endpoints_are_kept() {
        let s = TransitionSchedule::build(100, 16, ScheduleEndpoints::default()).unwrap();
        assert_eq!(s.alpha_bar(1), 0.99999);
        assert!((s.gamma_bar_nominal(100) - 0.99999).abs() < 1e-15);
        assert!((s.alpha_bar(100) - 0.000009).abs() < 1e-15);
        assert!(s.is_terminal_all_mask());
        for t in 1..=100 {
            let total = s.alpha_bar(t) + 16.0 * s.beta_bar(t) + s.gamma_bar(t);
            assert!((total - 1.0).abs() < 1e-12);
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.gamma_bar(t) > s.gamma_bar(t - 1));
            }
        }
    }

    #[test]
    fn single_step_beta_bar_uses_k_plus_one_divisor() {
        let ends = ScheduleEndpoints {
            alpha_bar_first: 0.5,
            alpha_bar_last: 0.5,
            gamma_bar_first: 0.4,
            gamma_bar_last: 0.4,
        };
        let s = TransitionSchedule::build(1, 4, ends).unwrap();
        assert!((s.beta_bar(1) - 0.02).abs() < 1e-15);
        assert!((s.gamma_bar(1) - 0.42).abs() < 1e-15);
    }

    #[test]
    fn interpolation_matches_hand_formula() {
        let s = generic(10, 5);
        // alpha_bar(5) = a1 + (4/9)(aT - a1)
        let expected = 0.95 + (4.0 / 9.0) * (0.01 - 0.95);
        assert!((s.alpha_bar(5) - expected).abs() < 1e-15);
        let g_expected = 0.02 + (4.0 / 9.0) * (0.97 - 0.02);
        assert!((s.gamma_bar_nominal(5) - g_expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_endpoints() {
        let mut e = ScheduleEndpoints::default();
        e.alpha_bar_first = 1.0;
        assert!(TransitionSchedule::build(10, 4, e).is_err());
        let e = ScheduleEndpoints {
            alpha_bar_first: 0.8,
            alpha_bar_last: 0.1,
            gamma_bar_first: 0.3,
            gamma_bar_last: 0.9,
        };
        assert!(matches!(
            TransitionSchedule::build(10, 4, e),
            Err(Error::InvalidSchedule(_))
        ));
        assert!(TransitionSchedule::build(0, 4, ScheduleEndpoints::default()).is_err());
    }

    #[test]
    fn cumulative_dist_matches_matrix_product() {
        let s = generic(5, 3);
        for z0 in 0..3 {
            let mut v = vec![0.0; 4];
            v[z0] = 1.0;
            for t in 1..=5 {
                v = s.single_step_matrix(t).unwrap().apply(&v);
                let closed = s.cumulative_forward_dist(t, z0).unwrap();
                for (a, b) in v.iter().zip(&closed) {
                    assert!((a - b).abs() < 1e-12, "t={t}: {v:?} vs {closed:?}");
                }
            }
        }
    }

    #[test]
    fn step_matrix_columns_and_absorption() {
        let s = generic(8, 6);
        for t in 1..=8 {
            let q = s.single_step_matrix(t).unwrap();
            for c in q.column_sums() {
                assert!((c - 1.0).abs() < 1e-12);
            }
            for to in 0..6 {
                assert_eq!(q.get(to, 6), 0.0);
            }
            assert_eq!(q.get(6, 6), 1.0);
        }
        assert!(s.single_step_matrix(0).is_err());
        assert!(s.single_step_matrix(9).is_err());
    }

    #[test]
    fn identity_step_when_nothing_changes() {
        let s = TransitionSchedule::from_cumulative(3, &[0.7, 0.7], &[0.3, 0.3]).unwrap();
        let q = s.single_step_matrix(2).unwrap();
        for to in 0..4 {
            for from in 0..4 {
                let expect = if to == from { 1.0 } else { 0.0 };
                assert!((q.get(to, from) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cumulative_rejects_masked_source() {
        let s = generic(4, 3);
        assert!(matches!(
            s.cumulative_forward_dist(2, 3),
            Err(Error::MaskedToken { .. })
        ));
    }

    #[test]
    fn no_corruption_limit_and_terminal_mask() {
        let s = TransitionSchedule::build(100, 8, ScheduleEndpoints::default()).unwrap();
        let d = s.cumulative_forward_dist(1, 2).unwrap();
        assert!((d[2] - 1.0).abs() < 1e-4);
        let d = s.cumulative_forward_dist(100, 2).unwrap();
        assert!((d[8] - (0.99999 + s.beta_bar(100))).abs() < 1e-15);
    }

    #[test]
    fn terminal_mask_fraction_monte_carlo() {
        let s = generic(6, 4);
        let z0 = TokenField::new(vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut masked = 0usize;
        let draws = 1000;
        for _ in 0..draws {
            masked += s.sample_zt_given_z0(6, &z0, &mut rng).unwrap().masked_count();
        }
        let freq = masked as f64 / (draws * z0.len()) as f64;
        let expect = s.gamma_bar_nominal(6) + s.beta_bar(6);
        assert!((freq - expect).abs() < 0.01, "{freq} vs {expect}");
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = generic(6, 4);
        let z0 = TokenField::new(vec![0, 1, 2, 3], 4).unwrap();
        let a = s
            .sample_zt_given_z0(3, &z0, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = s
            .sample_zt_given_z0(3, &z0, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
        let masked = TokenField::new(vec![0, 4], 4).unwrap();
        assert!(s
            .sample_zt_given_z0(3, &masked, &mut ChaCha8Rng::seed_from_u64(5))
            .is_err());
    }

    #[test]
    fn markov_posterior_matches_two_step_bayes() {
        let s = generic(6, 3);
        for t in 2..=6 {
            for z0 in 0..3 {
                for zt in 0..=3 {
                    // Enumerate q(z_{t-1} | z0) q(z_t | z_{t-1}) and normalize.
                    let prev = s.cumulative_forward_dist(t - 1, z0).unwrap();
                    let q = s.single_step_matrix(t).unwrap();
                    let joint: Vec<f64> = (0..4).map(|m| prev[m] * q.get(zt, m)).collect();
                    let z: f64 = joint.iter().sum();
                    let post = s.markov_posterior(t, z0, zt).unwrap();
                    let total: f64 = post.iter().sum();
                    assert!((total - 1.0).abs() < 1e-10);
                    for (p, j) in post.iter().zip(&joint) {
                        assert!((p - j / z).abs() < 1e-10);
                    }
                    if zt < 3 {
                        assert_eq!(post[3], 0.0, "no re-masking under the Markov chain");
                    }
                }
            }
        }
    }

    #[test]
    fn markov_posterior_keeps_unchanged_token() {
        let s = TransitionSchedule::build(50, 5, ScheduleEndpoints::default()).unwrap();
        let post = s.markov_posterior(20, 2, 2).unwrap();
        assert!(post[2] > 1.0 - 1e-5);
    }

    #[test]
    fn markov_posterior_unreachable() {
        let s = TransitionSchedule::from_cumulative(3, &[0.8, 0.6], &[0.2, 0.4]).unwrap();
        assert_eq!(s.markov_posterior(2, 0, 1), Err(Error::Unreachable));
    }

    #[test]
    fn star_kernel_degenerate_and_uniform() {
        let s = generic(5, 3);
        let one_hot = CategoricalField::one_hot(3, &[1, 2]).unwrap();
        let kern = s.star_reverse_kernel(4, &one_hot).unwrap();
        assert_eq!(kern[0], s.cumulative_forward_dist(3, 1).unwrap());
        assert_eq!(kern[1], s.cumulative_forward_dist(3, 2).unwrap());

        let uniform = CategoricalField::uniform(1, 3);
        let kern = s.star_reverse_kernel(4, &uniform).unwrap();
        let mut brute = vec![0.0; 4];
        for k in 0..3 {
            for (b, p) in brute.iter_mut().zip(s.cumulative_forward_dist(3, k).unwrap()) {
                *b += p / 3.0;
            }
        }
        for (a, b) in kern[0].iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((kern[0][3] - s.gamma_bar(3)).abs() < 1e-15);

        let kern = s.star_reverse_kernel(1, &uniform).unwrap();
        assert_eq!(kern[0], vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn star_kernel_rejects_wrong_token_count() {
        let s = generic(5, 3);
        let alpha = CategoricalField::uniform(1, 2);
        assert!(s.star_reverse_kernel(3, &alpha).is_err());
    }
}
