//! Denoising priors `p(z_0 | z_t)`.
//!
//! [`TabularJointPrior`] stores an explicit joint over every clean token field, which makes
//! the exact posterior `q(z_0 | z_t)` computable by enumeration. The [`Denoiser`] trait is
//! the seam a learned network would plug into; the solvers only see mean-field outputs.

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::error::{shape_err, Error, Result};
use crate::field::{sample_categorical, CategoricalField};
use crate::noise::{TokenField, TransitionSchedule};
use crate::space::TokenSpace;

/// An explicit distribution over all `K^{d_z}` clean token fields.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularJointPrior {
    space: TokenSpace,
    probs: Vec<f64>,
}

impl TabularJointPrior {
    pub fn from_table(num_tokens: usize, dims: usize, probs: Vec<f64>) -> Result<Self> {
        let space = TokenSpace::new(num_tokens, dims)?;
        if probs.len() != space.len() {
            return Err(shape_err(space.len(), probs.len()));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
            return Err(Error::NotNormalized { row: 0, sum });
        }
        Ok(Self { space, probs })
    }

    /// Product of the given per-dimension rows.
    pub fn independent(rows: &CategoricalField) -> Result<Self> {
        let space = TokenSpace::new(rows.cols(), rows.rows())?;
        let probs = space.iter().map(|z| rows.joint_prob(&z)).collect();
        Self::normalized(space, probs)
    }

    /// A first-order chain across dimensions: `z_0 ~ base` and
    /// `p(z_i | z_{i-1}) ∝ base[z_i] * exp(coupling * [z_i == z_{i-1}])`.
    /// Positive coupling favours runs of equal tokens; zero coupling is the independent prior.
    pub fn chain(num_tokens: usize, dims: usize, base: &[f64], coupling: f64) -> Result<Self> {
        if base.len() != num_tokens {
            return Err(shape_err(num_tokens, base.len()));
        }
        if !coupling.is_finite() {
            return Err(Error::InvalidParameter(format!("coupling {coupling}")));
        }
        let base_sum: f64 = base.iter().sum();
        if base.iter().any(|p| !(*p > 0.0)) || (base_sum - 1.0).abs() > 1e-10 {
            return Err(Error::NotNormalized {
                row: 0,
                sum: base_sum,
            });
        }
        let transition: Vec<Vec<f64>> = (0..num_tokens)
            .map(|prev| {
                let w: Vec<f64> = (0..num_tokens)
                    .map(|k| base[k] * if k == prev { coupling.exp() } else { 1.0 })
                    .collect();
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let space = TokenSpace::new(num_tokens, dims)?;
        let probs = space
            .iter()
            .map(|z| {
                z.windows(2)
                    .fold(base[z[0]], |acc, w| acc * transition[w[0]][w[1]])
            })
            .collect();
        Self::normalized(space, probs)
    }

    /// Flat-Dirichlet random table with every entry strictly positive.
    pub fn random<R: Rng + ?Sized>(num_tokens: usize, dims: usize, rng: &mut R) -> Result<Self> {
        let space = TokenSpace::new(num_tokens, dims)?;
        let probs = (0..space.len())
            .map(|_| {
                let e: f64 = Exp1.sample(rng);
                e + 1e-6
            })
            .collect();
        Self::normalized(space, probs)
    }

    pub fn point_mass(num_tokens: usize, tokens: &[usize]) -> Result<Self> {
        let space = TokenSpace::new(num_tokens, tokens.len())?;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= num_tokens) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                limit: num_tokens,
            });
        }
        let mut probs = vec![0.0; space.len()];
        probs[space.encode(tokens)] = 1.0;
        Ok(Self { space, probs })
    }

    fn normalized(space: TokenSpace, mut probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::NotNormalized { row: 0, sum });
        }
        probs.iter_mut().for_each(|p| *p /= sum);
        Ok(Self { space, probs })
    }

    pub fn num_tokens(&self) -> usize {
        self.space.base()
    }

    pub fn dims(&self) -> usize {
        self.space.dims()
    }

    pub fn space(&self) -> TokenSpace {
        self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, tokens: &[usize]) -> f64 {
        self.probs[self.space.encode(tokens)]
    }

    pub fn marginals(&self) -> CategoricalField {
        marginals_of(&self.space, &self.probs)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenField {
        let idx = sample_categorical(&self.probs, rng);
        TokenField::new(self.space.decode(idx), self.num_tokens())
            .expect("decoded tokens are in range")
    }

    /// Exact joint `q(z_0 | z_t)` over the clean state space, by Bayes' rule.
    pub fn conditional_joint(
        &self,
        schedule: &TransitionSchedule,
        t: usize,
        zt: &TokenField,
    ) -> Result<Vec<f64>> {
        self.check_compatible(schedule, zt)?;
        let k = self.num_tokens();
        // Per-dimension likelihood table lik[i][z0_i] = q(z_t,i | z0_i).
        let lik: Vec<Vec<f64>> = zt
            .tokens()
            .iter()
            .map(|&obs| {
                (0..k)
                    .map(|z0| Ok(schedule.cumulative_forward_dist(t, z0)?[obs]))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let mut joint: Vec<f64> = self
            .space
            .iter()
            .zip(&self.probs)
            .map(|(z0, &p)| {
                z0.iter()
                    .enumerate()
                    .fold(p, |acc, (i, &tok)| acc * lik[i][tok])
            })
            .collect();
        let total: f64 = joint.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Unreachable);
        }
        joint.iter_mut().for_each(|p| *p /= total);
        Ok(joint)
    }

    fn check_compatible(&self, schedule: &TransitionSchedule, zt: &TokenField) -> Result<()> {
        if schedule.num_tokens() != self.num_tokens() || zt.num_tokens() != self.num_tokens() {
            return Err(shape_err(
                format!("K={}", self.num_tokens()),
                format!("schedule K={}, field K={}", schedule.num_tokens(), zt.num_tokens()),
            ));
        }
        if zt.len() != self.dims() {
            return Err(shape_err(format!("d_z={}", self.dims()), zt.len()));
        }
        Ok(())
    }
}

/// Per-dimension marginals of a joint over `space`.
pub fn marginals_of(space: &TokenSpace, joint: &[f64]) -> CategoricalField {
    let (k, d) = (space.base(), space.dims());
    let mut probs = vec![0.0; d * k];
    for (z, &p) in space.iter().zip(joint) {
        for (i, &tok) in z.iter().enumerate() {
            probs[i * k + tok] += p;
        }
    }
    for row in probs.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|p| *p /= s);
        }
    }
    CategoricalField::new(d, k, probs).expect("marginals of a normalized joint")
}

/// Mean-field projection of the exact posterior `q(z_0 | z_t)`.
pub fn exact_denoiser(
    prior: &TabularJointPrior,
    schedule: &TransitionSchedule,
    t: usize,
    zt: &TokenField,
) -> Result<CategoricalField> {
    let joint = prior.conditional_joint(schedule, t, zt)?;
    Ok(marginals_of(&prior.space(), &joint))
}

/// A clean-token predictor `p(z_0 | z_t)` with independent per-dimension outputs.
pub trait Denoiser: Send + Sync {
    fn num_tokens(&self) -> usize;

    fn dims(&self) -> usize;

    fn denoise(&self, zt: &TokenField, t: usize) -> Result<CategoricalField>;
}

/// Exact Bayes denoiser backed by a tabular joint prior.
#[derive(Debug, Clone)]
pub struct TabularDenoiser {
    prior: TabularJointPrior,
    schedule: TransitionSchedule,
}

impl TabularDenoiser {
    pub fn new(prior: TabularJointPrior, schedule: TransitionSchedule) -> Result<Self> {
        if prior.num_tokens() != schedule.num_tokens() {
            return Err(shape_err(prior.num_tokens(), schedule.num_tokens()));
        }
        Ok(Self { prior, schedule })
    }

    pub fn prior(&self) -> &TabularJointPrior {
        &self.prior
    }
}

impl Denoiser for TabularDenoiser {
    fn num_tokens(&self) -> usize {
        self.prior.num_tokens()
    }

    fn dims(&self) -> usize {
        self.prior.dims()
    }

    fn denoise(&self, zt: &TokenField, t: usize) -> Result<CategoricalField> {
        exact_denoiser(&self.prior, &self.schedule, t, zt)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UniformDenoiser {
    pub num_tokens: usize,
    pub dims: usize,
}

impl Denoiser for UniformDenoiser {
    fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    fn dims(&self) -> usize {
        self.dims
    }

    fn denoise(&self, zt: &TokenField, _t: usize) -> Result<CategoricalField> {
        if zt.len() != self.dims {
            return Err(shape_err(self.dims, zt.len()));
        }
        Ok(CategoricalField::uniform(self.dims, self.num_tokens))
    }
}

/// Returns fixed rows whatever `z_t` is.
#[derive(Debug, Clone)]
pub struct ProductDenoiser {
    rows: CategoricalField,
}

impl ProductDenoiser {
    pub fn new(rows: CategoricalField) -> Self {
        Self { rows }
    }
}

impl Denoiser for ProductDenoiser {
    fn num_tokens(&self) -> usize {
        self.rows.cols()
    }

    fn dims(&self) -> usize {
        self.rows.rows()
    }

    fn denoise(&self, zt: &TokenField, _t: usize) -> Result<CategoricalField> {
        if zt.len() != self.rows.rows() {
            return Err(shape_err(self.rows.rows(), zt.len()));
        }
        Ok(self.rows.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::ScheduleEndpoints;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn schedule(t: usize, k: usize) -> TransitionSchedule {
        TransitionSchedule::build(
            t,
            k,
            ScheduleEndpoints {
                alpha_bar_first: 0.9,
                alpha_bar_last: 0.002,
                gamma_bar_first: 0.05,
                gamma_bar_last: 0.995,
            },
        )
        .unwrap()
    }

    // Independent Bayes enumeration: loops over explicit tuples rather than the mixed-radix
    // helpers used by the implementation.
    fn brute_marginals(
        prior: &TabularJointPrior,
        s: &TransitionSchedule,
        t: usize,
        zt: &[usize],
    ) -> Vec<Vec<f64>> {
        let k = prior.num_tokens();
        assert_eq!(zt.len(), 2);
        let mut m = vec![vec![0.0; k]; 2];
        let mut total = 0.0;
        for a in 0..k {
            for b in 0..k {
                let w = prior.prob(&[a, b])
                    * s.cumulative_forward_dist(t, a).unwrap()[zt[0]]
                    * s.cumulative_forward_dist(t, b).unwrap()[zt[1]];
                m[0][a] += w;
                m[1][b] += w;
                total += w;
            }
        }
        m.iter_mut()
            .for_each(|r| r.iter_mut().for_each(|x| *x /= total));
        m
    }

    #[test]
    fn chain_prior_matches_bayes_enumeration() {
        let s = schedule(4, 3);
        let prior = TabularJointPrior::chain(3, 2, &[0.5, 0.3, 0.2], 1.5).unwrap();
        for zt in [[0, 3], [3, 3], [1, 2], [2, 0]] {
            for t in 1..=4 {
                let field = TokenField::new(zt.to_vec(), 3).unwrap();
                let got = exact_denoiser(&prior, &s, t, &field).unwrap();
                let want = brute_marginals(&prior, &s, t, &zt);
                for i in 0..2 {
                    for k in 0..3 {
                        assert!((got.row(i)[k] - want[i][k]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn all_mask_terminal_returns_prior_marginals() {
        let s = TransitionSchedule::build(10, 3, ScheduleEndpoints::default()).unwrap();
        let prior = TabularJointPrior::chain(3, 3, &[0.2, 0.5, 0.3], 2.0).unwrap();
        let zt = TokenField::all_masked(3, 3);
        let got = exact_denoiser(&prior, &s, 10, &zt).unwrap();
        let want = prior.marginals();
        for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn clean_observation_is_returned() {
        let s = TransitionSchedule::build(100, 4, ScheduleEndpoints::default()).unwrap();
        let prior = TabularJointPrior::chain(4, 2, &[0.25; 4], 0.5).unwrap();
        let zt = TokenField::new(vec![3, 1], 4).unwrap();
        let got = exact_denoiser(&prior, &s, 1, &zt).unwrap();
        assert!(got.row(0)[3] > 1.0 - 1e-4);
        assert!(got.row(1)[1] > 1.0 - 1e-4);
    }

    #[test]
    fn enumeration_guard() {
        assert!(matches!(
            TabularJointPrior::chain(10, 7, &[0.1; 10], 0.0),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn independent_prior_round_trips_marginals() {
        let rows =
            CategoricalField::from_rows(&[vec![0.1, 0.9], vec![0.6, 0.4], vec![0.3, 0.7]]).unwrap();
        let prior = TabularJointPrior::independent(&rows).unwrap();
        let sum: f64 = prior.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (a, b) in prior.marginals().as_slice().iter().zip(rows.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn simple_denoisers() {
        let zt = TokenField::all_masked(2, 3);
        let u = UniformDenoiser {
            num_tokens: 3,
            dims: 2,
        };
        assert_eq!(u.denoise(&zt, 1).unwrap(), CategoricalField::uniform(2, 3));
        let rows = CategoricalField::from_rows(&[vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0]]).unwrap();
        let p = ProductDenoiser::new(rows.clone());
        let other = TokenField::new(vec![0, 2], 3).unwrap();
        assert_eq!(p.denoise(&zt, 4).unwrap(), rows);
        assert_eq!(p.denoise(&other, 1).unwrap(), rows);

        let s = schedule(4, 3);
        let prior = TabularJointPrior::chain(3, 2, &[0.5, 0.3, 0.2], 1.0).unwrap();
        let tab = TabularDenoiser::new(prior.clone(), s.clone()).unwrap();
        assert_eq!(
            tab.denoise(&other, 2).unwrap(),
            exact_denoiser(&prior, &s, 2, &other).unwrap()
        );
    }

    proptest! {
        #[test]
        fn unmasking_true_tokens_never_hurts(seed in 0u64..500, t in 1usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = schedule(4, 3);
            let prior = TabularJointPrior::random(3, 3, &mut rng).unwrap();
            let truth = prior.sample(&mut rng);
            let mut zt = TokenField::all_masked(3, 3);
            let mut last = prior
                .conditional_joint(&s, t, &zt)
                .unwrap()[prior.space().encode(truth.tokens())];
            for i in 0..3 {
                zt.set(i, truth.get(i)).unwrap();
                let p = prior
                    .conditional_joint(&s, t, &zt)
                    .unwrap()[prior.space().encode(truth.tokens())];
                prop_assert!(p >= last - 1e-12);
                last = p;
            }
        }
    }
}
