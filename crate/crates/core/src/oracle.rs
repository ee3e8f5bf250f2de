//! Brute-force enumeration over every token field, used as ground truth on tiny instances.
//!
//! Noisy states `z_t` live in `(K+1)^{d_z}` (MASK included); clean states in `K^{d_z}`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

use crate::decoder::{hard_decode, Codebook, Decoder};
use crate::error::{shape_err, Error, Result};
use crate::field::CategoricalField;
use crate::metrics::tv_distance;
use crate::noise::{TokenField, TransitionSchedule};
use crate::operators::LinearProblem;
use crate::prior::{marginals_of, TabularJointPrior};
use crate::space::TokenSpace;

/// A normalized distribution over all clean token fields.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedPosterior {
    space: TokenSpace,
    probs: Vec<f64>,
}

impl EnumeratedPosterior {
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

    pub fn tv(&self, other: &EnumeratedPosterior) -> Result<f64> {
        tv_distance(&self.probs, &other.probs)
    }
}

/// `log q(y | z0) = -||y - A D(z0)||^2 / (2 sigma^2)` for every clean field, in space order.
pub fn log_likelihood_table(
    space: &TokenSpace,
    cb: &Codebook,
    dec: &Decoder,
    prob: &LinearProblem,
) -> Result<Vec<f64>> {
    if prob.sigma_eta <= 0.0 {
        return Err(Error::InvalidParameter(
            "enumerated posterior needs a positive noise level".into(),
        ));
    }
    (0..space.len())
        .into_par_iter()
        .map(|idx| {
            let z0 = TokenField::new(space.decode(idx), space.base())?;
            prob.log_likelihood(&hard_decode(cb, dec, &z0)?)
        })
        .collect()
}

/// Normalizes `exp(log_weights)`; returns the probabilities and `log sum exp`.
fn normalize_log(log_weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Unreachable);
    }
    let unnorm: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok((unnorm.iter().map(|u| u / total).collect(), max + total.ln()))
}

fn log_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `q(z0 | y)` proportional to `q(y | z0) q(z0)`.
pub fn enumerate_posterior(
    prior: &TabularJointPrior,
    cb: &Codebook,
    dec: &Decoder,
    prob: &LinearProblem,
) -> Result<EnumeratedPosterior> {
    let space = prior.space();
    let ll = log_likelihood_table(&space, cb, dec, prob)?;
    let lw: Vec<f64> = ll
        .iter()
        .zip(prior.probs())
        .map(|(l, &p)| l + log_or_neg_inf(p))
        .collect();
    let (probs, _) = normalize_log(&lw)?;
    Ok(EnumeratedPosterior { space, probs })
}

/// `F_t[z0][z] = prod_i q(z_{t,i} | z0_i)`, row-major over clean x noisy states.
fn forward_table(
    s: &TransitionSchedule,
    t: usize,
    clean: &TokenSpace,
    noisy: &TokenSpace,
) -> Result<Vec<f64>> {
    let k = s.num_tokens();
    let per_token: Vec<Vec<f64>> = (0..k)
        .map(|z0| s.cumulative_forward_dist(t, z0))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(clean.len() * noisy.len());
    for z0 in clean.iter() {
        for z in noisy.iter() {
            out.push(
                z0.iter()
                    .zip(&z)
                    .map(|(&a, &b)| per_token[a][b])
                    .product(),
            );
        }
    }
    Ok(out)
}

fn spaces(prior: &TabularJointPrior, s: &TransitionSchedule) -> Result<(TokenSpace, TokenSpace)> {
    if prior.num_tokens() != s.num_tokens() {
        return Err(shape_err(s.num_tokens(), prior.num_tokens()));
    }
    let clean = prior.space();
    let noisy = TokenSpace::new(s.num_tokens() + 1, prior.dims())?;
    let work = (noisy.len() as u128) * (s.num_steps() as u128);
    if work > crate::space::ENUMERATION_LIMIT as u128 {
        return Err(Error::EnumerationTooLarge {
            size: work,
            limit: crate::space::ENUMERATION_LIMIT,
        });
    }
    Ok((clean, noisy))
}

/// Exact conditionals `q_star(z0 | z_t = b, y)` for every noisy state `b`, or `None` where
/// `b` has zero probability.
fn clean_conditionals(post: &[f64], f_t: &[f64], nn: usize) -> Vec<Option<Vec<f64>>> {
    (0..nn)
        .map(|b| {
            let w: Vec<f64> = post.iter().enumerate().map(|(a, p)| p * f_t[a * nn + b]).collect();
            let total: f64 = w.iter().sum();
            (total > 0.0).then(|| w.into_iter().map(|v| v / total).collect())
        })
        .collect()
}

/// Marginal of `z_0` under the chain `q_star(z_T | y) prod_t q_star(z_{t-1} | z_t, y)`,
/// each local conditional obtained by Bayes over the enumerated star joint.
pub fn enumerate_star_decomp_marginal(
    prior: &TabularJointPrior,
    s: &TransitionSchedule,
    cb: &Codebook,
    dec: &Decoder,
    prob: &LinearProblem,
) -> Result<EnumeratedPosterior> {
    let (clean, noisy) = spaces(prior, s)?;
    let post = enumerate_posterior(prior, cb, dec, prob)?;
    let (nc, nn) = (clean.len(), noisy.len());
    let total = s.num_steps();

    let f_top = forward_table(s, total, &clean, &noisy)?;
    let mut p_t: Vec<f64> = (0..nn)
        .map(|b| (0..nc).map(|a| post.probs[a] * f_top[a * nn + b]).sum())
        .collect();
    let mut f_t = f_top;

    for t in (2..=total).rev() {
        let f_prev = forward_table(s, t - 1, &clean, &noisy)?;
        let cond = clean_conditionals(&post.probs, &f_t, nn);
        let mut next = vec![0.0; nn];
        for (b, c) in cond.iter().enumerate() {
            let (Some(c), true) = (c, p_t[b] > 0.0) else {
                continue;
            };
            // q(z_{t-1} | z_t = b, y) = sum_z0 q(z_{t-1} | z0) q(z0 | z_t = b, y)
            for (a, &ca) in c.iter().enumerate() {
                if ca == 0.0 {
                    continue;
                }
                let w = p_t[b] * ca;
                for (bp, n) in next.iter_mut().enumerate() {
                    *n += w * f_prev[a * nn + bp];
                }
            }
        }
        p_t = next;
        f_t = f_prev;
    }

    let cond = clean_conditionals(&post.probs, &f_t, nn);
    let mut probs = vec![0.0; nc];
    for (b, c) in cond.iter().enumerate() {
        if let (Some(c), true) = (c, p_t[b] > 0.0) {
            for (p, ca) in probs.iter_mut().zip(c) {
                *p += p_t[b] * ca;
            }
        }
    }
    Ok(EnumeratedPosterior { space: clean, probs })
}

/// One mean-field field `alpha_t(z_t)` for every step `t` and every noisy state `z_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    noisy: TokenSpace,
    /// `fields[t - 1][noisy index]`.
    fields: Vec<Vec<CategoricalField>>,
}

impl VariationalParams {
    pub fn from_fn<F>(num_steps: usize, num_tokens: usize, dims: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &TokenField) -> Result<CategoricalField>,
    {
        let noisy = TokenSpace::new(num_tokens + 1, dims)?;
        let mut fields = Vec::with_capacity(num_steps);
        for t in 1..=num_steps {
            let mut per_state = Vec::with_capacity(noisy.len());
            for z in noisy.iter() {
                let field = f(t, &TokenField::new(z, num_tokens)?)?;
                if field.rows() != dims || field.cols() != num_tokens {
                    return Err(shape_err(
                        format!("{dims}x{num_tokens}"),
                        format!("{}x{}", field.rows(), field.cols()),
                    ));
                }
                per_state.push(field);
            }
            fields.push(per_state);
        }
        Ok(Self { noisy, fields })
    }

    /// Rows drawn uniformly from the simplex.
    pub fn random<R: Rng + ?Sized>(
        num_steps: usize,
        num_tokens: usize,
        dims: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(num_steps, num_tokens, dims, |_, _| {
            let raw: Vec<f64> = (0..dims * num_tokens)
                .map(|_| Distribution::<f64>::sample(&Exp1, rng) + 1e-12)
                .collect();
            let mut probs = Vec::with_capacity(raw.len());
            for row in raw.chunks(num_tokens) {
                let s: f64 = row.iter().sum();
                probs.extend(row.iter().map(|v| v / s));
            }
            CategoricalField::new(dims, num_tokens, probs)
        })
    }

    /// Every row a point mass on a random token.
    pub fn point_masses<R: Rng + ?Sized>(
        num_steps: usize,
        num_tokens: usize,
        dims: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::from_fn(num_steps, num_tokens, dims, |_, _| {
            let tokens: Vec<usize> = (0..dims).map(|_| rng.random_range(0..num_tokens)).collect();
            CategoricalField::one_hot(num_tokens, &tokens)
        })
    }

    /// Per-dimension marginals of the exact `q_star(z0 | z_t, y)`; uniform rows for
    /// states of probability zero.
    pub fn exact_projection(
        prior: &TabularJointPrior,
        s: &TransitionSchedule,
        cb: &Codebook,
        dec: &Decoder,
        prob: &LinearProblem,
    ) -> Result<Self> {
        let (clean, noisy) = spaces(prior, s)?;
        let post = enumerate_posterior(prior, cb, dec, prob)?;
        let (k, d) = (s.num_tokens(), prior.dims());
        let mut fields = Vec::with_capacity(s.num_steps());
        for t in 1..=s.num_steps() {
            let f_t = forward_table(s, t, &clean, &noisy)?;
            fields.push(
                clean_conditionals(&post.probs, &f_t, noisy.len())
                    .into_iter()
                    .map(|c| match c {
                        Some(c) => marginals_of(&clean, &c),
                        None => CategoricalField::uniform(d, k),
                    })
                    .collect(),
            );
        }
        Ok(Self { noisy, fields })
    }

    pub fn num_steps(&self) -> usize {
        self.fields.len()
    }

    pub fn field(&self, t: usize, zt: &TokenField) -> &CategoricalField {
        &self.fields[t - 1][self.noisy.encode(zt.tokens())]
    }
}

/// Both sides of the variational KL bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            if a <= 0.0 {
                0.0
            } else if b <= 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            }
        })
        .sum()
}

fn product_joint(field: &CategoricalField, clean: &TokenSpace) -> Vec<f64> {
    clean.iter().map(|z| field.joint_prob(&z)).collect()
}

/// `lhs = KL(p_alpha(z0 | y) || q_star-decomp(z0 | y))` and
/// `rhs = sum_t E_{z_t ~ p_alpha}[KL(prod alpha_t(z_t) || q_star(z0 | z_t, y))]`.
///
/// `p_alpha` starts from the exact `q_star(z_T | y)` and steps down with the star kernel
/// built from `alpha`.
pub fn check_theorem1(
    prior: &TabularJointPrior,
    s: &TransitionSchedule,
    cb: &Codebook,
    dec: &Decoder,
    prob: &LinearProblem,
    alpha: &VariationalParams,
) -> Result<BoundCheck> {
    let (clean, noisy) = spaces(prior, s)?;
    if alpha.num_steps() != s.num_steps() || alpha.noisy != noisy {
        return Err(shape_err(s.num_steps(), alpha.num_steps()));
    }
    let post = enumerate_posterior(prior, cb, dec, prob)?;
    let (nc, nn) = (clean.len(), noisy.len());
    let k = s.num_tokens();
    let total = s.num_steps();

    let f_top = forward_table(s, total, &clean, &noisy)?;
    let mut p_t: Vec<f64> = (0..nn)
        .map(|b| (0..nc).map(|a| post.probs[a] * f_top[a * nn + b]).sum())
        .collect();
    let mut rhs = 0.0;
    let mut p0 = vec![0.0; nc];

    for t in (1..=total).rev() {
        let f_t = forward_table(s, t, &clean, &noisy)?;
        let cond = clean_conditionals(&post.probs, &f_t, nn);
        let per_token: Vec<Vec<f64>> = (0..k)
            .map(|z0| s.cumulative_forward_dist(t - 1, z0))
            .collect::<Result<_>>()?;
        let mut next = vec![0.0; nn];
        for (b, zb) in noisy.iter().enumerate() {
            if p_t[b] <= 0.0 {
                continue;
            }
            let field = &alpha.fields[t - 1][b];
            let joint = product_joint(field, &clean);
            rhs += p_t[b]
                * match &cond[b] {
                    Some(c) => kl(&joint, c),
                    None => f64::INFINITY,
                };
            if t == 1 {
                for (p, j) in p0.iter_mut().zip(&joint) {
                    *p += p_t[b] * j;
                }
                continue;
            }
            // Star kernel per dimension: sum_k alpha_{i,k} q(z_{t-1,i} | z0 = k).
            let kernel: Vec<Vec<f64>> = (0..zb.len())
                .map(|i| {
                    (0..=k)
                        .map(|m| (0..k).map(|kk| field.row(i)[kk] * per_token[kk][m]).sum())
                        .collect()
                })
                .collect();
            for (bp, zp) in noisy.iter().enumerate() {
                let pr: f64 = zp.iter().enumerate().map(|(i, &m)| kernel[i][m]).product();
                next[bp] += p_t[b] * pr;
            }
        }
        p_t = next;
    }

    let q_sd = enumerate_star_decomp_marginal(prior, s, cb, dec, prob)?;
    Ok(BoundCheck {
        lhs: kl(&p0, &q_sd.probs),
        rhs,
    })
}

/// Terms of the two-route KL decomposition at a single `(t, z_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionCheck {
    /// `KL(prod alpha || q_star(z0 | z_t, y))`, via the enumerated posterior given `y`.
    pub lhs: f64,
    /// `KL(prod alpha || q(z0 | z_t))`.
    pub kl_prior: f64,
    /// `E_{prod alpha}[log q(y | z0)]` with the unnormalized Gaussian.
    pub expected_loglik: f64,
    /// `log sum_z0 q(z0 | z_t) q(y | z0)`.
    pub log_normalizer: f64,
    /// `kl_prior - expected_loglik + log_normalizer`.
    pub rhs: f64,
}

pub fn check_lemma1_decomposition(
    alpha: &CategoricalField,
    prior: &TabularJointPrior,
    prob: &LinearProblem,
    cb: &Codebook,
    dec: &Decoder,
    s: &TransitionSchedule,
    t: usize,
    zt: &TokenField,
) -> Result<DecompositionCheck> {
    let clean = prior.space();
    if alpha.rows() != prior.dims() || alpha.cols() != prior.num_tokens() {
        return Err(shape_err(
            format!("{}x{}", prior.dims(), prior.num_tokens()),
            format!("{}x{}", alpha.rows(), alpha.cols()),
        ));
    }
    let joint = product_joint(alpha, &clean);
    let ll = log_likelihood_table(&clean, cb, dec, prob)?;

    // Route 1: posterior given y, then Bayes with the forward kernel.
    let post = enumerate_posterior(prior, cb, dec, prob)?;
    let k = s.num_tokens();
    let per_token: Vec<Vec<f64>> = (0..k)
        .map(|z0| s.cumulative_forward_dist(t, z0))
        .collect::<Result<_>>()?;
    let w: Vec<f64> = clean
        .iter()
        .zip(&post.probs)
        .map(|(z0, p)| p * z0.iter().zip(zt.tokens()).map(|(&a, &b)| per_token[a][b]).product::<f64>())
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Unreachable);
    }
    let cond_y: Vec<f64> = w.iter().map(|v| v / total).collect();
    let lhs = kl(&joint, &cond_y);

    // Route 2: prior conditional plus likelihood terms.
    let cond = prior.conditional_joint(s, t, zt)?;
    let kl_prior = kl(&joint, &cond);
    let expected_loglik: f64 = joint
        .iter()
        .zip(&ll)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, l)| p * l)
        .sum();
    let lw: Vec<f64> = cond.iter().zip(&ll).map(|(&c, l)| log_or_neg_inf(c) + l).collect();
    let (_, log_normalizer) = normalize_log(&lw)?;
    Ok(DecompositionCheck {
        lhs,
        kl_prior,
        expected_loglik,
        log_normalizer,
        rhs: kl_prior - expected_loglik + log_normalizer,
    })
}
