//! Built-in verification suites on tiny random instances, driven by `gdd verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::decoder::{hard_decode, Codebook, Decoder, LinearDecoder, MlpDecoder};
use crate::error::{Error, Result};
use crate::field::CategoricalField;
use crate::noise::{ScheduleEndpoints, TransitionSchedule};
use crate::objective::{finite_difference_gradient, gradient_relative_error, Objective, ObjectiveConfig};
use crate::operators::{LinearOperator, LinearProblem};
use crate::optimizer::schedule_weight;
use crate::oracle::{
    check_lemma1_decomposition, check_theorem1, enumerate_posterior,
    enumerate_star_decomp_marginal, VariationalParams,
};
use crate::prior::TabularJointPrior;

pub const SUBCOMMANDS: [&str; 5] = ["theorem1", "lemma_marginal", "lemma_decomp", "gradients", "schedule"];

pub const MARGINAL_TOL: f64 = 1e-10;
pub const THEOREM_TOL: f64 = 1e-8;
pub const OPTIMUM_TOL: f64 = 1e-10;
pub const DECOMPOSITION_TOL: f64 = 1e-9;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub name: String,
    pub lines: Vec<String>,
    pub passed: bool,
}

pub fn verify(subcommand: &str) -> Result<VerifyReport> {
    match subcommand {
        "theorem1" => verify_theorem1(50),
        "lemma_marginal" => verify_lemma_marginal(20),
        "lemma_decomp" => verify_lemma_decomp(20),
        "gradients" => verify_gradients(100),
        "schedule" => verify_schedule(),
        other => Err(Error::InvalidParameter(format!(
            "unknown verify subcommand {other:?} (one of {})",
            SUBCOMMANDS.join(", ")
        ))),
    }
}

/// Endpoints with `alpha_bar` decreasing, `gamma_bar` increasing and their sum non-increasing.
pub fn random_endpoints<R: Rng + ?Sized>(rng: &mut R) -> ScheduleEndpoints {
    let a1 = rng.random_range(0.6..0.99);
    let at = rng.random_range(0.01..a1 - 0.05);
    let g1 = rng.random_range(0.005..0.9 * (1.0 - a1));
    let gt = g1 + rng.random_range(0.3..1.0) * (a1 - at);
    ScheduleEndpoints {
        alpha_bar_first: a1,
        alpha_bar_last: at,
        gamma_bar_first: g1,
        gamma_bar_last: gt,
    }
}

/// Everything needed to pose one enumerable inverse problem.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub prior: TabularJointPrior,
    pub schedule: TransitionSchedule,
    pub codebook: Codebook,
    pub decoder: Decoder,
    pub problem: LinearProblem,
}

pub fn random_operator<R: Rng + ?Sized>(kind: usize, dim: usize, rng: &mut R) -> Result<LinearOperator> {
    match kind % 4 {
        0 => Ok(LinearOperator::identity(dim)),
        1 => {
            let mut kept: Vec<usize> = (0..dim).filter(|_| rng.random_bool(0.6)).collect();
            if kept.is_empty() {
                kept.push(rng.random_range(0..dim));
            }
            LinearOperator::mask(dim, kept)
        }
        2 => LinearOperator::downsample(dim, 2),
        _ => LinearOperator::blur(dim, 3, rng.random_range(0.5..1.5)),
    }
}

/// `K^{d_z}` stays tiny; the decoder output has even length so downsampling by 2 applies.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    num_tokens: usize,
    dims: usize,
    num_steps: usize,
    op_kind: usize,
    mlp: bool,
) -> Result<TinyInstance> {
    let prior = TabularJointPrior::random(num_tokens, dims, rng)?;
    let schedule = if num_steps == 1 {
        let a = rng.random_range(0.2..0.8);
        let g = rng.random_range(0.05..0.9 * (1.0 - a));
        TransitionSchedule::build(
            1,
            num_tokens,
            ScheduleEndpoints {
                alpha_bar_first: a,
                alpha_bar_last: a,
                gamma_bar_first: g,
                gamma_bar_last: g,
            },
        )?
    } else {
        TransitionSchedule::build(num_steps, num_tokens, random_endpoints(rng))?
    };
    let embed = 2;
    let out = 4;
    let codebook = Codebook::random(num_tokens, embed, 1.0, rng);
    let decoder = if mlp {
        Decoder::Mlp(MlpDecoder::random(dims * embed, 5, out, rng))
    } else {
        Decoder::Linear(LinearDecoder::random(dims * embed, out, rng))
    };
    let op = random_operator(op_kind, out, rng)?;
    let truth = prior.sample(rng);
    let x = hard_decode(&codebook, &decoder, &truth)?;
    let sigma = rng.random_range(0.3..1.0);
    let problem = LinearProblem::simulate(op, &x, sigma, rng)?;
    Ok(TinyInstance {
        prior,
        schedule,
        codebook,
        decoder,
        problem,
    })
}

/// Independent prior with a per-dimension observation: every exact conditional is a product.
pub fn product_form_instance<R: Rng + ?Sized>(rng: &mut R, num_tokens: usize, num_steps: usize) -> Result<TinyInstance> {
    let dims = 2;
    let rows: Vec<Vec<f64>> = (0..dims)
        .map(|_| {
            let raw: Vec<f64> = (0..num_tokens).map(|_| rng.random::<f64>() + 0.1).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let prior = TabularJointPrior::independent(&CategoricalField::from_rows(&rows)?)?;
    let vectors: Vec<Vec<f64>> = (0..num_tokens).map(|_| vec![rng.sample(StandardNormal)]).collect();
    let codebook = Codebook::new(&vectors)?;
    let decoder = Decoder::Linear(LinearDecoder::identity(dims));
    let y = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
    Ok(TinyInstance {
        prior,
        schedule: TransitionSchedule::build(num_steps, num_tokens, random_endpoints(rng))?,
        codebook,
        decoder,
        problem: LinearProblem::new(LinearOperator::identity(dims), y, rng.random_range(0.3..1.0))?,
    })
}

fn family_instance(rng: &mut ChaCha8Rng, i: usize) -> Result<TinyInstance> {
    let k = 2 + i % 2;
    let d = 1 + (i / 2) % 2;
    let t = 2 + (i / 4) % 3;
    random_instance(rng, k, d, t, i, i.is_multiple_of(3))
}

pub fn verify_lemma_marginal(n: usize) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x11);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let inst = family_instance(&mut rng, i)?;
        let post = enumerate_posterior(&inst.prior, &inst.codebook, &inst.decoder, &inst.problem)?;
        let sd = enumerate_star_decomp_marginal(
            &inst.prior,
            &inst.schedule,
            &inst.codebook,
            &inst.decoder,
            &inst.problem,
        )?;
        worst = worst.max(post.tv(&sd)?);
    }
    let passed = worst <= MARGINAL_TOL;
    Ok(VerifyReport {
        name: "lemma_marginal".into(),
        lines: vec![format!(
            "{n} instances: max TV(star-decomposed, posterior) = {worst:.3e} (tolerance {MARGINAL_TOL:e})"
        )],
        passed,
    })
}

pub fn verify_theorem1(n: usize) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x22);
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    let mut lines = Vec::new();
    for i in 0..n {
        let inst = family_instance(&mut rng, i)?;
        let (k, d, t) = (inst.prior.num_tokens(), inst.prior.dims(), inst.schedule.num_steps());
        let alpha = if i % 10 == 9 {
            VariationalParams::point_masses(t, k, d, &mut rng)?
        } else {
            VariationalParams::random(t, k, d, &mut rng)?
        };
        let b = check_theorem1(&inst.prior, &inst.schedule, &inst.codebook, &inst.decoder, &inst.problem, &alpha)?;
        let gap = b.rhs + THEOREM_TOL - b.lhs;
        min_gap = min_gap.min(gap);
        if !(gap >= 0.0) {
            violations += 1;
            lines.push(format!("draw {i}: lhs {:.6e} > rhs {:.6e}", b.lhs, b.rhs));
        }
    }
    lines.push(format!(
        "{n} random draws: {violations} violations of lhs <= rhs + {THEOREM_TOL:e}; min slack {min_gap:.3e}"
    ));
    let inst = product_form_instance(&mut rng, 3, 3)?;
    let exact = VariationalParams::exact_projection(&inst.prior, &inst.schedule, &inst.codebook, &inst.decoder, &inst.problem)?;
    let b = check_theorem1(&inst.prior, &inst.schedule, &inst.codebook, &inst.decoder, &inst.problem, &exact)?;
    let optimum_ok = b.rhs.abs() <= OPTIMUM_TOL && b.lhs <= OPTIMUM_TOL;
    lines.push(format!(
        "exact conditionals on a product-form instance: lhs {:.3e}, rhs {:.3e} (tolerance {OPTIMUM_TOL:e})",
        b.lhs, b.rhs
    ));
    Ok(VerifyReport {
        name: "theorem1".into(),
        lines,
        passed: violations == 0 && optimum_ok,
    })
}

pub fn verify_lemma_decomp(n: usize) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x33);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let inst = family_instance(&mut rng, i)?;
        let (k, d, total) = (inst.prior.num_tokens(), inst.prior.dims(), inst.schedule.num_steps());
        let t = rng.random_range(1..=total);
        let zt = crate::noise::TokenField::new((0..d).map(|_| rng.random_range(0..=k)).collect(), k)?;
        let alpha = VariationalParams::random(1, k, d, &mut rng)?;
        let field = alpha.field(1, &zt).clone();
        let c = check_lemma1_decomposition(
            &field,
            &inst.prior,
            &inst.problem,
            &inst.codebook,
            &inst.decoder,
            &inst.schedule,
            t,
            &zt,
        )?;
        worst = worst.max((c.lhs - c.rhs).abs());
    }
    Ok(VerifyReport {
        name: "lemma_decomp".into(),
        lines: vec![format!(
            "{n} instances: max |lhs - rhs| = {worst:.3e} (tolerance {DECOMPOSITION_TOL:e})"
        )],
        passed: worst <= DECOMPOSITION_TOL,
    })
}

/// Relative error of the analytic gradient for random configuration number `i`.
/// Cycles through both decoder families and all four operator kinds.
pub fn gradient_case(i: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=5);
    let d = rng.random_range(1..=4);
    let embed = rng.random_range(1..=3);
    let out = 2 * rng.random_range(2..=4);
    let codebook = Codebook::random(k, embed, 1.0, &mut rng);
    let decoder = if i.is_multiple_of(2) {
        Decoder::Linear(LinearDecoder::random(d * embed, out, &mut rng))
    } else {
        Decoder::Mlp(MlpDecoder::random(d * embed, 6, out, &mut rng))
    };
    let op = random_operator(i / 2, out, &mut rng)?;
    let y: Vec<f64> = (0..op.output_dim()).map(|_| rng.sample(StandardNormal)).collect();
    let problem = LinearProblem::new(op, y, 0.1)?;
    let prior_logits: Vec<f64> = (0..d * k).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let prior = CategoricalField::from_logits(d, k, &prior_logits)?;
    let cfg = ObjectiveConfig {
        eta_kl: rng.random_range(0.0..2.0),
        likelihood_weight: rng.random_range(0.1..2.0),
        tau: rng.random_range(0.5..2.0),
        n_mc: rng.random_range(1..=3),
    };
    let obj = Objective::new(&prior, &problem, &codebook, &decoder, cfg)?;
    let logits: Vec<f64> = (0..d * k).map(|_| rng.sample(StandardNormal)).collect();
    let draws = obj.sample_draws(&mut rng);
    let g = obj.loss_and_gradient(&logits, &draws)?.gradient;
    let fd = finite_difference_gradient(|l| obj.loss(l, &draws), &logits, FD_STEP)?;
    Ok(gradient_relative_error(&g, &fd))
}

pub fn verify_gradients(n: usize) -> Result<VerifyReport> {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        worst = worst.max(gradient_case(i, 0x44 + i as u64)?);
    }
    Ok(VerifyReport {
        name: "gradients".into(),
        lines: vec![format!(
            "{n} configurations: max relative error vs central differences (step {FD_STEP:e}) = {worst:.3e} (tolerance {GRADIENT_TOL:e})"
        )],
        passed: worst <= GRADIENT_TOL,
    })
}

pub fn verify_schedule() -> Result<VerifyReport> {
    let total = 10;
    let mut lines = Vec::new();
    let mut passed = true;
    for lambda in [0.0, 1.0, 2.0] {
        let w: Vec<f64> = (0..=total).map(|t| schedule_weight(t, total, lambda)).collect();
        let rendered: Vec<String> = w.iter().map(|v| format!("{v:.4}")).collect();
        lines.push(format!("lambda = {lambda}: w(0..={total}) = {}", rendered.join(" ")));
        let ok = if lambda == 0.0 {
            w.iter().all(|&v| v == 1.0)
        } else {
            w.windows(2).all(|p| p[1] > p[0]) && (w[total / 2] - 1.0).abs() < 1e-12
        };
        passed &= ok;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x55);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(2..=8);
        let t_max = rng.random_range(2..=20);
        let s = TransitionSchedule::build(t_max, k, random_endpoints(&mut rng))?;
        for z0 in 0..k {
            let mut v = vec![0.0; k + 1];
            v[z0] = 1.0;
            for t in 1..=t_max {
                v = s.single_step_matrix(t)?.apply(&v);
                let closed = s.cumulative_forward_dist(t, z0)?;
                for (a, b) in v.iter().zip(&closed) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    lines.push(format!(
        "20 random schedules: max |product of steps - closed form| = {worst:.3e} (tolerance 1e-12)"
    ));
    passed &= worst <= 1e-12;
    Ok(VerifyReport {
        name: "schedule".into(),
        lines,
        passed,
    })
}
