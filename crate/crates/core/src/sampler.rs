//! The two end-to-end solvers: star-shaped reverse kernel and Markov reverse kernel.
//!
//! At every step `t = T..1` the variational field `alpha_t` is initialized from the previous
//! step and the denoiser output, refined by a fixed number of RAdam iterations on the
//! objective, and then used to draw `z_{t-1}`.

use std::fmt::Write as _;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{hard_decode, Codebook, Decoder};
use crate::error::{shape_err, Error, Result};
use crate::field::{sample_categorical, CategoricalField, LOG_FLOOR};
use crate::noise::{TokenField, TransitionSchedule};
use crate::objective::{Objective, ObjectiveConfig};
use crate::operators::LinearProblem;
use crate::optimizer::{schedule_weight, RAdam};
use crate::prior::Denoiser;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Star,
    Markov,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Star => "star",
            Variant::Markov => "markov",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "star" => Ok(Variant::Star),
            "markov" => Ok(Variant::Markov),
            other => Err(Error::InvalidParameter(format!(
                "unknown variant {other:?} (expected star or markov)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub variant: Variant,
    pub inner_iters: usize,
    /// Forget coefficient in `[0, 1]`.
    pub forget: f64,
    pub tau: f64,
    pub eta_kl_base: f64,
    pub lr_base: f64,
    pub lambda_lr: f64,
    pub lambda_kl: f64,
    pub likelihood_weight: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub record_losses: bool,
    pub carry_optimizer_state: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Star,
            inner_iters: 30,
            forget: 0.3,
            tau: 1.0,
            eta_kl_base: 1.0,
            lr_base: 0.1,
            lambda_lr: 0.0,
            lambda_kl: 0.0,
            likelihood_weight: 1.0,
            n_mc: 1,
            seed: 0,
            record_losses: true,
            carry_optimizer_state: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.forget) {
            return Err(Error::InvalidParameter(format!(
                "forget coefficient {} outside [0, 1]",
                self.forget
            )));
        }
        if !(self.lr_base >= 0.0) || !self.lr_base.is_finite() {
            return Err(Error::InvalidParameter(format!("lr_base {} must be >= 0", self.lr_base)));
        }
        if !self.lambda_lr.is_finite() || !self.lambda_kl.is_finite() {
            return Err(Error::InvalidParameter("schedule exponents must be finite".into()));
        }
        self.objective_at(1.0).validate()
    }

    fn objective_at(&self, kl_weight: f64) -> ObjectiveConfig {
        ObjectiveConfig {
            eta_kl: self.eta_kl_base * kl_weight,
            likelihood_weight: self.likelihood_weight,
            tau: self.tau,
            n_mc: self.n_mc,
        }
    }
}

/// Overwrites chosen dimensions of `z_{T-1}` with a wrong clean token `(truth + 1) mod K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorInjection {
    pub truth: TokenField,
    pub dims: Vec<usize>,
}

impl ErrorInjection {
    fn apply(&self, z: &mut TokenField) -> Result<()> {
        let k = z.num_tokens();
        for &d in &self.dims {
            if d >= z.len() {
                return Err(shape_err(format!("dimension < {}", z.len()), d));
            }
            z.set(d, (self.truth.get(d) + 1) % k)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub z_t: TokenField,
    pub alpha: CategoricalField,
    pub z_prev: TokenField,
    /// Loss before each optimizer update; empty unless recording is on.
    pub losses: Vec<f64>,
    /// Loss after the last update, on fresh Gumbel draws.
    pub final_loss: f64,
    pub lr: f64,
    pub eta_kl: f64,
}

impl StepRecord {
    /// Dimensions unmasked in `z_t` but masked in `z_{t-1}`.
    pub fn remask_events(&self) -> usize {
        (0..self.z_t.len())
            .filter(|&i| !self.z_t.is_masked(i) && self.z_prev.is_masked(i))
            .count()
    }

    pub fn unmasked_before(&self) -> usize {
        self.z_t.len() - self.z_t.masked_count()
    }
}

/// Records in solver order, `t = T` first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn remask_events(&self) -> usize {
        self.steps.iter().map(StepRecord::remask_events).sum()
    }

    pub fn final_loss(&self) -> f64 {
        self.steps.last().map_or(f64::NAN, |s| s.final_loss)
    }

    /// One line per step: `t`, tokens, learning rate, KL weight, final loss, then `alpha`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# t z_t z_prev lr eta_kl final_loss alpha\n");
        for s in &self.steps {
            let alpha: Vec<String> = s.alpha.as_slice().iter().map(|p| format!("{p:.6}")).collect();
            let _ = writeln!(
                out,
                "{} {} {} {:e} {:e} {:e} {}",
                s.t,
                s.z_t.to_string().replace(' ', ","),
                s.z_prev.to_string().replace(' ', ","),
                s.lr,
                s.eta_kl,
                s.final_loss,
                alpha.join(",")
            );
        }
        out
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub z0: TokenField,
    pub x0: Vec<f64>,
    pub trajectory: Trajectory,
}

/// Initial logits for step `t`: `log prior_out` when there is no previous field, otherwise
/// `gamma log prev + (1 - gamma) log prior_out`, floored at [`LOG_FLOOR`].
pub fn init_alpha(
    prev: Option<&CategoricalField>,
    prior_out: &CategoricalField,
    gamma: f64,
) -> Result<Vec<f64>> {
    let lq = prior_out.log_probs();
    let Some(prev) = prev else {
        return Ok(lq);
    };
    if prev.rows() != prior_out.rows() || prev.cols() != prior_out.cols() {
        return Err(shape_err(
            format!("{}x{}", prior_out.rows(), prior_out.cols()),
            format!("{}x{}", prev.rows(), prev.cols()),
        ));
    }
    Ok(prev
        .log_probs()
        .into_iter()
        .zip(lq)
        .map(|(lp, lq)| (gamma * lp + (1.0 - gamma) * lq).max(LOG_FLOOR))
        .collect())
}

/// Everything a solver run reads but never mutates.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub denoiser: &'a dyn Denoiser,
    pub schedule: &'a TransitionSchedule,
    pub codebook: &'a Codebook,
    pub decoder: &'a Decoder,
    pub measurement: &'a LinearProblem,
}

pub fn g2d2_solve(cfg: &SolverConfig, p: Problem<'_>) -> Result<Solution> {
    if cfg.variant != Variant::Star {
        return Err(Error::InvalidParameter("g2d2_solve needs the star variant".into()));
    }
    solve(cfg, p, None)
}

pub fn g2d2_markov_solve(cfg: &SolverConfig, p: Problem<'_>) -> Result<Solution> {
    if cfg.variant != Variant::Markov {
        return Err(Error::InvalidParameter("g2d2_markov_solve needs the markov variant".into()));
    }
    solve(cfg, p, None)
}

/// Runs the variant named in `cfg`, optionally corrupting `z_{T-1}`.
pub fn solve(cfg: &SolverConfig, p: Problem<'_>, inject: Option<&ErrorInjection>) -> Result<Solution> {
    cfg.validate()?;
    let s = p.schedule;
    let k = s.num_tokens();
    let d = p.denoiser.dims();
    let total = s.num_steps();
    if p.denoiser.num_tokens() != k || p.codebook.num_tokens() != k {
        return Err(shape_err(k, p.codebook.num_tokens()));
    }
    if let Some(inj) = inject {
        inj.truth.ensure_clean()?;
        if inj.truth.len() != d || inj.truth.num_tokens() != k {
            return Err(shape_err(d, inj.truth.len()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let terminal = s.cumulative_forward_dist(total, 0)?;
    let init: Vec<usize> = (0..d).map(|_| sample_categorical(&terminal, &mut rng)).collect();
    let mut z = TokenField::new(init, k)?;

    let mut opt = RAdam::new(d * k);
    let mut prev_alpha: Option<CategoricalField> = None;
    let mut traj = Trajectory::default();

    for t in (1..=total).rev() {
        let prior_out = p.denoiser.denoise(&z, t)?;
        let mut logits = init_alpha(prev_alpha.as_ref(), &prior_out, cfg.forget)?;
        let lr = cfg.lr_base * schedule_weight(t, total, cfg.lambda_lr);
        let kl_w = schedule_weight(t, total, cfg.lambda_kl);
        let obj = Objective::new(&prior_out, p.measurement, p.codebook, p.decoder, cfg.objective_at(kl_w))?;
        if !cfg.carry_optimizer_state {
            opt.reset();
        }

        let mut losses = Vec::new();
        for it in 0..cfg.inner_iters {
            let draws = obj.sample_draws(&mut rng);
            let e = obj.loss_and_gradient(&logits, &draws)?;
            if !e.loss.is_finite() || e.gradient.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    step: t,
                    iteration: it,
                    what: format!("loss {} (kl {}, data fit {})", e.loss, e.kl, e.data_fit),
                });
            }
            if cfg.record_losses {
                losses.push(e.loss);
            }
            opt.update(&mut logits, &e.gradient, lr)?;
        }
        let draws = obj.sample_draws(&mut rng);
        let final_loss = obj.loss(&logits, &draws)?;
        if !final_loss.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                iteration: cfg.inner_iters,
                what: format!("final loss {final_loss}"),
            });
        }
        let alpha = CategoricalField::from_logits(d, k, &logits)?;

        let mut next = Vec::with_capacity(d);
        if t == 1 {
            for i in 0..d {
                next.push(sample_categorical(alpha.row(i), &mut rng));
            }
        } else {
            match cfg.variant {
                Variant::Star => {
                    for row in s.star_reverse_kernel(t, &alpha)? {
                        next.push(sample_categorical(&row, &mut rng));
                    }
                }
                Variant::Markov => {
                    for i in 0..d {
                        let kernel = s.markov_reverse_kernel(t, alpha.row(i), z.get(i))?;
                        next.push(sample_categorical(&kernel, &mut rng));
                    }
                }
            }
        }
        let mut z_prev = TokenField::new(next, k)?;
        if t == total {
            if let Some(inj) = inject {
                inj.apply(&mut z_prev)?;
            }
        }

        traj.steps.push(StepRecord {
            t,
            z_t: z.clone(),
            alpha: alpha.clone(),
            z_prev: z_prev.clone(),
            losses,
            final_loss,
            lr,
            eta_kl: obj.config.eta_kl,
        });
        prev_alpha = Some(alpha);
        z = z_prev;
    }

    let x0 = hard_decode(p.codebook, p.decoder, &z)?;
    Ok(Solution {
        z0: z,
        x0,
        trajectory: traj,
    })
}
