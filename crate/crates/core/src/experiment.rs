//! Seeded experiment runs over a bounded worker pool, reported as CSV.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{DecoderKind, ExperimentConfig, OperatorSpec, PriorSpec};
use crate::decoder::{hard_decode, Codebook, Decoder, LinearDecoder, MlpDecoder};
use crate::error::{Error, Result};
use crate::field::CategoricalField;
use crate::metrics;
use crate::noise::TransitionSchedule;
use crate::operators::{LinearOperator, LinearProblem};
use crate::prior::{TabularDenoiser, TabularJointPrior};
use crate::sampler::{solve, ErrorInjection, Problem, SolverConfig};

/// Fixed CSV column order.
pub const CSV_COLUMNS: [&str; 12] = [
    "seed",
    "variant",
    "T",
    "inner_iters",
    "gamma",
    "eta_kl_base",
    "lr_base",
    "psnr_db",
    "mse",
    "token_accuracy",
    "final_loss",
    "wall_ms",
];

/// Environment variable read for the default worker count.
pub const WORKERS_ENV: &str = "GDD_WORKERS";

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub variant: &'static str,
    pub num_steps: usize,
    pub inner_iters: usize,
    pub gamma: f64,
    pub eta_kl_base: f64,
    pub lr_base: f64,
    pub psnr_db: f64,
    pub mse: f64,
    pub token_accuracy: f64,
    pub final_loss: f64,
    pub wall_ms: f64,
}

impl SeedResult {
    fn record(&self) -> [String; 12] {
        [
            self.seed.to_string(),
            self.variant.to_string(),
            self.num_steps.to_string(),
            self.inner_iters.to_string(),
            self.gamma.to_string(),
            self.eta_kl_base.to_string(),
            self.lr_base.to_string(),
            self.psnr_db.to_string(),
            self.mse.to_string(),
            self.token_accuracy.to_string(),
            self.final_loss.to_string(),
            format!("{:.3}", self.wall_ms),
        ]
    }
}

/// Immutable pieces shared by every seed of an experiment.
#[derive(Debug, Clone)]
pub struct Setup {
    pub schedule: TransitionSchedule,
    pub prior: TabularJointPrior,
    pub denoiser: TabularDenoiser,
    pub codebook: Codebook,
    pub decoder: Decoder,
    pub operator: LinearOperator,
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let (k, d) = (cfg.num_tokens, cfg.dims);
        let schedule = TransitionSchedule::build(cfg.num_steps, k, cfg.schedule)?;
        let prior = match &cfg.prior {
            PriorSpec::Random => {
                TabularJointPrior::random(k, d, &mut ChaCha8Rng::seed_from_u64(cfg.prior_seed))?
            }
            PriorSpec::Chain { coupling } => {
                TabularJointPrior::chain(k, d, &vec![1.0 / k as f64; k], *coupling)?
            }
            PriorSpec::Uniform => TabularJointPrior::independent(&CategoricalField::uniform(d, k))?,
        };
        let denoiser = TabularDenoiser::new(prior.clone(), schedule.clone())?;
        let codebook = Codebook::random(
            k,
            cfg.embed_dim,
            cfg.codebook_scale,
            &mut ChaCha8Rng::seed_from_u64(cfg.codebook_seed),
        );
        let input = d * cfg.embed_dim;
        let mut drng = ChaCha8Rng::seed_from_u64(cfg.decoder_seed);
        let decoder = match cfg.decoder {
            DecoderKind::Identity => Decoder::Linear(LinearDecoder::identity(input)),
            DecoderKind::Linear => {
                Decoder::Linear(LinearDecoder::random(input, cfg.decoder_output_dim, &mut drng))
            }
            DecoderKind::Mlp => Decoder::Mlp(MlpDecoder::random(
                input,
                cfg.decoder_hidden,
                cfg.decoder_output_dim,
                &mut drng,
            )),
        };
        let n = decoder.output_dim();
        let operator = match &cfg.operator {
            OperatorSpec::Identity => LinearOperator::identity(n),
            OperatorSpec::Mask { kept } => LinearOperator::mask(n, kept.clone())?,
            OperatorSpec::Downsample { factor } => LinearOperator::downsample(n, *factor)?,
            OperatorSpec::Blur { len, std } => LinearOperator::blur(n, *len, *std)?,
        };
        Ok(Self {
            schedule,
            prior,
            denoiser,
            codebook,
            decoder,
            operator,
        })
    }
}

/// Ground truth and measurement for one seed, from a stream separate from the solver's.
pub fn draw_instance(
    setup: &Setup,
    sigma_eta: f64,
    seed: u64,
) -> Result<(crate::noise::TokenField, Vec<f64>, LinearProblem)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let truth = setup.prior.sample(&mut rng);
    let x_true = hard_decode(&setup.codebook, &setup.decoder, &truth)?;
    let prob = LinearProblem::simulate(setup.operator.clone(), &x_true, sigma_eta, &mut rng)?;
    Ok((truth, x_true, prob))
}

pub fn run_seed(cfg: &ExperimentConfig, setup: &Setup, seed: u64) -> Result<SeedResult> {
    let start = Instant::now();
    let (truth, x_true, prob) = draw_instance(setup, cfg.sigma_eta, seed)?;
    let solver = SolverConfig {
        seed,
        record_losses: false,
        ..cfg.solver.clone()
    };
    let inject = (!cfg.inject_dims.is_empty()).then(|| ErrorInjection {
        truth: truth.clone(),
        dims: cfg.inject_dims.clone(),
    });
    let sol = solve(
        &solver,
        Problem {
            denoiser: &setup.denoiser,
            schedule: &setup.schedule,
            codebook: &setup.codebook,
            decoder: &setup.decoder,
            measurement: &prob,
        },
        inject.as_ref(),
    )?;
    let peak = cfg.peak.unwrap_or_else(|| metrics::dynamic_range(&x_true));
    let report = metrics::report(&sol.x0, &x_true, peak, sol.z0.tokens(), truth.tokens())?;
    Ok(SeedResult {
        seed,
        variant: cfg.solver.variant.name(),
        num_steps: cfg.num_steps,
        inner_iters: cfg.solver.inner_iters,
        gamma: cfg.solver.forget,
        eta_kl_base: cfg.solver.eta_kl_base,
        lr_base: cfg.solver.lr_base,
        psnr_db: report.psnr_db,
        mse: report.mse,
        token_accuracy: report.token_accuracy,
        final_loss: sol.trajectory.final_loss(),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs every seed (shifted by `seed_offset`) on `workers` threads; results in seed order.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize, seed_offset: u64) -> Result<Vec<SeedResult>> {
    let setup = Setup::build(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let seeds: Vec<u64> = cfg.seeds.iter().map(|s| s + seed_offset).collect();
    pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, &setup, seed))
            .collect()
    })
}

pub fn write_csv<W: Write>(out: W, rows: &[SeedResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file(path: impl AsRef<Path>, rows: &[SeedResult]) -> Result<()> {
    write_csv(std::fs::File::create(path)?, rows)
}
