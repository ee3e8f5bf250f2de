//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, nested settings use dotted keys
//! (`operator.name = blur`). Unknown keys, duplicates and unparsable values are reported
//! with their line number.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::noise::ScheduleEndpoints;
use crate::sampler::SolverConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    /// Entries `Exp(1)` normalized.
    Random,
    /// First-order chain with the given coupling to the previous token.
    Chain { coupling: f64 },
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// Requires `output_dim = d_z * d_b`.
    Identity,
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorSpec {
    Identity,
    Mask { kept: Vec<usize> },
    Downsample { factor: usize },
    Blur { len: usize, std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub solver: SolverConfig,
    pub num_steps: usize,
    pub num_tokens: usize,
    pub dims: usize,
    pub embed_dim: usize,
    pub seeds: Vec<u64>,
    pub schedule: ScheduleEndpoints,
    pub prior: PriorSpec,
    pub prior_seed: u64,
    pub codebook_scale: f64,
    pub codebook_seed: u64,
    pub decoder: DecoderKind,
    pub decoder_hidden: usize,
    pub decoder_output_dim: usize,
    pub decoder_seed: u64,
    pub operator: OperatorSpec,
    pub sigma_eta: f64,
    /// PSNR peak; `None` uses the dynamic range of each ground-truth signal.
    pub peak: Option<f64>,
    pub inject_dims: Vec<usize>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            num_steps: 10,
            num_tokens: 3,
            dims: 4,
            embed_dim: 2,
            seeds: (0..3).collect(),
            schedule: ScheduleEndpoints::default(),
            prior: PriorSpec::Chain { coupling: 0.6 },
            prior_seed: 0,
            codebook_scale: 1.0,
            codebook_seed: 1,
            decoder: DecoderKind::Linear,
            decoder_hidden: 16,
            decoder_output_dim: 8,
            decoder_seed: 2,
            operator: OperatorSpec::Identity,
            sigma_eta: 0.05,
            peak: None,
            inject_dims: Vec::new(),
            output: None,
        }
    }
}

const KEYS: &[&str] = &[
    "variant",
    "T",
    "K",
    "d_z",
    "d_b",
    "inner_iters",
    "forget",
    "tau",
    "eta_kl_base",
    "lr_base",
    "lambda_lr",
    "lambda_kl",
    "likelihood_weight",
    "n_mc",
    "carry_optimizer_state",
    "seeds",
    "schedule.alpha_bar_first",
    "schedule.alpha_bar_last",
    "schedule.gamma_bar_first",
    "schedule.gamma_bar_last",
    "prior.kind",
    "prior.coupling",
    "prior.seed",
    "codebook.scale",
    "codebook.seed",
    "decoder.kind",
    "decoder.hidden",
    "decoder.output_dim",
    "decoder.seed",
    "operator.name",
    "operator.kept",
    "operator.factor",
    "operator.blur_len",
    "operator.blur_std",
    "noise.sigma",
    "peak",
    "inject.dims",
    "output",
];

struct Entries {
    values: HashMap<String, (usize, String)>,
}

impl Entries {
    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        let Some((line, raw)) = self.values.get(key) else {
            return Ok(None);
        };
        raw.parse().map(Some).map_err(|_| Error::Config {
            line: *line,
            message: format!("cannot parse {key} = {raw:?}"),
        })
    }

    fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(_, v)| v.as_str())
    }

    fn line(&self, key: &str) -> usize {
        self.values.get(key).map_or(0, |(l, _)| *l)
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some((line, raw)) = self.values.get(key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| Error::Config {
                    line: *line,
                    message: format!("cannot parse element {s:?} of {key}"),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }
}

/// `a..b` (half-open) or a comma-separated list.
fn parse_seeds(raw: &str, line: usize) -> Result<Vec<u64>> {
    let bad = |m: String| Error::Config { line, message: m };
    if let Some((a, b)) = raw.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad(format!("bad seed range {raw:?}")))?;
        let b: u64 = b.trim().parse().map_err(|_| bad(format!("bad seed range {raw:?}")))?;
        if b <= a {
            return Err(bad(format!("empty seed range {raw:?}")));
        }
        return Ok((a..b).collect());
    }
    let seeds: Vec<u64> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad(format!("bad seed {s:?}"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(bad("no seeds given".into()));
    }
    Ok(seeds)
}

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = HashMap::new();
        for (n, raw_line) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw_line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(Error::Config {
                    line,
                    message: format!("expected `key = value`, got {content:?}"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key {key:?}"),
                });
            }
            if let Some((first, _)) = values.insert(key.to_string(), (line, value.to_string())) {
                return Err(Error::Config {
                    line,
                    message: format!("duplicate key {key:?} (first set on line {first})"),
                });
            }
        }
        let e = Entries { values };
        let mut c = ExperimentConfig::default();

        if let Some(v) = e.raw("variant") {
            c.solver.variant = v.parse().map_err(|err: Error| Error::Config {
                line: e.line("variant"),
                message: err.to_string(),
            })?;
        }
        e.set("T", &mut c.num_steps)?;
        e.set("K", &mut c.num_tokens)?;
        e.set("d_z", &mut c.dims)?;
        e.set("d_b", &mut c.embed_dim)?;
        e.set("inner_iters", &mut c.solver.inner_iters)?;
        e.set("forget", &mut c.solver.forget)?;
        e.set("tau", &mut c.solver.tau)?;
        e.set("eta_kl_base", &mut c.solver.eta_kl_base)?;
        e.set("lr_base", &mut c.solver.lr_base)?;
        e.set("lambda_lr", &mut c.solver.lambda_lr)?;
        e.set("lambda_kl", &mut c.solver.lambda_kl)?;
        e.set("likelihood_weight", &mut c.solver.likelihood_weight)?;
        e.set("n_mc", &mut c.solver.n_mc)?;
        e.set("carry_optimizer_state", &mut c.solver.carry_optimizer_state)?;
        if let Some(raw) = e.raw("seeds") {
            c.seeds = parse_seeds(raw, e.line("seeds"))?;
        }
        e.set("schedule.alpha_bar_first", &mut c.schedule.alpha_bar_first)?;
        e.set("schedule.alpha_bar_last", &mut c.schedule.alpha_bar_last)?;
        e.set("schedule.gamma_bar_first", &mut c.schedule.gamma_bar_first)?;
        e.set("schedule.gamma_bar_last", &mut c.schedule.gamma_bar_last)?;

        let coupling: f64 = e.get("prior.coupling")?.unwrap_or(0.6);
        c.prior = match e.raw("prior.kind").unwrap_or("chain") {
            "random" => PriorSpec::Random,
            "chain" => PriorSpec::Chain { coupling },
            "uniform" => PriorSpec::Uniform,
            other => {
                return Err(Error::Config {
                    line: e.line("prior.kind"),
                    message: format!("unknown prior kind {other:?} (random, chain, uniform)"),
                })
            }
        };
        e.set("prior.seed", &mut c.prior_seed)?;
        e.set("codebook.scale", &mut c.codebook_scale)?;
        e.set("codebook.seed", &mut c.codebook_seed)?;

        if let Some(kind) = e.raw("decoder.kind") {
            c.decoder = match kind {
                "identity" => DecoderKind::Identity,
                "linear" => DecoderKind::Linear,
                "mlp" => DecoderKind::Mlp,
                other => {
                    return Err(Error::Config {
                        line: e.line("decoder.kind"),
                        message: format!("unknown decoder kind {other:?} (identity, linear, mlp)"),
                    })
                }
            };
        }
        e.set("decoder.hidden", &mut c.decoder_hidden)?;
        e.set("decoder.output_dim", &mut c.decoder_output_dim)?;
        if c.decoder == DecoderKind::Identity && e.raw("decoder.output_dim").is_none() {
            c.decoder_output_dim = c.dims * c.embed_dim;
        }
        e.set("decoder.seed", &mut c.decoder_seed)?;

        c.operator = match e.raw("operator.name").unwrap_or("identity") {
            "identity" => OperatorSpec::Identity,
            "mask" => OperatorSpec::Mask {
                kept: e.list("operator.kept")?.ok_or_else(|| Error::Config {
                    line: e.line("operator.name"),
                    message: "operator.name = mask needs operator.kept".into(),
                })?,
            },
            "downsample" => OperatorSpec::Downsample {
                factor: e.get("operator.factor")?.unwrap_or(2),
            },
            "blur" => OperatorSpec::Blur {
                len: e.get("operator.blur_len")?.unwrap_or(5),
                std: e.get("operator.blur_std")?.unwrap_or(1.0),
            },
            other => {
                return Err(Error::Config {
                    line: e.line("operator.name"),
                    message: format!(
                        "unknown operator {other:?} (identity, mask, downsample, blur)"
                    ),
                })
            }
        };
        e.set("noise.sigma", &mut c.sigma_eta)?;
        c.peak = e.get("peak")?;
        c.inject_dims = e.list("inject.dims")?.unwrap_or_default();
        c.output = e.raw("output").filter(|s| !s.is_empty()).map(PathBuf::from);

        c.check(&e)?;
        Ok(c)
    }

    fn check(&self, e: &Entries) -> Result<()> {
        let fail = |key: &str, message: String| Error::Config {
            line: e.line(key),
            message,
        };
        if self.num_steps == 0 {
            return Err(fail("T", "T must be at least 1".into()));
        }
        if self.num_tokens < 2 {
            return Err(fail("K", "K must be at least 2".into()));
        }
        if self.dims == 0 || self.embed_dim == 0 {
            return Err(fail("d_z", "d_z and d_b must be positive".into()));
        }
        if self.decoder == DecoderKind::Identity && self.decoder_output_dim != self.dims * self.embed_dim {
            return Err(fail(
                "decoder.output_dim",
                format!(
                    "identity decoder needs output_dim = d_z * d_b = {}",
                    self.dims * self.embed_dim
                ),
            ));
        }
        if self.decoder_output_dim == 0 {
            return Err(fail("decoder.output_dim", "output_dim must be positive".into()));
        }
        let n = self.decoder_output_dim;
        match &self.operator {
            OperatorSpec::Mask { kept } => {
                if kept.is_empty() {
                    return Err(fail("operator.kept", "operator.kept must not be empty".into()));
                }
                if let Some(bad) = kept.iter().find(|&&i| i >= n) {
                    return Err(fail(
                        "operator.kept",
                        format!("kept index {bad} outside signal of length {n}"),
                    ));
                }
            }
            OperatorSpec::Downsample { factor } if *factor == 0 || !n.is_multiple_of(*factor) => {
                return Err(fail(
                    "operator.factor",
                    format!("factor {factor} must divide signal length {n}"),
                ));
            }
            OperatorSpec::Blur { len, std } if len % 2 == 0 || !(*std > 0.0) => {
                return Err(fail(
                    "operator.blur_len",
                    format!("blur needs an odd length and positive std (got {len}, {std})"),
                ));
            }
            _ => {}
        }
        if !(self.sigma_eta >= 0.0) {
            return Err(fail("noise.sigma", "noise.sigma must be >= 0".into()));
        }
        if let Some(bad) = self.inject_dims.iter().find(|&&d| d >= self.dims) {
            return Err(fail("inject.dims", format!("dimension {bad} outside d_z = {}", self.dims)));
        }
        if let Some(p) = self.peak {
            if !(p > 0.0) {
                return Err(fail("peak", "peak must be positive".into()));
            }
        }
        let sv = &self.solver;
        for (key, ok) in [
            ("forget", (0.0..=1.0).contains(&sv.forget)),
            ("tau", sv.tau > 0.0 && sv.tau.is_finite()),
            ("n_mc", sv.n_mc > 0),
            ("eta_kl_base", sv.eta_kl_base >= 0.0),
            ("lr_base", sv.lr_base >= 0.0),
            ("likelihood_weight", sv.likelihood_weight >= 0.0),
        ] {
            if !ok {
                return Err(fail(key, format!("{key} out of range")));
            }
        }
        sv.validate().map_err(|err| fail("variant", err.to_string()))?;
        crate::noise::TransitionSchedule::build(self.num_steps, self.num_tokens, self.schedule)
            .map_err(|err| fail("schedule.alpha_bar_first", err.to_string()))?;
        crate::space::TokenSpace::new(self.num_tokens, self.dims)
            .map_err(|err| fail("d_z", err.to_string()))?;
        Ok(())
    }
}
