//! `key=value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use varphylo::distributions::{CategoricalSpec, DirichletSpec, GammaSpec};
use varphylo::{ModelFamily, PriorConfig, SubstitutionParams, TrainConfig};

/// Keys under this prefix are outputs (for example in a manifest) and are
/// skipped when a file is read back as configuration.
pub const RESULT_PREFIX: &str = "result.";

const KEYS: &[&str] = &[
    "model",
    "kappa",
    "rho",
    "pi",
    "branches",
    "n_sites",
    "seed",
    "iterations",
    "samples",
    "alpha_kl",
    "learning_rate",
    "hidden",
    "temperature",
    "prior.ancestor",
    "prior.branch_shape",
    "prior.branch_rate",
    "prior.kappa_shape",
    "prior.kappa_rate",
    "prior.rho",
    "prior.pi",
    "output_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelFamily,
    /// Generating κ for K80 simulations.
    pub kappa: f64,
    /// Generating GTR exchangeabilities and frequencies.
    pub rho: [f64; 6],
    pub pi: [f64; 4],
    /// Generating branch lengths; their count fixes M.
    pub branches: Vec<f64>,
    pub n_sites: usize,
    pub seed: u64,
    pub iterations: usize,
    pub samples: usize,
    pub alpha_kl: f64,
    pub learning_rate: f64,
    pub hidden: usize,
    pub temperature: f64,
    pub priors: PriorConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::new(ModelFamily::Jc69);
        Self {
            model: ModelFamily::Jc69,
            kappa: 2.0,
            rho: [1.0 / 6.0; 6],
            pi: [0.25; 4],
            branches: Vec::new(),
            n_sites: 1000,
            seed: 0,
            iterations: train.iterations,
            samples: train.samples,
            alpha_kl: train.alpha_kl,
            learning_rate: train.learning_rate,
            hidden: train.hidden,
            temperature: train.temperature,
            priors: train.priors,
            output_dir: PathBuf::from("."),
        }
    }
}

/// Non-blank, non-`#` lines split at the first `=`, keys and values trimmed.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected key=value, got {line:?}", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn number<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow!("{key}: cannot parse {v:?}: {e}"))
}

pub fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| number(key, s.trim())).collect()
}

fn fixed<const K: usize>(key: &str, v: &str) -> Result<[f64; K]> {
    let list = parse_list(key, v)?;
    list.as_slice().try_into().map_err(|_| anyhow!("{key}: expected {K} values, got {}", list.len()))
}

pub fn format_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text)? {
            if k.starts_with(RESULT_PREFIX) {
                continue;
            }
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "model" => self.model = v.parse().map_err(|e| anyhow!("model: {e}"))?,
            "kappa" => self.kappa = number(key, v)?,
            "rho" => self.rho = fixed(key, v)?,
            "pi" => self.pi = fixed(key, v)?,
            "branches" => self.branches = parse_list(key, v)?,
            "n_sites" => self.n_sites = number(key, v)?,
            "seed" => self.seed = number(key, v)?,
            "iterations" => self.iterations = number(key, v)?,
            "samples" => self.samples = number(key, v)?,
            "alpha_kl" => self.alpha_kl = number(key, v)?,
            "learning_rate" => self.learning_rate = number(key, v)?,
            "hidden" => self.hidden = number(key, v)?,
            "temperature" => self.temperature = number(key, v)?,
            "prior.ancestor" => self.priors.ancestor = CategoricalSpec { probs: fixed(key, v)? },
            "prior.branch_shape" => self.priors.branch.shape = number(key, v)?,
            "prior.branch_rate" => self.priors.branch.rate = number(key, v)?,
            "prior.kappa_shape" => self.priors.kappa.shape = number(key, v)?,
            "prior.kappa_rate" => self.priors.kappa.rate = number(key, v)?,
            "prior.rho" => self.priors.rho = DirichletSpec { concentration: fixed::<6>(key, v)?.to_vec() },
            "prior.pi" => self.priors.pi = DirichletSpec { concentration: fixed::<4>(key, v)?.to_vec() },
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    /// Every key in a fixed order; parsing this text gives back `self`.
    pub fn render(&self) -> String {
        let p = &self.priors;
        let GammaSpec { shape: bs, rate: br } = p.branch;
        let GammaSpec { shape: ks, rate: kr } = p.kappa;
        let values = [
            self.model.to_string(),
            self.kappa.to_string(),
            format_list(&self.rho),
            format_list(&self.pi),
            format_list(&self.branches),
            self.n_sites.to_string(),
            self.seed.to_string(),
            self.iterations.to_string(),
            self.samples.to_string(),
            self.alpha_kl.to_string(),
            self.learning_rate.to_string(),
            self.hidden.to_string(),
            self.temperature.to_string(),
            format_list(&p.ancestor.probs),
            bs.to_string(),
            br.to_string(),
            ks.to_string(),
            kr.to_string(),
            format_list(&p.rho.concentration),
            format_list(&p.pi.concentration),
            self.output_dir.display().to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k}={v}").unwrap();
        }
        out
    }

    /// First 16 hex digits of the SHA-256 of [`Self::render`], with the
    /// output directory left out so relocated runs hash the same.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.render().as_bytes());
        format!("{digest:x}")[..16].to_string()
    }

    /// Provenance line for every output, without its comment prefix.
    pub fn repro_header(&self) -> String {
        format!("varphylo {} seed={} config={}", env!("CARGO_PKG_VERSION"), self.seed, self.hash())
    }

    pub fn substitution_params(&self) -> SubstitutionParams {
        match self.model {
            ModelFamily::Jc69 => SubstitutionParams::Jc69,
            ModelFamily::K80 => SubstitutionParams::K80 { kappa: self.kappa },
            ModelFamily::Gtr => SubstitutionParams::Gtr { rho: self.rho, pi: self.pi },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            family: self.model,
            iterations: self.iterations,
            samples: self.samples,
            alpha_kl: self.alpha_kl,
            learning_rate: self.learning_rate,
            hidden: self.hidden,
            seed: self.seed,
            temperature: self.temperature,
            priors: self.priors.clone(),
            validation: None,
        }
    }
}
