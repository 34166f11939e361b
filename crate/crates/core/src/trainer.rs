//! Full-batch stochastic variational inference with Adam ascent.

use std::fmt;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::distributions::DEFAULT_TEMPERATURE;
use crate::elbo::{build_elbo, ElboBreakdown, ElboData, ElboNoise, ElboSettings, PriorConfig, DEFAULT_ALPHA_KL};
use crate::encoders::{VariationalParameters, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::seq_io::EncodedAlignment;
use crate::subst::ModelFamily;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub family: ModelFamily,
    pub iterations: usize,
    /// Latent samples per iteration (L).
    pub samples: usize,
    pub alpha_kl: f64,
    pub learning_rate: f64,
    pub hidden: usize,
    pub seed: u64,
    pub temperature: f64,
    pub priors: PriorConfig,
    /// Evaluated (never trained on) after every iteration when present.
    pub validation: Option<EncodedAlignment>,
}

impl TrainConfig {
    pub fn new(family: ModelFamily) -> Self {
        Self {
            family,
            iterations: 1000,
            samples: 100,
            alpha_kl: DEFAULT_ALPHA_KL,
            learning_rate: 0.005,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            temperature: DEFAULT_TEMPERATURE,
            priors: PriorConfig::default(),
            validation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.alpha_kl >= 0.0) || !self.alpha_kl.is_finite() {
            return Err(Error::Config(format!("alpha_kl must be non-negative, got {}", self.alpha_kl)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        self.priors.validate()
    }
}

/// Adam moment estimates for every weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = shapes.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update in the ascent direction.
pub fn adam_step(weights: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    if weights.len() != grads.len() || weights.len() != state.m.len() {
        return Err(Error::LengthMismatch(weights.len(), grads.len()));
    }
    for (w, g) in weights.iter().zip(grads) {
        if w.shape() != g.shape() {
            return Err(Error::Shape { op: "adam_step", lhs: w.shape(), rhs: g.shape() });
        }
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (i, w) in weights.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, wj) in w.as_mut_slice().iter_mut().enumerate() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            *wj += lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
        })
    }
}

/// ELBO terms recorded at one iteration, before that iteration's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub split: Split,
    pub elbo: f64,
    pub loglik: f64,
    /// Unweighted total KL.
    pub kl_qp: f64,
}

impl IterationRecord {
    fn new(iteration: usize, split: Split, b: &ElboBreakdown) -> Self {
        Self { iteration, split, elbo: b.elbo, loglik: b.loglik, kl_qp: b.kl_total }
    }
}

/// Posterior means of the global latent variables.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimates {
    pub branches: Vec<f64>,
    pub kappa: Option<f64>,
    pub rho: Option<Vec<f64>>,
    pub pi: Option<Vec<f64>>,
}

pub fn estimate_point_parameters(params: &VariationalParameters) -> PointEstimates {
    let (rho, pi) = match params.encode_gtr() {
        Some((r, p)) => (Some(r.mean()), Some(p.mean())),
        None => (None, None),
    };
    PointEstimates {
        branches: params.encode_branches().iter().map(|g| g.mean()).collect(),
        kappa: params.encode_kappa().map(|g| g.mean()),
        rho,
        pi,
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<IterationRecord>,
    pub estimates: PointEstimates,
    pub params: VariationalParameters,
    pub duration: Duration,
}

impl TrainReport {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub fn train(x: &EncodedAlignment, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with_observer(x, cfg, |_| {})
}

/// [`train`], calling `observer` with every record as soon as it exists.
pub fn train_with_observer(
    x: &EncodedAlignment,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&IterationRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let m = x.n_sequences();
    if m < 2 {
        return Err(Error::InvalidAlignment(format!("training needs at least 2 sequences, got {m}")));
    }
    if let Some(v) = &cfg.validation {
        if v.n_sequences() != m {
            return Err(Error::InvalidAlignment(format!(
                "validation alignment has {} sequences, training has {m}",
                v.n_sequences()
            )));
        }
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = VariationalParameters::init(&mut rng, cfg.family, m, cfg.hidden);
    let mut adam = AdamState::new(&params.weights());
    let data = ElboData::new(x);
    let valid = cfg.validation.as_ref().map(ElboData::new);
    let settings =
        ElboSettings { family: cfg.family, priors: &cfg.priors, alpha_kl: cfg.alpha_kl, temperature: cfg.temperature };
    let numeric = |iteration: usize| {
        move |e: Error| match e {
            Error::Domain { .. } | Error::NonReversible(_) => Error::NonFinite { iteration },
            other => other,
        }
    };

    let mut records = Vec::with_capacity(cfg.iterations * if valid.is_some() { 2 } else { 1 });
    for iteration in 0..cfg.iterations {
        let noise = ElboNoise::draw(&mut rng, cfg.family, data.n_sites(), m, cfg.samples);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let graph = build_elbo(&mut tape, &bound, &data, settings, &noise).map_err(numeric(iteration))?;
        let breakdown = graph.breakdown(&tape);
        if !breakdown.elbo.is_finite() {
            return Err(Error::NonFinite { iteration });
        }
        let record = IterationRecord::new(iteration, Split::Train, &breakdown);
        observer(&record);
        records.push(record);

        if let Some(vd) = &valid {
            let vnoise = ElboNoise::draw(&mut rng, cfg.family, vd.n_sites(), m, cfg.samples);
            let mut vtape = Tape::new();
            let vbound = params.bind(&mut vtape);
            let vgraph = build_elbo(&mut vtape, &vbound, vd, settings, &vnoise).map_err(numeric(iteration))?;
            let record = IterationRecord::new(iteration, Split::Valid, &vgraph.breakdown(&vtape));
            observer(&record);
            records.push(record);
        }

        let grads = tape.backward(graph.elbo)?;
        let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.get(v)).collect();
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::NonFinite { iteration });
        }
        adam_step(&mut params.weights_mut(), &grads, &mut adam, cfg.learning_rate)?;
    }

    Ok(TrainReport { records, estimates: estimate_point_parameters(&params), params, duration: start.elapsed() })
}
