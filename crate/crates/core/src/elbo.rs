//! The star-tree generative model and its multi-sample ELBO.
//!
//! Every leaf descends directly from one ancestral sequence, so the
//! likelihood of site `n` given an ancestor `a_n` is
//! `Π_m (a_nᵀ P(b_m))[x_nm]`. The estimator is
//!
//! ```text
//! loglik = Σ_n (1/L) Σ_l Σ_m ln (a_nˡᵀ P(b_mˡ; ψˡ))[x_nm]
//! kl     = Σ_n KL(q(a_n|x_n) ∥ p(a)) + N · (Σ_m KL(q(b_m) ∥ p(b)) + KL(q(ψ) ∥ p(ψ)))
//! elbo   = loglik − α · kl
//! ```
//!
//! One branch-length vector and one ψ are shared by all sites within a
//! draw `l`; ancestors are drawn per site.
//!
//! Two evaluation routes exist: [`elbo_estimate`] on plain values, and
//! [`build_elbo`] on a tape for training. They agree on identical samples.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::distributions::{
    gumbel_noise, kl_categorical, kl_categorical_var, kl_dirichlet, kl_dirichlet_var, kl_gamma, kl_gamma_var,
    sample_categorical_relaxed, sample_dirichlet_reparam, sample_gamma_reparam, uniform_noise, CategoricalSpec,
    DirichletSpec, GammaSpec, PROB_FLOOR,
};
use crate::encoders::{BoundParameters, VariationalParameters};
use crate::error::{Error, Result};
use crate::seq_io::EncodedAlignment;
use crate::subst::{
    build_rate_matrix, normalized_rate_matrix, rate_matrix_var, transition_matrices_var, transition_matrix,
    ModelFamily, SubstitutionParams, TransitionMatrix,
};

pub const DEFAULT_ALPHA_KL: f64 = 1e-3;

/// Prior distributions over every latent variable.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub ancestor: CategoricalSpec,
    pub branch: GammaSpec,
    pub kappa: GammaSpec,
    pub rho: DirichletSpec,
    pub pi: DirichletSpec,
}

impl Default for PriorConfig {
    /// Uniform ancestors and simplex priors, Gamma(0.1, 1) branch lengths
    /// (mean 0.1) and Gamma(1, 1) for κ.
    fn default() -> Self {
        Self {
            ancestor: CategoricalSpec::uniform(),
            branch: GammaSpec { shape: 0.1, rate: 1.0 },
            kappa: GammaSpec { shape: 1.0, rate: 1.0 },
            rho: DirichletSpec::uniform(6),
            pi: DirichletSpec::uniform(4),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        self.ancestor.validate()?;
        self.branch.validate()?;
        self.kappa.validate()?;
        self.rho.validate()?;
        self.pi.validate()?;
        if self.rho.dim() != 6 || self.pi.dim() != 4 {
            return Err(Error::InvalidSpec("rho prior needs 6 and pi prior 4 concentrations".into()));
        }
        Ok(())
    }
}

/// Variational posterior over ψ.
#[derive(Debug, Clone, PartialEq)]
pub enum SubstPosterior {
    Jc69,
    K80 { kappa: GammaSpec },
    Gtr { rho: DirichletSpec, pi: DirichletSpec },
}

/// Every variational distribution evaluated at fixed weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSpecs {
    /// One per site.
    pub ancestors: Vec<CategoricalSpec>,
    /// One per sequence.
    pub branches: Vec<GammaSpec>,
    pub subst: SubstPosterior,
}

impl PosteriorSpecs {
    pub fn from_encoders(params: &VariationalParameters, x: &EncodedAlignment) -> Result<Self> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let sites = tape.constant(x.flattened());
        let lp = bound.encode_ancestors(&mut tape, sites)?;
        let lp = tape.value(lp);
        let ancestors =
            (0..x.n_sites()).map(|n| CategoricalSpec { probs: std::array::from_fn(|k| lp.get(n, k).exp()) }).collect();
        let subst = match params.family {
            ModelFamily::Jc69 => SubstPosterior::Jc69,
            ModelFamily::K80 => SubstPosterior::K80 { kappa: params.encode_kappa().expect("K80 has a kappa encoder") },
            ModelFamily::Gtr => {
                let (rho, pi) = params.encode_gtr().expect("GTR has rho and pi encoders");
                SubstPosterior::Gtr { rho, pi }
            }
        };
        Ok(Self { ancestors, branches: params.encode_branches(), subst })
    }
}

/// L joint draws of the latent variables. Index `l` pairs the `l`-th
/// ancestor of every site with the `l`-th branch vector and ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSampleBatch {
    /// `ancestors[n][l]`: relaxed one-hot ancestor of site `n`.
    pub ancestors: Vec<Vec<[f64; 4]>>,
    /// `branches[l][m]`.
    pub branches: Vec<Vec<f64>>,
    /// `subst[l]`.
    pub subst: Vec<SubstitutionParams>,
}

impl LatentSampleBatch {
    pub fn n_samples(&self) -> usize {
        self.subst.len()
    }

    fn check(&self, x: &EncodedAlignment) -> Result<()> {
        let l = self.n_samples();
        if l == 0 {
            return Err(Error::InvalidSpec("empty latent sample batch".into()));
        }
        if self.branches.len() != l {
            return Err(Error::LengthMismatch(self.branches.len(), l));
        }
        if self.ancestors.len() != x.n_sites() {
            return Err(Error::LengthMismatch(self.ancestors.len(), x.n_sites()));
        }
        if let Some(bad) = self.ancestors.iter().find(|a| a.len() != l) {
            return Err(Error::LengthMismatch(bad.len(), l));
        }
        if let Some(bad) = self.branches.iter().find(|b| b.len() != x.n_sequences()) {
            return Err(Error::LengthMismatch(bad.len(), x.n_sequences()));
        }
        Ok(())
    }
}

/// How [`sample_latents`] draws ancestral states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AncestorDraw {
    /// One-hot categorical draws, giving an unbiased estimate of the ELBO.
    Exact,
    /// Gumbel-softmax draws at the given temperature, as in training. The
    /// soft mixture inflates `ln(aᵀP)`, so this surrogate can exceed the
    /// ELBO when q(a) is confident.
    Relaxed(f64),
}

/// Draws `l` latent samples from `specs` with plain (non-tape) samplers.
pub fn sample_latents<R: Rng + ?Sized>(
    specs: &PosteriorSpecs,
    l: usize,
    draw: AncestorDraw,
    rng: &mut R,
) -> LatentSampleBatch {
    let branches = (0..l).map(|_| specs.branches.iter().map(|g| g.sample(rng)).collect()).collect();
    let subst = (0..l)
        .map(|_| match &specs.subst {
            SubstPosterior::Jc69 => SubstitutionParams::Jc69,
            SubstPosterior::K80 { kappa } => SubstitutionParams::K80 { kappa: kappa.sample(rng) },
            SubstPosterior::Gtr { rho, pi } => SubstitutionParams::Gtr {
                rho: rho.sample(rng).try_into().expect("six concentrations"),
                pi: pi.sample(rng).try_into().expect("four concentrations"),
            },
        })
        .collect();
    let one = |q: &CategoricalSpec, rng: &mut R| match draw {
        AncestorDraw::Exact => {
            let mut a = [0.0; 4];
            a[q.sample(rng)] = 1.0;
            a
        }
        AncestorDraw::Relaxed(tau) => q.sample_relaxed(rng, tau),
    };
    let ancestors = specs.ancestors.iter().map(|q| (0..l).map(|_| one(q, rng)).collect()).collect();
    LatentSampleBatch { ancestors, branches, subst }
}

/// `Σ_m ln (ancestorᵀ P_m)[x_m]`, each probability floored at 1e-10.
pub fn site_log_likelihood(ancestor: &[f64; 4], transitions: &[TransitionMatrix], site: &[u8]) -> f64 {
    transitions
        .iter()
        .zip(site)
        .map(|(t, &x)| {
            let p: f64 = (0..4).map(|k| ancestor[k] * t.p[k][x as usize]).sum();
            p.max(PROB_FLOOR).ln()
        })
        .sum()
}

/// Terms of one ELBO evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub elbo: f64,
    /// Expected log likelihood term.
    pub loglik: f64,
    /// `kl_ancestors + N · (kl_branches + kl_subst)`.
    pub kl_total: f64,
    /// Summed over sites.
    pub kl_ancestors: f64,
    /// Summed over sequences, not yet multiplied by N.
    pub kl_branches: f64,
    /// Not yet multiplied by N.
    pub kl_subst: f64,
}

impl ElboBreakdown {
    fn assemble(loglik: f64, kl: (f64, f64, f64), n_sites: usize, alpha: f64) -> Self {
        let (kl_ancestors, kl_branches, kl_subst) = kl;
        let kl_total = kl_ancestors + n_sites as f64 * (kl_branches + kl_subst);
        Self { elbo: loglik - alpha * kl_total, loglik, kl_total, kl_ancestors, kl_branches, kl_subst }
    }
}

/// The three KL components (ancestors summed over sites, branches summed
/// over sequences, ψ).
pub fn kl_components(specs: &PosteriorSpecs, priors: &PriorConfig) -> Result<(f64, f64, f64)> {
    let mut kl_a = 0.0;
    for q in &specs.ancestors {
        kl_a += kl_categorical(q, &priors.ancestor)?;
    }
    let mut kl_b = 0.0;
    for q in &specs.branches {
        kl_b += kl_gamma(q, &priors.branch)?;
    }
    let kl_s = match &specs.subst {
        SubstPosterior::Jc69 => 0.0,
        SubstPosterior::K80 { kappa } => kl_gamma(kappa, &priors.kappa)?,
        SubstPosterior::Gtr { rho, pi } => kl_dirichlet(rho, &priors.rho)? + kl_dirichlet(pi, &priors.pi)?,
    };
    Ok((kl_a, kl_b, kl_s))
}

/// `Σ_n Σ_m ln p(x_nm | a_nˡ, b_mˡ, ψˡ)` for each draw `l`.
pub fn per_sample_loglik(x: &EncodedAlignment, batch: &LatentSampleBatch) -> Result<Vec<f64>> {
    batch.check(x)?;
    (0..batch.n_samples())
        .map(|l| {
            let d = build_rate_matrix(&batch.subst[l])?;
            let transitions =
                batch.branches[l].iter().map(|&b| transition_matrix(&d, b)).collect::<Result<Vec<_>>>()?;
            Ok((0..x.n_sites())
                .map(|n| site_log_likelihood(&batch.ancestors[n][l], &transitions, x.site_states(n)))
                .sum())
        })
        .collect()
}

/// ELBO on plain values for a given sample batch.
pub fn elbo_estimate(
    x: &EncodedAlignment,
    batch: &LatentSampleBatch,
    specs: &PosteriorSpecs,
    priors: &PriorConfig,
    alpha_kl: f64,
) -> Result<ElboBreakdown> {
    let per_sample = per_sample_loglik(x, batch)?;
    let loglik = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    Ok(ElboBreakdown::assemble(loglik, kl_components(specs, priors)?, x.n_sites(), alpha_kl))
}

/// An alignment prepared for repeated graph construction.
#[derive(Debug, Clone)]
pub struct ElboData {
    n_sites: usize,
    n_sequences: usize,
    flattened: Tensor,
    states: Arc<[u8]>,
}

impl ElboData {
    pub fn new(x: &EncodedAlignment) -> Self {
        Self {
            n_sites: x.n_sites(),
            n_sequences: x.n_sequences(),
            flattened: x.flattened(),
            states: Arc::from(x.states()),
        }
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_sequences(&self) -> usize {
        self.n_sequences
    }
}

/// Noise driving one ELBO evaluation on the tape.
#[derive(Debug, Clone)]
pub struct ElboNoise {
    /// L×M uniforms.
    pub branches: Tensor,
    /// L×1 uniforms (K80).
    pub kappa: Option<Tensor>,
    /// L×6 uniforms (GTR).
    pub rho: Option<Tensor>,
    /// L×4 uniforms (GTR).
    pub pi: Option<Tensor>,
    /// L tensors of N×4 Gumbel draws.
    pub ancestors: Vec<Tensor>,
}

impl ElboNoise {
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        family: ModelFamily,
        n_sites: usize,
        n_sequences: usize,
        l: usize,
    ) -> Self {
        let branches = uniform_noise(rng, l, n_sequences);
        let kappa = (family == ModelFamily::K80).then(|| uniform_noise(rng, l, 1));
        let (rho, pi) = if family == ModelFamily::Gtr {
            (Some(uniform_noise(rng, l, 6)), Some(uniform_noise(rng, l, 4)))
        } else {
            (None, None)
        };
        let ancestors = (0..l).map(|_| gumbel_noise(rng, n_sites, 4)).collect();
        Self { branches, kappa, rho, pi, ancestors }
    }

    pub fn n_samples(&self) -> usize {
        self.branches.rows()
    }
}

/// Nodes of one ELBO graph.
#[derive(Debug, Clone)]
pub struct ElboGraph {
    pub elbo: Var,
    pub loglik: Var,
    pub kl_total: Var,
    pub kl_ancestors: Var,
    pub kl_branches: Var,
    pub kl_subst: Var,
    /// N×4 relaxed ancestors, one per draw.
    pub ancestor_samples: Vec<Var>,
    /// L×M branch lengths.
    pub branch_samples: Var,
    /// ψ per draw.
    pub subst_samples: Vec<SubstitutionParams>,
    n_sites: usize,
}

impl ElboGraph {
    pub fn breakdown(&self, tape: &Tape) -> ElboBreakdown {
        let kl_total = tape.item(self.kl_total);
        ElboBreakdown {
            elbo: tape.item(self.elbo),
            loglik: tape.item(self.loglik),
            kl_total,
            kl_ancestors: tape.item(self.kl_ancestors),
            kl_branches: tape.item(self.kl_branches),
            kl_subst: tape.item(self.kl_subst),
        }
    }

    /// The latent draws used by this graph, for replay through [`elbo_estimate`].
    pub fn latent_batch(&self, tape: &Tape) -> LatentSampleBatch {
        let l = self.subst_samples.len();
        let b = tape.value(self.branch_samples);
        let ancestors = (0..self.n_sites)
            .map(|n| {
                (0..l)
                    .map(|s| {
                        let a = tape.value(self.ancestor_samples[s]).row_slice(n);
                        [a[0], a[1], a[2], a[3]]
                    })
                    .collect()
            })
            .collect();
        LatentSampleBatch {
            ancestors,
            branches: (0..l).map(|s| b.row_slice(s).to_vec()).collect(),
            subst: self.subst_samples.clone(),
        }
    }
}

struct TopDownOp {
    states: Arc<[u8]>,
    n_sequences: usize,
}

impl TopDownOp {
    fn prob(&self, a: &Tensor, p: &Tensor, n: usize, m: usize) -> f64 {
        let x = self.states[n * self.n_sequences + m] as usize;
        (0..4).map(|k| a.get(n, k) * p.get(4 * m + k, x)).sum()
    }
}

impl CustomOp for TopDownOp {
    fn name(&self) -> &'static str {
        "top_down_loglik"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (a, p) = (inputs[0], inputs[1]);
        let g = grad.item();
        let mut a_bar = Tensor::zeros(a.rows(), 4);
        let mut p_bar = Tensor::zeros(p.rows(), 4);
        for n in 0..a.rows() {
            for m in 0..self.n_sequences {
                let prob = self.prob(a, p, n, m);
                if prob <= PROB_FLOOR {
                    continue;
                }
                let x = self.states[n * self.n_sequences + m] as usize;
                let scale = g / prob;
                for k in 0..4 {
                    let ak = a_bar.get(n, k);
                    a_bar.set(n, k, ak + scale * p.get(4 * m + k, x));
                    let pk = p_bar.get(4 * m + k, x);
                    p_bar.set(4 * m + k, x, pk + scale * a.get(n, k));
                }
            }
        }
        vec![Some(a_bar), Some(p_bar)]
    }
}

/// `Σ_n Σ_m ln max((a_nᵀ P_m)[x_nm], 1e-10)` for N×4 ancestors and the 4M×4
/// stacked transition matrices.
fn top_down_loglik(tape: &mut Tape, ancestors: Var, transitions: Var, data: &ElboData) -> Result<Var> {
    let (a_shape, p_shape) = (tape.shape(ancestors), tape.shape(transitions));
    if a_shape != (data.n_sites, 4) || p_shape != (4 * data.n_sequences, 4) {
        return Err(Error::Shape { op: "top_down_loglik", lhs: a_shape, rhs: p_shape });
    }
    let op = TopDownOp { states: Arc::clone(&data.states), n_sequences: data.n_sequences };
    let (a, p) = (tape.value(ancestors), tape.value(transitions));
    let mut total = 0.0;
    for n in 0..data.n_sites {
        for m in 0..data.n_sequences {
            total += op.prob(a, p, n, m).max(PROB_FLOOR).ln();
        }
    }
    Ok(tape.custom(&[ancestors, transitions], Tensor::scalar(total), op))
}

/// Settings shared by every ELBO evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ElboSettings<'a> {
    pub family: ModelFamily,
    pub priors: &'a PriorConfig,
    pub alpha_kl: f64,
    pub temperature: f64,
}

fn row4(tape: &Tape, v: Var) -> [f64; 4] {
    std::array::from_fn(|k| tape.value(v).as_slice()[k])
}

/// Records the ELBO for `data` on `tape`, drawing latents through the
/// reparameterized samplers with the given noise.
pub fn build_elbo(
    tape: &mut Tape,
    params: &BoundParameters,
    data: &ElboData,
    settings: ElboSettings<'_>,
    noise: &ElboNoise,
) -> Result<ElboGraph> {
    let l = noise.n_samples();
    if l == 0 || noise.ancestors.len() != l {
        return Err(Error::InvalidSpec(format!(
            "noise holds {} ancestor draws for {l} samples",
            noise.ancestors.len()
        )));
    }
    let priors = settings.priors;
    let sites = tape.constant(data.flattened.clone());
    let log_q = params.encode_ancestors(tape, sites)?;

    let (b_shape, b_rate) = params.encode_branches(tape)?;
    let branch_samples = sample_gamma_reparam(tape, b_shape, b_rate, &noise.branches)?;

    // Rate matrices per draw, with the stationary distribution as plain values.
    let mut rate_matrices: Vec<(Var, [f64; 4])> = Vec::with_capacity(l);
    let mut subst_samples = Vec::with_capacity(l);
    let kl_subst = match settings.family {
        ModelFamily::Jc69 => {
            let q = tape.constant(matrix_tensor(&normalized_rate_matrix(&[1.0; 6], &[0.25; 4])));
            for _ in 0..l {
                rate_matrices.push((q, [0.25; 4]));
                subst_samples.push(SubstitutionParams::Jc69);
            }
            tape.scalar(0.0)
        }
        ModelFamily::K80 => {
            let (k_shape, k_rate) =
                params.encode_kappa(tape)?.ok_or_else(|| Error::InvalidSpec("missing kappa encoder".into()))?;
            let u = noise.kappa.as_ref().ok_or_else(|| Error::InvalidSpec("missing kappa noise".into()))?;
            let kappas = sample_gamma_reparam(tape, k_shape, k_rate, u)?;
            let ones = tape.constant(Tensor::full(1, 4, 1.0));
            let pi = tape.constant(Tensor::full(1, 4, 0.25));
            for s in 0..l {
                let k = tape.rows(kappas, s, 1)?;
                let rates = tape.stack(&[k, ones, k])?;
                rate_matrices.push((rate_matrix_var(tape, rates, pi)?, [0.25; 4]));
                subst_samples.push(SubstitutionParams::K80 { kappa: tape.value(kappas).get(s, 0) });
            }
            let kl = kl_gamma_var(tape, k_shape, k_rate, &priors.kappa)?;
            tape.sum(kl)
        }
        ModelFamily::Gtr => {
            let (rho_c, pi_c) =
                params.encode_gtr(tape)?.ok_or_else(|| Error::InvalidSpec("missing GTR encoders".into()))?;
            let (u_rho, u_pi) = match (&noise.rho, &noise.pi) {
                (Some(r), Some(p)) => (r, p),
                _ => return Err(Error::InvalidSpec("missing GTR noise".into())),
            };
            let rhos = sample_dirichlet_reparam(tape, rho_c, u_rho)?;
            let pis = sample_dirichlet_reparam(tape, pi_c, u_pi)?;
            for s in 0..l {
                let rho = tape.rows(rhos, s, 1)?;
                let pi = tape.rows(pis, s, 1)?;
                let pi_values = row4(tape, pi);
                rate_matrices.push((rate_matrix_var(tape, rho, pi)?, pi_values));
                let rv = tape.value(rho).as_slice();
                subst_samples.push(SubstitutionParams::Gtr { rho: std::array::from_fn(|k| rv[k]), pi: pi_values });
            }
            let kr = kl_dirichlet_var(tape, rho_c, &priors.rho)?;
            let kp = kl_dirichlet_var(tape, pi_c, &priors.pi)?;
            tape.add(kr, kp)?
        }
    };

    let mut ancestor_samples = Vec::with_capacity(l);
    let mut per_sample = Vec::with_capacity(l);
    for (s, (q, pi)) in rate_matrices.into_iter().enumerate() {
        let b = tape.rows(branch_samples, s, 1)?;
        let p = transition_matrices_var(tape, q, &pi, b)?;
        let a = sample_categorical_relaxed(tape, log_q, &noise.ancestors[s], settings.temperature)?;
        per_sample.push(top_down_loglik(tape, a, p, data)?);
        ancestor_samples.push(a);
    }
    let total = tape.stack(&per_sample)?;
    let total = tape.sum(total);
    let loglik = tape.scale(total, 1.0 / l as f64);

    let kl_a = kl_categorical_var(tape, log_q, &priors.ancestor)?;
    let kl_ancestors = tape.sum(kl_a);
    let kl_b = kl_gamma_var(tape, b_shape, b_rate, &priors.branch)?;
    let kl_branches = tape.sum(kl_b);
    let global = tape.add(kl_branches, kl_subst)?;
    let global = tape.scale(global, data.n_sites as f64);
    let kl_total = tape.add(kl_ancestors, global)?;
    let penalty = tape.scale(kl_total, settings.alpha_kl);
    let elbo = tape.sub(loglik, penalty)?;

    Ok(ElboGraph {
        elbo,
        loglik,
        kl_total,
        kl_ancestors,
        kl_branches,
        kl_subst,
        ancestor_samples,
        branch_samples,
        subst_samples,
        n_sites: data.n_sites,
    })
}

fn matrix_tensor(m: &[[f64; 4]; 4]) -> Tensor {
    Tensor::new(4, 4, m.iter().flatten().copied().collect())
}

/// Convenience: one plain-valued ELBO evaluation at fixed weights.
pub fn evaluate_elbo(
    params: &VariationalParameters,
    data: &ElboData,
    settings: ElboSettings<'_>,
    noise: &ElboNoise,
) -> Result<ElboBreakdown> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let graph = build_elbo(&mut tape, &bound, data, settings, noise)?;
    Ok(graph.breakdown(&tape))
}
