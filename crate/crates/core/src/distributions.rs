//! Gamma, Dirichlet and Categorical distributions: log-densities,
//! closed-form KL divergences and reparameterized samplers.
//!
//! Samplers are driven by explicit noise tensors so that the same noise can
//! be replayed (common random numbers for gradient checks, deterministic
//! training). Use [`uniform_noise`] and [`gumbel_noise`] to draw them.
//!
//! Gamma samples are produced by CDF inversion, `s = P⁻¹(u; α) / β`, and
//! differentiated implicitly: `∂s/∂α = −(∂P/∂α) / pdf` and `∂s/∂β = −s/β`.
//! Dirichlet samples are normalized unit-rate Gamma draws. The categorical
//! ancestor uses the Gumbel-softmax relaxation.

use rand::Rng;

use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::special::{digamma, gamma_p_da, gamma_p_inv, gamma_pdf_unit, ln_gamma};

/// Lower bound applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-10;

/// Default Gumbel-softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

// Unit-rate gamma draws are floored here so that Dirichlet normalization
// never divides by zero when a tiny shape underflows.
const GAMMA_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSpec {
    pub shape: f64,
    pub rate: f64,
}

impl GammaSpec {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        let spec = Self { shape, rate };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("gamma shape and rate must be positive: {self:?}")))
        }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        self.shape * self.rate.ln() + (self.shape - 1.0) * x.ln() - self.rate * x - ln_gamma(self.shape)
    }

    /// Inverse-CDF draw; the same transform as [`sample_gamma_reparam`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        inverse_cdf_unit(self.shape, open_unit(rng)) / self.rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirichletSpec {
    pub concentration: Vec<f64>,
}

impl DirichletSpec {
    pub fn new(concentration: Vec<f64>) -> Result<Self> {
        let spec = Self { concentration };
        spec.validate()?;
        Ok(spec)
    }

    /// The flat Dirichlet over `k` categories.
    pub fn uniform(k: usize) -> Self {
        Self { concentration: vec![1.0; k] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.concentration.is_empty() || self.concentration.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "dirichlet concentrations must be positive: {:?}",
                self.concentration
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.concentration.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let total: f64 = self.concentration.iter().sum();
        self.concentration.iter().map(|a| a / total).collect()
    }

    pub fn ln_pdf(&self, x: &[f64]) -> f64 {
        let total: f64 = self.concentration.iter().sum();
        let mut acc = ln_gamma(total);
        for (&a, &xi) in self.concentration.iter().zip(x) {
            acc += (a - 1.0) * xi.ln() - ln_gamma(a);
        }
        acc
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let draws: Vec<f64> =
            self.concentration.iter().map(|&a| inverse_cdf_unit(a, open_unit(rng)).max(GAMMA_FLOOR)).collect();
        let total: f64 = draws.iter().sum();
        draws.into_iter().map(|g| g / total).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoricalSpec {
    pub probs: [f64; 4],
}

impl CategoricalSpec {
    pub fn new(probs: [f64; 4]) -> Result<Self> {
        let spec = Self { probs };
        spec.validate()?;
        Ok(spec)
    }

    pub fn uniform() -> Self {
        Self { probs: [0.25; 4] }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.probs.iter().sum();
        if self.probs.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!("categorical probabilities invalid: {:?}", self.probs)));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, &p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(3)
    }

    /// One Gumbel-softmax draw at temperature `tau`.
    pub fn sample_relaxed<R: Rng + ?Sized>(&self, rng: &mut R, tau: f64) -> [f64; 4] {
        let z: [f64; 4] = std::array::from_fn(|k| (self.probs[k].max(PROB_FLOOR).ln() + gumbel(rng)) / tau);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = z.map(|v| (v - max).exp());
        let total: f64 = e.iter().sum();
        e.map(|v| v / total)
    }
}

/// Uniform draw from the open interval (0, 1).
fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    -(-open_unit(rng).ln()).ln()
}

/// `rows × cols` uniform draws in (0, 1).
pub fn uniform_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| open_unit(rng)).collect())
}

/// `rows × cols` standard Gumbel draws.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| gumbel(rng)).collect())
}

fn inverse_cdf_unit(shape: f64, u: f64) -> f64 {
    gamma_p_inv(shape, u)
}

pub fn kl_gamma(q: &GammaSpec, p: &GammaSpec) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    let (a1, b1, a2, b2) = (q.shape, q.rate, p.shape, p.rate);
    Ok((a1 - a2) * digamma(a1) - ln_gamma(a1) + ln_gamma(a2) + a2 * (b1.ln() - b2.ln()) + a1 * (b2 - b1) / b1)
}

pub fn kl_dirichlet(q: &DirichletSpec, p: &DirichletSpec) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    if q.dim() != p.dim() {
        return Err(Error::LengthMismatch(q.dim(), p.dim()));
    }
    let sq: f64 = q.concentration.iter().sum();
    let sp: f64 = p.concentration.iter().sum();
    let psi_sq = digamma(sq);
    let mut kl = ln_gamma(sq) - ln_gamma(sp);
    for (&a, &b) in q.concentration.iter().zip(&p.concentration) {
        kl += ln_gamma(b) - ln_gamma(a) + (a - b) * (digamma(a) - psi_sq);
    }
    Ok(kl)
}

pub fn kl_categorical(q: &CategoricalSpec, p: &CategoricalSpec) -> Result<f64> {
    let mut kl = 0.0;
    for (&qi, &pi) in q.probs.iter().zip(&p.probs) {
        if qi > 0.0 {
            if pi <= 0.0 {
                return Err(Error::InvalidSpec("q has mass where p has none".into()));
            }
            kl += qi * (qi / pi).ln();
        }
    }
    Ok(kl)
}

struct GammaSampleOp;

impl CustomOp for GammaSampleOp {
    fn name(&self) -> &'static str {
        "gamma_sample"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (shape, rate) = (inputs[0], inputs[1]);
        let cols = shape.cols();
        let mut shape_bar = Tensor::zeros(1, cols);
        let mut rate_bar = Tensor::zeros(1, cols);
        for l in 0..output.rows() {
            for c in 0..cols {
                let (a, beta, s) = (shape.get(0, c), rate.get(0, c), output.get(l, c));
                let g = grad.get(l, c);
                let x = s * beta;
                let pdf = gamma_pdf_unit(a, x);
                if x > GAMMA_FLOOR && pdf.is_finite() && pdf > 0.0 {
                    let dx_da = -gamma_p_da(a, x) / pdf;
                    if dx_da.is_finite() {
                        shape_bar.as_mut_slice()[c] += g * dx_da / beta;
                    }
                }
                rate_bar.as_mut_slice()[c] -= g * s / beta;
            }
        }
        vec![Some(shape_bar), Some(rate_bar)]
    }
}

/// Reparameterized Gamma draws. `shape` and `rate` are 1×C, `uniforms` is
/// L×C noise from [`uniform_noise`]; the result is L×C.
pub fn sample_gamma_reparam(tape: &mut Tape, shape: Var, rate: Var, uniforms: &Tensor) -> Result<Var> {
    let (sv, rv) = (tape.value(shape), tape.value(rate));
    if sv.shape() != rv.shape() || sv.rows() != 1 || uniforms.cols() != sv.cols() || uniforms.rows() == 0 {
        return Err(Error::Shape { op: "gamma_sample", lhs: sv.shape(), rhs: uniforms.shape() });
    }
    if let Some(&bad) = sv.as_slice().iter().chain(rv.as_slice()).find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain { op: "gamma_sample", value: bad });
    }
    let mut out = Tensor::zeros(uniforms.rows(), uniforms.cols());
    for l in 0..uniforms.rows() {
        for c in 0..uniforms.cols() {
            let x = inverse_cdf_unit(sv.get(0, c), uniforms.get(l, c)).max(GAMMA_FLOOR);
            out.set(l, c, x / rv.get(0, c));
        }
    }
    Ok(tape.custom(&[shape, rate], out, GammaSampleOp))
}

/// Reparameterized Dirichlet draws from a 1×K concentration and L×K
/// uniform noise; each row of the L×K result lies on the simplex.
pub fn sample_dirichlet_reparam(tape: &mut Tape, concentration: Var, uniforms: &Tensor) -> Result<Var> {
    let (_, k) = tape.shape(concentration);
    let ones = tape.constant(Tensor::full(1, k, 1.0));
    let g = sample_gamma_reparam(tape, concentration, ones, uniforms)?;
    let total = tape.sum_rows(g);
    tape.div(g, total)
}

/// Gumbel-softmax relaxation of categorical draws: `softmax((log_probs + g) / τ)`
/// row-wise, with `g` the Gumbel noise (same shape as `log_probs`).
pub fn sample_categorical_relaxed(tape: &mut Tape, log_probs: Var, gumbels: &Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidSpec(format!("temperature must be positive, got {tau}")));
    }
    let g = tape.constant(gumbels.clone());
    let z = tape.add(log_probs, g)?;
    let z = tape.scale(z, 1.0 / tau);
    Ok(tape.softmax(z))
}

/// Elementwise KL(Gamma(shape, rate) ∥ prior) for same-shaped `shape` and `rate`.
pub fn kl_gamma_var(tape: &mut Tape, shape: Var, rate: Var, prior: &GammaSpec) -> Result<Var> {
    prior.validate()?;
    let (a2, b2) = (prior.shape, prior.rate);
    let psi = tape.digamma(shape)?;
    let a_minus = tape.offset(shape, -a2);
    let t1 = tape.mul(a_minus, psi)?;
    let lg = tape.ln_gamma(shape)?;
    let t2 = tape.sub(t1, lg)?;
    let log_rate = tape.log(rate)?;
    let t3 = tape.scale(log_rate, a2);
    let t4 = tape.add(t2, t3)?;
    // α₁(β₂ − β₁)/β₁ = α₁β₂/β₁ − α₁
    let ratio = tape.div(shape, rate)?;
    let ratio = tape.scale(ratio, b2);
    let t5 = tape.sub(ratio, shape)?;
    let out = tape.add(t4, t5)?;
    Ok(tape.offset(out, ln_gamma(a2) - a2 * b2.ln()))
}

/// KL(Dirichlet(concentration) ∥ prior) for a 1×K concentration; 1×1 result.
pub fn kl_dirichlet_var(tape: &mut Tape, concentration: Var, prior: &DirichletSpec) -> Result<Var> {
    prior.validate()?;
    let shape = tape.shape(concentration);
    if shape != (1, prior.dim()) {
        return Err(Error::Shape { op: "kl_dirichlet", lhs: shape, rhs: (1, prior.dim()) });
    }
    let sp: f64 = prior.concentration.iter().sum();
    let const_term = prior.concentration.iter().map(|&b| ln_gamma(b)).sum::<f64>() - ln_gamma(sp);
    let total = tape.sum(concentration);
    let lg_total = tape.ln_gamma(total)?;
    let lg = tape.ln_gamma(concentration)?;
    let sum_lg = tape.sum(lg);
    let psi = tape.digamma(concentration)?;
    let psi_total = tape.digamma(total)?;
    let diff = tape.sub(psi, psi_total)?;
    let beta = tape.constant(Tensor::row(&prior.concentration));
    let a_minus_b = tape.sub(concentration, beta)?;
    let cross = tape.mul(a_minus_b, diff)?;
    let sum_cross = tape.sum(cross);
    let kl = tape.sub(lg_total, sum_lg)?;
    let kl = tape.add(kl, sum_cross)?;
    Ok(tape.offset(kl, const_term))
}

/// Row-wise KL(q ∥ prior) for N×4 log-probabilities `log_q`; N×1 result.
pub fn kl_categorical_var(tape: &mut Tape, log_q: Var, prior: &CategoricalSpec) -> Result<Var> {
    prior.validate()?;
    let (rows, cols) = tape.shape(log_q);
    if cols != 4 {
        return Err(Error::Shape { op: "kl_categorical", lhs: (rows, cols), rhs: (1, 4) });
    }
    let q = tape.exp(log_q);
    let log_p = tape.constant(Tensor::row(&prior.probs.map(|p| p.max(PROB_FLOOR).ln())));
    let diff = tape.sub(log_q, log_p)?;
    let terms = tape.mul(q, diff)?;
    Ok(tape.sum_rows(terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients_multi;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn within_3se(samples: &[f64], expect: f64) -> bool {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean - expect).abs() <= 3.0 * (var / n).sqrt()
    }

    #[test]
    fn gamma_sample_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let spec = GammaSpec::new(2.0, 4.0).unwrap();
        let samples: Vec<f64> = (0..100_000).map(|_| spec.sample(&mut rng)).collect();
        assert!(samples.iter().all(|&s| s > 0.0));
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let sigma = 2f64.sqrt() / 4.0;
        assert!((mean - 0.5).abs() < 3.0 * sigma / (1e5f64).sqrt(), "{mean}");
    }

    #[test]
    fn tape_and_plain_gamma_samples_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let u = uniform_noise(&mut rng, 5, 2);
        let mut tape = Tape::new();
        let shape = tape.param(Tensor::row(&[2.0, 0.3]));
        let rate = tape.param(Tensor::row(&[4.0, 1.0]));
        let s = sample_gamma_reparam(&mut tape, shape, rate, &u).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for l in 0..5 {
            let a = GammaSpec::new(2.0, 4.0).unwrap().sample(&mut rng);
            let b = GammaSpec::new(0.3, 1.0).unwrap().sample(&mut rng);
            assert_eq!(tape.value(s).get(l, 0), a);
            assert_eq!(tape.value(s).get(l, 1), b.max(GAMMA_FLOOR));
        }
    }

    #[test]
    fn rate_derivative_is_scale_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let u = uniform_noise(&mut rng, 1, 1);
        let mut tape = Tape::new();
        let shape = tape.param(Tensor::scalar(2.5));
        let rate = tape.param(Tensor::scalar(3.0));
        let s = sample_gamma_reparam(&mut tape, shape, rate, &u).unwrap();
        let sv = tape.item(s);
        let g = tape.backward(s).unwrap();
        assert!((g.get(rate).item() + sv / 3.0).abs() < 1e-14);
    }

    #[test]
    fn gamma_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..30 {
            let u = uniform_noise(&mut rng, 4, 3);
            let shape: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..8.0)).collect();
            let rate: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..5.0)).collect();
            let err = check_gradients_multi(
                |t, v| {
                    let s = sample_gamma_reparam(t, v[0], v[1], &u)?;
                    Ok(t.sum(s))
                },
                &[Tensor::row(&shape), Tensor::row(&rate)],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err} at {shape:?}");
        }
    }

    #[test]
    fn dirichlet_samples_on_simplex_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let spec = DirichletSpec::new(vec![5.0; 4]).unwrap();
        let draws: Vec<Vec<f64>> = (0..100_000).map(|_| spec.sample(&mut rng)).collect();
        for d in &draws {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for k in 0..4 {
            let comp: Vec<f64> = draws.iter().map(|d| d[k]).collect();
            assert!(within_3se(&comp, 0.25));
        }
        let spec = DirichletSpec::new(vec![1000.0, 1.0, 1.0, 1.0]).unwrap();
        let first: Vec<f64> = (0..100_000).map(|_| spec.sample(&mut rng)[0]).collect();
        assert!(within_3se(&first, 1000.0 / 1003.0));
    }

    #[test]
    fn dirichlet_reparam_sums_to_one_and_has_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        for _ in 0..30 {
            let u = uniform_noise(&mut rng, 3, 4);
            let conc: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..6.0)).collect();
            let w = Tensor::new(3, 4, (0..12).map(|_| rng.random_range(0.5..1.5)).collect());
            let mut tape = Tape::new();
            let c = tape.param(Tensor::row(&conc));
            let d = sample_dirichlet_reparam(&mut tape, c, &u).unwrap();
            for l in 0..3 {
                assert!((tape.value(d).row_slice(l).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let err = check_gradients_multi(
                |t, v| {
                    let d = sample_dirichlet_reparam(t, v[0], &u)?;
                    let wc = t.constant(w.clone());
                    let wd = t.mul(d, wc)?;
                    Ok(t.sum(wd))
                },
                &[Tensor::row(&conc)],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn relaxed_categorical_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let spec = CategoricalSpec::new([0.1, 0.2, 0.3, 0.4]).unwrap();
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let y = spec.sample_relaxed(&mut rng, DEFAULT_TEMPERATURE);
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let arg = (0..4).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
            counts[arg] += 1;
        }
        for k in 0..4 {
            let p = spec.probs[k];
            let freq = counts[k] as f64 / n as f64;
            assert!((freq - p).abs() < 3.0 * (p * (1.0 - p) / n as f64).sqrt(), "{k}: {freq}");
        }
        let y = spec.sample_relaxed(&mut rng, 1e-4);
        assert!(y.iter().any(|&v| v > 1.0 - 1e-9));
    }

    #[test]
    fn relaxed_categorical_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        for _ in 0..30 {
            let g = gumbel_noise(&mut rng, 3, 4);
            let logits = Tensor::new(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
            let w = Tensor::new(3, 4, (0..12).map(|_| rng.random_range(0.5..1.5)).collect());
            let err = check_gradients_multi(
                |t, v| {
                    let lp = t.log_softmax(v[0]);
                    let y = sample_categorical_relaxed(t, lp, &g, 1.0)?;
                    let wc = t.constant(w.clone());
                    let wy = t.mul(y, wc)?;
                    Ok(t.sum(wy))
                },
                &[logits],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn kl_reference_values() {
        let g2 = GammaSpec::new(2.0, 1.0).unwrap();
        let g1 = GammaSpec::new(1.0, 1.0).unwrap();
        assert!((kl_gamma(&g2, &g1).unwrap() - 0.422_784_335_098_467_1).abs() < 1e-12);
        assert!(kl_gamma(&g2, &g2).unwrap().abs() < 1e-14);

        let q = CategoricalSpec::new([0.7, 0.1, 0.1, 0.1]).unwrap();
        let u = CategoricalSpec::uniform();
        assert!((kl_categorical(&q, &u).unwrap() - 0.445_846_372_464_164_16).abs() < 1e-12);
        assert!((kl_categorical(&q, &u).unwrap() - 0.445841).abs() < 1e-5);
        let one_hot = CategoricalSpec::new([0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((kl_categorical(&one_hot, &u).unwrap() - 4f64.ln()).abs() < 1e-15);
        assert_eq!(kl_categorical(&u, &u).unwrap(), 0.0);
        assert!(kl_categorical(&u, &one_hot).is_err());

        let d = DirichletSpec::new(vec![2.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(kl_dirichlet(&d, &d).unwrap().abs() < 1e-14);
    }

    /// Mean and standard error of `f` over `n` draws.
    fn mc(n: usize, mut f: impl FnMut() -> f64) -> (f64, f64) {
        let xs: Vec<f64> = (0..n).map(|_| f()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn closed_form_kls_match_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let n = 1_000_000;

        let (q, p) = (GammaSpec::new(2.0, 1.0).unwrap(), GammaSpec::new(1.0, 1.0).unwrap());
        let (m, se) = mc(n, || {
            let x = q.sample(&mut rng);
            q.ln_pdf(x) - p.ln_pdf(x)
        });
        assert!((m - kl_gamma(&q, &p).unwrap()).abs() < 3.0 * se, "{m} ± {se}");

        let (q, p) = (GammaSpec::new(3.5, 0.7).unwrap(), GammaSpec::new(0.1, 1.0).unwrap());
        let (m, se) = mc(n, || {
            let x = q.sample(&mut rng);
            q.ln_pdf(x) - p.ln_pdf(x)
        });
        assert!((m - kl_gamma(&q, &p).unwrap()).abs() < 3.0 * se, "{m} ± {se}");

        let (q, p) = (DirichletSpec::new(vec![2.0, 1.0, 1.0, 1.0]).unwrap(), DirichletSpec::uniform(4));
        let (m, se) = mc(n, || {
            let x = q.sample(&mut rng);
            q.ln_pdf(&x) - p.ln_pdf(&x)
        });
        assert!((m - kl_dirichlet(&q, &p).unwrap()).abs() < 3.0 * se, "{m} ± {se}");

        let (q, p) = (CategoricalSpec::new([0.7, 0.1, 0.1, 0.1]).unwrap(), CategoricalSpec::uniform());
        let (m, se) = mc(n, || {
            let k = q.sample(&mut rng);
            (q.probs[k] / p.probs[k]).ln()
        });
        assert!((m - kl_categorical(&q, &p).unwrap()).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn tape_kls_match_plain() {
        let mut tape = Tape::new();
        let prior = GammaSpec::new(0.1, 1.0).unwrap();
        let shape = tape.param(Tensor::row(&[2.0, 0.5]));
        let rate = tape.param(Tensor::row(&[3.0, 0.2]));
        let kl = kl_gamma_var(&mut tape, shape, rate, &prior).unwrap();
        for (c, (a, b)) in [(2.0, 3.0), (0.5, 0.2)].into_iter().enumerate() {
            let plain = kl_gamma(&GammaSpec::new(a, b).unwrap(), &prior).unwrap();
            assert!((tape.value(kl).get(0, c) - plain).abs() < 1e-12);
        }

        let prior = DirichletSpec::uniform(4);
        let conc = tape.param(Tensor::row(&[2.0, 1.0, 3.0, 0.5]));
        let kl = kl_dirichlet_var(&mut tape, conc, &prior).unwrap();
        let plain = kl_dirichlet(&DirichletSpec::new(vec![2.0, 1.0, 3.0, 0.5]).unwrap(), &prior).unwrap();
        assert!((tape.item(kl) - plain).abs() < 1e-12);

        let probs = [0.7, 0.1, 0.1, 0.1];
        let lq = tape.param(Tensor::new(1, 4, probs.map(f64::ln).to_vec()));
        let kl = kl_categorical_var(&mut tape, lq, &CategoricalSpec::uniform()).unwrap();
        let plain = kl_categorical(&CategoricalSpec::new(probs).unwrap(), &CategoricalSpec::uniform()).unwrap();
        assert!((tape.item(kl) - plain).abs() < 1e-12);
    }

    #[test]
    fn kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let gprior = GammaSpec::new(0.1, 1.0).unwrap();
        let dprior = DirichletSpec::new(vec![1.0, 2.0, 1.0, 0.5]).unwrap();
        let cprior = CategoricalSpec::new([0.1, 0.2, 0.3, 0.4]).unwrap();
        for _ in 0..30 {
            let shape: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..10.0)).collect();
            let rate: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..10.0)).collect();
            let err = check_gradients_multi(
                |t, v| {
                    let kl = kl_gamma_var(t, v[0], v[1], &gprior)?;
                    Ok(t.sum(kl))
                },
                &[Tensor::row(&shape), Tensor::row(&rate)],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "gamma {err}");

            let conc: Vec<f64> = (0..4).map(|_| rng.random_range(0.2..10.0)).collect();
            let err =
                check_gradients_multi(|t, v| kl_dirichlet_var(t, v[0], &dprior), &[Tensor::row(&conc)], 1e-6).unwrap();
            assert!(err < 1e-4, "dirichlet {err}");

            let logits = Tensor::new(2, 4, (0..8).map(|_| rng.random_range(-2.0..2.0)).collect());
            let err = check_gradients_multi(
                |t, v| {
                    let lq = t.log_softmax(v[0]);
                    let kl = kl_categorical_var(t, lq, &cprior)?;
                    Ok(t.sum(kl))
                },
                &[logits],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "categorical {err}");
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(GammaSpec::new(0.0, 1.0).is_err());
        assert!(GammaSpec::new(1.0, -1.0).is_err());
        assert!(DirichletSpec::new(vec![1.0, 0.0]).is_err());
        assert!(DirichletSpec::new(vec![]).is_err());
        assert!(CategoricalSpec::new([0.5, 0.5, 0.5, 0.0]).is_err());
        let d3 = DirichletSpec::uniform(3);
        assert!(kl_dirichlet(&d3, &DirichletSpec::uniform(4)).is_err());
    }

    #[test]
    fn same_seed_same_samples() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GammaSpec::new(1.5, 2.0).unwrap();
            (0..10).map(|_| g.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    proptest! {
        #[test]
        fn kls_are_nonnegative(
            a1 in 0.05f64..20.0, b1 in 0.05f64..20.0, a2 in 0.05f64..20.0, b2 in 0.05f64..20.0,
            c in prop::collection::vec(0.05f64..20.0, 8),
            q in prop::collection::vec(0.01f64..1.0, 4),
        ) {
            let kg = kl_gamma(&GammaSpec::new(a1, b1).unwrap(), &GammaSpec::new(a2, b2).unwrap()).unwrap();
            prop_assert!(kg >= -1e-12);
            let kd = kl_dirichlet(
                &DirichletSpec::new(c[..4].to_vec()).unwrap(),
                &DirichletSpec::new(c[4..].to_vec()).unwrap(),
            ).unwrap();
            prop_assert!(kd >= -1e-12);
            let total: f64 = q.iter().sum();
            let probs: [f64; 4] = std::array::from_fn(|k| q[k] / total);
            let kc = kl_categorical(&CategoricalSpec { probs }, &CategoricalSpec::uniform()).unwrap();
            prop_assert!(kc >= -1e-12);
        }
    }
}
