//! Variational encoders: an amortized per-site ancestor network and global
//! networks for branch lengths and substitution parameters.
//!
//! Every network has one ReLU hidden layer. The global networks take a fixed
//! input of ones, so their weights act as free variational parameters. All
//! positive outputs go through `softplus(z) + 1e-3`.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::distributions::{CategoricalSpec, DirichletSpec, GammaSpec};
use crate::error::{Error, Result};
use crate::subst::ModelFamily;

pub const DEFAULT_HIDDEN: usize = 32;

/// Minimum value added after softplus on every positive output.
pub const POSITIVE_FLOOR: f64 = 1e-3;

/// Weights of a one-hidden-layer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl Mlp {
    /// Uniform(±√(6/(fan_in+fan_out))) weights and zero biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            w1: glorot(rng, inputs, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: glorot(rng, hidden, outputs),
            b2: Tensor::zeros(1, outputs),
        }
    }

    pub fn zeros(inputs: usize, hidden: usize, outputs: usize) -> Self {
        Self {
            w1: Tensor::zeros(inputs, hidden),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(hidden, outputs),
            b2: Tensor::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w2.cols()
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn bind(&self, tape: &mut Tape) -> BoundMlp {
        BoundMlp {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(fan_in, fan_out, (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect())
}

/// An [`Mlp`] whose weights live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundMlp {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl BoundMlp {
    /// `relu(x W1 + b1) W2 + b2` for a batch `x` of row vectors.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add(h, self.b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, self.w2)?;
        tape.add(o, self.b2)
    }

    fn vars(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

fn positive(tape: &mut Tape, z: Var) -> Var {
    let s = tape.softplus(z);
    tape.offset(s, POSITIVE_FLOOR)
}

fn ones_input(tape: &mut Tape, net: &BoundMlp) -> Var {
    let width = tape.shape(net.w1).0;
    tape.constant(Tensor::full(1, width, 1.0))
}

/// All variational weights φ.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParameters {
    pub family: ModelFamily,
    pub n_sequences: usize,
    pub hidden: usize,
    pub ancestor: Mlp,
    /// 2M outputs: M shapes followed by M rates.
    pub branches: Mlp,
    /// (shape, rate) of the κ posterior; K80 only.
    pub kappa: Option<Mlp>,
    /// Six concentrations; GTR only.
    pub rho: Option<Mlp>,
    /// Four concentrations; GTR only.
    pub pi: Option<Mlp>,
}

impl VariationalParameters {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, family: ModelFamily, n_sequences: usize, hidden: usize) -> Self {
        Self::build(family, n_sequences, hidden, |i, o| Mlp::init(rng, i, hidden, o))
    }

    /// All-zero weights: uniform ancestor posteriors and identical specs.
    pub fn zeros(family: ModelFamily, n_sequences: usize, hidden: usize) -> Self {
        Self::build(family, n_sequences, hidden, |i, o| Mlp::zeros(i, hidden, o))
    }

    fn build(
        family: ModelFamily,
        n_sequences: usize,
        hidden: usize,
        mut make: impl FnMut(usize, usize) -> Mlp,
    ) -> Self {
        let ancestor = make(4 * n_sequences, 4);
        let branches = make(hidden, 2 * n_sequences);
        let kappa = (family == ModelFamily::K80).then(|| make(hidden, 2));
        let (rho, pi) =
            if family == ModelFamily::Gtr { (Some(make(hidden, 6)), Some(make(hidden, 4))) } else { (None, None) };
        Self { family, n_sequences, hidden, ancestor, branches, kappa, rho, pi }
    }

    fn nets(&self) -> Vec<&Mlp> {
        let mut nets = vec![&self.ancestor, &self.branches];
        nets.extend(self.kappa.iter());
        nets.extend(self.rho.iter());
        nets.extend(self.pi.iter());
        nets
    }

    /// Weight tensors in a fixed order shared with [`BoundParameters::vars`].
    pub fn weights(&self) -> Vec<&Tensor> {
        self.nets().into_iter().flat_map(Mlp::tensors).collect()
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.ancestor.tensors_mut());
        out.extend(self.branches.tensors_mut());
        for net in [&mut self.kappa, &mut self.rho, &mut self.pi].into_iter().flatten() {
            out.extend(net.tensors_mut());
        }
        out
    }

    pub fn n_weights(&self) -> usize {
        self.weights().iter().map(|t| t.len()).sum()
    }

    /// Registers every weight as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParameters {
        BoundParameters {
            n_sequences: self.n_sequences,
            ancestor: self.ancestor.bind(tape),
            branches: self.branches.bind(tape),
            kappa: self.kappa.as_ref().map(|n| n.bind(tape)),
            rho: self.rho.as_ref().map(|n| n.bind(tape)),
            pi: self.pi.as_ref().map(|n| n.bind(tape)),
        }
    }

    /// Ancestor posterior for one M×4 site matrix.
    pub fn encode_ancestor(&self, site: &Tensor) -> Result<CategoricalSpec> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let flat = site.clone();
        if flat.shape() != (self.n_sequences, 4) {
            return Err(Error::Shape { op: "encode_ancestor", lhs: flat.shape(), rhs: (self.n_sequences, 4) });
        }
        let x = tape.constant(Tensor::new(1, 4 * self.n_sequences, flat.as_slice().to_vec()));
        let lp = bound.encode_ancestors(&mut tape, x)?;
        let v = tape.value(lp);
        Ok(CategoricalSpec { probs: std::array::from_fn(|k| v.get(0, k).exp()) })
    }

    pub fn encode_branches(&self) -> Vec<GammaSpec> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (shape, rate) = bound.encode_branches(&mut tape).expect("branch encoder shapes are fixed");
        let (s, r) = (tape.value(shape), tape.value(rate));
        (0..self.n_sequences).map(|m| GammaSpec { shape: s.get(0, m), rate: r.get(0, m) }).collect()
    }

    pub fn encode_kappa(&self) -> Option<GammaSpec> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (shape, rate) = bound.encode_kappa(&mut tape).expect("kappa encoder shapes are fixed")?;
        Some(GammaSpec { shape: tape.item(shape), rate: tape.item(rate) })
    }

    pub fn encode_gtr(&self) -> Option<(DirichletSpec, DirichletSpec)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let (rho, pi) = bound.encode_gtr(&mut tape).expect("gtr encoder shapes are fixed")?;
        Some((
            DirichletSpec { concentration: tape.value(rho).as_slice().to_vec() },
            DirichletSpec { concentration: tape.value(pi).as_slice().to_vec() },
        ))
    }
}

/// [`VariationalParameters`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundParameters {
    pub n_sequences: usize,
    pub ancestor: BoundMlp,
    pub branches: BoundMlp,
    pub kappa: Option<BoundMlp>,
    pub rho: Option<BoundMlp>,
    pub pi: Option<BoundMlp>,
}

impl BoundParameters {
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::new();
        out.extend(self.ancestor.vars());
        out.extend(self.branches.vars());
        for net in [&self.kappa, &self.rho, &self.pi].into_iter().flatten() {
            out.extend(net.vars());
        }
        out
    }

    /// Row-wise ancestor log-probabilities (N×4) for an N×4M batch of
    /// flattened site columns.
    pub fn encode_ancestors(&self, tape: &mut Tape, sites: Var) -> Result<Var> {
        let (_, width) = tape.shape(sites);
        if width != 4 * self.n_sequences {
            return Err(Error::Shape { op: "encode_ancestor", lhs: tape.shape(sites), rhs: (1, 4 * self.n_sequences) });
        }
        let logits = self.ancestor.forward(tape, sites)?;
        Ok(tape.log_softmax(logits))
    }

    /// Gamma shapes and rates (each 1×M) of the branch-length posteriors.
    pub fn encode_branches(&self, tape: &mut Tape) -> Result<(Var, Var)> {
        let m = self.n_sequences;
        let ones = ones_input(tape, &self.branches);
        let z = self.branches.forward(tape, ones)?;
        let z = positive(tape, z);
        Ok((tape.cols(z, 0, m)?, tape.cols(z, m, m)?))
    }

    /// Gamma shape and rate (each 1×1) of the κ posterior, if present.
    pub fn encode_kappa(&self, tape: &mut Tape) -> Result<Option<(Var, Var)>> {
        let Some(net) = self.kappa else { return Ok(None) };
        let ones = ones_input(tape, &net);
        let z = net.forward(tape, ones)?;
        let z = positive(tape, z);
        Ok(Some((tape.cols(z, 0, 1)?, tape.cols(z, 1, 1)?)))
    }

    /// Dirichlet concentrations for ρ (1×6) and π (1×4), if present.
    pub fn encode_gtr(&self, tape: &mut Tape) -> Result<Option<(Var, Var)>> {
        let (Some(rho), Some(pi)) = (self.rho, self.pi) else { return Ok(None) };
        let ones = ones_input(tape, &rho);
        let zr = rho.forward(tape, ones)?;
        let ones = ones_input(tape, &pi);
        let zp = pi.forward(tape, ones)?;
        Ok(Some((positive(tape, zr), positive(tape, zp))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients_multi;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn site(states: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(states.len(), 4);
        for (m, &s) in states.iter().enumerate() {
            t.set(m, s, 1.0);
        }
        t
    }

    #[test]
    fn zero_weights_give_uniform_ancestor() {
        let p = VariationalParameters::zeros(ModelFamily::Jc69, 3, 8);
        let spec = p.encode_ancestor(&site(&[0, 1, 2])).unwrap();
        for &q in &spec.probs {
            assert!((q - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn ancestor_output_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for _ in 0..20 {
            let p = VariationalParameters::init(&mut rng, ModelFamily::Gtr, 4, 16);
            let states: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
            let a = p.encode_ancestor(&site(&states)).unwrap();
            let b = p.encode_ancestor(&site(&states)).unwrap();
            assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ancestor_rejects_wrong_width() {
        let p = VariationalParameters::zeros(ModelFamily::Jc69, 3, 8);
        assert!(p.encode_ancestor(&site(&[0, 1])).is_err());
    }

    #[test]
    fn global_outputs_positive_for_extreme_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut p = VariationalParameters::init(&mut rng, ModelFamily::Gtr, 3, 8);
        for w in p.weights_mut() {
            for v in w.as_mut_slice() {
                *v = -50.0;
            }
        }
        assert!(p.encode_branches().iter().all(|g| g.validate().is_ok() && g.shape >= POSITIVE_FLOOR));
        let (rho, pi) = p.encode_gtr().unwrap();
        assert!(rho.validate().is_ok() && pi.validate().is_ok());
        assert_eq!((rho.dim(), pi.dim()), (6, 4));

        let k = VariationalParameters::init(&mut rng, ModelFamily::K80, 3, 8);
        assert!(k.encode_kappa().unwrap().validate().is_ok());
        assert!(k.encode_gtr().is_none());
        assert_eq!(k.encode_kappa(), k.encode_kappa());
    }

    #[test]
    fn weight_order_matches_bound_vars() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for family in [ModelFamily::Jc69, ModelFamily::K80, ModelFamily::Gtr] {
            let p = VariationalParameters::init(&mut rng, family, 3, 8);
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let vars = bound.vars();
            let weights = p.weights();
            assert_eq!(vars.len(), weights.len());
            for (v, w) in vars.iter().zip(weights) {
                assert_eq!(tape.value(*v), w);
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = VariationalParameters::init(&mut ChaCha8Rng::seed_from_u64(1), ModelFamily::Gtr, 5, 32);
        let b = VariationalParameters::init(&mut ChaCha8Rng::seed_from_u64(1), ModelFamily::Gtr, 5, 32);
        assert_eq!(a, b);
        let limit = (6.0f64 / (20 + 32) as f64).sqrt();
        assert!(a.ancestor.w1.as_slice().iter().all(|w| w.abs() <= limit));
    }

    type Slot = fn(&mut BoundParameters, BoundMlp);

    /// Gradient of one head's outputs with respect to that network's weights.
    fn check_net(
        base: &VariationalParameters,
        mlp: &Mlp,
        slot: Slot,
        head: impl Fn(&mut Tape, &BoundParameters) -> Result<Var>,
    ) -> f64 {
        let thetas = mlp.tensors().map(Tensor::clone).to_vec();
        check_gradients_multi(
            |t, v| {
                let mut bound = base.bind(t);
                slot(&mut bound, BoundMlp { w1: v[0], b1: v[1], w2: v[2], b2: v[3] });
                let out = head(t, &bound)?;
                let (r, c) = t.shape(out);
                let w = t.constant(Tensor::new(r, c, (0..r * c).map(|k| 0.5 + (k % 5) as f64 * 0.2).collect()));
                let wo = t.mul(out, w)?;
                Ok(t.sum(wo))
            },
            &thetas,
            1e-6,
        )
        .unwrap()
    }

    #[test]
    fn encoder_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let gtr = VariationalParameters::init(&mut rng, ModelFamily::Gtr, 3, 6);
        let k80 = VariationalParameters::init(&mut rng, ModelFamily::K80, 3, 6);
        let sites = Tensor::new(
            2,
            12,
            vec![
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0,
            ],
        );

        let err = check_net(
            &gtr,
            &gtr.branches,
            |b, n| b.branches = n,
            |t, b| {
                let (s, r) = b.encode_branches(t)?;
                t.stack(&[s, r])
            },
        );
        assert!(err < 1e-4, "branches {err}");

        let err = check_net(
            &k80,
            k80.kappa.as_ref().unwrap(),
            |b, n| b.kappa = Some(n),
            |t, b| {
                let (s, r) = b.encode_kappa(t)?.unwrap();
                t.stack(&[s, r])
            },
        );
        assert!(err < 1e-4, "kappa {err}");

        let err =
            check_net(&gtr, gtr.rho.as_ref().unwrap(), |b, n| b.rho = Some(n), |t, b| Ok(b.encode_gtr(t)?.unwrap().0));
        assert!(err < 1e-4, "rho {err}");

        let err =
            check_net(&gtr, gtr.pi.as_ref().unwrap(), |b, n| b.pi = Some(n), |t, b| Ok(b.encode_gtr(t)?.unwrap().1));
        assert!(err < 1e-4, "pi {err}");

        let err = check_net(
            &gtr,
            &gtr.ancestor,
            |b, n| b.ancestor = n,
            |t, b| {
                let x = t.constant(sites.clone());
                b.encode_ancestors(t, x)
            },
        );
        assert!(err < 1e-4, "ancestor {err}");
    }
}
