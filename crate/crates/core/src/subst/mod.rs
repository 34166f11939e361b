//! Time-reversible nucleotide substitution models (JC69, K80, GTR).
//!
//! Rate matrices are normalized so that the mean substitution rate at
//! equilibrium is one; branch lengths are therefore expected substitutions
//! per site. Transition matrices come from the spectral decomposition of the
//! rate matrix, computed on the symmetrized form `Π^{1/2} Q Π^{-1/2}`.

mod jacobi;
mod ops;

use std::fmt;
use std::str::FromStr;

pub use ops::{rate_matrix_var, transition_matrices_var};

use crate::error::{Error, Result};

pub type Mat4 = [[f64; 4]; 4];

/// Exchangeability pairs in the order (AG, AC, AT, GC, GT, CT), as state
/// index pairs under the A, G, C, T ordering.
pub const RATE_PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

const SIMPLEX_TOL: f64 = 1e-9;

/// Substitution model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelFamily {
    Jc69,
    K80,
    Gtr,
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFamily::Jc69 => "jc69",
            ModelFamily::K80 => "k80",
            ModelFamily::Gtr => "gtr",
        })
    }
}

impl FromStr for ModelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jc69" | "jc" => Ok(ModelFamily::Jc69),
            "k80" | "k2p" => Ok(ModelFamily::K80),
            "gtr" => Ok(ModelFamily::Gtr),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }
}

/// Parameters ψ of a substitution model.
#[derive(Debug, Clone, PartialEq)]
pub enum SubstitutionParams {
    Jc69,
    /// `kappa` is the transition/transversion rate ratio.
    K80 {
        kappa: f64,
    },
    /// `rho` are the six exchangeabilities in [`RATE_PAIRS`] order, `pi` the
    /// equilibrium frequencies in A, G, C, T order; both on the simplex.
    Gtr {
        rho: [f64; 6],
        pi: [f64; 4],
    },
}

impl SubstitutionParams {
    pub fn family(&self) -> ModelFamily {
        match self {
            SubstitutionParams::Jc69 => ModelFamily::Jc69,
            SubstitutionParams::K80 { .. } => ModelFamily::K80,
            SubstitutionParams::Gtr { .. } => ModelFamily::Gtr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SubstitutionParams::Jc69 => Ok(()),
            SubstitutionParams::K80 { kappa } => {
                if kappa.is_finite() && *kappa > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParams(format!("kappa must be positive, got {kappa}")))
                }
            }
            SubstitutionParams::Gtr { rho, pi } => {
                check_simplex("rho", rho)?;
                check_simplex("pi", pi)
            }
        }
    }

    /// Unnormalized exchangeabilities in [`RATE_PAIRS`] order.
    pub fn rates(&self) -> [f64; 6] {
        match self {
            SubstitutionParams::Jc69 => [1.0; 6],
            SubstitutionParams::K80 { kappa } => k80_rates(*kappa),
            SubstitutionParams::Gtr { rho, .. } => *rho,
        }
    }

    pub fn pi(&self) -> [f64; 4] {
        match self {
            SubstitutionParams::Gtr { pi, .. } => *pi,
            _ => [0.25; 4],
        }
    }
}

/// K80 exchangeabilities: κ for the transitions A↔G and C↔T, 1 otherwise.
pub fn k80_rates(kappa: f64) -> [f64; 6] {
    [kappa, 1.0, 1.0, 1.0, 1.0, kappa]
}

fn check_simplex(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::InvalidParams(format!("{name} entries must be positive: {v:?}")));
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidParams(format!("{name} must sum to 1, sums to {total}")));
    }
    Ok(())
}

/// Normalized rate matrix together with its eigendecomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrixDecomposition {
    pub q: Mat4,
    pub eigenvalues: [f64; 4],
    pub u: Mat4,
    pub u_inv: Mat4,
    pub pi: [f64; 4],
}

/// P(b) for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub p: Mat4,
    pub b: f64,
}

impl TransitionMatrix {
    pub fn row(&self, i: usize) -> &[f64; 4] {
        &self.p[i]
    }
}

/// Unnormalized off-diagonal rates `R_ij = rate(i, j) π_j` and the
/// equilibrium mean rate `Σ_i π_i Σ_{j≠i} R_ij`.
pub(crate) fn unnormalized_rates(rates: &[f64; 6], pi: &[f64; 4]) -> (Mat4, f64) {
    let mut r = [[0.0; 4]; 4];
    for (k, &(i, j)) in RATE_PAIRS.iter().enumerate() {
        r[i][j] = rates[k] * pi[j];
        r[j][i] = rates[k] * pi[i];
    }
    let mut mean_rate = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            if i != j {
                mean_rate += pi[i] * r[i][j];
            }
        }
    }
    (r, mean_rate)
}

/// Rate matrix scaled to unit mean rate at equilibrium; rows sum to zero.
pub fn normalized_rate_matrix(rates: &[f64; 6], pi: &[f64; 4]) -> Mat4 {
    let (r, mean_rate) = unnormalized_rates(rates, pi);
    let scale = 1.0 / mean_rate;
    let mut q = [[0.0; 4]; 4];
    for i in 0..4 {
        let mut diag = 0.0;
        for j in 0..4 {
            if i != j {
                q[i][j] = r[i][j] * scale;
                diag -= q[i][j];
            }
        }
        q[i][i] = diag;
    }
    q
}

/// Builds and decomposes the normalized rate matrix for `params`.
pub fn build_rate_matrix(params: &SubstitutionParams) -> Result<RateMatrixDecomposition> {
    params.validate()?;
    let pi = params.pi();
    let q = normalized_rate_matrix(&params.rates(), &pi);
    spectral_decompose(&q, &pi)
}

/// Real eigendecomposition of a reversible rate matrix with stationary
/// distribution `pi`.
pub fn spectral_decompose(q: &Mat4, pi: &[f64; 4]) -> Result<RateMatrixDecomposition> {
    let mut worst = 0.0f64;
    for i in 0..4 {
        for j in (i + 1)..4 {
            worst = worst.max((pi[i] * q[i][j] - pi[j] * q[j][i]).abs());
        }
    }
    if worst > 1e-8 || pi.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::NonReversible(worst));
    }
    let sqrt_pi: [f64; 4] = std::array::from_fn(|i| pi[i].sqrt());
    let mut s = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            s[i][j] = sqrt_pi[i] * q[i][j] / sqrt_pi[j];
        }
    }
    // Average the two triangles so the solver sees an exactly symmetric input.
    for i in 0..4 {
        for j in (i + 1)..4 {
            let avg = 0.5 * (s[i][j] + s[j][i]);
            s[i][j] = avg;
            s[j][i] = avg;
        }
    }
    let (eigenvalues, v) = jacobi::symmetric_eigen(s);
    let mut u = [[0.0; 4]; 4];
    let mut u_inv = [[0.0; 4]; 4];
    for i in 0..4 {
        for k in 0..4 {
            u[i][k] = v[i][k] / sqrt_pi[i];
            u_inv[k][i] = v[i][k] * sqrt_pi[i];
        }
    }
    Ok(RateMatrixDecomposition { q: *q, eigenvalues, u, u_inv, pi: *pi })
}

/// `P(b) = U diag(exp(λ b)) U⁻¹`.
pub fn transition_matrix(d: &RateMatrixDecomposition, b: f64) -> Result<TransitionMatrix> {
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::InvalidParams(format!("branch length must be non-negative, got {b}")));
    }
    Ok(TransitionMatrix { p: exp_from_decomposition(d, b), b })
}

pub(crate) fn exp_from_decomposition(d: &RateMatrixDecomposition, b: f64) -> Mat4 {
    let eta: [f64; 4] = std::array::from_fn(|k| (d.eigenvalues[k] * b).exp());
    let mut p = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += d.u[i][k] * eta[k] * d.u_inv[k][j];
            }
            p[i][j] = acc.clamp(0.0, 1.0);
        }
    }
    p
}

/// Analytic P(b) for JC69 and K80 under the same unit-mean-rate scaling as
/// [`build_rate_matrix`]. `kappa` is ignored for JC69.
pub fn closed_form_transition(family: ModelFamily, kappa: f64, b: f64) -> Result<TransitionMatrix> {
    let kappa = match family {
        ModelFamily::Jc69 => 1.0,
        ModelFamily::K80 => kappa,
        ModelFamily::Gtr => {
            return Err(Error::InvalidParams("no closed form for GTR".into()));
        }
    };
    let e1 = (-4.0 * b / (kappa + 2.0)).exp();
    let e2 = (-2.0 * (kappa + 1.0) * b / (kappa + 2.0)).exp();
    let same = 0.25 + 0.25 * e1 + 0.5 * e2;
    let transition = 0.25 + 0.25 * e1 - 0.5 * e2;
    let transversion = 0.25 - 0.25 * e1;
    let mut p = [[transversion; 4]; 4];
    for (i, row) in p.iter_mut().enumerate() {
        row[i] = same;
    }
    // A↔G and C↔T
    p[0][1] = transition;
    p[1][0] = transition;
    p[2][3] = transition;
    p[3][2] = transition;
    Ok(TransitionMatrix { p, b })
}

pub(crate) fn matmul4(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for k in 0..4 {
            let aik = a[i][k];
            for j in 0..4 {
                out[i][j] += aik * b[k][j];
            }
        }
    }
    out
}

pub(crate) fn transpose4(a: &Mat4) -> Mat4 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}
