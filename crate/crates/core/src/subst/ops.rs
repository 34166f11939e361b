//! Differentiable rate-matrix and matrix-exponential nodes for the tape.

use super::{exp_from_decomposition, matmul4, spectral_decompose, transpose4, unnormalized_rates, Mat4, RATE_PAIRS};
use crate::autodiff::{CustomOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn to_mat4(t: &Tensor) -> Mat4 {
    std::array::from_fn(|i| std::array::from_fn(|j| t.get(i, j)))
}

fn from_mat4(m: &Mat4) -> Tensor {
    Tensor::new(4, 4, m.iter().flatten().copied().collect())
}

struct RateMatrixOp;

impl CustomOp for RateMatrixOp {
    fn name(&self) -> &'static str {
        "rate_matrix"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let rates: [f64; 6] = std::array::from_fn(|k| inputs[0].as_slice()[k]);
        let pi: [f64; 4] = std::array::from_fn(|k| inputs[1].as_slice()[k]);
        let (r, d) = unnormalized_rates(&rates, &pi);

        // Gradient with respect to each free off-diagonal entry, folding in
        // the diagonal's dependence on its row.
        let mut g = [[0.0; 4]; 4];
        let mut d_bar = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    g[i][j] = grad.get(i, j) - grad.get(i, i);
                    d_bar -= g[i][j] * r[i][j] / (d * d);
                }
            }
        }
        let mut r_bar = [[0.0; 4]; 4];
        let mut pi_bar = [0.0; 4];
        for i in 0..4 {
            let mut row_sum = 0.0;
            for j in 0..4 {
                if i != j {
                    r_bar[i][j] = g[i][j] / d + d_bar * pi[i];
                    row_sum += r[i][j];
                }
            }
            pi_bar[i] += d_bar * row_sum;
        }
        let mut rates_bar = [0.0; 6];
        for (k, &(i, j)) in RATE_PAIRS.iter().enumerate() {
            rates_bar[k] = r_bar[i][j] * pi[j] + r_bar[j][i] * pi[i];
            pi_bar[j] += r_bar[i][j] * rates[k];
            pi_bar[i] += r_bar[j][i] * rates[k];
        }
        vec![Some(Tensor::row(&rates_bar)), Some(Tensor::row(&pi_bar))]
    }
}

/// Normalized rate matrix Q (4×4) from exchangeabilities (1×6, in
/// [`RATE_PAIRS`] order) and equilibrium frequencies (1×4).
pub fn rate_matrix_var(tape: &mut Tape, rates: Var, pi: Var) -> Result<Var> {
    if tape.shape(rates) != (1, 6) || tape.shape(pi) != (1, 4) {
        return Err(Error::Shape { op: "rate_matrix", lhs: tape.shape(rates), rhs: tape.shape(pi) });
    }
    let rv: [f64; 6] = std::array::from_fn(|k| tape.value(rates).as_slice()[k]);
    let pv: [f64; 4] = std::array::from_fn(|k| tape.value(pi).as_slice()[k]);
    if let Some(&bad) = rv.iter().chain(&pv).find(|&&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::Domain { op: "rate_matrix", value: bad });
    }
    let q = super::normalized_rate_matrix(&rv, &pv);
    Ok(tape.custom(&[rates, pi], from_mat4(&q), RateMatrixOp))
}

struct TransitionOp {
    u: Mat4,
    u_inv: Mat4,
    eigenvalues: [f64; 4],
}

/// Divided difference of `exp` at `x` and `y`, factored around the larger
/// argument so long branches cannot produce `0 · ∞`.
pub(crate) fn exp_divided_difference(x: f64, y: f64) -> f64 {
    let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
    let d = hi - lo;
    if d < 1e-12 {
        (0.5 * (x + y)).exp()
    } else {
        hi.exp() * -(-d).exp_m1() / d
    }
}

impl CustomOp for TransitionOp {
    fn name(&self) -> &'static str {
        "transition_matrices"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let q = to_mat4(inputs[0]);
        let branches = inputs[1].as_slice();
        let u_t = transpose4(&self.u);
        let u_inv_t = transpose4(&self.u_inv);
        let mut q_bar = [[0.0; 4]; 4];
        let mut b_bar = vec![0.0; branches.len()];
        for (m, &b) in branches.iter().enumerate() {
            let p_bar: Mat4 = std::array::from_fn(|i| std::array::from_fn(|j| grad.get(4 * m + i, j)));
            let mu: [f64; 4] = std::array::from_fn(|k| self.eigenvalues[k] * b);
            let mut inner = matmul4(&matmul4(&u_t, &p_bar), &u_inv_t);
            for i in 0..4 {
                for j in 0..4 {
                    inner[i][j] *= exp_divided_difference(mu[i], mu[j]);
                }
            }
            // adjoint with respect to A = bQ
            let a_bar = matmul4(&matmul4(&u_inv_t, &inner), &u_t);
            let mut dot = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    q_bar[i][j] += b * a_bar[i][j];
                    dot += a_bar[i][j] * q[i][j];
                }
            }
            b_bar[m] = dot;
        }
        vec![Some(from_mat4(&q_bar)), Some(Tensor::new(1, branches.len(), b_bar))]
    }
}

/// Transition matrices `exp(b_m Q)` for a 1×M row of branch lengths, stacked
/// into a 4M×4 matrix (rows `4m..4m+4` hold P(b_m)).
///
/// `pi` must be the stationary distribution of `Q`; it is used only to
/// symmetrize the eigenproblem and is not differentiated through.
pub fn transition_matrices_var(tape: &mut Tape, q: Var, pi: &[f64; 4], branches: Var) -> Result<Var> {
    if tape.shape(q) != (4, 4) || tape.shape(branches).0 != 1 {
        return Err(Error::Shape { op: "transition_matrices", lhs: tape.shape(q), rhs: tape.shape(branches) });
    }
    let qv = to_mat4(tape.value(q));
    let d = spectral_decompose(&qv, pi)?;
    let bv = tape.value(branches).as_slice().to_vec();
    let mut out = Tensor::zeros(4 * bv.len(), 4);
    for (m, &b) in bv.iter().enumerate() {
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::Domain { op: "transition_matrices", value: b });
        }
        let p = exp_from_decomposition(&d, b);
        for i in 0..4 {
            for j in 0..4 {
                out.set(4 * m + i, j, p[i][j]);
            }
        }
    }
    let rule = TransitionOp { u: d.u, u_inv: d.u_inv, eigenvalues: d.eigenvalues };
    Ok(tape.custom(&[q, branches], out, rule))
}
