use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest relative disagreement between reverse-mode gradients and central
/// finite differences of `f` at `theta`.
///
/// Relative error per component is `|g − n| / max(|g|, |n|, 1e-8)`.
pub fn check_gradients<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(theta), eps)
}

/// [`check_gradients`] over several parameter tensors at once.
pub fn check_gradients_multi<F>(f: F, thetas: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.item(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = thetas.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = thetas.to_vec();
    for (k, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var);
        for i in 0..thetas[k].len() {
            let orig = thetas[k].as_slice()[i];
            work[k].as_mut_slice()[i] = orig + eps;
            let up = eval(&work)?;
            work[k].as_mut_slice()[i] = orig - eps;
            let down = eval(&work)?;
            work[k].as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_slice()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
