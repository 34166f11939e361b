use super::*;
use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data)
}

#[test]
fn product_rule() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.param(Tensor::scalar(4.0));
    let z = tape.mul(x, y).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.get(x).item(), 4.0);
    assert_eq!(g.get(y).item(), 3.0);
}

#[test]
fn ln_gamma_derivative_at_one() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(1.0));
    let y = tape.ln_gamma(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_relative_eq!(g.get(x).item(), -0.577_216, epsilon = 1e-6);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(1, 4));
    let y = tape.softmax(x);
    for &p in tape.value(y).as_slice() {
        assert_relative_eq!(p, 0.25, epsilon = 1e-15);
    }
}

#[test]
fn quadratic_gradient() {
    let mut tape = Tape::new();
    let theta = tape.param(Tensor::row(&[1.0, 2.0]));
    let sq = tape.mul(theta, theta).unwrap();
    let loss = tape.sum(sq);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(theta).as_slice(), &[2.0, 4.0]);
}

#[test]
fn unrelated_leaf_gets_zero() {
    let mut tape = Tape::new();
    let theta = tape.param(Tensor::row(&[1.0, 2.0]));
    let other = tape.param(Tensor::scalar(5.0));
    let loss = tape.exp(other);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(theta).as_slice(), &[0.0, 0.0]);
}

#[test]
fn exp_log_identity() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(5.0));
    let l = tape.log(x).unwrap();
    let e = tape.exp(l);
    let g = tape.backward(e).unwrap();
    assert_relative_eq!(g.get(x).item(), 1.0, epsilon = 1e-14);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::row(&[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss((1, 2)))));
}

#[test]
fn domain_errors_are_explicit() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::row(&[1.0, -2.0]));
    assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
    assert!(matches!(tape.ln_gamma(x), Err(Error::Domain { op: "ln_gamma", .. })));
    assert!(matches!(tape.digamma(x), Err(Error::Domain { op: "digamma", .. })));
    assert!(tape.pow(x, 0.5).is_err());
    let zero = tape.constant(Tensor::scalar(0.0));
    assert!(tape.div(x, zero).is_err());
}

#[test]
fn shape_mismatch_is_reported() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(2, 3));
    let b = tape.param(Tensor::zeros(3, 2));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    let c = tape.param(Tensor::zeros(2, 2));
    assert!(tape.matmul(a, c).is_err());
}

#[test]
fn check_gradients_on_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta = random_tensor(&mut rng, 1, 6, -2.0, 2.0);
    let err = check_gradients(
        |t, x| {
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        },
        &theta,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn check_gradients_on_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let theta = random_tensor(&mut rng, 1, 4, -3.0, 3.0);
        let err = check_gradients(
            |t, x| {
                let ls = t.log_softmax(x);
                t.element(ls, 0, 2)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn check_gradients_on_constant() {
    let theta = Tensor::row(&[0.3, 0.4]);
    let err = check_gradients(|t, _| Ok(t.scalar(7.0)), &theta, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

/// Each unary op, reduced with a random weighting, against finite differences
/// at 100 random in-domain points.
#[test]
fn unary_ops_match_finite_differences() {
    type Unary = fn(&mut Tape, Var) -> Result<Var>;
    let ops: Vec<(&str, Unary, f64, f64)> = vec![
        ("neg", |t, x| Ok(t.neg(x)), -3.0, 3.0),
        ("exp", |t, x| Ok(t.exp(x)), -3.0, 3.0),
        ("log", |t, x| t.log(x), 0.1, 5.0),
        ("pow", |t, x| t.pow(x, 2.7), 0.1, 3.0),
        ("softplus", |t, x| Ok(t.softplus(x)), -5.0, 5.0),
        ("ln_gamma", |t, x| t.ln_gamma(x), 0.05, 30.0),
        ("digamma", |t, x| t.digamma(x), 0.05, 30.0),
        ("softmax", |t, x| Ok(t.softmax(x)), -3.0, 3.0),
        ("log_softmax", |t, x| Ok(t.log_softmax(x)), -3.0, 3.0),
        ("scale", |t, x| Ok(t.scale(x, -1.7)), -3.0, 3.0),
        ("offset", |t, x| Ok(t.offset(x, 0.4)), -3.0, 3.0),
        ("sum_rows", |t, x| Ok(t.sum_rows(x)), -3.0, 3.0),
        ("sum_cols", |t, x| Ok(t.sum_cols(x)), -3.0, 3.0),
        ("reshape", |t, x| t.reshape(x, 4, 2), -3.0, 3.0),
        ("rows", |t, x| t.rows(x, 1, 1), -3.0, 3.0),
        ("cols", |t, x| t.cols(x, 1, 2), -3.0, 3.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (name, op, lo, hi) in ops {
        for _ in 0..100 {
            let theta = random_tensor(&mut rng, 2, 4, lo, hi);
            let weights = random_tensor(&mut rng, 8, 1, 0.5, 1.5);
            let err = check_gradients(
                |t, x| {
                    let y = op(t, x)?;
                    let (r, c) = t.shape(y);
                    let w = t.constant(Tensor::new(r, c, weights.as_slice()[..r * c].to_vec()));
                    let wy = t.mul(y, w)?;
                    Ok(t.sum(wy))
                },
                &theta,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn binary_ops_match_finite_differences() {
    type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;
    let ops: Vec<(&str, Binary, (usize, usize))> = vec![
        ("add", |t, a, b| t.add(a, b), (3, 4)),
        ("sub", |t, a, b| t.sub(a, b), (3, 4)),
        ("mul", |t, a, b| t.mul(a, b), (3, 4)),
        ("div", |t, a, b| t.div(a, b), (3, 4)),
        ("add_row_broadcast", |t, a, b| t.add(a, b), (1, 4)),
        ("mul_scalar_broadcast", |t, a, b| t.mul(a, b), (1, 1)),
        ("div_col_broadcast", |t, a, b| t.div(a, b), (3, 1)),
        ("matmul", |t, a, b| t.matmul(a, b), (4, 2)),
        ("stack", |t, a, b| t.stack(&[a, b]), (3, 2)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (name, op, bshape) in ops {
        for _ in 0..100 {
            let a = random_tensor(&mut rng, 3, 4, -2.0, 2.0);
            // keep divisors away from zero
            let b = random_tensor(&mut rng, bshape.0, bshape.1, 0.5, 2.0);
            let weights = random_tensor(&mut rng, 1, 32, 0.5, 1.5);
            let err = check_gradients_multi(
                |t, v| {
                    let y = op(t, v[0], v[1])?;
                    let (r, c) = t.shape(y);
                    let w = t.constant(Tensor::new(r, c, weights.as_slice()[..r * c].to_vec()));
                    let wy = t.mul(y, w)?;
                    Ok(t.sum(wy))
                },
                &[a, b],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let build = || {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(2, 3, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]));
        let x = tape.constant(Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.matmul(w, x).unwrap();
        let s = tape.softmax(y);
        let l = tape.log(s).unwrap();
        let loss = tape.mean(l);
        tape.backward(loss).unwrap().get(w)
    };
    let a = build();
    let b = build();
    assert_eq!(
        a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn relu_routes_gradient_to_active_units() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::row(&[-1.0, 2.0]));
    let y = tape.relu(x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).as_slice(), &[0.0, 1.0]);
}

#[test]
fn shared_subexpression_accumulates() {
    // f = x*x + x  → f' = 2x + 1
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let xx = tape.mul(x, x).unwrap();
    let f = tape.add(xx, x).unwrap();
    let g = tape.backward(f).unwrap();
    assert_eq!(g.get(x).item(), 7.0);
}
