use ndgrad::{check_gradient, Graph, NdError, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Finite differences of `log_sigmoid(w·x)` written out by hand, independent
/// of `check_gradient`.
#[test]
fn log_sigmoid_dot_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let w = randn(&mut rng, &[1, 5]).with_grad();
        let x = randn(&mut rng, &[5, 1]);
        let mut g = Graph::new();
        let (wv, xv) = (g.param(&w), g.param(&x));
        let z = g.matmul(wv, xv).unwrap();
        let y = g.log_sigmoid(z);
        g.backward(y).unwrap();
        let analytic = g.grad(wv).unwrap().to_vec();

        let f = |wd: &[f64]| {
            let z: f64 = wd.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            -(1.0 + (-z).exp()).ln()
        };
        let h = 1e-5;
        for j in 0..5 {
            let mut up = w.data().to_vec();
            let mut dn = w.data().to_vec();
            up[j] += h;
            dn[j] -= h;
            let numeric = (f(&up) - f(&dn)) / (2.0 * h);
            let rel = (analytic[j] - numeric).abs() / (analytic[j].abs() + numeric.abs()).max(1e-8);
            assert!(rel <= 1e-6, "coord {j}: {} vs {numeric}", analytic[j]);
        }
    }
}

#[test]
fn quadratic_loss_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randn(&mut rng, &[3, 4]);
    let err = check_gradient(
        |g, p| {
            let s = g.square(p[0]);
            Ok(g.sum(s))
        },
        &[a],
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn constant_loss_has_zero_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&mut rng, &[2, 2]);
    let err = check_gradient(
        |g, p| {
            let z = g.scale(p[0], 0.0);
            let s = g.sum(z);
            Ok(g.add_scalar(s, 3.0))
        },
        &[a],
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn non_finite_loss_is_reported() {
    let a = Tensor::new(vec![1], vec![-1.0]).unwrap();
    let err = check_gradient(
        |g, p| {
            let l = g.log(p[0]);
            Ok(g.sum(l))
        },
        &[a],
        1e-5,
    )
    .unwrap_err();
    assert!(matches!(err, NdError::NonFinite(_)));
}

fn two_layer_mse(g: &mut Graph<'_>, p: &[Var], x: &Tensor, y: &Tensor) -> Result<Var> {
    let xv = g.input(x.clone());
    let yv = g.input(y.clone());
    let h = g.matmul(xv, p[0])?;
    let h = g.add_row(h, p[1])?;
    let h = g.tanh(h);
    let o = g.matmul(h, p[2])?;
    let o = g.add_row(o, p[3])?;
    let d = g.sub(o, yv)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

#[test]
fn two_layer_tanh_mse() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[6, 3]);
        let y = randn(&mut rng, &[6, 2]);
        let params = vec![
            randn(&mut rng, &[3, 5]),
            randn(&mut rng, &[5]),
            randn(&mut rng, &[5, 2]),
            randn(&mut rng, &[2]),
        ];
        let err = check_gradient(|g, p| two_layer_mse(g, p, &x, &y), &params, 1e-5).unwrap();
        assert!(err <= 1e-5, "seed {seed}: {err}");
    }
}

/// Exercises every differentiable op at least once.
fn kitchen_sink(g: &mut Graph<'_>, p: &[Var]) -> Result<Var> {
    let (a, b, gamma, beta, table) = (p[0], p[1], p[2], p[3], p[4]);
    let ab = g.matmul_nt(a, b)?; // [3, 3]
    let sm = g.softmax(ab);
    let lsm = g.log_softmax(ab);
    let picked = g.pick(lsm, &[2, 0, 1])?;
    let ln = g.layer_norm(a, gamma, beta, 1e-5)?; // [3, 4]
    let emb = g.embedding(table, &[1, 0, 1])?; // [3, 4]
    let m = g.mul(ln, emb)?;
    let t = g.transpose(m); // [4, 3]
    let tm = g.matmul(t, sm)?; // [4, 3]
    let sig = g.sigmoid(tm);
    let ls = g.log_sigmoid(tm);
    let c = g.concat(&[sig, ls], 1)?; // [4, 6]
    let c0 = g.concat(&[c, c], 0)?; // [8, 6]
    let sl = g.slice(c0, 1, 2, 3)?; // [8, 3]
    let sl = g.slice(sl, 0, 3, 4)?; // [4, 3]
    let nrm = g.l2_normalize(sl);
    let rows = g.mean_rows(nrm); // [1, 3]
    let cols = g.sum_cols(nrm); // [4, 1]
    let e = g.exp(rows);
    let sp = g.add_scalar(e, 1.0);
    let lg = g.log(sp);
    let th = g.tanh(cols);
    let r = g.relu(th);
    let sq = g.square(r);
    let sub = g.sub(a, ln)?;
    let s1 = g.sum(lg);
    let s2 = g.mean(sq);
    let s3 = g.sum(picked);
    let s4 = g.mean(sub);
    let s12 = g.add(s1, s2)?;
    let s34 = g.add(s3, s4)?;
    let tot = g.add(s12, s34)?;
    let masked = g.add_const(tot, &[0.5])?;
    Ok(g.scale(masked, 0.7))
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let params = vec![
            randn(&mut rng, &[3, 4]),
            randn(&mut rng, &[3, 4]),
            randn(&mut rng, &[4]),
            randn(&mut rng, &[4]),
            randn(&mut rng, &[2, 4]),
        ];
        let err = check_gradient(kitchen_sink, &params, 1e-5).unwrap();
        assert!(err <= 1e-5, "seed {seed}: {err}");
    }
}

#[test]
fn fan_out_sums_path_gradients() {
    // y = tanh(x)·x + exp(x): both paths read x.
    let x = Tensor::new(vec![3], vec![0.2, -0.7, 1.1]).unwrap().with_grad();
    let mut g = Graph::new();
    let xv = g.param(&x);
    let t = g.tanh(xv);
    let f = g.mul(t, xv).unwrap();
    let e = g.exp(xv);
    let y = g.add(f, e).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    for (gx, &v) in g.grad(xv).unwrap().iter().zip(x.data()) {
        let th = v.tanh();
        let want = (1.0 - th * th) * v + th + v.exp();
        assert!((gx - want).abs() < 1e-14);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params: Vec<Tensor> = [&[3usize, 4][..], &[3, 4], &[4], &[4], &[2, 4]]
            .iter()
            .map(|s| randn(&mut rng, s).with_grad())
            .collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = kitchen_sink(&mut g, &vars).unwrap();
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        (g.item(loss).to_bits(), grads.concat().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 4], v).unwrap());
        let y = g.softmax(x);
        for row in g.value(y).chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(v in proptest::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(v[..4].iter().any(|x| x.abs() > 1e-3) && v[4..].iter().any(|x| x.abs() > 1e-3));
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 4], v).unwrap());
        let y = g.l2_normalize(x);
        for row in g.value(y).chunks(4) {
            prop_assert!((row.iter().map(|a| a * a).sum::<f64>().sqrt() - 1.0).abs() <= 1e-12);
        }
    }
}
