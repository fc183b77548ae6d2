use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::TdenError;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn eval1(t: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.constant(t.clone());
    let y = f(&mut tape, x);
    tape.value(y).clone()
}

fn check(params: &[Tensor], f: impl Fn(&mut Graph) -> crate::Result<Var>) -> f64 {
    grad_check(f, params, &GradCheckConfig::default())
        .unwrap()
        .max_rel_error
}

#[test]
fn matmul_identity_and_hand_case() {
    let x = random(&[3, 4], 1);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(3));
    let xv = tape.constant(x.clone());
    let y = tape.matmul(i, xv).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let a = tape.constant(Tensor::from_rows(&[vec![1., 2.], vec![3., 4.]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![1.], vec![1.]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[3., 7.]);
}

#[test]
fn matmul_matches_triple_loop() {
    let a = random(&[5, 4], 2);
    let b = random(&[4, 3], 3);
    let mut oracle = [[0.0f64; 3]; 5];
    for (i, row) in oracle.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            for p in 0..4 {
                *cell += a.get(i, p) * b.get(p, j);
            }
        }
    }
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(av, bv).unwrap();
    for i in 0..5 {
        for j in 0..3 {
            assert!((tape.value(c).get(i, j) - oracle[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match &err {
        TdenError::Shape { lhs, rhs, .. } => {
            assert_eq!(lhs, &vec![2, 3]);
            assert_eq!(rhs, &vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3]"));
}

#[test]
fn softmax_examples() {
    let s = |v: Vec<f64>| eval1(&Tensor::new(vec![v.len()], v).unwrap(), |t, x| t.softmax(x, 0).unwrap());
    let u = s(vec![0., 0., 0.]);
    for &p in u.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = s(vec![1000., 0., 0.]);
    assert!(big.is_finite());
    assert!((big.data()[0] - 1.0).abs() < 1e-12);
    // 50-digit reference values
    let r = s(vec![1., 2., 3.]);
    let expected = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953];
    for (a, e) in r.data().iter().zip(expected) {
        assert!((a - e).abs() < 1e-15, "{a} vs {e}");
    }
}

#[test]
fn softmax_non_last_axis() {
    let x = random(&[3, 4], 5);
    let y = eval1(&x, |t, v| t.softmax(v, 0).unwrap());
    for j in 0..4 {
        let s: f64 = (0..3).map(|i| y.get(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_examples() {
    let run = |row: Vec<f64>| {
        let d = row.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, d], row).unwrap());
        let g = tape.constant(Tensor::new(vec![d], vec![1.0; d]).unwrap());
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        tape.value(y).clone()
    };
    assert!(run(vec![2.5; 6]).data().iter().all(|&v| v == 0.0));
    assert_eq!(run(vec![1.0, 3.0]).data(), &[-1.0, 1.0]);

    let x = random(&[1, 9], 11);
    let y = run(x.data().to_vec());
    // scalar reference
    let mean = x.data().iter().sum::<f64>() / 9.0;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
    for (yv, xv) in y.data().iter().zip(x.data()) {
        assert!((yv - (xv - mean) / var.sqrt()).abs() < 1e-12);
    }
    let m = y.data().iter().sum::<f64>() / 9.0;
    let v = y.data().iter().map(|a| (a - m).powi(2)).sum::<f64>() / 9.0;
    assert!(m.abs() < 1e-7);
    assert!((v - 1.0).abs() < 1e-6);
}

fn ce_fixture() -> (Tensor, Vec<usize>) {
    (
        Tensor::from_rows(&[
            vec![0.3, -1.2, 2.1, 0.0, 0.7],
            vec![1.5, 1.4, -0.3, -2.0, 0.25],
            vec![-0.9, 0.1, 0.2, 1.8, -1.1],
        ])
        .unwrap(),
        vec![2, 0, 4],
    )
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let mut row = vec![0.0; 4];
    row[1] = 200.0;
    let l = tape.constant(Tensor::matrix(1, 4, row).unwrap());
    let loss = tape.cross_entropy(l, &[1], None).unwrap();
    assert!(tape.value(loss).item().abs() < 1e-12);

    let u = tape.constant(Tensor::zeros(&[2, 100]));
    let loss = tape.cross_entropy(u, &[3, 97], None).unwrap();
    assert!((tape.value(loss).item() - 100f64.ln()).abs() < 1e-12);

    let (logits, targets) = ce_fixture();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy(l, &targets, None).unwrap();
    assert!((tape.value(loss).item() - 1.5439419736473462979).abs() < 1e-14);
    let wl = tape
        .cross_entropy(l, &targets, Some(&[1.0, 0.0, 1.0]))
        .unwrap();
    assert!((tape.value(wl).item() - 1.8809281198309004031).abs() < 1e-14);

    assert!(matches!(
        tape.cross_entropy(l, &[2, 0, 5], None),
        Err(TdenError::Index { index: 5, bound: 5, .. })
    ));
}

#[test]
fn kl_divergence_examples() {
    let (logits, targets) = ce_fixture();
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());

    let matched = tape.softmax(l, 1).unwrap();
    let matched = tape.value(matched).clone();
    let kl = tape.kl_divergence(l, &matched).unwrap();
    assert!(tape.value(kl).item().abs() < 1e-9);

    let mut onehot = Tensor::zeros(&[3, 5]);
    for (i, &t) in targets.iter().enumerate() {
        onehot.data_mut()[i * 5 + t] = 1.0;
    }
    let kl = tape.kl_divergence(l, &onehot).unwrap();
    let ce = tape.cross_entropy(l, &targets, None).unwrap();
    assert!((tape.value(kl).item() - tape.value(ce).item()).abs() < 1e-14);

    let soft = Tensor::from_rows(&[
        vec![0.1, 0.2, 0.3, 0.25, 0.15],
        vec![0.5, 0.0, 0.25, 0.25, 0.0],
        vec![0.05, 0.05, 0.8, 0.05, 0.05],
    ])
    .unwrap();
    let kl = tape.kl_divergence(l, &soft).unwrap();
    assert!((tape.value(kl).item() - 0.97165477774769821175).abs() < 1e-14);

    let mut neg = soft.clone();
    neg.data_mut()[0] = -0.1;
    neg.data_mut()[1] = 0.4;
    assert!(matches!(tape.kl_divergence(l, &neg), Err(TdenError::Domain(_))));
}

#[test]
fn backward_basic_rules() {
    let x = random(&[2, 3], 4).with_grad();
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let s = tape.sum(xv);
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(xv).unwrap(), &[1.0; 6]);

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let sq = tape.mul(xv, xv).unwrap();
    let s = tape.sum(sq);
    let grads = tape.backward(s).unwrap();
    for (g, v) in grads.get(xv).unwrap().iter().zip(x.data()) {
        assert_eq!(*g, 2.0 * v);
    }

    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = tape.scale(xv, 2.0);
    assert!(matches!(tape.backward(y), Err(TdenError::Contract(_))));
}

#[test]
fn backward_visits_each_node_once() {
    let mut tape = Tape::new();
    let x = tape.leaf(random(&[2, 2], 9).with_grad());
    let c = tape.constant(random(&[2, 2], 10));
    let a = tape.matmul(x, c).unwrap();
    let b = tape.add(a, x).unwrap();
    let t = tape.tanh(b);
    let _unused = tape.gelu(x);
    let l = tape.sum(t);
    let grads = tape.backward(l).unwrap();
    // x, a, b, t, l: the dangling gelu and the constant are skipped
    assert_eq!(grads.visited(), 5);
}

#[test]
fn gradcheck_quadratic_form() {
    let a = random(&[4, 4], 21);
    let x = random(&[4, 1], 22);
    let err = check(&[x], |g| {
        let av = g.constant(a.clone());
        let x = g.param(0);
        let ax = g.matmul(av, x)?;
        let xt = g.transpose(x)?;
        let q = g.matmul(xt, ax)?;
        Ok(g.sum(q))
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn gradcheck_elementwise_and_shape_ops() {
    let p = [random(&[3, 4], 31), random(&[3, 4], 32), random(&[4], 33), random(&[4, 2], 34)];
    let err = check(&p, |g| {
        let (a, b, r, w) = (g.param(0), g.param(1), g.param(2), g.param(3));
        let s = g.add(a, b)?;
        let m = g.mul(s, b)?;
        let ar = g.add_row(m, r)?;
        let ge = g.gelu(ar);
        let th = g.tanh(ge);
        let mm = g.matmul(th, w)?;
        let sc = g.scale(mm, 0.7);
        let tr = g.transpose(sc)?;
        let rs = g.reshape(tr, &[4, 2, 3][1..])?;
        let sm = g.softmax(rs, 0)?;
        let sm2 = g.softmax(sm, 1)?;
        let cat = g.concat_rows(&[sm2, rs])?;
        let ga = g.gather_rows(cat, &[0, 3, 3, 1])?;
        let mr = g.mean_rows(ga)?;
        let re = g.relu(mr);
        let norm = g.l2_normalize_rows(ga)?;
        let a1 = g.mean(norm);
        let a2 = g.sum(re);
        g.add(a1, a2)
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gradcheck_layer_norm() {
    let p = [random(&[3, 6], 41), random(&[6], 42), random(&[6], 43), random(&[3, 6], 44)];
    let err = check(&p, |g| {
        let (x, gain, bias) = (g.param(0), g.param(1), g.param(2));
        let y = g.layer_norm(x, gain, bias, 1e-5)?;
        let w = g.param(3);
        let m = g.mul(y, w)?;
        Ok(g.sum(m))
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gradcheck_attention_with_masks() {
    let p = [random(&[4, 8], 51), random(&[5, 8], 52), random(&[5, 8], 53), random(&[4, 8], 54)];
    let mask = AttnMask::from_fn(4, 5, |i, j| j <= i + 1);
    let err = check(&p, |g| {
        let (q, k, v, w) = (g.param(0), g.param(1), g.param(2), g.param(3));
        let o = g.attention(q, k, v, &mask, 2)?;
        let m = g.mul(o, w)?;
        Ok(g.sum(m))
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn gradcheck_losses() {
    let p = [random(&[3, 5], 61), random(&[4, 4], 62), random(&[2, 3], 63)];
    let soft = Tensor::from_rows(&[
        vec![0.1, 0.2, 0.3, 0.25, 0.15],
        vec![0.5, 0.0, 0.25, 0.25, 0.0],
        vec![0.05, 0.05, 0.8, 0.05, 0.05],
    ])
    .unwrap();
    let bce_t = Tensor::from_rows(&[vec![1.0, 0.0, 0.3], vec![0.0, 1.0, 0.5]]).unwrap();
    let err = check(&p, |g| {
        let (z, s, b) = (g.param(0), g.param(1), g.param(2));
        let ce = g.cross_entropy(z, &[1, 4, 0], Some(&[1.0, 0.5, 2.0]))?;
        let kl = g.kl_divergence(z, &soft)?;
        let rk = g.ranking_hinge(s, 0.2)?;
        let bce = g.bce_with_logits(b, &bce_t)?;
        g.add_all(&[ce, kl, rk, bce])
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn attention_rejects_fully_masked_row() {
    let mut tape = Tape::new();
    let q = tape.constant(random(&[2, 4], 70));
    let mask = AttnMask::from_fn(2, 2, |i, _| i == 0);
    assert!(matches!(
        tape.attention(q, q, q, &mask, 2),
        Err(TdenError::Contract(_))
    ));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let p = [random(&[4, 8], 81), random(&[8, 8], 82)];
        let mut g = Graph::new(&p.map(|t| t.with_grad()));
        let (a, b) = (g.param(0), g.param(1));
        let h = g.matmul(a, b).unwrap();
        let o = g.attention(h, h, h, &AttnMask::causal(4), 4).unwrap();
        let l = g.cross_entropy(o, &[0, 1, 2, 3], None).unwrap();
        g.backward(l).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn ranking_hinge_values() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap());
    let l = tape.ranking_hinge(s, 0.2).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let s = tape.constant(Tensor::from_rows(&[vec![0.3; 3], vec![0.3; 3], vec![0.3; 3]]).unwrap());
    let l = tape.ranking_hinge(s, 0.2).unwrap();
    assert!((tape.value(l).item() - 0.2).abs() < 1e-15);
    let one = tape.constant(Tensor::zeros(&[1, 1]));
    assert!(tape.ranking_hinge(one, 0.2).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1000.0f64..1000.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let t = Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap();
        let y = eval1(&t, |tape, x| tape.softmax(x, 1).unwrap());
        for r in 0..rows {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_against_own_softmax_is_zero(vals in proptest::collection::vec(-5.0f64..5.0, 6)) {
        let t = Tensor::matrix(2, 3, vals).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(t);
        let p = tape.softmax(l, 1).unwrap();
        let p = tape.value(p).clone();
        let kl = tape.kl_divergence(l, &p).unwrap();
        prop_assert!(tape.value(kl).item().abs() < 1e-9);
        prop_assert!(tape.value(kl).item() >= -1e-15);
    }
}
