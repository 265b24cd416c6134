use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn mm(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(a), tape.leaf(b));
    let out = tape.matmul(va, vb)?;
    Ok(tape.to_tensor(out))
}

#[test]
fn matmul_identity_and_hand_product() {
    let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(mm(&Tensor::identity(2), &x).unwrap(), x);
    let y = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    assert_eq!(mm(&x, &y).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    assert_eq!(
        mm(&Tensor::zeros(&[2, 2]), &x).unwrap(),
        Tensor::zeros(&[2, 2])
    );
}

#[test]
fn matmul_broadcasts_plain_matrix_over_batch() {
    let a = Tensor::identity(2);
    let b = t(&[3, 2, 1], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let out = mm(&a, &b).unwrap();
    assert_eq!(out.shape(), &[3, 2, 1]);
    assert_eq!(out.data(), b.data());
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = mm(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert_eq!(err.code(), "E_SHAPE");
    assert!(mm(&Tensor::zeros(&[2, 2, 2]), &Tensor::zeros(&[3, 2, 2])).is_err());
}

#[test]
fn activation_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&t(&[3], &[0.0, -2.0, 0.0]));
    let th = tape.tanh(x);
    assert_eq!(tape.value(th)[0], 0.0);
    let lr = tape.leaky_relu(x, 0.2).unwrap();
    assert!((tape.value(lr)[1] - -0.4).abs() < 1e-15);
    let sg = tape.sigmoid(x);
    assert_eq!(tape.value(sg)[0], 0.5);
    assert!(tape.leaky_relu(x, 1.5).is_err());
    assert!(tape.leaky_relu(x, 0.0).is_err());
}

#[test]
fn softmax_values_and_stability() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, None).unwrap();
    for &v in tape.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(&t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x, None).unwrap();
    let v = tape.value(y);
    assert!(v.iter().all(|v| v.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

    let ln2 = 2f64.ln();
    let x = tape.constant(&t(&[3], &[ln2, 0.0, 0.0]));
    let y = tape.softmax(x, None).unwrap();
    let v = tape.value(y);
    assert!((v[0] - 0.5).abs() < 1e-15);
    assert!((v[1] - 0.25).abs() < 1e-15);
    assert!((v[2] - 0.25).abs() < 1e-15);
}

#[test]
fn softmax_mask_zeroes_and_rejects_empty_slices() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(&t(&[2, 3], &[1.0, 5.0, 2.0, 0.0, 0.0, 0.0]));
    let mask = [true, false, true, false, true, true];
    let y = tape.softmax(x, Some(&mask)).unwrap();
    let v = tape.value(y);
    assert_eq!(v[1], 0.0);
    assert_eq!(v[3], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    assert!((v[4] - 0.5).abs() < 1e-15);

    // A suffix-shaped mask broadcasts over leading axes.
    let y = tape.softmax(x, Some(&[true, true, false])).unwrap();
    assert_eq!(tape.value(y)[2], 0.0);
    assert_eq!(tape.value(y)[5], 0.0);

    let err = tape.softmax(x, Some(&[false, false, false])).unwrap_err();
    assert!(matches!(err, Error::DegenerateSlice { slice: 0 }));
}

#[test]
fn concat_last_axis_cases() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&t(&[2], &[1.0, 2.0]));
    let b = tape.constant(&t(&[1], &[3.0]));
    let c = tape.concat_last(a, b).unwrap();
    assert_eq!(tape.value(c), &[1.0, 2.0, 3.0]);

    let a = tape.constant(&Tensor::zeros(&[2, 3, 512]));
    let b = tape.constant(&Tensor::zeros(&[2, 3, 256]));
    let c = tape.concat_last(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 768]);

    let x = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let empty = tape.constant(&Tensor::zeros(&[2, 0]));
    let c = tape.concat_last(x, empty).unwrap();
    assert_eq!(tape.to_tensor(c), t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));

    let bad = tape.constant(&Tensor::zeros(&[3, 2]));
    assert_eq!(tape.concat_last(x, bad).unwrap_err().code(), "E_SHAPE");
}

#[test]
fn narrow_inverts_concat() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let a = tape.constant(&random(&[2, 3, 4], &mut rng));
    let b = tape.constant(&random(&[2, 3, 5], &mut rng));
    let c = tape.concat_last(a, b).unwrap();
    let a2 = tape.narrow(c, 2, 0, 4).unwrap();
    let b2 = tape.narrow(c, 2, 4, 5).unwrap();
    assert_eq!(tape.value(a2), tape.value(a));
    assert_eq!(tape.value(b2), tape.value(b));
    assert!(tape.narrow(c, 2, 5, 5).is_err());
}

#[test]
fn backward_simple_rules() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]).tracked());
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);

    // fan-out: d/dx [x + x] = 2
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::scalar(0.7).tracked());
    let y = tape.add(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&Tensor::<f64>::zeros(&[2]).tracked());
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[1.0, 2.0]).tracked());
    let c = tape.constant(&t(&[2], &[3.0, 4.0]));
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn replayed_backward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let w = tape.leaf(&random(&[4, 3], &mut rng).tracked());
    let x = tape.constant(&random(&[5, 4], &mut rng));
    let h = tape.matmul(x, w).unwrap();
    let h = tape.tanh(h);
    let p = tape.softmax(h, None).unwrap();
    let l = tape.cross_entropy(p, &[0, 1, 2, 0, 1]).unwrap();
    tape.backward(l).unwrap();
    let first = tape.grad(w).unwrap().to_vec();
    tape.backward(l).unwrap();
    assert_eq!(first, tape.grad(w).unwrap());
}

#[test]
fn tensor_grad_accumulates_until_zeroed() {
    let mut w = t(&[2], &[1.0, 2.0]).tracked();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(&w);
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        tape.write_grad(v, &mut w).unwrap();
    }
    assert_eq!(w.grad().unwrap(), &[2.0, 2.0]);
    w.zero_grad();
    assert!(w.grad().is_none());
}

#[test]
fn cross_entropy_uniform_logits_is_log_classes() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(&Tensor::zeros(&[4, 13]));
    let l = tape.cross_entropy(z, &[0, 3, 12, 7]).unwrap();
    assert!((tape.item(l) - 13f64.ln()).abs() < 1e-12);
    assert!(tape.cross_entropy(z, &[0, 13, 0, 0]).is_err());
}

#[test]
fn straight_through_forwards_hard_and_routes_soft_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(&t(&[2], &[0.3, 0.7]).tracked());
    let s = tape.scale(x, 2.0);
    let st = tape.straight_through(s, vec![0.0, 1.0]).unwrap();
    assert_eq!(tape.value(st), &[0.0, 1.0]);
    let w = tape.constant(&t(&[2], &[5.0, -1.0]));
    let y = tape.mul(st, w).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[10.0, -2.0]);
}

// ---- finite-difference checks of each primitive -------------------------

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn check(shape: &[usize], seed: u64, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(shape, &mut rng);
    let err = finite_difference_check(f, &x, STEP).unwrap();
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn fd_sum_and_quadratic() {
    let x = t(&[3], &[0.1, 0.2, 0.3]);
    let err = finite_difference_check(|tp, v| Ok(tp.sum(v)), &x, STEP).unwrap();
    assert!(err < 1e-9);
    let x = t(&[1], &[3.0]);
    let err = finite_difference_check(
        |tp, v| {
            let sq = tp.mul(v, v)?;
            Ok(tp.sum(sq))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn fd_tanh_of_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[3, 2], &mut rng);
    check(&[4, 3], 6, move |tp, w| {
        let xv = tp.constant(&x);
        let h = tp.matmul(w, xv)?;
        let h = tp.tanh(h);
        Ok(tp.sum(h))
    });
}

#[test]
fn fd_matmul_both_operands_batched_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let b = random(&[2, 3, 4], &mut rng);
    check(&[3, 3], 8, move |tp, a| {
        let bv = tp.constant(&b);
        let y = tp.matmul(a, bv)?;
        let y = tp.tanh(y);
        Ok(tp.sum(y))
    });
    let a = random(&[2, 5, 3], &mut rng);
    check(&[2, 3, 4], 9, move |tp, bv| {
        let av = tp.constant(&a);
        let y = tp.matmul(av, bv)?;
        let q = tp.mul(y, y)?;
        Ok(tp.mean(q))
    });
}

#[test]
fn fd_sigmoid_leaky_bias() {
    check(&[3, 4], 10, |tp, x| {
        let y = tp.sigmoid(x);
        let y = tp.mul(y, x)?;
        Ok(tp.sum(y))
    });
    // keep leaky_relu inputs at least 1e-3 away from the kink
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_fn(&[10], |_| {
        let v: f64 = rng.gen_range(1e-3..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    });
    let err = finite_difference_check(
        |tp, v| {
            let y = tp.leaky_relu(v, 0.2)?;
            let y = tp.mul(y, y)?;
            Ok(tp.sum(y))
        },
        &x,
        STEP,
    )
    .unwrap();
    assert!(err < TOL);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let bias = random(&[4], &mut rng);
    check(&[2, 3, 4], 14, move |tp, x| {
        let b = tp.constant(&bias);
        let y = tp.add_bias(x, b)?;
        let y = tp.tanh(y);
        Ok(tp.sum(y))
    });
    check(&[4], 15, |tp, b| {
        let x = tp.constant(&Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin()));
        let y = tp.add_bias(x, b)?;
        let y = tp.tanh(y);
        Ok(tp.sum(y))
    });
}

#[test]
fn fd_masked_softmax() {
    let mask = [true, false, true, true, true, false, true, true, true];
    let weights = Tensor::from_fn(&[2, 3, 3], |i| (i as f64).cos());
    check(&[2, 3, 3], 16, move |tp, x| {
        let y = tp.softmax(x, Some(&mask))?;
        let w = tp.constant(&weights);
        let y = tp.mul(y, w)?;
        Ok(tp.sum(y))
    });
}

#[test]
fn fd_structural_ops() {
    let w = Tensor::from_fn(&[2, 7], |i| (i as f64 * 0.3).sin());
    check(&[2, 3], 17, move |tp, x| {
        let c = tp.constant(&Tensor::from_fn(&[2, 4], |i| i as f64 * 0.1));
        let y = tp.concat_last(x, c)?;
        let y = tp.concat(&[y, x], 1)?;
        let y = tp.narrow(y, 1, 1, 7)?;
        let wv = tp.constant(&w);
        let y = tp.mul(y, wv)?;
        let y = tp.tanh(y);
        Ok(tp.sum(y))
    });
    check(&[2, 3, 4], 18, |tp, x| {
        let y = tp.transpose(x)?;
        let y = tp.reshape(y, &[6, 4])?;
        let z = tp.narrow(y, 0, 0, 4)?;
        let q = tp.matmul(y, z)?;
        let q = tp.tanh(q);
        Ok(tp.sum(q))
    });
    check(&[2, 3], 19, |tp, x| {
        let y = tp.scale(x, 0.5);
        let p = tp.pairwise_sum(x, y)?;
        let p = tp.tanh(p);
        let q = tp.sub(p, p)?;
        let r = tp.add(p, q)?;
        let s = tp.mul(r, r)?;
        Ok(tp.sum(s))
    });
}

#[test]
fn fd_cross_entropy() {
    check(&[5, 4], 20, |tp, x| tp.cross_entropy(x, &[0, 3, 1, 1, 2]));
}

#[test]
fn fd_rejects_non_positive_step() {
    let x = t(&[1], &[1.0]);
    assert!(finite_difference_check(|tp, v| Ok(tp.sum(v)), &x, 0.0).is_err());
}

#[test]
fn fd_reports_non_finite_objective() {
    let x = t(&[1], &[1.0]);
    let err = finite_difference_check(
        |tp, v| {
            let big = tp.scale(v, f64::INFINITY);
            Ok(tp.sum(big))
        },
        &x,
        STEP,
    );
    assert!(matches!(err, Err(Error::NonFinite(_))));
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(
        vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
        width in 1usize..8,
    ) {
        let rows = vals.len() / width;
        prop_assume!(rows > 0);
        let x = Tensor::new(vec![rows, width], vals[..rows * width].to_vec()).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let y = tape.softmax(v, None).unwrap();
        for row in tape.value(y).chunks(width) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let err = finite_difference_check(
            |tp, v| {
                let wv = tp.constant(&w);
                let h = tp.matmul(v, wv)?;
                let h = tp.sigmoid(h);
                let p = tp.softmax(h, None)?;
                tp.cross_entropy(p, &[0, 1, 0])
            },
            &x,
            STEP,
        )
        .unwrap();
        prop_assert!(err < TOL);
    }
}
