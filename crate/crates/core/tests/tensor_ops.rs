use avprompt::tensor::{fd_check, primitive_suite, Tape, Tensor};
use avprompt::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

fn naive_matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a[i * q + k] * b[k * r + j];
            }
            c[i * r + j] = s;
        }
    }
    c
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::new();
    let i2 = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let m = tape.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let out = tape.matmul(p, m).unwrap();
    assert_eq!(tape.value(out), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_tensor(&[3, 4], &mut rng);
    let b = rand_tensor(&[4, 2], &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(&a), tape.constant(&b));
    let c = tape.matmul(av, bv).unwrap();
    let oracle = naive_matmul(a.data(), b.data(), 3, 4, 2);
    assert_eq!(tape.shape(c), &[3, 2]);
    for (x, y) in tape.value(c).iter().zip(&oracle) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn batched_matmul_matches_per_batch_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_tensor(&[2, 3, 5, 4], &mut rng);
    let b = rand_tensor(&[2, 3, 4, 6], &mut rng);
    let shared = rand_tensor(&[4, 6], &mut rng);
    let mut tape = Tape::new();
    let (av, bv, sv) = (tape.constant(&a), tape.constant(&b), tape.constant(&shared));
    let c = tape.matmul(av, bv).unwrap();
    let cs = tape.matmul(av, sv).unwrap();
    assert_eq!(tape.shape(c), &[2, 3, 5, 6]);
    assert_eq!(tape.shape(cs), &[2, 3, 5, 6]);
    for n in 0..6 {
        let oracle = naive_matmul(
            &a.data()[n * 20..(n + 1) * 20],
            &b.data()[n * 24..(n + 1) * 24],
            5,
            4,
            6,
        );
        let shared_oracle = naive_matmul(&a.data()[n * 20..(n + 1) * 20], shared.data(), 5, 4, 6);
        for j in 0..30 {
            assert!((tape.value(c)[n * 30 + j] - oracle[j]).abs() < 1e-12);
            assert!((tape.value(cs)[n * 30 + j] - shared_oracle[j]).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[3, 4]));
    let b = tape.constant(&Tensor::zeros(&[5, 2]));
    match tape.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![3, 4]);
            assert_eq!(rhs, vec![5, 2]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[3, 4]") && msg.contains("[5, 2]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(&t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for v in tape.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(&t(&[2], &[1000.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y)[0], 1.0);
    assert!(tape.value(y)[1] >= 0.0 && tape.value(y)[1] < 1e-300);

    // 40-digit reference values.
    let x = tape.constant(&t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    let reference = [
        0.090_030_573_170_380_457_998_022_1,
        0.244_728_471_054_797_652_472_959_6,
        0.665_240_955_774_821_889_529_018_3,
    ];
    for (v, r) in tape.value(y).iter().zip(reference) {
        assert!((v - r).abs() < 1e-12);
    }
}

#[test]
fn layernorm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(&Tensor::ones(&[2]));
    let b = tape.constant(&Tensor::zeros(&[2]));
    let x = tape.constant(&t(&[1, 2], &[3.0, 3.0]));
    let y = tape.layernorm(x, g, b, 1e-8).unwrap();
    assert_eq!(tape.value(y), &[0.0, 0.0]);

    let x = tape.constant(&t(&[1, 2], &[1.0, -1.0]));
    let y = tape.layernorm(x, g, b, 0.0).unwrap();
    assert_eq!(tape.value(y), &[1.0, -1.0]);
    let y = tape.layernorm(x, g, b, 1e-8).unwrap();
    assert!((tape.value(y)[0] - 1.0).abs() < 1e-8);
}

#[test]
fn layernorm_and_gelu_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[4, 6], &mut rng);
    let gain = rand_tensor(&[6], &mut rng);
    let bias = rand_tensor(&[6], &mut rng);
    let w = rand_tensor(&[4, 6], &mut rng);
    let err = fd_check(
        |tape, xv| {
            let g = tape.constant(&gain);
            let b = tape.constant(&bias);
            let y = tape.layernorm(xv, g, b, 1e-8)?;
            let wv = tape.constant(&w);
            let yw = tape.mul(y, wv)?;
            Ok(tape.sum(yw))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "layernorm rel err {err}");

    let err = fd_check(
        |tape, xv| {
            let y = tape.gelu(xv);
            Ok(tape.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "gelu rel err {err}");
}

#[test]
fn concat_slice_round_trip_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&[2, 3, 4], &mut rng);
    let b = rand_tensor(&[2, 5, 4], &mut rng);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(&a), tape.constant(&b));
    let c = tape.concat(&[av, bv], 1).unwrap();
    assert_eq!(tape.shape(c), &[2, 8, 4]);
    let a2 = tape.slice(c, 1, 0, 3).unwrap();
    let b2 = tape.slice(c, 1, 3, 5).unwrap();
    assert_eq!(tape.to_tensor(a2), a);
    assert_eq!(tape.to_tensor(b2), b);

    let bad = tape.constant(&Tensor::zeros(&[2, 3, 5]));
    assert!(matches!(tape.concat(&[av, bad], 1), Err(Error::Dimension { .. })));

    let row = [0.25, -1.5, 3.0];
    let rows = tape.constant(&Tensor::from_fn(&[5, 3], |i| row[i % 3]));
    let m = tape.mean(rows, 0).unwrap();
    assert_eq!(tape.value(m), &row);
}

#[test]
fn fd_check_trivial_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[3, 4], &mut rng);
    let err = fd_check(|tape, xv| Ok(tape.sum(xv)), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
    let err = fd_check(
        |tape, xv| {
            let sq = tape.mul(xv, xv)?;
            Ok(tape.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn every_primitive_passes_gradcheck() {
    for seed in 0..3 {
        for (name, err) in primitive_suite(1e-5, seed).unwrap() {
            assert!(err < 1e-6, "{name}: {err} (seed {seed})");
        }
    }
}

#[test]
fn shared_leaf_gradients_sum() {
    let x = Tensor::from_fn(&[4], |i| i as f64).param();
    let mut tape = Tape::new();
    let xv = tape.param(&x, avprompt::ParamId(0));
    let s1 = tape.sum(xv);
    let s2 = tape.sum(xv);
    let loss = tape.add(s1, s2).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.param(avprompt::ParamId(0)).unwrap(), &[2.0; 4]);
}

#[test]
fn frozen_leaves_are_untouched_by_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let frozen = rand_tensor(&[3, 3], &mut rng);
    let before: Vec<u64> = frozen.data().iter().map(|v| v.to_bits()).collect();
    let p = rand_tensor(&[3, 3], &mut rng).param();
    let mut tape = Tape::new();
    let f = tape.param(&frozen, avprompt::ParamId(0));
    let pv = tape.param(&p, avprompt::ParamId(1));
    let y = tape.matmul(f, pv).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.param(avprompt::ParamId(0)).is_none());
    assert!(grads.param(avprompt::ParamId(1)).is_some());
    let after: Vec<u64> = frozen.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
}

#[test]
fn backward_requires_scalar() {
    let p = Tensor::ones(&[2]).param();
    let mut tape = Tape::new();
    let v = tape.param(&p, avprompt::ParamId(0));
    assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in proptest::collection::vec(-1e4f64..1e4, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[3, 4], data).unwrap());
        for axis in 0..2 {
            let y = tape.softmax(x, axis).unwrap();
            let v = tape.value(y);
            prop_assert!(v.iter().all(|p| p.is_finite()));
            if axis == 1 {
                for row in v.chunks(4) {
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            } else {
                for col in 0..4 {
                    let s: f64 = (0..3).map(|r| v[r * 4 + col]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
