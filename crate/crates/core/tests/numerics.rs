mod common;

use proptest::prelude::*;
use shadoc::numerics::{Tape, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, err) in common::primitive_checks() {
        assert!(err < 1e-4, "{name}: relative gradient error {err:e}");
    }
}

#[test]
fn sum_of_squares_gradient_is_twice_input() {
    let x = common::random_tensor(&[7], 3, -2.0, 2.0);
    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let sq = tape.mul(v, v).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward(l).unwrap().wrt(&tape, v);
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert_eq!(*gi, 2.0 * xi);
    }
}

#[test]
fn identity_kernel_is_bitwise_identity() {
    let x = common::random_tensor(&[3, 9, 11], 8, -5.0, 5.0);
    let mut k = vec![0.0; 3 * 3 * 9];
    for c in 0..3 {
        k[(c * 3 + c) * 9 + 4] = 1.0;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(Tensor::new([3, 3, 3, 3], k).unwrap());
    let y = tape.conv2d(xv, kv, None, 1, 1).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn backward_twice_is_identical() {
    let a = common::random_tensor(&[4, 6], 1, -1.0, 1.0);
    let b = common::random_tensor(&[6, 3], 2, -1.0, 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.variable(a), tape.variable(b));
    let m = tape.matmul(va, vb).unwrap();
    let s = tape.softmax(m, 1).unwrap();
    let l = common::project(&mut tape, s, 5).unwrap();
    let g1 = tape.backward(l).unwrap();
    let g2 = tape.backward(l).unwrap();
    assert_eq!(g1.wrt(&tape, va), g2.wrt(&tape, va));
    assert_eq!(g1.wrt(&tape, vb), g2.wrt(&tape, vb));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..6,
        cols in 1usize..9,
        seed in any::<u64>(),
        spread in 0.1f64..10.0,
    ) {
        let x = common::random_tensor(&[rows, cols], seed, -spread, spread);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v, 1).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            if cols > 1 {
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(seed in any::<u64>(), c in -50.0f64..50.0) {
        let x = common::random_tensor(&[2, 5], seed, -3.0, 3.0);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let shifted = tape.add_scalar(v, c).unwrap();
        let a = tape.softmax(v, 1).unwrap();
        let b = tape.softmax(shifted, 1).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
