use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stochnorm::{Precision, Tape, Tensor};

#[test]
fn one_by_one_conv_is_a_matmul_over_pixels() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(&[1, 3, 4, 5], &mut rng);
    let w = Tensor::randn(&[2, 3, 1, 1], &mut rng);
    let tape = Tape::new();
    let y = tape.constant(&x).conv2d(tape.constant(&w), 1, 0).unwrap().to_tensor();
    // [2,3] · [3, 20] → [2, 20]
    let wm = tape.constant(&w.clone().reshape(&[2, 3]).unwrap());
    let xm = tape.constant(&x.clone().reshape(&[3, 20]).unwrap());
    let expect = wm.matmul(xm).unwrap().to_tensor();
    assert!(y.reshape(&[2, 20]).unwrap().max_abs_diff(&expect) < 1e-12);
}

#[test]
fn conv_output_size_arithmetic() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[1, 1, 4, 4]));
    let w = tape.constant(&Tensor::zeros(&[1, 1, 3, 3]));
    assert_eq!(x.conv2d(w, 2, 1).unwrap().shape(), vec![1, 1, 2, 2]);
}

#[test]
fn shape_errors_are_reported() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(a.matmul(b).is_err());
    let x = tape.constant(&Tensor::zeros(&[1, 2, 4, 4]));
    let w = tape.constant(&Tensor::zeros(&[1, 3, 3, 3]));
    assert!(x.conv2d(w, 1, 0).is_err());
    assert!(x.reduce_var(&[]).is_err());
}

#[test]
fn tape_is_consumed_by_one_backward_pass() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1.0]));
    let loss = x.square().sum();
    tape.backward(loss).unwrap();
    assert!(tape.backward(loss).is_err());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
    assert!(tape.backward(x.square()).is_err());
}

#[test]
fn single_precision_rounds_every_value() {
    let tape = Tape::with_precision(Precision::F32);
    let x = tape.leaf(&Tensor::from_vec(vec![0.1]));
    let y = x.scale(3.0);
    let v = y.value()[0];
    assert_eq!(v, v as f32 as f64);
    assert_ne!(v, 0.1 * 3.0);
}

fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #[test]
    fn log_softmax_rows_are_distributions(data in finite_vec(12)) {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![3, 4], data).unwrap());
        let lp = x.log_softmax().unwrap().to_tensor();
        for row in lp.data().chunks(4) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v <= 0.0));
        }
    }

    #[test]
    fn variance_is_non_negative_and_shift_invariant(data in finite_vec(24), shift in -10.0f64..10.0) {
        let tape = Tape::new();
        let x = Tensor::new(vec![2, 3, 4], data).unwrap();
        let v = tape.constant(&x).reduce_var(&[0, 2]).unwrap().to_tensor();
        let vs = tape.constant(&x.map(|a| a + shift)).reduce_var(&[0, 2]).unwrap().to_tensor();
        prop_assert!(v.data().iter().all(|a| *a >= 0.0));
        prop_assert!(v.max_abs_diff(&vs) < 1e-9);
    }

    #[test]
    fn leaky_relu_is_identity_on_non_negative(data in prop::collection::vec(0.0f64..100.0, 8)) {
        let tape = Tape::new();
        let t = Tensor::from_vec(data);
        let y = tape.constant(&t).leaky_relu(0.01).to_tensor();
        prop_assert_eq!(y, t);
    }

    #[test]
    fn matmul_is_associative(a in finite_vec(6), b in finite_vec(6), c in finite_vec(4)) {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::new(vec![2, 3], a).unwrap());
        let b = tape.constant(&Tensor::new(vec![3, 2], b).unwrap());
        let c = tape.constant(&Tensor::new(vec![2, 2], c).unwrap());
        let l = a.matmul(b).unwrap().matmul(c).unwrap().to_tensor();
        let r = a.matmul(b.matmul(c).unwrap()).unwrap().to_tensor();
        prop_assert!(l.max_abs_diff(&r) < 1e-6 * (1.0 + l.norm()));
    }
}
