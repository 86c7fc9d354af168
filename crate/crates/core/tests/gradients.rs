use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stochnorm::testkit::{network_cases, op_cases, project};
use stochnorm::{Tape, Tensor};

const INSTANCES: usize = 20;
const TOL: f64 = 1e-5;

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = vec![];
    for case in op_cases() {
        let err = case.worst_error(INSTANCES, &mut rng);
        if !(err < TOL) {
            failures.push((case.name, err));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn network_objectives_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in network_cases() {
        let err = case.worst_error(INSTANCES, &mut rng);
        assert!(err < TOL, "{}: {err:e}", case.name);
    }
}

#[test]
fn reused_tensor_accumulates_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    // f = Σ x·x + Σ x  ⇒  ∂f/∂x = 2x + 1
    let loss = x.mul(x).unwrap().add(x).unwrap().sum();
    let g = tape.backward(loss).unwrap().wrt(x);
    assert_eq!(g.data(), &[3.0, -3.0, 7.0]);
}

#[test]
fn composite_variance_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let x = Tensor::randn(&[7], &mut rng);
        // f(x) = mean((x − mean(x))²)
        let errs = stochnorm::testkit::gradcheck(&[x], |_, v| {
            let col = v[0].reshape(&[7, 1]).unwrap();
            let centered = col.channel_sub(v[0].mean().reshape(&[1]).unwrap()).unwrap();
            centered.square().mean()
        });
        assert!(errs[0] < TOL, "{errs:?}");
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[2, 2, 5, 5], &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], &mut rng);
    let run = || {
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(&x), tape.leaf(&w));
        let loss = project(xv.conv2d(wv, 2, 1).unwrap().leaky_relu(0.01));
        let g = tape.backward(loss).unwrap();
        (loss.item(), g.wrt(xv), g.wrt(wv))
    };
    assert_eq!(run(), run());
}
