use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use stochnorm::noise::noisy_normalize;
use stochnorm::optim::{Optimizer, OptimizerConfig};
use stochnorm::variational::{
    bayes_norm_forward, bn_equivalence_map, dropout_equivalence_check, evidence_objective, kl_scale, kl_scale_constant,
    kl_scale_grad, log_sigma_from_u, mc_predict, sample_scale, sigma_from_u, sigma_from_u_deriv, u_from_sigma,
    Granularity, PriorConfig,
};
use stochnorm::{Architecture, ConvSpec, DatasetMoments, ForwardOptions, Network, NoiseMode, NormKind, Tape, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn sigma_parametrization_values_and_smoothness() {
    assert_eq!(sigma_from_u(0.0), 1.0);
    assert!((sigma_from_u(-2f64.ln()) - 0.5).abs() < 1e-15);
    assert_eq!(sigma_from_u(3.0), 4.0);
    // C¹ at the joint
    let h = 1e-7;
    assert!((sigma_from_u(h) - sigma_from_u(-h)).abs() < 3e-7);
    assert!((sigma_from_u_deriv(h) - sigma_from_u_deriv(-h)).abs() < 1e-6);
    for i in -400..=400 {
        let u = i as f64 * 0.05;
        assert!(sigma_from_u(u) > 0.0);
        let dlog = sigma_from_u_deriv(u) / sigma_from_u(u);
        assert!(dlog.abs() <= 1.0 + 1e-15, "u={u}");
        assert!((log_sigma_from_u(u) - sigma_from_u(u).ln()).abs() < 1e-12);
        assert!((u_from_sigma(sigma_from_u(u)) - u).abs() < 1e-9);
    }
    assert!((kl_scale_grad(1.0, 3.0, &PriorConfig::default()).1.abs() - (0.5 - 8.0 / 100.0)).abs() < 1e-12);
}

/// Monte-Carlo estimate of KL(N(s, σ²) ‖ N(1, σ0²)).
fn mc_kl(s: f64, sigma: f64, sigma0: f64, n: usize, r: &mut ChaCha8Rng) -> f64 {
    let q = Normal::new(s, sigma).unwrap();
    let log_n = |x: f64, m: f64, sd: f64| -0.5 * ((x - m) / sd).powi(2) - sd.ln();
    (0..n)
        .map(|_| {
            let x = q.sample(r);
            log_n(x, s, sigma) - log_n(x, 1.0, sigma0)
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn kl_formula_matches_monte_carlo() {
    let prior = PriorConfig::default();
    assert!((kl_scale(1.0, u_from_sigma(1.0), &prior) - 0.01).abs() < 1e-15);
    let mut r = rng(1);
    for (s, sigma) in [(1.0, 0.5), (2.0, 1.0), (0.5, 3.0)] {
        let analytic = 0.5 * kl_scale(s, u_from_sigma(sigma), &prior) + kl_scale_constant(&prior);
        let mc = mc_kl(s, sigma, prior.sigma0, 1_000_000, &mut r);
        assert!((analytic / mc - 1.0).abs() < 0.02, "({s},{sigma}): {analytic} vs {mc}");
    }
}

#[test]
fn kl_is_minimized_at_the_prior_deviation() {
    let prior = PriorConfig::default();
    let f = |sigma: f64| kl_scale(1.0, u_from_sigma(sigma), &prior);
    let h = 1e-5;
    let d = (f(10.0 + h) - f(10.0 - h)) / (2.0 * h);
    assert!(d.abs() < 1e-6);
    assert!(f(9.0) > f(10.0) && f(11.0) > f(10.0));
}

#[test]
fn kl_gradient_in_u_stays_bounded() {
    let prior = PriorConfig::default();
    for i in -2000..=400 {
        let u = i as f64 * 0.01;
        let sigma = sigma_from_u(u);
        let bound = 2.0 + 2.0 * sigma * sigma / 100.0;
        assert!(kl_scale_grad(1.0, u, &prior).1.abs() <= bound + 1e-12, "u={u}");
    }
}

#[test]
fn scale_samples_degenerate_and_average_correctly() {
    let tape = Tape::new();
    let s = tape.constant(&Tensor::from_vec(vec![1.5, -0.5]));
    let u_inf = tape.constant(&Tensor::from_vec(vec![-1e4, -1e4]));
    let draw = sample_scale(s, u_inf, 10, &mut rng(2)).unwrap().to_tensor();
    assert!(draw.data().chunks(2).all(|r| r == [1.5, -0.5]));

    let sigma = 0.3;
    let u = tape.constant(&Tensor::from_vec(vec![u_from_sigma(sigma); 2]));
    let n = 100_000;
    let draw = sample_scale(s, u, n, &mut rng(3)).unwrap().to_tensor();
    let mean0 = draw.data().iter().step_by(2).sum::<f64>() / n as f64;
    assert!((mean0 - 1.5).abs() < 4.0 * sigma / (n as f64).sqrt());
}

#[test]
fn pathwise_gradient_matches_the_analytic_expectation() {
    // E[(S − a)²] = (s − a)² + σ(u)²
    let (s0, u0, a) = (0.8, u_from_sigma(0.6), 2.0);
    let n = 100_000;
    let tape = Tape::new();
    let s = tape.leaf(&Tensor::from_vec(vec![s0]));
    let u = tape.leaf(&Tensor::from_vec(vec![u0]));
    let draws = sample_scale(s, u, n, &mut rng(4)).unwrap();
    let loss = draws.add_scalar(-a).square().mean();
    let g = tape.backward(loss).unwrap();
    let (gs, gu) = (g.wrt(s).item(), g.wrt(u).item());
    let sigma = sigma_from_u(u0);
    let (es, eu) = (2.0 * (s0 - a), 2.0 * sigma * sigma_from_u_deriv(u0));
    assert!((gs / es - 1.0).abs() < 0.01, "{gs} vs {es}");
    assert!((gu / eu - 1.0).abs() < 0.01, "{gu} vs {eu}");
}

#[test]
fn bayes_forward_reduces_to_deterministic_and_noisy_normalization() {
    let mut r = rng(5);
    let z = Tensor::randn(&[3, 2, 4, 4], &mut r);
    let tape = Tape::new();
    let zv = tape.constant(&z);
    let s = tape.constant(&Tensor::from_vec(vec![1.3, 0.7]));
    let b = tape.constant(&Tensor::from_vec(vec![0.2, -0.4]));
    let u_zero = tape.constant(&Tensor::from_vec(vec![-1e4, -1e4]));
    let sampled = sample_scale(s, u_zero, 3, &mut r).unwrap();
    let det = bayes_norm_forward(zv, b, s).unwrap().to_tensor();
    assert_eq!(bayes_norm_forward(zv, b, sampled).unwrap().to_tensor(), det);

    let u = tape.constant(&Tensor::from_vec(vec![u_from_sigma(0.2); 2]));
    let big_s = sample_scale(s, u, 3, &mut r).unwrap();
    let ours = bayes_norm_forward(zv, b, big_s).unwrap().to_tensor();
    // V = 0 and U = S/s applied to z + b, then the mean scale s.
    let ratio: Vec<f64> = big_s
        .value()
        .iter()
        .enumerate()
        .map(|(i, v)| v / s.value()[i % 2])
        .collect();
    let zb = zv.channel_add(b).unwrap();
    let noisy = noisy_normalize(zb, &Tensor::zeros(&[3, 2]), &Tensor::new(vec![3, 2], ratio).unwrap()).unwrap();
    let via_noise = noisy.channel_mul(s).unwrap().to_tensor();
    assert!(ours.max_abs_diff(&via_noise) < 1e-12);
}

#[test]
fn evidence_objective_examples() {
    let prior = PriorConfig::default();
    let full = evidence_objective(12.5, 64, 64, &[0.3, 0.2], &prior).unwrap();
    assert_eq!(full.evidence_term, 12.5);
    assert_eq!(full.total, full.evidence_term + full.kl_term);
    let ml = PriorConfig {
        kl_factor: 0.0,
        ..prior
    };
    assert_eq!(evidence_objective(12.5, 64, 64, &[0.3], &ml).unwrap().total, 12.5);
    assert!(evidence_objective(1.0, 64, 0, &[], &prior).is_err());
}

#[test]
fn minibatch_evidence_is_unbiased() {
    let mut r = rng(6);
    let nll: Vec<f64> = (0..64).map(|_| rand::Rng::random_range(&mut r, 0.0..3.0)).collect();
    let full: f64 = nll.iter().sum();
    let prior = PriorConfig::default();
    let m = 8;
    let mut idx: Vec<usize> = (0..64).collect();
    let est: Vec<f64> = (0..1000)
        .map(|_| {
            idx.shuffle(&mut r);
            let sum: f64 = idx[..m].iter().map(|&i| nll[i]).sum();
            evidence_objective(sum, 64, m, &[], &prior).unwrap().evidence_term
        })
        .collect();
    let mean = est.iter().sum::<f64>() / est.len() as f64;
    let sd = (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (est.len() - 1) as f64).sqrt();
    assert!(
        (mean - full).abs() < 3.0 * sd / (est.len() as f64).sqrt(),
        "{mean} vs {full}"
    );
}

#[test]
fn equivalence_map_identities() {
    let (s, b) = bn_equivalence_map(2.0, 0.6, 0.0, 1.0).unwrap();
    assert_eq!((s, b), (2.0, 0.3));
    let mut r = rng(7);
    for _ in 0..100 {
        let [x, s, b, v]: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut r));
        let u = rand::Rng::random_range(&mut r, 0.5..1.5);
        let (big_s, big_b) = bn_equivalence_map(s, b, v, u).unwrap();
        let lhs = (x + big_b) * big_s;
        let rhs = (x + v) * u * s + b;
        assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs() + (b / (u * s)).abs() * big_s.abs()));
    }
    assert!(bn_equivalence_map(0.0, 1.0, 0.0, 1.0).is_err());
}

/// ∫ q log(q/p) on a uniform grid.
fn grid_kl(q: impl Fn(f64) -> f64, p: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    (0..n)
        .map(|i| {
            let x = lo + (i as f64 + 0.5) * h;
            let (qx, px) = (q(x), p(x));
            if qx > 0.0 {
                qx * (qx / px).ln() * h
            } else {
                0.0
            }
        })
        .sum()
}

#[test]
fn kl_is_invariant_under_the_scale_bias_map() {
    let pdf = |m: f64, sd: f64| {
        move |x: f64| (-0.5 * ((x - m) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    };
    // U ~ q = N(1, 0.1²) vs p = N(1, 0.3²); S = U·s.
    let s = 2.5;
    let kl_u = grid_kl(pdf(1.0, 0.1), pdf(1.0, 0.3), -2.0, 4.0, 200_000);
    let q_s = move |x: f64| pdf(1.0, 0.1)(x / s) / s;
    let p_s = move |x: f64| pdf(1.0, 0.3)(x / s) / s;
    let kl_s = grid_kl(q_s, p_s, -2.0 * s, 4.0 * s, 200_000);
    assert!((kl_u - kl_s).abs() < 1e-3);
    // V ~ q = N(0, 0.2²) vs p = N(0, 1); B = V + b/(U·s) at fixed U.
    let shift = 0.7 / (1.1 * s);
    let kl_v = grid_kl(pdf(0.0, 0.2), pdf(0.0, 1.0), -8.0, 8.0, 200_000);
    let kl_b = grid_kl(pdf(shift, 0.2), pdf(shift, 1.0), -8.0 + shift, 8.0 + shift, 200_000);
    assert!((kl_v - kl_b).abs() < 1e-3);
}

#[test]
fn dropout_equivalence_cases() {
    let mut r = rng(8);
    for _ in 0..100 {
        let w = Tensor::randn(&[4, 6], &mut r);
        let b: Vec<f64> = Tensor::randn(&[4], &mut r).into_data();
        let x: Vec<f64> = Tensor::randn(&[6], &mut r).into_data();
        let mut scales: Vec<f64> = Tensor::randn(&[6], &mut r).into_data();
        assert!(dropout_equivalence_check(&w, &b, &x, &scales).unwrap());
        scales[2] = 0.0;
        assert!(dropout_equivalence_check(&w, &b, &x, &scales).unwrap());
        assert!(dropout_equivalence_check(&w, &b, &x, &[1.0; 6]).unwrap());
    }
    assert!(dropout_equivalence_check(&Tensor::zeros(&[2, 3]), &[0.0; 2], &[0.0; 2], &[0.0; 3]).is_err());
}

fn variational_net(seed: u64) -> (Network, Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let arch = Architecture {
        in_channels: 1,
        height: 6,
        width: 6,
        layers: vec![ConvSpec::hidden(4, 3, 1), ConvSpec::hidden(4, 3, 2), ConvSpec::head(3)],
    };
    let x = Tensor::randn(&[24, 1, 6, 6], &mut r);
    let labels: Vec<usize> = (0..24).map(|i| i % 3).collect();
    let noise = NoiseMode::Variational {
        granularity: Granularity::PerChannel,
    };
    let net = Network::new(arch, NormKind::Weight, noise, &mut r)
        .unwrap()
        .with_moments(DatasetMoments::from_data(&x).unwrap());
    (net, x, labels)
}

#[test]
fn mc_prediction_basics() {
    let (mut net, x, labels) = variational_net(9);
    let probs = mc_predict(&net, &x, 5, &mut rng(10)).unwrap();
    for row in probs.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(mc_predict(&net, &x, 0, &mut rng(10)).is_err());

    for b in &mut net.blocks {
        b.u = b.u.as_ref().map(|u| u.map(|_| -1e4));
    }
    let one = mc_predict(&net, &x, 1, &mut rng(11)).unwrap();
    let det = net.predict(&x).unwrap().map(f64::exp);
    assert!(one.max_abs_diff(&det) < 1e-14);

    for b in &mut net.blocks {
        b.u = b.u.as_ref().map(|u| u.map(|_| u_from_sigma(0.3)));
    }
    let nll = |p: &Tensor| {
        -labels
            .iter()
            .enumerate()
            .map(|(i, &y)| p.data()[i * 3 + y].ln())
            .sum::<f64>()
            / 24.0
    };
    let n30 = nll(&mc_predict(&net, &x, 30, &mut rng(12)).unwrap());
    let n100 = nll(&mc_predict(&net, &x, 100, &mut rng(13)).unwrap());
    assert!((n30 - n100).abs() < 0.01, "{n30} vs {n100}");
}

#[test]
fn zero_kl_and_zero_variance_reduce_to_maximum_likelihood() {
    let (mut net, x, labels) = variational_net(14);
    net.prior.kl_factor = 0.0;
    for b in &mut net.blocks {
        b.u = b.u.as_ref().map(|u| u.map(|_| -1e4));
    }
    let train = |stochastic: bool| {
        let mut net = net.clone();
        let mut opt = Optimizer::new(OptimizerConfig {
            lr0: 0.05,
            gamma: 1.0,
            ..Default::default()
        })
        .unwrap();
        let mut r = rng(15);
        let mut losses = vec![];
        for _ in 0..10 {
            let tape = Tape::new();
            let p = net.bind(&tape);
            let opts = ForwardOptions {
                stochastic,
                ..ForwardOptions::TRAIN
            };
            let t = net.forward(&p, tape.constant(&x), opts, &mut r).unwrap();
            let mut loss = t.logp.nll_loss(&labels).unwrap();
            if net.prior.kl_factor > 0.0 {
                loss = loss.add(net.kl(&p).unwrap().unwrap()).unwrap();
            }
            losses.push(loss.item());
            let g = tape.backward(loss).unwrap();
            let grads = net.collect_grads(&p, &g);
            opt.step(&mut net.params_mut(), &grads, 0).unwrap();
        }
        (losses, net)
    };
    let (lv, nv) = train(true);
    let (lm, nm) = train(false);
    assert_eq!(lv, lm);
    assert_eq!(nv, nm);
}
