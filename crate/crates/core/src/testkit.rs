//! Finite-difference gradient checks for tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::network::{Architecture, Bound, ConvSpec, ForwardOptions, Network, NoiseMode};

use crate::noise::{noisy_normalize, NoiseConfig};
use crate::norm::{
    batch_moments, bn_forward, conv_moments, leaky_relu_moments_var, weight_row_norms, DatasetMoments, Mode, NormKind,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{bayes_norm_forward, kl_scale_var, scale_from_noise, sigma_var, Granularity, PriorConfig};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error `‖g_ad − g_fd‖ / max(‖g_ad‖, ‖g_fd‖, 1e-12)` between the
/// tape gradient of the scalar `f` at `inputs` and central differences,
/// one entry per input.
pub fn gradcheck(inputs: &[Tensor], f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> Vec<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t)).collect();
        f(&tape, &vars).item()
    };
    let mut errors = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let ad = grads.wrt(*v);
        let mut xs = inputs.to_vec();
        let mut fd = vec![0.0; inputs[i].len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + FD_STEP;
            let hi = eval(&xs);
            xs[i].data_mut()[j] = x0 - FD_STEP;
            let lo = eval(&xs);
            xs[i].data_mut()[j] = x0;
            *slot = (hi - lo) / (2.0 * FD_STEP);
        }
        let diff: f64 = ad
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = ad.norm();
        let nf = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        errors.push(diff / na.max(nf).max(1e-12));
    }
    errors
}

type Loss = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>;
type Gen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

/// One differentiable operation under test: a generator of random inputs and
/// a scalar-valued function of them.
pub struct GradCase {
    pub name: &'static str,
    gen: Gen,
    loss: Loss,
}

impl GradCase {
    pub fn new(
        name: &'static str,
        gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
        loss: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + 'static,
    ) -> Self {
        GradCase {
            name,
            gen: Box::new(gen),
            loss: Box::new(loss),
        }
    }

    /// Largest relative error over `instances` random inputs.
    pub fn worst_error(&self, instances: usize, rng: &mut ChaCha8Rng) -> f64 {
        (0..instances)
            .map(|_| {
                let inputs = (self.gen)(rng);
                gradcheck(&inputs, &*self.loss).into_iter().fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }
}

/// Reduces `y` to a scalar with fixed, non-uniform weights so every output
/// entry contributes a distinct amount.
pub fn project<'t>(y: Var<'t>) -> Var<'t> {
    let n = y.shape().iter().product::<usize>();
    let r: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin() + 0.5).collect();
    let r = Tensor::new(y.shape(), r).expect("same size");
    y.mul(y.tape().constant(&r)).expect("same shape").sum()
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

fn scalar_fn<F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>(f: F) -> F {
    f
}

/// Every differentiable tensor operation, plus the moment-propagation and
/// variational building blocks.
pub fn op_cases() -> Vec<GradCase> {
    let prior = PriorConfig::default();
    let xi = Tensor::new(vec![3, 4], (0..12).map(|i| (1.3 * i as f64).cos()).collect()).expect("size");
    let vn = Tensor::new(vec![2, 3], (0..6).map(|i| 0.1 * (i as f64).sin()).collect()).expect("size");
    let un = Tensor::new(vec![2, 3], (0..6).map(|i| 1.0 + 0.05 * (i as f64).cos()).collect()).expect("size");
    vec![
        GradCase::new(
            "add",
            |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)],
            |_, v| project(v[0].add(v[1]).unwrap()),
        ),
        GradCase::new(
            "sub",
            |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)],
            |_, v| project(v[0].sub(v[1]).unwrap()),
        ),
        GradCase::new(
            "mul",
            |r| vec![randn(&[3, 4], r), randn(&[3, 4], r)],
            |_, v| project(v[0].mul(v[1]).unwrap()),
        ),
        GradCase::new(
            "div",
            |r| vec![randn(&[3, 4], r), positive(&[3, 4], r)],
            |_, v| project(v[0].div(v[1]).unwrap()),
        ),
        GradCase::new("neg", |r| vec![randn(&[5], r)], |_, v| project(v[0].neg())),
        GradCase::new("scale", |r| vec![randn(&[5], r)], |_, v| project(v[0].scale(-2.5))),
        GradCase::new(
            "add_scalar",
            |r| vec![randn(&[5], r)],
            |_, v| project(v[0].add_scalar(1.5)),
        ),
        GradCase::new("square", |r| vec![randn(&[5], r)], |_, v| project(v[0].square())),
        GradCase::new("sqrt", |r| vec![positive(&[5], r)], |_, v| project(v[0].sqrt())),
        GradCase::new("exp", |r| vec![randn(&[5], r)], |_, v| project(v[0].exp())),
        GradCase::new("ln", |r| vec![positive(&[5], r)], |_, v| project(v[0].ln())),
        GradCase::new("sum", |r| vec![randn(&[2, 3], r)], |_, v| v[0].sum().square()),
        GradCase::new("mean", |r| vec![randn(&[2, 3], r)], |_, v| v[0].mean().square()),
        GradCase::new(
            "reshape",
            |r| vec![randn(&[2, 3], r)],
            |_, v| project(v[0].reshape(&[3, 2]).unwrap()),
        ),
        GradCase::new(
            "slice_rows",
            |r| vec![randn(&[4, 3], r)],
            |_, v| project(v[0].slice_rows(1, 2).unwrap()),
        ),
        GradCase::new(
            "reduce_sum",
            |r| vec![randn(&[2, 3, 4], r)],
            |_, v| project(v[0].reduce_sum(&[0, 2]).unwrap()),
        ),
        GradCase::new(
            "reduce_mean",
            |r| vec![randn(&[2, 3, 4], r)],
            |_, v| project(v[0].reduce_mean(&[1]).unwrap()),
        ),
        GradCase::new(
            "reduce_var",
            |r| vec![randn(&[2, 3, 4], r)],
            |_, v| project(v[0].reduce_var(&[0, 2]).unwrap()),
        ),
        GradCase::new(
            "channel_add",
            |r| vec![randn(&[2, 3, 2, 2], r), randn(&[3], r)],
            |_, v| project(v[0].channel_add(v[1]).unwrap()),
        ),
        GradCase::new(
            "channel_sub",
            |r| vec![randn(&[2, 3, 2, 2], r), randn(&[2, 3], r)],
            |_, v| project(v[0].channel_sub(v[1]).unwrap()),
        ),
        GradCase::new(
            "channel_mul",
            |r| vec![randn(&[2, 3, 2, 2], r), randn(&[2, 3], r)],
            |_, v| project(v[0].channel_mul(v[1]).unwrap()),
        ),
        GradCase::new(
            "channel_div",
            |r| vec![randn(&[2, 3, 2, 2], r), positive(&[3], r)],
            |_, v| project(v[0].channel_div(v[1]).unwrap()),
        ),
        GradCase::new(
            "matmul",
            |r| vec![randn(&[4, 3], r), randn(&[3, 2], r)],
            |_, v| project(v[0].matmul(v[1]).unwrap()),
        ),
        GradCase::new(
            "conv2d",
            |r| vec![randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r)],
            |_, v| project(v[0].conv2d(v[1], 1, 0).unwrap()),
        ),
        GradCase::new(
            "conv2d_stride_pad",
            |r| vec![randn(&[2, 2, 5, 5], r), randn(&[3, 2, 3, 3], r)],
            |_, v| project(v[0].conv2d(v[1], 2, 1).unwrap()),
        ),
        GradCase::new(
            "avg_pool2d",
            |r| vec![randn(&[2, 2, 4, 4], r)],
            |_, v| project(v[0].avg_pool2d(2).unwrap()),
        ),
        GradCase::new(
            "leaky_relu",
            |r| vec![randn(&[3, 4], r)],
            |_, v| project(v[0].leaky_relu(0.01)),
        ),
        GradCase::new(
            "log_softmax",
            |r| vec![randn(&[3, 4], r)],
            |_, v| project(v[0].log_softmax().unwrap()),
        ),
        GradCase::new(
            "nll_loss",
            |r| vec![randn(&[3, 4], r)],
            |_, v| v[0].log_softmax().unwrap().nll_loss(&[0, 3, 1]).unwrap(),
        ),
        GradCase::new(
            "batch_moments",
            |r| vec![randn(&[3, 2, 2, 2], r)],
            |_, v| {
                let (m, s2) = batch_moments(v[0]).unwrap();
                project(m).add(project(s2)).unwrap()
            },
        ),
        GradCase::new(
            "bn_train",
            |r| vec![randn(&[4, 2, 2, 2], r), positive(&[2], r), randn(&[2], r)],
            |_, v| project(bn_forward(v[0], Mode::Train, None, v[1], v[2], 1e-5).unwrap().output),
        ),
        GradCase::new(
            "weight_row_norms",
            |r| vec![randn(&[3, 2, 2, 2], r)],
            |_, v| project(weight_row_norms(v[0]).unwrap()),
        ),
        GradCase::new(
            "conv_moments",
            |r| vec![randn(&[3, 2, 3, 3], r), randn(&[2], r), positive(&[2], r)],
            |_, v| {
                let (m, s2) = conv_moments(v[0], v[1], v[2]).unwrap();
                project(m).add(project(s2)).unwrap()
            },
        ),
        GradCase::new(
            "leaky_relu_moments",
            |r| vec![randn(&[4], r), positive(&[4], r)],
            |_, v| {
                let (m, s2) = leaky_relu_moments_var(v[0], v[1], 0.01).unwrap();
                project(m).add(project(s2)).unwrap()
            },
        ),
        GradCase::new(
            "sigma_from_u",
            |r| vec![randn(&[6], r)],
            |_, v| project(sigma_var(v[0])),
        ),
        GradCase::new(
            "kl_scale",
            |r| vec![randn(&[4], r), randn(&[4], r)],
            move |_, v| kl_scale_var(v[0], v[1], &prior).unwrap(),
        ),
        GradCase::new(
            "sample_scale",
            |r| vec![randn(&[4], r), randn(&[4], r)],
            move |_, v| project(scale_from_noise(v[0], v[1], &xi).unwrap()),
        ),
        GradCase::new(
            "noisy_normalize",
            |r| vec![randn(&[2, 3, 2, 2], r)],
            move |_, v| project(noisy_normalize(v[0], &vn, &un).unwrap()),
        ),
        GradCase::new(
            "bayes_norm_forward",
            |r| vec![randn(&[2, 3, 2, 2], r), randn(&[3], r), randn(&[2, 3], r)],
            |_, v| project(bayes_norm_forward(v[0], v[1], v[2]).unwrap()),
        ),
    ]
}

/// The composed objective of a small three-block network, differentiated
/// with respect to all of its parameters. Noise draws are frozen by
/// re-seeding the generator on every evaluation.
pub fn network_case(name: &'static str, norm: NormKind, noise: NoiseMode) -> GradCase {
    let arch = Architecture {
        in_channels: 1,
        height: 4,
        width: 4,
        layers: vec![ConvSpec::hidden(3, 3, 1), ConvSpec::hidden(3, 3, 2), ConvSpec::head(2)],
    };
    let mut init = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::randn(&[4, 1, 4, 4], &mut init);
    let moments = DatasetMoments::from_data(&x).expect("moments");
    let template = Network::new(arch, norm, noise, &mut init)
        .expect("valid network")
        .with_moments(moments);
    let gen_net = template.clone();
    let gen = move |r: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for b in &gen_net.blocks {
            out.push(Tensor::randn(b.w.shape(), r).scaled(0.5));
            out.push(Tensor::uniform(b.s.shape(), 0.5, 1.5, r));
            out.push(Tensor::randn(b.b.shape(), r).scaled(0.3));
            if let Some(u) = &b.u {
                out.push(Tensor::uniform(u.shape(), -2.0, 0.5, r));
            }
        }
        out
    };
    let loss = scalar_fn(move |tape, v| {
        let net = &template;
        let mut p = Bound {
            w: vec![],
            s: vec![],
            b: vec![],
            u: vec![],
        };
        let mut it = v.iter().copied();
        for b in &net.blocks {
            p.w.push(it.next().expect("w"));
            p.s.push(it.next().expect("s"));
            p.b.push(it.next().expect("b"));
            p.u.push(b.u.as_ref().map(|_| it.next().expect("u")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trace = net
            .forward(&p, tape.constant(&x), ForwardOptions::TRAIN, &mut rng)
            .expect("forward");
        let nll = trace.logp.nll_loss(&[0, 1, 1, 0]).expect("labels").scale(4.0 * 16.0);
        match net.kl(&p).expect("kl") {
            Some(kl) => nll.add(kl.scale(0.5)).expect("scalar"),
            None => nll,
        }
    });
    GradCase::new(name, gen, loss)
}

/// Network objectives for every normalization kind, with and without
/// variational scales.
pub fn network_cases() -> Vec<GradCase> {
    let var = || NoiseMode::Variational {
        granularity: Granularity::PerChannel,
    };
    vec![
        network_case("elbo_weight_norm", NormKind::Weight, var()),
        network_case("elbo_analytic_norm", NormKind::Analytic, var()),
        network_case("elbo_batch_norm", NormKind::Batch, var()),
        network_case(
            "elbo_per_layer_sigma",
            NormKind::Weight,
            NoiseMode::Variational {
                granularity: Granularity::PerLayer,
            },
        ),
        network_case("nll_plain", NormKind::None, NoiseMode::None),
        network_case(
            "nll_injected_noise",
            NormKind::Weight,
            NoiseMode::Injected(NoiseConfig::gaussian(0.1, 0.05)),
        ),
    ]
}
