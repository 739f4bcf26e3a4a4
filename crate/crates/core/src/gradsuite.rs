//! Finite-difference verification of every hand-written backward pass in
//! 64-bit precision.

use crate::coder::{make_he_coder, CoderSpec, CoderWeights};
use crate::net::{build_network, BnPolicy, NetKind, NetworkSpec};
use crate::tensor::gradcheck::{check, check_with_step, GradCheck, NETWORK_FD_STEP};
use crate::tensor::{
    conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, linear, linear_backward, relu, relu_backward,
    softmax_cross_entropy, BatchNorm, BnMode, Linear,
};
use crate::{ConvWeights, Result, Rng, Tensor};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut(), 0.0, 1.0);
    t
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Compares `analytic` with central differences of `f` around `at`.
fn check_tensor(name: &str, at: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64, analytic: &Tensor<f64>) -> GradCheck {
    let shape = at.shape().to_vec();
    check(name, |v| f(&Tensor::from_vec(&shape, v.to_vec()).expect("same shape")), at.data(), analytic.data())
}

fn conv_checks(out: &mut Vec<GradCheck>, rng: &mut Rng) -> Result<()> {
    // (name, c_in, c_out, k, stride, padding, groups, size)
    let cases = [
        ("conv 3x3", 3, 4, 3, 1, 1, 1, 5),
        ("conv 3x3 stride 2", 3, 4, 3, 2, 1, 1, 6),
        ("conv 3x3 valid", 2, 3, 3, 1, 0, 1, 5),
        ("conv 1x1", 4, 3, 1, 1, 0, 1, 4),
        ("conv grouped", 4, 6, 3, 1, 1, 2, 4),
        ("conv depthwise", 4, 4, 3, 1, 1, 4, 4),
    ];
    for (name, ci, co, k, stride, pad, groups, size) in cases {
        let x = random(&[2, ci, size, size], rng);
        let w = ConvWeights::new(random(&[co, ci / groups, k, k], rng), stride, pad, groups)?;
        let y = conv2d(&x, &w)?;
        let r = random(y.shape(), rng);
        let (gx, gw) = conv2d_backward(&x, &w, &r)?;
        out.push(check_tensor(&format!("{name} input"), &x, |x| dot(&r, &conv2d(x, &w).unwrap()), &gx));
        out.push(check_tensor(
            &format!("{name} weight"),
            w.weight(),
            |wt| {
                let w2 = ConvWeights::new(wt.clone(), stride, pad, groups).unwrap();
                dot(&r, &conv2d(&x, &w2).unwrap())
            },
            &gw,
        ));
    }
    Ok(())
}

fn activation_checks(out: &mut Vec<GradCheck>, rng: &mut Rng) -> Result<()> {
    // Keep inputs away from the kink.
    let x = random(&[2, 3, 4, 4], rng).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
    let r = random(x.shape(), rng);
    for (name, slope) in [("relu", 0.0), ("leaky relu", 0.1)] {
        let g = relu_backward(&x, &r, slope)?;
        out.push(check_tensor(name, &x, |x| dot(&r, &relu(x, slope)), &g));
    }
    Ok(())
}

fn batchnorm_checks(out: &mut Vec<GradCheck>, rng: &mut Rng) -> Result<()> {
    let x = random(&[4, 3, 3, 3], rng);
    let r = random(x.shape(), rng);
    let mut bn = BatchNorm::new(3);
    bn.gamma = random(&[3], rng);
    bn.beta = random(&[3], rng);
    bn.running_mean = random(&[3], rng);
    bn.running_var = random(&[3], rng).map(|v| v.abs() + 0.5);
    for mode in [BnMode::Train, BnMode::Eval] {
        let label = if mode == BnMode::Train { "train" } else { "eval" };
        let (_, cache) = bn.clone().forward(&x, mode)?;
        let g = bn.backward(&cache, &r)?;
        let run = |b: &BatchNorm<f64>, x: &Tensor<f64>| dot(&r, &b.clone().forward(x, mode).unwrap().0);
        out.push(check_tensor(&format!("batch norm {label} input"), &x, |x| run(&bn, x), &g.input));
        out.push(check_tensor(
            &format!("batch norm {label} gamma"),
            &bn.gamma,
            |t| run(&BatchNorm { gamma: t.clone(), ..bn.clone() }, &x),
            &g.gamma,
        ));
        out.push(check_tensor(
            &format!("batch norm {label} beta"),
            &bn.beta,
            |t| run(&BatchNorm { beta: t.clone(), ..bn.clone() }, &x),
            &g.beta,
        ));
    }
    Ok(())
}

fn head_checks(out: &mut Vec<GradCheck>, rng: &mut Rng) -> Result<()> {
    let layer = Linear { weight: random(&[3, 5], rng), bias: random(&[3], rng) };
    let x = random(&[4, 5], rng);
    let r = random(&[4, 3], rng);
    let (gx, gw, gb) = linear_backward(&x, &layer, &r)?;
    out.push(check_tensor("linear input", &x, |x| dot(&r, &linear(x, &layer).unwrap()), &gx));
    out.push(check_tensor(
        "linear weight",
        &layer.weight,
        |w| dot(&r, &linear(&x, &Linear { weight: w.clone(), bias: layer.bias.clone() }).unwrap()),
        &gw,
    ));
    out.push(check_tensor(
        "linear bias",
        &layer.bias,
        |b| dot(&r, &linear(&x, &Linear { weight: layer.weight.clone(), bias: b.clone() }).unwrap()),
        &gb,
    ));

    let logits = random(&[5, 4], rng).scale(2.0);
    let labels = [0, 3, 1, 1, 2];
    let (_, g, _) = softmax_cross_entropy(&logits, &labels)?;
    out.push(check_tensor("softmax cross-entropy", &logits, |z| softmax_cross_entropy(z, &labels).unwrap().0, &g));

    let x = random(&[2, 3, 4, 5], rng);
    let r = random(&[2, 3], rng);
    let g = global_avg_pool_backward(&r, x.shape())?;
    out.push(check_tensor("global average pool", &x, |x| dot(&r, &global_avg_pool(x).unwrap()), &g));
    Ok(())
}

fn coder_checks(out: &mut Vec<GradCheck>, rng: &mut Rng) -> Result<()> {
    let specs = [CoderSpec::vanilla(6), CoderSpec::mlp(6), CoderSpec::bottleneck(6, 4), CoderSpec::inverted(6, 36)];
    for spec in specs {
        let name = spec.kind.name();
        let coder: CoderWeights<f64> = make_he_coder(spec, rng)?;
        let x = random(&[2, 6, 4, 4], rng);
        let (y, cache) = coder.forward_cached(&x)?;
        let r = random(y.shape(), rng);
        let g = coder.backward(&cache, &r, true)?;
        let with = |enc: Option<&Tensor<f64>>, dec: Option<&Tensor<f64>>| {
            let mut c = coder.clone();
            if let Some(e) = enc {
                *c.enc.weight_mut() = e.clone();
            }
            if let Some(d) = dec {
                *c.dec.weight_mut() = d.clone();
            }
            c
        };
        out.push(check_tensor(&format!("{name} coder input"), &x, |x| dot(&r, &coder.forward(x).unwrap()), &g.input));
        out.push(check_tensor(
            &format!("{name} coder encoder"),
            coder.enc.weight(),
            |e| dot(&r, &with(Some(e), None).forward(&x).unwrap()),
            g.enc.as_ref().expect("requested"),
        ));
        out.push(check_tensor(
            &format!("{name} coder decoder"),
            coder.dec.weight(),
            |d| dot(&r, &with(None, Some(d)).forward(&x).unwrap()),
            g.dec.as_ref().expect("requested"),
        ));
    }
    Ok(())
}

fn network_checks(out: &mut Vec<GradCheck>, rng: &mut Rng) -> Result<()> {
    let cases = [
        ("plain", NetKind::Plain, BnPolicy::FirstOnly),
        ("residual", NetKind::Residual, BnPolicy::FirstOnly),
        ("pnnh first_only", NetKind::Pnnh, BnPolicy::FirstOnly),
        ("pnnh both", NetKind::Pnnh, BnPolicy::Both),
    ];
    for (name, kind, bn_policy) in cases {
        let spec = NetworkSpec {
            kind,
            in_channels: 2,
            num_classes: 3,
            widths: vec![4, 6],
            blocks_per_stage: 2,
            stem_stride: 1,
            bn_policy,
            ..NetworkSpec::mnist(kind, 1)
        };
        let coders = spec
            .coder_widths()
            .into_iter()
            .map(|w| Ok((w, make_he_coder(spec.coder_spec(w), rng)?)))
            .collect::<Result<_>>()?;
        let mut net = build_network::<f64>(&spec, coders, rng)?;
        let x = random(&[3, 2, 6, 6], rng);
        let labels = [0, 2, 1];
        let (logits, cache) = net.forward(&x, BnMode::Train)?;
        let (_, g_logits, _) = softmax_cross_entropy(&logits, &labels)?;
        let (grads, g_in) = net.backward_full(&cache, &g_logits)?;
        let loss_of = |n: &mut crate::net::Network<f64>, x: &Tensor<f64>| {
            let (z, _) = n.forward(x, BnMode::Train).unwrap();
            softmax_cross_entropy(&z, &labels).unwrap().0
        };
        let shape = x.shape().to_vec();
        out.push(check_with_step(
            format!("{name} network input"),
            |v| loss_of(&mut net.clone(), &Tensor::from_vec(&shape, v.to_vec()).unwrap()),
            x.data(),
            g_in.data(),
            NETWORK_FD_STEP,
        ));
        let flat: Vec<f64> = net.params().iter().flat_map(|p| p.data().iter().copied()).collect();
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
        out.push(check_with_step(
            format!("{name} network parameters"),
            |v| {
                let mut n = net.clone();
                let mut at = 0;
                for p in n.params_mut() {
                    let len = p.len();
                    p.data_mut().copy_from_slice(&v[at..at + len]);
                    at += len;
                }
                loss_of(&mut n, &x)
            },
            &flat,
            &analytic,
            NETWORK_FD_STEP,
        ));
    }
    Ok(())
}

/// Runs every check with a fixed seed.
pub fn run_gradient_suite() -> Result<Vec<GradCheck>> {
    let mut rng = Rng::new(0x6772_6164);
    let mut out = Vec::new();
    conv_checks(&mut out, &mut rng)?;
    activation_checks(&mut out, &mut rng)?;
    batchnorm_checks(&mut out, &mut rng)?;
    head_checks(&mut out, &mut rng)?;
    coder_checks(&mut out, &mut rng)?;
    network_checks(&mut out, &mut rng)?;
    Ok(out)
}
