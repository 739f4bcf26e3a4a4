use pnnh_core::gradsuite::run_gradient_suite;
use pnnh_core::tensor::gradcheck::check;
use pnnh_core::tensor::{conv2d, conv2d_backward, softmax_cross_entropy, BatchNorm, BnMode};
use pnnh_core::{ConvWeights, Rng, Tensor};
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut(), 0.0, 1.0);
    t
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

#[test]
fn every_suite_check_passes() {
    let checks = run_gradient_suite().unwrap();
    assert!(checks.len() > 30);
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_gradients_on_random_shapes(seed in any::<u64>(), n in 1usize..3, ci in 1usize..4, co in 1usize..4,
                                        k in prop_oneof![Just(1usize), Just(3)], stride in 1usize..3, size in 3usize..6) {
        let mut rng = Rng::new(seed);
        let pad = k / 2;
        let x = random(&[n, ci, size, size], &mut rng);
        let w = ConvWeights::new(random(&[co, ci, k, k], &mut rng), stride, pad, 1).unwrap();
        let r = random(conv2d(&x, &w).unwrap().shape(), &mut rng);
        let (gx, gw) = conv2d_backward(&x, &w, &r).unwrap();
        let shape = x.shape().to_vec();
        let cx = check("input", |v| dot(&r, &conv2d(&Tensor::from_vec(&shape, v.to_vec()).unwrap(), &w).unwrap()),
                       x.data(), gx.data());
        prop_assert!(cx.passed(), "{cx:?}");
        let wshape = w.weight().shape().to_vec();
        let cw = check("weight", |v| {
            let w2 = ConvWeights::new(Tensor::from_vec(&wshape, v.to_vec()).unwrap(), stride, pad, 1).unwrap();
            dot(&r, &conv2d(&x, &w2).unwrap())
        }, w.weight().data(), gw.data());
        prop_assert!(cw.passed(), "{cw:?}");
    }

    #[test]
    fn batch_norm_gradients_on_random_shapes(seed in any::<u64>(), n in 2usize..4, c in 1usize..4, size in 1usize..4) {
        let mut rng = Rng::new(seed);
        let x = random(&[n, c, size, size], &mut rng);
        let mut bn = BatchNorm::<f64>::new(c);
        rng.fill_normal(bn.gamma.data_mut(), 1.0, 0.3);
        rng.fill_normal(bn.beta.data_mut(), 0.0, 0.3);
        let (y, cache) = bn.clone().forward(&x, BnMode::Train).unwrap();
        let r = random(y.shape(), &mut rng);
        let g = bn.backward(&cache, &r).unwrap();
        let shape = x.shape().to_vec();
        let res = check("bn input", |v| {
            let mut b = bn.clone();
            dot(&r, &b.forward(&Tensor::from_vec(&shape, v.to_vec()).unwrap(), BnMode::Train).unwrap().0)
        }, x.data(), g.input.data());
        prop_assert!(res.passed(), "{res:?}");
    }

    #[test]
    fn cross_entropy_gradient_on_random_logits(seed in any::<u64>(), n in 1usize..5, k in 2usize..6) {
        let mut rng = Rng::new(seed);
        let logits = random(&[n, k], &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let (_, g, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        let res = check("ce", |v| softmax_cross_entropy(&Tensor::from_vec(&[n, k], v.to_vec()).unwrap(), &labels).unwrap().0,
                        logits.data(), g.data());
        prop_assert!(res.passed(), "{res:?}");
    }
}
