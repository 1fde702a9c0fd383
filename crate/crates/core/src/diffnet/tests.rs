use super::gradcheck::check_gradients;
use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(net: &mut Network, r: &mut ChaCha8Rng) {
    for p in net.params_mut() {
        p.iter_mut().for_each(|v| *v = r.random_range(-0.8..0.8));
    }
}

#[test]
fn empty_network_is_identity() {
    let net = Network::new(vec![], LossKind::Hinge);
    let x = Tensor::from_vec(vec![1.0, -2.0]);
    assert_eq!(net.forward(&x).unwrap(), x);
}

#[test]
fn relu_forward() {
    let net = Network::new(vec![Layer::Relu], LossKind::Hinge);
    let y = net.forward(&Tensor::from_vec(vec![-1.0, 0.0, 2.0])).unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn relu_subgradient_at_zero() {
    let net = Network::new(vec![Layer::Relu], LossKind::Hinge);
    let (_, cache) = net.forward_cached(&Tensor::from_vec(vec![0.0])).unwrap();
    let (_, dx) = net.backward(&cache, &Tensor::scalar(1.0), true).unwrap();
    assert_eq!(dx.unwrap().data(), &[0.0]);
}

#[test]
fn conv_1x1_affine() {
    let mut c = Conv2d::new(1, 1, 1, 1);
    c.weight[0] = 2.0;
    c.bias[0] = 1.0;
    let net = Network::new(vec![Layer::Conv2d(c)], LossKind::Hinge);
    let y = net.forward(&Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap()).unwrap();
    assert_eq!(y.data(), &[7.0]);
}

#[test]
fn linear_input_gradient_is_weight() {
    let mut d = Dense::new(3, 1);
    d.weight.copy_from_slice(&[0.5, -1.0, 2.0]);
    let net = Network::new(vec![Layer::FullyConnected(d)], LossKind::Hinge);
    let x = Tensor::from_vec(vec![0.1, 0.2, 0.3]);
    let (_, cache) = net.forward_cached(&x).unwrap();
    let (_, dx) = net.backward(&cache, &Tensor::scalar(1.0), true).unwrap();
    assert_eq!(dx.unwrap().data(), &[0.5, -1.0, 2.0]);
    // hinge active region: score 0.45 < 1 for label 1 → gradient −w
    let g = net.input_gradient(&x, MANIPULATED).unwrap();
    assert_eq!(g.data(), &[-0.5, 1.0, -2.0]);
    let g = net.input_gradient(&x, PRISTINE).unwrap();
    assert_eq!(g.data(), &[0.5, -1.0, 2.0]);
}

#[test]
fn pixels_outside_receptive_field_have_zero_gradient() {
    let mut r = rng(1);
    let mut net = Network::new(
        vec![
            Layer::Conv2d(Conv2d::new(1, 1, 3, 3).with_stride(3)),
            Layer::GlobalAvgPool,
            Layer::FullyConnected(Dense::new(1, 2)),
        ],
        LossKind::SoftmaxCrossEntropy,
    );
    randomize(&mut net, &mut r);
    // 7x7 input with 3x3 stride-3 windows never reads the last row/column
    let x = random_tensor(&[1, 7, 7], &mut r);
    let g = net.input_gradient(&x, MANIPULATED).unwrap();
    for i in 0..7 {
        assert_eq!(g.data()[6 * 7 + i], 0.0);
        assert_eq!(g.data()[i * 7 + 6], 0.0);
    }
    assert!(g.data()[0] != 0.0);
}

#[test]
fn shape_mismatch_names_layer() {
    let net = Network::new(vec![Layer::Relu, Layer::FullyConnected(Dense::new(4, 1))], LossKind::Hinge);
    let err = net.forward(&Tensor::from_vec(vec![1.0; 3])).unwrap_err();
    assert!(err.to_string().contains("layer 1 (fully_connected)"), "{err}");
}

#[test]
fn hardmax_one_hot_with_low_index_ties() {
    let net = Network::new(vec![Layer::HardmaxChannels], LossKind::Hinge);
    let x = Tensor::new(vec![3, 1, 2], vec![1.0, 0.0, 1.0, 5.0, 0.5, 5.0]).unwrap();
    let y = net.forward(&x).unwrap();
    assert_eq!(y.data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    let (_, cache) = net.forward_cached(&x).unwrap();
    assert!(matches!(net.backward(&cache, &y, true), Err(Error::UnsupportedOperation(_))));
}

#[test]
fn maxpool_routes_to_first_maximum() {
    let net = Network::new(vec![Layer::MaxPool { size: 2, stride: 2 }], LossKind::Hinge);
    let x = Tensor::new(vec![1, 2, 2], vec![3.0, 3.0, 3.0, 1.0]).unwrap();
    let (y, cache) = net.forward_cached(&x).unwrap();
    assert_eq!(y.data(), &[3.0]);
    let (_, dx) = net.backward(&cache, &Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap(), true).unwrap();
    assert_eq!(dx.unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn softmax_and_l2_forward() {
    let net = Network::new(vec![Layer::Softmax { temperature: 0.5 }], LossKind::Hinge);
    let y = net.forward(&Tensor::new(vec![2, 1, 1], vec![0.0, 1.0]).unwrap()).unwrap();
    let e = (2.0f64).exp();
    assert!((y.data()[1] - e / (1.0 + e)).abs() < 1e-15);
    let net = Network::new(vec![Layer::L2Normalize], LossKind::Hinge);
    let y = net.forward(&Tensor::from_vec(vec![3.0, 4.0])).unwrap();
    assert_eq!(y.data(), &[0.6, 0.8]);
}

fn gradcheck_net(layers: Vec<Layer>, shape: &[usize], seed: u64) {
    let mut r = rng(seed);
    let mut net = Network::new(layers, LossKind::SoftmaxCrossEntropy);
    randomize(&mut net, &mut r);
    let x = random_tensor(shape, &mut r);
    let rep = check_gradients(&net, &x, 1e-5, &mut r).unwrap();
    assert!(rep.max() < 1e-6, "{rep:?}");
}

#[test]
fn gradcheck_each_layer_kind() {
    gradcheck_net(vec![Layer::Conv2d(Conv2d::new(2, 3, 3, 3))], &[2, 5, 5], 1);
    gradcheck_net(vec![Layer::Conv2d(Conv2d::new(1, 2, 3, 2).with_padding(1).with_stride(2))], &[1, 5, 5], 2);
    gradcheck_net(vec![Layer::MaxPool { size: 2, stride: 2 }], &[2, 5, 5], 3);
    gradcheck_net(vec![Layer::GlobalAvgPool], &[3, 5, 5], 4);
    gradcheck_net(vec![Layer::Relu], &[1, 5, 5], 5);
    gradcheck_net(vec![Layer::FullyConnected(Dense::new(25, 4))], &[1, 5, 5], 6);
    gradcheck_net(vec![Layer::Softmax { temperature: 0.7 }], &[4, 5, 5], 7);
    gradcheck_net(vec![Layer::L2Normalize], &[1, 5, 5], 8);
    gradcheck_net(
        vec![Layer::Residual { layers: vec![Layer::Conv2d(Conv2d::new(2, 2, 3, 3).with_padding(1)), Layer::Relu] }],
        &[2, 5, 5],
        9,
    );
    gradcheck_net(
        vec![Layer::Parallel {
            branches: vec![
                vec![Layer::Conv2d(Conv2d::new(1, 2, 1, 3)), Layer::GlobalAvgPool],
                vec![Layer::Conv2d(Conv2d::new(1, 1, 3, 1))],
            ],
        }],
        &[1, 5, 5],
        10,
    );
}

#[test]
fn gradcheck_full_stack() {
    gradcheck_net(
        vec![
            Layer::Conv2d(Conv2d::new(1, 3, 3, 3).with_padding(1)),
            Layer::Relu,
            Layer::MaxPool { size: 2, stride: 2 },
            Layer::Conv2d(Conv2d::new(3, 2, 1, 1)),
            Layer::GlobalAvgPool,
            Layer::FullyConnected(Dense::new(2, 2)),
        ],
        &[1, 6, 6],
        11,
    );
}

#[test]
fn loss_gradients_match_finite_differences() {
    for loss in [LossKind::SoftmaxCrossEntropy, LossKind::Hinge] {
        let net = Network::new(vec![], loss);
        for out in [vec![0.3], vec![0.2, -0.4]] {
            let t = Tensor::from_vec(out.clone());
            for label in [PRISTINE, MANIPULATED] {
                let (_, g) = net.loss_and_grad(&t, label);
                for i in 0..out.len() {
                    let h = 1e-6;
                    let mut p = out.clone();
                    p[i] += h;
                    let mut m = out.clone();
                    m[i] -= h;
                    let fp = net.loss_and_grad(&Tensor::from_vec(p), label).0;
                    let fm = net.loss_and_grad(&Tensor::from_vec(m), label).0;
                    assert!(((fp - fm) / (2.0 * h) - g.data()[i]).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut r = rng(12);
    let mut net = Network::new(
        vec![
            Layer::Conv2d(Conv2d::new(1, 2, 3, 3)),
            Layer::Relu,
            Layer::GlobalAvgPool,
            Layer::FullyConnected(Dense::new(2, 2)),
        ],
        LossKind::SoftmaxCrossEntropy,
    );
    randomize(&mut net, &mut r);
    let x = random_tensor(&[1, 5, 5], &mut r);
    let g = net.input_gradient(&x, MANIPULATED).unwrap();
    let loss = |x: &Tensor| net.loss_and_grad(&net.forward(x).unwrap(), MANIPULATED).0;
    let h = 1e-5;
    let mut num = Vec::new();
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut m = x.clone();
        m.data_mut()[i] -= h;
        num.push((loss(&p) - loss(&m)) / (2.0 * h));
    }
    let diff: f64 = num.iter().zip(g.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(diff / norm < 1e-6);
}

#[test]
fn forward_is_deterministic() {
    let mut r = rng(5);
    let mut net = Network::new(
        vec![Layer::Conv2d(Conv2d::new(1, 4, 3, 3)), Layer::Relu, Layer::GlobalAvgPool],
        LossKind::Hinge,
    );
    randomize(&mut net, &mut r);
    let x = random_tensor(&[1, 9, 9], &mut r);
    assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
}
