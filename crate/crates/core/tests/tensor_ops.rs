use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmdpt::tensor::gradcheck::check_gradients;
use xmdpt::tensor::{Bindings, Graph, Init, ParamStore, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let g = Graph::<f64>::inference();
    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(eye.matmul(g.constant(m.clone())).unwrap().value(), m);
    let out = g.constant(t(&[1, 2], &[1.0, 2.0])).matmul(g.constant(t(&[2, 1], &[3.0, 4.0]))).unwrap().value();
    assert_eq!(out.data(), &[11.0]);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let g = Graph::<f64>::inference();
    let a = g.constant(Tensor::zeros([2, 3]));
    assert!(a.matmul(g.constant(Tensor::zeros([2, 3]))).is_err());
}

#[test]
fn matmul_gradient_matches_finite_difference() {
    let mut store = ParamStore::<f64>::new(11);
    let a = store.add("a", &[3, 3], Init::Normal(1.0));
    let b = store.add("b", &[3, 3], Init::Normal(1.0));
    let report = check_gradients(&store, 1e-5, 1e-6, 1e-8, |p: &Bindings<'_, '_, f64>| Ok(p.get(a).matmul(p.get(b))?.sum())).unwrap();
    assert_eq!(report.checked, 18);
    assert!(report.passed(), "{:?}", report.worst);
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::inference();
    let u = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0])).softmax().value();
    for v in u.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = t(&[1, 3], &[1.0, 2.0, 3.0]);
    let s = g.constant(x.clone()).softmax().value();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in s.data().iter().enumerate() {
        let want = ((i + 1) as f64).exp() / z;
        assert!((v - want).abs() / want <= 1e-12);
    }
    let shifted = g.constant(x.map(|v| v + 123.0)).softmax().value();
    assert!(shifted.max_abs_diff(&s) <= 1e-12);
}

#[test]
fn layer_norm_statistics_and_constant_rows() {
    let g = Graph::<f64>::inference();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gain = g.constant(Tensor::full([8], 1.0));
    let bias = g.constant(Tensor::zeros([8]));
    let y = g.constant(Tensor::randn([4, 8], &mut rng).map(|v| 3.0 * v + 1.5)).layer_norm(gain, bias, 1e-12).unwrap().value();
    for r in 0..4 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-9 && (var - 1.0).abs() <= 1e-6);
    }
    let flat = g.constant(Tensor::full([2, 8], 4.2)).layer_norm(gain, bias, 1e-6).unwrap().value();
    assert!(flat.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_gradient_matches_finite_difference() {
    let mut store = ParamStore::<f64>::new(5);
    let x = store.add("x", &[4, 8], Init::Normal(1.0));
    let gain = store.add("gain", &[8], Init::Normal(1.0));
    let bias = store.add("bias", &[8], Init::Normal(1.0));
    let w = Tensor::<f64>::from_fn([4, 8], |i| ((i * 7) % 5) as f64 - 2.0);
    let report = check_gradients(&store, 1e-5, 1e-5, 1e-8, |p: &Bindings<'_, '_, f64>| {
        let y = p.get(x).layer_norm(p.get(gain), p.get(bias), 1e-6)?;
        Ok(y.mul(p.graph().constant(w.clone()))?.sum())
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst);
}

#[test]
fn conv1x1_examples() {
    let g = Graph::<f64>::inference();
    let v = [0.5, -1.0, 2.0];
    let rows = g.constant(Tensor::from_fn([4, 3], |i| v[i % 3]));
    let avg = rows.conv1x1_over_channels(g.constant(Tensor::full([4], 0.25)), g.constant(Tensor::scalar(0.0))).unwrap();
    assert_eq!(avg.value().data(), &v);
    let x = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let out = x.conv1x1_over_channels(g.constant(t(&[2], &[2.0, 3.0])), g.constant(Tensor::scalar(1.0))).unwrap();
    assert_eq!(out.value().data(), &[3.0, 4.0]);
}

#[test]
fn conv1x1_weight_gradient_matches_finite_difference() {
    let mut store = ParamStore::<f64>::new(9);
    let w = store.add("w", &[5], Init::Normal(1.0));
    let b = store.add("b", &[], Init::Normal(1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::randn([5, 6], &mut rng);
    let report = check_gradients(&store, 1e-5, 1e-6, 1e-8, |p: &Bindings<'_, '_, f64>| {
        let y = p.graph().constant(x.clone()).conv1x1_over_channels(p.get(w), p.get(b))?;
        Ok(y.mul(y)?.sum())
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst);
}

#[test]
fn backward_of_sum_and_square() {
    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.5]));
    g.backward(x.sum()).unwrap();
    assert!(x.grad().unwrap().data().iter().all(|&v| v == 1.0));

    let g = Graph::<f64>::new();
    let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
    g.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn inference_values_equal_recorded_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::<f32>::randn([3, 4], &mut rng);
    let b = Tensor::<f32>::randn([4, 2], &mut rng);
    let run = |g: &Graph<f32>| g.constant(a.clone()).matmul(g.constant(b.clone())).unwrap().gelu().softmax().value();
    assert_eq!(run(&Graph::new()), run(&Graph::inference()));
}
