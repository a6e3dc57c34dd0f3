use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmdpt::canet::*;
use xmdpt::mipnet::*;
use xmdpt::nn::{ModelConfig, TokenRole, TokenSequence};
use xmdpt::tensor::{Bindings, Graph, ParamStore, Tensor};
use xmdpt::toy_world::{Corpus, CorpusConfig, Split};

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.shape(id).to_vec();
        store.set(id, Tensor::randn(shape, &mut rng).map(|v| 0.3 * v));
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn nonzero_rows(t: &Tensor<f64>) -> bool {
    (0..t.rows()).all(|r| t.row(r).iter().any(|&v| v != 0.0))
}

#[test]
fn uniform_reduce_of_identical_tokens_is_that_token() {
    let mut store = ParamStore::<f64>::new(1);
    let r = TokenReduce::new(&mut store, "r", 16, 8, 8);
    let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.25 - 1.0).collect();
    let g = Graph::inference();
    let p = Bindings::new(&g, &store);
    let x = g.constant(Tensor::from_fn([16, 8], |i| v[i % 8]));
    let out = r.forward(&p, x).unwrap().value();
    for (a, b) in out.data().iter().zip(&v) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn full_size_sequences_reduce_to_one_vector() {
    let mut store = ParamStore::<f32>::new(2);
    let local = TokenReduce::new(&mut store, "local", 256, 384, 384);
    let feat = TokenReduce::new(&mut store, "feat", 257, 384, 384);
    let g = Graph::inference();
    let p = Bindings::new(&g, &store);
    assert_eq!(local.forward(&p, g.constant(Tensor::zeros([256, 384]))).unwrap().shape(), vec![384]);
    assert_eq!(feat.forward(&p, g.constant(Tensor::zeros([257, 384]))).unwrap().shape(), vec![384]);
}

#[test]
fn local_reduce_gradient_reaches_every_token() {
    let mut store = ParamStore::<f64>::new(3);
    let r = TokenReduce::new(&mut store, "r", 16, 8, 8);
    randomize(&mut store, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let p = Bindings::new(&g, &store);
    let x = g.leaf(Tensor::randn([16, 8], &mut rng));
    let w = g.constant(Tensor::randn([8], &mut rng));
    g.backward(r.forward(&p, x).unwrap().mul(w).unwrap().sum()).unwrap();
    assert!(nonzero_rows(&x.grad().unwrap()));
}

#[test]
fn pose_vectors_are_deterministic_and_distinct() {
    let corpus = Corpus::generate(&CorpusConfig { identities: 6, test_identities: 2, ..Default::default() }).unwrap();
    let cfg = ModelConfig::preset("xt").unwrap();
    let mut store = ParamStore::<f32>::new(6);
    let canet = Canet::new(&mut store, &cfg, "P".parse().unwrap(), Aggregation::Sum).unwrap();
    let feat = ToyFeaturizer::new(FeaturizerCapacity::Base);
    let source = TokenSequence::new(Tensor::zeros([cfg.tokens(), cfg.width]), TokenRole::Source).unwrap();
    let global = TokenSequence::new(Tensor::zeros([FEATURE_TOKENS, 128]), TokenRole::GlobalFeature).unwrap();
    let v_pose = |id: usize, pose: usize| {
        let tokens = TokenSequence::new(feat.features(&corpus.pose_image(id, pose)).unwrap(), TokenRole::PoseFeature).unwrap();
        canet.bundle(&store, &source, &tokens, &global).unwrap().pose.unwrap()
    };
    assert_eq!(v_pose(0, 0), v_pose(0, 0));
    let vs: Vec<Vec<f64>> = corpus
        .identities
        .iter()
        .flat_map(|r| (0..r.poses.len()).map(move |p| (r.id, p)))
        .map(|(id, p)| v_pose(id, p).data().iter().map(|&x| x as f64).collect())
        .collect();
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            assert!(cosine(&vs[i], &vs[j]) < 1.0, "poses {i} and {j} collapse");
        }
    }
}

#[test]
fn global_vectors_group_views_of_one_identity() {
    let corpus = Corpus::generate(&CorpusConfig::default()).unwrap();
    let cfg = ModelConfig::preset("xt").unwrap();
    let mut store = ParamStore::<f32>::new(7);
    let canet = Canet::new(&mut store, &cfg, "G".parse().unwrap(), Aggregation::Sum).unwrap();
    let feat = ToyFeaturizer::new(FeaturizerCapacity::Large);
    let source = TokenSequence::new(Tensor::zeros([cfg.tokens(), cfg.width]), TokenRole::Source).unwrap();
    let pose = TokenSequence::new(Tensor::zeros([FEATURE_TOKENS, 64]), TokenRole::PoseFeature).unwrap();
    let mut vectors = vec![];
    for r in corpus.identities_in(Split::Test) {
        for v in 0..r.views.len() {
            let tokens = TokenSequence::new(feat.features(&corpus.source_image(r.id, v)).unwrap(), TokenRole::GlobalFeature).unwrap();
            let c = canet.bundle(&store, &source, &pose, &tokens).unwrap().global.unwrap();
            vectors.push((r.id, c.data().iter().map(|&x| x as f64).collect::<Vec<_>>()));
        }
    }
    let (mut same, mut cross) = ((0.0, 0usize), (0.0, 0usize));
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let s = cosine(&vectors[i].1, &vectors[j].1);
            let slot = if vectors[i].0 == vectors[j].0 { &mut same } else { &mut cross };
            slot.0 += s;
            slot.1 += 1;
        }
    }
    let (same, cross) = (same.0 / same.1 as f64, cross.0 / cross.1 as f64);
    assert!(same > cross, "same {same} cross {cross}");
}

#[test]
fn featurizer_capacities_differ_in_width() {
    let widths: Vec<usize> = ["small", "base", "large"].iter().map(|n| FeaturizerCapacity::parse(n).unwrap().width()).collect();
    assert_eq!(widths, [32, 64, 128]);
}

fn build(conditions: &str, aggregation: Aggregation) -> (ModelConfig, Canet, ParamStore<f64>) {
    let cfg = ModelConfig::preset("xt").unwrap();
    let mut store = ParamStore::<f64>::new(8);
    let canet = Canet::new(&mut store, &cfg, conditions.parse().unwrap(), aggregation).unwrap();
    randomize(&mut store, 9);
    (cfg, canet, store)
}

#[test]
fn sum_of_local_alone_is_local() {
    let (cfg, canet, store) = build("LPG", Aggregation::Sum);
    let g = Graph::inference();
    let p = Bindings::new(&g, &store);
    let local = g.constant(Tensor::from_fn([cfg.width], |i| i as f64 - 3.5));
    let v = ConditionVectors { local: Some(local), pose: None, global: None };
    assert_eq!(canet.aggregate(&p, &v).unwrap().value(), local.value());
}

#[test]
fn every_ablation_subset_and_mode_builds() {
    let cfg = ModelConfig::preset("xt").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let source = Tensor::<f64>::randn([cfg.tokens(), cfg.width], &mut rng);
    let pose = Tensor::<f64>::randn([FEATURE_TOKENS, cfg.pose_feature_width], &mut rng);
    let global = Tensor::<f64>::randn([FEATURE_TOKENS, cfg.global_feature_width], &mut rng);
    for set in ["LP", "PG", "LPG"] {
        for mode in [Aggregation::Sum, Aggregation::ConcatConv, Aggregation::Mlp] {
            let (_, canet, store) = build(set, mode);
            let g = Graph::inference();
            let p = Bindings::new(&g, &store);
            let c = canet.forward(&p, g.constant(source.clone()), g.constant(pose.clone()), g.constant(global.clone())).unwrap();
            assert_eq!(c.shape(), vec![cfg.width]);
            // repeated evaluation is bit-identical
            let again = canet.forward(&p, g.constant(source.clone()), g.constant(pose.clone()), g.constant(global.clone())).unwrap();
            assert_eq!(c.value(), again.value());
        }
    }
}

#[test]
fn mlp_fusion_responds_to_each_input() {
    let (cfg, canet, store) = build("LPG", Aggregation::Mlp);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = Graph::new();
    let p = Bindings::new(&g, &store);
    let [l, po, gl] = [0, 1, 2].map(|_| g.leaf(Tensor::randn([cfg.width], &mut rng)));
    let w = g.constant(Tensor::randn([cfg.width], &mut rng));
    let c = canet.aggregate(&p, &ConditionVectors { local: Some(l), pose: Some(po), global: Some(gl) }).unwrap();
    g.backward(c.mul(w).unwrap().sum()).unwrap();
    for x in [l, po, gl] {
        assert!(x.grad().unwrap().data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn inactive_inputs_receive_no_gradient() {
    let (cfg, canet, store) = build("LP", Aggregation::Mlp);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = Graph::new();
    let p = Bindings::new(&g, &store);
    let source = g.leaf(Tensor::randn([cfg.tokens(), cfg.width], &mut rng));
    let pose = g.leaf(Tensor::randn([FEATURE_TOKENS, cfg.pose_feature_width], &mut rng));
    let global = g.leaf(Tensor::randn([FEATURE_TOKENS, cfg.global_feature_width], &mut rng));
    g.backward(canet.forward(&p, source, pose, global).unwrap().sum()).unwrap();
    assert!(global.grad().is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
    assert!(pose.grad().unwrap().data().iter().any(|&v| v != 0.0));
    assert!(store.find("canet.global.reduce.weight").is_none());
}

#[test]
fn bundle_checks_sequence_roles() {
    let (cfg, canet, store) = build("LPG", Aggregation::Mlp);
    let source = TokenSequence::new(Tensor::zeros([cfg.tokens(), cfg.width]), TokenRole::Source).unwrap();
    let pose = TokenSequence::new(Tensor::zeros([FEATURE_TOKENS, cfg.pose_feature_width]), TokenRole::PoseFeature).unwrap();
    let global = TokenSequence::new(Tensor::zeros([FEATURE_TOKENS, cfg.global_feature_width]), TokenRole::GlobalFeature).unwrap();
    assert!(canet.bundle(&store, &source, &pose, &global).is_ok());
    assert!(canet.bundle(&store, &pose, &pose, &global).is_err());
}

#[test]
fn zero_vectors_have_no_similarity() {
    assert!(view_similarity(&[0.0f64; 4], &[1.0, 0.0, 0.0, 0.0]).is_err());
}

proptest! {
    #[test]
    fn similarity_is_bounded(a in prop::collection::vec(-1e3f64..1e3, 8), b in prop::collection::vec(-1e3f64..1e3, 8)) {
        if let Ok(s) = view_similarity(&a, &b) {
            prop_assert!(s.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn mask_count_is_exact(len in 1usize..300, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let m = sample_mask(len, ratio, seed).unwrap();
        prop_assert_eq!(m.masked.len(), (ratio * len as f64).floor() as usize);
        prop_assert!(m.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(m.masked.iter().all(|&i| i < len));
    }
}

#[test]
fn mask_positions_are_uniform() {
    // toy sequence length
    let (len, ratio, n) = (16, 0.5, 10_000);
    let mut hits = [0usize; 16];
    for seed in 0..n {
        for i in sample_mask(len, ratio, seed as u64).unwrap().masked {
            hits[i] += 1;
        }
    }
    let sigma = (ratio * (1.0 - ratio) / n as f64).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        let f = h as f64 / n as f64;
        assert!((f - ratio).abs() <= 3.0 * sigma, "position {i}: {f}");
    }
}

#[test]
fn empty_mask_keeps_every_token() {
    let seq = TokenSequence::new(Tensor::<f64>::from_fn([5, 3], |i| i as f64), TokenRole::NoisyTarget).unwrap();
    assert_eq!(apply_mask(&seq, &MaskSpec::empty(5)).unwrap(), seq);
    assert!(apply_mask(&seq, &MaskSpec::empty(4)).is_err());
}

fn identity(store: &mut ParamStore<f64>, lin: &xmdpt::nn::Linear) {
    let d = lin.in_dim;
    store.set(lin.weight, Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }));
}

#[test]
fn single_tokens_with_identity_projections_add_up() {
    let mut store = ParamStore::<f64>::new(13);
    let net = Mipnet::new(&mut store, "m", PredictorKind::SelfCross, 4, 1);
    for a in [net.self_attn.as_ref().unwrap(), net.cross_attn.as_ref().unwrap()] {
        for lin in [&a.query, &a.key, &a.value, &a.out] {
            identity(&mut store, lin);
        }
    }
    let g = Graph::inference();
    let p = Bindings::new(&g, &store);
    let z = Tensor::from_f64([1, 4], &[0.5, -1.0, 2.0, 0.25]).unwrap();
    let xs = Tensor::from_f64([1, 4], &[1.0, 1.5, -0.5, 3.0]).unwrap();
    let out = net.forward(&p, g.constant(z.clone()), g.constant(xs.clone())).unwrap().value();
    assert_eq!(out, z.zip_map(&xs, |a, b| a + b).unwrap());
}

#[test]
fn zero_cross_values_leave_self_attention() {
    let mut store = ParamStore::<f64>::new(14);
    let net = Mipnet::new(&mut store, "m", PredictorKind::SelfCross, 8, 2);
    randomize(&mut store, 15);
    let value = net.cross_attn.as_ref().unwrap().value.clone();
    store.set(value.weight, Tensor::zeros([8, 8]));
    store.set(value.bias.unwrap(), Tensor::zeros([8]));
    let out_bias = net.cross_attn.as_ref().unwrap().out.bias.unwrap();
    store.set(out_bias, Tensor::zeros([8]));
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let z = Tensor::<f64>::randn([5, 8], &mut rng);
    let xs = Tensor::<f64>::randn([7, 8], &mut rng);
    let g = Graph::inference();
    let p = Bindings::new(&g, &store);
    let out = net.forward(&p, g.constant(z.clone()), g.constant(xs)).unwrap().value();
    let zv = g.constant(z);
    let alone = net.self_attn.as_ref().unwrap().forward(&p, zv, zv).unwrap().value();
    assert_eq!(out, alone);
}

#[test]
fn source_sensitivity_by_predictor_kind() {
    for kind in PredictorKind::ALL {
        let mut store = ParamStore::<f64>::new(17);
        let net = Mipnet::new(&mut store, "m", kind, 8, 2);
        randomize(&mut store, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let g = Graph::new();
        let p = Bindings::new(&g, &store);
        let z = g.leaf(Tensor::randn([6, 8], &mut rng));
        let xs = g.leaf(Tensor::randn([6, 8], &mut rng));
        let w = g.constant(Tensor::randn([6, 8], &mut rng));
        let out = net.forward(&p, z, xs).unwrap();
        assert_eq!(out.shape(), vec![6, 8]);
        g.backward(out.mul(w).unwrap().sum()).unwrap();
        let grad = xs.grad();
        if kind.uses_source() {
            assert!(nonzero_rows(&grad.unwrap()), "{kind}");
        } else {
            assert!(grad.is_none_or(|t| t.data().iter().all(|&v| v == 0.0)), "{kind}");
        }
    }
}

#[test]
fn predictor_kinds_name_their_stages() {
    let mut store = ParamStore::<f32>::layout_only();
    let only_self = Mipnet::new(&mut store, "a", PredictorKind::SelfOnly, 8, 2);
    assert!(only_self.cross_attn.is_none());
    let only_cross = Mipnet::new(&mut store, "b", PredictorKind::Cross, 8, 2);
    assert!(only_cross.self_attn.is_none());
    assert_eq!(xmdpt::model::ModelOptions::default().predictor, PredictorKind::SelfCross);
}
