use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmdpt::canet::FEATURE_TOKENS;
use xmdpt::diffusion::{ddim_sample, Branch, GuidanceMode, GuidanceParams, NoiseSchedule};
use xmdpt::mipnet::{sample_mask, MaskSpec};
use xmdpt::model::*;
use xmdpt::nn::{timestep_sinusoid, ModelConfig, TimestepEmbedder};
use xmdpt::tensor::{Bindings, Graph, ParamStore, Tensor};

fn model(seed: u64) -> (ModelConfig, Xmdpt, ParamStore<f64>) {
    let cfg = ModelConfig::preset("xt").unwrap();
    let mut store = ParamStore::<f64>::new(seed);
    let m = Xmdpt::new(&mut store, &cfg, ModelOptions::default()).unwrap();
    // leave AdaLN-Zero and the final layer live so outputs depend on every stage
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.get(id).data().iter().all(|&v| v == 0.0) {
            let shape = store.shape(id).to_vec();
            store.set(id, Tensor::randn(shape, &mut rng).map(|v| 0.05 * v));
        }
    }
    (cfg, m, store)
}

fn inputs(cfg: &ModelConfig, seed: u64) -> ConditionInputs<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ConditionInputs {
        source: Tensor::randn([cfg.tokens(), cfg.patch_dim()], &mut rng),
        pose: Tensor::randn([FEATURE_TOKENS, cfg.pose_feature_width], &mut rng),
        global: Tensor::randn([FEATURE_TOKENS, cfg.global_feature_width], &mut rng),
    }
}

#[test]
fn empty_mask_path_matches_plain_path() {
    let (cfg, m, store) = model(1);
    let inp = inputs(&cfg, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noisy = Tensor::<f64>::randn([cfg.tokens(), cfg.patch_dim()], &mut rng);
    let g = Graph::inference();
    let p = Bindings::new(&g, &store);
    let c = m.condition(&p, &inp, Branch::Full).unwrap();
    let source = m.embed(&p, g.constant(inp.source.clone())).unwrap();
    let plain = m.denoise(&p, g.constant(noisy.clone()), 400, c).unwrap().value();
    let masked = m.denoise_masked(&p, g.constant(noisy), 400, c, source, &MaskSpec::empty(cfg.tokens()), false).unwrap().value();
    assert!(plain.max_abs_diff(&masked) <= 1e-9);
    assert_eq!(m.mipnet.invocations(), 0);
}

#[test]
fn masked_path_keeps_full_length() {
    let (cfg, m, store) = model(4);
    let inp = inputs(&cfg, 5);
    let g = Graph::inference();
    let p = Bindings::new(&g, &store);
    let c = m.condition(&p, &inp, Branch::Full).unwrap();
    let source = m.embed(&p, g.constant(inp.source.clone())).unwrap();
    for ratio in [0.3, 0.5, 0.7] {
        let mask = sample_mask(cfg.tokens(), ratio, 6).unwrap();
        let noisy = g.constant(Tensor::zeros([cfg.tokens(), cfg.patch_dim()]));
        let out = m.denoise_masked(&p, noisy, 10, c, source, &mask, false).unwrap();
        assert_eq!(out.shape(), vec![cfg.tokens(), cfg.patch_dim()]);
    }
    assert_eq!(m.mipnet.invocations(), 3);
    assert!(m.denoise_masked(&p, g.constant(Tensor::zeros([cfg.tokens(), cfg.patch_dim()])), 10, c, source, &MaskSpec::empty(3), false).is_err());
}

#[test]
fn total_loss_is_denoise_plus_mask() {
    let (cfg, m, store) = model(7);
    let inp = inputs(&cfg, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let target = Tensor::<f64>::randn([cfg.tokens(), cfg.patch_dim()], &mut rng);
    let draw = NoiseDraw {
        t: 250,
        eps: Tensor::randn([cfg.tokens(), cfg.patch_dim()], &mut rng),
        mask_draw: None,
        mask: sample_mask(cfg.tokens(), 0.3, 10).unwrap(),
        condition: Branch::Full,
    };
    let sched = NoiseSchedule::default();
    let g = Graph::new();
    let p = Bindings::new(&g, &store);
    let terms = m.losses(&p, &inp, &target, &draw, &sched, &LossOptions::default()).unwrap();
    let (d, k, t) = (terms.denoise.item(), terms.mask.unwrap().item(), terms.total.item());
    assert_eq!(t, d + k);
    let plain = m.losses(&p, &inp, &target, &draw, &sched, &LossOptions { mask_loss: false, ..Default::default() }).unwrap();
    assert!(plain.mask.is_none());
    assert_eq!(plain.total.item(), d);
}

#[test]
fn stop_grad_cuts_mask_loss_from_encoder() {
    let (cfg, m, store) = model(11);
    let inp = inputs(&cfg, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let target = Tensor::<f64>::randn([cfg.tokens(), cfg.patch_dim()], &mut rng);
    let draw = NoiseDraw {
        t: 600,
        eps: Tensor::randn([cfg.tokens(), cfg.patch_dim()], &mut rng),
        mask_draw: None,
        mask: sample_mask(cfg.tokens(), 0.5, 14).unwrap(),
        condition: Branch::Full,
    };
    let sched = NoiseSchedule::default();
    let encoder_grad = |stop_grad: bool| {
        let g = Graph::new();
        let p = Bindings::new(&g, &store);
        let terms = m.losses(&p, &inp, &target, &draw, &sched, &LossOptions { stop_grad, ..Default::default() }).unwrap();
        g.backward(terms.mask.unwrap()).unwrap();
        let id = store.find("blocks.0.attn.query.weight").unwrap();
        p.grads()[id.index()].clone()
    };
    let live = encoder_grad(false).unwrap();
    assert!(live.data().iter().any(|&v| v != 0.0));
    // block 0 is an encoder block, reached only through the visible tokens
    assert!(encoder_grad(true).is_none_or(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn sampling_never_runs_the_mask_predictor() {
    let (cfg, m, store) = model(15);
    let inp = inputs(&cfg, 16);
    let guided = GuidedModel::new(&m, &store, &inp).unwrap();
    let sched = NoiseSchedule::default();
    for mode in [GuidanceMode::Standard, GuidanceMode::Disentangled] {
        let gp = GuidanceParams { mode, ..Default::default() };
        let r = ddim_sample(&guided, &[cfg.tokens(), cfg.patch_dim()], 10, &sched, &gp, 17).unwrap();
        assert!(r.sample.all_finite());
    }
    assert_eq!(m.mipnet.invocations(), 0);
}

#[test]
fn unconditional_branch_ignores_inputs() {
    let (cfg, m, store) = model(18);
    let g = Graph::inference();
    let p = Bindings::new(&g, &store);
    let a = m.condition(&p, &inputs(&cfg, 19), Branch::Unconditional).unwrap().value();
    let b = m.condition(&p, &inputs(&cfg, 20), Branch::Unconditional).unwrap().value();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|&v| v == 0.0));
    let full = m.condition(&p, &inputs(&cfg, 19), Branch::Full).unwrap().value();
    let other = m.condition(&p, &inputs(&cfg, 20), Branch::Full).unwrap().value();
    assert_ne!(full, other);
}

#[test]
fn timestep_embeddings_are_deterministic_and_distinct() {
    let build = || {
        let mut store = ParamStore::<f64>::new(21);
        let e = TimestepEmbedder::new(&mut store, "t", 32, 16, 1000);
        (e, store)
    };
    let (e, store) = build();
    let (e2, store2) = build();
    let g = Graph::inference();
    let embed = |e: &TimestepEmbedder, s: &ParamStore<f64>, t| e.forward(&Bindings::new(&g, s), t).unwrap().value();
    assert_eq!(embed(&e, &store, 37), embed(&e2, &store2, 37));
    assert!(e.forward(&Bindings::new(&g, &store), 1001).is_err());
    let raw: Vec<Tensor<f64>> = (0..=1000).map(|t| timestep_sinusoid(t, 32)).collect();
    let min = raw.windows(2).map(|w| w[0].max_abs_diff(&w[1])).fold(f64::INFINITY, f64::min);
    assert!(min > 0.0);
}

#[test]
fn parameter_counts_grow_with_preset() {
    let counts: Vec<usize> =
        ["xt", "t", "s", "b", "l"].iter().map(|n| Xmdpt::param_count(&ModelConfig::preset(n).unwrap(), ModelOptions::default()).unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    assert_eq!(counts[0], 63_045);
    assert_eq!(counts[1], 379_781);
}
