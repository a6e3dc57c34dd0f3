//! Joint denoise + mask training with Adam and EMA weights.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::PreparedCorpus;
use crate::diffusion::{Branch, NoiseSchedule};
use crate::mipnet::{sample_mask, MaskSpec};
use crate::model::{LossOptions, ModelOptions, NoiseDraw, Xmdpt};
use crate::nn::ModelConfig;
use crate::optim::{Adam, AdamConfig, Ema};
use crate::tensor::{Bindings, Graph, ParamStore, Tensor, TensorError};
use crate::toy_world::{PairRef, Split};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (batch seed {batch_seed}): {detail}")]
    NonFinite { step: u64, batch_seed: u64, detail: String },
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error("checkpoint does not fit this model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub ema_decay: f64,
    pub seed: u64,
    pub mask_ratio: f64,
    pub loss: LossOptions,
    /// Draw a separate `(t, ε)` for the masked path.
    pub independent_draws: bool,
    /// Probability of training on the zero condition.
    pub eta: f64,
    /// Probability of training on the pose-only condition.
    pub source_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            lr: 1e-4,
            ema_decay: 0.9999,
            seed: 0,
            mask_ratio: 0.3,
            loss: LossOptions::default(),
            independent_draws: false,
            eta: 0.1,
            source_drop: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub batch_seed: u64,
    pub denoise: f64,
    pub mask: Option<f64>,
    pub total: f64,
}

/// Everything random about one example.
#[derive(Clone, Debug)]
pub struct Example {
    pub pair: PairRef,
    pub draw: NoiseDraw<f32>,
}

/// Draws one example from `pairs` using `rng`.
pub fn draw_example(
    rng: &mut ChaCha8Rng,
    pairs: &[PairRef],
    model: &ModelConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Example {
    let pair = pairs[rng.random_range(0..pairs.len())];
    let shape = [model.tokens(), model.patch_dim()];
    let t = rng.random_range(1..=sched.steps);
    let eps = Tensor::randn(shape, rng);
    let mask_draw = cfg.independent_draws.then(|| (rng.random_range(1..=sched.steps), Tensor::randn(shape, rng)));
    let mask_seed = rng.next_u64();
    let mask = if cfg.mask_ratio > 0.0 {
        sample_mask(model.tokens(), cfg.mask_ratio, mask_seed).unwrap_or_else(|_| MaskSpec::empty(model.tokens()))
    } else {
        MaskSpec::empty(model.tokens())
    };
    let u: f64 = rng.random();
    let condition = if u < cfg.eta {
        Branch::Unconditional
    } else if u < cfg.eta + cfg.source_drop {
        Branch::PoseOnly
    } else {
        Branch::Full
    };
    Example { pair, draw: NoiseDraw { t, eps, mask_draw, mask, condition } }
}

pub struct Trainer {
    pub model: Xmdpt,
    pub store: ParamStore<f32>,
    pub opt: Adam<f32>,
    pub ema: Ema<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, options: ModelOptions, config: TrainConfig, schedule: NoiseSchedule) -> Result<Self, TrainError> {
        let mut store = ParamStore::new(config.seed);
        let model = Xmdpt::new(&mut store, model_cfg, options)?;
        let opt = Adam::new(&store, AdamConfig { lr: config.lr, ..Default::default() });
        let ema = Ema::new(&store, config.ema_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_7a1e);
        Ok(Self { model, store, opt, ema, rng, step: 0, schedule, config })
    }

    /// One optimizer step on a freshly drawn batch of training pairs.
    pub fn step(&mut self, data: &PreparedCorpus) -> Result<StepStats, TrainError> {
        let pairs = data.pairs(Split::Train);
        if pairs.is_empty() {
            return Err(TrainError::EmptySplit("train"));
        }
        let batch_seed = self.rng.next_u64();
        let mut brng = ChaCha8Rng::seed_from_u64(batch_seed);
        let batch: Vec<Example> =
            (0..self.config.batch).map(|_| draw_example(&mut brng, &pairs, &self.model.config, &self.schedule, &self.config)).collect();
        let g = Graph::new();
        let p = Bindings::new(&g, &self.store);
        let (total, mut stats) = batch_loss(&self.model, &p, data, &batch, &self.schedule, &self.config.loss)?;
        stats.step = self.step;
        stats.batch_seed = batch_seed;
        let non_finite = |detail: String| TrainError::NonFinite { step: self.step, batch_seed, detail };
        if !stats.total.is_finite() {
            return Err(non_finite(format!("loss = {}", stats.total)));
        }
        g.backward(total).map_err(|e| non_finite(e.to_string()))?;
        let grads = p.grads();
        drop(p);
        self.opt.step(&mut self.store, &grads);
        self.ema.update(&self.store);
        self.step += 1;
        Ok(stats)
    }

    /// Weights with the EMA shadow applied.
    pub fn ema_store(&self) -> ParamStore<f32> {
        self.ema.apply(&self.store)
    }

    pub fn checkpoint(&self, config_text: &str) -> Checkpoint {
        let table = |tensors: &[Tensor<f32>]| -> Vec<(String, Tensor<f32>)> {
            self.store.ids().map(|id| (self.store.name(id).to_string(), tensors[id.index()].clone())).collect()
        };
        let params: Vec<Tensor<f32>> = self.store.ids().map(|id| self.store.get(id).clone()).collect();
        Checkpoint {
            config: config_text.to_string(),
            params: table(&params),
            ema: table(&self.ema.shadow),
            adam_first: table(&self.opt.first),
            adam_second: table(&self.opt.second),
            adam_steps: self.opt.steps,
            rng: RngState::capture(&self.rng),
            step: self.step,
        }
    }

    /// Rebuilds a trainer from a checkpoint taken with the same model
    /// configuration.
    pub fn restore(
        model_cfg: &ModelConfig,
        options: ModelOptions,
        config: TrainConfig,
        schedule: NoiseSchedule,
        ck: &Checkpoint,
    ) -> Result<Self, TrainError> {
        let mut t = Self::new(model_cfg, options, config, schedule)?;
        let params = load_table(&ck.params, &t.store)?;
        t.ema.shadow = load_table(&ck.ema, &t.store)?;
        t.opt.first = load_table(&ck.adam_first, &t.store)?;
        t.opt.second = load_table(&ck.adam_second, &t.store)?;
        t.opt.steps = ck.adam_steps;
        t.ema.updates = ck.step;
        let ids: Vec<_> = t.store.ids().collect();
        for (id, v) in ids.into_iter().zip(params) {
            t.store.set(id, v);
        }
        t.rng = ck.rng.restore();
        t.step = ck.step;
        Ok(t)
    }
}

/// Tensors of `table` in store order, checked by name and shape.
pub fn load_table(table: &[(String, Tensor<f32>)], store: &ParamStore<f32>) -> Result<Vec<Tensor<f32>>, TrainError> {
    if table.len() != store.len() {
        return Err(TrainError::Mismatch(format!("{} tensors in checkpoint, model has {}", table.len(), store.len())));
    }
    store
        .ids()
        .zip(table)
        .map(|(id, (name, tensor))| {
            if store.name(id) != name || store.shape(id) != tensor.shape() {
                return Err(TrainError::Mismatch(format!("{name} {:?} vs {} {:?}", tensor.shape(), store.name(id), store.shape(id))));
            }
            Ok(tensor.clone())
        })
        .collect()
}

/// The model with the checkpoint's EMA weights, for sampling and eval.
pub fn inference_model(model_cfg: &ModelConfig, options: ModelOptions, ck: &Checkpoint) -> Result<(Xmdpt, ParamStore<f32>), TrainError> {
    let mut store = ParamStore::new(0);
    let model = Xmdpt::new(&mut store, model_cfg, options)?;
    let weights = load_table(&ck.ema, &store)?;
    let ids: Vec<_> = store.ids().collect();
    for (id, w) in ids.into_iter().zip(weights) {
        store.set(id, w);
    }
    Ok((model, store))
}

/// Mean `L_total` over a batch on one graph, plus scalar summaries.
pub fn batch_loss<'g>(
    model: &Xmdpt,
    p: &Bindings<'g, '_, f32>,
    data: &PreparedCorpus,
    batch: &[Example],
    sched: &NoiseSchedule,
    opts: &LossOptions,
) -> Result<(crate::tensor::Var<'g, f32>, StepStats), TensorError> {
    let scale = 1.0 / batch.len().max(1) as f64;
    let (mut total, mut denoise, mut mask) = (None::<crate::tensor::Var<'g, f32>>, 0.0, None::<f64>);
    for ex in batch {
        let terms = model.losses(p, &data.inputs(ex.pair), data.target(ex.pair), &ex.draw, sched, opts)?;
        denoise += terms.denoise.item() as f64 * scale;
        if let Some(m) = terms.mask {
            *mask.get_or_insert(0.0) += m.item() as f64 * scale;
        }
        let scaled = terms.total.scale(scale);
        total = Some(match total {
            None => scaled,
            Some(acc) => acc.add(scaled)?,
        });
    }
    let total = total.ok_or_else(|| TensorError::Invalid("empty batch".into()))?;
    let value = total.item() as f64;
    Ok((total, StepStats { step: 0, batch_seed: 0, denoise, mask, total: value }))
}

/// Fixed validation examples: the same draws for every model evaluated
/// with the same seed.
pub fn validation_set(data: &PreparedCorpus, model: &ModelConfig, sched: &NoiseSchedule, cfg: &TrainConfig, count: usize, seed: u64) -> Result<Vec<Example>, TrainError> {
    let pairs = data.pairs(Split::Test);
    if pairs.is_empty() {
        return Err(TrainError::EmptySplit("test"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TrainConfig { eta: 0.0, source_drop: 0.0, ..*cfg };
    Ok((0..count).map(|_| draw_example(&mut rng, &pairs, model, sched, &cfg)).collect())
}

/// Mean losses of `store` on fixed examples, evaluated without a tape.
pub fn evaluate(model: &Xmdpt, store: &ParamStore<f32>, data: &PreparedCorpus, examples: &[Example], sched: &NoiseSchedule, opts: &LossOptions) -> Result<StepStats, TensorError> {
    let mut acc = StepStats { step: 0, batch_seed: 0, denoise: 0.0, mask: None, total: 0.0 };
    for chunk in examples.chunks(16) {
        let g = Graph::inference();
        let p = Bindings::new(&g, store);
        let (_, s) = batch_loss(model, &p, data, chunk, sched, opts)?;
        let w = chunk.len() as f64 / examples.len() as f64;
        acc.denoise += s.denoise * w;
        acc.total += s.total * w;
        if let Some(m) = s.mask {
            *acc.mask.get_or_insert(0.0) += m * w;
        }
    }
    Ok(acc)
}
