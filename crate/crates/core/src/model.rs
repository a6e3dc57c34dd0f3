//! The full denoiser: patch embedding, condition aggregation, AdaLN-Zero
//! transformer stack, and the training-only masked path through MIPNet.

use crate::canet::{Aggregation, Canet, ConditionSet, ConditionVectors};
use crate::diffusion::{forward_noise, noise_mse, noise_mse_rows, Branch, NoisePredictor, NoiseSchedule};
use crate::mipnet::{drop_masked, reinsert, MaskSpec, Mipnet, PredictorKind};
use crate::nn::{positional_embedding, DitBlock, FinalLayer, ModelConfig, PatchEmbed, TimestepEmbedder};
use crate::tensor::{Bindings, Element, Graph, Init, ParamId, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelOptions {
    pub conditions: ConditionSet,
    pub aggregation: Aggregation,
    pub predictor: PredictorKind,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { conditions: ConditionSet::ALL, aggregation: Aggregation::Mlp, predictor: PredictorKind::SelfCross }
    }
}

/// Condition inputs for one example, all precomputed outside the graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionInputs<E> {
    /// Patchified source latent, `[L, p·p·C]`.
    pub source: Tensor<E>,
    /// Pose featurizer tokens, `[17, F_pose]`.
    pub pose: Tensor<E>,
    /// Global featurizer tokens, `[17, F_global]`.
    pub global: Tensor<E>,
}

impl<E: Element> ConditionInputs<E> {
    pub fn cast<F: Element>(&self) -> ConditionInputs<F> {
        ConditionInputs { source: self.source.cast(), pose: self.pose.cast(), global: self.global.cast() }
    }
}

#[derive(Clone, Debug)]
pub struct Xmdpt {
    pub config: ModelConfig,
    pub options: ModelOptions,
    pub patch_embed: PatchEmbed,
    pub timestep: TimestepEmbedder,
    pub canet: Canet,
    pub blocks: Vec<DitBlock>,
    pub final_layer: FinalLayer,
    pub mask_token: ParamId,
    pub mipnet: Mipnet,
    pos: Tensor<f64>,
}

impl Xmdpt {
    pub fn new<E: Element>(store: &mut ParamStore<E>, config: &ModelConfig, options: ModelOptions) -> Result<Self> {
        config.validate().map_err(|e| TensorError::Invalid(e.to_string()))?;
        let d = config.width;
        let patch_embed = PatchEmbed::new(store, "x_embed", config.patch_dim(), d);
        let timestep = TimestepEmbedder::new(store, "t_embed", config.freq_dim, d, config.timesteps);
        let canet = Canet::new(store, config, options.conditions, options.aggregation)?;
        let blocks = (0..config.layers)
            .map(|i| DitBlock::new(store, &format!("blocks.{i}"), d, config.heads, config.mlp_ratio))
            .collect();
        let final_layer = FinalLayer::new(store, "final", d, config.patch_dim());
        let mask_token = store.add("mask_token", &[1, d], Init::Normal(0.02));
        let mipnet = Mipnet::new(store, "mipnet", options.predictor, d, config.heads);
        let pos = if store.is_materialized() { positional_embedding(config.tokens(), d)? } else { Tensor::zeros([0]) };
        Ok(Self { config: config.clone(), options, patch_embed, timestep, canet, blocks, final_layer, mask_token, mipnet, pos })
    }

    /// Trainable parameter count, computed without allocating weights.
    pub fn param_count(config: &ModelConfig, options: ModelOptions) -> Result<usize> {
        let mut store = ParamStore::<f32>::layout_only();
        Self::new(&mut store, config, options)?;
        Ok(store.num_trainable())
    }

    pub fn positional<E: Element>(&self) -> Tensor<E> {
        self.pos.cast()
    }

    /// Patch tokens → width-D tokens with positions added.
    pub fn embed<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, patches: Var<'g, E>) -> Result<Var<'g, E>> {
        self.patch_embed.forward(p, patches)?.add(p.graph().constant(self.positional()))
    }

    /// The condition vector for a guidance branch. The unconditional
    /// branch is the zero vector; the pose-only branch zeroes the source
    /// inputs before aggregation.
    pub fn condition<'g, E: Element>(
        &self,
        p: &Bindings<'g, '_, E>,
        inputs: &ConditionInputs<E>,
        branch: Branch,
    ) -> Result<Var<'g, E>> {
        let g = p.graph();
        if branch == Branch::Unconditional {
            return Ok(g.constant(Tensor::zeros([self.config.width])));
        }
        let source = self.embed(p, g.constant(inputs.source.clone()))?;
        let mut v = self.canet.vectors(p, source, g.constant(inputs.pose.clone()), g.constant(inputs.global.clone()))?;
        if branch == Branch::PoseOnly {
            v = ConditionVectors { local: None, pose: v.pose, global: None };
        }
        self.canet.aggregate(p, &v)
    }

    fn conditioning<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, c: Var<'g, E>, t: usize) -> Result<Var<'g, E>> {
        c.add(self.timestep.forward(p, t)?)
    }

    /// Plain path: every block on the full sequence. Returns predicted
    /// noise in patch-token form.
    pub fn denoise<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, noisy: Var<'g, E>, t: usize, c: Var<'g, E>) -> Result<Var<'g, E>> {
        let cond = self.conditioning(p, c, t)?;
        let mut x = self.embed(p, noisy)?;
        for b in &self.blocks {
            x = b.forward(p, x, cond)?;
        }
        self.final_layer.forward(p, x, cond)
    }

    /// Masked path: encoder blocks on the visible tokens, mask tokens
    /// re-inserted and refined by MIPNet using the source sequence, then
    /// decoder blocks on the full sequence. With `stop_grad` the encoder
    /// output is detached before MIPNet.
    #[allow(clippy::too_many_arguments)]
    pub fn denoise_masked<'g, E: Element>(
        &self,
        p: &Bindings<'g, '_, E>,
        noisy: Var<'g, E>,
        t: usize,
        c: Var<'g, E>,
        source: Var<'g, E>,
        mask: &MaskSpec,
        stop_grad: bool,
    ) -> Result<Var<'g, E>> {
        if mask.len != self.config.tokens() {
            return Err(TensorError::Shape { op: "denoise_masked", lhs: vec![mask.len], rhs: vec![self.config.tokens()] });
        }
        let cond = self.conditioning(p, c, t)?;
        let pos = self.positional::<E>();
        let mut x = drop_masked(self.embed(p, noisy)?, mask)?;
        let (enc, dec) = self.blocks.split_at(self.config.encoder_layers);
        for b in enc {
            x = b.forward(p, x, cond)?;
        }
        if stop_grad {
            x = x.detach();
        }
        if !mask.is_empty() {
            let filled = reinsert(x, p.get(self.mask_token), &pos, mask)?;
            let predicted = self.mipnet.forward(p, filled, source)?;
            x = reinsert(x, predicted, &pos, mask)?;
        }
        for b in dec {
            x = b.forward(p, x, cond)?;
        }
        self.final_layer.forward(p, x, cond)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Add the masked-path loss (off gives a plain diffusion transformer).
    pub mask_loss: bool,
    /// Score the masked path on masked positions only.
    pub masked_only: bool,
    pub stop_grad: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { mask_loss: true, masked_only: false, stop_grad: false }
    }
}

/// Random quantities of one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<E> {
    pub t: usize,
    pub eps: Tensor<E>,
    /// Separate `(t, ε)` for the masked path; `None` shares the first.
    pub mask_draw: Option<(usize, Tensor<E>)>,
    pub mask: MaskSpec,
    /// `Unconditional` is the classifier-free guidance drop (zero
    /// condition); `PoseOnly` zeroes the source inputs.
    pub condition: Branch,
}

pub struct LossTerms<'g, E: Element> {
    pub denoise: Var<'g, E>,
    pub mask: Option<Var<'g, E>>,
    pub total: Var<'g, E>,
}

impl Xmdpt {
    /// `L_total = L_denoise + L_mask` for one example with latent target
    /// `target` (patch-token form).
    pub fn losses<'g, E: Element>(
        &self,
        p: &Bindings<'g, '_, E>,
        inputs: &ConditionInputs<E>,
        target: &Tensor<E>,
        draw: &NoiseDraw<E>,
        sched: &NoiseSchedule,
        opts: &LossOptions,
    ) -> Result<LossTerms<'g, E>> {
        let g = p.graph();
        let invalid = |e: crate::diffusion::DiffusionError| TensorError::Invalid(e.to_string());
        let source = self.embed(p, g.constant(inputs.source.clone()))?;
        let c = match draw.condition {
            Branch::Unconditional => g.constant(Tensor::zeros([self.config.width])),
            branch => {
                let mut v = self.canet.vectors(p, source, g.constant(inputs.pose.clone()), g.constant(inputs.global.clone()))?;
                if branch == Branch::PoseOnly {
                    v = ConditionVectors { local: None, pose: v.pose, global: None };
                }
                self.canet.aggregate(p, &v)?
            }
        };
        let noisy = forward_noise(target, draw.t, &draw.eps, sched).map_err(invalid)?;
        let pred = self.denoise(p, g.constant(noisy.clone()), draw.t, c)?;
        let denoise = noise_mse(pred, &draw.eps)?;
        if !opts.mask_loss {
            return Ok(LossTerms { denoise, mask: None, total: denoise });
        }
        let (t2, eps2, noisy2) = match &draw.mask_draw {
            Some((t2, e2)) => (*t2, e2, forward_noise(target, *t2, e2, sched).map_err(invalid)?),
            None => (draw.t, &draw.eps, noisy),
        };
        let pred2 = self.denoise_masked(p, g.constant(noisy2), t2, c, source, &draw.mask, opts.stop_grad)?;
        let mask = if opts.masked_only { noise_mse_rows(pred2, eps2, &draw.mask.masked)? } else { noise_mse(pred2, eps2)? };
        Ok(LossTerms { denoise, mask: Some(mask), total: denoise.add(mask)? })
    }
}

/// A model with fixed weights and precomputed condition vectors, ready for
/// the sampler.
pub struct GuidedModel<'a, E: Element> {
    pub model: &'a Xmdpt,
    pub store: &'a ParamStore<E>,
    pub full: Tensor<E>,
    pub pose_only: Tensor<E>,
}

impl<'a, E: Element> GuidedModel<'a, E> {
    pub fn new(model: &'a Xmdpt, store: &'a ParamStore<E>, inputs: &ConditionInputs<E>) -> Result<Self> {
        let g = Graph::inference();
        let p = Bindings::new(&g, store);
        let full = model.condition(&p, inputs, Branch::Full)?.value();
        let pose_only = model.condition(&p, inputs, Branch::PoseOnly)?.value();
        Ok(Self { model, store, full, pose_only })
    }
}

impl<E: Element> NoisePredictor<E> for GuidedModel<'_, E> {
    fn predict(&self, y: &Tensor<E>, t: usize, branch: Branch) -> Result<Tensor<E>> {
        let g = Graph::inference();
        let p = Bindings::new(&g, self.store);
        let c = match branch {
            Branch::Full => self.full.clone(),
            Branch::PoseOnly => self.pose_only.clone(),
            Branch::Unconditional => Tensor::zeros([self.model.config.width]),
        };
        Ok(self.model.denoise(&p, g.constant(y.clone()), t, g.constant(c))?.value())
    }
}
