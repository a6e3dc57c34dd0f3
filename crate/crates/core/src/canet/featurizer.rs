//! Frozen random-weight patch transformer standing in for a pretrained
//! self-supervised image encoder.

use crate::nn::{positional_embedding, Mlp, MultiHeadAttention, Linear};
use crate::tensor::{Bindings, Graph, Init, ParamId, ParamStore, Result, Tensor, TensorError};
use crate::toy_world::{Image, CANVAS};

pub const FEATURE_PATCH: usize = 8;
/// CLS plus one token per 8×8 patch of the 32×32 canvas.
pub const FEATURE_TOKENS: usize = (CANVAS / FEATURE_PATCH) * (CANVAS / FEATURE_PATCH) + 1;

const HEADS: usize = 4;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeaturizerCapacity {
    Small,
    Base,
    Large,
}

impl FeaturizerCapacity {
    pub fn width(self) -> usize {
        match self {
            Self::Small => 32,
            Self::Base => 64,
            Self::Large => 128,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "small" | "s" => Some(Self::Small),
            "base" | "b" => Some(Self::Base),
            "large" | "l" => Some(Self::Large),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Small => "small",
            Self::Base => "base",
            Self::Large => "large",
        }
    }

    fn seed(self) -> u64 {
        0xFEA7_0000 + self.width() as u64
    }
}

/// One pre-LN transformer block over `[CLS, patch₁ … patch₁₆]` with fixed
/// seeded weights. Outputs are layer-normalized tokens, `[17, width]`.
#[derive(Clone, Debug)]
pub struct ToyFeaturizer {
    capacity: FeaturizerCapacity,
    store: ParamStore<f32>,
    embed: Linear,
    cls: ParamId,
    attn: MultiHeadAttention,
    mlp: Mlp,
    pos: Tensor<f32>,
}

impl ToyFeaturizer {
    pub fn new(capacity: FeaturizerCapacity) -> Self {
        let width = capacity.width();
        let mut store = ParamStore::new(capacity.seed());
        let embed = Linear::new(&mut store, "embed", FEATURE_PATCH * FEATURE_PATCH * 3, width, Init::XavierUniform, true);
        let cls = store.add("cls", &[1, width], Init::Normal(1.0));
        let attn = MultiHeadAttention::new(&mut store, "attn", width, HEADS);
        let mlp = Mlp::new(&mut store, "mlp", width, 2 * width, width);
        let mut frozen = ParamStore::new(capacity.seed());
        for id in store.ids() {
            let fid = frozen.add_frozen(store.name(id), store.shape(id), Init::Zeros);
            frozen.set(fid, store.get(id).clone());
        }
        let pos = positional_embedding(FEATURE_TOKENS - 1, width).expect("square patch grid");
        Self { capacity, store: frozen, embed, cls, attn, mlp, pos }
    }

    pub fn capacity(&self) -> FeaturizerCapacity {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.capacity.width()
    }

    /// `[17, width]` tokens; row 0 is CLS.
    pub fn features(&self, img: &Image) -> Result<Tensor<f32>> {
        if img.shape() != [CANVAS, CANVAS, 3] {
            return Err(TensorError::Shape { op: "featurizer", lhs: img.shape().to_vec(), rhs: vec![CANVAS, CANVAS, 3] });
        }
        let patches = crate::nn::patchify(img, FEATURE_PATCH, crate::nn::TokenRole::Source)?.into_tokens();
        let g = Graph::inference();
        let p = Bindings::new(&g, &self.store);
        let tokens = self.embed.forward(&p, g.constant(patches))?.add(g.constant(self.pos.clone()))?;
        let x = g.concat_rows(&[p.get(self.cls), tokens])?;
        let h = x.normalize(LN_EPS);
        let x = x.add(self.attn.forward(&p, h, h)?)?;
        let h = x.normalize(LN_EPS);
        let x = x.add(self.mlp.forward(&p, h)?)?;
        Ok(x.normalize(LN_EPS).value())
    }

    /// The CLS token alone, used as an image embedding.
    pub fn embedding(&self, img: &Image) -> Result<Vec<f32>> {
        Ok(self.features(img)?.row(0).to_vec())
    }
}
