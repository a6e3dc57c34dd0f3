//! Transformer building blocks and model configuration.

mod attention;
mod dit;
mod embed;

pub use attention::{attention_weights, scaled_dot_attention, MultiHeadAttention};
pub use dit::{DitBlock, FinalLayer};
pub use embed::{
    patchify, positional_embedding, timestep_sinusoid, unpatchify, PatchEmbed, TimestepEmbedder,
    TokenRole, TokenSequence,
};

use crate::tensor::{Bindings, Element, Init, ParamId, ParamStore, Result, Var};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown preset {0:?} (expected s, b, l, t or xt)")]
    UnknownPreset(String),
    #[error("{heads} heads do not divide width {width}")]
    Heads { width: usize, heads: usize },
    #[error("encoder ({n1}) + decoder ({n2}) layers must equal {layers}")]
    Split { n1: usize, n2: usize, layers: usize },
    #[error("latent side {side} is not divisible by patch size {patch}")]
    Patch { side: usize, patch: usize },
}

/// Architecture hyper-parameters shared by TDNet, CANet and MIPNet.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub latent_side: usize,
    pub latent_channels: usize,
    /// N₁: blocks run on visible tokens before MIPNet.
    pub encoder_layers: usize,
    /// N₂: blocks run on the full sequence after MIPNet.
    pub decoder_layers: usize,
    pub mlp_ratio: usize,
    pub freq_dim: usize,
    /// Largest diffusion timestep the embedder accepts.
    pub timesteps: usize,
    /// Featurizer sequence length (CLS + patches).
    pub feature_tokens: usize,
    pub pose_feature_width: usize,
    pub global_feature_width: usize,
    /// Hidden width of the aggregation MLP, as a multiple of `width`.
    pub agg_hidden_mult: usize,
}

/// Default encoder depth: ⌈2·layers/3⌉.
pub fn default_encoder_layers(layers: usize) -> usize {
    (2 * layers).div_ceil(3)
}

impl ModelConfig {
    /// Full-width presets use a 32×32×4 latent with 257 featurizer tokens;
    /// toy presets use an 8×8 latent with 17 featurizer tokens.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (layers, width, heads, full_scale) = match name.to_ascii_lowercase().as_str() {
            "s" => (12, 384, 6, true),
            "b" => (12, 768, 12, true),
            "l" => (24, 1024, 16, true),
            "t" => (4, 64, 4, false),
            "xt" => (2, 32, 2, false),
            _ => return Err(ConfigError::UnknownPreset(name.to_string())),
        };
        let n1 = default_encoder_layers(layers);
        let cfg = if full_scale {
            Self {
                preset: name.to_ascii_lowercase(),
                layers,
                width,
                heads,
                patch: 2,
                latent_side: 32,
                latent_channels: 4,
                encoder_layers: n1,
                decoder_layers: layers - n1,
                mlp_ratio: 4,
                freq_dim: 256,
                timesteps: 1000,
                feature_tokens: 257,
                pose_feature_width: width,
                global_feature_width: width,
                agg_hidden_mult: 1,
            }
        } else {
            Self {
                preset: name.to_ascii_lowercase(),
                layers,
                width,
                heads,
                patch: 2,
                latent_side: 8,
                latent_channels: crate::toy_world::LATENT_CHANNELS,
                encoder_layers: n1,
                decoder_layers: layers - n1,
                mlp_ratio: 4,
                freq_dim: 2 * width,
                timesteps: 1000,
                feature_tokens: crate::canet::FEATURE_TOKENS,
                pose_feature_width: crate::canet::FeaturizerCapacity::Base.width(),
                global_feature_width: crate::canet::FeaturizerCapacity::Large.width(),
                agg_hidden_mult: 1,
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.width % self.heads != 0 {
            return Err(ConfigError::Heads { width: self.width, heads: self.heads });
        }
        if self.encoder_layers + self.decoder_layers != self.layers {
            return Err(ConfigError::Split {
                n1: self.encoder_layers,
                n2: self.decoder_layers,
                layers: self.layers,
            });
        }
        if self.latent_side % self.patch != 0 {
            return Err(ConfigError::Patch { side: self.latent_side, patch: self.patch });
        }
        Ok(())
    }

    /// Number of latent tokens L = (side / p)².
    pub fn tokens(&self) -> usize {
        (self.latent_side / self.patch).pow(2)
    }

    /// Width of one raw patch, p·p·C.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels
    }

    pub fn grid_side(&self) -> usize {
        self.latent_side / self.patch
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[in_dim, out_dim], init);
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_dim], Init::Zeros));
        Self { weight, bias, in_dim, out_dim }
    }

    /// Zero weights and bias.
    pub fn zeros<E: Element>(store: &mut ParamStore<E>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self::new(store, name, in_dim, out_dim, Init::Zeros, true)
    }

    /// Accepts `[rows, in]` or a vector `[in]` (returned as `[out]`).
    pub fn forward<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, x: Var<'g, E>) -> Result<Var<'g, E>> {
        let shape = x.shape();
        let vector = shape.len() == 1;
        let x2 = if vector { x.reshape([1, shape[0]])? } else { x };
        let mut y = x2.matmul(p.get(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add_row(p.get(b))?;
        }
        if vector {
            y = y.reshape([self.out_dim])?;
        }
        Ok(y)
    }
}

/// Two linear layers with a tanh-GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, dim: usize, hidden: usize, out: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, Init::XavierUniform, true),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, Init::XavierUniform, true),
        }
    }

    pub fn forward<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, x: Var<'g, E>) -> Result<Var<'g, E>> {
        let h = self.fc1.forward(p, x)?.gelu();
        self.fc2.forward(p, h)
    }
}
