use crate::tensor::{Bindings, Element, Init, ParamStore, Result, Tensor, TensorError, Var};

use super::Linear;

/// What a token sequence holds. Fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRole {
    NoisyTarget,
    Source,
    PoseFeature,
    GlobalFeature,
}

/// An `L × D` grid of token vectors tagged with its role.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<E> {
    tokens: Tensor<E>,
    role: TokenRole,
}

impl<E: Element> TokenSequence<E> {
    pub fn new(tokens: Tensor<E>, role: TokenRole) -> Result<Self> {
        if tokens.shape().len() != 2 {
            return Err(TensorError::Shape { op: "token_sequence", lhs: tokens.shape().to_vec(), rhs: vec![] });
        }
        Ok(Self { tokens, role })
    }

    pub fn role(&self) -> TokenRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens(&self) -> &Tensor<E> {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor<E> {
        self.tokens
    }
}

/// Splits an `H×W×C` latent into `(H/p)·(W/p)` raw patch tokens of width
/// `p·p·C` (the identity projection). Tokens are in row-major grid order.
pub fn patchify<E: Element>(latent: &Tensor<E>, p: usize, role: TokenRole) -> Result<TokenSequence<E>> {
    let s = latent.shape();
    if s.len() != 3 || p == 0 || s[0] % p != 0 || s[1] % p != 0 {
        return Err(TensorError::Shape { op: "patchify", lhs: s.to_vec(), rhs: vec![p] });
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    let src = latent.data();
    let mut out = vec![E::zero(); gh * gw * dim];
    for gi in 0..gh {
        for gj in 0..gw {
            let tok = gi * gw + gj;
            for di in 0..p {
                for dj in 0..p {
                    let pix = ((gi * p + di) * w + gj * p + dj) * c;
                    let dst = tok * dim + (di * p + dj) * c;
                    out[dst..dst + c].copy_from_slice(&src[pix..pix + c]);
                }
            }
        }
    }
    TokenSequence::new(Tensor::new([gh * gw, dim], out)?, role)
}

/// Inverse of [`patchify`].
pub fn unpatchify<E: Element>(tokens: &Tensor<E>, p: usize, h: usize, w: usize, c: usize) -> Result<Tensor<E>> {
    let (gh, gw) = (h / p, w / p);
    let dim = p * p * c;
    if h % p != 0 || w % p != 0 || tokens.shape() != [gh * gw, dim] {
        return Err(TensorError::Shape { op: "unpatchify", lhs: tokens.shape().to_vec(), rhs: vec![h, w, c] });
    }
    let src = tokens.data();
    let mut out = vec![E::zero(); h * w * c];
    for gi in 0..gh {
        for gj in 0..gw {
            let tok = gi * gw + gj;
            for di in 0..p {
                for dj in 0..p {
                    let pix = ((gi * p + di) * w + gj * p + dj) * c;
                    let s = tok * dim + (di * p + dj) * c;
                    out[pix..pix + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    Tensor::new([h, w, c], out)
}

fn sincos_1d(pos: f64, dim: usize, out: &mut [f64]) {
    let quarter = dim / 2;
    for i in 0..quarter {
        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
        out[i] = (pos * omega).sin();
        out[quarter + i] = (pos * omega).cos();
    }
}

/// Fixed 2-D sine/cosine table for a square grid of `L` tokens. The first
/// half of each row encodes the column, the second half the row.
pub fn positional_embedding<E: Element>(len: usize, dim: usize) -> Result<Tensor<E>> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len || dim % 4 != 0 {
        return Err(TensorError::Shape { op: "positional_embedding", lhs: vec![len], rhs: vec![dim] });
    }
    let mut table = vec![0.0; len * dim];
    for r in 0..side {
        for c in 0..side {
            let row = &mut table[(r * side + c) * dim..(r * side + c + 1) * dim];
            let (first, second) = row.split_at_mut(dim / 2);
            sincos_1d(c as f64, dim / 2, first);
            sincos_1d(r as f64, dim / 2, second);
        }
    }
    Tensor::from_f64([len, dim], &table)
}

/// `[sin(t·f₀) … sin(t·f_{k-1}), cos(t·f₀) … cos(t·f_{k-1})]` with
/// geometrically spaced frequencies `f_i = 10000^{-i/k}`.
pub fn timestep_sinusoid<E: Element>(t: usize, dim: usize) -> Tensor<E> {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (t as f64 * f).sin();
        v[half + i] = (t as f64 * f).cos();
    }
    Tensor::from_f64([dim], &v).expect("length matches")
}

/// Sinusoidal features followed by a two-layer SiLU MLP.
#[derive(Clone, Debug)]
pub struct TimestepEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
    pub freq_dim: usize,
    pub max_timestep: usize,
}

impl TimestepEmbedder {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, freq_dim: usize, width: usize, max_timestep: usize) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), freq_dim, width, Init::Normal(0.02), true),
            fc2: Linear::new(store, &format!("{name}.fc2"), width, width, Init::Normal(0.02), true),
            freq_dim,
            max_timestep,
        }
    }

    pub fn forward<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, t: usize) -> Result<Var<'g, E>> {
        if t > self.max_timestep {
            return Err(TensorError::Invalid(format!("timestep {t} outside [0, {}]", self.max_timestep)));
        }
        let feats = p.graph().constant(timestep_sinusoid(t, self.freq_dim));
        let h = self.fc1.forward(p, feats)?.silu();
        self.fc2.forward(p, h)
    }
}

/// Learnable projection of raw `p·p·C` patches to model width.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, patch_dim: usize, width: usize) -> Self {
        Self { proj: Linear::new(store, &format!("{name}.proj"), patch_dim, width, Init::XavierUniform, true) }
    }

    pub fn forward<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, patches: Var<'g, E>) -> Result<Var<'g, E>> {
        self.proj.forward(p, patches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_round_trip_is_exact() {
        let latent = Tensor::<f64>::from_fn([4, 4, 1], |i| i as f64 * 0.5 - 3.0);
        let seq = patchify(&latent, 2, TokenRole::NoisyTarget).unwrap();
        assert_eq!((seq.len(), seq.width()), (4, 4));
        // first token is the top-left 2×2 block
        assert_eq!(seq.tokens().row(0), &[latent.data()[0], latent.data()[1], latent.data()[4], latent.data()[5]]);
        let back = unpatchify(seq.tokens(), 2, 4, 4, 1).unwrap();
        assert_eq!(back, latent);
    }

    #[test]
    fn patch_counts_at_full_and_toy_scale() {
        let full = Tensor::<f32>::zeros([32, 32, 4]);
        assert_eq!(patchify(&full, 2, TokenRole::Source).unwrap().len(), 256);
        let toy = Tensor::<f32>::zeros([8, 8, 2]);
        assert_eq!(patchify(&toy, 2, TokenRole::Source).unwrap().len(), 16);
        assert!(patchify(&Tensor::<f32>::zeros([5, 4, 1]), 2, TokenRole::Source).is_err());
    }

    #[test]
    fn role_is_kept() {
        let seq = patchify(&Tensor::<f32>::zeros([4, 4, 1]), 2, TokenRole::Source).unwrap();
        assert_eq!(seq.role(), TokenRole::Source);
    }

    #[test]
    fn positional_rows_match_scalar_sinusoids() {
        let d = 8;
        let table = positional_embedding::<f64>(4, d).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let row = table.row(r * 2 + c);
                for i in 0..2 {
                    let omega = 1.0 / 10000f64.powf(i as f64 / 2.0);
                    assert_eq!(row[i], (c as f64 * omega).sin());
                    assert_eq!(row[2 + i], (c as f64 * omega).cos());
                    assert_eq!(row[4 + i], (r as f64 * omega).sin());
                    assert_eq!(row[6 + i], (r as f64 * omega).cos());
                }
            }
        }
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(table.row(a), table.row(b));
            }
        }
        assert_eq!(table, positional_embedding::<f64>(4, d).unwrap());
    }

    #[test]
    fn timestep_zero_is_sin_zero_cos_one() {
        let e = timestep_sinusoid::<f64>(0, 8);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn timestep_sinusoids_are_distinct() {
        let embs: Vec<_> = (0..=1000).map(|t| timestep_sinusoid::<f64>(t, 32)).collect();
        let mut min = f64::INFINITY;
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d: f64 = embs[i].data().iter().zip(embs[j].data()).map(|(a, b)| (a - b).powi(2)).sum();
                min = min.min(d);
            }
        }
        assert!(min > 0.0);
    }
}
