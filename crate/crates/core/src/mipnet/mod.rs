//! Token masking and the cross-view mask predictor: self-attention over
//! the masked target followed by cross-attention into the source tokens.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{MultiHeadAttention, TokenSequence};
use crate::tensor::{Bindings, Element, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("mask ratio {0} must lie strictly between 0 and 1")]
    Ratio(f64),
    #[error("mask was built for {spec} tokens but the sequence has {seq}")]
    Length { spec: usize, seq: usize },
}

/// Which target tokens are hidden. Indices are sorted and unique.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub ratio: f64,
    pub masked: Vec<usize>,
    pub len: usize,
    pub seed: u64,
}

impl MaskSpec {
    /// A mask hiding nothing.
    pub fn empty(len: usize) -> Self {
        Self { ratio: 0.0, masked: Vec::new(), len, seed: 0 }
    }

    /// Builds a spec from explicit indices (sorted and deduplicated).
    pub fn from_indices(len: usize, mut masked: Vec<usize>) -> std::result::Result<Self, MaskError> {
        masked.sort_unstable();
        masked.dedup();
        if let Some(&bad) = masked.iter().find(|&&i| i >= len) {
            return Err(MaskError::Length { spec: bad + 1, seq: len });
        }
        let ratio = masked.len() as f64 / len.max(1) as f64;
        Ok(Self { ratio, masked, len, seed: 0 })
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }

    /// Positions kept, in order.
    pub fn visible(&self) -> Vec<usize> {
        (0..self.len).filter(|&i| !self.is_masked(i)).collect()
    }
}

/// Uniform subset of `⌊ratio·len⌋` positions, drawn without replacement.
pub fn sample_mask(len: usize, ratio: f64, seed: u64) -> std::result::Result<MaskSpec, MaskError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(MaskError::Ratio(ratio));
    }
    let count = (ratio * len as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = sample(&mut rng, len, count).into_vec();
    masked.sort_unstable();
    Ok(MaskSpec { ratio, masked, len, seed })
}

/// Drops the masked rows of a token sequence, keeping order.
pub fn apply_mask<E: Element>(seq: &TokenSequence<E>, spec: &MaskSpec) -> std::result::Result<TokenSequence<E>, MaskError> {
    if seq.len() != spec.len {
        return Err(MaskError::Length { spec: spec.len, seq: seq.len() });
    }
    let width = seq.width();
    let mut data = Vec::with_capacity((spec.len - spec.masked.len()) * width);
    for i in spec.visible() {
        data.extend_from_slice(seq.tokens().row(i));
    }
    let rows = data.len() / width.max(1);
    Ok(TokenSequence::new(Tensor::new([rows, width], data).expect("row count"), seq.role()).expect("2-D"))
}

/// Graph version of [`apply_mask`].
pub fn drop_masked<'g, E: Element>(x: Var<'g, E>, spec: &MaskSpec) -> Result<Var<'g, E>> {
    if x.shape()[0] != spec.len {
        return Err(TensorError::Shape { op: "drop_masked", lhs: x.shape(), rhs: vec![spec.len] });
    }
    if spec.is_empty() {
        return Ok(x);
    }
    x.gather_rows(&spec.visible())
}

/// Restores a full-length sequence: visible rows come from `visible`, masked
/// rows are `fill` plus the positional embedding of their slot.
pub fn reinsert<'g, E: Element>(
    visible: Var<'g, E>,
    fill: Var<'g, E>,
    pos: &Tensor<E>,
    spec: &MaskSpec,
) -> Result<Var<'g, E>> {
    if spec.is_empty() {
        return Ok(visible);
    }
    let g = visible.graph();
    let n_vis = visible.shape()[0];
    let width = visible.shape()[1];
    let fill = if fill.shape()[0] == 1 { fill.repeat_rows(spec.len)? } else { fill };
    let stacked = g.concat_rows(&[visible, fill])?;
    let mut next_visible = 0;
    let index: Vec<usize> = (0..spec.len)
        .map(|i| {
            if spec.is_masked(i) {
                n_vis + i
            } else {
                next_visible += 1;
                next_visible - 1
            }
        })
        .collect();
    let full = stacked.gather_rows(&index)?;
    let mut extra = vec![E::zero(); spec.len * width];
    for &i in &spec.masked {
        extra[i * width..(i + 1) * width].copy_from_slice(pos.row(i));
    }
    full.add(g.constant(Tensor::new([spec.len, width], extra)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PredictorKind {
    /// Self-attention only; ignores the source.
    SelfOnly,
    Cross,
    CrossSelf,
    /// Self-attention then cross-attention into the source (the default).
    SelfCross,
}

impl PredictorKind {
    pub const ALL: [Self; 4] = [Self::SelfOnly, Self::Cross, Self::CrossSelf, Self::SelfCross];

    pub fn name(self) -> &'static str {
        match self {
            Self::SelfOnly => "self",
            Self::Cross => "cross",
            Self::CrossSelf => "cross-self",
            Self::SelfCross => "self-cross",
        }
    }

    pub fn uses_source(self) -> bool {
        self != Self::SelfOnly
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PredictorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| format!("unknown predictor {s:?} (expected self, cross, cross-self or self-cross)"))
    }
}

/// One attention block without norm or MLP. Counts its invocations so
/// tests can confirm it never runs at sampling time.
#[derive(Clone, Debug)]
pub struct Mipnet {
    pub kind: PredictorKind,
    pub self_attn: Option<MultiHeadAttention>,
    pub cross_attn: Option<MultiHeadAttention>,
    pub width: usize,
    calls: Arc<AtomicUsize>,
}

impl Mipnet {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, kind: PredictorKind, width: usize, heads: usize) -> Self {
        let needs_self = kind != PredictorKind::Cross;
        let self_attn = needs_self.then(|| MultiHeadAttention::new(store, &format!("{name}.self"), width, heads));
        let cross_attn = kind.uses_source().then(|| MultiHeadAttention::new(store, &format!("{name}.cross"), width, heads));
        Self { kind, self_attn, cross_attn, width, calls: Arc::new(AtomicUsize::new(0)) }
    }

    pub fn invocations(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Refines the (mask-filled) target sequence `z` using the source
    /// sequence `source`. Output length equals `z`'s.
    pub fn forward<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, z: Var<'g, E>, source: Var<'g, E>) -> Result<Var<'g, E>> {
        if z.shape()[1] != self.width || source.shape()[1] != self.width {
            return Err(TensorError::Shape { op: "mipnet", lhs: z.shape(), rhs: source.shape() });
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let sa = |x: Var<'g, E>| self.self_attn.as_ref().expect("self-attention present").forward(p, x, x);
        let ca = |x: Var<'g, E>| self.cross_attn.as_ref().expect("cross-attention present").forward(p, x, source);
        match self.kind {
            PredictorKind::SelfOnly => sa(z),
            PredictorKind::Cross => ca(z),
            PredictorKind::SelfCross => {
                let s = sa(z)?;
                s.add(ca(s)?)
            }
            PredictorKind::CrossSelf => {
                let c = ca(z)?;
                c.add(sa(c)?)
            }
        }
    }
}
