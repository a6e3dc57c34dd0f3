//! Condition aggregation: local source, pose and global source features
//! reduced to vectors and fused into one conditioning vector `c`.

mod featurizer;

pub use featurizer::{FeaturizerCapacity, ToyFeaturizer, FEATURE_PATCH, FEATURE_TOKENS};

use std::fmt;
use std::str::FromStr;

use crate::nn::{Linear, ModelConfig, TokenRole, TokenSequence};
use crate::tensor::{Bindings, Element, Graph, Init, ParamId, ParamStore, Result, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Aggregation {
    Sum,
    ConcatConv,
    Mlp,
}

impl Aggregation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sum => "sum",
            Self::ConcatConv => "concat-conv",
            Self::Mlp => "mlp",
        }
    }
}

impl FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(Self::Sum),
            "concat-conv" | "concat" => Ok(Self::ConcatConv),
            "mlp" => Ok(Self::Mlp),
            _ => Err(format!("unknown aggregation {s:?} (expected sum, concat-conv or mlp)")),
        }
    }
}

/// Which of the three condition inputs feed the aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConditionSet {
    pub local: bool,
    pub pose: bool,
    pub global: bool,
}

impl ConditionSet {
    pub const ALL: Self = Self { local: true, pose: true, global: true };

    pub fn active(self) -> usize {
        self.local as usize + self.pose as usize + self.global as usize
    }
}

impl fmt::Display for ConditionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (on, ch) in [(self.local, 'L'), (self.pose, 'P'), (self.global, 'G')] {
            if on {
                write!(f, "{ch}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for ConditionSet {
    type Err = String;
    /// Letters from `L`, `P`, `G` in any order, e.g. `LP` or `LPG`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut set = Self { local: false, pose: false, global: false };
        for ch in s.chars() {
            let slot = match ch.to_ascii_uppercase() {
                'L' => &mut set.local,
                'P' => &mut set.pose,
                'G' => &mut set.global,
                _ => return Err(format!("unknown condition {ch:?} in {s:?} (use L, P, G)")),
            };
            if *slot {
                return Err(format!("condition {ch:?} repeated in {s:?}"));
            }
            *slot = true;
        }
        if set.active() == 0 {
            return Err("at least one condition must be active".into());
        }
        Ok(set)
    }
}

/// Learnable 1×1 reduction of a token sequence to one vector, with an
/// optional projection to model width.
#[derive(Clone, Debug)]
pub struct TokenReduce {
    pub weight: ParamId,
    pub bias: ParamId,
    pub proj: Option<Linear>,
    pub tokens: usize,
}

impl TokenReduce {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, tokens: usize, in_width: usize, width: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.reduce.weight"), &[tokens], Init::Const(1.0 / tokens as f64)),
            bias: store.add(format!("{name}.reduce.bias"), &[1], Init::Zeros),
            proj: (in_width != width).then(|| Linear::new(store, &format!("{name}.proj"), in_width, width, Init::XavierUniform, true)),
            tokens,
        }
    }

    pub fn forward<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, x: Var<'g, E>) -> Result<Var<'g, E>> {
        let v = x.conv1x1_over_channels(p.get(self.weight), p.get(self.bias))?;
        match &self.proj {
            Some(l) => l.forward(p, v),
            None => Ok(v),
        }
    }
}

#[derive(Clone, Debug)]
enum Fuse {
    Sum,
    Conv { weight: ParamId, bias: ParamId },
    Mlp { fc1: Linear, fc2: Linear },
}

/// The three reduced condition vectors, `None` where inactive.
pub struct ConditionVectors<'g, E: Element> {
    pub local: Option<Var<'g, E>>,
    pub pose: Option<Var<'g, E>>,
    pub global: Option<Var<'g, E>>,
}

#[derive(Clone, Debug)]
pub struct Canet {
    pub conditions: ConditionSet,
    pub aggregation: Aggregation,
    pub width: usize,
    local: Option<TokenReduce>,
    pose: Option<TokenReduce>,
    global: Option<TokenReduce>,
    fuse: Fuse,
}

impl Canet {
    pub fn new<E: Element>(
        store: &mut ParamStore<E>,
        cfg: &ModelConfig,
        conditions: ConditionSet,
        aggregation: Aggregation,
    ) -> Result<Self> {
        if conditions.active() == 0 {
            return Err(TensorError::Invalid("CANet needs at least one active condition".into()));
        }
        let d = cfg.width;
        let local = conditions.local.then(|| TokenReduce::new(store, "canet.local", cfg.tokens(), d, d));
        let pose = conditions
            .pose
            .then(|| TokenReduce::new(store, "canet.pose", cfg.feature_tokens, cfg.pose_feature_width, d));
        let global = conditions
            .global
            .then(|| TokenReduce::new(store, "canet.global", cfg.feature_tokens, cfg.global_feature_width, d));
        let k = conditions.active();
        let fuse = match aggregation {
            Aggregation::Sum => Fuse::Sum,
            Aggregation::ConcatConv => Fuse::Conv {
                weight: store.add("canet.fuse.weight", &[k], Init::Const(1.0)),
                bias: store.add("canet.fuse.bias", &[1], Init::Zeros),
            },
            Aggregation::Mlp => {
                let hidden = cfg.agg_hidden_mult * d;
                Fuse::Mlp {
                    fc1: Linear::new(store, "canet.fuse.fc1", k * d, hidden, Init::XavierUniform, true),
                    fc2: Linear::new(store, "canet.fuse.fc2", hidden, d, Init::XavierUniform, true),
                }
            }
        };
        Ok(Self { conditions, aggregation, width: d, local, pose, global, fuse })
    }

    /// Reduces each active input. `source` is the embedded source latent
    /// sequence `[L, D]`; `pose` and `global` are featurizer tokens.
    pub fn vectors<'g, E: Element>(
        &self,
        p: &Bindings<'g, '_, E>,
        source: Var<'g, E>,
        pose: Var<'g, E>,
        global: Var<'g, E>,
    ) -> Result<ConditionVectors<'g, E>> {
        let run = |r: &Option<TokenReduce>, x: Var<'g, E>| r.as_ref().map(|r| r.forward(p, x)).transpose();
        Ok(ConditionVectors { local: run(&self.local, source)?, pose: run(&self.pose, pose)?, global: run(&self.global, global)? })
    }

    /// Fuses the active vectors into `c ∈ R^D`. Missing active inputs are
    /// read as zero vectors.
    pub fn aggregate<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, v: &ConditionVectors<'g, E>) -> Result<Var<'g, E>> {
        let g = p.graph();
        let zero = || g.constant(Tensor::zeros([self.width]));
        let inputs: Vec<Var<'g, E>> = [(self.conditions.local, v.local), (self.conditions.pose, v.pose), (self.conditions.global, v.global)]
            .into_iter()
            .filter(|(on, _)| *on)
            .map(|(_, x)| x.unwrap_or_else(zero))
            .collect();
        if inputs.is_empty() {
            return Err(TensorError::Invalid("no active condition inputs".into()));
        }
        for x in &inputs {
            if x.shape() != [self.width] {
                return Err(TensorError::Shape { op: "aggregate", lhs: x.shape(), rhs: vec![self.width] });
            }
        }
        match &self.fuse {
            Fuse::Sum => inputs[1..].iter().try_fold(inputs[0], |acc, &x| acc.add(x)),
            Fuse::Conv { weight, bias } => {
                let rows: Vec<_> = inputs.iter().map(|x| x.reshape([1, self.width])).collect::<Result<_>>()?;
                g.concat_rows(&rows)?.conv1x1_over_channels(p.get(*weight), p.get(*bias))
            }
            Fuse::Mlp { fc1, fc2 } => {
                let rows: Vec<_> = inputs.iter().map(|x| x.reshape([1, self.width])).collect::<Result<_>>()?;
                let h = fc1.forward(p, g.concat_cols(&rows)?)?.gelu();
                fc2.forward(p, h)?.reshape([self.width])
            }
        }
    }

    pub fn forward<'g, E: Element>(
        &self,
        p: &Bindings<'g, '_, E>,
        source: Var<'g, E>,
        pose: Var<'g, E>,
        global: Var<'g, E>,
    ) -> Result<Var<'g, E>> {
        let v = self.vectors(p, source, pose, global)?;
        self.aggregate(p, &v)
    }

    /// Inference-mode evaluation returning every intermediate vector.
    pub fn bundle<E: Element>(
        &self,
        store: &ParamStore<E>,
        source: &TokenSequence<E>,
        pose: &TokenSequence<E>,
        global: &TokenSequence<E>,
    ) -> Result<ConditionBundle<E>> {
        for (seq, want) in [(source, TokenRole::Source), (pose, TokenRole::PoseFeature), (global, TokenRole::GlobalFeature)] {
            if seq.role() != want {
                return Err(TensorError::Invalid(format!("expected a {want:?} sequence, got {:?}", seq.role())));
            }
        }
        let g = Graph::inference();
        let p = Bindings::new(&g, store);
        let v = self.vectors(&p, g.constant(source.tokens().clone()), g.constant(pose.tokens().clone()), g.constant(global.tokens().clone()))?;
        let c = self.aggregate(&p, &v)?.value();
        Ok(ConditionBundle {
            local: v.local.map(|x| x.value()),
            pose: v.pose.map(|x| x.value()),
            global: v.global.map(|x| x.value()),
            c,
            aggregation: self.aggregation,
            conditions: self.conditions,
        })
    }
}

/// Condition vectors after reduction and the fused result.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle<E> {
    pub local: Option<Tensor<E>>,
    pub pose: Option<Tensor<E>>,
    pub global: Option<Tensor<E>>,
    pub c: Tensor<E>,
    pub aggregation: Aggregation,
    pub conditions: ConditionSet,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SimilarityError {
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,
    #[error("vector lengths differ: {0} vs {1}")]
    Length(usize, usize),
}

/// Cosine similarity of two condition vectors, clamped to `[-1, 1]`.
pub fn view_similarity<E: Element>(a: &[E], b: &[E]) -> std::result::Result<f64, SimilarityError> {
    if a.len() != b.len() {
        return Err(SimilarityError::Length(a.len(), b.len()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(SimilarityError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn condition_sets_parse_and_print() {
        for s in ["LP", "PG", "LPG", "L", "G"] {
            assert_eq!(s.parse::<ConditionSet>().unwrap().to_string(), s);
        }
        assert_eq!("gpl".parse::<ConditionSet>().unwrap(), ConditionSet::ALL);
        assert!("".parse::<ConditionSet>().is_err());
        assert!("LX".parse::<ConditionSet>().is_err());
        assert!("LL".parse::<ConditionSet>().is_err());
    }

    #[test]
    fn similarity_basics() {
        assert_eq!(view_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(view_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(view_similarity(&[0.0f64, 0.0], &[0.0, 1.0]), Err(SimilarityError::ZeroVector));
    }
}
