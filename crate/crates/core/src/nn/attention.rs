use crate::tensor::{Bindings, Element, Init, ParamStore, Result, TensorError, Var};

use super::Linear;

/// `Softmax(Q·Kᵀ / √d_k)` for one head.
pub fn attention_weights<'g, E: Element>(q: Var<'g, E>, k: Var<'g, E>) -> Result<Var<'g, E>> {
    let dk = q.shape()[1];
    Ok(q.matmul_nt(k)?.scale(1.0 / (dk as f64).sqrt()).softmax())
}

/// Multi-head scaled dot-product attention over already-projected inputs.
/// Heads are contiguous column blocks; outputs are concatenated.
pub fn scaled_dot_attention<'g, E: Element>(
    q: Var<'g, E>,
    k: Var<'g, E>,
    v: Var<'g, E>,
    heads: usize,
) -> Result<Var<'g, E>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(TensorError::Shape { op: "attention", lhs: qs, rhs: ks });
    }
    if heads == 0 || qs[1] % heads != 0 || vs[1] % heads != 0 {
        return Err(TensorError::Invalid(format!("{heads} heads do not divide width {}", qs[1])));
    }
    if heads == 1 {
        return attention_weights(q, k)?.matmul(v);
    }
    let (dk, dv) = (qs[1] / heads, vs[1] / heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let w = attention_weights(q.slice_cols(h * dk, dk)?, k.slice_cols(h * dk, dk)?)?;
        outs.push(w.matmul(v.slice_cols(h * dv, dv)?)?);
    }
    q.graph().concat_cols(&outs)
}

/// Attention with learned Q/K/V/output projections. Queries come from one
/// sequence, keys and values from another (the same one for self-attention).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, width: usize, heads: usize) -> Self {
        let lin = |s: &mut ParamStore<E>, n: &str| Linear::new(s, &format!("{name}.{n}"), width, width, Init::XavierUniform, true);
        Self {
            query: lin(store, "query"),
            key: lin(store, "key"),
            value: lin(store, "value"),
            out: lin(store, "out"),
            heads,
        }
    }

    pub fn forward<'g, E: Element>(
        &self,
        p: &Bindings<'g, '_, E>,
        queries: Var<'g, E>,
        context: Var<'g, E>,
    ) -> Result<Var<'g, E>> {
        let q = self.query.forward(p, queries)?;
        let k = self.key.forward(p, context)?;
        let v = self.value.forward(p, context)?;
        let mixed = scaled_dot_attention(q, k, v, self.heads)?;
        self.out.forward(p, mixed)
    }
}
