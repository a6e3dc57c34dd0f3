use crate::tensor::{Bindings, Element, ParamStore, Result, TensorError, Var};

use super::{Linear, Mlp, MultiHeadAttention};

const LN_EPS: f64 = 1e-6;

/// `x ⊙ (1 + scale) + shift`, written so that zero scale and shift return
/// `x` bit for bit.
fn modulate<'g, E: Element>(x: Var<'g, E>, shift: Var<'g, E>, scale: Var<'g, E>) -> Result<Var<'g, E>> {
    x.mul_row(scale)?.add(x)?.add_row(shift)
}

fn modulation<'g, E: Element>(
    p: &Bindings<'g, '_, E>,
    ada: &Linear,
    cond: Var<'g, E>,
    width: usize,
    parts: usize,
) -> Result<Vec<Var<'g, E>>> {
    if cond.shape().iter().product::<usize>() != ada.in_dim {
        return Err(TensorError::Shape { op: "adaln", lhs: cond.shape(), rhs: vec![ada.in_dim] });
    }
    let signals = ada.forward(p, cond.reshape([1, ada.in_dim])?.silu())?;
    (0..parts).map(|i| signals.slice_cols(i * width, width)).collect()
}

/// Pre-LN transformer block with AdaLN-Zero conditioning. The modulation
/// layer is zero-initialized, so a fresh block is the identity map.
#[derive(Clone, Debug)]
pub struct DitBlock {
    pub attn: MultiHeadAttention,
    pub mlp: Mlp,
    /// conditioning → (shift, scale, gate) for attention then for the MLP
    pub ada: Linear,
    pub width: usize,
}

impl DitBlock {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads),
            mlp: Mlp::new(store, &format!("{name}.mlp"), width, width * mlp_ratio, width),
            ada: Linear::zeros(store, &format!("{name}.ada"), width, 6 * width),
            width,
        }
    }

    pub fn forward<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, x: Var<'g, E>, cond: Var<'g, E>) -> Result<Var<'g, E>> {
        let m = modulation(p, &self.ada, cond, self.width, 6)?;
        let (shift_a, scale_a, gate_a, shift_m, scale_m, gate_m) = (m[0], m[1], m[2], m[3], m[4], m[5]);

        let h = modulate(x.normalize(LN_EPS), shift_a, scale_a)?;
        let x = x.add(self.attn.forward(p, h, h)?.mul_row(gate_a)?)?;

        let h = modulate(x.normalize(LN_EPS), shift_m, scale_m)?;
        x.add(self.mlp.forward(p, h)?.mul_row(gate_m)?)
    }
}

/// AdaLN-modulated norm followed by a projection back to patch space.
/// Both linear layers start at zero.
#[derive(Clone, Debug)]
pub struct FinalLayer {
    pub ada: Linear,
    pub linear: Linear,
    pub width: usize,
}

impl FinalLayer {
    pub fn new<E: Element>(store: &mut ParamStore<E>, name: &str, width: usize, out_dim: usize) -> Self {
        Self {
            ada: Linear::zeros(store, &format!("{name}.ada"), width, 2 * width),
            linear: Linear::zeros(store, &format!("{name}.linear"), width, out_dim),
            width,
        }
    }

    pub fn forward<'g, E: Element>(&self, p: &Bindings<'g, '_, E>, x: Var<'g, E>, cond: Var<'g, E>) -> Result<Var<'g, E>> {
        let m = modulation(p, &self.ada, cond, self.width, 2)?;
        let h = modulate(x.normalize(LN_EPS), m[0], m[1])?;
        self.linear.forward(p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(seed: u64) -> (ParamStore<f64>, DitBlock) {
        let mut store = ParamStore::new(seed);
        let b = DitBlock::new(&mut store, "blk", 8, 2, 4);
        (store, b)
    }

    #[test]
    fn fresh_block_is_identity() {
        let (store, b) = block(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let g = Graph::new();
            let p = Bindings::new(&g, &store);
            let x = Tensor::<f64>::randn([5, 8], &mut rng);
            let c = Tensor::<f64>::randn([8], &mut rng).map(|v| v * 3.0);
            let y = b.forward(&p, g.constant(x.clone()), g.constant(c)).unwrap();
            assert_eq!(y.value(), x);
        }
    }

    /// Plain pre-LN transformer block written with loops, no tape.
    fn vanilla_block(store: &ParamStore<f64>, b: &DitBlock, x: &Tensor<f64>) -> Tensor<f64> {
        let lin = |l: &Linear, x: &Tensor<f64>| {
            let w = store.get(l.weight);
            let bias = store.get(l.bias.unwrap());
            let mut out = Tensor::zeros([x.rows(), l.out_dim]);
            for r in 0..x.rows() {
                for o in 0..l.out_dim {
                    let mut acc = bias.data()[o];
                    for i in 0..l.in_dim {
                        acc += x.at(r, i) * w.at(i, o);
                    }
                    out.data_mut()[r * l.out_dim + o] = acc;
                }
            }
            out
        };
        let ln = |x: &Tensor<f64>| {
            let d = x.cols();
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                for c in 0..d {
                    out.data_mut()[r * d + c] = (row[c] - mean) / (var + 1e-6).sqrt();
                }
            }
            out
        };
        let heads = b.attn.heads;
        let h = ln(x);
        let (q, k, v) = (lin(&b.attn.query, &h), lin(&b.attn.key, &h), lin(&b.attn.value, &h));
        let (n, d) = (x.rows(), x.cols());
        let dk = d / heads;
        let mut mixed = Tensor::zeros([n, d]);
        for hd in 0..heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dk).map(|c| q.at(i, hd * dk + c) * k.at(j, hd * dk + c)).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for c in 0..dk {
                    mixed.data_mut()[i * d + hd * dk + c] =
                        (0..n).map(|j| (scores[j] - m).exp() / z * v.at(j, hd * dk + c)).sum();
                }
            }
        }
        let attn = lin(&b.attn.out, &mixed);
        let x1 = x.zip_map(&attn, |a, b| a + b).unwrap();
        let h2 = lin(&b.mlp.fc1, &ln(&x1)).map(crate::tensor::kernels::gelu);
        let m = lin(&b.mlp.fc2, &h2);
        x1.zip_map(&m, |a, b| a + b).unwrap()
    }

    #[test]
    fn unit_gates_reduce_to_vanilla_block() {
        let (mut store, b) = block(3);
        // bias: shift=0, scale=0, gate=1 for both branches
        let bias = Tensor::from_fn([48], |i| if (16..24).contains(&i) || (40..48).contains(&i) { 1.0 } else { 0.0 });
        store.set(b.ada.bias.unwrap(), bias);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f64>::randn([4, 8], &mut rng);
        let g = Graph::new();
        let p = Bindings::new(&g, &store);
        let cond = g.constant(Tensor::<f64>::randn([8], &mut rng));
        let y = b.forward(&p, g.constant(x.clone()), cond).unwrap().value();
        let want = vanilla_block(&store, &b, &x);
        assert!(y.max_abs_diff(&want) < 1e-12, "{}", y.max_abs_diff(&want));
    }

    #[test]
    fn conditioning_is_live_once_modulation_is_trained() {
        let (mut store, b) = block(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        store.set(b.ada.weight, Tensor::randn([8, 48], &mut rng));
        let g = Graph::new();
        let p = Bindings::new(&g, &store);
        let x = g.constant(Tensor::<f64>::randn([3, 8], &mut rng));
        let cond = g.leaf(Tensor::<f64>::randn([8], &mut rng));
        let y = b.forward(&p, x, cond).unwrap();
        g.backward(y.sum()).unwrap();
        assert!(cond.grad().unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn cond_width_mismatch_is_an_error() {
        let (store, b) = block(7);
        let g = Graph::new();
        let p = Bindings::new(&g, &store);
        let x = g.constant(Tensor::<f64>::zeros([3, 8]));
        assert!(b.forward(&p, x, g.constant(Tensor::zeros([5]))).is_err());
    }
}
