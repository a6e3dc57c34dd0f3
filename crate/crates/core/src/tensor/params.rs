use std::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, NodeId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
    /// Glorot uniform over the first two axes (`[fan_in, fan_out]`).
    XavierUniform,
}

#[derive(Clone, Debug)]
struct Entry<E> {
    name: String,
    shape: Vec<usize>,
    value: Option<Tensor<E>>,
    trainable: bool,
}

/// Named, ordered parameter table.
///
/// A layout-only store records names and shapes without allocating, which
/// is how full-size presets are counted.
#[derive(Clone, Debug)]
pub struct ParamStore<E> {
    entries: Vec<Entry<E>>,
    rng: Option<ChaCha8Rng>,
}

impl<E: Element> ParamStore<E> {
    pub fn new(seed: u64) -> Self {
        Self { entries: Vec::new(), rng: Some(ChaCha8Rng::seed_from_u64(seed)) }
    }

    pub fn layout_only() -> Self {
        Self { entries: Vec::new(), rng: None }
    }

    pub fn is_materialized(&self) -> bool {
        self.rng.is_some()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.insert(name.into(), shape, init, true)
    }

    /// Parameter that is stored and serialized but never trained.
    pub fn add_frozen(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.insert(name.into(), shape, init, false)
    }

    fn insert(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let value = self.rng.as_mut().map(|rng| match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Const(c) => Tensor::full(shape, E::lit(c)),
            Init::Uniform(b) => Tensor::uniform(shape, b, rng),
            Init::Normal(std) => Tensor::<E>::randn(shape, rng).map(|v| v * E::lit(std)),
            Init::XavierUniform => {
                let fan_in = shape[0];
                let fan_out = shape.get(1).copied().unwrap_or(1);
                Tensor::uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
            }
        });
        self.entries.push(Entry { name, shape: shape.to_vec(), value, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Panics on a layout-only store.
    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        self.entries[id.0].value.as_ref().expect("layout-only parameter store has no values")
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        self.entries[id.0].value.as_mut().expect("layout-only parameter store has no values")
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<E>) {
        assert_eq!(value.shape(), self.shape(id), "shape of {}", self.name(id));
        self.entries[id.0].value = Some(value);
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.shape.iter().product::<usize>()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    value: e.value.as_ref().map(|t| t.cast()),
                    trainable: e.trainable,
                })
                .collect(),
            rng: self.rng.clone(),
        }
    }
}

/// Lazily binds store parameters onto one graph.
pub struct Bindings<'g, 's, E: Element> {
    graph: &'g Graph<E>,
    store: &'s ParamStore<E>,
    bound: RefCell<Vec<Option<NodeId>>>,
}

impl<'g, 's, E: Element> Bindings<'g, 's, E> {
    pub fn new(graph: &'g Graph<E>, store: &'s ParamStore<E>) -> Self {
        Self { graph, store, bound: RefCell::new(vec![None; store.len()]) }
    }

    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore<E> {
        self.store
    }

    pub fn get(&self, id: ParamId) -> Var<'g, E> {
        if let Some(node) = self.bound.borrow()[id.0] {
            return self.graph.var(node);
        }
        let value = self.store.get(id).clone();
        let var = if self.store.is_trainable(id) { self.graph.leaf(value) } else { self.graph.constant(value) };
        self.bound.borrow_mut()[id.0] = Some(var.id());
        var
    }

    /// Gradient per parameter after backward; `None` for parameters that
    /// were never bound or received no gradient.
    pub fn grads(&self) -> Vec<Option<Tensor<E>>> {
        self.bound.borrow().iter().map(|b| b.and_then(|node| self.graph.grad(node))).collect()
    }
}
