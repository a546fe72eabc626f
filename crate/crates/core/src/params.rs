//! Named parameter storage and the per-pass binding of parameters into a
//! [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::{dropout_mask, Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers such as batch-norm running statistics are stored but never
    /// optimized.
    pub trainable: bool,
}

/// Every tensor of a model, in creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(Param {
            name,
            tensor,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Xavier-uniform `fan_in x fan_out` matrix.
    pub fn xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data), true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[len]), true)
    }

    pub fn ones(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::full(&[len], 1.0), true)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Replaces a tensor, keeping its name; shapes must agree.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<(), TensorError> {
        let current = &mut self.entries[id.0].tensor;
        if current.shape() != tensor.shape() {
            return Err(TensorError::Shape {
                op: "set parameter",
                left: current.shape().to_vec(),
                right: tensor.shape().to_vec(),
            });
        }
        *current = tensor;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Train { dropout: f64 },
    Eval,
}

/// One forward pass: a graph plus lazily bound parameters.
///
/// Parameters enter the graph the first time a layer asks for them, so after
/// backward only parameters that took part in the pass have gradients.
pub struct Forward<'p> {
    pub graph: Graph<'p>,
    store: &'p ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'p> Forward<'p> {
    pub fn eval(store: &'p ParamStore) -> Self {
        Self::new(store, Mode::Eval, 0)
    }

    pub fn train(store: &'p ParamStore, dropout: f64, seed: u64) -> Self {
        Self::new(store, Mode::Train { dropout }, seed)
    }

    pub fn new(store: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }

    fn dropout_rate(&self) -> f64 {
        match self.mode {
            Mode::Train { dropout } => dropout,
            Mode::Eval => 0.0,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.param(id);
        let trainable = p.trainable && self.is_train();
        let v = self.graph.leaf_ref(&p.tensor, trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Parameters bound so far in this pass.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    /// Inverted dropout in train mode, identity in eval mode.
    pub fn dropout(&mut self, x: Var) -> Result<Var, TensorError> {
        let rate = self.dropout_rate();
        self.graph.dropout(x, rate, &mut self.rng)
    }

    /// Multipliers for attention-weight dropout, `None` when inactive.
    pub fn dropout_multipliers(&mut self, len: usize) -> Option<Vec<f64>> {
        let rate = self.dropout_rate();
        (rate > 0.0).then(|| dropout_mask(len, rate, &mut self.rng))
    }
}
