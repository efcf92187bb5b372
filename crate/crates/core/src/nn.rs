//! Parameter storage and the small layer vocabulary shared by every stage.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Creates parameters with deterministic initial values.
pub struct Initializer<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(store: &'a mut ParamStore, rng: ChaCha8Rng) -> Self {
        Self { store, rng }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.store.insert(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: Scalar) -> Result<ParamId> {
        self.tensor(name, Tensor::full(shape.to_vec(), value))
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: Scalar) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound));
        self.tensor(name, t)
    }

    /// Zero-mean normal with the given standard deviation (Box–Muller).
    pub fn normal(&mut self, name: &str, shape: &[usize], std: Scalar) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| {
            let u1: Scalar = rng.gen_range(Scalar::EPSILON..1.0);
            let u2: Scalar = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        self.tensor(name, t)
    }

    /// Kaiming (He) normal initialization for ReLU networks: std = √(2/fan_in).
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        self.normal(name, shape, (2.0 / fan_in as Scalar).sqrt())
    }
}

/// Binds stored parameters onto a tape, once per parameter per pass.
pub struct Ctx<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
}

impl<'t, 'p> Ctx<'t, 'p> {
    pub fn new(tape: &'t Tape, store: &'p ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(vec![None; store.len()]),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| self.tape.param(self.store.get(id).clone()))
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Per-parameter gradients in store order; parameters unused by the pass
    /// get zeros.
    pub fn collect_gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        self.store
            .ids()
            .map(|id| {
                bound[id.0]
                    .and_then(|v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape().to_vec()))
            })
            .collect()
    }
}

/// Affine layer `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform weights in `±1/√in`, zero bias.
    pub fn new(init: &mut Initializer<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = init.uniform(&format!("{name}.weight"), &[in_dim, out_dim], 1.0 / (in_dim as Scalar).sqrt())?;
        let bias = init.zeros(&format!("{name}.bias"), &[out_dim])?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    /// Zero weights and zero bias.
    pub fn zeroed(init: &mut Initializer<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = init.zeros(&format!("{name}.weight"), &[in_dim, out_dim])?;
        let bias = init.zeros(&format!("{name}.bias"), &[out_dim])?;
        Ok(Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        autodiff::linear(x, cx.param(self.weight), self.bias.map(|b| cx.param(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Initializer<'_>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: init.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: init.zeros(&format!("{name}.bias"), &[dim])?,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        autodiff::layer_norm(x, cx.param(self.gain), cx.param(self.bias))
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Initializer<'_>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), in_dim, hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    /// Output layer starts at zero so the block's initial output is exactly 0.
    pub fn zero_output(init: &mut Initializer<'_>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), in_dim, hidden)?,
            fc2: Linear::zeroed(init, &format!("{name}.fc2"), hidden, out_dim)?,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(cx, x)?.relu()?;
        self.fc2.forward(cx, h)
    }
}
