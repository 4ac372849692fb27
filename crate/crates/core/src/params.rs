//! Named parameter storage and per-graph binding.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};

/// Ordered map of parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn num_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Sub-store of the entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// How a parameter is initialised.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±gain·√(3 / fan_in).
    Uniform { fan_in: usize, gain: f64 },
    Zeros,
    Values(Vec<f64>),
}

/// Name, shape and initialiser of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize(&self, rng: &mut impl Rng) -> Result<Tensor> {
        match &self.init {
            Init::Uniform { fan_in, gain } => Ok(init_uniform(&self.shape, *fan_in, *gain, rng)),
            Init::Zeros => Ok(Tensor::zeros(&self.shape)),
            Init::Values(v) => Tensor::new(&self.shape, v.clone()),
        }
    }
}

/// Materialise `specs` in order into `store`.
pub fn init_specs(store: &mut ParamStore, specs: &[ParamSpec], rng: &mut impl Rng) -> Result<()> {
    for s in specs {
        store.insert(s.name.clone(), s.materialize(rng)?);
    }
    Ok(())
}

/// He-style uniform initialisation for a conv/linear weight with `fan_in` inputs.
pub fn init_uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    Tensor::rand_uniform_with(shape, -bound, bound, rng)
}

/// Parameters of one store registered as leaves of one graph.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Bound<'a> {
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            store,
            vars: HashMap::new(),
            trainable,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = g.leaf(t, self.trainable);
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Use `var` for `name` instead of a fresh leaf.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    /// Gradients of every bound parameter (zeros where unused).
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let shape = self.store.get(name).map(|t| t.shape().to_vec()).unwrap_or_default();
                (name.clone(), grads.get_or_zeros(v, &shape))
            })
            .collect()
    }
}
