use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Net, ParamInit};
use crate::error::{Error, Result};
use crate::tensor::{Graph, RunningStats, Tensor, Var};

/// Named learnable tensors in declaration order, plus batch-norm running
/// statistics (state, not parameters).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    pub running: BTreeMap<String, RunningStats>,
}

impl ParamStore {
    /// Seeded initialization for every parameter declared by `net`.
    pub fn init(net: &Net, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        for spec in net.param_specs() {
            let t = match spec.init {
                ParamInit::Conv { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::uniform(spec.shape, -bound, bound, &mut rng)
                }
                ParamInit::Const(v) => Tensor::full(spec.shape, v),
            };
            store.insert(spec.name, t);
        }
        for (name, c) in net.batchnorms() {
            store.running.insert(name, RunningStats::new(c));
        }
        store
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn numel(&self) -> u64 {
        self.tensors.iter().map(|t| t.numel() as u64).sum()
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        let vars = self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        Bound {
            names: self.names.clone(),
            vars,
            index: self.index.clone(),
        }
    }

    /// Names already-recorded leaves, given in store order.
    pub fn attach(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.names.len() {
            return Err(Error::shape("params", format!("{} vars for {} parameters", vars.len(), self.names.len())));
        }
        Ok(Bound {
            names: self.names.clone(),
            vars,
            index: self.index.clone(),
        })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Errors unless every parameter of `net` is present with the declared shape.
    pub fn check_against(&self, net: &Net) -> Result<()> {
        for spec in net.param_specs() {
            match self.get(&spec.name) {
                None => return Err(Error::MissingParam(spec.name)),
                Some(t) if t.shape() != spec.shape => {
                    return Err(Error::shape(
                        "params",
                        format!("{}: stored {} but model declares {}", spec.name, t.shape(), spec.shape),
                    ))
                }
                Some(_) => {}
            }
        }
        for (name, c) in net.batchnorms() {
            match self.running.get(&name) {
                Some(r) if r.mean.len() == c && r.var.len() == c => {}
                _ => return Err(Error::MissingParam(format!("{name}.running_mean"))),
            }
        }
        Ok(())
    }
}

/// Parameters recorded on a graph, addressable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    names: Vec<String>,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(String::as_str).zip(self.vars.iter().copied())
    }
}
