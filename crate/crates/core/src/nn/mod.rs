//! Named-parameter plumbing shared by every network.
//!
//! A network is described once as a tree of layers holding parameter *names*;
//! describing it records a [`ParamSpec`] per array. Values live separately in
//! a [`ParamStore`] and are bound to autograd variables per forward pass,
//! either as trainable leaves or as constants.

mod layers;

pub use layers::{Conv2d, ConvTranspose2x2, DepthwiseConv, GroupNorm, LayerNorm2d, Linear};

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use dr_autograd::optim::Adam;
use dr_autograd::{Gradients, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Records parameter specs under a dotted name prefix.
#[derive(Clone, Default)]
pub struct Builder {
    prefix: String,
    specs: Rc<RefCell<Vec<ParamSpec>>>,
}

impl Builder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn pp(&self, name: impl std::fmt::Display) -> Builder {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { prefix, specs: self.specs.clone() }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> String {
        let full = self.pp(name).prefix;
        let mut specs = self.specs.borrow_mut();
        assert!(specs.iter().all(|s| s.name != full), "duplicate parameter name {full}");
        specs.push(ParamSpec { name: full.clone(), shape: shape.to_vec(), init });
        full
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.specs.borrow().clone()
    }
}

/// Parameter values keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Draws initial values in spec order from a seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| {
                let t = match s.init {
                    Init::Zeros => Tensor::zeros(s.shape.clone()),
                    Init::Ones => Tensor::full(s.shape.clone(), 1.0),
                    Init::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                        Tensor::from_fn(s.shape.clone(), |_| rng.gen_range(-bound..bound))
                    }
                };
                (s.name.clone(), t)
            })
            .collect();
        Self { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Fails unless names and shapes match `specs` exactly.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        let mut problems = Vec::new();
        for s in specs {
            match self.tensors.get(&s.name) {
                None => problems.push(format!("missing {}", s.name)),
                Some(t) if t.shape() != s.shape.as_slice() => {
                    problems.push(format!("{}: shape {:?}, expected {:?}", s.name, t.shape(), s.shape))
                }
                _ => {}
            }
        }
        for name in self.tensors.keys() {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("parameters do not match the descriptor: {}", problems.join("; "))))
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sets every array whose name starts with `prefix` to `value`.
    pub fn fill_prefix(&mut self, prefix: &str, value: f64) {
        for (name, t) in self.tensors.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(value);
            }
        }
    }

    /// Binds every array as an untracked constant (inference).
    pub fn bind(&self) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), Var::constant(v.clone()))).collect() }
    }

    /// Binds every array as a trainable leaf on `tape`.
    pub fn bind_tracked(&self, tape: &Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect() }
    }

    /// One optimizer step using the gradients of the vars in `bound`.
    pub fn adam_step(&mut self, adam: &mut Adam, bound: &Bound, grads: &Gradients) -> Result<()> {
        let g: Vec<Tensor> =
            self.tensors.keys().map(|k| bound.get(k).map(|v| grads.get_or_zeros(v))).collect::<Result<_>>()?;
        let mut params: Vec<&mut Tensor> = self.tensors.values_mut().collect();
        let grefs: Vec<&Tensor> = g.iter().collect();
        adam.step(&mut params, &grefs);
        Ok(())
    }
}

/// Parameters bound to autograd variables for one or more forward passes.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars.get(name).ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_prefixes_and_init_is_seeded() {
        let b = Builder::new();
        let c = b.pp("enc").pp(0);
        let w = c.param("weight", &[2, 3], Init::FanIn(3));
        let z = b.param("bias", &[2], Init::Zeros);
        assert_eq!(w, "enc.0.weight");
        assert_eq!(z, "bias");
        let specs = b.specs();
        let s1 = ParamStore::init(&specs, 3);
        let s2 = ParamStore::init(&specs, 3);
        assert_eq!(s1, s2);
        assert!(s1.get("enc.0.weight").unwrap().max_abs() <= 1.0 / 3f64.sqrt());
        assert_eq!(s1.get("bias").unwrap().max_abs(), 0.0);
        s1.validate(&specs).unwrap();
        let mut bad = s1.clone();
        *bad.get_mut("bias").unwrap() = Tensor::zeros(vec![3]);
        assert!(bad.validate(&specs).is_err());
    }
}
