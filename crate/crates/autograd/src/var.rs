use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Computes parent gradients from the output gradient. `needs[i]` tells
/// whether parent `i` is tracked; untracked slots may be returned as `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Entry {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn>,
}

/// Records operations on tracked [`Var`]s so that gradients can be pulled back.
///
/// A tape is cheap to clone (shared handle). Drop it, together with every var
/// built on it, to release the saved activations.
#[derive(Clone, Default)]
pub struct Tape {
    entries: Rc<RefCell<Vec<Entry>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        let id = self.push(Entry { parents: Vec::new(), backward: None });
        Var { value: Rc::new(value), node: Some(Node { tape: self.clone(), id }) }
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, e: Entry) -> usize {
        let mut v = self.entries.borrow_mut();
        v.push(e);
        v.len() - 1
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.entries, &other.entries)
    }
}

#[derive(Clone)]
struct Node {
    tape: Tape,
    id: usize,
}

/// A tensor value, optionally tracked on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    value: Rc<Tensor>,
    node: Option<Node>,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("shape", &self.value.shape()).field("tracked", &self.node.is_some()).finish()
    }
}

impl Var {
    /// An untracked value; operations on constants only record nothing.
    pub fn constant(value: Tensor) -> Self {
        Self { value: Rc::new(value), node: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<Tensor> {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var {
        Var { value: self.value.clone(), node: None }
    }

    /// Builds the output of an operation on `inputs`. The backward closure is
    /// only kept when at least one input is tracked.
    pub(crate) fn from_op(inputs: &[&Var], value: impl Into<Rc<Tensor>>, backward: BackwardFn) -> Result<Var> {
        let value = value.into();
        let mut tape: Option<Tape> = None;
        for v in inputs {
            if let Some(n) = &v.node {
                match &tape {
                    None => tape = Some(n.tape.clone()),
                    Some(t) if !t.same(&n.tape) => return Err(Error::TapeMismatch),
                    _ => {}
                }
            }
        }
        let Some(tape) = tape else {
            return Ok(Var { value, node: None });
        };
        let parents = inputs.iter().map(|v| v.node.as_ref().map(|n| n.id)).collect();
        let id = tape.push(Entry { parents, backward: Some(backward) });
        Ok(Var { value, node: Some(Node { tape, id }) })
    }

    /// Reverse-mode sweep from this scalar. Returns gradients of every tracked
    /// var the output depends on, keyed by var.
    pub fn backward(&self) -> Result<Gradients> {
        let node = self.node.as_ref().ok_or(Error::NotTracked)?;
        if self.value.numel() != 1 {
            return Err(Error::Shape(format!("backward() needs a scalar, got {:?}", self.value.shape())));
        }
        let entries = node.tape.entries.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; node.id + 1];
        grads[node.id] = Some(Tensor::full(self.value.shape().to_vec(), 1.0));
        let mut leaves = HashMap::new();
        for id in (0..=node.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let e = &entries[id];
            let Some(bw) = &e.backward else {
                leaves.insert(id, g);
                continue;
            };
            let needs: Vec<bool> = e.parents.iter().map(|p| p.is_some()).collect();
            let pgrads = bw(&g, &needs);
            for (p, pg) in e.parents.iter().zip(pgrads) {
                if let (Some(p), Some(pg)) = (p, pg) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign(&pg)?,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { tape: node.tape.clone(), grads: leaves })
    }
}

/// Leaf gradients produced by [`Var::backward`].
pub struct Gradients {
    tape: Tape,
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient for a tracked leaf; `None` if the output does not depend on it.
    pub fn get(&self, v: &Var) -> Option<&Tensor> {
        let n = v.node.as_ref()?;
        if !n.tape.same(&self.tape) {
            return None;
        }
        self.grads.get(&n.id)
    }

    /// Like [`Gradients::get`], with zeros for leaves the output ignores.
    pub fn get_or_zeros(&self, v: &Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))
    }
}
