//! Reverse-mode automatic differentiation tape.
//!
//! Every operation on a [`Var`] appends a node holding its value, its parent
//! ids and (if any parent needs a gradient) a closure computing the
//! vector-Jacobian product. Parents always precede children, so a reverse
//! sweep over node ids is a valid topological order.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Storage precision of recorded values. Gradients are always accumulated in
/// `f64`; `F32` rounds every forward value through `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Computes parent gradients from the output gradient.
///
/// Arguments: output gradient, parent values, output value. The returned
/// vector is aligned with the node's parents; `None` means "no contribution".
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[&[f64]], &[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    value: Rc<[f64]>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    precision: Precision,
    consumed: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("precision", &self.precision)
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            precision,
            consumed: Cell::new(false),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.record(t.shape().to_vec(), t.data().to_vec(), vec![], None, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.record(t.shape().to_vec(), t.data().to_vec(), vec![], None, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(&Tensor::scalar(x))
    }

    pub(crate) fn record(
        &self,
        shape: Vec<usize>,
        mut value: Vec<f64>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        leaf_grad: bool,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if self.precision == Precision::F32 {
            for v in value.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = leaf_grad || parents.iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        nodes.push(Node {
            shape,
            value: value.into(),
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let parent_vals: Vec<&[f64]> = node.parents.iter().map(|&p| &nodes[p].value[..]).collect();
                let contribs = bw(&g, &parent_vals, &node.value);
                for (&p, c) in node.parents.iter().zip(contribs) {
                    let Some(c) = c else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(c),
                    }
                }
            }
            if node.parents.is_empty() {
                grads[id] = Some(g);
            }
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of every leaf reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the leaf is unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = &self.shapes[v.id];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn value(&self) -> Rc<[f64]> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn item(&self) -> f64 {
        self.value()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.value().to_vec()).expect("node shape")
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(&self.to_tensor())
    }

    pub(crate) fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }
}
