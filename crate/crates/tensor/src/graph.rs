//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one [`Record`] per differentiable op in execution
//! order, which is a topological order by construction. [`Graph::backward`]
//! walks the records in exact reverse and accumulates adjoints into every
//! tracked leaf. In inference mode nothing is recorded and intermediate
//! values are freed as soon as their [`Var`] handles drop.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone)]
pub struct Var {
    id: NodeId,
    value: Rc<Tensor>,
    tracked: bool,
}

impl Var {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shared(&self) -> Rc<Tensor> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// True when gradients flow back through this value.
    pub fn requires_grad(&self) -> bool {
        self.tracked
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value)
    }
}

/// Vector-Jacobian product of one recorded op.
///
/// `needs[i]` tells whether input `i` is tracked; implementations may return
/// `None` for inputs that do not need a gradient.
pub trait Backward {
    fn name(&self) -> &'static str;

    fn backward(&self, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>>;
}

struct Record {
    op: Box<dyn Backward>,
    inputs: Vec<NodeId>,
    needs: Vec<bool>,
    output: NodeId,
}

struct Leaf {
    id: NodeId,
    shape: Vec<usize>,
    grad: Option<Tensor>,
}

pub struct Graph {
    grad_enabled: bool,
    next_id: Cell<NodeId>,
    records: RefCell<Vec<Record>>,
    leaves: RefCell<Vec<Leaf>>,
    recorded_elements: Cell<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A graph that records ops for differentiation.
    pub fn new() -> Self {
        Graph {
            grad_enabled: true,
            next_id: Cell::new(0),
            records: RefCell::new(Vec::new()),
            leaves: RefCell::new(Vec::new()),
            recorded_elements: Cell::new(0),
        }
    }

    /// A graph that records nothing; leaves are untracked.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn fresh_id(&self) -> NodeId {
        let id = self.next_id.get();
        self.next_id.set(id + 1);
        id
    }

    /// A differentiable leaf (a parameter or an input under attribution).
    pub fn leaf(&self, value: Tensor) -> Var {
        let id = self.fresh_id();
        if self.grad_enabled {
            self.leaves.borrow_mut().push(Leaf {
                id,
                shape: value.shape().to_vec(),
                grad: None,
            });
        }
        Var {
            id,
            value: Rc::new(value),
            tracked: self.grad_enabled,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        Var {
            id: self.fresh_id(),
            value: Rc::new(value),
            tracked: false,
        }
    }

    /// Registers `output` as the result of `op` applied to `inputs`.
    ///
    /// Every forward value passes a finiteness check here. The op is recorded
    /// only when gradients are enabled and at least one input is tracked.
    pub fn apply<B: Backward + 'static>(&self, op: B, inputs: &[&Var], output: Tensor) -> Result<Var> {
        output.check_finite(op.name())?;
        let needs: Vec<bool> = inputs.iter().map(|v| v.tracked).collect();
        let tracked = self.grad_enabled && needs.iter().any(|&n| n);
        let id = self.fresh_id();
        if tracked {
            self.recorded_elements
                .set(self.recorded_elements.get() + output.numel());
            self.records.borrow_mut().push(Record {
                op: Box::new(op),
                inputs: inputs.iter().map(|v| v.id).collect(),
                needs,
                output: id,
            });
        }
        Ok(Var {
            id,
            value: Rc::new(output),
            tracked,
        })
    }

    /// Number of recorded ops.
    pub fn len(&self) -> usize {
        self.records.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total element count of all recorded op outputs, i.e. the activation
    /// memory retained for the backward pass.
    pub fn recorded_elements(&self) -> usize {
        self.recorded_elements.get()
    }

    /// Accumulates d`loss`/d`leaf` into every tracked leaf.
    ///
    /// Gradients add up across calls; use [`Graph::zero_grads`] between steps.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if loss.value.numel() != 1 {
            return Err(TensorError::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.next_id.get()];
        grads[loss.id] = Some(Tensor::ones(loss.shape()));

        let records = self.records.borrow();
        for rec in records.iter().rev() {
            let Some(g_out) = grads[rec.output].take() else {
                continue;
            };
            let g_in = rec.op.backward(&g_out, &rec.needs)?;
            for ((&input, &need), g) in rec.inputs.iter().zip(&rec.needs).zip(g_in) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g).map_err(|e| {
                        TensorError::Backward(format!("{} adjoint: {e}", rec.op.name()))
                    })?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let mut leaves = self.leaves.borrow_mut();
        for leaf in leaves.iter_mut() {
            if let Some(g) = grads[leaf.id].take() {
                match &mut leaf.grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf. Tracked leaves that the loss does not
    /// depend on report zeros once `backward` has run.
    pub fn grad(&self, v: &Var) -> Option<Tensor> {
        let leaves = self.leaves.borrow();
        let leaf = leaves.iter().find(|l| l.id == v.id)?;
        Some(
            leaf.grad
                .clone()
                .unwrap_or_else(|| Tensor::zeros(&leaf.shape)),
        )
    }

    pub fn zero_grads(&self) {
        for leaf in self.leaves.borrow_mut().iter_mut() {
            leaf.grad = None;
        }
    }
}
