use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::{Param, ParamId, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Backward rule of a recorded operation.
///
/// Receives the upstream gradient (shaped like `output`), the input values in
/// recording order, and a mask of which inputs need a gradient. Returns one
/// entry per input; `None` where no gradient is needed.
pub trait Backward {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        grad: &Tensor,
        inputs: &[&Tensor],
        output: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<NodeId>,
    requires_grad: bool,
    op: Option<Box<dyn Backward>>,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a reverse sweep over node ids is a valid topological traversal.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<HashMap<NodeId, Tensor>>,
    params: RefCell<HashMap<ParamId, NodeId>>,
    track_params: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(HashMap::new()),
            params: RefCell::new(HashMap::new()),
            track_params: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that receives gradients.
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            inputs: Vec::new(),
            requires_grad,
            op: None,
        })
    }

    /// Binds a parameter. Repeated bindings on one tape return the same
    /// leaf, so gradients from every use are summed. While parameter
    /// tracking is off, the parameter enters as a constant instead.
    pub fn param(&self, p: &Param) -> Var<'_> {
        if !self.track_params.get() {
            return self.constant(p.value.clone());
        }
        if let Some(&id) = self.params.borrow().get(&p.id()) {
            return Var { tape: self, id };
        }
        let v = self.variable(p.value.clone());
        self.params.borrow_mut().insert(p.id(), v.id);
        v
    }

    /// Turns parameter tracking on or off for subsequent [`Tape::param`] calls.
    pub fn set_param_tracking(&self, on: bool) {
        self.track_params.set(on);
    }

    /// Records the result of an operation. Gradient bookkeeping is only
    /// kept when at least one input requires a gradient.
    pub fn record(
        &self,
        value: Tensor,
        inputs: &[Var<'_>],
        op: impl Backward + 'static,
    ) -> Result<Var<'_>> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::numeric(op.name()));
        }
        let requires_grad = inputs.iter().any(|v| v.requires_grad());
        let op: Option<Box<dyn Backward>> = if requires_grad {
            Some(Box::new(op))
        } else {
            None
        };
        Ok(self.push(Node {
            value: Rc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            op,
        }))
    }

    fn value(&self, id: NodeId) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            match &node.op {
                None => {
                    if node.requires_grad {
                        match leaf_grads.get_mut(&id) {
                            Some(acc) => acc.add_assign(&grad),
                            None => {
                                leaf_grads.insert(id, grad);
                            }
                        }
                    }
                }
                Some(op) => {
                    let inputs: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|&i| nodes[i].value.as_ref())
                        .collect();
                    let needs: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|&i| nodes[i].requires_grad)
                        .collect();
                    let input_grads = op.backward(&grad, &inputs, &node.value, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                        let (Some(g), true) = (g, need) else {
                            continue;
                        };
                        debug_assert_eq!(g.shape(), nodes[input].value.shape(), "{}", op.name());
                        match &mut grads[input] {
                            Some(acc) => acc.add_assign(&g),
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        self.leaf_grads.borrow().get(&v.id).cloned()
    }

    pub fn param_grad(&self, p: &Param) -> Option<Tensor> {
        let id = *self.params.borrow().get(&p.id())?;
        self.leaf_grads.borrow().get(&id).cloned()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f32 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Same value, cut off from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }
}
