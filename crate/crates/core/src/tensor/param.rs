use std::sync::atomic::{AtomicU64, Ordering};

use super::{Tape, Tensor};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// Process-unique identity of a parameter, used to bind it to tapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A named trainable tensor with an accumulating gradient buffer. Clones get
/// a fresh identity so they never alias the original on a tape.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

fn next_id() -> ParamId {
    ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Param {
            id: next_id(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            id: next_id(),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds the gradient recorded for this parameter on `tape`, if any.
    pub fn pull_grad(&mut self, tape: &Tape) {
        if let Some(g) = tape.param_grad(self) {
            self.grad.add_assign(&g);
        }
    }
}
