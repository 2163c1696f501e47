//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Values live in a [`Tape`] arena and are addressed by copyable
//! [`TensorId`] handles. Every differentiable operation appends a node whose
//! inputs precede it, so a single reverse sweep in [`Tape::backward`]
//! propagates gradients to every `requires_grad` leaf. A tape is rebuilt per
//! forward pass; parameters live outside the tape (see `params`).
//!
//! All buffers are row-major. The only broadcasting supported is bias
//! addition over the last dimension; everything else requires exact shapes.

mod ops;
pub mod optim;

use thiserror::Error;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// One dense n-dimensional value plus its gradient slot.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{context}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    ShapeLen { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("row index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("{context}: slice {start}..{} exceeds extent {extent}", start + len)]
    SliceOutOfRange {
        context: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("cross entropy weights must have positive sum, got {sum}")]
    NonPositiveWeightSum { sum: f64 },
}

/// Recorded backward rule. Inputs are ids of earlier nodes; cached buffers
/// hold whatever the rule needs beyond the stored input/output values.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        c: f64,
    },
    AddBias {
        x: TensorId,
        bias: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    // the backward rule recovers masked entries from their exact-zero outputs
    MaskedSoftmax {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        axis: usize,
        parts: Vec<TensorId>,
    },
    Slice {
        x: TensorId,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: TensorId,
        ids: Vec<usize>,
    },
    Sum {
        x: TensorId,
    },
    L1 {
        a: TensorId,
        b: TensorId,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        weight_sum: f64,
    },
}

/// Gradient tape: an append-only arena of tensors and their backward rules.
pub struct Tape {
    pub(crate) nodes: Vec<Tensor>,
    pub(crate) ops: Vec<Op>,
    /// `needs[i]`: gradient must flow into node `i` (it or an ancestor
    /// requires grad). Lets backward skip constant subgraphs.
    pub(crate) needs: Vec<bool>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. `requires_grad` leaves receive gradients in
    /// [`Tape::backward`].
    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        shape: &[usize],
        requires_grad: bool,
    ) -> Result<TensorId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeLen {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
                requires_grad,
                grad: None,
            },
            Op::Leaf,
        ))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorId, TensorError> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.leaf(vec![value], &[1], false).expect("scalar leaf")
    }

    pub(crate) fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        debug_assert!(
            tensor.data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        let needs = tensor.requires_grad || self.op_inputs(&op).iter().any(|id| self.needs[id.0]);
        let id = TensorId(self.nodes.len());
        self.nodes.push(tensor);
        self.ops.push(op);
        self.needs.push(needs);
        id
    }

    fn op_inputs(&self, op: &Op) -> Vec<TensorId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } | Op::L1 { a, b } => {
                vec![*a, *b]
            }
            Op::Transpose { x }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Softmax { x, .. }
            | Op::MaskedSoftmax { x, .. }
            | Op::Slice { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].numel()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.0].data[0]
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across fan-out; each `requires_grad` node reachable from the loss
    /// receives its gradient. A tape can be consumed once.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(out_grad) = grads[i].take() else {
                continue;
            };
            if !self.needs[i] {
                continue;
            }
            self.accumulate(i, &out_grad, &mut grads);
            if self.nodes[i].requires_grad {
                self.nodes[i].grad = Some(out_grad);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_rejects_bad_shape() {
        let mut tape = Tape::new();
        let err = tape.leaf(vec![1.0, 2.0], &[3], false).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeLen {
                shape: vec![3],
                len: 2
            }
        );
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let err = tape.backward(x).unwrap_err();
        assert_eq!(err, TensorError::NonScalarLoss { shape: vec![2] });
    }

    #[test]
    fn backward_consumes_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0], &[1], true).unwrap();
        let y = tape.sum(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0], &[3], true).unwrap();
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_gradients_swap_operands() {
        // loss = x * y with scalars: grad(x) = y, grad(y) = x
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0], &[1], true).unwrap();
        let y = tape.leaf(vec![-5.0], &[1], true).unwrap();
        let p = tape.mul(x, y).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-5.0]);
        assert_eq!(tape.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn constant_branches_receive_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let c = tape.constant(vec![4.0, 5.0], &[2]).unwrap();
        let s = tape.add(x, c).unwrap();
        let loss = tape.sum(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
        assert!(tape.grad(c).is_none());
    }
}
