//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! The design is a classic Wengert tape: [`Tape`] records one node per
//! differentiable operation, in creation order, and [`Tape::backward`] walks
//! the list in strict reverse to accumulate vector-Jacobian products. Two
//! properties keep the core small and auditable:
//!
//! * a node is recorded only when some input is connected to the tape, so
//!   forward-only math (rendering fixed scenes, evaluating frozen models)
//!   pays nothing for autodiff;
//! * there is no broadcasting beyond "scalar with tensor" and equal shapes —
//!   every shape rule is explicit in the op that needs it.
//!
//! All entries are finite by construction: constructors validate their input
//! and every public op checks its output, so a NaN or Inf surfaces at the op
//! that produced it rather than three modules downstream.

pub mod gradcheck;
mod ops;
pub mod optim;

use std::sync::Arc;

/// Handle of a recorded operation on a [`Tape`].
pub type NodeId = usize;

/// A dense row-major tensor of `f64` values.
///
/// Cloning is cheap (the buffer is shared); tensors are immutable after
/// construction. `node` ties the tensor to the tape that produced it — `None`
/// means the tensor is a constant and contributes no gradient.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
    /// Populated for parameter leaves via [`Tensor::load_grad`] after backward.
    pub grad: Option<Vec<f64>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("data", &format_args!("[{} values]", self.data.len()))
            .finish()
    }
}

impl Tensor {
    /// Constant tensor from explicit contents. Rejects shape/length mismatch
    /// and non-finite entries.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> crate::Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(crate::Error::runtime(format!(
                "tensor shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(crate::Error::runtime(
                "tensor construction rejected non-finite entry".to_string(),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None, grad: None })
    }

    /// Constant tensor; panics on invalid input. For internal call sites that
    /// construct from already-validated data.
    pub(crate) fn constant(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: Arc::new(data), node: None, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::constant(shape, vec![0.0; n])
    }

    pub fn scalar(v: f64) -> Tensor {
        assert!(v.is_finite(), "scalar tensor from non-finite value");
        Tensor::constant(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// The single element of a length-1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of length {}", self.data.len());
        self.data[0]
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Whether this tensor participates in the gradient graph.
    pub fn on_tape(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeId>) -> Tensor {
        Tensor { shape, data, node, grad: None }
    }

    /// Copy this tensor's gradient out of a backward-run tape into the `grad`
    /// field. Panics if the tensor never joined that tape.
    pub fn load_grad(&mut self, tape: &Tape) {
        let id = self.node.expect("load_grad on a tensor with no tape node");
        self.grad = Some(tape.grad_by_id(id).to_vec());
    }
}

/// Saved inputs a recorded op needs during backward.
pub(crate) struct Node {
    pub(crate) op: ops::Op,
}

/// Gradient tape. Append-only while recording; frozen by [`Tape::backward`].
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    node_len: Vec<usize>,
    frozen: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new(), grads: Vec::new(), node_len: Vec::new(), frozen: false }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Parameter leaf: joins the tape and receives a gradient on backward.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert!(!self.frozen, "recording on a frozen tape");
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "param shape/data mismatch");
        assert!(data.iter().all(|x| x.is_finite()), "param with non-finite entry");
        let id = self.push(ops::Op::Leaf, n);
        Tensor::with_node(shape, Arc::new(data), Some(id))
    }

    pub(crate) fn push(&mut self, op: ops::Op, out_len: usize) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op });
        self.node_len.push(out_len);
        self.grads.push(None);
        id
    }

    /// Reverse-mode sweep from a scalar loss. Freezes the tape: recording or
    /// a second backward afterwards is a contract violation.
    pub fn backward(&mut self, loss: &Tensor) {
        assert!(!self.frozen, "backward on a frozen tape");
        assert_eq!(loss.len(), 1, "backward requires a scalar loss");
        let root = loss.node.expect("backward on a tensor with no tape node");
        self.frozen = true;
        self.grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            // Take the gradient out while its node consumes it; nodes never
            // depend on later nodes, so this slot is final.
            let g = self.grads[id].take().unwrap();
            ops::backward_step(&self.nodes[id].op, &g, &mut self.grads, &self.node_len);
            self.grads[id] = Some(g);
        }
        // Every parameter leaf ends up with a gradient, zero when the loss
        // never touched it — callers iterate parameter lists uniformly.
        for id in 0..self.nodes.len() {
            if self.nodes[id].op.is_leaf() && self.grads[id].is_none() {
                self.grads[id] = Some(vec![0.0; self.node_len[id]]);
            }
        }
    }

    /// Gradient of a tensor recorded on this tape, if backward reached it.
    pub fn grad_of(&self, t: &Tensor) -> Option<&[f64]> {
        let id = t.node?;
        self.grads[id].as_deref()
    }

    pub(crate) fn grad_by_id(&self, id: NodeId) -> &[f64] {
        self.grads[id].as_deref().unwrap_or_else(|| {
            panic!("node {id} has no gradient (backward not run or node unreachable)")
        })
    }
}

/// Panic unless every entry is finite. Applied to the output of every public
/// op: a NaN must name its producer.
pub(crate) fn check_finite(data: &[f64], op: &str) {
    for &x in data {
        assert!(x.is_finite(), "{op}: produced non-finite value {x}");
    }
}
