//! Scalar reverse-mode automatic differentiation on an explicit tape.
//!
//! Every recorded node stores its value, up to two parent indices and the
//! local partial derivative with respect to each parent. A single reverse
//! sweep over the tape yields the gradient of a root with respect to every
//! node. Index 0 is a reserved constant-zero sentinel: leaves and unary nodes
//! point their unused parent slots at it with a zero partial, which keeps the
//! reverse sweep branch-free.
//!
//! The [`Ops`] trait abstracts the arithmetic so the same expression code can
//! record onto a [`Tape`] or run on plain `f64` values via [`Plain`].

use thiserror::Error;

/// Errors raised while recording onto a tape.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TapeError {
    #[error("non-finite leaf value {value}")]
    NonFiniteLeaf { value: f64 },
    #[error("division by zero: divisor is node {node}")]
    DivisionByZero { node: usize },
    #[error("sqrt of non-positive value {value} at node {node}")]
    SqrtDomain { node: usize, value: f64 },
    #[error("operation on node {node} produced a non-finite value")]
    NonFinite { node: usize },
}

/// Reference to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef(u32);

impl NodeRef {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Read-only view of one recorded node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapeNode {
    pub value: f64,
    pub parents: [usize; 2],
    pub local_partials: [f64; 2],
}

const SENTINEL: u32 = 0;

/// Append-only computation tape.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Slot>,
    trainable: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    value: f64,
    parents: [u32; 2],
    partials: [f64; 2],
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(16)
    }

    pub fn with_capacity(capacity: usize) -> Self {
        let mut tape = Tape {
            nodes: Vec::with_capacity(capacity),
            trainable: Vec::new(),
        };
        tape.push_sentinel();
        tape
    }

    fn push_sentinel(&mut self) {
        self.nodes.push(Slot {
            value: 0.0,
            parents: [SENTINEL; 2],
            partials: [0.0; 2],
        });
    }

    /// Drops every node but keeps the allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.trainable.clear();
        self.push_sentinel();
    }

    /// Number of nodes, including the sentinel.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn num_params(&self) -> usize {
        self.trainable.len()
    }

    /// Trainable leaves in registration order.
    pub fn params(&self) -> impl Iterator<Item = NodeRef> + '_ {
        self.trainable.iter().map(|&i| NodeRef(i))
    }

    pub fn value(&self, node: NodeRef) -> f64 {
        self.nodes[node.index()].value
    }

    pub fn node(&self, node: NodeRef) -> TapeNode {
        let i = node.index();
        let n = self.nodes[i];
        let [p0, p1] = n.parents;
        TapeNode {
            value: n.value,
            parents: [p0 as usize, p1 as usize],
            local_partials: n.partials,
        }
    }

    #[inline]
    fn push(&mut self, value: f64, parents: [u32; 2], partials: [f64; 2]) -> NodeRef {
        let idx = self.nodes.len();
        debug_assert!(idx < u32::MAX as usize);
        self.nodes.push(Slot {
            value,
            parents,
            partials,
        });
        NodeRef(idx as u32)
    }

    #[inline]
    fn push_checked(
        &mut self,
        value: f64,
        parents: [u32; 2],
        partials: [f64; 2],
    ) -> Result<NodeRef, TapeError> {
        if value.is_finite() && partials[0].is_finite() && partials[1].is_finite() {
            Ok(self.push(value, parents, partials))
        } else {
            Err(self.non_finite())
        }
    }

    /// For ops whose partials are finite whenever operands and value are:
    /// the partials are operand values, constants, or `1 - tanh^2`.
    #[inline]
    fn push_value_checked(
        &mut self,
        value: f64,
        parents: [u32; 2],
        partials: [f64; 2],
    ) -> Result<NodeRef, TapeError> {
        if value.is_finite() {
            Ok(self.push(value, parents, partials))
        } else {
            Err(self.non_finite())
        }
    }

    #[cold]
    fn non_finite(&self) -> TapeError {
        TapeError::NonFinite {
            node: self.nodes.len(),
        }
    }

    /// Registers a trainable leaf.
    pub fn variable(&mut self, value: f64) -> Result<NodeRef, TapeError> {
        if !value.is_finite() {
            return Err(TapeError::NonFiniteLeaf { value });
        }
        let node = self.push(value, [SENTINEL; 2], [0.0; 2]);
        self.trainable.push(node.0);
        Ok(node)
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, value: f64) -> Result<NodeRef, TapeError> {
        if !value.is_finite() {
            return Err(TapeError::NonFiniteLeaf { value });
        }
        Ok(self.push(value, [SENTINEL; 2], [0.0; 2]))
    }

    pub fn record_binary(
        &mut self,
        op: BinaryOp,
        a: NodeRef,
        b: NodeRef,
    ) -> Result<NodeRef, TapeError> {
        let (va, vb) = (self.nodes[a.index()].value, self.nodes[b.index()].value);
        let parents = [a.0, b.0];
        match op {
            BinaryOp::Add => self.push_value_checked(va + vb, parents, [1.0, 1.0]),
            BinaryOp::Sub => self.push_value_checked(va - vb, parents, [1.0, -1.0]),
            BinaryOp::Mul => self.push_value_checked(va * vb, parents, [vb, va]),
            BinaryOp::Div => {
                if vb == 0.0 {
                    return Err(TapeError::DivisionByZero { node: b.index() });
                }
                let q = va / vb;
                self.push_checked(q, parents, [1.0 / vb, -q / vb])
            }
        }
    }

    pub fn record_unary(&mut self, op: UnaryOp, a: NodeRef) -> Result<NodeRef, TapeError> {
        let v = self.nodes[a.index()].value;
        let parents = [a.0, SENTINEL];
        match op {
            UnaryOp::Tanh => {
                let t = v.tanh();
                self.push_value_checked(t, parents, [1.0 - t * t, 0.0])
            }
            UnaryOp::Square => self.push_value_checked(v * v, parents, [2.0 * v, 0.0]),
            UnaryOp::Sqrt => {
                if v <= 0.0 {
                    return Err(TapeError::SqrtDomain {
                        node: a.index(),
                        value: v,
                    });
                }
                let r = v.sqrt();
                self.push_checked(r, parents, [0.5 / r, 0.0])
            }
            UnaryOp::Neg => self.push_value_checked(-v, parents, [-1.0, 0.0]),
        }
    }

    /// `c * a` for a constant `c`; a multiplication whose second operand is
    /// not recorded.
    pub fn scale(&mut self, a: NodeRef, c: f64) -> Result<NodeRef, TapeError> {
        let v = self.nodes[a.index()].value;
        self.push_value_checked(c * v, [a.0, SENTINEL], [c, 0.0])
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: NodeRef, c: f64) -> Result<NodeRef, TapeError> {
        let v = self.nodes[a.index()].value;
        self.push_value_checked(v + c, [a.0, SENTINEL], [1.0, 0.0])
    }

    /// Adjoints of `root` with respect to every node, in one reverse sweep.
    pub fn backward(&self, root: NodeRef) -> Gradients {
        let mut adjoints = Vec::new();
        self.backward_into(root, &mut adjoints);
        Gradients {
            tape_len: self.len(),
            adjoints,
            trainable: self.trainable.clone(),
        }
    }

    /// Reverse sweep into a caller-owned buffer, resized to the tape length.
    pub fn backward_into(&self, root: NodeRef, adjoints: &mut Vec<f64>) {
        let r = root.index();
        adjoints.clear();
        adjoints.resize(r + 1, 0.0);
        adjoints[r] = 1.0;
        let nodes = &self.nodes[..=r];
        let adj = &mut adjoints[..=r];
        for i in (1..=r).rev() {
            let g = adj[i];
            let Slot {
                parents: [p0, p1],
                partials: [d0, d1],
                ..
            } = nodes[i];
            debug_assert!((p0 as usize) < i && (p1 as usize) < i);
            // SAFETY: parents always precede their node on the tape, so both
            // indices are below `i <= r`.
            unsafe {
                *adj.get_unchecked_mut(p0 as usize) += d0 * g;
                *adj.get_unchecked_mut(p1 as usize) += d1 * g;
            }
        }
        adjoints.resize(self.len(), 0.0);
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape_len: usize,
    adjoints: Vec<f64>,
    trainable: Vec<u32>,
}

impl Gradients {
    /// d(root)/d(node).
    pub fn wrt(&self, node: NodeRef) -> f64 {
        assert!(node.index() < self.tape_len, "node not on this tape");
        self.adjoints[node.index()]
    }

    /// Gradient with respect to each trainable leaf, in registration order.
    pub fn params(&self) -> Vec<f64> {
        self.trainable
            .iter()
            .map(|&i| self.adjoints[i as usize])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Square,
    Sqrt,
    Neg,
}

/// Scalar arithmetic that either records onto a tape or evaluates directly.
pub trait Ops {
    type Value: Copy;

    /// Trainable leaf (for [`Plain`], just the value).
    fn variable(&mut self, v: f64) -> Result<Self::Value, TapeError>;
    fn constant(&mut self, v: f64) -> Result<Self::Value, TapeError>;
    fn value(&self, a: Self::Value) -> f64;
    fn add(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value, TapeError>;
    fn sub(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value, TapeError>;
    fn mul(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value, TapeError>;
    fn div(&mut self, a: Self::Value, b: Self::Value) -> Result<Self::Value, TapeError>;
    fn neg(&mut self, a: Self::Value) -> Result<Self::Value, TapeError>;
    fn square(&mut self, a: Self::Value) -> Result<Self::Value, TapeError>;
    fn sqrt(&mut self, a: Self::Value) -> Result<Self::Value, TapeError>;
    fn tanh(&mut self, a: Self::Value) -> Result<Self::Value, TapeError>;
    fn scale(&mut self, a: Self::Value, c: f64) -> Result<Self::Value, TapeError>;
    fn offset(&mut self, a: Self::Value, c: f64) -> Result<Self::Value, TapeError>;
}

impl Ops for Tape {
    type Value = NodeRef;

    fn variable(&mut self, v: f64) -> Result<NodeRef, TapeError> {
        Tape::variable(self, v)
    }
    fn constant(&mut self, v: f64) -> Result<NodeRef, TapeError> {
        Tape::constant(self, v)
    }
    #[inline]
    fn value(&self, a: NodeRef) -> f64 {
        Tape::value(self, a)
    }
    #[inline]
    fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, TapeError> {
        self.record_binary(BinaryOp::Add, a, b)
    }
    #[inline]
    fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, TapeError> {
        self.record_binary(BinaryOp::Sub, a, b)
    }
    #[inline]
    fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, TapeError> {
        self.record_binary(BinaryOp::Mul, a, b)
    }
    fn div(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, TapeError> {
        self.record_binary(BinaryOp::Div, a, b)
    }
    fn neg(&mut self, a: NodeRef) -> Result<NodeRef, TapeError> {
        self.record_unary(UnaryOp::Neg, a)
    }
    #[inline]
    fn square(&mut self, a: NodeRef) -> Result<NodeRef, TapeError> {
        self.record_unary(UnaryOp::Square, a)
    }
    fn sqrt(&mut self, a: NodeRef) -> Result<NodeRef, TapeError> {
        self.record_unary(UnaryOp::Sqrt, a)
    }
    #[inline]
    fn tanh(&mut self, a: NodeRef) -> Result<NodeRef, TapeError> {
        self.record_unary(UnaryOp::Tanh, a)
    }
    #[inline]
    fn scale(&mut self, a: NodeRef, c: f64) -> Result<NodeRef, TapeError> {
        Tape::scale(self, a, c)
    }
    #[inline]
    fn offset(&mut self, a: NodeRef, c: f64) -> Result<NodeRef, TapeError> {
        Tape::offset(self, a, c)
    }
}

/// Direct `f64` evaluation with no recording.
///
/// `sqrt(0)` is allowed here (there is no partial to blow up); negative
/// arguments and division by zero are still errors.
#[derive(Debug, Clone, Copy, Default)]
pub struct Plain;

impl Ops for Plain {
    type Value = f64;

    fn variable(&mut self, v: f64) -> Result<f64, TapeError> {
        if !v.is_finite() {
            return Err(TapeError::NonFiniteLeaf { value: v });
        }
        Ok(v)
    }
    fn constant(&mut self, v: f64) -> Result<f64, TapeError> {
        Ok(v)
    }
    fn value(&self, a: f64) -> f64 {
        a
    }
    fn add(&mut self, a: f64, b: f64) -> Result<f64, TapeError> {
        Ok(a + b)
    }
    fn sub(&mut self, a: f64, b: f64) -> Result<f64, TapeError> {
        Ok(a - b)
    }
    fn mul(&mut self, a: f64, b: f64) -> Result<f64, TapeError> {
        Ok(a * b)
    }
    fn div(&mut self, a: f64, b: f64) -> Result<f64, TapeError> {
        if b == 0.0 {
            return Err(TapeError::DivisionByZero { node: 0 });
        }
        Ok(a / b)
    }
    fn neg(&mut self, a: f64) -> Result<f64, TapeError> {
        Ok(-a)
    }
    fn square(&mut self, a: f64) -> Result<f64, TapeError> {
        Ok(a * a)
    }
    fn sqrt(&mut self, a: f64) -> Result<f64, TapeError> {
        if a < 0.0 {
            return Err(TapeError::SqrtDomain { node: 0, value: a });
        }
        Ok(a.sqrt())
    }
    fn tanh(&mut self, a: f64) -> Result<f64, TapeError> {
        Ok(a.tanh())
    }
    fn scale(&mut self, a: f64, c: f64) -> Result<f64, TapeError> {
        Ok(c * a)
    }
    fn offset(&mut self, a: f64, c: f64) -> Result<f64, TapeError> {
        Ok(a + c)
    }
}
