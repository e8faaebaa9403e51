//! Operation tape for reverse-mode differentiation.
//!
//! Forward ops append nodes whose values live in one flat arena buffer;
//! `backward` walks the nodes once in reverse, accumulating parameter
//! gradients into a [`GradientSet`]. A tape is consumed by `backward` and
//! must be `reset` before the next recording, which reuses the arena
//! allocation.
//!
//! Forward values are computed by the same kernels as the no-tape inference
//! path in [`super::math`], so the two paths agree bit for bit.

use crate::num::Real;

use super::math;
use super::params::{GradientSet, ModelParams, ParamId};
use super::NnError;

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Dense { w: ParamId, b: ParamId, x: NodeRef },
    Relu { x: NodeRef },
    LogSoftmax { x: NodeRef },
    Embed { table: ParamId, row: usize },
    Concat { parts: Vec<NodeRef> },
    Add { a: NodeRef, b: NodeRef },
}

#[derive(Debug, Clone)]
struct NodeMeta {
    off: usize,
    len: usize,
    op: Op,
}

#[derive(Debug)]
pub struct Tape<T> {
    buf: Vec<T>,
    nodes: Vec<NodeMeta>,
    scratch: Vec<T>,
    grad_buf: Vec<T>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            buf: Vec::new(),
            nodes: Vec::new(),
            scratch: Vec::new(),
            grad_buf: Vec::new(),
            consumed: false,
        }
    }

    /// Clears the recording for reuse, keeping allocations.
    pub fn reset(&mut self) {
        self.buf.clear();
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// The cached forward value of a node.
    pub fn value(&self, node: NodeRef) -> &[T] {
        let meta = &self.nodes[node.0];
        &self.buf[meta.off..meta.off + meta.len]
    }

    fn range(&self, node: NodeRef) -> (usize, usize) {
        let meta = &self.nodes[node.0];
        (meta.off, meta.len)
    }

    fn push_slice(&mut self, op: Op, values: &[T]) -> NodeRef {
        assert!(!self.consumed, "recording on a consumed tape; call reset()");
        let off = self.buf.len();
        self.buf.extend_from_slice(values);
        self.nodes.push(NodeMeta {
            off,
            len: values.len(),
            op,
        });
        NodeRef(self.nodes.len() - 1)
    }

    fn push_scratch(&mut self, op: Op) -> NodeRef {
        let scratch = std::mem::take(&mut self.scratch);
        let node = self.push_slice(op, &scratch);
        self.scratch = scratch;
        node
    }

    /// Records a leaf vector (no gradient flows past it).
    pub fn input(&mut self, values: &[T]) -> NodeRef {
        self.push_slice(Op::Input, values)
    }

    /// Records `W x + b`.
    pub fn dense(
        &mut self,
        params: &ModelParams<T>,
        w: ParamId,
        b: ParamId,
        x: NodeRef,
    ) -> Result<NodeRef, NnError> {
        let wt = params.tensor(w);
        let bt = params.tensor(b);
        let (x_off, x_len) = self.range(x);
        if wt.cols() != x_len {
            return Err(NnError::DimMismatch {
                what: "dense input",
                expected: wt.cols(),
                got: x_len,
            });
        }
        if bt.len() != wt.rows() {
            return Err(NnError::DimMismatch {
                what: "dense bias",
                expected: wt.rows(),
                got: bt.len(),
            });
        }
        let mut scratch = std::mem::take(&mut self.scratch);
        math::dense_into(wt, bt, &self.buf[x_off..x_off + x_len], &mut scratch);
        self.scratch = scratch;
        Ok(self.push_scratch(Op::Dense { w, b, x }))
    }

    /// Records elementwise `max(0, x)`. Backward passes gradient only where
    /// the input was strictly positive.
    pub fn relu(&mut self, x: NodeRef) -> NodeRef {
        let (off, len) = self.range(x);
        let mut scratch = std::mem::take(&mut self.scratch);
        math::relu_into(&self.buf[off..off + len], &mut scratch);
        self.scratch = scratch;
        self.push_scratch(Op::Relu { x })
    }

    /// Records a numerically stable log-softmax.
    pub fn log_softmax(&mut self, x: NodeRef) -> Result<NodeRef, NnError> {
        let (off, len) = self.range(x);
        if len == 0 {
            return Err(NnError::DimMismatch {
                what: "log_softmax input",
                expected: 1,
                got: 0,
            });
        }
        if self.buf[off..off + len].iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { what: "logits" });
        }
        let mut scratch = std::mem::take(&mut self.scratch);
        math::log_softmax_into(&self.buf[off..off + len], &mut scratch);
        self.scratch = scratch;
        Ok(self.push_scratch(Op::LogSoftmax { x }))
    }

    /// Records an embedding-row lookup. Backward accumulates into that row
    /// only.
    pub fn embed(
        &mut self,
        params: &ModelParams<T>,
        table: ParamId,
        token: usize,
    ) -> Result<NodeRef, NnError> {
        let t = params.tensor(table);
        if token >= t.rows() {
            return Err(NnError::TokenOutOfRange {
                token,
                rows: t.rows(),
            });
        }
        Ok(self.push_slice(Op::Embed { table, row: token }, t.row(token)))
    }

    /// Records the concatenation of several nodes.
    pub fn concat(&mut self, parts: &[NodeRef]) -> NodeRef {
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.clear();
        for p in parts {
            let (off, len) = self.range(*p);
            scratch.extend_from_slice(&self.buf[off..off + len]);
        }
        self.scratch = scratch;
        self.push_scratch(Op::Concat {
            parts: parts.to_vec(),
        })
    }

    /// Records elementwise addition of two equal-length nodes.
    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef, NnError> {
        let (a_off, a_len) = self.range(a);
        let (b_off, b_len) = self.range(b);
        if a_len != b_len {
            return Err(NnError::DimMismatch {
                what: "add",
                expected: a_len,
                got: b_len,
            });
        }
        let mut scratch = std::mem::take(&mut self.scratch);
        scratch.clear();
        scratch.extend(
            self.buf[a_off..a_off + a_len]
                .iter()
                .zip(&self.buf[b_off..b_off + b_len])
                .map(|(&u, &v)| u + v),
        );
        self.scratch = scratch;
        Ok(self.push_scratch(Op::Add { a, b }))
    }

    /// Reverse sweep. Seeds are `(node, d loss / d node_value)` pairs;
    /// parameter gradients accumulate into `grads`.
    ///
    /// Consumes the tape: a second call without [`Tape::reset`] is a state
    /// error.
    pub fn backward(
        &mut self,
        params: &ModelParams<T>,
        seeds: &[(NodeRef, Vec<T>)],
        grads: &mut GradientSet<T>,
    ) -> Result<(), NnError> {
        if self.consumed {
            return Err(NnError::TapeConsumed);
        }
        self.consumed = true;

        self.grad_buf.clear();
        self.grad_buf.resize(self.buf.len(), T::zero());
        for (node, seed) in seeds {
            let meta = &self.nodes[node.0];
            if seed.len() != meta.len {
                return Err(NnError::DimMismatch {
                    what: "backward seed",
                    expected: meta.len,
                    got: seed.len(),
                });
            }
            for (g, s) in self.grad_buf[meta.off..meta.off + meta.len]
                .iter_mut()
                .zip(seed)
            {
                *g = *g + *s;
            }
        }

        for idx in (0..self.nodes.len()).rev() {
            let (off, len) = (self.nodes[idx].off, self.nodes[idx].len);
            // Inputs of a node are recorded before it, so their gradient
            // slots all lie below `off`.
            let (lower, upper) = self.grad_buf.split_at_mut(off);
            let g = &upper[..len];
            match &self.nodes[idx].op {
                Op::Input => {}
                Op::Dense { w, b, x } => {
                    let xm = &self.nodes[x.0];
                    let xs = &self.buf[xm.off..xm.off + xm.len];
                    let wt = params.tensor(*w);
                    {
                        let gw = grads.get_mut(*w);
                        for (i, &gi) in g.iter().enumerate() {
                            for (dwij, &xj) in gw.row_mut(i).iter_mut().zip(xs) {
                                *dwij = *dwij + gi * xj;
                            }
                        }
                    }
                    {
                        let gb = grads.get_mut(*b);
                        for (dbi, &gi) in gb.data_mut().iter_mut().zip(g) {
                            *dbi = *dbi + gi;
                        }
                    }
                    let dx = &mut lower[xm.off..xm.off + xm.len];
                    for (i, &gi) in g.iter().enumerate() {
                        for (dxj, &wij) in dx.iter_mut().zip(wt.row(i)) {
                            *dxj = *dxj + gi * wij;
                        }
                    }
                }
                Op::Relu { x } => {
                    let xm = &self.nodes[x.0];
                    let xs = &self.buf[xm.off..xm.off + xm.len];
                    let dx = &mut lower[xm.off..xm.off + xm.len];
                    for ((dxj, &xj), &gj) in dx.iter_mut().zip(xs).zip(g) {
                        if xj > T::zero() {
                            *dxj = *dxj + gj;
                        }
                    }
                }
                Op::LogSoftmax { x } => {
                    let log_q = &self.buf[off..off + len];
                    let g_sum = g.iter().fold(T::zero(), |acc, &v| acc + v);
                    let xm = &self.nodes[x.0];
                    let dx = &mut lower[xm.off..xm.off + xm.len];
                    for ((dxj, &gj), &lqj) in dx.iter_mut().zip(g).zip(log_q) {
                        *dxj = *dxj + gj - lqj.exp() * g_sum;
                    }
                }
                Op::Embed { table, row } => {
                    let gt = grads.get_mut(*table);
                    for (dtj, &gj) in gt.row_mut(*row).iter_mut().zip(g) {
                        *dtj = *dtj + gj;
                    }
                }
                Op::Concat { parts } => {
                    let mut cursor = 0;
                    for p in parts {
                        let pm = &self.nodes[p.0];
                        let dp = &mut lower[pm.off..pm.off + pm.len];
                        for (dpj, &gj) in dp.iter_mut().zip(&g[cursor..cursor + pm.len]) {
                            *dpj = *dpj + gj;
                        }
                        cursor += pm.len;
                    }
                }
                Op::Add { a, b } => {
                    for node in [a, b] {
                        let nm = &self.nodes[node.0];
                        let dn = &mut lower[nm.off..nm.off + nm.len];
                        for (dnj, &gj) in dn.iter_mut().zip(g) {
                            *dnj = *dnj + gj;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
