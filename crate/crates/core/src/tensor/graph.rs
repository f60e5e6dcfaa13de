//! Append-only computation graph with reverse-mode differentiation.

use super::{matmul, matmul_a_bt, matmul_at_b, Tensor, TensorError};
use std::collections::BTreeMap;

/// Handle to a node in a [`Graph`]. Inputs always precede outputs, so the
/// graph is acyclic by construction.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Operation kinds recorded on the graph.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Parameter,
    MatMul,
    Add,
    Concat,
    Relu,
    Sigmoid,
    MaxReduceWithIndex,
    Scale,
    SoftmaxCrossEntropy,
}

enum Op {
    Constant,
    Parameter(String),
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// `broadcast` means `b` is a single row added to every row of `a`.
    Add {
        a: NodeId,
        b: NodeId,
        broadcast: bool,
    },
    /// `axis == 0` stacks rows, `axis == 1` joins columns.
    Concat {
        axis: usize,
        inputs: Vec<NodeId>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    /// Column-wise max over rows; `argmax[j]` is the winning row of column
    /// `j` (first winner on exact ties).
    MaxReduce {
        x: NodeId,
        argmax: Vec<usize>,
    },
    /// Elementwise product with a same-shape factor, a `1 x n` row factor
    /// broadcast over rows, or a `1 x 1` scalar factor.
    Scale {
        x: NodeId,
        factor: NodeId,
    },
    /// Scalar loss `-log softmax(logits)[label]`; softmax kept for backward.
    SoftmaxCrossEntropy {
        logits: NodeId,
        label: usize,
        softmax: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Parameter(_) => OpKind::Parameter,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Concat { .. } => OpKind::Concat,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::MaxReduce { .. } => OpKind::MaxReduceWithIndex,
            Op::Scale { .. } => OpKind::Scale,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Records forward operations and computes gradients by visiting nodes in
/// strict reverse creation order. One graph instance is single-threaded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    /// Row indices selected by a max-reduce node, one per column.
    pub fn max_indices(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::MaxReduce { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite value out of {:?}",
            op.kind()
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Leaf whose gradient is reported by [`Graph::param_grads`] under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let id = self.push(Op::Parameter(name.to_string()), value);
        self.params.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let value = matmul(va, vb);
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    /// Elementwise add; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = vb.rows() == 1 && va.rows() > 1 && va.cols() == vb.cols();
        if !broadcast && va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let mut out = va.clone();
        {
            let cols = out.cols();
            let dst = out.data_mut();
            let src = vb.data();
            for (i, d) in dst.iter_mut().enumerate() {
                *d += if broadcast { src[i % cols] } else { src[i] };
            }
        }
        Ok(self.push(Op::Add { a, b, broadcast }, out))
    }

    pub fn concat_rows(&mut self, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        self.concat(0, inputs)
    }

    pub fn concat_cols(&mut self, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        self.concat(1, inputs)
    }

    fn concat(&mut self, axis: usize, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.value(inputs[0]).shape();
        let value = if axis == 0 {
            let cols = first[1];
            let mut data = Vec::new();
            for &id in inputs {
                let v = self.value(id);
                if v.cols() != cols {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat(rows)",
                        lhs: first,
                        rhs: v.shape(),
                    });
                }
                data.extend_from_slice(v.data());
            }
            Tensor::from_vec(data.len() / cols, cols, data).expect("consistent widths")
        } else {
            let rows = first[0];
            let total: usize = inputs.iter().map(|&id| self.value(id).cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &id in inputs {
                    let v = self.value(id);
                    if v.rows() != rows {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat(cols)",
                            lhs: first,
                            rhs: v.shape(),
                        });
                    }
                    data.extend_from_slice(v.row_slice(r));
                }
            }
            Tensor::from_vec(rows, total, data).expect("consistent heights")
        };
        Ok(self.push(
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
            value,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu { x }, out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(Op::Sigmoid { x }, out)
    }

    /// Column-wise max over the rows of `x`, keeping the winning row index of
    /// every column for the backward pass. Output is `1 x cols`.
    pub fn max_reduce(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(x);
        if v.rows() == 0 {
            return Err(TensorError::Invalid {
                op: "max_reduce_with_index",
                msg: "empty input".into(),
            });
        }
        let cols = v.cols();
        let mut best = v.row_slice(0).to_vec();
        let mut argmax = vec![0usize; cols];
        for r in 1..v.rows() {
            for (j, &cand) in v.row_slice(r).iter().enumerate() {
                if cand > best[j] {
                    best[j] = cand;
                    argmax[j] = r;
                }
            }
        }
        let value = Tensor::row(&best);
        Ok(self.push(Op::MaxReduce { x, argmax }, value))
    }

    /// Elementwise product `x * factor`. The factor may match `x`'s shape,
    /// be a `1 x cols` row broadcast over rows, or be a `1 x 1` scalar.
    pub fn scale(&mut self, x: NodeId, factor: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vf) = (self.value(x), self.value(factor));
        let ok = vf.shape() == vx.shape()
            || vf.is_scalar()
            || (vf.rows() == 1 && vf.cols() == vx.cols());
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "scale",
                lhs: vx.shape(),
                rhs: vf.shape(),
            });
        }
        let mut out = vx.clone();
        {
            let cols = out.cols();
            let dst = out.data_mut();
            let f = vf.data();
            for (i, d) in dst.iter_mut().enumerate() {
                *d *= factor_at(f, i, cols);
            }
        }
        Ok(self.push(Op::Scale { x, factor }, out))
    }

    /// Numerically stable `-log softmax(logits)[label]` as a `1 x 1` node.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        label: usize,
    ) -> Result<NodeId, TensorError> {
        let v = self.value(logits);
        if v.rows() != 1 {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("logits must be a single row, got {:?}", v.shape()),
            });
        }
        if label >= v.cols() {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("label {label} out of range for {} classes", v.cols()),
            });
        }
        let z = v.data();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|&zi| (zi - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let softmax: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let loss = -(z[label] - m - sum.ln());
        let value = Tensor::scalar(loss);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                softmax,
            },
            value,
        ))
    }

    /// Gradient of `loss` (a scalar node) with respect to every node,
    /// accumulated in reverse creation order. Fan-out sums contributions.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(TensorError::NonScalar {
                op: "backward",
                shape,
            });
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Backward pass seeded with an arbitrary upstream gradient at `root`;
    /// used to resume a backward pass across a graph split.
    pub fn backward_seeded(&mut self, root: NodeId, seed: Tensor) -> Result<(), TensorError> {
        if seed.shape() != self.value(root).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "backward_seeded",
                lhs: self.value(root).shape(),
                rhs: seed.shape(),
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, target: NodeId, delta: Tensor) -> Result<(), TensorError> {
        match &mut self.grads[target.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn propagate(&mut self, id: usize, g: &Tensor) -> Result<(), TensorError> {
        match &self.nodes[id].op {
            Op::Constant | Op::Parameter(_) => Ok(()),
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let da = matmul_a_bt(g, self.value(b));
                let db = matmul_at_b(self.value(a), g);
                self.accumulate(a, da)?;
                self.accumulate(b, db)
            }
            Op::Add { a, b, broadcast } => {
                let (a, b, broadcast) = (*a, *b, *broadcast);
                self.accumulate(a, g.clone())?;
                if broadcast {
                    let cols = g.cols();
                    let mut sums = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (s, &v) in sums.iter_mut().zip(g.row_slice(r)) {
                            *s += v;
                        }
                    }
                    self.accumulate(b, Tensor::row(&sums))
                } else {
                    self.accumulate(b, g.clone())
                }
            }
            Op::Concat { axis, inputs } => {
                let axis = *axis;
                let inputs = inputs.clone();
                if axis == 0 {
                    let mut row = 0;
                    for id in inputs {
                        let part_rows = self.value(id).rows();
                        let cols = g.cols();
                        let data = g.data()[row * cols..(row + part_rows) * cols].to_vec();
                        let part = Tensor::from_vec(part_rows, cols, data).expect("segment");
                        self.accumulate(id, part)?;
                        row += part_rows;
                    }
                } else {
                    let mut col = 0;
                    for id in inputs {
                        let part_cols = self.value(id).cols();
                        let rows = g.rows();
                        let mut data = Vec::with_capacity(rows * part_cols);
                        for r in 0..rows {
                            let grow = g.row_slice(r);
                            data.extend_from_slice(&grow[col..col + part_cols]);
                        }
                        let part = Tensor::from_vec(rows, part_cols, data).expect("segment");
                        self.accumulate(id, part)?;
                        col += part_cols;
                    }
                }
                Ok(())
            }
            Op::Relu { x } => {
                let x = *x;
                let mut dx = g.clone();
                {
                    let src = self.value(x).data().to_vec();
                    let dst = dx.data_mut();
                    for (d, s) in dst.iter_mut().zip(src) {
                        if s <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                self.accumulate(x, dx)
            }
            Op::Sigmoid { x } => {
                let x = *x;
                let mut dx = g.clone();
                {
                    let y = self.nodes[id].value.data().to_vec();
                    let dst = dx.data_mut();
                    for (d, yv) in dst.iter_mut().zip(y) {
                        *d *= yv * (1.0 - yv);
                    }
                }
                self.accumulate(x, dx)
            }
            Op::MaxReduce { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let src = self.value(x);
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                {
                    let cols = dx.cols();
                    let dst = dx.data_mut();
                    for (j, &winner) in argmax.iter().enumerate() {
                        dst[winner * cols + j] += g.data()[j];
                    }
                }
                self.accumulate(x, dx)
            }
            Op::Scale { x, factor } => {
                let (x, factor) = (*x, *factor);
                let vx = self.value(x).clone();
                let vf = self.value(factor).clone();
                let cols = vx.cols();

                let mut dx = g.clone();
                {
                    let f = vf.data();
                    let dst = dx.data_mut();
                    for (i, d) in dst.iter_mut().enumerate() {
                        *d *= factor_at(f, i, cols);
                    }
                }
                self.accumulate(x, dx)?;

                let mut df = Tensor::zeros(vf.rows(), vf.cols());
                {
                    let dst = df.data_mut();
                    for (i, (&gv, &xv)) in g.data().iter().zip(vx.data()).enumerate() {
                        let slot = if dst.len() == 1 {
                            0
                        } else if dst.len() == vx.len() {
                            i
                        } else {
                            i % cols
                        };
                        dst[slot] += gv * xv;
                    }
                }
                self.accumulate(factor, df)
            }
            Op::SoftmaxCrossEntropy {
                logits,
                label,
                softmax,
            } => {
                let (logits, label) = (*logits, *label);
                let mut dz = softmax.clone();
                dz[label] -= 1.0;
                let scale = g.item();
                for v in &mut dz {
                    *v *= scale;
                }
                self.accumulate(logits, Tensor::row(&dz))
            }
        }
    }

    /// Gradient accumulated at `id` by the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all parameter leaves, keyed by parameter name. Leaves the
    /// loss never touched report zeros of the parameter shape.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for &id in &self.params {
            let Op::Parameter(name) = &self.nodes[id.0].op else {
                unreachable!("params holds parameter leaves only");
            };
            let v = &self.nodes[id.0].value;
            let g = self
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(v.rows(), v.cols()));
            match out.entry(name.clone()) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    e.get_mut().add_assign(&g).expect("same parameter shape");
                }
            }
        }
        out
    }
}

// Factor lookup shared by the three scale layouts: scalar, row broadcast,
// and same-shape. `i` indexes the scaled tensor, `cols` its width.
fn factor_at(f: &[f64], i: usize, cols: usize) -> f64 {
    if f.len() == 1 {
        f[0]
    } else if i < f.len() {
        f[i]
    } else {
        f[i % cols]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with(values: &[f64]) -> (Graph, NodeId) {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::row(values));
        (g, x)
    }

    #[test]
    fn relu_forward() {
        let (mut g, x) = graph_with(&[-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_reduce_values_and_indices() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let m = g.max_reduce(x).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        assert_eq!(g.max_indices(m).unwrap(), &[1, 0]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(1, 3, vec![1.0; 3]).unwrap());
        let b = g.constant(Tensor::from_vec(3, 1, vec![1.0; 3]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), [1, 1]);
        assert_eq!(g.value(c).item(), 3.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn backward_relu_subgradient() {
        // loss = sum(relu(x)) at x = [-1, 2]; sum via matmul with ones.
        let (mut g, x) = graph_with(&[-1.0, 2.0]);
        let r = g.relu(x);
        let ones = g.constant(Tensor::from_vec(2, 1, vec![1.0; 2]).unwrap());
        let loss = g.matmul(r, ones).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grads()["x"].data(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_max_routes_to_argmax_only() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::from_vec(3, 1, vec![1.0, 3.0, 2.0]).unwrap());
        let m = g.max_reduce(x).unwrap();
        g.backward(m).unwrap();
        assert_eq!(g.param_grads()["x"].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn backward_accumulates_over_fanout() {
        // loss = x·x (same leaf used twice) at x = [3]; d/dx = 2x = 6.
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let y = g.scale(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.param_grads()["x"].item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let (mut g, x) = graph_with(&[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(TensorError::NonScalar { .. })));
    }

    #[test]
    fn broadcast_add_sums_bias_gradient_over_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(3, 2, vec![0.0; 6]).unwrap());
        let b = g.param("b", Tensor::row(&[1.0, -1.0]));
        let s = g.add(x, b).unwrap();
        let m = g.max_reduce(s).unwrap(); // 1x2
        let ones = g.constant(Tensor::from_vec(2, 1, vec![1.0; 2]).unwrap());
        let loss = g.matmul(m, ones).unwrap();
        g.backward(loss).unwrap();
        // Max picks a single row per column, so each bias column gets grad 1.
        assert_eq!(g.param_grads()["b"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_cross_entropy_matches_direct_formula() {
        let mut g = Graph::new();
        let z = g.param("z", Tensor::row(&[0.5, -0.25, 1.5]));
        let loss = g.softmax_cross_entropy(z, 2).unwrap();
        let direct = {
            let z = [0.5f64, -0.25, 1.5];
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            -(z[2].exp() / s).ln()
        };
        assert!((g.value(loss).item() - direct).abs() < 1e-12);

        g.backward(loss).unwrap();
        let grad = g.param_grads()["z"].clone();
        let s: f64 = [0.5f64, -0.25, 1.5].iter().map(|v| v.exp()).sum();
        let expect = [
            0.5f64.exp() / s,
            (-0.25f64).exp() / s,
            1.5f64.exp() / s - 1.0,
        ];
        for (got, want) in grad.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_cols_then_backward_splits_segments() {
        let mut g = Graph::new();
        let a = g.param("a", Tensor::row(&[1.0, 2.0]));
        let b = g.param("b", Tensor::row(&[3.0]));
        let c = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
        let ones = g.constant(Tensor::from_vec(3, 1, vec![1.0, 2.0, 4.0]).unwrap());
        let loss = g.matmul(c, ones).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.param_grads()["a"].data(), &[1.0, 2.0]);
        assert_eq!(g.param_grads()["b"].data(), &[4.0]);
    }
}
