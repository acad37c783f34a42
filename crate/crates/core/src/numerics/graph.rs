//! Tape of recorded ops with reverse-mode differentiation.

use super::ops::{
    self, concat_split, conv1d_backward, conv3d_backward, gemm_nt, gemm_tn, matmul_dims,
    AxisSplit, Conv1dGeom, Conv3dGeom, L2_EPS,
};
use super::{eval_op, NumericsError, OpAttrs, OpKind, Tensor};

/// Index of a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Origin {
    Leaf,
    Op { kind: OpKind, inputs: Vec<NodeId>, attrs: OpAttrs },
}

#[derive(Clone, Debug)]
struct Node {
    origin: Origin,
    requires_grad: bool,
    is_param: bool,
}

/// A DAG of tensor operations. Nodes are appended in evaluation order, so
/// every input id precedes its consumer.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    zeroed_backward: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes the backward rule of `kind` contribute nothing. Used to build
    /// negative controls for the gradient checker.
    pub fn zero_backward_of(&mut self, kind: OpKind) {
        self.zeroed_backward = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, origin: Origin, value: Tensor, requires_grad: bool, is_param: bool) -> NodeId {
        self.nodes.push(Node { origin, requires_grad, is_param });
        self.values.push(value);
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Leaf, value, false, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Leaf, value, true, true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].is_param
    }

    /// Records `kind` applied to `inputs`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId], attrs: OpAttrs) -> Result<NodeId, NumericsError> {
        let value = {
            let tensors: Vec<&Tensor> = inputs.iter().map(|i| &self.values[i.0]).collect();
            eval_op(kind, &tensors, &attrs)?
        };
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let origin = Origin::Op { kind, inputs: inputs.to_vec(), attrs };
        Ok(self.push(origin, value, requires_grad, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Add, &[a, b], OpAttrs::default())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Mul, &[a, b], OpAttrs::default())
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::MulScalar, &[a], OpAttrs::scalar(s))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::MatMul, &[a, b], OpAttrs::default())
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Transpose, &[a], OpAttrs::default())
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Reshape, &[a], OpAttrs::shape(shape))
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Conv1d, &[x, w], OpAttrs::conv1d(stride, pad))
    }

    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        dilation: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Conv3d, &[x, w], OpAttrs::conv3d(dilation, pad))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Relu, &[a], OpAttrs::default())
    }

    pub fn maxpool(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::MaxPool, &[a], OpAttrs::axis(axis))
    }

    pub fn meanpool(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::MeanPool, &[a], OpAttrs::axis(axis))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Concat, inputs, OpAttrs::axis(axis))
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Softmax, &[a], OpAttrs::axis(axis))
    }

    pub fn l2_normalize(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::L2Normalize, &[a], OpAttrs::axis(axis))
    }

    /// Summed cross-entropy of the rows of a 2-D logit matrix.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::CrossEntropy, &[logits], OpAttrs::targets(targets))
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Broadcast, &[a], OpAttrs::shape(shape))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        self.apply(OpKind::Sum, &[a], OpAttrs::default())
    }

    /// `x · w + b` for a 2-D `x`, with `b` broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let y = self.matmul(x, w)?;
        let shape = self.value(y).shape().to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(y, bb)
    }

    /// Adds a per-channel bias to the trailing axis of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let shape = self.value(x).shape().to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(x, bb)
    }

    /// Populates gradients of every node reachable backwards from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        let shape = self.values[loss.0].shape().to_vec();
        if self.values[loss.0].numel() != 1 {
            return Err(NumericsError::NonScalarLoss(shape));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::filled(&shape, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Origin::Op { kind, inputs, attrs } = &self.nodes[idx].origin {
                if Some(*kind) != self.zeroed_backward {
                    let contribs = self.vjp(*kind, inputs, attrs, idx, &gout)?;
                    for (input, contrib) in inputs.iter().zip(contribs) {
                        let Some(c) = contrib else { continue };
                        match &mut self.grads[input.0] {
                            Some(acc) => {
                                for (a, v) in acc.data_mut().iter_mut().zip(c.data()) {
                                    *a += v;
                                }
                            }
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Vector-Jacobian product of one node with respect to each input.
    fn vjp(
        &self,
        kind: OpKind,
        inputs: &[NodeId],
        attrs: &OpAttrs,
        out_idx: usize,
        g: &Tensor,
    ) -> Result<Vec<Option<Tensor>>, NumericsError> {
        let val = |i: usize| &self.values[inputs[i].0];
        let want = |i: usize| self.wants(inputs[i]);
        let like = |t: &Tensor, data: Vec<f64>| Tensor::from_parts(t.shape().to_vec(), data);
        let out = &self.values[out_idx];
        let res = match kind {
            OpKind::Add => vec![
                want(0).then(|| g.clone()),
                want(1).then(|| g.clone()),
            ],
            OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                vec![
                    want(0).then(|| like(a, g.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())),
                    want(1).then(|| like(b, g.data().iter().zip(a.data()).map(|(x, y)| x * y).collect())),
                ]
            }
            OpKind::MulScalar => vec![want(0).then(|| g.map(|v| v * attrs.scalar))],
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let d = matmul_dims(a, b)?;
                let ga = want(0).then(|| {
                    let mut ga = vec![0.0; a.numel()];
                    for bi in 0..d.batch {
                        gemm_nt(
                            &g.data()[bi * d.m * d.n..][..d.m * d.n],
                            &b.data()[bi * d.k * d.n..][..d.k * d.n],
                            &mut ga[bi * d.m * d.k..][..d.m * d.k],
                            d.m,
                            d.n,
                            d.k,
                        );
                    }
                    like(a, ga)
                });
                let gb = want(1).then(|| {
                    let mut gb = vec![0.0; b.numel()];
                    for bi in 0..d.batch {
                        gemm_tn(
                            &a.data()[bi * d.m * d.k..][..d.m * d.k],
                            &g.data()[bi * d.m * d.n..][..d.m * d.n],
                            &mut gb[bi * d.k * d.n..][..d.k * d.n],
                            d.m,
                            d.k,
                            d.n,
                        );
                    }
                    like(b, gb)
                });
                vec![ga, gb]
            }
            OpKind::Transpose => {
                let (n, m) = (g.shape()[0], g.shape()[1]);
                vec![want(0).then(|| like(val(0), ops::transpose2(g.data(), n, m)))]
            }
            OpKind::Reshape => vec![want(0).then(|| like(val(0), g.data().to_vec()))],
            OpKind::Conv1d => {
                let (x, w) = (val(0), val(1));
                let geom = Conv1dGeom::new(x, w, attrs.stride, attrs.pad[0])?;
                let mut gx = want(0).then(|| vec![0.0; x.numel()]);
                let mut gw = want(1).then(|| vec![0.0; w.numel()]);
                conv1d_backward(&geom, x.data(), w.data(), g.data(), gx.as_deref_mut(), gw.as_deref_mut());
                vec![gx.map(|d| like(x, d)), gw.map(|d| like(w, d))]
            }
            OpKind::Conv3d => {
                let (x, w) = (val(0), val(1));
                let geom = Conv3dGeom::new(x, w, attrs.dilation, attrs.pad)?;
                let mut gx = want(0).then(|| vec![0.0; x.numel()]);
                let mut gw = want(1).then(|| vec![0.0; w.numel()]);
                conv3d_backward(&geom, x.data(), w.data(), g.data(), gx.as_deref_mut(), gw.as_deref_mut());
                vec![gx.map(|d| like(x, d)), gw.map(|d| like(w, d))]
            }
            OpKind::Relu => {
                let x = val(0);
                vec![want(0).then(|| {
                    like(x, x.data().iter().zip(g.data()).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect())
                })]
            }
            OpKind::MaxPool => {
                let x = val(0);
                let ax = AxisSplit::new(kind, x.shape(), attrs.axis)?;
                vec![want(0).then(|| {
                    let mut gx = vec![0.0; x.numel()];
                    for o in 0..ax.outer {
                        for j in 0..ax.inner {
                            let mut best = 0;
                            let mut bv = f64::NEG_INFINITY;
                            for i in 0..ax.n {
                                let v = x.data()[ax.index(o, i, j)];
                                if v > bv {
                                    bv = v;
                                    best = i;
                                }
                            }
                            gx[ax.index(o, best, j)] += g.data()[o * ax.inner + j];
                        }
                    }
                    like(x, gx)
                })]
            }
            OpKind::MeanPool => {
                let x = val(0);
                let ax = AxisSplit::new(kind, x.shape(), attrs.axis)?;
                vec![want(0).then(|| {
                    let mut gx = vec![0.0; x.numel()];
                    let inv = 1.0 / ax.n as f64;
                    for o in 0..ax.outer {
                        for i in 0..ax.n {
                            for j in 0..ax.inner {
                                gx[ax.index(o, i, j)] = g.data()[o * ax.inner + j] * inv;
                            }
                        }
                    }
                    like(x, gx)
                })]
            }
            OpKind::Concat => {
                let sizes: Vec<usize> = (0..inputs.len()).map(|i| val(i).shape()[attrs.axis]).collect();
                concat_split(g, &sizes, attrs.axis)
                    .into_iter()
                    .enumerate()
                    .map(|(i, d)| want(i).then(|| like(val(i), d)))
                    .collect()
            }
            OpKind::Softmax => {
                let ax = AxisSplit::new(kind, out.shape(), attrs.axis)?;
                vec![want(0).then(|| {
                    let mut gx = vec![0.0; out.numel()];
                    for o in 0..ax.outer {
                        for j in 0..ax.inner {
                            let dot: f64 = (0..ax.n)
                                .map(|i| {
                                    let k = ax.index(o, i, j);
                                    g.data()[k] * out.data()[k]
                                })
                                .sum();
                            for i in 0..ax.n {
                                let k = ax.index(o, i, j);
                                gx[k] = out.data()[k] * (g.data()[k] - dot);
                            }
                        }
                    }
                    like(out, gx)
                })]
            }
            OpKind::L2Normalize => {
                let x = val(0);
                let ax = AxisSplit::new(kind, x.shape(), attrs.axis)?;
                vec![want(0).then(|| {
                    let mut gx = vec![0.0; x.numel()];
                    for o in 0..ax.outer {
                        for j in 0..ax.inner {
                            let norm = (0..ax.n)
                                .map(|i| x.data()[ax.index(o, i, j)].powi(2))
                                .sum::<f64>()
                                .sqrt();
                            if norm < L2_EPS {
                                continue;
                            }
                            let dot: f64 = (0..ax.n)
                                .map(|i| {
                                    let k = ax.index(o, i, j);
                                    g.data()[k] * out.data()[k]
                                })
                                .sum();
                            for i in 0..ax.n {
                                let k = ax.index(o, i, j);
                                gx[k] = (g.data()[k] - out.data()[k] * dot) / norm;
                            }
                        }
                    }
                    like(x, gx)
                })]
            }
            OpKind::CrossEntropy => {
                let z = val(0);
                let (_, mut probs) = ops::cross_entropy(z, &attrs.targets, true)?;
                let k = z.shape()[1];
                let scale = g.item();
                for (r, &t) in attrs.targets.iter().enumerate() {
                    probs[r * k + t] -= 1.0;
                }
                for p in &mut probs {
                    *p *= scale;
                }
                vec![want(0).then(|| like(z, probs))]
            }
            OpKind::Broadcast => {
                let x = val(0);
                let map = ops::broadcast_index_map(x.shape(), &attrs.shape).ok_or_else(|| {
                    NumericsError::ShapeMismatch {
                        op: kind.name(),
                        shapes: vec![x.shape().to_vec(), attrs.shape.clone()],
                    }
                })?;
                vec![want(0).then(|| {
                    let mut gx = vec![0.0; x.numel()];
                    for (gv, &src) in g.data().iter().zip(&map) {
                        gx[src] += gv;
                    }
                    like(x, gx)
                })]
            }
            OpKind::Sum => {
                let x = val(0);
                vec![want(0).then(|| Tensor::filled(x.shape(), g.item()))]
            }
        };
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn cross_entropy_gradient_at_zero_logits() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(z, &[2]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(z).unwrap();
        assert_eq!(grad.data(), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let z = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(z), Err(NumericsError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = g.param(Tensor::vector(vec![3.0, 4.0]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let p = g.param(Tensor::vector(vec![1.0, -2.0]));
        let a = g.add(p, p).unwrap();
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[2.0, 2.0]);
    }
}
