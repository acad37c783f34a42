//! Forward kernels for the op catalog and the vector-Jacobian products used by
//! the tape. Every kernel is single-threaded with a fixed summation order, so
//! identical inputs give bit-identical outputs.

use std::fmt;
use std::str::FromStr;

use super::{NumericsError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Mul,
    MulScalar,
    MatMul,
    Transpose,
    Reshape,
    Conv1d,
    Conv3d,
    Relu,
    MaxPool,
    MeanPool,
    Concat,
    Softmax,
    L2Normalize,
    CrossEntropy,
    Broadcast,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Mul,
        OpKind::MulScalar,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Conv1d,
        OpKind::Conv3d,
        OpKind::Relu,
        OpKind::MaxPool,
        OpKind::MeanPool,
        OpKind::Concat,
        OpKind::Softmax,
        OpKind::L2Normalize,
        OpKind::CrossEntropy,
        OpKind::Broadcast,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::MulScalar => "mul_scalar",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Conv1d => "conv1d",
            OpKind::Conv3d => "conv3d",
            OpKind::Relu => "relu",
            OpKind::MaxPool => "maxpool",
            OpKind::MeanPool => "meanpool",
            OpKind::Concat => "concat",
            OpKind::Softmax => "softmax",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Broadcast => "broadcast",
            OpKind::Sum => "sum",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = NumericsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| NumericsError::UnknownOp(s.to_string()))
    }
}

/// Attributes consumed by the ops that need them; unused fields are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct OpAttrs {
    pub scalar: f64,
    pub axis: usize,
    pub stride: usize,
    pub pad: [usize; 3],
    pub dilation: [usize; 3],
    pub shape: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Default for OpAttrs {
    fn default() -> Self {
        Self {
            scalar: 1.0,
            axis: 0,
            stride: 1,
            pad: [0; 3],
            dilation: [1; 3],
            shape: Vec::new(),
            targets: Vec::new(),
        }
    }
}

impl OpAttrs {
    pub fn scalar(s: f64) -> Self {
        Self { scalar: s, ..Self::default() }
    }

    pub fn axis(axis: usize) -> Self {
        Self { axis, ..Self::default() }
    }

    pub fn shape(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), ..Self::default() }
    }

    pub fn targets(targets: &[usize]) -> Self {
        Self { targets: targets.to_vec(), ..Self::default() }
    }

    pub fn conv1d(stride: usize, pad: usize) -> Self {
        Self { stride, pad: [pad, 0, 0], ..Self::default() }
    }

    pub fn conv3d(dilation: [usize; 3], pad: [usize; 3]) -> Self {
        Self { dilation, pad, ..Self::default() }
    }
}

fn mismatch(op: OpKind, inputs: &[&Tensor]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op: op.name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn invalid(op: OpKind, msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument { op: op.name(), msg: msg.into() }
}

fn arity(op: OpKind, inputs: &[&Tensor], n: usize) -> Result<(), NumericsError> {
    if inputs.len() != n {
        return Err(invalid(op, format!("expected {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// Evaluates one op of the catalog on concrete tensors.
pub fn eval_op(op: OpKind, inputs: &[&Tensor], attrs: &OpAttrs) -> Result<Tensor, NumericsError> {
    match op {
        OpKind::Add | OpKind::Mul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(mismatch(op, inputs));
            }
            let data = if op == OpKind::Add {
                a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()
            } else {
                a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
            };
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        OpKind::MulScalar => {
            arity(op, inputs, 1)?;
            Ok(inputs[0].map(|v| v * attrs.scalar))
        }
        OpKind::MatMul => {
            arity(op, inputs, 2)?;
            matmul(inputs[0], inputs[1])
        }
        OpKind::Transpose => {
            arity(op, inputs, 1)?;
            let a = inputs[0];
            if a.ndim() != 2 {
                return Err(mismatch(op, inputs));
            }
            let (m, n) = (a.shape()[0], a.shape()[1]);
            Ok(Tensor::from_parts(vec![n, m], transpose2(a.data(), m, n)))
        }
        OpKind::Reshape => {
            arity(op, inputs, 1)?;
            let numel: usize = attrs.shape.iter().product();
            if numel != inputs[0].numel() {
                return Err(NumericsError::ShapeMismatch {
                    op: op.name(),
                    shapes: vec![inputs[0].shape().to_vec(), attrs.shape.clone()],
                });
            }
            inputs[0].reshaped(&attrs.shape)
        }
        OpKind::Conv1d => {
            arity(op, inputs, 2)?;
            let geom = Conv1dGeom::new(inputs[0], inputs[1], attrs.stride, attrs.pad[0])?;
            Ok(conv1d_forward(&geom, inputs[0].data(), inputs[1].data()))
        }
        OpKind::Conv3d => {
            arity(op, inputs, 2)?;
            let geom = Conv3dGeom::new(inputs[0], inputs[1], attrs.dilation, attrs.pad)?;
            Ok(conv3d_forward(&geom, inputs[0].data(), inputs[1].data()))
        }
        OpKind::Relu => {
            arity(op, inputs, 1)?;
            Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }))
        }
        OpKind::MaxPool | OpKind::MeanPool => {
            arity(op, inputs, 1)?;
            let a = inputs[0];
            let ax = AxisSplit::new(op, a.shape(), attrs.axis)?;
            let mut out = vec![0.0; ax.outer * ax.inner];
            for o in 0..ax.outer {
                for j in 0..ax.inner {
                    let mut acc = if op == OpKind::MaxPool { f64::NEG_INFINITY } else { 0.0 };
                    for i in 0..ax.n {
                        let v = a.data()[ax.index(o, i, j)];
                        if op == OpKind::MaxPool {
                            if v > acc {
                                acc = v;
                            }
                        } else {
                            acc += v;
                        }
                    }
                    if op == OpKind::MeanPool {
                        acc /= ax.n as f64;
                    }
                    out[o * ax.inner + j] = acc;
                }
            }
            Ok(Tensor::from_parts(ax.reduced_shape(a.shape()), out))
        }
        OpKind::Concat => concat(inputs, attrs.axis),
        OpKind::Softmax => {
            arity(op, inputs, 1)?;
            let a = inputs[0];
            let ax = AxisSplit::new(op, a.shape(), attrs.axis)?;
            let mut out = vec![0.0; a.numel()];
            for o in 0..ax.outer {
                for j in 0..ax.inner {
                    let mut mx = f64::NEG_INFINITY;
                    for i in 0..ax.n {
                        mx = mx.max(a.data()[ax.index(o, i, j)]);
                    }
                    let mut z = 0.0;
                    for i in 0..ax.n {
                        let idx = ax.index(o, i, j);
                        let e = (a.data()[idx] - mx).exp();
                        out[idx] = e;
                        z += e;
                    }
                    for i in 0..ax.n {
                        out[ax.index(o, i, j)] /= z;
                    }
                }
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), out))
        }
        OpKind::L2Normalize => {
            arity(op, inputs, 1)?;
            let a = inputs[0];
            let ax = AxisSplit::new(op, a.shape(), attrs.axis)?;
            let mut out = vec![0.0; a.numel()];
            for o in 0..ax.outer {
                for j in 0..ax.inner {
                    let norm = (0..ax.n)
                        .map(|i| a.data()[ax.index(o, i, j)].powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if norm < L2_EPS {
                        continue;
                    }
                    for i in 0..ax.n {
                        let idx = ax.index(o, i, j);
                        out[idx] = a.data()[idx] / norm;
                    }
                }
            }
            Ok(Tensor::from_parts(a.shape().to_vec(), out))
        }
        OpKind::CrossEntropy => {
            arity(op, inputs, 1)?;
            let (loss, _) = cross_entropy(inputs[0], &attrs.targets, false)?;
            Ok(Tensor::scalar(loss))
        }
        OpKind::Broadcast => {
            arity(op, inputs, 1)?;
            broadcast(inputs[0], &attrs.shape)
        }
        OpKind::Sum => {
            arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
    }
}

pub(crate) const L2_EPS: f64 = 1e-12;

/// Decomposition of a shape around one axis into (outer, n, inner).
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub n: usize,
    pub inner: usize,
    pub axis: usize,
}

impl AxisSplit {
    pub fn new(op: OpKind, shape: &[usize], axis: usize) -> Result<Self, NumericsError> {
        if axis >= shape.len() {
            return Err(invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            n: shape[axis],
            inner: shape[axis + 1..].iter().product(),
            axis,
        })
    }

    #[inline]
    pub fn index(&self, o: usize, i: usize, j: usize) -> usize {
        (o * self.n + i) * self.inner + j
    }

    pub fn reduced_shape(&self, shape: &[usize]) -> Vec<usize> {
        let mut s = shape.to_vec();
        s.remove(self.axis);
        s
    }
}

pub(crate) fn transpose2(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a · bᵀ` with `a: m×n`, `b: k×n`, `c: m×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c += aᵀ · b` with `a: m×k`, `b: m×n`, `c: k×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Matrix dimensions of a (possibly batched) matmul.
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<MatMulDims, NumericsError> {
    let err = || mismatch(OpKind::MatMul, &[a, b]);
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) if k == k2 => Ok(MatMulDims { batch: 1, m, k, n, out_shape: vec![m, n] }),
        (&[bs, m, k], &[bs2, k2, n]) if k == k2 && bs == bs2 => Ok(MatMulDims {
            batch: bs,
            m,
            k,
            n,
            out_shape: vec![bs, m, n],
        }),
        _ => Err(err()),
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let d = matmul_dims(a, b)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    for bi in 0..d.batch {
        gemm_nn(
            &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k],
            &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n],
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    Ok(Tensor::from_parts(d.out_shape, out))
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor, NumericsError> {
    let op = OpKind::Concat;
    let first = inputs.first().ok_or_else(|| invalid(op, "no inputs"))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(invalid(op, format!("axis {axis} out of range")));
    }
    for t in inputs {
        let ok = t.ndim() == rank
            && t.shape().iter().zip(first.shape()).enumerate().all(|(d, (x, y))| d == axis || x == y);
        if !ok {
            return Err(mismatch(op, inputs));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Splits a gradient of a concat output back into per-input pieces.
pub(crate) fn concat_split(grad: &Tensor, sizes: &[usize], axis: usize) -> Vec<Vec<f64>> {
    let outer: usize = grad.shape()[..axis].iter().product();
    let inner: usize = grad.shape()[axis + 1..].iter().product();
    let total: usize = sizes.iter().sum();
    let mut parts: Vec<Vec<f64>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * inner)).collect();
    for o in 0..outer {
        let mut off = o * total * inner;
        for (part, &s) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&grad.data()[off..off + s * inner]);
            off += s * inner;
        }
    }
    parts
}

/// Right-aligned broadcast plan: for each target element, the source index.
pub(crate) fn broadcast_index_map(src: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if src.len() > target.len() {
        return None;
    }
    let lead = target.len() - src.len();
    let mut src_strides = vec![0usize; target.len()];
    let mut stride = 1;
    for d in (0..src.len()).rev() {
        let s = src[d];
        let t = target[lead + d];
        if s == t {
            src_strides[lead + d] = stride;
        } else if s == 1 {
            src_strides[lead + d] = 0;
        } else {
            return None;
        }
        stride *= s;
    }
    let numel: usize = target.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(map)
}

fn broadcast(a: &Tensor, target: &[usize]) -> Result<Tensor, NumericsError> {
    let map = broadcast_index_map(a.shape(), target).ok_or_else(|| NumericsError::ShapeMismatch {
        op: OpKind::Broadcast.name(),
        shapes: vec![a.shape().to_vec(), target.to_vec()],
    })?;
    let data = map.iter().map(|&i| a.data()[i]).collect();
    Tensor::new(target.to_vec(), data)
}

/// Summed cross-entropy over rows of a 2-D logit matrix. Optionally returns
/// the row-wise softmax for the backward pass.
pub(crate) fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    want_probs: bool,
) -> Result<(f64, Vec<f64>), NumericsError> {
    let op = OpKind::CrossEntropy;
    if logits.ndim() != 2 {
        return Err(mismatch(op, &[logits]));
    }
    let (rows, k) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != rows {
        return Err(invalid(op, format!("{} targets for {rows} rows", targets.len())));
    }
    let mut loss = 0.0;
    let mut probs = if want_probs { vec![0.0; rows * k] } else { Vec::new() };
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(invalid(op, format!("target {t} out of range for {k} classes")));
        }
        let row = logits.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        loss += lse - row[t];
        if want_probs {
            for (p, v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
    }
    Ok((loss, probs))
}

/// Geometry of a 1-D convolution over `(batch, length, channels)` inputs with
/// `(kernel, in_channels, out_channels)` weights.
#[derive(Clone, Debug)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub len: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

impl Conv1dGeom {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self, NumericsError> {
        let op = OpKind::Conv1d;
        let (&[batch, len, cin], &[k, cin2, cout]) = (x.shape(), w.shape()) else {
            return Err(mismatch(op, &[x, w]));
        };
        if cin != cin2 {
            return Err(mismatch(op, &[x, w]));
        }
        if stride == 0 {
            return Err(invalid(op, "stride must be positive"));
        }
        if len + 2 * pad < k {
            return Err(mismatch(op, &[x, w]));
        }
        let out_len = (len + 2 * pad - k) / stride + 1;
        Ok(Self { batch, len, cin, k, cout, stride, pad, out_len })
    }

    #[inline]
    fn input_pos(&self, o: usize, kk: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < self.len).then_some(p as usize)
    }
}

pub(crate) fn conv1d_forward(g: &Conv1dGeom, x: &[f64], w: &[f64]) -> Tensor {
    let mut out = vec![0.0; g.batch * g.out_len * g.cout];
    for b in 0..g.batch {
        for o in 0..g.out_len {
            let orow = &mut out[(b * g.out_len + o) * g.cout..][..g.cout];
            for kk in 0..g.k {
                let Some(p) = g.input_pos(o, kk) else { continue };
                let xrow = &x[(b * g.len + p) * g.cin..][..g.cin];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &w[(kk * g.cin + c) * g.cout..][..g.cout];
                    for (ov, wv) in orow.iter_mut().zip(wrow) {
                        *ov += xv * wv;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![g.batch, g.out_len, g.cout], out)
}

/// Accumulates input and/or weight gradients of a 1-D convolution.
pub(crate) fn conv1d_backward(
    g: &Conv1dGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    for b in 0..g.batch {
        for o in 0..g.out_len {
            let grow = &gout[(b * g.out_len + o) * g.cout..][..g.cout];
            for kk in 0..g.k {
                let Some(p) = g.input_pos(o, kk) else { continue };
                let xoff = (b * g.len + p) * g.cin;
                for c in 0..g.cin {
                    let woff = (kk * g.cin + c) * g.cout;
                    let wrow = &w[woff..woff + g.cout];
                    if let Some(gx) = gx.as_deref_mut() {
                        let mut acc = 0.0;
                        for (gv, wv) in grow.iter().zip(wrow) {
                            acc += gv * wv;
                        }
                        gx[xoff + c] += acc;
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        let xv = x[xoff + c];
                        if xv != 0.0 {
                            for (gwv, gv) in gw[woff..woff + g.cout].iter_mut().zip(grow) {
                                *gwv += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a stride-1 3-D convolution over `(batch, d1, d2, d3, channels)`
/// inputs with `(k1, k2, k3, in_channels, out_channels)` weights.
#[derive(Clone, Debug)]
pub(crate) struct Conv3dGeom {
    pub batch: usize,
    pub dims: [usize; 3],
    pub cin: usize,
    pub ks: [usize; 3],
    pub cout: usize,
    pub dilation: [usize; 3],
    pub pad: [usize; 3],
    pub out: [usize; 3],
}

impl Conv3dGeom {
    pub fn new(x: &Tensor, w: &Tensor, dilation: [usize; 3], pad: [usize; 3]) -> Result<Self, NumericsError> {
        let op = OpKind::Conv3d;
        let (&[batch, d1, d2, d3, cin], &[k1, k2, k3, cin2, cout]) = (x.shape(), w.shape()) else {
            return Err(mismatch(op, &[x, w]));
        };
        if cin != cin2 {
            return Err(mismatch(op, &[x, w]));
        }
        if dilation.iter().any(|&d| d == 0) {
            return Err(invalid(op, "dilation must be positive"));
        }
        let dims = [d1, d2, d3];
        let ks = [k1, k2, k3];
        let mut out = [0; 3];
        for a in 0..3 {
            let span = dilation[a] * (ks[a] - 1) + 1;
            if dims[a] + 2 * pad[a] < span {
                return Err(mismatch(op, &[x, w]));
            }
            out[a] = dims[a] + 2 * pad[a] - span + 1;
        }
        Ok(Self { batch, dims, cin, ks, cout, dilation, pad, out })
    }

    /// Calls `f(out_index, in_index, kernel_index)` for every valid tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [o1n, o2n, o3n] = self.out;
        let [d1, d2, d3] = self.dims;
        let [k1n, k2n, k3n] = self.ks;
        let tap = |o: usize, k: usize, a: usize, lim: usize| -> Option<usize> {
            let p = (o + k * self.dilation[a]) as isize - self.pad[a] as isize;
            (p >= 0 && (p as usize) < lim).then_some(p as usize)
        };
        for b in 0..self.batch {
            for o1 in 0..o1n {
                for o2 in 0..o2n {
                    for o3 in 0..o3n {
                        let oi = ((b * o1n + o1) * o2n + o2) * o3n + o3;
                        for k1 in 0..k1n {
                            let Some(i1) = tap(o1, k1, 0, d1) else { continue };
                            for k2 in 0..k2n {
                                let Some(i2) = tap(o2, k2, 1, d2) else { continue };
                                for k3 in 0..k3n {
                                    let Some(i3) = tap(o3, k3, 2, d3) else { continue };
                                    let ii = ((b * d1 + i1) * d2 + i2) * d3 + i3;
                                    let ki = (k1 * k2n + k2) * k3n + k3;
                                    f(oi, ii, ki);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out[0], self.out[1], self.out[2], self.cout]
    }
}

pub(crate) fn conv3d_forward(g: &Conv3dGeom, x: &[f64], w: &[f64]) -> Tensor {
    let (cin, cout) = (g.cin, g.cout);
    let mut out = vec![0.0; g.batch * g.out.iter().product::<usize>() * cout];
    g.for_each_tap(|oi, ii, ki| {
        let orow = &mut out[oi * cout..(oi + 1) * cout];
        let xrow = &x[ii * cin..(ii + 1) * cin];
        let wk = &w[ki * cin * cout..(ki + 1) * cin * cout];
        for (c, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wk[c * cout..(c + 1) * cout];
            for (ov, wv) in orow.iter_mut().zip(wrow) {
                *ov += xv * wv;
            }
        }
    });
    Tensor::from_parts(g.out_shape(), out)
}

pub(crate) fn conv3d_backward(
    g: &Conv3dGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let (cin, cout) = (g.cin, g.cout);
    g.for_each_tap(|oi, ii, ki| {
        let grow = &gout[oi * cout..(oi + 1) * cout];
        if grow.iter().all(|&v| v == 0.0) {
            return;
        }
        let wk = &w[ki * cin * cout..(ki + 1) * cin * cout];
        if let Some(gx) = gx.as_deref_mut() {
            let gxrow = &mut gx[ii * cin..(ii + 1) * cin];
            for (c, gxv) in gxrow.iter_mut().enumerate() {
                let wrow = &wk[c * cout..(c + 1) * cout];
                let mut acc = 0.0;
                for (gv, wv) in grow.iter().zip(wrow) {
                    acc += gv * wv;
                }
                *gxv += acc;
            }
        }
        if let Some(gw) = gw.as_deref_mut() {
            let xrow = &x[ii * cin..(ii + 1) * cin];
            let gwk = &mut gw[ki * cin * cout..(ki + 1) * cin * cout];
            for (c, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (gwv, gv) in gwk[c * cout..(c + 1) * cout].iter_mut().zip(grow) {
                    *gwv += xv * gv;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        let y = eval_op(OpKind::Relu, &[&x], &OpAttrs::default()).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_symmetric() {
        let x = Tensor::vector(vec![0.0, 0.0]);
        let y = eval_op(OpKind::Softmax, &[&x], &OpAttrs::axis(0)).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let y = eval_op(OpKind::Conv1d, &[&x, &w], &OpAttrs::conv1d(1, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 3, 1]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn unknown_op_rejected() {
        assert!(matches!("gelu".parse::<OpKind>(), Err(NumericsError::UnknownOp(_))));
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn shape_mismatch_names_op() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = eval_op(OpKind::MatMul, &[&a, &b], &OpAttrs::default()).unwrap_err();
        match err {
            NumericsError::ShapeMismatch { op, shapes } => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn l2_normalize_leaves_tiny_vectors_zero() {
        let x = Tensor::vector(vec![1e-14, 0.0]);
        let y = eval_op(OpKind::L2Normalize, &[&x], &OpAttrs::axis(0)).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_right_aligned() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let y = eval_op(OpKind::Broadcast, &[&x], &OpAttrs::shape(&[2, 2])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0]);
        let bad = eval_op(OpKind::Broadcast, &[&x], &OpAttrs::shape(&[2, 3]));
        assert!(bad.is_err());
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = eval_op(OpKind::Concat, &[&a, &b], &OpAttrs::axis(1)).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let parts = concat_split(&c, &[1, 2], 1);
        assert_eq!(parts[0], a.data());
        assert_eq!(parts[1], b.data());
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let z = Tensor::zeros(&[1, 3]);
        assert!(eval_op(OpKind::CrossEntropy, &[&z], &OpAttrs::targets(&[3])).is_err());
    }
}
