//! Reverse-mode automatic differentiation over [`Array`]s.
//!
//! A [`Tape`] records every primitive applied during a forward pass as a
//! node referencing earlier nodes. Because operations can only reference
//! already-recorded nodes, walking the tape in reverse creation order is a
//! valid topological order and visits each node exactly once. Replaying a
//! forward pass with identical inputs reproduces identical outputs
//! bit-for-bit at fixed precision: every kernel is sequential with a fixed
//! accumulation order.
//!
//! Parameters live outside the tape in a [`ParamSet`]; using a parameter in
//! a forward pass binds it to a single leaf node, so gradients from repeated
//! uses accumulate. [`Tape::backward`] deposits the resulting total
//! derivatives into the parameter gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{gelu, gelu_grad, gemm, lanes, softmax, Array};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Handle to a parameter in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor with its gradient accumulator.
///
/// The gradient always has the same shape as the value and is zero right
/// after an optimizer step.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Array<T>,
    pub grad: Array<T>,
}

/// Ordered registry of parameters with unique string names.
#[derive(Debug, Clone)]
pub struct ParamSet<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Array::zeros(value.shape().to_vec());
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Global L2 norm of all gradients, accumulated at f64.
    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sq_norm_f64()).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, c: T) {
        for p in &mut self.params {
            p.grad.scale_assign(c);
        }
    }

    /// Total number of scalar elements across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Matmul { a: NodeId, b: NodeId },
    MatmulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, bias: NodeId },
    Scale { x: NodeId, c: T },
    Mul { a: NodeId, b: NodeId },
    Ln { x: NodeId },
    Gelu { x: NodeId },
    // the mask is applied at recording time; backward relies on masked
    // outputs being exactly zero
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: T },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    GatherRows { x: NodeId, ids: Vec<usize> },
    Sum { x: NodeId },
    LogSumExp { x: NodeId },
    Reshape { x: NodeId },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
}

/// Wengert tape: ordered record of primitive operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array<T>>>,
    param_nodes: HashMap<ParamId, NodeId>,
    bytes: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_nodes: HashMap::new(),
            bytes: 0,
        }
    }

    fn push(&mut self, value: Array<T>, op: Op<T>) -> NodeId {
        self.bytes += value.numel() * T::BYTES;
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by recorded values; a deterministic memory-footprint proxy.
    pub fn bytes_allocated(&self) -> usize {
        self.bytes
    }

    pub fn value(&self, id: NodeId) -> &Array<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. node `id`, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Array<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn assert_finite(&self, id: NodeId, context: &str) -> Result<()> {
        if self.nodes[id.0].value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }

    // ── node constructors ────────────────────────────────────────────

    /// Record a constant input.
    pub fn leaf(&mut self, value: Array<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Bind a parameter; repeated binds of the same parameter share a node
    /// so gradients accumulate.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(params.get(id).value.clone(), Op::Param(id));
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = gemm(self.value(a), false, self.value(b), false)?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    /// `a · bᵀ`; the score product of attention.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = gemm(self.value(a), false, self.value(b), true)?;
        Ok(self.push(v, Op::MatmulNT { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut v = va.clone();
        v.add_assign(vb);
        Ok(self.push(v, Op::Add { a, b }))
    }

    /// Add a width-`c` bias row to every row of an `r × c` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        let c = va.row_width();
        if vb.numel() != c || va.ndim() != 2 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut v = va.clone();
        for r in 0..v.rows() {
            let row = &mut v.data_mut()[r * c..(r + 1) * c];
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += *b;
            }
        }
        Ok(self.push(v, Op::AddRow { a, bias }))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale { x, c })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let v = Array::new(va.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|e| e.ln());
        self.push(v, Op::Ln { x })
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu { x })
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize, mask: Option<Array<bool>>) -> Result<NodeId> {
        let v = softmax(self.value(x), axis, mask.as_ref())?;
        Ok(self.push(v, Op::Softmax { x, axis }))
    }

    /// Layer normalization over the last axis, then affine gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let vx = self.value(x);
        let d = *vx.shape().last().unwrap();
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.numel() != d || vb.numel() != d {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vx.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut v = vx.clone();
        let n = T::from_f64(d as f64);
        for chunk in v.data_mut().chunks_mut(d) {
            let mut mean = T::zero();
            for &e in chunk.iter() {
                mean += e;
            }
            mean /= n;
            let mut var = T::zero();
            for &e in chunk.iter() {
                let c = e - mean;
                var += c * c;
            }
            var /= n;
            let inv = (var + eps).sqrt().recip();
            for (j, e) in chunk.iter_mut().enumerate() {
                *e = (*e - mean) * inv * vg.data()[j] + vb.data()[j];
            }
        }
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Concatenate along `axis`. All other dimensions must agree; the
    /// gradient splits back to the inputs by their original extents.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Contract("concat of zero arrays".into()));
        }
        if inputs.len() == 1 {
            // still recorded so gradients route through uniformly
            let v = self.value(inputs[0]).clone();
            return Ok(self.push(v, Op::Concat { inputs: inputs.to_vec(), axis }));
        }
        let first = self.value(inputs[0]).shape().to_vec();
        let mut axis_total = 0usize;
        for &i in inputs {
            let s = self.value(i).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in inputs {
                let v = self.value(i);
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let v = Array::new(shape, data)?;
        Ok(self.push(v, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if axis >= vx.ndim() || start + len > vx.shape()[axis] || len == 0 {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                vx.shape()
            )));
        }
        let mut shape = vx.shape().to_vec();
        shape[axis] = len;
        let outer: usize = vx.shape()[..axis].iter().product();
        let inner: usize = vx.shape()[axis + 1..].iter().product();
        let src_block = vx.shape()[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * src_block + start * inner;
            data.extend_from_slice(&vx.data()[base..base + len * inner]);
        }
        let v = Array::new(shape, data)?;
        Ok(self.push(v, Op::Slice { x, axis, start }))
    }

    /// Select rows of the first axis by index, in order, with repeats
    /// allowed. Gradients scatter-add back, so repeated ids accumulate.
    /// Applied to an embedding table node this is the embedding lookup.
    pub fn gather_rows(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let rows = vx.rows();
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with empty id list".into()));
        }
        for &id in ids {
            if id >= rows {
                return Err(Error::VocabOutOfRange { id, vocab_size: rows });
            }
        }
        let w = vx.row_width();
        let mut shape = vx.shape().to_vec();
        shape[0] = ids.len();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            data.extend_from_slice(vx.row(id));
        }
        let v = Array::new(shape, data)?;
        Ok(self.push(v, Op::GatherRows { x, ids: ids.to_vec() }))
    }

    /// Embedding lookup: gather rows of a parameter table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.gather_rows(table, ids)
    }

    /// Sum of all elements, as a shape `[1]` scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut acc = T::zero();
        for &e in self.value(x).data() {
            acc += e;
        }
        self.push(Array::scalar(acc), Op::Sum { x })
    }

    /// log Σ exp over every element, as a shape `[1]` scalar. Stable via
    /// max subtraction.
    pub fn logsumexp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let mut max = T::neg_infinity();
        for &e in v.data() {
            if e > max {
                max = e;
            }
        }
        let mut acc = T::zero();
        for &e in v.data() {
            acc += (e - max).exp();
        }
        self.push(Array::scalar(max + acc.ln()), Op::LogSumExp { x })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape { x }))
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, delta: Array<T>) {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    /// Reverse pass from a scalar loss. Every parameter reachable from the
    /// loss receives its total derivative (added into `ParamSet` gradients);
    /// unreachable parameters are untouched.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet<T>) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Array::scalar(T::one()));

        for j in (0..self.nodes.len()).rev() {
            let gout = match &self.grads[j] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[j].op.clone();
            match op {
                Op::Leaf | Op::Param(_) => {}
                Op::Matmul { a, b } => {
                    let da = gemm(&gout, false, self.value(b), true)?;
                    let db = gemm(self.value(a), true, &gout, false)?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::MatmulNT { a, b } => {
                    let da = gemm(&gout, false, self.value(b), false)?;
                    let db = gemm(&gout, true, self.value(a), false)?;
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, gout.clone());
                    self.accumulate(b, gout);
                }
                Op::AddRow { a, bias } => {
                    let c = gout.row_width();
                    let mut db = Array::zeros(self.value(bias).shape().to_vec());
                    for r in 0..gout.rows() {
                        for (jj, g) in gout.row(r).iter().enumerate() {
                            db.data_mut()[jj] += *g;
                        }
                    }
                    debug_assert_eq!(db.numel(), c);
                    self.accumulate(a, gout);
                    self.accumulate(bias, db);
                }
                Op::Scale { x, c } => {
                    self.accumulate(x, gout.map(|g| g * c));
                }
                Op::Mul { a, b } => {
                    let da = zip_mul(&gout, self.value(b));
                    let db = zip_mul(&gout, self.value(a));
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Ln { x } => {
                    let vx = self.value(x);
                    let data = gout
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(&g, &v)| g / v)
                        .collect();
                    self.accumulate(x, Array::new(vx.shape().to_vec(), data)?);
                }
                Op::Gelu { x } => {
                    let vx = self.value(x);
                    let data = gout
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(&g, &v)| g * gelu_grad(v))
                        .collect();
                    self.accumulate(x, Array::new(vx.shape().to_vec(), data)?);
                }
                Op::Softmax { x, axis } => {
                    // dx = y ⊙ (dy − Σ dy⊙y) per lane; masked entries have
                    // y = 0 and receive zero gradient.
                    let y = &self.nodes[j].value;
                    let mut dx = Array::zeros(y.shape().to_vec());
                    let n = y.shape()[axis];
                    for (base, stride) in lanes(y.shape(), axis) {
                        let mut dot = T::zero();
                        for i in 0..n {
                            let k = base + i * stride;
                            dot += gout.data()[k] * y.data()[k];
                        }
                        for i in 0..n {
                            let k = base + i * stride;
                            dx.data_mut()[k] = y.data()[k] * (gout.data()[k] - dot);
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let vx = self.value(x).clone();
                    let vg = self.value(gain).clone();
                    let d = *vx.shape().last().unwrap();
                    let n = T::from_f64(d as f64);
                    let mut dx = Array::zeros(vx.shape().to_vec());
                    let mut dgain = Array::zeros(vg.shape().to_vec());
                    let mut dbias = Array::zeros(vg.shape().to_vec());
                    let rows = vx.numel() / d;
                    for r in 0..rows {
                        let xs = &vx.data()[r * d..(r + 1) * d];
                        let gs = &gout.data()[r * d..(r + 1) * d];
                        let mut mean = T::zero();
                        for &e in xs {
                            mean += e;
                        }
                        mean /= n;
                        let mut var = T::zero();
                        for &e in xs {
                            let c = e - mean;
                            var += c * c;
                        }
                        var /= n;
                        let inv = (var + eps).sqrt().recip();
                        // x̂ and the two lane means of the backward formula
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        let mut xh = vec![T::zero(); d];
                        let mut dxh = vec![T::zero(); d];
                        for i in 0..d {
                            xh[i] = (xs[i] - mean) * inv;
                            dxh[i] = gs[i] * vg.data()[i];
                            mean_dxh += dxh[i];
                            mean_dxh_xh += dxh[i] * xh[i];
                            dgain.data_mut()[i] += gs[i] * xh[i];
                            dbias.data_mut()[i] += gs[i];
                        }
                        mean_dxh /= n;
                        mean_dxh_xh /= n;
                        for i in 0..d {
                            dx.data_mut()[r * d + i] =
                                (dxh[i] - mean_dxh - xh[i] * mean_dxh_xh) * inv;
                        }
                    }
                    self.accumulate(x, dx);
                    self.accumulate(gain, dgain);
                    self.accumulate(bias, dbias);
                }
                Op::Concat { inputs, axis } => {
                    let outer: usize = gout.shape()[..axis].iter().product();
                    let inner: usize = gout.shape()[axis + 1..].iter().product();
                    let out_block = gout.shape()[axis] * inner;
                    let mut offset = 0usize;
                    for &i in &inputs {
                        let s = self.value(i).shape().to_vec();
                        let block = s[axis] * inner;
                        let mut data = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * out_block + offset;
                            data.extend_from_slice(&gout.data()[base..base + block]);
                        }
                        offset += block;
                        self.accumulate(i, Array::new(s, data)?);
                    }
                }
                Op::Slice { x, axis, start } => {
                    let vx_shape = self.value(x).shape().to_vec();
                    let inner: usize = vx_shape[axis + 1..].iter().product();
                    let outer: usize = vx_shape[..axis].iter().product();
                    let src_block = vx_shape[axis] * inner;
                    let len = gout.shape()[axis];
                    let mut dx = Array::zeros(vx_shape);
                    for o in 0..outer {
                        let dst = o * src_block + start * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            dx.data_mut()[dst + t] += gout.data()[src + t];
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::GatherRows { x, ids } => {
                    let mut dx = Array::zeros(self.value(x).shape().to_vec());
                    let w = dx.row_width();
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &gout.data()[r * w..(r + 1) * w];
                        let dst = &mut dx.data_mut()[id * w..(id + 1) * w];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                    self.accumulate(x, dx);
                }
                Op::Sum { x } => {
                    let g = gout.scalar_value();
                    let dx = Array::filled(self.value(x).shape().to_vec(), g);
                    self.accumulate(x, dx);
                }
                Op::LogSumExp { x } => {
                    let g = gout.scalar_value();
                    let vx = self.value(x);
                    let mut max = T::neg_infinity();
                    for &e in vx.data() {
                        if e > max {
                            max = e;
                        }
                    }
                    let mut denom = T::zero();
                    for &e in vx.data() {
                        denom += (e - max).exp();
                    }
                    let data = vx.data().iter().map(|&e| g * (e - max).exp() / denom).collect();
                    self.accumulate(x, Array::new(vx.shape().to_vec(), data)?);
                }
                Op::Reshape { x } => {
                    let dx = gout.reshaped(self.value(x).shape().to_vec())?;
                    self.accumulate(x, dx);
                }
            }
        }

        for j in 0..self.nodes.len() {
            if let Op::Param(pid) = self.nodes[j].op {
                if let Some(g) = &self.grads[j] {
                    params.get_mut(pid).grad.add_assign(g);
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip_mul<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Array::new(a.shape().to_vec(), data).expect("same shape")
}
