//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Operations are methods on a [`Tape`]. An operation is recorded only when
//! one of its inputs carries a node id and the tape is not inside
//! [`Tape::no_grad`]; otherwise the result is a plain constant. Gradients do
//! not cross [`Tape::stop_gradient`].
//!
//! Elementwise binary ops accept equal shapes, or a second operand whose
//! shape is a suffix of the first (scalars and per-channel vectors).

mod kernels;
mod resample;
mod tensor;

use std::collections::HashMap;
use std::sync::Arc;

pub use resample::SparseResample;
pub use tensor::{NodeId, Tensor};

use kernels::{Binary, ConvDims, Op};

use crate::error::{Error, Result};

struct Entry {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// The computation record: an append-only list of operations in execution
/// order, so every entry's inputs precede it.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    leaves: Vec<(NodeId, Vec<usize>)>,
    next_id: NodeId,
    paused: bool,
}

/// Result of a reverse pass, keyed by leaf node id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient with respect to `t`; zeros when `t` was not reached.
    pub fn get(&self, t: &Tensor) -> Tensor {
        t.node_id()
            .and_then(|id| self.map.get(&id).cloned())
            .unwrap_or_else(|| Tensor::zeros(t.shape()))
    }

    pub fn for_all(&self, ts: &[Tensor]) -> Vec<Tensor> {
        ts.iter().map(|t| self.get(t)).collect()
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Drop all recorded operations and their saved intermediates. Leaves
    /// keep their ids and can be used in a fresh forward pass.
    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Register a trainable leaf holding the values of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.alloc();
        self.leaves.push((id, t.shape().to_vec()));
        t.detach().with_node(id)
    }

    pub fn leaves(&mut self, ts: &[Tensor]) -> Vec<Tensor> {
        ts.iter().map(|t| self.leaf(t)).collect()
    }

    /// Run `f` without recording anything; outputs are constants.
    pub fn no_grad<R>(&mut self, f: impl FnOnce(&mut Tape) -> R) -> R {
        let was = std::mem::replace(&mut self.paused, true);
        let out = f(self);
        self.paused = was;
        out
    }

    /// Value-identical tensor through which no gradient flows.
    pub fn stop_gradient(&self, t: &Tensor) -> Tensor {
        t.detach()
    }

    fn alloc(&mut self) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn record(&mut self, op: Op, inputs: Vec<Tensor>, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        let out = Tensor::from_parts(shape, data);
        if self.paused || !inputs.iter().any(Tensor::requires_grad) {
            return out;
        }
        let id = self.alloc();
        let out = out.with_node(id);
        self.entries.push(Entry {
            op,
            inputs,
            output: out.clone(),
        });
        out
    }

    /// Reverse pass from a scalar `loss`. Leaves that `loss` does not depend
    /// on (including those only reachable through a stop-gradient) get zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if !loss.shape().is_empty() {
            return Err(Error::NonScalarLoss(loss.shape().to_vec()));
        }
        let mut grads: HashMap<NodeId, Vec<f64>> = HashMap::new();
        if let Some(id) = loss.node_id() {
            grads.insert(id, vec![1.0]);
        }
        for entry in self.entries.iter().rev() {
            let out_id = entry.output.node_id().expect("recorded outputs carry ids");
            let Some(g) = grads.remove(&out_id) else {
                continue;
            };
            let input_grads = kernels::vjp(&entry.op, &entry.inputs, &entry.output, &g);
            for (input, gi) in entry.inputs.iter().zip(input_grads) {
                let (Some(id), Some(gi)) = (input.node_id(), gi) else {
                    continue;
                };
                match grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(id, gi);
                    }
                }
            }
        }
        let map = self
            .leaves
            .iter()
            .map(|(id, shape)| {
                let t = match grads.remove(id) {
                    Some(g) => Tensor::from_parts(shape.clone(), g),
                    None => Tensor::zeros(shape.clone()),
                };
                (*id, t)
            })
            .collect();
        Ok(Gradients { map })
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: Binary, op: Op, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if !(sa.len() >= sb.len() && sa.ends_with(sb)) {
            return Err(Error::shape(op.name(), sa, sb));
        }
        let data = kernels::binary_forward(kind, a.data(), b.data(), a.numel());
        Ok(self.record(op, vec![a.clone(), b.clone()], sa.to_vec(), data))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Add, Op::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Sub, Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Mul, Op::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(Binary::Div, Op::Div, a, b)
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        self.mul(a, &Tensor::scalar(factor))
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        self.record(Op::Relu, vec![x.clone()], x.shape().to_vec(), data)
    }

    /// Elementwise `max(x, floor)`.
    pub fn max_scalar(&mut self, x: &Tensor, floor: f64) -> Tensor {
        let data = x.data().iter().map(|&v| v.max(floor)).collect();
        self.record(Op::MaxScalar(floor), vec![x.clone()], x.shape().to_vec(), data)
    }

    pub fn exp(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| v.exp()).collect();
        self.record(Op::Exp, vec![x.clone()], x.shape().to_vec(), data)
    }

    pub fn log(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| v.ln()).collect();
        self.record(Op::Log, vec![x.clone()], x.shape().to_vec(), data)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul_forward(a.data(), b.data(), m, k, n);
        Ok(self.record(Op::MatMul, vec![a.clone(), b.clone()], vec![m, n], data))
    }

    /// Same-padding 3×3 convolution of NHWC `x` with `[3,3,c_in,c_out]` weights.
    pub fn conv3x3(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (sx, sw) = (x.shape(), w.shape());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[3] {
            return Err(Error::shape("conv3x3", sx, sw));
        }
        let dims = ConvDims {
            b: sx[0],
            h: sx[1],
            w: sx[2],
            ci: sx[3],
            co: sw[3],
        };
        let data = kernels::conv3x3_forward(x.data(), w.data(), dims);
        Ok(self.record(
            Op::Conv3x3,
            vec![x.clone(), w.clone()],
            vec![dims.b, dims.h, dims.w, dims.co],
            data,
        ))
    }

    // ---- distributions ----

    pub fn softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let c = last_axis(x, "softmax")?;
        let data = kernels::softmax_rows(x.data(), c);
        Ok(self.record(Op::Softmax, vec![x.clone()], x.shape().to_vec(), data))
    }

    pub fn log_softmax(&mut self, x: &Tensor) -> Result<Tensor> {
        let c = last_axis(x, "log_softmax")?;
        let data = kernels::log_softmax_rows(x.data(), c);
        Ok(self.record(Op::LogSoftmax, vec![x.clone()], x.shape().to_vec(), data))
    }

    // ---- reductions and layout ----

    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let s = x.data().iter().sum();
        self.record(Op::Sum, vec![x.clone()], Vec::new(), vec![s])
    }

    pub fn mean(&mut self, x: &Tensor) -> Tensor {
        let s: f64 = x.data().iter().sum();
        self.record(Op::Mean, vec![x.clone()], Vec::new(), vec![s / x.numel() as f64])
    }

    /// Sum over `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::shape("sum_axis", x.shape(), &[axis]));
        }
        let data = kernels::sum_axis_forward(x.data(), x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.record(Op::SumAxis(axis), vec![x.clone()], shape, data))
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let data = x.shared_data().as_ref().clone();
        Ok(self.record(Op::Reshape, vec![x.clone()], shape.to_vec(), data))
    }

    pub fn slice(&mut self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= x.rank() || start + len > x.shape()[axis] {
            return Err(Error::shape("slice", x.shape(), &[axis, start, len]));
        }
        let (outer, full, inner) = kernels::axis_split(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.record(Op::Slice { axis, start, len }, vec![x.clone()], shape, data))
    }

    pub fn concat(&mut self, xs: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", first.shape(), &[axis]));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for t in xs {
            let s = t.shape();
            let compatible = s.len() == first.rank()
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", first.shape(), s));
            }
            shape[axis] += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for t in xs {
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        Ok(self.record(Op::Concat(axis), xs.to_vec(), shape, data))
    }

    /// Apply a sparse per-pixel resampling to an NHWC tensor.
    pub fn resample(&mut self, x: &Tensor, map: &Arc<SparseResample>) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[0] != map.batch || s[1] * s[2] != map.in_pixels {
            return Err(Error::shape(
                "resample",
                s,
                &[map.batch, map.in_pixels, map.out_height, map.out_width],
            ));
        }
        let data = kernels::resample_forward(x.data(), s[3], map);
        Ok(self.record(
            Op::Resample(Arc::clone(map)),
            vec![x.clone()],
            vec![map.batch, map.out_height, map.out_width, s[3]],
            data,
        ))
    }
}

fn last_axis(x: &Tensor, op: &'static str) -> Result<usize> {
    match x.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(Error::shape(op, x.shape(), &[])),
    }
}

#[cfg(test)]
mod tests;
