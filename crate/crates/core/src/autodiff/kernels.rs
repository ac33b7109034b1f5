//! Forward and vector-Jacobian kernels. All loops run in a fixed serial order.

use std::sync::Arc;

use super::resample::SparseResample;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Conv3x3,
    Relu,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumAxis(usize),
    Reshape,
    Slice { axis: usize, start: usize, len: usize },
    Concat(usize),
    MaxScalar(f64),
    Resample(Arc<SparseResample>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Conv3x3 => "conv3x3",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumAxis(_) => "sum_axis",
            Op::Reshape => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::MaxScalar(_) => "max_scalar",
            Op::Resample(_) => "resample",
        }
    }
}

/// Split a shape around `axis` into (outer, axis extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

/// Elementwise binary op where one operand's extent divides the output's
/// (equal shapes, or one shape a suffix of the other).
pub(crate) fn binary_forward(kind: Binary, a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    if a.len() == n && b.len() == n {
        return a.iter().zip(b).map(|(&x, &y)| kind.apply(x, y)).collect();
    }
    let (na, nb) = (a.len(), b.len());
    (0..n).map(|i| kind.apply(a[i % na], b[i % nb])).collect()
}

fn binary_backward(kind: Binary, a: &[f64], b: &[f64], g: &[f64], want: [bool; 2]) -> [Option<Vec<f64>>; 2] {
    let (na, nb) = (a.len(), b.len());
    let mut ga = want[0].then(|| vec![0.0; na]);
    let mut gb = want[1].then(|| vec![0.0; nb]);
    for (i, &gi) in g.iter().enumerate() {
        let (ia, ib) = (i % na, i % nb);
        let (x, y) = (a[ia], b[ib]);
        let (da, db) = match kind {
            Binary::Add => (gi, gi),
            Binary::Sub => (gi, -gi),
            Binary::Mul => (gi * y, gi * x),
            Binary::Div => (gi / y, -gi * x / (y * y)),
        };
        if let Some(ga) = ga.as_mut() {
            ga[ia] += da;
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += db;
        }
    }
    [ga, gb]
}

pub(crate) fn matmul_forward(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// 3×3 same-padding convolution, NHWC input `[b,h,w,ci]`, weights `[3,3,ci,co]`.
pub(crate) fn conv3x3_forward(x: &[f64], w: &[f64], dims: ConvDims) -> Vec<f64> {
    let ConvDims { b, h, w: width, ci, co } = dims;
    let mut out = vec![0.0; b * h * width * co];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..width {
                let out_off = ((bi * h + y) * width + xx) * co;
                let orow = &mut out[out_off..out_off + co];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let in_off = ((bi * h + iy as usize) * width + ix as usize) * ci;
                        let w_off = (ky * 3 + kx) * ci * co;
                        for c in 0..ci {
                            let v = x[in_off + c];
                            if v == 0.0 {
                                continue;
                            }
                            let wrow = &w[w_off + c * co..w_off + (c + 1) * co];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o += v * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub ci: usize,
    pub co: usize,
}

fn conv3x3_backward(x: &[f64], w: &[f64], g: &[f64], dims: ConvDims, want: [bool; 2]) -> [Option<Vec<f64>>; 2] {
    let ConvDims { b, h, w: width, ci, co } = dims;
    let mut gx = want[0].then(|| vec![0.0; x.len()]);
    let mut gw = want[1].then(|| vec![0.0; w.len()]);
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..width {
                let out_off = ((bi * h + y) * width + xx) * co;
                let grow = &g[out_off..out_off + co];
                if grow.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= width as isize {
                            continue;
                        }
                        let in_off = ((bi * h + iy as usize) * width + ix as usize) * ci;
                        let w_off = (ky * 3 + kx) * ci * co;
                        for c in 0..ci {
                            let wslot = w_off + c * co..w_off + (c + 1) * co;
                            if let Some(gx) = gx.as_mut() {
                                let wrow = &w[wslot.clone()];
                                gx[in_off + c] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gw) = gw.as_mut() {
                                let v = x[in_off + c];
                                if v != 0.0 {
                                    for (o, &gv) in gw[wslot].iter_mut().zip(grow) {
                                        *o += v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    [gx, gw]
}

pub(crate) fn softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

pub(crate) fn sum_axis_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
            for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

pub(crate) fn resample_forward(x: &[f64], channels: usize, map: &SparseResample) -> Vec<f64> {
    let out_pixels = map.out_pixels();
    let mut out = vec![0.0; map.batch * out_pixels * channels];
    for b in 0..map.batch {
        let src_base = b * map.in_pixels * channels;
        for o in 0..out_pixels {
            let dst = &mut out[(b * out_pixels + o) * channels..(b * out_pixels + o + 1) * channels];
            for &(idx, wt) in map.taps_for(b, o) {
                if wt == 0.0 {
                    continue;
                }
                let s = src_base + idx as usize * channels;
                for (d, &v) in dst.iter_mut().zip(&x[s..s + channels]) {
                    *d += wt * v;
                }
            }
        }
    }
    out
}

fn resample_backward(g: &[f64], channels: usize, map: &SparseResample) -> Vec<f64> {
    let out_pixels = map.out_pixels();
    let mut gx = vec![0.0; map.batch * map.in_pixels * channels];
    for b in 0..map.batch {
        let src_base = b * map.in_pixels * channels;
        for o in 0..out_pixels {
            let go = &g[(b * out_pixels + o) * channels..(b * out_pixels + o + 1) * channels];
            for &(idx, wt) in map.taps_for(b, o) {
                if wt == 0.0 {
                    continue;
                }
                let s = src_base + idx as usize * channels;
                for (d, &v) in gx[s..s + channels].iter_mut().zip(go) {
                    *d += wt * v;
                }
            }
        }
    }
    gx
}

/// Vector-Jacobian products for one recorded entry. Only inputs that carry a
/// node id get a gradient.
pub(crate) fn vjp(op: &Op, inputs: &[Tensor], output: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    let want: Vec<bool> = inputs.iter().map(Tensor::requires_grad).collect();
    let x = inputs[0].data();
    match op {
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let kind = match op {
                Op::Add => Binary::Add,
                Op::Sub => Binary::Sub,
                Op::Mul => Binary::Mul,
                _ => Binary::Div,
            };
            binary_backward(kind, x, inputs[1].data(), g, [want[0], want[1]]).into()
        }
        Op::MatMul => {
            let (m, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let n = inputs[1].shape()[1];
            let b = inputs[1].data();
            let ga = want[0].then(|| {
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] = grow.iter().zip(&b[p * n..(p + 1) * n]).map(|(u, v)| u * v).sum();
                    }
                }
                ga
            });
            let gb = want[1].then(|| {
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = x[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += av * gv;
                        }
                    }
                }
                gb
            });
            vec![ga, gb]
        }
        Op::Conv3x3 => {
            let s = inputs[0].shape();
            let dims = ConvDims {
                b: s[0],
                h: s[1],
                w: s[2],
                ci: s[3],
                co: inputs[1].shape()[3],
            };
            conv3x3_backward(x, inputs[1].data(), g, dims, [want[0], want[1]]).into()
        }
        Op::Relu => vec![Some(
            x.iter()
                .zip(g)
                .map(|(&v, &gi)| if v > 0.0 { gi } else { 0.0 })
                .collect(),
        )],
        Op::MaxScalar(c) => vec![Some(
            x.iter().zip(g).map(|(&v, &gi)| if v > *c { gi } else { 0.0 }).collect(),
        )],
        Op::Exp => vec![Some(output.data().iter().zip(g).map(|(y, gi)| y * gi).collect())],
        Op::Log => vec![Some(x.iter().zip(g).map(|(v, gi)| gi / v).collect())],
        Op::Softmax => {
            let c = *inputs[0].shape().last().unwrap();
            let y = output.data();
            let mut gx = vec![0.0; x.len()];
            for ((yr, gr), out) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        }
        Op::LogSoftmax => {
            let c = *inputs[0].shape().last().unwrap();
            let y = output.data();
            let mut gx = vec![0.0; x.len()];
            for ((yr, gr), out) in y.chunks_exact(c).zip(g.chunks_exact(c)).zip(gx.chunks_exact_mut(c)) {
                let total: f64 = gr.iter().sum();
                for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * total;
                }
            }
            vec![Some(gx)]
        }
        Op::Sum => vec![Some(vec![g[0]; x.len()])],
        Op::Mean => vec![Some(vec![g[0] / x.len() as f64; x.len()])],
        Op::SumAxis(axis) => {
            let (outer, len, inner) = axis_split(inputs[0].shape(), *axis);
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                for k in 0..len {
                    gx[(o * len + k) * inner..(o * len + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }
        Op::Reshape => vec![Some(g.to_vec())],
        Op::Slice { axis, start, len } => {
            let (outer, full, inner) = axis_split(inputs[0].shape(), *axis);
            let mut gx = vec![0.0; x.len()];
            for o in 0..outer {
                let dst = (o * full + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }
        Op::Concat(axis) => {
            let (outer, total, inner) = axis_split(output.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .zip(&want)
                .map(|(t, &w)| {
                    let len = t.shape()[*axis];
                    let gi = w.then(|| {
                        let mut gi = vec![0.0; t.numel()];
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gi[o * len * inner..(o + 1) * len * inner].copy_from_slice(&g[src..src + len * inner]);
                        }
                        gi
                    });
                    offset += len;
                    gi
                })
                .collect()
        }
        Op::Resample(map) => {
            let c = *inputs[0].shape().last().unwrap();
            vec![Some(resample_backward(g, c, map))]
        }
    }
}
