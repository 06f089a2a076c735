//! Differentiable primitives. Each `Tape` method computes the forward value
//! and records an [`Op`]; [`Op::vjp`] maps an output gradient back to the
//! parents.

use super::linalg::{self, Lu};
use super::tape::{Node, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Matrices with `|det|` at or below this are treated as singular.
pub const SINGULAR_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine {
        x: usize,
        scale: f64,
    },
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Sqrt(usize),
    Atanh {
        x: usize,
        bound: f64,
    },
    SumAll(usize),
    MeanAll(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
    },
    ChannelMix {
        x: usize,
        w: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    SpaceToChannel(usize),
    ChannelToSpace(usize),
    L2Normalize(usize),
    MatInverse(usize),
    LogAbsDet(usize),
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    RowDistance(usize, usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Atanh { .. } => "atanh",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelMix { .. } => "channel_mix",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::SpaceToChannel(_) => "squeeze2",
            Op::ChannelToSpace(_) => "unsqueeze2",
            Op::L2Normalize(_) => "l2_normalize",
            Op::MatInverse(_) => "mat_inverse",
            Op::LogAbsDet(_) => "log_abs_det",
            Op::GatherRows { .. } => "gather_rows",
            Op::RowDistance(..) => "row_distance",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    pub(crate) fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::RowDistance(a, b) => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Atanh { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Narrow { x, .. }
            | Op::GatherRows { x, .. } => vec![*x],
            Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Softplus(x)
            | Op::Square(x)
            | Op::Sqrt(x)
            | Op::SumAll(x)
            | Op::MeanAll(x)
            | Op::Reshape(x)
            | Op::SpaceToChannel(x)
            | Op::ChannelToSpace(x)
            | Op::L2Normalize(x)
            | Op::MatInverse(x)
            | Op::LogAbsDet(x) => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ChannelMix { x, w } => vec![*x, *w],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// Vector-Jacobian product: gradients for each parent given the output
    /// gradient `g` of node `i`.
    pub(crate) fn vjp(
        &self,
        nodes: &[Node],
        i: usize,
        g: &[f64],
    ) -> Result<Vec<(usize, Vec<f64>)>> {
        let val = |k: usize| nodes[k].value.data();
        let shp = |k: usize| nodes[k].value.shape();
        let out = val(i);
        let unary = |x: usize, f: &dyn Fn(usize) -> f64| -> Vec<(usize, Vec<f64>)> {
            vec![(x, (0..g.len()).map(|j| g[j] * f(j)).collect())]
        };
        Ok(match self {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_broadcast(g, val(*a).len())),
                (*b, reduce_broadcast(g, val(*b).len())),
            ],
            Op::Sub(a, b) => {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                vec![
                    (*a, reduce_broadcast(g, val(*a).len())),
                    (*b, reduce_broadcast(&neg, val(*b).len())),
                ]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga: Vec<f64> = (0..g.len()).map(|j| g[j] * bv[j % bv.len()]).collect();
                let gb: Vec<f64> = (0..g.len()).map(|j| g[j] * av[j % av.len()]).collect();
                vec![
                    (*a, reduce_broadcast(&ga, av.len())),
                    (*b, reduce_broadcast(&gb, bv.len())),
                ]
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga: Vec<f64> = (0..g.len()).map(|j| g[j] / bv[j % bv.len()]).collect();
                let gb: Vec<f64> = (0..g.len())
                    .map(|j| {
                        let d = bv[j % bv.len()];
                        -g[j] * av[j % av.len()] / (d * d)
                    })
                    .collect();
                vec![
                    (*a, reduce_broadcast(&ga, av.len())),
                    (*b, reduce_broadcast(&gb, bv.len())),
                ]
            }
            Op::Affine { x, scale } => unary(*x, &|_| *scale),
            Op::Exp(x) => unary(*x, &|j| out[j]),
            Op::Log(x) => {
                let xv = val(*x);
                unary(*x, &|j| 1.0 / xv[j])
            }
            Op::Tanh(x) => unary(*x, &|j| 1.0 - out[j] * out[j]),
            Op::Sigmoid(x) => unary(*x, &|j| out[j] * (1.0 - out[j])),
            Op::Softplus(x) => {
                let xv = val(*x);
                unary(*x, &|j| sigmoid(xv[j]))
            }
            Op::Square(x) => {
                let xv = val(*x);
                unary(*x, &|j| 2.0 * xv[j])
            }
            Op::Sqrt(x) => unary(*x, &|j| 0.5 / out[j]),
            Op::Atanh { x, bound } => {
                let xv = val(*x);
                unary(*x, &|j| {
                    if xv[j].abs() > *bound {
                        0.0
                    } else {
                        1.0 / (1.0 - xv[j] * xv[j])
                    }
                })
            }
            Op::SumAll(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::MeanAll(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::SumAxis { x, axis } => {
                let (outer, mid, inner) = axis_split(shp(*x), *axis);
                let mut gx = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let dst = &mut gx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, gx)]
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[1];
                let bt = linalg::transpose(val(*b), k, n);
                let ga = linalg::matmul(g, &bt, m, n, k);
                let at = linalg::transpose(val(*a), m, k);
                let gb = linalg::matmul(&at, g, k, m, n);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { x, w, b, stride } => {
                let (gx, gw, gb) =
                    conv2d_backward(val(*x), shp(*x), val(*w), shp(*w), g, shp(i), *stride);
                let mut v = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    v.push((*b, gb));
                }
                v
            }
            Op::ChannelMix { x, w } => {
                let s = shp(*x);
                let (n, c) = (s[0], s[1]);
                let p = val(*x).len() / (n * c);
                let (xv, wv) = (val(*x), val(*w));
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; c * c];
                for b in 0..n {
                    let base = b * c * p;
                    for r in 0..c {
                        let grow = &g[base + r * p..base + (r + 1) * p];
                        for k in 0..c {
                            let xrow = &xv[base + k * p..base + (k + 1) * p];
                            let wrk = wv[r * c + k];
                            let gxrow = &mut gx[base + k * p..base + (k + 1) * p];
                            let mut acc = 0.0;
                            for q in 0..p {
                                gxrow[q] += wrk * grow[q];
                                acc += grow[q] * xrow[q];
                            }
                            gw[r * c + k] += acc;
                        }
                    }
                }
                vec![(*x, gx), (*w, gw)]
            }
            Op::Narrow { x, axis, start } => {
                let (outer, mid, inner) = axis_split(shp(*x), *axis);
                let len = shp(i)[*axis];
                let mut gx = vec![0.0; outer * mid * inner];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let off = (o * mid + start) * inner;
                    gx[off..off + len * inner].copy_from_slice(src);
                }
                vec![(*x, gx)]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(shp(i), *axis);
                let mut res = Vec::with_capacity(parts.len());
                let mut start = 0;
                for &p in parts {
                    let len = shp(p)[*axis];
                    let mut gp = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let off = (o * total + start) * inner;
                        gp[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&g[off..off + len * inner]);
                    }
                    start += len;
                    res.push((p, gp));
                }
                res
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::SpaceToChannel(x) => vec![(*x, channel_to_space(g, shp(*x)))],
            Op::ChannelToSpace(x) => vec![(*x, space_to_channel(g, shp(i)))],
            Op::L2Normalize(x) => {
                let d = *shp(*x).last().unwrap();
                let xv = val(*x);
                let mut gx = vec![0.0; xv.len()];
                for r in 0..xv.len() / d {
                    let xs = &xv[r * d..(r + 1) * d];
                    let ys = &out[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        gx[r * d + k] = (gs[k] - ys[k] * dot) / norm;
                    }
                }
                vec![(*x, gx)]
            }
            Op::MatInverse(x) => {
                // d(A^-1) = -A^-1 dA A^-1  =>  gA = -(A^-T) G (A^-T)
                let n = shp(*x)[0];
                let it = linalg::transpose(out, n, n);
                let t = linalg::matmul(&it, g, n, n, n);
                let ga: Vec<f64> = linalg::matmul(&t, &it, n, n, n)
                    .into_iter()
                    .map(|v| -v)
                    .collect();
                vec![(*x, ga)]
            }
            Op::LogAbsDet(x) => {
                let n = shp(*x)[0];
                let inv = linalg::inverse(val(*x), n, 0.0)?;
                let it = linalg::transpose(&inv, n, n);
                vec![(*x, it.into_iter().map(|v| v * g[0]).collect())]
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let inner = xv.len() / shp(*x)[0];
                let mut gx = vec![0.0; xv.len()];
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut gx[src * inner..(src + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*x, gx)]
            }
            Op::RowDistance(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let rows = shp(*a)[0];
                let inner = av.len() / rows;
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for r in 0..rows {
                    let d = out[r];
                    if d == 0.0 {
                        continue;
                    }
                    for k in r * inner..(r + 1) * inner {
                        let v = g[r] * (av[k] - bv[k]) / d;
                        ga[k] = v;
                        gb[k] = -v;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = val(*logits);
                let n = labels.len();
                let k = lv.len() / n;
                let mut gl = vec![0.0; lv.len()];
                for (r, &y) in labels.iter().enumerate() {
                    let row = &lv[r * k..(r + 1) * k];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for c in 0..k {
                        let p = (row[c] - m).exp() / z;
                        let t = if c == y { 1.0 } else { 0.0 };
                        gl[r * k + c] = g[0] * (p - t) / n as f64;
                    }
                }
                vec![(*logits, gl)]
            }
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Sum a broadcast gradient back onto an operand of length `len`, where the
/// operand was repeated cyclically over leading axes.
fn reduce_broadcast(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
    }
    out
}

/// The longer shape, if the shorter one is a suffix of it.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let short_n: usize = short.iter().product();
    let ok = long.ends_with(short) || short_n == 1;
    if !ok {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(long.to_vec())
}

fn space_to_channel(x: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let oc = ch * 4 + (i % 2) * 2 + (j % 2);
                    let dst = ((b * c * 4 + oc) * ho + i / 2) * wo + j / 2;
                    out[dst] = x[((b * c + ch) * h + i) * w + j];
                }
            }
        }
    }
    out
}

/// Inverse of [`space_to_channel`]; `shape` is the spatial-side shape.
fn channel_to_space(y: &[f64], shape: &[usize]) -> Vec<f64> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; y.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let oc = ch * 4 + (i % 2) * 2 + (j % 2);
                    let src = ((b * c * 4 + oc) * ho + i / 2) * wo + j / 2;
                    out[((b * c + ch) * h + i) * w + j] = y[src];
                }
            }
        }
    }
    out
}

fn conv_out(size: usize, k: usize, stride: usize) -> usize {
    let pad = k / 2;
    (size + 2 * pad - k) / stride + 1
}

/// Range of output columns `ox` whose input column `ox*stride + kx - pad` is
/// inside `[0, w)`.
#[inline]
fn valid_cols(wo: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one `[Ci,H,W]` image into `[Ci*k*k, Ho*Wo]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let pad = k / 2;
    let plane = ho * wo;
    let mut cols = vec![0.0; ci * k * k * plane];
    for c in 0..ci {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row =
                    &mut cols[((c * k + ky) * k + kx) * plane..((c * k + ky) * k + kx + 1) * plane];
                let (lo, hi) = valid_cols(wo, w, stride, kx, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let orow = &mut row[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        orow[ox] = irow[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    gx: &mut [f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let pad = k / 2;
    let plane = ho * wo;
    for c in 0..ci {
        let dst = &mut gx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row =
                    &cols[((c * k + ky) * k + kx) * plane..((c * k + ky) * k + kx + 1) * plane];
                let (lo, hi) = valid_cols(wo, w, stride, kx, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &row[oy * wo..(oy + 1) * wo];
                    for ox in lo..hi {
                        drow[ox * stride + kx - pad] += srow[ox];
                    }
                }
            }
        }
    }
}

fn conv2d_forward(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    b: Option<&[f64]>,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    let (ho, wo) = (conv_out(h, k, stride), conv_out(wd, k, stride));
    let plane = ho * wo;
    let kk = ci * k * k;
    let mut out = vec![0.0; n * co * plane];
    for bn in 0..n {
        let cols = im2col(
            &x[bn * ci * h * wd..(bn + 1) * ci * h * wd],
            ci,
            h,
            wd,
            k,
            stride,
            ho,
            wo,
        );
        let o = &mut out[bn * co * plane..(bn + 1) * co * plane];
        for oc in 0..co {
            let orow = &mut o[oc * plane..(oc + 1) * plane];
            if let Some(b) = b {
                orow.iter_mut().for_each(|v| *v = b[oc]);
            }
            let wrow = &w[oc * kk..(oc + 1) * kk];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let crow = &cols[r * plane..(r + 1) * plane];
                for (ov, &cv) in orow.iter_mut().zip(crow) {
                    *ov += wv * cv;
                }
            }
        }
    }
    (out, vec![n, co, ho, wo])
}

fn conv2d_backward(
    x: &[f64],
    xs: &[usize],
    w: &[f64],
    ws: &[usize],
    g: &[f64],
    os: &[usize],
    stride: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    let (ho, wo) = (os[2], os[3]);
    let plane = ho * wo;
    let kk = ci * k * k;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; co];
    let mut gcols = vec![0.0; kk * plane];
    for bn in 0..n {
        let xi = &x[bn * ci * h * wd..(bn + 1) * ci * h * wd];
        let cols = im2col(xi, ci, h, wd, k, stride, ho, wo);
        let gi = &g[bn * co * plane..(bn + 1) * co * plane];
        gcols.iter_mut().for_each(|v| *v = 0.0);
        for oc in 0..co {
            let grow = &gi[oc * plane..(oc + 1) * plane];
            gb[oc] += grow.iter().sum::<f64>();
            let wrow = &w[oc * kk..(oc + 1) * kk];
            let gwrow = &mut gw[oc * kk..(oc + 1) * kk];
            for r in 0..kk {
                let crow = &cols[r * plane..(r + 1) * plane];
                gwrow[r] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                let wv = wrow[r];
                if wv != 0.0 {
                    let gcrow = &mut gcols[r * plane..(r + 1) * plane];
                    for (gc, &gv) in gcrow.iter_mut().zip(grow) {
                        *gc += wv * gv;
                    }
                }
            }
        }
        col2im(
            &gcols,
            &mut gx[bn * ci * h * wd..(bn + 1) * ci * h * wd],
            ci,
            h,
            wd,
            k,
            stride,
            ho,
            wo,
        );
    }
    (gx, gw, gb)
}

impl Tape {
    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let data = (0..n)
            .map(|j| f(ad[j % ad.len()], bd[j % bd.len()]))
            .collect();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if let Some(index) = self.value(b).data().iter().position(|&v| v == 0.0) {
            return Err(Error::DivisionByZero { op: "div", index });
        }
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(x).map(|v| scale * v + shift);
        self.push(t, Op::Affine { x: x.0, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::exp);
        self.push(t, Op::Exp(x.0))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0)
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        let t = self.value(x).map(f64::ln);
        self.push(t, Op::Log(x.0))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.push(t, Op::Sigmoid(x.0))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(softplus);
        self.push(t, Op::Softplus(x.0))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        self.push(t, Op::Square(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= 0.0)
        {
            return Err(Error::Domain {
                op: "sqrt",
                index,
                value,
            });
        }
        let t = self.value(x).map(f64::sqrt);
        self.push(t, Op::Sqrt(x.0))
    }

    /// Inverse hyperbolic tangent with inputs clamped to `[-1+eps, 1-eps]`.
    /// Returns the output and the number of clamped elements.
    pub fn atanh_clamped(&mut self, x: Var, eps: f64) -> Result<(Var, usize)> {
        let bound = 1.0 - eps;
        let saturated = self
            .value(x)
            .data()
            .iter()
            .filter(|v| v.abs() > bound)
            .count();
        let t = self.value(x).map(|v| v.clamp(-bound, bound).atanh());
        Ok((self.push(t, Op::Atanh { x: x.0, bound })?, saturated))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(x.0))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &xd[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut oshape = shape;
        oshape.remove(axis);
        self.push(
            Tensor::from_parts(oshape, out),
            Op::SumAxis { x: x.0, axis },
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).unwrap_or(&1) as f64;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    /// Per-sample sum over every axis but the first: `[N, ...] -> [N]`.
    pub fn sum_per_row(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let flat = self.reshape(x, &[shape[0], shape[1..].iter().product()])?;
        self.sum_axis(flat, 1)
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let d = linalg::matmul(
            self.value(a).data(),
            self.value(b).data(),
            sa[0],
            sa[1],
            sb[1],
        );
        self.push(
            Tensor::from_parts(vec![sa[0], sb[1]], d),
            Op::MatMul(a.0, b.0),
        )
    }

    /// 2-D convolution with an odd square kernel and zero padding `k/2`.
    /// `x: [N,Ci,H,W]`, `w: [Co,Ci,k,k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = xs.len() != 4
            || ws.len() != 4
            || ws[1] != xs[1]
            || ws[2] != ws[3]
            || ws[2] % 2 == 0
            || stride == 0;
        if bad {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let (out, shape) = conv2d_forward(
            self.value(x).data(),
            &xs,
            self.value(w).data(),
            &ws,
            b.map(|b| self.value(b).data()),
            stride,
        );
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
            },
        )
    }

    /// Multiply every spatial position's channel vector by `w`:
    /// `out[n,:,p] = w @ x[n,:,p]` for `x: [N,C,...]`, `w: [C,C]`.
    pub fn channel_mix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() < 2 || ws != [xs[1], xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "channel_mix",
                lhs: xs,
                rhs: ws,
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let xv = self.value(x).data();
        let p = xv.len() / (n * c);
        let wv = self.value(w).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            let base = b * c * p;
            for r in 0..c {
                let orow = &mut out[base + r * p..base + (r + 1) * p];
                for k in 0..c {
                    let wrk = wv[r * c + k];
                    let xrow = &xv[base + k * p..base + (k + 1) * p];
                    for (o, &xi) in orow.iter_mut().zip(xrow) {
                        *o += wrk * xi;
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(xs, out),
            Op::ChannelMix { x: x.0, w: w.0 },
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                op: "narrow",
                shape,
                reason: format!("axis {axis} range {start}..{}", start + len),
            });
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * mid + start) * inner;
            out.extend_from_slice(&xd[off..off + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(
            Tensor::from_parts(oshape, out),
            Op::Narrow {
                x: x.0,
                axis,
                start,
            },
        )
    }

    /// Split channels (axis 1) into `[0, d)` and `[d, C)`.
    pub fn split_channels(&mut self, x: Var, d: usize) -> Result<(Var, Var)> {
        let c = *self.shape(x).get(1).unwrap_or(&0);
        if d == 0 || d >= c {
            return Err(Error::InvalidShape {
                op: "split_channels",
                shape: self.shape(x).to_vec(),
                reason: format!("split index {d} must be in [1, C)"),
            });
        }
        Ok((self.narrow(x, 1, 0, d)?, self.narrow(x, 1, d, c - d)?))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len()
                && axis < s.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !same {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut oshape = first.clone();
        oshape[axis] = total;
        let (outer, _, inner) = axis_split(&oshape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        self.push(
            Tensor::from_parts(oshape, out),
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x.0))
    }

    /// Space-to-channel by factor 2: `[N,C,H,W] -> [N,4C,H/2,W/2]`.
    pub fn squeeze2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::InvalidShape {
                op: "squeeze2",
                shape: s,
                reason: "needs [N,C,H,W] with even H and W".into(),
            });
        }
        let out = space_to_channel(self.value(x).data(), &s);
        let shape = vec![s[0], s[1] * 4, s[2] / 2, s[3] / 2];
        self.push(Tensor::from_parts(shape, out), Op::SpaceToChannel(x.0))
    }

    /// Inverse of [`Tape::squeeze2`].
    pub fn unsqueeze2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[1].is_multiple_of(4) {
            return Err(Error::InvalidShape {
                op: "unsqueeze2",
                shape: s,
                reason: "needs [N,4C,H,W]".into(),
            });
        }
        let shape = vec![s[0], s[1] / 4, s[2] * 2, s[3] * 2];
        let out = channel_to_space(self.value(x).data(), &shape);
        self.push(Tensor::from_parts(shape, out), Op::ChannelToSpace(x.0))
    }

    /// Scale each row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().unwrap_or(&1);
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DivisionByZero {
                    op: "l2_normalize",
                    index: r * d,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::L2Normalize(x.0))
    }

    fn square_matrix(&self, x: Var, op: &'static str) -> Result<usize> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::InvalidShape {
                op,
                shape: s.to_vec(),
                reason: "expected a square matrix".into(),
            });
        }
        Ok(s[0])
    }

    pub fn mat_inverse(&mut self, x: Var) -> Result<Var> {
        let n = self.square_matrix(x, "mat_inverse")?;
        let inv = linalg::inverse(self.value(x).data(), n, SINGULAR_THRESHOLD)?;
        self.push(Tensor::from_parts(vec![n, n], inv), Op::MatInverse(x.0))
    }

    /// `log|det x|` via LU with partial pivoting.
    pub fn log_abs_det(&mut self, x: Var) -> Result<Var> {
        let n = self.square_matrix(x, "log_abs_det")?;
        let lu = Lu::new(self.value(x).data(), n)?;
        if lu.is_singular(SINGULAR_THRESHOLD) {
            return Err(Error::Singular {
                abs_det: lu.det().abs(),
            });
        }
        self.push(Tensor::scalar(lu.log_abs_det()), Op::LogAbsDet(x.0))
    }

    /// Select rows along axis 0 (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || idx.is_empty() || idx.iter().any(|&i| i >= shape[0]) {
            return Err(Error::InvalidShape {
                op: "gather_rows",
                shape,
                reason: "row index out of range".into(),
            });
        }
        let xd = self.value(x).data();
        let inner = xd.len() / shape[0];
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            out.extend_from_slice(&xd[i * inner..(i + 1) * inner]);
        }
        let mut oshape = shape;
        oshape[0] = idx.len();
        self.push(
            Tensor::from_parts(oshape, out),
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        )
    }

    /// Euclidean distance between matching rows of two `[N, ...]` tensors.
    /// The gradient at zero distance is taken as zero.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb || sa.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "row_distance",
                lhs: sa,
                rhs: sb,
            });
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let inner = ad.len() / sa[0];
        let out = (0..sa[0])
            .map(|r| {
                (r * inner..(r + 1) * inner)
                    .map(|k| (ad[k] - bd[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self.push(
            Tensor::from_parts(vec![sa[0]], out),
            Op::RowDistance(a.0, b.0),
        )
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&y| y >= s[1]) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let k = s[1];
        let lv = self.value(logits).data();
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        self.push(
            Tensor::scalar(total / labels.len() as f64),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut g = Tape::new();
        let z = g.constant(Tensor::scalar(0.0)).unwrap();
        let s = g.sigmoid(z).unwrap();
        let th = g.tanh(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(th).item(), 0.0);
    }

    #[test]
    fn matmul_by_hand() {
        let mut g = Tape::new();
        let a = g.constant(t(&[2, 2], &[2.0, 0.0, 0.0, 1.0])).unwrap();
        let v = g.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let y = g.matmul(a, v).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 1.0]);
    }

    #[test]
    fn log_of_nonpositive_errors() {
        let mut g = Tape::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0])).unwrap();
        match g.log(x) {
            Err(Error::Domain { op, index, .. }) => {
                assert_eq!(op, "log");
                assert_eq!(index, 1);
            }
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
        let y = g.constant(Tensor::from_vec(vec![-1.0])).unwrap();
        assert!(matches!(g.sqrt(y), Err(Error::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn division_by_zero_errors() {
        let mut g = Tape::new();
        let a = g.constant(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let b = g.constant(Tensor::from_vec(vec![1.0, 0.0])).unwrap();
        assert!(matches!(
            g.div(a, b),
            Err(Error::DivisionByZero { index: 1, .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Tape::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        match g.add(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2]);
            }
            _ => panic!("expected shape mismatch"),
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Tape::new();
        let x = g.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp", .. })));
    }

    #[test]
    fn suffix_broadcast() {
        let mut g = Tape::new();
        let a = g.variable(t(&[2, 3], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let b = g.variable(t(&[3], &[10., 20., 30.])).unwrap();
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11., 22., 33., 14., 25., 36.]);
        let s = g.sum(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(b).unwrap(), &[2., 2., 2.]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Tape::new();
        let x = g
            .constant(t(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]))
            .unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.constant(t(&[1, 1, 3, 3], &k)).unwrap();
        let y = g.conv2d(x, w, None, 1).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_stride_two_shape() {
        let mut g = Tape::new();
        let x = g.constant(Tensor::full(&[2, 3, 24, 12], 1.0)).unwrap();
        let w = g.constant(Tensor::full(&[5, 3, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, w, None, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 12, 6]);
        // Interior output sees the full 3x3x3 window, the top-left corner 2x2x3.
        let d = g.value(y).data();
        assert_eq!(d[0], 12.0);
        assert_eq!(d[6 + 1], 27.0);
    }

    #[test]
    fn squeeze_round_trip() {
        let mut g = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 6).map(|v| v as f64).collect();
        let x = g.constant(t(&[2, 3, 4, 6], &data)).unwrap();
        let s = g.squeeze2(x).unwrap();
        assert_eq!(g.shape(s), &[2, 12, 2, 3]);
        let u = g.unsqueeze2(s).unwrap();
        assert_eq!(g.value(u).data(), &data[..]);
    }

    #[test]
    fn l2_normalize_unit_norm() {
        let mut g = Tape::new();
        let x = g.constant(t(&[2, 2], &[3.0, 4.0, -1.0, 1e-3])).unwrap();
        let y = g.l2_normalize(x).unwrap();
        for row in g.value(y).data().chunks(2) {
            let n = (row[0] * row[0] + row[1] * row[1]).sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let z = g.constant(Tensor::zeros(&[1, 2])).unwrap();
        assert!(g.l2_normalize(z).is_err());
    }

    #[test]
    fn row_distance_zero_has_zero_grad() {
        let mut g = Tape::new();
        let a = g.variable(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0])).unwrap();
        let b = g.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0])).unwrap();
        let d = g.row_distance(a, b).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 5.0]);
        let s = g.sum(d).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap(), &[0.0, 0.0, 0.6, 0.8]);
    }

    #[test]
    fn atanh_counts_saturation() {
        let mut g = Tape::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 1.0, -1.5])).unwrap();
        let (y, sat) = g.atanh_clamped(x, 1e-6).unwrap();
        assert_eq!(sat, 2);
        assert!(g.value(y).data().iter().all(|v| v.is_finite()));
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| ((i * 7 % 11) as f64 - 5.0) * scale)
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn weighted_sum(g: &mut Tape, y: Var) -> Result<Var> {
        let w = ramp(g.shape(y), 0.1);
        let w = g.constant(w)?;
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for stride in [1, 2] {
            let inputs = [
                ramp(&[2, 3, 5, 4], 0.2),
                ramp(&[4, 3, 3, 3], 0.05),
                ramp(&[4], 0.3),
            ];
            let err = crate::tensor::gradient_check(
                |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride)?;
                    weighted_sum(g, y)
                },
                &inputs,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "stride {stride}: {err}");
        }
    }

    #[test]
    fn structural_op_gradients() {
        let x = ramp(&[2, 4, 2, 2], 0.3);
        let err = crate::tensor::gradient_check(
            |g, v| {
                let s = g.squeeze2(v[0])?;
                let (a, b) = g.split_channels(s, 8)?;
                let b = g.tanh(b)?;
                let c = g.concat(&[b, a], 1)?;
                let u = g.unsqueeze2(c)?;
                weighted_sum(g, u)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let m = t(&[3, 3], &[2.0, 0.3, -0.1, 0.2, 1.5, 0.4, -0.3, 0.1, 1.8]);
        let err = crate::tensor::gradient_check(
            |g, v| {
                let inv = g.mat_inverse(v[0])?;
                let ld = g.log_abs_det(v[0])?;
                let s = weighted_sum(g, inv)?;
                g.add(s, ld)
            },
            &[m],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let rows = ramp(&[4, 3], 0.4);
        let err = crate::tensor::gradient_check(
            |g, v| {
                let n = g.l2_normalize(v[0])?;
                let a = g.gather_rows(n, &[0, 1, 2])?;
                let b = g.gather_rows(v[0], &[3, 3, 0])?;
                let d = g.row_distance(a, b)?;
                let ce = g.cross_entropy(v[0], &[0, 2, 1, 1])?;
                let s = g.sum(d)?;
                g.add(s, ce)
            },
            &[rows],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
