//! Forward kernels, shape rules and vector-Jacobian products.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{OpKind, Saved, Window2d};
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

type Fwd<T> = (Tensor<T>, Saved<T>);

pub(super) fn forward<T: Scalar>(kind: &OpKind, xs: &[&Tensor<T>]) -> Result<Fwd<T>> {
    let op = kind.name();
    match kind {
        OpKind::Leaf => unreachable!("leaves are not applied"),
        OpKind::Add | OpKind::Mul => {
            arity(op, xs, 2, 2)?;
            same_shape(op, xs[0].shape(), xs[1].shape())?;
            let (a, b) = (xs[0].data(), xs[1].data());
            let data = if *kind == OpKind::Add {
                a.iter().zip(b).map(|(x, y)| *x + *y).collect()
            } else {
                a.iter().zip(b).map(|(x, y)| *x * *y).collect()
            };
            plain(xs[0].shape(), data)
        }
        OpKind::Scale => {
            arity(op, xs, 2, 2)?;
            let group = scale_group(xs[0], xs[1])?;
            let (x, s) = (xs[0].data(), xs[1].data());
            let data = x.iter().enumerate().map(|(i, v)| *v * s[i / group % s.len()]).collect();
            plain(xs[0].shape(), data)
        }
        OpKind::MatMul => {
            arity(op, xs, 2, 2)?;
            let (m, k) = dims2(op, xs[0])?;
            let (k2, n) = dims2(op, xs[1])?;
            expect_axis(op, 0, k, k2)?;
            let (a, b) = (xs[0].data(), xs[1].data());
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                        *o += av * *bv;
                    }
                }
            }
            plain(&[m, n], out)
        }
        OpKind::Conv2d(win) => {
            arity(op, xs, 2, 3)?;
            let (ci, h, w) = dims3(op, xs[0])?;
            let ws = xs[1].shape();
            if ws.len() != 4 {
                return Err(rank(op, 4, ws));
            }
            expect_axis(op, 1, ci, ws[1])?;
            check_kernel(op, win, ws[2], ws[3])?;
            let co = ws[0];
            check_bias(op, xs, co)?;
            let (oh, ow) = window_out(op, win, h, w)?;
            let mut out = bias_init(xs.get(2).copied(), co, oh * ow);
            conv_fwd(
                xs[0].data(),
                xs[1].data(),
                &mut out,
                [ci, h, w],
                [co, oh, ow],
                win,
                false,
            );
            plain(&[co, oh, ow], out)
        }
        OpKind::DepthwiseConv2d(win) => {
            arity(op, xs, 2, 3)?;
            let (c, h, w) = dims3(op, xs[0])?;
            let ws = xs[1].shape();
            if ws.len() != 3 {
                return Err(rank(op, 3, ws));
            }
            expect_axis(op, 0, c, ws[0])?;
            check_kernel(op, win, ws[1], ws[2])?;
            check_bias(op, xs, c)?;
            let (oh, ow) = window_out(op, win, h, w)?;
            let mut out = bias_init(xs.get(2).copied(), c, oh * ow);
            conv_fwd(xs[0].data(), xs[1].data(), &mut out, [c, h, w], [c, oh, ow], win, true);
            plain(&[c, oh, ow], out)
        }
        OpKind::PointwiseConv2d => {
            arity(op, xs, 2, 3)?;
            let (ci, h, w) = dims3(op, xs[0])?;
            let (co, ci2) = dims2(op, xs[1])?;
            expect_axis(op, 0, ci, ci2)?;
            check_bias(op, xs, co)?;
            let hw = h * w;
            let mut out = bias_init(xs.get(2).copied(), co, hw);
            let (x, wt) = (xs[0].data(), xs[1].data());
            for o in 0..co {
                let orow = &mut out[o * hw..(o + 1) * hw];
                for i in 0..ci {
                    let wv = wt[o * ci + i];
                    for (ov, xv) in orow.iter_mut().zip(&x[i * hw..(i + 1) * hw]) {
                        *ov += wv * *xv;
                    }
                }
            }
            plain(&[co, h, w], out)
        }
        OpKind::MaxPool2d(win) => {
            arity(op, xs, 1, 1)?;
            let (c, h, w) = dims3(op, xs[0])?;
            for axis in 0..2 {
                if 2 * win.padding[axis] > win.kernel[axis] {
                    return Err(Error::Attr {
                        op,
                        reason: format!("padding exceeds half the kernel on axis {}", axis + 1),
                    });
                }
            }
            let (oh, ow) = window_out(op, win, h, w)?;
            let x = xs[0].data();
            let mut out = Vec::with_capacity(c * oh * ow);
            let mut arg = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    let (y0, y1) = window_span(oy, win, 0, h);
                    for ox in 0..ow {
                        let (x0, x1) = window_span(ox, win, 1, w);
                        let mut best = (ch * h + y0) * w + x0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                let idx = (ch * h + iy) * w + ix;
                                if x[idx] > x[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(x[best]);
                        arg.push(best);
                    }
                }
            }
            Ok((Tensor::new([c, oh, ow], out)?, Saved::Argmax(arg)))
        }
        OpKind::GlobalAvgPool => {
            arity(op, xs, 1, 1)?;
            let (c, h, w) = dims3(op, xs[0])?;
            let hw = h * w;
            let inv = T::of(1.0 / hw as f64);
            let data = xs[0]
                .data()
                .chunks(hw)
                .map(|ch| ch.iter().copied().sum::<T>() * inv)
                .collect();
            plain(&[c], data)
        }
        OpKind::Relu => {
            arity(op, xs, 1, 1)?;
            let data = xs[0].data().iter().map(|v| v.max(T::zero())).collect();
            plain(xs[0].shape(), data)
        }
        OpKind::Sigmoid => {
            arity(op, xs, 1, 1)?;
            let data = xs[0].data().iter().map(|v| sigmoid(*v)).collect();
            plain(xs[0].shape(), data)
        }
        OpKind::SoftmaxLastAxis => {
            arity(op, xs, 1, 1)?;
            let n = *xs[0].shape().last().expect("tensors have rank >= 1");
            let mut data = xs[0].data().to_vec();
            for row in data.chunks_mut(n) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    total += *v;
                }
                let inv = total.recip();
                row.iter_mut().for_each(|v| *v *= inv);
            }
            plain(xs[0].shape(), data)
        }
        OpKind::Linear => {
            arity(op, xs, 2, 3)?;
            let (out_f, in_f) = dims2(op, xs[1])?;
            let xshape = xs[0].shape();
            let (rows, oshape): (usize, Vec<usize>) = match xshape.len() {
                1 => (1, vec![out_f]),
                2 => (xshape[0], vec![xshape[0], out_f]),
                _ => return Err(rank(op, 2, xshape)),
            };
            expect_axis(op, xshape.len() - 1, in_f, *xshape.last().unwrap())?;
            check_bias(op, xs, out_f)?;
            let (x, wt) = (xs[0].data(), xs[1].data());
            let bias = xs.get(2).map(|b| b.data());
            let mut out = vec![T::zero(); rows * out_f];
            for r in 0..rows {
                let xr = &x[r * in_f..(r + 1) * in_f];
                for o in 0..out_f {
                    let wr = &wt[o * in_f..(o + 1) * in_f];
                    let mut acc = bias.map_or(T::zero(), |b| b[o]);
                    for (a, b) in xr.iter().zip(wr) {
                        acc += *a * *b;
                    }
                    out[r * out_f + o] = acc;
                }
            }
            plain(&oshape, out)
        }
        OpKind::Concat { axis } => {
            if xs.is_empty() {
                return Err(Error::Attr {
                    op,
                    reason: "needs at least one input".into(),
                });
            }
            let first = xs[0].shape();
            if *axis >= first.len() {
                return Err(Error::Attr {
                    op,
                    reason: format!("axis {axis} out of range for rank {}", first.len()),
                });
            }
            let mut total = 0;
            for x in xs {
                let s = x.shape();
                if s.len() != first.len() {
                    return Err(rank(op, first.len(), s));
                }
                for (d, (&a, &b)) in first.iter().zip(s).enumerate() {
                    if d != *axis {
                        expect_axis(op, d, a, b)?;
                    }
                }
                total += s[*axis];
            }
            let outer: usize = first[..*axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for x in xs {
                    let block = x.shape()[*axis] * inner;
                    data.extend_from_slice(&x.data()[o * block..(o + 1) * block]);
                }
            }
            let mut shape = first.to_vec();
            shape[*axis] = total;
            plain(&shape, data)
        }
        OpKind::Reshape(shape) => {
            arity(op, xs, 1, 1)?;
            let n: usize = shape.iter().product();
            if n != xs[0].len() || shape.contains(&0) {
                return Err(Error::Attr {
                    op,
                    reason: format!("cannot view {:?} as {:?}", xs[0].shape(), shape),
                });
            }
            plain(shape, xs[0].data().to_vec())
        }
        OpKind::SliceChannels { start, len } => {
            arity(op, xs, 1, 1)?;
            let s = xs[0].shape();
            if *len == 0 || start + len > s[0] {
                return Err(Error::Attr {
                    op,
                    reason: format!("range {}..{} outside leading extent {}", start, start + len, s[0]),
                });
            }
            let inner: usize = s[1..].iter().product();
            let data = xs[0].data()[start * inner..(start + len) * inner].to_vec();
            let mut shape = s.to_vec();
            shape[0] = *len;
            plain(&shape, data)
        }
        OpKind::GroupNorm { groups, eps } => {
            arity(op, xs, 3, 3)?;
            let (c, h, w) = dims3(op, xs[0])?;
            expect_len(op, xs[1], c)?;
            expect_len(op, xs[2], c)?;
            if *groups == 0 || c % groups != 0 {
                return Err(Error::Attr {
                    op,
                    reason: format!("{c} channels are not divisible into {groups} groups"),
                });
            }
            let per = c / groups;
            let n = per * h * w;
            let (x, gamma, beta) = (xs[0].data(), xs[1].data(), xs[2].data());
            let inv_n = T::of(1.0 / n as f64);
            let mut mean = Vec::with_capacity(*groups);
            let mut rstd = Vec::with_capacity(*groups);
            let mut out = vec![T::zero(); x.len()];
            for g in 0..*groups {
                let seg = &x[g * n..(g + 1) * n];
                let m = seg.iter().copied().sum::<T>() * inv_n;
                let var = seg.iter().map(|v| (*v - m) * (*v - m)).sum::<T>() * inv_n;
                let r = (var + T::of(*eps)).sqrt().recip();
                for (k, (o, v)) in out[g * n..(g + 1) * n].iter_mut().zip(seg).enumerate() {
                    let ch = g * per + k / (h * w);
                    *o = (*v - m) * r * gamma[ch] + beta[ch];
                }
                mean.push(m);
                rstd.push(r);
            }
            Ok((Tensor::new([c, h, w], out)?, Saved::Moments { mean, rstd }))
        }
        OpKind::CrissCrossAffinity => {
            arity(op, xs, 2, 2)?;
            let (cq, h, w) = dims3(op, xs[0])?;
            same_shape(op, xs[0].shape(), xs[1].shape())?;
            let (q, k) = (xs[0].data(), xs[1].data());
            let l = h + w - 1;
            let mut out = vec![T::zero(); h * w * l];
            for c in 0..cq {
                let qc = &q[c * h * w..(c + 1) * h * w];
                let kc = &k[c * h * w..(c + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        let qv = qc[i * w + j];
                        let e = &mut out[(i * w + j) * l..(i * w + j + 1) * l];
                        for r in 0..h {
                            e[r] += qv * kc[r * w + j];
                        }
                        for (slot, col) in cross_row(j, w).enumerate() {
                            e[h + slot] += qv * kc[i * w + col];
                        }
                    }
                }
            }
            plain(&[h, w, l], out)
        }
        OpKind::CrissCrossAggregate => {
            arity(op, xs, 2, 2)?;
            let a = xs[0].shape();
            if a.len() != 3 {
                return Err(rank(op, 3, a));
            }
            let (cv, h, w) = dims3(op, xs[1])?;
            expect_axis(op, 0, h, a[0])?;
            expect_axis(op, 1, w, a[1])?;
            expect_axis(op, 2, h + w - 1, a[2])?;
            let (attn, v) = (xs[0].data(), xs[1].data());
            let l = h + w - 1;
            let mut out = vec![T::zero(); cv * h * w];
            for c in 0..cv {
                let vc = &v[c * h * w..(c + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        let wts = &attn[(i * w + j) * l..(i * w + j + 1) * l];
                        let mut acc = T::zero();
                        for r in 0..h {
                            acc += wts[r] * vc[r * w + j];
                        }
                        for (slot, col) in cross_row(j, w).enumerate() {
                            acc += wts[h + slot] * vc[i * w + col];
                        }
                        out[(c * h + i) * w + j] = acc;
                    }
                }
            }
            plain(&[cv, h, w], out)
        }
        OpKind::Sum => {
            arity(op, xs, 1, 1)?;
            plain(&[1], vec![xs[0].data().iter().copied().sum()])
        }
        OpKind::BceWithLogits { target } => {
            arity(op, xs, 1, 1)?;
            expect_len(op, xs[0], 1)?;
            if !(0.0..=1.0).contains(target) {
                return Err(Error::Attr {
                    op,
                    reason: format!("target {target} outside [0, 1]"),
                });
            }
            let z = xs[0].data()[0];
            let loss = z.max(T::zero()) - z * T::of(*target) + (-z.abs()).exp().ln_1p();
            plain(&[1], vec![loss])
        }
    }
}

/// Gradient contribution to each input, in input order.
pub(super) fn backward<T: Scalar>(
    kind: &OpKind,
    xs: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &Saved<T>,
    gy: &[T],
) -> Vec<Vec<T>> {
    match kind {
        OpKind::Leaf => Vec::new(),
        OpKind::Add => vec![gy.to_vec(), gy.to_vec()],
        OpKind::Mul => {
            let (a, b) = (xs[0].data(), xs[1].data());
            vec![
                gy.iter().zip(b).map(|(g, v)| *g * *v).collect(),
                gy.iter().zip(a).map(|(g, v)| *g * *v).collect(),
            ]
        }
        OpKind::Scale => {
            let (x, s) = (xs[0].data(), xs[1].data());
            let group = x.len() / s.len();
            let mut gs = vec![T::zero(); s.len()];
            let gx = gy
                .iter()
                .zip(x)
                .enumerate()
                .map(|(i, (g, v))| {
                    let k = i / group % s.len();
                    gs[k] += *g * *v;
                    *g * s[k]
                })
                .collect();
            vec![gx, gs]
        }
        OpKind::MatMul => {
            let (m, k) = (xs[0].shape()[0], xs[0].shape()[1]);
            let n = xs[1].shape()[1];
            let (a, b) = (xs[0].data(), xs[1].data());
            let mut ga = vec![T::zero(); m * k];
            let mut gb = vec![T::zero(); k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = T::zero();
                    for j in 0..n {
                        let g = gy[i * n + j];
                        acc += g * b[p * n + j];
                        gb[p * n + j] += a[i * k + p] * g;
                    }
                    ga[i * k + p] = acc;
                }
            }
            vec![ga, gb]
        }
        OpKind::Conv2d(win) | OpKind::DepthwiseConv2d(win) => {
            let depthwise = matches!(kind, OpKind::DepthwiseConv2d(_));
            let s = xs[0].shape();
            let o = out.shape();
            let mut gx = vec![T::zero(); xs[0].len()];
            let mut gw = vec![T::zero(); xs[1].len()];
            conv_bwd(
                xs[0].data(),
                xs[1].data(),
                gy,
                &mut gx,
                &mut gw,
                [s[0], s[1], s[2]],
                [o[0], o[1], o[2]],
                win,
                depthwise,
            );
            let mut grads = vec![gx, gw];
            if xs.len() == 3 {
                grads.push(channel_sums(gy, o[0]));
            }
            grads
        }
        OpKind::PointwiseConv2d => {
            let s = xs[0].shape();
            let (ci, hw) = (s[0], s[1] * s[2]);
            let co = out.shape()[0];
            let (x, wt) = (xs[0].data(), xs[1].data());
            let mut gx = vec![T::zero(); x.len()];
            let mut gw = vec![T::zero(); wt.len()];
            for o in 0..co {
                let grow = &gy[o * hw..(o + 1) * hw];
                for i in 0..ci {
                    let xrow = &x[i * hw..(i + 1) * hw];
                    let wv = wt[o * ci + i];
                    let mut acc = T::zero();
                    for ((gxv, g), xv) in gx[i * hw..(i + 1) * hw].iter_mut().zip(grow).zip(xrow) {
                        *gxv += wv * *g;
                        acc += *g * *xv;
                    }
                    gw[o * ci + i] = acc;
                }
            }
            let mut grads = vec![gx, gw];
            if xs.len() == 3 {
                grads.push(channel_sums(gy, co));
            }
            grads
        }
        OpKind::MaxPool2d(_) => {
            let Saved::Argmax(arg) = saved else {
                unreachable!("maxpool saves argmax")
            };
            let mut gx = vec![T::zero(); xs[0].len()];
            for (g, &idx) in gy.iter().zip(arg) {
                gx[idx] += *g;
            }
            vec![gx]
        }
        OpKind::GlobalAvgPool => {
            let c = xs[0].shape()[0];
            let hw = xs[0].len() / c;
            let inv = T::of(1.0 / hw as f64);
            let gx = (0..xs[0].len()).map(|i| gy[i / hw] * inv).collect();
            vec![gx]
        }
        OpKind::Relu => {
            let gx = gy
                .iter()
                .zip(xs[0].data())
                .map(|(g, v)| if *v > T::zero() { *g } else { T::zero() })
                .collect();
            vec![gx]
        }
        OpKind::Sigmoid => {
            let gx = gy
                .iter()
                .zip(out.data())
                .map(|(g, y)| *g * *y * (T::one() - *y))
                .collect();
            vec![gx]
        }
        OpKind::SoftmaxLastAxis => {
            let n = *out.shape().last().unwrap();
            let mut gx = vec![T::zero(); gy.len()];
            for ((gxr, gr), yr) in gx.chunks_mut(n).zip(gy.chunks(n)).zip(out.data().chunks(n)) {
                let dot: T = gr.iter().zip(yr).map(|(g, y)| *g * *y).sum();
                for ((o, g), y) in gxr.iter_mut().zip(gr).zip(yr) {
                    *o = *y * (*g - dot);
                }
            }
            vec![gx]
        }
        OpKind::Linear => {
            let (out_f, in_f) = (xs[1].shape()[0], xs[1].shape()[1]);
            let rows = xs[0].len() / in_f;
            let (x, wt) = (xs[0].data(), xs[1].data());
            let mut gx = vec![T::zero(); x.len()];
            let mut gw = vec![T::zero(); wt.len()];
            let mut gb = vec![T::zero(); out_f];
            for r in 0..rows {
                for o in 0..out_f {
                    let g = gy[r * out_f + o];
                    gb[o] += g;
                    for i in 0..in_f {
                        gx[r * in_f + i] += g * wt[o * in_f + i];
                        gw[o * in_f + i] += g * x[r * in_f + i];
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if xs.len() == 3 {
                grads.push(gb);
            }
            grads
        }
        OpKind::Concat { axis } => {
            let s = out.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut grads: Vec<Vec<T>> = xs.iter().map(|x| Vec::with_capacity(x.len())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (g, x) in grads.iter_mut().zip(xs) {
                    let block = x.shape()[*axis] * inner;
                    g.extend_from_slice(&gy[pos..pos + block]);
                    pos += block;
                }
            }
            grads
        }
        OpKind::Reshape(_) => vec![gy.to_vec()],
        OpKind::SliceChannels { start, len } => {
            let inner = xs[0].len() / xs[0].shape()[0];
            let mut gx = vec![T::zero(); xs[0].len()];
            gx[start * inner..(start + len) * inner].copy_from_slice(gy);
            vec![gx]
        }
        OpKind::GroupNorm { groups, .. } => {
            let Saved::Moments { mean, rstd } = saved else {
                unreachable!("group-norm saves moments")
            };
            let s = xs[0].shape();
            let (c, hw) = (s[0], s[1] * s[2]);
            let per = c / groups;
            let n = per * hw;
            let (x, gamma) = (xs[0].data(), xs[1].data());
            let mut gx = vec![T::zero(); x.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            let nf = T::of(n as f64);
            for g in 0..*groups {
                let (m, r) = (mean[g], rstd[g]);
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for k in 0..n {
                    let idx = g * n + k;
                    let ch = idx / hw;
                    let xhat = (x[idx] - m) * r;
                    let d = gy[idx] * gamma[ch];
                    sum_d += d;
                    sum_dx += d * xhat;
                    gg[ch] += gy[idx] * xhat;
                    gb[ch] += gy[idx];
                }
                for k in 0..n {
                    let idx = g * n + k;
                    let ch = idx / hw;
                    let xhat = (x[idx] - m) * r;
                    let d = gy[idx] * gamma[ch];
                    gx[idx] = r / nf * (nf * d - sum_d - xhat * sum_dx);
                }
            }
            vec![gx, gg, gb]
        }
        OpKind::CrissCrossAffinity => {
            let s = xs[0].shape();
            let (cq, h, w) = (s[0], s[1], s[2]);
            let l = h + w - 1;
            let (q, k) = (xs[0].data(), xs[1].data());
            let mut gq = vec![T::zero(); q.len()];
            let mut gk = vec![T::zero(); k.len()];
            for c in 0..cq {
                let base = c * h * w;
                for i in 0..h {
                    for j in 0..w {
                        let ge = &gy[(i * w + j) * l..(i * w + j + 1) * l];
                        let qv = q[base + i * w + j];
                        let mut acc = T::zero();
                        for r in 0..h {
                            acc += ge[r] * k[base + r * w + j];
                            gk[base + r * w + j] += ge[r] * qv;
                        }
                        for (slot, col) in cross_row(j, w).enumerate() {
                            acc += ge[h + slot] * k[base + i * w + col];
                            gk[base + i * w + col] += ge[h + slot] * qv;
                        }
                        gq[base + i * w + j] = acc;
                    }
                }
            }
            vec![gq, gk]
        }
        OpKind::CrissCrossAggregate => {
            let s = xs[1].shape();
            let (cv, h, w) = (s[0], s[1], s[2]);
            let l = h + w - 1;
            let (attn, v) = (xs[0].data(), xs[1].data());
            let mut ga = vec![T::zero(); attn.len()];
            let mut gv = vec![T::zero(); v.len()];
            for c in 0..cv {
                let base = c * h * w;
                for i in 0..h {
                    for j in 0..w {
                        let g = gy[base + i * w + j];
                        let a_off = (i * w + j) * l;
                        for r in 0..h {
                            ga[a_off + r] += g * v[base + r * w + j];
                            gv[base + r * w + j] += g * attn[a_off + r];
                        }
                        for (slot, col) in cross_row(j, w).enumerate() {
                            ga[a_off + h + slot] += g * v[base + i * w + col];
                            gv[base + i * w + col] += g * attn[a_off + h + slot];
                        }
                    }
                }
            }
            vec![ga, gv]
        }
        OpKind::Sum => vec![vec![gy[0]; xs[0].len()]],
        OpKind::BceWithLogits { target } => {
            let z = xs[0].data()[0];
            vec![vec![gy[0] * (sigmoid(z) - T::of(*target))]]
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Columns of the row part of a criss-cross neighbourhood: every column but `j`.
#[inline]
fn cross_row(j: usize, w: usize) -> impl Iterator<Item = usize> {
    (0..w).filter(move |&c| c != j)
}

fn plain<T: Scalar>(shape: &[usize], data: Vec<T>) -> Result<Fwd<T>> {
    Ok((Tensor::new(shape, data)?, Saved::None))
}

fn rank(op: &'static str, expected: usize, found: &[usize]) -> Error {
    Error::Rank {
        op,
        expected,
        found: found.to_vec(),
    }
}

fn arity<T>(op: &'static str, xs: &[&Tensor<T>], min: usize, max: usize) -> Result<()> {
    if xs.len() < min || xs.len() > max {
        return Err(Error::Attr {
            op,
            reason: format!("expected {min}..={max} inputs, found {}", xs.len()),
        });
    }
    Ok(())
}

fn expect_axis(op: &'static str, axis: usize, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::ShapeMismatch {
            op,
            axis,
            expected,
            found,
        });
    }
    Ok(())
}

fn expect_len<T: Scalar>(op: &'static str, t: &Tensor<T>, n: usize) -> Result<()> {
    if t.shape().len() != 1 {
        return Err(rank(op, 1, t.shape()));
    }
    expect_axis(op, 0, n, t.shape()[0])
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(rank(op, a.len(), b));
    }
    for (axis, (&x, &y)) in a.iter().zip(b).enumerate() {
        expect_axis(op, axis, x, y)?;
    }
    Ok(())
}

fn dims2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        ref s => Err(rank(op, 2, s)),
    }
}

fn dims3<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(rank(op, 3, s)),
    }
}

/// Elements per scale factor: the whole tensor for a scalar, otherwise one
/// leading-axis slice.
fn scale_group<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<usize> {
    if s.len() == 1 {
        return Ok(x.len());
    }
    expect_len("scale", s, x.shape()[0])?;
    Ok(x.len() / x.shape()[0])
}

fn check_kernel(op: &'static str, win: &Window2d, kh: usize, kw: usize) -> Result<()> {
    expect_axis(op, 1, win.kernel[0], kh)?;
    expect_axis(op, 2, win.kernel[1], kw)
}

fn check_bias<T: Scalar>(op: &'static str, xs: &[&Tensor<T>], n: usize) -> Result<()> {
    match xs.get(2) {
        Some(b) => expect_len(op, b, n),
        None => Ok(()),
    }
}

fn window_out(op: &'static str, win: &Window2d, h: usize, w: usize) -> Result<(usize, usize)> {
    for axis in 0..2 {
        if win.stride[axis] == 0 || win.kernel[axis] == 0 {
            return Err(Error::Attr {
                op,
                reason: format!("kernel and stride must be positive on axis {}", axis + 1),
            });
        }
    }
    let oh = win.output_len(0, h).ok_or(Error::EmptyOutput { op, axis: 1 })?;
    let ow = win.output_len(1, w).ok_or(Error::EmptyOutput { op, axis: 2 })?;
    Ok((oh, ow))
}

/// Input range covered by output position `o` along `axis`, clipped to the data.
#[inline]
fn window_span(o: usize, win: &Window2d, axis: usize, len: usize) -> (usize, usize) {
    let start = (o * win.stride[axis]) as isize - win.padding[axis] as isize;
    let end = start + win.kernel[axis] as isize;
    (start.max(0) as usize, (end.min(len as isize)) as usize)
}

/// Output positions `o` for which `o * stride + tap - pad` lies in `0..len`.
#[inline]
fn tap_range(out_len: usize, len: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let off = tap as isize - pad as isize;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let last = len as isize - 1 - off;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last as usize / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn bias_init<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize, plane: usize) -> Vec<T> {
    match bias {
        Some(b) => b.data().iter().flat_map(|v| core::iter::repeat_n(*v, plane)).collect(),
        None => vec![T::zero(); channels * plane],
    }
}

fn channel_sums<T: Scalar>(g: &[T], channels: usize) -> Vec<T> {
    let plane = g.len() / channels;
    g.chunks(plane).map(|c| c.iter().copied().sum()).collect()
}

/// Dense or depthwise convolution accumulated into `out`.
fn conv_fwd<T: Scalar>(
    x: &[T],
    wt: &[T],
    out: &mut [T],
    [ci, h, w]: [usize; 3],
    [co, oh, ow]: [usize; 3],
    win: &Window2d,
    depthwise: bool,
) {
    let [kh, kw] = win.kernel;
    let [sy, sx] = win.stride;
    let [py, px] = win.padding;
    let pairs: usize = if depthwise { co } else { co * ci };
    for pair in 0..pairs {
        let (o, i) = if depthwise {
            (pair, pair)
        } else {
            (pair / ci, pair % ci)
        };
        let xin = &x[i * h * w..(i + 1) * h * w];
        let wbase = pair * kh * kw;
        let oplane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for ky in 0..kh {
            let (y0, y1) = tap_range(oh, h, sy, ky, py);
            for kx in 0..kw {
                let wv = wt[wbase + ky * kw + kx];
                let (x0, x1) = tap_range(ow, w, sx, kx, px);
                for oy in y0..y1 {
                    let iy = oy * sy + ky - py;
                    let irow = &xin[iy * w..(iy + 1) * w];
                    let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                    for ox in x0..x1 {
                        orow[ox] += wv * irow[ox * sx + kx - px];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_bwd<T: Scalar>(
    x: &[T],
    wt: &[T],
    gy: &[T],
    gx: &mut [T],
    gw: &mut [T],
    [ci, h, w]: [usize; 3],
    [co, oh, ow]: [usize; 3],
    win: &Window2d,
    depthwise: bool,
) {
    let [kh, kw] = win.kernel;
    let [sy, sx] = win.stride;
    let [py, px] = win.padding;
    let pairs: usize = if depthwise { co } else { co * ci };
    for pair in 0..pairs {
        let (o, i) = if depthwise {
            (pair, pair)
        } else {
            (pair / ci, pair % ci)
        };
        let xin = &x[i * h * w..(i + 1) * h * w];
        let gplane = &gy[o * oh * ow..(o + 1) * oh * ow];
        let wbase = pair * kh * kw;
        for ky in 0..kh {
            let (y0, y1) = tap_range(oh, h, sy, ky, py);
            for kx in 0..kw {
                let wv = wt[wbase + ky * kw + kx];
                let (x0, x1) = tap_range(ow, w, sx, kx, px);
                let mut acc = T::zero();
                for oy in y0..y1 {
                    let iy = oy * sy + ky - py;
                    let grow = &gplane[oy * ow..(oy + 1) * ow];
                    let gxrow = &mut gx[(i * h + iy) * w..(i * h + iy + 1) * w];
                    let irow = &xin[iy * w..(iy + 1) * w];
                    for ox in x0..x1 {
                        let ix = ox * sx + kx - px;
                        acc += grow[ox] * irow[ix];
                        gxrow[ix] += wv * grow[ox];
                    }
                }
                gw[wbase + ky * kw + kx] += acc;
            }
        }
    }
}
