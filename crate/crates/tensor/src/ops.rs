//! Differentiable ops. Layouts are row-major; images are `[N, C, H, W]`,
//! token sequences are `[B, L, D]`.

use crate::gemm::sgemm;
use crate::math;
use crate::{Tensor, Var};

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn add(a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Var::from_op(
        Tensor::new(a.shape(), out),
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())]),
    )
}

pub fn sub(a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
    let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Var::from_op(
        Tensor::new(a.shape(), out),
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
    )
}

pub fn scale(a: &Var, s: f32) -> Var {
    let out: Vec<f32> = a.data().iter().map(|x| x * s).collect();
    Var::from_op(
        Tensor::new(a.shape(), out),
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * s).collect())]),
    )
}

pub fn silu(a: &Var) -> Var {
    let out: Vec<f32> = a.data().iter().map(|&x| x * math::sigmoid(x)).collect();
    Var::from_op(
        Tensor::new(a.shape(), out),
        vec![a.clone()],
        Box::new(|g, parents, _| {
            let x = parents[0].data();
            let dx = g
                .iter()
                .zip(x)
                .map(|(g, &x)| {
                    let s = math::sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            vec![Some(dx)]
        }),
    )
}

/// Same storage, new shape.
pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let value = a.value().reshape(shape);
    Var::from_op(value, vec![a.clone()], Box::new(|g, _, _| vec![Some(g.to_vec())]))
}

/// `x @ w^T + b` over the last axis; `w` is `[out, in]`.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>) -> Var {
    let xs = x.shape();
    let k = *xs.last().expect("linear on scalar");
    let (o, wk) = (w.shape()[0], w.shape()[1]);
    assert_eq!(k, wk, "linear: input width {k} vs weight {:?}", w.shape());
    let m = x.value().numel() / k;
    let mut out = vec![0.0f32; m * o];
    sgemm(m, k, o, x.data(), (k, 1), w.data(), (1, k), 0.0, &mut out, (o, 1));
    if let Some(b) = b {
        assert_eq!(b.shape(), [o]);
        let bias = b.data();
        for row in out.chunks_exact_mut(o) {
            row.iter_mut().zip(bias).for_each(|(y, b)| *y += b);
        }
    }
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = o;
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let has_bias = b.is_some();
    Var::from_op(
        Tensor::new(&shape, out),
        parents,
        Box::new(move |g, p, _| {
            let (x, w) = (p[0].data(), p[1].data());
            let mut dx = vec![0.0f32; m * k];
            sgemm(m, o, k, g, (o, 1), w, (k, 1), 0.0, &mut dx, (k, 1));
            let mut dw = vec![0.0f32; o * k];
            sgemm(o, m, k, g, (1, o), x, (k, 1), 0.0, &mut dw, (k, 1));
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = vec![0.0f32; o];
                for row in g.chunks_exact(o) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                grads.push(Some(db));
            }
            grads
        }),
    )
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    /// Output columns `[lo, hi)` whose stride-1 input column `ox + kj - pad` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).min(self.wo);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.wo).max(lo);
        (lo, hi)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        out_row[lo..hi].copy_from_slice(&src[lo + kj - g.pad..hi + kj - g.pad]);
                        continue;
                    }
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_cols(kj);
                        let s = &src[oy * g.wo + lo..oy * g.wo + hi];
                        dst[lo + kj - g.pad..hi + kj - g.pad].iter_mut().zip(s).for_each(|(d, v)| *d += v);
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2D convolution with square kernel `w: [O, C, k, k]` and bias `[O]`.
pub fn conv2d(x: &Var, w: &Var, b: &Var, stride: usize, pad: usize) -> Var {
    let xs = x.shape();
    assert_eq!(xs.len(), 4, "conv2d expects NCHW");
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let ws = w.shape();
    assert_eq!(ws.len(), 4);
    assert_eq!(ws[1], c, "conv2d channel mismatch: input {c}, weight {ws:?}");
    assert_eq!(ws[2], ws[3]);
    let (o, k) = (ws[0], ws[2]);
    assert_eq!(b.shape(), [o]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let g = ConvGeom { c, h, w: wd, k, stride, pad, ho, wo };
    let p = ho * wo;
    let ckk = c * k * k;
    let mut out = vec![0.0f32; n * o * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; ckk * p] };
    let xd = x.data();
    for i in 0..n {
        let xi = &xd[i * c * h * wd..(i + 1) * c * h * wd];
        let yi = &mut out[i * o * p..(i + 1) * o * p];
        for (row, bias) in yi.chunks_exact_mut(p).zip(b.data()) {
            row.fill(*bias);
        }
        let rhs: &[f32] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut cols);
            &cols
        };
        sgemm(o, ckk, p, w.data(), (ckk, 1), rhs, (p, 1), 1.0, yi, (p, 1));
    }
    Var::from_op(
        Tensor::new(&[n, o, ho, wo], out),
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |grad, parents, _| {
            let (xd, wdat) = (parents[0].data(), parents[1].data());
            let mut dx = vec![0.0f32; n * c * h * wd];
            let mut dw = vec![0.0f32; o * ckk];
            let mut db = vec![0.0f32; o];
            let mut cols = vec![0.0f32; ckk * p];
            let mut dcols = vec![0.0f32; ckk * p];
            for i in 0..n {
                let xi = &xd[i * c * h * wd..(i + 1) * c * h * wd];
                let gi = &grad[i * o * p..(i + 1) * o * p];
                for (d, row) in db.iter_mut().zip(gi.chunks_exact(p)) {
                    *d += row.iter().sum::<f32>();
                }
                let lhs: &[f32] = if g.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &g, &mut cols);
                    &cols
                };
                // dW += dY * cols^T
                sgemm(o, p, ckk, gi, (p, 1), lhs, (1, p), 1.0, &mut dw, (ckk, 1));
                let dxi = &mut dx[i * c * h * wd..(i + 1) * c * h * wd];
                if g.is_pointwise() {
                    sgemm(ckk, o, p, wdat, (1, ckk), gi, (p, 1), 1.0, dxi, (p, 1));
                } else {
                    sgemm(ckk, o, p, wdat, (1, ckk), gi, (p, 1), 0.0, &mut dcols, (p, 1));
                    col2im_add(&dcols, &g, dxi);
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        }),
    )
}

/// Group normalization over `[N, C, H, W]` with per-channel affine.
pub fn group_norm(x: &Var, gamma: &Var, beta: &Var, groups: usize, eps: f32) -> Var {
    let xs = x.shape();
    assert_eq!(xs.len(), 4);
    let (n, c) = (xs[0], xs[1]);
    let hw = xs[2] * xs[3];
    assert_eq!(c % groups, 0, "channels {c} not divisible by {groups} groups");
    assert_eq!(gamma.shape(), [c]);
    assert_eq!(beta.shape(), [c]);
    let cg = c / groups;
    let span = cg * hw;
    let xd = x.data();
    let (gm, bt) = (gamma.data(), beta.data());
    let mut out = vec![0.0f32; xd.len()];
    let mut stats = Vec::with_capacity(n * groups);
    for ng in 0..n * groups {
        let seg = &xd[ng * span..(ng + 1) * span];
        let mean = math::sum(seg) / span as f32;
        let var = math::sum_sq_dev(seg, mean) / span as f32;
        let rstd = 1.0 / (var + eps).sqrt();
        stats.push((mean, rstd));
        let g0 = (ng % groups) * cg;
        for ci in 0..cg {
            let ch = g0 + ci;
            let (a, b) = (rstd * gm[ch], bt[ch] - mean * rstd * gm[ch]);
            let src = &seg[ci * hw..(ci + 1) * hw];
            let dst = &mut out[ng * span + ci * hw..ng * span + (ci + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * a + b;
            }
        }
    }
    Var::from_op(
        Tensor::new(xs, out),
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |grad, parents, _| {
            let (xd, gm) = (parents[0].data(), parents[1].data());
            let mut dx = vec![0.0f32; xd.len()];
            let mut dgamma = vec![0.0f32; c];
            let mut dbeta = vec![0.0f32; c];
            for ng in 0..n * groups {
                let (mean, rstd) = stats[ng];
                let g0 = (ng % groups) * cg;
                let base = ng * span;
                // per channel: sum(dy) and sum(dy * xhat)
                let mut sum_dxhat = 0.0f32;
                let mut sum_dxhat_xhat = 0.0f32;
                for ci in 0..cg {
                    let ch = g0 + ci;
                    let row = base + ci * hw..base + (ci + 1) * hw;
                    let sg = math::sum(&grad[row.clone()]);
                    let sgx = rstd * (math::dot(&grad[row.clone()], &xd[row]) - mean * sg);
                    dgamma[ch] += sgx;
                    dbeta[ch] += sg;
                    sum_dxhat += gm[ch] * sg;
                    sum_dxhat_xhat += gm[ch] * sgx;
                }
                let mean_dxhat = sum_dxhat / span as f32;
                let mean_dxhat_xhat = sum_dxhat_xhat / span as f32;
                for ci in 0..cg {
                    let ch = g0 + ci;
                    let row = base + ci * hw..base + (ci + 1) * hw;
                    let (gy, xr) = (&grad[row.clone()], &xd[row.clone()]);
                    for ((d, &g), &x) in dx[row].iter_mut().zip(gy).zip(xr) {
                        let xhat = (x - mean) * rstd;
                        *d = rstd * (g * gm[ch] - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }),
    )
}

/// Adds a per-(image, channel) offset `e: [N, C]` to every pixel of `x: [N, C, H, W]`.
pub fn add_channel_bias(x: &Var, e: &Var) -> Var {
    let xs = x.shape();
    let (n, c) = (xs[0], xs[1]);
    assert_eq!(e.shape(), [n, c], "channel bias shape");
    let hw = xs[2] * xs[3];
    let mut out = x.data().to_vec();
    for (plane, &v) in out.chunks_exact_mut(hw).zip(e.data()) {
        plane.iter_mut().for_each(|p| *p += v);
    }
    Var::from_op(
        Tensor::new(xs, out),
        vec![x.clone(), e.clone()],
        Box::new(move |g, _, _| {
            let de = g.chunks_exact(hw).map(|plane| plane.iter().sum()).collect();
            vec![Some(g.to_vec()), Some(de)]
        }),
    )
}

/// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
pub fn upsample2x(x: &Var) -> Var {
    let xs = x.shape();
    let (nc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
    let (h2, w2) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0f32; nc * h2 * w2];
    for p in 0..nc {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[p * h2 * w2 + y * w2 + xx] = xd[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    Var::from_op(
        Tensor::new(&[xs[0], xs[1], h2, w2], out),
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0f32; nc * h * w];
            for p in 0..nc {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        dx[p * h * w + (y / 2) * w + xx / 2] += g[p * h2 * w2 + y * w2 + xx];
                    }
                }
            }
            vec![Some(dx)]
        }),
    )
}

fn transpose_blocks(src: &[f32], batch: usize, rows: usize, cols: usize) -> Vec<f32> {
    let mut dst = vec![0.0f32; src.len()];
    for b in 0..batch {
        let s = &src[b * rows * cols..(b + 1) * rows * cols];
        let d = &mut dst[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    dst
}

/// `[N, C, H, W] -> [N, H*W, C]`.
pub fn to_tokens(x: &Var) -> Var {
    let xs = x.shape();
    let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
    let out = transpose_blocks(x.data(), n, c, hw);
    Var::from_op(
        Tensor::new(&[n, hw, c], out),
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(transpose_blocks(g, n, hw, c))]),
    )
}

/// `[N, H*W, C] -> [N, C, H, W]`.
pub fn from_tokens(x: &Var, h: usize, w: usize) -> Var {
    let xs = x.shape();
    let (n, hw, c) = (xs[0], xs[1], xs[2]);
    assert_eq!(hw, h * w);
    let out = transpose_blocks(x.data(), n, hw, c);
    Var::from_op(
        Tensor::new(&[n, c, h, w], out),
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(transpose_blocks(g, n, c, hw))]),
    )
}

/// Scaled dot-product attention, one head: `q: [B, Lq, D]`, `k: [B, Lk, D]`,
/// `v: [B, Lk, Dv]` -> `[B, Lq, Dv]`.
pub fn attention(q: &Var, k: &Var, v: &Var) -> Var {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    assert_eq!(qs.len(), 3);
    let (b, lq, d) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    let dv = vs[2];
    assert_eq!(ks, [b, lk, d], "attention key shape");
    assert_eq!(vs[..2], [b, lk], "attention value shape");
    let scale = 1.0 / (d as f32).sqrt();
    let mut probs = vec![0.0f32; b * lq * lk];
    let mut out = vec![0.0f32; b * lq * dv];
    for bi in 0..b {
        let qb = &q.data()[bi * lq * d..(bi + 1) * lq * d];
        let kb = &k.data()[bi * lk * d..(bi + 1) * lk * d];
        let vb = &v.data()[bi * lk * dv..(bi + 1) * lk * dv];
        let pb = &mut probs[bi * lq * lk..(bi + 1) * lq * lk];
        sgemm(lq, d, lk, qb, (d, 1), kb, (1, d), 0.0, pb, (lk, 1));
        for row in pb.chunks_exact_mut(lk) {
            let max = math::max(row) * scale;
            for s in row.iter_mut() {
                *s = math::exp(*s * scale - max);
            }
            let inv = 1.0 / math::sum(row);
            row.iter_mut().for_each(|s| *s *= inv);
        }
        let ob = &mut out[bi * lq * dv..(bi + 1) * lq * dv];
        sgemm(lq, lk, dv, pb, (lk, 1), vb, (dv, 1), 0.0, ob, (dv, 1));
    }
    Var::from_op(
        Tensor::new(&[b, lq, dv], out),
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g, parents, _| {
            let (qd, kd, vd) = (parents[0].data(), parents[1].data(), parents[2].data());
            let mut dq = vec![0.0f32; b * lq * d];
            let mut dk = vec![0.0f32; b * lk * d];
            let mut dvv = vec![0.0f32; b * lk * dv];
            let mut ds = vec![0.0f32; lq * lk];
            for bi in 0..b {
                let qb = &qd[bi * lq * d..(bi + 1) * lq * d];
                let kb = &kd[bi * lk * d..(bi + 1) * lk * d];
                let vb = &vd[bi * lk * dv..(bi + 1) * lk * dv];
                let pb = &probs[bi * lq * lk..(bi + 1) * lq * lk];
                let gb = &g[bi * lq * dv..(bi + 1) * lq * dv];
                // dV = P^T dO
                sgemm(lk, lq, dv, pb, (1, lk), gb, (dv, 1), 0.0, &mut dvv[bi * lk * dv..(bi + 1) * lk * dv], (dv, 1));
                // dP = dO V^T
                sgemm(lq, dv, lk, gb, (dv, 1), vb, (1, dv), 0.0, &mut ds, (lk, 1));
                for (drow, prow) in ds.chunks_exact_mut(lk).zip(pb.chunks_exact(lk)) {
                    let dot = math::dot(drow, prow);
                    for (dv_, &p) in drow.iter_mut().zip(prow) {
                        *dv_ = p * (*dv_ - dot) * scale;
                    }
                }
                sgemm(lq, lk, d, &ds, (lk, 1), kb, (d, 1), 0.0, &mut dq[bi * lq * d..(bi + 1) * lq * d], (d, 1));
                sgemm(lk, lq, d, &ds, (1, lk), qb, (d, 1), 0.0, &mut dk[bi * lk * d..(bi + 1) * lk * d], (d, 1));
            }
            vec![Some(dq), Some(dk), Some(dvv)]
        }),
    )
}

/// Row lookup `table[ids]` -> `[ids.len(), D]`.
pub fn embedding(table: &Var, ids: &[usize]) -> Var {
    let ts = table.shape();
    assert_eq!(ts.len(), 2);
    let (rows, dim) = (ts[0], ts[1]);
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        assert!(id < rows, "embedding id {id} out of range {rows}");
        out.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
    }
    let ids = ids.to_vec();
    Var::from_op(
        Tensor::new(&[ids.len(), dim], out),
        vec![table.clone()],
        Box::new(move |g, _, _| {
            let mut dt = vec![0.0f32; rows * dim];
            for (row, &id) in ids.iter().enumerate() {
                dt[id * dim..(id + 1) * dim]
                    .iter_mut()
                    .zip(&g[row * dim..(row + 1) * dim])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(dt)]
        }),
    )
}

/// Concatenation along the leading axis; trailing shapes must agree.
pub fn concat(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let tail = parts[0].shape()[1..].to_vec();
    let mut lead = 0;
    let mut out = Vec::new();
    let mut sizes = Vec::with_capacity(parts.len());
    for p in parts {
        assert_eq!(p.shape()[1..], tail[..], "concat trailing shape mismatch");
        lead += p.shape()[0];
        sizes.push(p.value().numel());
        out.extend_from_slice(p.data());
    }
    let mut shape = vec![lead];
    shape.extend_from_slice(&tail);
    Var::from_op(
        Tensor::new(&shape, out),
        parts.to_vec(),
        Box::new(move |g, _, _| {
            let mut off = 0;
            sizes
                .iter()
                .map(|&s| {
                    let part = g[off..off + s].to_vec();
                    off += s;
                    Some(part)
                })
                .collect()
        }),
    )
}

/// Stacks equally shaped vars along a new leading axis.
pub fn stack(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let inner = parts[0].shape().to_vec();
    let mut shape = vec![1];
    shape.extend_from_slice(&inner);
    let lifted: Vec<Var> = parts
        .iter()
        .map(|p| {
            assert_eq!(p.shape(), &inner[..], "stack shape mismatch");
            reshape(p, &shape)
        })
        .collect();
    concat(&lifted)
}

/// Adds the first `L` rows of `table: [Lmax, D]` to every sequence of `x: [B, L, D]`.
pub fn add_positional(x: &Var, table: &Var) -> Var {
    let xs = x.shape();
    assert_eq!(xs.len(), 3);
    let (l, d) = (xs[1], xs[2]);
    let ts = table.shape();
    assert!(ts[0] >= l && ts[1] == d, "positional table {ts:?} too small for {xs:?}");
    let mut out = x.data().to_vec();
    let pos = &table.data()[..l * d];
    for seq in out.chunks_exact_mut(l * d) {
        seq.iter_mut().zip(pos).for_each(|(a, b)| *a += b);
    }
    let rows = ts[0];
    Var::from_op(
        Tensor::new(xs, out),
        vec![x.clone(), table.clone()],
        Box::new(move |g, _, _| {
            let mut dt = vec![0.0f32; rows * d];
            for seq in g.chunks_exact(l * d) {
                dt[..l * d].iter_mut().zip(seq).for_each(|(a, b)| *a += b);
            }
            vec![Some(g.to_vec()), Some(dt)]
        }),
    )
}

/// Mean squared error against a constant target.
pub fn mse(pred: &Var, target: &Tensor) -> Var {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let n = pred.value().numel() as f32;
    let diff: Vec<f32> = pred.data().iter().zip(target.data()).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| (*d as f64) * (*d as f64)).sum::<f64>() / n as f64;
    Var::from_op(
        Tensor::scalar(loss as f32),
        vec![pred.clone()],
        Box::new(move |g, _, _| {
            let s = 2.0 * g[0] / n;
            vec![Some(diff.iter().map(|d| d * s).collect())]
        }),
    )
}

/// Sum of all elements.
pub fn sum(x: &Var) -> Var {
    let total = x.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
    let len = numel(x.shape());
    Var::from_op(
        Tensor::scalar(total),
        vec![x.clone()],
        Box::new(move |g, _, _| vec![Some(vec![g[0]; len])]),
    )
}

/// Elementwise product.
pub fn mul(a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
    let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Var::from_op(
        Tensor::new(a.shape(), out),
        vec![a.clone(), b.clone()],
        Box::new(|g, p, _| {
            let da = g.iter().zip(p[1].data()).map(|(g, b)| g * b).collect();
            let db = g.iter().zip(p[0].data()).map(|(g, a)| g * a).collect();
            vec![Some(da), Some(db)]
        }),
    )
}
