//! Raw numeric kernels shared by forward and backward passes.

use super::dense::{split_axis, strides};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero along broadcast dims.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out_shape.len() - shape.len();
    (0..out_shape.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every output index together with the matching offsets into `a` and `b`.
pub(crate) fn for_each_broadcast(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..n {
        f(i, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub(crate) fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `c[m,k] = g[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_bt<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// `c[k,n] = a[m,k]ᵀ · g[m,n]`
pub(crate) fn matmul_at<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
    c
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn im2col<S: Scalar>(x: &[S], g: ConvGeom) -> Vec<S> {
    let cols = g.oh * g.ow;
    let mut out = vec![S::zero(); g.c * g.k * g.k * cols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = oy as isize + ki as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize + kj as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn col2im<S: Scalar>(cols_data: &[S], g: ConvGeom) -> Vec<S> {
    let cols = g.oh * g.ow;
    let mut out = vec![S::zero(); g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = oy as isize + ki as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = ox as isize + kj as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            out[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn permute<S: Scalar>(x: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= mapped[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Factor-`r` space-to-depth on `[C, H, W]`:
/// `out[c·r² + i·r + j, y, x] = in[c, y·r + i, x·r + j]`.
pub(crate) fn space_to_depth<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, r: usize) -> Vec<S> {
    let (oh, ow) = (h / r, w / r);
    let mut out = vec![S::zero(); x.len()];
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let oc = ch * r * r + i * r + j;
                for y in 0..oh {
                    let src = &x[(ch * h + y * r + i) * w..][..w];
                    let dst = &mut out[(oc * oh + y) * ow..][..ow];
                    for (xo, d) in dst.iter_mut().enumerate() {
                        *d = src[xo * r + j];
                    }
                }
            }
        }
    }
    out
}

/// Exact inverse of [`space_to_depth`]; `c` is the input channel count (divisible by r²).
pub(crate) fn depth_to_space<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, r: usize) -> Vec<S> {
    let oc = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![S::zero(); x.len()];
    for ch in 0..oc {
        for i in 0..r {
            for j in 0..r {
                let ic = ch * r * r + i * r + j;
                for y in 0..h {
                    let src = &x[(ic * h + y) * w..][..w];
                    let dst = &mut out[(ch * oh + y * r + i) * ow..][..ow];
                    for (xi, &v) in src.iter().enumerate() {
                        dst[xi * r + j] = v;
                    }
                }
            }
        }
    }
    out
}

/// Per-axis interpolation table for half-pixel-centred bilinear resizing.
pub(crate) fn bilinear_table(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_bilinear<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ty = bilinear_table(h, oh);
    let tx = bilinear_table(w, ow);
    let mut out = vec![S::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = S::of(fy);
            let r0 = &plane[y0 * w..][..w];
            let r1 = &plane[y1 * w..][..w];
            let dst = &mut out[(ch * oh + oy) * ow..][..ow];
            for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&tx) {
                let fx = S::of(fx);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                *d = top + (bot - top) * fy;
            }
        }
    }
    out
}

pub(crate) fn resize_bilinear_backward<S: Scalar>(
    g: &[S],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let ty = bilinear_table(h, oh);
    let tx = bilinear_table(w, ow);
    let mut out = vec![S::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..][..h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = S::of(fy);
            let src = &g[(ch * oh + oy) * ow..][..ow];
            for (&gv, &(x0, x1, fx)) in src.iter().zip(&tx) {
                let fx = S::of(fx);
                let top = gv * (S::one() - fy);
                let bot = gv * fy;
                plane[y0 * w + x0] += top * (S::one() - fx);
                plane[y0 * w + x1] += top * fx;
                plane[y1 * w + x0] += bot * (S::one() - fx);
                plane[y1 * w + x1] += bot * fx;
            }
        }
    }
    out
}

/// Softmax along `axis` of a tensor with the given shape.
pub(crate) fn softmax<S: Scalar>(x: &[S], shape: &[usize], axis: usize) -> Vec<S> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![S::zero(); x.len()];
    for o in 0..outer {
        for r in 0..inner {
            let at = |i: usize| (o * n + i) * inner + r;
            let mx = (0..n).map(|i| x[at(i)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for i in 0..n {
                let e = (x[at(i)] - mx).exp();
                out[at(i)] = e;
                total += e;
            }
            for i in 0..n {
                out[at(i)] /= total;
            }
        }
    }
    out
}

/// Multi-head scaled dot-product attention. Returns `(output[nq,d], probs[heads,nq,nk])`.
pub(crate) fn attention<S: Scalar>(
    q: &[S],
    k: &[S],
    v: &[S],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut out = vec![S::zero(); nq * d];
    let mut probs = vec![S::zero(); heads * nq * nk];
    let mut row = vec![S::zero(); nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let qi = &q[i * d + off..][..dh];
            let mut mx = S::neg_infinity();
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &k[j * d + off..][..dh];
                *r = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<S>() * scale;
                mx = mx.max(*r);
            }
            let mut total = S::zero();
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                total += *r;
            }
            let p = &mut probs[(h * nq + i) * nk..][..nk];
            let o = &mut out[i * d + off..][..dh];
            for (j, (pj, &rj)) in p.iter_mut().zip(row.iter()).enumerate() {
                *pj = rj / total;
                let vj = &v[j * d + off..][..dh];
                for (ov, &vv) in o.iter_mut().zip(vj) {
                    *ov += *pj * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of [`attention`] with respect to `(q, k, v)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<S: Scalar>(
    g: &[S],
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut gq = vec![S::zero(); q.len()];
    let mut gk = vec![S::zero(); k.len()];
    let mut gv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let gi = &g[i * d + off..][..dh];
            let p = &probs[(h * nq + i) * nk..][..nk];
            let mut dot = S::zero();
            for j in 0..nk {
                let vj = &v[j * d + off..][..dh];
                dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                dot += dp[j] * p[j];
                let gvj = &mut gv[j * d + off..][..dh];
                for (t, &a) in gvj.iter_mut().zip(gi) {
                    *t += p[j] * a;
                }
            }
            for j in 0..nk {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == S::zero() {
                    continue;
                }
                let kj = &k[j * d + off..][..dh];
                let qi = &q[i * d + off..][..dh];
                let gqi = &mut gq[i * d + off..][..dh];
                for (t, &a) in gqi.iter_mut().zip(kj) {
                    *t += ds * a;
                }
                let gkj = &mut gk[j * d + off..][..dh];
                for (t, &a) in gkj.iter_mut().zip(qi) {
                    *t += ds * a;
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn s2d_index_map_enumerated() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = space_to_depth(&x, 1, 4, 4, 4);
        assert_eq!(y, x);
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = space_to_depth(&x, 1, 4, 4, 2);
        // channel (i, j) collects pixels (2y + i, 2x + j)
        assert_eq!(y, vec![0., 2., 8., 10., 1., 3., 9., 11., 4., 6., 12., 14., 5., 7., 13., 15.]);
        assert_eq!(depth_to_space(&y, 4, 2, 2, 2), x);
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let x: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        assert_eq!(resize_bilinear(&x, 1, 3, 4, 3, 4), x);
    }

    #[test]
    fn bilinear_factor_two_downsample_is_block_mean() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let y = resize_bilinear(&x, 1, 4, 4, 2, 2);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
