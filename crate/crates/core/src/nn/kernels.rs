//! Forward and backward kernels on 4-D `(batch, channel, height, width)`
//! tensors. The autograd graph wires these together; they are also called
//! directly by inference-only code paths.

use rayon::prelude::*;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Valid output columns `[lo, hi)` for a kernel offset `off` (already
/// shifted by the padding) along an axis of length `n`.
fn valid_range(off: isize, n: usize) -> (usize, usize) {
    let lo = (-off).clamp(0, n as isize) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfold one item into `cin * k * k` rows of length `h * w`; row `r` starts
/// at `cols[r * ld]`, so several items can share one wide matrix.
fn im2col<T: Scalar>(item: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T], ld: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &item[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(dy, h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(dx, w);
                let row = &mut cols[((ci * k + ky) * k + kx) * ld..][..hw];
                row[..y0 * w].fill(T::zero());
                row[y1 * w..].fill(T::zero());
                for y in y0..y1 {
                    let out = &mut row[y * w..(y + 1) * w];
                    let sy = (y as isize + dy) as usize;
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    if x1 > x0 {
                        let s0 = (x0 as isize + dx) as usize;
                        out[x0..x1].copy_from_slice(&plane[sy * w + s0..sy * w + s0 + (x1 - x0)]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, item: &mut [T], ld: usize) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut item[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = valid_range(dy, h);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(dx, w);
                if x1 <= x0 {
                    continue;
                }
                let row = &cols[((ci * k + ky) * k + kx) * ld..][..hw];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy * w + s0..sy * w + s0 + (x1 - x0)];
                    for (d, &v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Unfold a whole batch into a `(cin * k * k, B * h * w)` matrix.
fn unfold_batch<T: Scalar>(x: &Tensor<T>, k: usize) -> Vec<T> {
    let (b, cin, h, w) = x.dims4();
    let hw = h * w;
    let ld = b * hw;
    let mut cols = vec![T::zero(); cin * k * k * ld];
    for bi in 0..b {
        im2col(x.item(bi), cin, h, w, k, &mut cols[bi * hw..], ld);
    }
    cols
}

/// `(B, C, hw)` to `(C, B * hw)` and back.
fn batch_to_rows<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[ci * b * hw + bi * hw..][..hw].copy_from_slice(&x[(bi * c + ci) * hw..][..hw]);
        }
    }
    out
}

fn rows_to_batch<T: Scalar>(x: &[T], b: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * hw..][..hw].copy_from_slice(&x[ci * b * hw + bi * hw..][..hw]);
        }
    }
    out
}

/// Stride-1 "same" convolution with an odd square kernel.
/// `weight` is `(out, in, k, k)`, `bias` is `(out,)`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let (b, cin, h, w) = x.dims4();
    let (cout, wcin, k, _) = weight.dims4();
    assert_eq!(cin, wcin, "conv2d: input has {cin} channels, weight expects {wcin}");
    let hw = h * w;
    let kk = cin * k * k;
    let cols = if k == 1 { batch_to_rows(x.data(), b, cin, hw) } else { unfold_batch(x, k) };
    let mut rows = vec![T::zero(); cout * b * hw];
    T::gemm(cout, kk, b * hw, weight.data(), false, &cols, false, &mut rows, false);
    if let Some(bias) = bias {
        for (row, &bv) in rows.chunks_mut(b * hw).zip(bias.data()) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::from_vec(&[b, cout, h, w], rows_to_batch(&rows, b, cout, hw)).expect("conv output shape")
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let (b, cin, h, w) = x.dims4();
    let (cout, _, k, _) = weight.dims4();
    let hw = h * w;
    let n = b * hw;
    let kk = cin * k * k;
    let cols = if k == 1 { batch_to_rows(x.data(), b, cin, hw) } else { unfold_batch(x, k) };
    let go = batch_to_rows(grad_out.data(), b, cout, hw);
    let mut dweight = Tensor::zeros(weight.shape());
    T::gemm(cout, n, kk, &go, false, &cols, true, dweight.data_mut(), false);
    let dbias: Vec<T> = go.chunks(n).map(|r| r.iter().copied().sum()).collect();
    let input = need_input.then(|| {
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(kk, cout, n, weight.data(), true, &go, false, &mut dcols, false);
        let dx = if k == 1 {
            rows_to_batch(&dcols, b, cin, hw)
        } else {
            let mut dx = vec![T::zero(); b * cin * hw];
            for bi in 0..b {
                col2im(&dcols[bi * hw..], cin, h, w, k, &mut dx[bi * cin * hw..(bi + 1) * cin * hw], n);
            }
            dx
        };
        Tensor::from_vec(x.shape(), dx).expect("input gradient shape")
    });
    ConvGrads { input, weight: dweight, bias: Tensor::from_vec(&[cout], dbias).expect("bias gradient shape") }
}

/// 2x2 stride-2 transposed convolution; `weight` is `(in, out, 2, 2)`.
pub fn conv_transpose2x2<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (b, cin, h, w) = x.dims4();
    let (wcin, cout, _, _) = weight.dims4();
    assert_eq!(cin, wcin, "conv_transpose2x2: channel mismatch");
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    out.data_mut().par_chunks_mut(cout * oh * ow).enumerate().for_each(|(bi, ob)| {
        let mut mat = vec![T::zero(); cout * 4 * hw];
        T::gemm(cout * 4, cin, hw, weight.data(), true, x.item(bi), false, &mut mat, false);
        for co in 0..cout {
            let bv = bias.data()[co];
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let row = &mat[(co * 4 + d) * hw..][..hw];
                for y in 0..h {
                    for xx in 0..w {
                        ob[co * oh * ow + (2 * y + dy) * ow + 2 * xx + dx] = row[y * w + xx] + bv;
                    }
                }
            }
        }
    });
    out
}

pub fn conv_transpose2x2_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let (b, cin, h, w) = x.dims4();
    let (_, cout, _, _) = weight.dims4();
    let hw = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dweight = Tensor::zeros(weight.shape());
    let mut dbias = Tensor::zeros(&[cout]);
    let mut dinput = need_input.then(|| Vec::with_capacity(x.numel()));
    for bi in 0..b {
        let go = grad_out.item(bi);
        let mut mat = vec![T::zero(); cout * 4 * hw];
        for co in 0..cout {
            for d in 0..4 {
                let (dy, dx) = (d / 2, d % 2);
                let row = &mut mat[(co * 4 + d) * hw..][..hw];
                for y in 0..h {
                    for xx in 0..w {
                        let g = go[co * oh * ow + (2 * y + dy) * ow + 2 * xx + dx];
                        row[y * w + xx] = g;
                        dbias.data_mut()[co] += g;
                    }
                }
            }
        }
        T::gemm(cin, hw, cout * 4, x.item(bi), false, &mat, true, dweight.data_mut(), true);
        if let Some(acc) = dinput.as_mut() {
            let mut dx = vec![T::zero(); cin * hw];
            T::gemm(cin, cout * 4, hw, weight.data(), false, &mat, false, &mut dx, false);
            acc.extend(dx);
        }
    }
    ConvGrads {
        input: dinput.map(|d| Tensor::from_vec(x.shape(), d).expect("input gradient shape")),
        weight: dweight,
        bias: dbias,
    }
}

/// 2x2 max pooling; returns the pooled tensor and, per output element, the
/// flat index of the selected input element.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let (b, c, h, w) = x.dims4();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    let mut arg = vec![0usize; b * c * oh * ow];
    let src = x.data();
    for p in 0..b * c {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (p * oh + y) * ow + xx;
                out.data_mut()[o] = src[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Scalar>(input_shape: &[usize], arg: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in arg.iter().zip(grad_out.data()) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Per-axis bilinear taps with half-pixel centres (`align_corners = false`).
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
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

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Tensor::zeros(&[b, c, out_h, out_w]);
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, out_h, out_w) = grad_out.dims4();
    if (h, w) == (out_h, out_w) {
        return grad_out.clone();
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut dx = Tensor::zeros(input_shape);
    for p in 0..b * c {
        let g = &grad_out.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let v = g[oy * out_w + ox];
                dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * w + x0] += v * fy * (T::one() - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    dx
}

/// Saved state of a normalisation over contiguous groups of `group_len`
/// elements.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub group_len: usize,
}

/// Normalise each contiguous group to zero mean and unit variance, with
/// `eps` added to the (population) variance.
pub fn normalize_groups<T: Scalar>(x: &[T], group_len: usize, eps: T) -> NormCache<T> {
    let n = T::of(group_len as f64);
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.len() / group_len);
    for g in x.chunks(group_len) {
        let mean = g.iter().copied().sum::<T>() / n;
        let var = g.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        xhat.extend(g.iter().map(|&v| (v - mean) * is));
        inv_std.push(is);
    }
    NormCache { xhat, inv_std, group_len }
}

/// Gradient of the group normalisation given the gradient w.r.t. `xhat`.
pub fn normalize_groups_backward<T: Scalar>(cache: &NormCache<T>, dxhat: &[T]) -> Vec<T> {
    let n = T::of(cache.group_len as f64);
    let mut dx = Vec::with_capacity(dxhat.len());
    for ((dg, xg), &is) in dxhat.chunks(cache.group_len).zip(cache.xhat.chunks(cache.group_len)).zip(&cache.inv_std) {
        let sum_d = dg.iter().copied().sum::<T>();
        let sum_dx = dg.iter().zip(xg).map(|(&d, &x)| d * x).sum::<T>();
        dx.extend(dg.iter().zip(xg).map(|(&d, &x)| is / n * (n * d - sum_d - x * sum_dx)));
    }
    dx
}

/// Group normalisation with per-channel affine parameters.
pub fn group_norm<T: Scalar>(x: &Tensor<T>, groups: usize, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> (Tensor<T>, NormCache<T>) {
    let (_, c, h, w) = x.dims4();
    assert_eq!(c % groups, 0, "group_norm: {groups} groups do not divide {c} channels");
    let cache = normalize_groups(x.data(), c / groups * h * w, eps);
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    for (i, (o, &xh)) in out.data_mut().iter_mut().zip(&cache.xhat).enumerate() {
        let ch = (i / hw) % c;
        *o = xh * gamma.data()[ch] + beta.data()[ch];
    }
    (out, cache)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn group_norm_backward<T: Scalar>(
    shape: &[usize],
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dxhat = Vec::with_capacity(grad_out.numel());
    for (i, (&g, &xh)) in grad_out.data().iter().zip(&cache.xhat).enumerate() {
        let ch = (i / hw) % c;
        dgamma.data_mut()[ch] += g * xh;
        dbeta.data_mut()[ch] += g;
        dxhat.push(g * gamma.data()[ch]);
    }
    let dx = normalize_groups_backward(cache, &dxhat);
    (Tensor::from_vec(shape, dx).expect("group norm gradient shape"), dgamma, dbeta)
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let n = T::of((h * w) as f64);
    Tensor::from_vec(&[b, c, 1, 1], x.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / n).collect())
        .expect("pool shape")
}

/// Multiply every `(b, c)` plane of `x` by `scale[b, c]`.
pub fn channel_scale<T: Scalar>(x: &Tensor<T>, scale: &Tensor<T>) -> Tensor<T> {
    let (_, _, h, w) = x.dims4();
    let mut out = x.clone();
    for (plane, &s) in out.data_mut().chunks_mut(h * w).zip(scale.data()) {
        plane.iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Concatenate 4-D tensors with equal batch and spatial size along channels.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (b, _, h, w) = parts[0].dims4();
    let total: usize = parts.iter().map(|p| p.dims4().1).sum();
    let mut data = Vec::with_capacity(b * total * h * w);
    for bi in 0..b {
        for p in parts {
            let (pb, _, ph, pw) = p.dims4();
            assert_eq!((pb, ph, pw), (b, h, w), "concat_channels: incompatible parts");
            data.extend_from_slice(p.item(bi));
        }
    }
    Tensor::from_vec(&[b, total, h, w], data).expect("concat shape")
}

pub fn split_channels<T: Scalar>(grad: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let (b, total, h, w) = grad.dims4();
    let hw = h * w;
    let mut parts: Vec<Vec<T>> = widths.iter().map(|c| Vec::with_capacity(b * c * hw)).collect();
    for bi in 0..b {
        let item = grad.item(bi);
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&item[off * hw..(off + c) * hw]);
            off += c;
        }
        debug_assert_eq!(off, total);
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &c)| Tensor::from_vec(&[b, c, h, w], d).expect("split shape"))
        .collect()
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (bn, cin, h, wd) = x.dims4();
        let (cout, _, k, _) = w.dims4();
        let p = (k / 2) as isize;
        Tensor::from_fn(&[bn, cout, h, wd], |i| {
            let xx = i % wd;
            let y = (i / wd) % h;
            let co = (i / (wd * h)) % cout;
            let bi = i / (wd * h * cout);
            let mut s = b.data()[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                            s += w.data()[((co * cin + ci) * k + ky) * k + kx]
                                * x.data()[((bi * cin + ci) * h + sy as usize) * wd + sx as usize];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| ((i * 7 % 11) as f64 - 5.0) / 3.0);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 5 % 13) as f64 - 6.0) / 10.0);
        let b = Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
        let got = conv2d(&x, &w, Some(&b));
        assert!(got.max_abs_diff(&naive_conv(&x, &w, &b)) < 1e-12);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64);
        assert_eq!(resize_bilinear(&x, 3, 3), x);
        let c = Tensor::full(&[1, 1, 4, 4], 2.5f64);
        assert!(resize_bilinear(&c, 16, 16).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn max_pool_picks_maxima() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap();
        let (out, arg) = max_pool2(&x);
        assert_eq!(out.data(), &[5.0, 7.0]);
        assert_eq!(arg, vec![1, 7]);
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 2, 2], |i| -(i as f64));
        let cat = concat_channels(&[&a, &b]);
        let parts = split_channels(&cat, &[1, 3]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
