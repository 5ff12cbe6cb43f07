//! Forward and adjoint kernels. Each parallel loop writes disjoint output
//! slabs and reduces in a fixed order, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use super::tensor::Tensor;

/// Output positions `o` in `0..n` for which `o + off` is also in `0..n`.
fn valid(n: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (n as isize - off).clamp(0, n as isize) as usize;
    (lo, hi.max(lo))
}

/// `out[p] += a * src[p + off]` over every in-bounds `p`.
fn shifted_axpy(out: &mut [f64], src: &[f64], a: f64, dims: [usize; 3], off: [isize; 3]) {
    let [d, h, w] = dims;
    let (z0, z1) = valid(d, off[0]);
    let (y0, y1) = valid(h, off[1]);
    let (x0, x1) = valid(w, off[2]);
    if x0 >= x1 {
        return;
    }
    let len = x1 - x0;
    let xs = (x0 as isize + off[2]) as usize;
    for z in z0..z1 {
        let zs = (z as isize + off[0]) as usize;
        for y in y0..y1 {
            let ys = (y as isize + off[1]) as usize;
            let o = (z * h + y) * w + x0;
            let s = (zs * h + ys) * w + xs;
            for (oi, si) in out[o..o + len].iter_mut().zip(&src[s..s + len]) {
                *oi += a * si;
            }
        }
    }
}

/// `sum_p a[p] * b[p + off]`.
fn shifted_dot(a: &[f64], b: &[f64], dims: [usize; 3], off: [isize; 3]) -> f64 {
    let [d, h, w] = dims;
    let (z0, z1) = valid(d, off[0]);
    let (y0, y1) = valid(h, off[1]);
    let (x0, x1) = valid(w, off[2]);
    if x0 >= x1 {
        return 0.0;
    }
    let len = x1 - x0;
    let xs = (x0 as isize + off[2]) as usize;
    let mut acc = 0.0;
    for z in z0..z1 {
        let zs = (z as isize + off[0]) as usize;
        for y in y0..y1 {
            let ys = (y as isize + off[1]) as usize;
            let o = (z * h + y) * w + x0;
            let s = (zs * h + ys) * w + xs;
            acc += a[o..o + len]
                .iter()
                .zip(&b[s..s + len])
                .map(|(p, q)| p * q)
                .sum::<f64>();
        }
    }
    acc
}

fn kernel_offsets(k: usize) -> Vec<[isize; 3]> {
    let p = (k / 2) as isize;
    let mut v = Vec::with_capacity(k * k * k);
    for kz in 0..k as isize {
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                v.push([kz - p, ky - p, kx - p]);
            }
        }
    }
    v
}

/// Same-padded stride-1 convolution. `w` is `[co, ci, k, k, k]`, `b` holds
/// `co` values.
pub fn conv3d(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [n, ci, d, h, wd] = x.shape();
    let [co, _, k, _, _] = w.shape();
    let offs = kernel_offsets(k);
    let kk = offs.len();
    let s = d * h * wd;
    let mut out = Tensor::zeros([n, co, d, h, wd]);
    let (wdat, bdat) = (w.data(), b.data());
    out.data_mut().par_chunks_mut(s).enumerate().for_each(|(idx, o)| {
        let (bn, oc) = (idx / co, idx % co);
        o.fill(bdat[oc]);
        for ic in 0..ci {
            let xs = x.slab(bn, ic);
            let base = (oc * ci + ic) * kk;
            for (t, off) in offs.iter().enumerate() {
                shifted_axpy(o, xs, wdat[base + t], [d, h, wd], *off);
            }
        }
    });
    out
}

pub fn conv3d_grad_input(dy: &Tensor, w: &Tensor, x_shape: [usize; 5]) -> Tensor {
    let [_, ci, d, h, wd] = x_shape;
    let [co, _, k, _, _] = w.shape();
    let offs = kernel_offsets(k);
    let kk = offs.len();
    let s = d * h * wd;
    let mut dx = Tensor::zeros(x_shape);
    let wdat = w.data();
    dx.data_mut().par_chunks_mut(s).enumerate().for_each(|(idx, g)| {
        let (bn, ic) = (idx / ci, idx % ci);
        for oc in 0..co {
            let ds = dy.slab(bn, oc);
            let base = (oc * ci + ic) * kk;
            for (t, off) in offs.iter().enumerate() {
                let neg = [-off[0], -off[1], -off[2]];
                shifted_axpy(g, ds, wdat[base + t], [d, h, wd], neg);
            }
        }
    });
    dx
}

/// Weight and bias adjoints.
pub fn conv3d_grad_params(dy: &Tensor, x: &Tensor, w_shape: [usize; 5]) -> (Tensor, Tensor) {
    let [n, ci, d, h, wd] = x.shape();
    let [_, _, k, _, _] = w_shape;
    let offs = kernel_offsets(k);
    let kk = offs.len();
    let mut dw = Tensor::zeros(w_shape);
    dw.data_mut().par_chunks_mut(kk).enumerate().for_each(|(idx, g)| {
        let (oc, ic) = (idx / ci, idx % ci);
        for bn in 0..n {
            let ds = dy.slab(bn, oc);
            let xs = x.slab(bn, ic);
            for (t, off) in offs.iter().enumerate() {
                g[t] += shifted_dot(ds, xs, [d, h, wd], *off);
            }
        }
    });
    (dw, bias_grad(dy))
}

fn bias_grad(dy: &Tensor) -> Tensor {
    let [n, co, ..] = dy.shape();
    let mut db = Tensor::zeros([1, co, 1, 1, 1]);
    for oc in 0..co {
        db.data_mut()[oc] = (0..n).map(|bn| dy.slab(bn, oc).iter().sum::<f64>()).sum();
    }
    db
}

/// Stride-2, kernel-2 transposed convolution. `w` is `[ci, co, 2, 2, 2]`.
/// Kernel footprints do not overlap, so every output voxel receives exactly
/// one tap per input channel.
pub fn conv_transpose3d(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [n, ci, d, h, wd] = x.shape();
    let co = w.shape()[1];
    let (od, oh, ow) = (2 * d, 2 * h, 2 * wd);
    let mut out = Tensor::zeros([n, co, od, oh, ow]);
    let (wdat, bdat) = (w.data(), b.data());
    out.data_mut()
        .par_chunks_mut(od * oh * ow)
        .enumerate()
        .for_each(|(idx, o)| {
            let (bn, oc) = (idx / co, idx % co);
            o.fill(bdat[oc]);
            for ic in 0..ci {
                let xs = x.slab(bn, ic);
                let wk = &wdat[(ic * co + oc) * 8..(ic * co + oc) * 8 + 8];
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            let v = xs[(z * h + y) * wd + xx];
                            for t in 0..8 {
                                let (a, bb, c) = (t >> 2, (t >> 1) & 1, t & 1);
                                o[((2 * z + a) * oh + 2 * y + bb) * ow + 2 * xx + c] += wk[t] * v;
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn conv_transpose3d_grad_input(dy: &Tensor, w: &Tensor, x_shape: [usize; 5]) -> Tensor {
    let [_, ci, d, h, wd] = x_shape;
    let co = w.shape()[1];
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dx = Tensor::zeros(x_shape);
    let wdat = w.data();
    dx.data_mut()
        .par_chunks_mut(d * h * wd)
        .enumerate()
        .for_each(|(idx, g)| {
            let (bn, ic) = (idx / ci, idx % ci);
            for oc in 0..co {
                let ds = dy.slab(bn, oc);
                let wk = &wdat[(ic * co + oc) * 8..(ic * co + oc) * 8 + 8];
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            let mut acc = 0.0;
                            for t in 0..8 {
                                let (a, bb, c) = (t >> 2, (t >> 1) & 1, t & 1);
                                acc += wk[t] * ds[((2 * z + a) * oh + 2 * y + bb) * ow + 2 * xx + c];
                            }
                            g[(z * h + y) * wd + xx] += acc;
                        }
                    }
                }
            }
        });
    dx
}

pub fn conv_transpose3d_grad_params(dy: &Tensor, x: &Tensor, w_shape: [usize; 5]) -> (Tensor, Tensor) {
    let [n, _, d, h, wd] = x.shape();
    let co = w_shape[1];
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dw = Tensor::zeros(w_shape);
    dw.data_mut().par_chunks_mut(8).enumerate().for_each(|(idx, g)| {
        let (ic, oc) = (idx / co, idx % co);
        for bn in 0..n {
            let xs = x.slab(bn, ic);
            let ds = dy.slab(bn, oc);
            for (t, gt) in g.iter_mut().enumerate() {
                let (a, bb, c) = (t >> 2, (t >> 1) & 1, t & 1);
                let mut acc = 0.0;
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..wd {
                            acc += xs[(z * h + y) * wd + xx] * ds[((2 * z + a) * oh + 2 * y + bb) * ow + 2 * xx + c];
                        }
                    }
                }
                *gt += acc;
            }
        }
    });
    (dw, bias_grad(dy))
}

/// Per-(instance, channel) normalisation. Returns the output together with
/// the normalised activations and inverse standard deviations needed by the
/// adjoint.
pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, Tensor, Vec<f64>) {
    let [n, c, ..] = x.shape();
    let s = x.spatial_len();
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![0.0; n * c];
    xhat.data_mut()
        .par_chunks_mut(s)
        .zip(inv_std.par_iter_mut())
        .enumerate()
        .for_each(|(idx, (out, istd))| {
            let src = x.slab(idx / c, idx % c);
            let mean = src.iter().sum::<f64>() / s as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
            *istd = 1.0 / (var + eps).sqrt();
            for (o, v) in out.iter_mut().zip(src) {
                *o = (v - mean) * *istd;
            }
        });
    let mut y = xhat.clone();
    for idx in 0..n * c {
        let (g, b) = (gamma.data()[idx % c], beta.data()[idx % c]);
        for v in y.slab_mut(idx / c, idx % c) {
            *v = g * *v + b;
        }
    }
    (y, xhat, inv_std)
}

/// Adjoints of instance norm with respect to `(x, gamma, beta)`.
pub fn instance_norm_grad(dy: &Tensor, xhat: &Tensor, inv_std: &[f64], gamma: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, ..] = dy.shape();
    let s = dy.spatial_len() as f64;
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros([1, c, 1, 1, 1]);
    let mut dbeta = Tensor::zeros([1, c, 1, 1, 1]);
    for idx in 0..n * c {
        let (bn, ch) = (idx / c, idx % c);
        let (d, xh) = (dy.slab(bn, ch), xhat.slab(bn, ch));
        let g = gamma.data()[ch];
        let sum_d: f64 = d.iter().sum();
        let sum_dx: f64 = d.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma.data_mut()[ch] += sum_dx;
        dbeta.data_mut()[ch] += sum_d;
        let k = g * inv_std[idx] / s;
        for ((o, &dv), &xv) in dx.slab_mut(bn, ch).iter_mut().zip(d).zip(xh) {
            *o = k * (s * dv - sum_d - xv * sum_dx);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_grad(dy: &Tensor, x: &Tensor, slope: f64) -> Tensor {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= 0.0 {
            *g *= slope;
        }
    }
    dx
}

/// 2x2x2 max pooling; also returns the flat in-slab argmax of each window
/// (first maximum wins on ties).
pub fn max_pool(x: &Tensor) -> (Tensor, Vec<u32>) {
    let [n, c, d, h, w] = x.shape();
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, od, oh, ow]);
    let mut arg = vec![0u32; y.len()];
    let os = od * oh * ow;
    y.data_mut()
        .par_chunks_mut(os)
        .zip(arg.par_chunks_mut(os))
        .enumerate()
        .for_each(|(idx, (out, am))| {
            let src = x.slab(idx / c, idx % c);
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for t in 0..8 {
                            let (a, b, cc) = (t >> 2, (t >> 1) & 1, t & 1);
                            let i = ((2 * z + a) * h + 2 * yy + b) * w + 2 * xx + cc;
                            if src[i] > best {
                                best = src[i];
                                bi = i;
                            }
                        }
                        let o = (z * oh + yy) * ow + xx;
                        out[o] = best;
                        am[o] = bi as u32;
                    }
                }
            }
        });
    (y, arg)
}

pub fn max_pool_grad(dy: &Tensor, arg: &[u32], x_shape: [usize; 5]) -> Tensor {
    let mut dx = Tensor::zeros(x_shape);
    let c = x_shape[1];
    let os = dy.spatial_len();
    for idx in 0..x_shape[0] * c {
        let (bn, ch) = (idx / c, idx % c);
        let d = dy.slab(bn, ch);
        let g = dx.slab_mut(bn, ch);
        for (o, &i) in arg[idx * os..(idx + 1) * os].iter().enumerate() {
            g[i as usize] += d[o];
        }
    }
    dx
}

/// Softmax over the channel axis, independently per voxel.
pub fn softmax(x: &Tensor) -> Tensor {
    let [_, c, ..] = x.shape();
    let s = x.spatial_len();
    let mut y = Tensor::zeros(x.shape());
    y.data_mut().par_chunks_mut(c * s).enumerate().for_each(|(bn, out)| {
        let src = &x.data()[bn * c * s..(bn + 1) * c * s];
        for v in 0..s {
            let m = (0..c).map(|ch| src[ch * s + v]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (src[ch * s + v] - m).exp();
                out[ch * s + v] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * s + v] /= z;
            }
        }
    });
    y
}

pub fn softmax_grad(dy: &Tensor, y: &Tensor) -> Tensor {
    let [_, c, ..] = y.shape();
    let s = y.spatial_len();
    let mut dx = Tensor::zeros(y.shape());
    dx.data_mut().par_chunks_mut(c * s).enumerate().for_each(|(bn, out)| {
        let yy = &y.data()[bn * c * s..(bn + 1) * c * s];
        let dd = &dy.data()[bn * c * s..(bn + 1) * c * s];
        for v in 0..s {
            let dot: f64 = (0..c).map(|ch| yy[ch * s + v] * dd[ch * s + v]).sum();
            for ch in 0..c {
                out[ch * s + v] = yy[ch * s + v] * (dd[ch * s + v] - dot);
            }
        }
    });
    dx
}

/// Concatenates along the channel axis.
pub fn concat(parts: &[&Tensor]) -> Tensor {
    let [n, _, d, h, w] = parts[0].shape();
    let c: usize = parts.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(n * c * d * h * w);
    for bn in 0..n {
        for t in parts {
            for ch in 0..t.channels() {
                data.extend_from_slice(t.slab(bn, ch));
            }
        }
    }
    Tensor::new([n, c, d, h, w], data).expect("concat shape")
}

/// Splits a channel-axis adjoint back into per-part adjoints.
pub fn concat_grad(dy: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let t = dy.channel_slice(start, c).expect("concat grad slice");
            start += c;
            t
        })
        .collect()
}

/// Mask value for element `i` of `x`; the mask either matches `x` or has a
/// single channel broadcast over all of `x`'s channels.
pub fn mask_at(mask: &Tensor, x_shape: [usize; 5], i: usize) -> f64 {
    if mask.shape() == x_shape {
        return mask.data()[i];
    }
    let s = x_shape[2] * x_shape[3] * x_shape[4];
    let bn = i / (x_shape[1] * s);
    mask.data()[bn * s + i % s]
}

/// Soft Dice per class over masked voxels:
/// `(2 sum m p g + eps) / (sum m p + sum m g + eps)`, shape `[1, c, 1, 1, 1]`.
/// Also returns the per-class `(intersection, denominator)` pairs.
pub fn dice_terms(p: &Tensor, g: &Tensor, m: &Tensor, eps: f64) -> (Tensor, Vec<(f64, f64)>) {
    let [n, c, ..] = p.shape();
    let mut out = Tensor::zeros([1, c, 1, 1, 1]);
    let mut parts = Vec::with_capacity(c);
    for ch in 0..c {
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for bn in 0..n {
            let (pp, gg, mm) = (p.slab(bn, ch), g.slab(bn, ch), m.slab(bn, 0));
            for v in 0..pp.len() {
                inter += mm[v] * pp[v] * gg[v];
                ps += mm[v] * pp[v];
                gs += mm[v] * gg[v];
            }
        }
        let den = ps + gs + eps;
        out.data_mut()[ch] = (2.0 * inter + eps) / den;
        parts.push((2.0 * inter + eps, den));
    }
    (out, parts)
}

pub fn dice_terms_grad(dy: &Tensor, g: &Tensor, m: &Tensor, parts: &[(f64, f64)]) -> Tensor {
    let [n, c, ..] = g.shape();
    let mut dp = Tensor::zeros(g.shape());
    for ch in 0..c {
        let (num, den) = parts[ch];
        let up = dy.data()[ch];
        for bn in 0..n {
            let (gg, mm) = (g.slab(bn, ch), m.slab(bn, 0));
            let out = dp.slab_mut(bn, ch);
            for v in 0..out.len() {
                out[v] = up * mm[v] * (2.0 * gg[v] / den - num / (den * den));
            }
        }
    }
    dp
}
