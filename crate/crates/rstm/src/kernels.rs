//! Pure forward/backward compute kernels on flat slices.
//!
//! Shape validation happens in [`crate::tape`]; these functions assume
//! consistent arguments. All accumulations run left-to-right in the storage
//! dtype so repeated runs are bit-identical.

use crate::tensor::{Scalar, Tensor};

/// Direct convolution, stride 1, zero padding.
///
/// `x`: [n, h, w, cin], `w`: [k, k, cin/groups, cout], output [n, h', w', cout]
/// with h' = h + 2*pad - k + 1.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    pad: usize,
    groups: usize,
) -> Tensor<T> {
    let (n, h, wd, cin) = dims4(x.shape());
    let k = w.shape()[0];
    let cin_g = cin / groups;
    let cout = w.shape()[3];
    let cout_g = cout / groups;
    let oh = h + 2 * pad - k + 1;
    let ow = wd + 2 * pad - k + 1;

    let xs = x.data();
    let ws = w.data();
    let mut out = vec![T::zero(); n * oh * ow * cout];

    for in_ in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut out[((in_ * oh + oy) * ow + ox) * cout..][..cout];
                if let Some(b) = bias {
                    orow.copy_from_slice(b.data());
                }
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xpix = &xs[((in_ * h + iy as usize) * wd + ix as usize) * cin..][..cin];
                        for g in 0..groups {
                            let oslice = &mut orow[g * cout_g..(g + 1) * cout_g];
                            for ci_g in 0..cin_g {
                                let xv = xpix[g * cin_g + ci_g];
                                let wrow = &ws[(((ky * k + kx) * cin_g + ci_g) * cout
                                    + g * cout_g)..][..cout_g];
                                for (o, wv) in oslice.iter_mut().zip(wrow) {
                                    *o = *o + xv * *wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, cout], out).unwrap()
}

/// Gradient of conv2d w.r.t. the input.
pub fn conv2d_backward_input<T: Scalar>(
    gout: &[T],
    w: &Tensor<T>,
    x_shape: &[usize],
    pad: usize,
    groups: usize,
) -> Vec<T> {
    let (n, h, wd, cin) = dims4(x_shape);
    let k = w.shape()[0];
    let cin_g = cin / groups;
    let cout = w.shape()[3];
    let cout_g = cout / groups;
    let oh = h + 2 * pad - k + 1;
    let ow = wd + 2 * pad - k + 1;

    let ws = w.data();
    let mut dx = vec![T::zero(); n * h * wd * cin];

    for in_ in 0..n {
        for iy in 0..h {
            for ix in 0..wd {
                let dpix = &mut dx[((in_ * h + iy) * wd + ix) * cin..][..cin];
                for ky in 0..k {
                    let oy = iy as isize + pad as isize - ky as isize;
                    if oy < 0 || oy >= oh as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ox = ix as isize + pad as isize - kx as isize;
                        if ox < 0 || ox >= ow as isize {
                            continue;
                        }
                        let grow = &gout
                            [((in_ * oh + oy as usize) * ow + ox as usize) * cout..][..cout];
                        for g in 0..groups {
                            let gslice = &grow[g * cout_g..(g + 1) * cout_g];
                            for ci_g in 0..cin_g {
                                let wrow = &ws[(((ky * k + kx) * cin_g + ci_g) * cout
                                    + g * cout_g)..][..cout_g];
                                let mut acc = T::zero();
                                for (gv, wv) in gslice.iter().zip(wrow) {
                                    acc = acc + *gv * *wv;
                                }
                                dpix[g * cin_g + ci_g] = dpix[g * cin_g + ci_g] + acc;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of conv2d w.r.t. the weights.
pub fn conv2d_backward_weight<T: Scalar>(
    x: &Tensor<T>,
    gout: &[T],
    w_shape: &[usize],
    pad: usize,
    groups: usize,
) -> Vec<T> {
    let (n, h, wd, cin) = dims4(x.shape());
    let k = w_shape[0];
    let cin_g = cin / groups;
    let cout = w_shape[3];
    let cout_g = cout / groups;
    let oh = h + 2 * pad - k + 1;
    let ow = wd + 2 * pad - k + 1;

    let xs = x.data();
    let mut dw = vec![T::zero(); k * k * cin_g * cout];

    for in_ in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let grow = &gout[((in_ * oh + oy) * ow + ox) * cout..][..cout];
                for ky in 0..k {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xpix = &xs[((in_ * h + iy as usize) * wd + ix as usize) * cin..][..cin];
                        for g in 0..groups {
                            let gslice = &grow[g * cout_g..(g + 1) * cout_g];
                            for ci_g in 0..cin_g {
                                let xv = xpix[g * cin_g + ci_g];
                                let drow = &mut dw[(((ky * k + kx) * cin_g + ci_g) * cout
                                    + g * cout_g)..][..cout_g];
                                for (d, gv) in drow.iter_mut().zip(gslice) {
                                    *d = *d + xv * *gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

pub fn conv2d_backward_bias<T: Scalar>(gout: &[T], cout: usize) -> Vec<T> {
    let mut db = vec![T::zero(); cout];
    for row in gout.chunks_exact(cout) {
        for (d, g) in db.iter_mut().zip(row) {
            *d = *d + *g;
        }
    }
    db
}

/// out[b,i,j] = sum_k a[b,i,k] * bm[b,k,j]; batched over the leading extent.
/// A batch extent of 1 on either side broadcasts.
pub fn matmul_forward<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    a_batch: usize,
    b_batch: usize,
    m: usize,
    kk: usize,
    p: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m * p];
    for bi in 0..batch {
        let am = &a[(bi % a_batch.max(1)).min(a_batch - 1) * m * kk..][..m * kk];
        let bm = &b[(bi % b_batch.max(1)).min(b_batch - 1) * kk * p..][..kk * p];
        let om = &mut out[bi * m * p..][..m * p];
        for i in 0..m {
            let arow = &am[i * kk..][..kk];
            let orow = &mut om[i * p..][..p];
            for (kidx, &av) in arow.iter().enumerate() {
                let brow = &bm[kidx * p..][..p];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o = *o + av * *bv;
                }
            }
        }
    }
    out
}

/// da[b,i,k] = sum_j g[b,i,j] * bm[b,k,j]  (g x B^T), summed over batch when
/// `a` is broadcast.
pub fn matmul_backward_a<T: Scalar>(
    g: &[T],
    b: &[T],
    batch: usize,
    a_batch: usize,
    b_batch: usize,
    m: usize,
    kk: usize,
    p: usize,
) -> Vec<T> {
    let mut da = vec![T::zero(); a_batch * m * kk];
    for bi in 0..batch {
        let gm = &g[bi * m * p..][..m * p];
        let bm = &b[(bi % b_batch.max(1)).min(b_batch - 1) * kk * p..][..kk * p];
        let dm = &mut da[(bi % a_batch.max(1)).min(a_batch - 1) * m * kk..][..m * kk];
        for i in 0..m {
            let grow = &gm[i * p..][..p];
            let drow = &mut dm[i * kk..][..kk];
            for kidx in 0..kk {
                let brow = &bm[kidx * p..][..p];
                let mut acc = T::zero();
                for (gv, bv) in grow.iter().zip(brow) {
                    acc = acc + *gv * *bv;
                }
                drow[kidx] = drow[kidx] + acc;
            }
        }
    }
    da
}

/// db[b,k,j] = sum_i a[b,i,k] * g[b,i,j]  (A^T x g), summed over batch when
/// `b` is broadcast.
pub fn matmul_backward_b<T: Scalar>(
    g: &[T],
    a: &[T],
    batch: usize,
    a_batch: usize,
    b_batch: usize,
    m: usize,
    kk: usize,
    p: usize,
) -> Vec<T> {
    let mut db = vec![T::zero(); b_batch * kk * p];
    for bi in 0..batch {
        let gm = &g[bi * m * p..][..m * p];
        let am = &a[(bi % a_batch.max(1)).min(a_batch - 1) * m * kk..][..m * kk];
        let dm = &mut db[(bi % b_batch.max(1)).min(b_batch - 1) * kk * p..][..kk * p];
        for i in 0..m {
            let grow = &gm[i * p..][..p];
            let arow = &am[i * kk..][..kk];
            for (kidx, &av) in arow.iter().enumerate() {
                let drow = &mut dm[kidx * p..][..p];
                for (d, gv) in drow.iter_mut().zip(grow) {
                    *d = *d + av * *gv;
                }
            }
        }
    }
    db
}

/// Space-to-depth: [n,h,w,c] -> [n,h/r,w/r,c*r*r] with output channel
/// c*r*r ordering c_in-major then (dy, dx) row-major.
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, h, w, c) = dims4(x.shape());
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let xs = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for in_ in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut out[((in_ * oh + oy) * ow + ox) * oc..][..oc];
                for ci in 0..c {
                    for dy in 0..r {
                        for dx in 0..r {
                            let iy = oy * r + dy;
                            let ix = ox * r + dx;
                            orow[ci * r * r + dy * r + dx] =
                                xs[((in_ * h + iy) * w + ix) * c + ci];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, oc], out).unwrap()
}

/// Depth-to-space, exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, h, w, c) = dims4(x.shape());
    let (oh, ow, oc) = (h * r, w * r, c / (r * r));
    let xs = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for in_ in 0..n {
        for iy in 0..h {
            for ix in 0..w {
                let xrow = &xs[((in_ * h + iy) * w + ix) * c..][..c];
                for co in 0..oc {
                    for dy in 0..r {
                        for dx in 0..r {
                            let oy = iy * r + dy;
                            let ox = ix * r + dx;
                            out[((in_ * oh + oy) * ow + ox) * oc + co] =
                                xrow[co * r * r + dy * r + dx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, oc], out).unwrap()
}

/// Max-subtracted exp-normalize along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                let v = xs[base + l * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for l in 0..len {
                let e = (xs[base + l * inner] - mx).exp();
                out[base + l * inner] = e;
                sum = sum + e;
            }
            for l in 0..len {
                out[base + l * inner] = out[base + l * inner] / sum;
            }
        }
    }
    Tensor::new(shape, out).unwrap()
}

/// dx = y * (g - sum_axis(g * y)), with y the softmax output.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, g: &[T], axis: usize) -> Vec<T> {
    let shape = y.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let ys = y.data();
    let mut dx = vec![T::zero(); ys.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for l in 0..len {
                let idx = base + l * inner;
                dot = dot + g[idx] * ys[idx];
            }
            for l in 0..len {
                let idx = base + l * inner;
                dx[idx] = ys[idx] * (g[idx] - dot);
            }
        }
    }
    dx
}

/// Per-location layer normalization over the trailing channel axis.
/// Returns (output, inv_std per row, mean per row); biased variance, eps
/// inside the square root.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: Option<&[T]>,
    eps: T,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let c = *x.shape().last().unwrap();
    let rows = x.numel() / c;
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    let mut inv_std = vec![T::zero(); rows];
    let mut means = vec![T::zero(); rows];
    let cn = T::f(c as f64);
    for r in 0..rows {
        let xrow = &xs[r * c..][..c];
        let mut mu = T::zero();
        for &v in xrow {
            mu = mu + v;
        }
        mu = mu / cn;
        let mut var = T::zero();
        for &v in xrow {
            let d = v - mu;
            var = var + d * d;
        }
        var = var / cn;
        let inv = (var + eps).sqrt().recip();
        inv_std[r] = inv;
        means[r] = mu;
        let orow = &mut out[r * c..][..c];
        for ci in 0..c {
            let xhat = (xrow[ci] - mu) * inv;
            orow[ci] = match beta {
                Some(b) => xhat * gamma[ci] + b[ci],
                None => xhat * gamma[ci],
            };
        }
    }
    (Tensor::new(x.shape(), out).unwrap(), inv_std, means)
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    has_beta: bool,
    inv_std: &[T],
    means: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Option<Vec<T>>) {
    let c = *x.shape().last().unwrap();
    let rows = x.numel() / c;
    let xs = x.data();
    let cn = T::f(c as f64);
    let mut dx = vec![T::zero(); xs.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = if has_beta { Some(vec![T::zero(); c]) } else { None };
    for r in 0..rows {
        let xrow = &xs[r * c..][..c];
        let grow = &g[r * c..][..c];
        let inv = inv_std[r];
        let mu = means[r];
        // gx = g * gamma; dx = inv * (gx - mean(gx) - xhat * mean(gx * xhat))
        let mut mean_gx = T::zero();
        let mut mean_gx_xhat = T::zero();
        for ci in 0..c {
            let xhat = (xrow[ci] - mu) * inv;
            let gx = grow[ci] * gamma[ci];
            mean_gx = mean_gx + gx;
            mean_gx_xhat = mean_gx_xhat + gx * xhat;
            dgamma[ci] = dgamma[ci] + grow[ci] * xhat;
            if let Some(db) = dbeta.as_mut() {
                db[ci] = db[ci] + grow[ci];
            }
        }
        mean_gx = mean_gx / cn;
        mean_gx_xhat = mean_gx_xhat / cn;
        let drow = &mut dx[r * c..][..c];
        for ci in 0..c {
            let xhat = (xrow[ci] - mu) * inv;
            let gx = grow[ci] * gamma[ci];
            drow[ci] = inv * (gx - mean_gx - xhat * mean_gx_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Exact GELU: x * Phi(x) with the erf-based normal CDF.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::f(0.5);
    let inv_sqrt2 = T::f(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + Scalar::erf(x * inv_sqrt2))
}

/// d/dx GELU = Phi(x) + x * phi(x).
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::f(0.5);
    let inv_sqrt2 = T::f(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::f(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let cdf = half * (T::one() + Scalar::erf(x * inv_sqrt2));
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}
