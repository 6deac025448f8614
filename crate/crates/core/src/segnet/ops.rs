//! Forward/backward kernels over NCHW batches.

use crate::float::Real;
use crate::tensor::Tensor;

/// Zero-padded "same" im2col for odd kernels. `col` is (cin*k*k) x (h*w).
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                // valid output columns: 0 <= x + dx < w
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `gx`.
fn col2im<T: Real>(col: &[T], cin: usize, h: usize, w: usize, k: usize, gx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut gx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &v) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. `weight` is cout x cin x k x k, `bias` is cout.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    let kk = cin * k * k;
    debug_assert_eq!(weight.len(), cout * kk);
    let mut y = Tensor::zeros(x.n, cout, h, w);
    let col_len = if k == 1 { 0 } else { kk * hw };
    T::with_scratch(col_len, |col| {
        for i in 0..x.n {
            let xi = x.item(i);
            let b: &[T] = if k == 1 {
                xi
            } else {
                im2col(xi, cin, h, w, k, col);
                col
            };
            let yi = y.item_mut(i);
            for (co, plane) in yi.chunks_mut(hw).enumerate() {
                plane.fill(bias[co]);
            }
            T::gemm(cout, kk, hw, T::one(), weight, kk as isize, 1, b, hw as isize, 1, T::one(), yi, hw as isize, 1);
        }
    });
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    gy: &Tensor<T>,
    k: usize,
    gweight: &mut [T],
    gbias: &mut [T],
) -> Tensor<T> {
    let (cin, h, w) = (x.c, x.h, x.w);
    let cout = gy.c;
    let hw = h * w;
    let kk = cin * k * k;
    let mut gx = Tensor::zeros(x.n, cin, h, w);
    let col_len = if k == 1 { 0 } else { kk * hw };
    T::with_scratch(2 * col_len, |scratch| {
        let (col, gcol) = scratch.split_at_mut(col_len);
        for i in 0..x.n {
            let gyi = gy.item(i);
            for (co, plane) in gyi.chunks(hw).enumerate() {
                gbias[co] += plane.iter().copied().sum::<T>();
            }
            let xi = x.item(i);
            let b: &[T] = if k == 1 {
                xi
            } else {
                im2col(xi, cin, h, w, k, col);
                col
            };
            // gW += gY (cout x hw) * col^T (hw x kk)
            T::gemm(cout, hw, kk, T::one(), gyi, hw as isize, 1, b, 1, hw as isize, T::one(), gweight, kk as isize, 1);
            // gcol = W^T (kk x cout) * gY (cout x hw); beta = 0 ignores stale contents
            if k == 1 {
                T::gemm(kk, cout, hw, T::one(), weight, 1, kk as isize, gyi, hw as isize, 1, T::zero(), gx.item_mut(i), hw as isize, 1);
            } else {
                T::gemm(kk, cout, hw, T::one(), weight, 1, kk as isize, gyi, hw as isize, 1, T::zero(), gcol, hw as isize, 1);
                col2im(gcol, cin, h, w, k, gx.item_mut(i));
            }
        }
    });
    gx
}

pub const NORM_EPS: f64 = 1e-5;

/// Normalization statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    /// One entry per normalization set (n*groups for group norm, c for batch norm).
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Whether the output depended on batch statistics (false for eval-mode batch norm).
    pub batch_stats: bool,
}

/// Group normalization followed by a per-channel affine map.
pub fn group_norm_forward<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T], groups: usize) -> (Tensor<T>, NormCache<T>) {
    let hw = x.h * x.w;
    let cpg = x.c / groups;
    let m = T::from_usize(cpg * hw).unwrap();
    let eps = T::lit(NORM_EPS);
    let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.n * groups);
    let mut means = Vec::with_capacity(x.n * groups);
    let mut vars = Vec::with_capacity(x.n * groups);
    for i in 0..x.n {
        let xi = x.item(i);
        for g in 0..groups {
            let span = g * cpg * hw..(g + 1) * cpg * hw;
            let seg = &xi[span.clone()];
            let mean = seg.iter().copied().sum::<T>() / m;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            means.push(mean);
            vars.push(var);
            let xh = &mut xhat.item_mut(i)[span.clone()];
            for (o, &v) in xh.iter_mut().zip(seg) {
                *o = (v - mean) * inv;
            }
        }
        let xh = xhat.item(i);
        let yi = y.item_mut(i);
        for c in 0..x.c {
            let (ga, be) = (gamma[c], beta[c]);
            for (o, &v) in yi[c * hw..(c + 1) * hw].iter_mut().zip(&xh[c * hw..(c + 1) * hw]) {
                *o = ga * v + be;
            }
        }
    }
    (
        y,
        NormCache {
            xhat,
            inv_std,
            mean: means,
            var: vars,
            batch_stats: true,
        },
    )
}

pub fn group_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    gy: &Tensor<T>,
    groups: usize,
    ggamma: &mut [T],
    gbeta: &mut [T],
) -> Tensor<T> {
    let (n, c, hw) = (gy.n, gy.c, gy.h * gy.w);
    let cpg = c / groups;
    let m = T::from_usize(cpg * hw).unwrap();
    let mut gx = Tensor::zeros(n, c, gy.h, gy.w);
    let mut gxhat = vec![T::zero(); c * hw];
    for i in 0..n {
        let gyi = gy.item(i);
        let xh = cache.xhat.item(i);
        for ch in 0..c {
            let r = ch * hw..(ch + 1) * hw;
            let mut sg = T::zero();
            let mut sgx = T::zero();
            for ((d, &g), &v) in gxhat[r.clone()].iter_mut().zip(&gyi[r.clone()]).zip(&xh[r.clone()]) {
                sg += g;
                sgx += g * v;
                *d = g * gamma[ch];
            }
            gbeta[ch] += sg;
            ggamma[ch] += sgx;
        }
        let gxi = gx.item_mut(i);
        for g in 0..groups {
            let r = g * cpg * hw..(g + 1) * cpg * hw;
            let inv = cache.inv_std[i * groups + g];
            let sum: T = gxhat[r.clone()].iter().copied().sum();
            let dot: T = gxhat[r.clone()].iter().zip(&xh[r.clone()]).map(|(&a, &b)| a * b).sum();
            for ((o, &d), &v) in gxi[r.clone()].iter_mut().zip(&gxhat[r.clone()]).zip(&xh[r.clone()]) {
                *o = inv * (d - sum / m - v * dot / m);
            }
        }
    }
    gx
}

/// Batch normalization. With `running = Some((mean, var))` the running
/// statistics are used (eval mode); otherwise statistics come from the batch.
pub fn batch_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Tensor<T>, NormCache<T>) {
    let hw = x.h * x.w;
    let eps = T::lit(NORM_EPS);
    let m = T::from_usize(x.n * hw).unwrap();
    let mut means = Vec::with_capacity(x.c);
    let mut vars = Vec::with_capacity(x.c);
    for ch in 0..x.c {
        let (mean, var) = match running {
            Some((rm, rv)) => (rm[ch], rv[ch]),
            None => {
                let mut s = T::zero();
                for i in 0..x.n {
                    s += x.item(i)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
                }
                let mean = s / m;
                let mut v = T::zero();
                for i in 0..x.n {
                    v += x.item(i)[ch * hw..(ch + 1) * hw]
                        .iter()
                        .map(|&a| (a - mean) * (a - mean))
                        .sum::<T>();
                }
                (mean, v / m)
            }
        };
        means.push(mean);
        vars.push(var);
    }
    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
    for i in 0..x.n {
        for ch in 0..x.c {
            let r = ch * hw..(ch + 1) * hw;
            let (mean, inv) = (means[ch], inv_std[ch]);
            let xi = &x.item(i)[r.clone()];
            for (o, &v) in xhat.item_mut(i)[r.clone()].iter_mut().zip(xi) {
                *o = (v - mean) * inv;
            }
            let (ga, be) = (gamma[ch], beta[ch]);
            let src: Vec<T> = xhat.item(i)[r.clone()].to_vec();
            for (o, v) in y.item_mut(i)[r].iter_mut().zip(src) {
                *o = ga * v + be;
            }
        }
    }
    (
        y,
        NormCache {
            xhat,
            inv_std,
            mean: means,
            var: vars,
            batch_stats: running.is_none(),
        },
    )
}

pub fn batch_norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    gy: &Tensor<T>,
    ggamma: &mut [T],
    gbeta: &mut [T],
) -> Tensor<T> {
    let (n, c, hw) = (gy.n, gy.c, gy.h * gy.w);
    let m = T::from_usize(n * hw).unwrap();
    let mut gx = Tensor::zeros(n, c, gy.h, gy.w);
    for ch in 0..c {
        let r = ch * hw..(ch + 1) * hw;
        let mut sum = T::zero();
        let mut dot = T::zero();
        for i in 0..n {
            for (&g, &v) in gy.item(i)[r.clone()].iter().zip(&cache.xhat.item(i)[r.clone()]) {
                sum += g;
                dot += g * v;
            }
        }
        gbeta[ch] += sum;
        ggamma[ch] += dot;
        let inv = cache.inv_std[ch];
        let ga = gamma[ch];
        for i in 0..n {
            let gyi: Vec<T> = gy.item(i)[r.clone()].to_vec();
            let xh: Vec<T> = cache.xhat.item(i)[r.clone()].to_vec();
            let out = &mut gx.item_mut(i)[r.clone()];
            for ((o, g), v) in out.iter_mut().zip(gyi).zip(xh) {
                *o = if cache.batch_stats {
                    ga * inv * (g - sum / m - v * dot / m)
                } else {
                    ga * inv * g
                };
            }
        }
    }
    gx
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Backward through ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = gy.clone();
    for (g, &v) in gx.data.iter_mut().zip(&y.data) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    gx
}

/// 2x2 max pooling; returns the pooled tensor and the flat argmax of each window.
pub fn max_pool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    let mut idx = Vec::with_capacity(y.data.len());
    let mut o = 0;
    for plane in 0..x.n * x.c {
        let base = plane * x.h * x.w;
        for yy in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * yy * x.w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * yy + dy) * x.w + 2 * xx + dx;
                    if x.data[j] > x.data[best] {
                        best = j;
                    }
                }
                y.data[o] = x.data[best];
                idx.push(best as u32);
                o += 1;
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward<T: Real>(gy: &Tensor<T>, idx: &[u32], h: usize, w: usize) -> Tensor<T> {
    let mut gx = Tensor::zeros(gy.n, gy.c, h, w);
    for (&g, &j) in gy.data.iter().zip(idx) {
        gx.data[j as usize] += g;
    }
    gx
}

pub fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.n, x.c, oh, ow);
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        let dst = &mut y.data[plane * oh * ow..(plane + 1) * oh * ow];
        for yy in 0..oh {
            for xx in 0..ow {
                dst[yy * ow + xx] = src[(yy / 2) * x.w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(gy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (gy.h / 2, gy.w / 2);
    let mut gx = Tensor::zeros(gy.n, gy.c, h, w);
    for plane in 0..gy.n * gy.c {
        let src = &gy.data[plane * gy.h * gy.w..(plane + 1) * gy.h * gy.w];
        let dst = &mut gx.data[plane * h * w..(plane + 1) * h * w];
        for yy in 0..gy.h {
            for xx in 0..gy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * gy.w + xx];
            }
        }
    }
    gx
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for i in 0..a.n {
        let yi = y.item_mut(i);
        let la = a.item_len();
        yi[..la].copy_from_slice(a.item(i));
        yi[la..].copy_from_slice(b.item(i));
    }
    y
}

pub fn split_channels<T: Real>(g: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let mut a = Tensor::zeros(g.n, ca, g.h, g.w);
    let mut b = Tensor::zeros(g.n, g.c - ca, g.h, g.w);
    let la = a.item_len();
    for i in 0..g.n {
        let gi = g.item(i);
        a.item_mut(i).copy_from_slice(&gi[..la]);
        b.item_mut(i).copy_from_slice(&gi[la..]);
    }
    (a, b)
}
