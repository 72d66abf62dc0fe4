//! Raw forward/backward kernels on flat row-major buffers.
//!
//! Feature maps are laid out as `[H, W, C]` with channels innermost, so every
//! inner loop below walks contiguous memory.

use super::tensor::{Real, Tensor};
use super::NumericsError;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `out[m, n] = a[m, k] · b[k, n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::ZERO {
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

/// Gradients of [`matmul`]: `(dA, dB) = (dY·Bᵀ, Aᵀ·dY)`.
pub fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    dy: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::ZERO; m * k];
    let mut db = vec![T::ZERO; k * n];
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::ZERO;
            for (&g, &bv) in dyrow.iter().zip(brow) {
                acc += g * bv;
            }
            da[i * k + p] = acc;
            let av = a[i * k + p];
            if av != T::ZERO {
                let dbrow = &mut db[p * n..(p + 1) * n];
                for (d, &g) in dbrow.iter_mut().zip(dyrow) {
                    *d += av * g;
                }
            }
        }
    }
    (da, db)
}

pub fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Full 3×3 convolution, zero padding 1, stride 1.
/// `w` is `[3, 3, cin, cout]`; `bias` is `[cout]` when present.
pub fn conv3x3<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; h * wd * cout];
    for oy in 0..h {
        for ox in 0..wd {
            let o = &mut out[(oy * wd + ox) * cout..(oy * wd + ox + 1) * cout];
            if let Some(b) = bias {
                o.copy_from_slice(b);
            }
            for ky in 0..3 {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = ox as isize + kx as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xin = &x[(iy as usize * wd + ix as usize) * cin..][..cin];
                    let wk = &w[(ky * 3 + kx) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == T::ZERO {
                            continue;
                        }
                        let wrow = &wk[ci * cout..(ci + 1) * cout];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv3x3`] w.r.t. input, weight, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    h: usize,
    wd: usize,
    cin: usize,
    cout: usize,
    want_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let mut dx = if want_dx {
        Some(vec![T::ZERO; h * wd * cin])
    } else {
        None
    };
    let mut dw = vec![T::ZERO; 9 * cin * cout];
    let mut db = vec![T::ZERO; cout];
    for oy in 0..h {
        for ox in 0..wd {
            let g = &dy[(oy * wd + ox) * cout..][..cout];
            for (d, &gv) in db.iter_mut().zip(g) {
                *d += gv;
            }
            for ky in 0..3 {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = ox as isize + kx as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let base = (iy as usize * wd + ix as usize) * cin;
                    let koff = (ky * 3 + kx) * cin * cout;
                    for ci in 0..cin {
                        let wrow = &w[koff + ci * cout..][..cout];
                        if let Some(dx) = dx.as_mut() {
                            let mut acc = T::ZERO;
                            for (&gv, &wv) in g.iter().zip(wrow) {
                                acc += gv * wv;
                            }
                            dx[base + ci] += acc;
                        }
                        let xv = x[base + ci];
                        if xv != T::ZERO {
                            let dwrow = &mut dw[koff + ci * cout..][..cout];
                            for (d, &gv) in dwrow.iter_mut().zip(g) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Depth-wise 3×3 convolution, zero padding 1. `w` is `[3, 3, c]`.
pub fn depthwise3x3<T: Real>(x: &[T], w: &[T], h: usize, wd: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; h * wd * c];
    for oy in 0..h {
        for ox in 0..wd {
            let o = &mut out[(oy * wd + ox) * c..][..c];
            for ky in 0..3 {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = ox as isize + kx as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let xin = &x[(iy as usize * wd + ix as usize) * c..][..c];
                    let wk = &w[(ky * 3 + kx) * c..][..c];
                    for ((ov, &xv), &wv) in o.iter_mut().zip(xin).zip(wk) {
                        *ov += xv * wv;
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise3x3_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    h: usize,
    wd: usize,
    c: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; h * wd * c];
    let mut dw = vec![T::ZERO; 9 * c];
    for oy in 0..h {
        for ox in 0..wd {
            let g = &dy[(oy * wd + ox) * c..][..c];
            for ky in 0..3 {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let ix = ox as isize + kx as isize - 1;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let base = (iy as usize * wd + ix as usize) * c;
                    let koff = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        dx[base + ch] += g[ch] * w[koff + ch];
                        dw[koff + ch] += g[ch] * x[base + ch];
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Space-to-depth: `[H, W, C] -> [H/r, W/r, r²C]`, sub-pixel `(dy, dx)` lands in
/// channel block `dy·r + dx`.
pub fn pixel_unshuffle<T: Real>(x: &[T], h: usize, w: usize, c: usize, r: usize) -> Vec<T> {
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let mut out = vec![T::ZERO; oh * ow * oc];
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..r {
                for dx in 0..r {
                    let src = ((oy * r + dy) * w + ox * r + dx) * c;
                    let dst = (oy * ow + ox) * oc + (dy * r + dx) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

/// Depth-to-space, exact inverse of [`pixel_unshuffle`]: `[H, W, r²C] -> [rH, rW, C]`.
pub fn pixel_shuffle<T: Real>(x: &[T], h: usize, w: usize, c_in: usize, r: usize) -> Vec<T> {
    let c = c_in / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![T::ZERO; oh * ow * c];
    for iy in 0..h {
        for ix in 0..w {
            for dy in 0..r {
                for dx in 0..r {
                    let src = (iy * w + ix) * c_in + (dy * r + dx) * c;
                    let dst = ((iy * r + dy) * ow + ix * r + dx) * c;
                    out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

/// Max-subtracted softmax over contiguous rows of length `n`.
pub fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mx = row.iter().copied().fold(row[0], T::max);
        let mut sum = T::ZERO;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mx).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// `dx = y ⊙ (dy − Σ dy·y)` per row.
pub fn softmax_rows_backward<T: Real>(y: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; y.len()];
    for ((yr, gr), dr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    dx
}

/// Softmax along an arbitrary axis of a tensor.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>, NumericsError> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(NumericsError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let data = x.data();
    let mut out = vec![T::ZERO; data.len()];
    let mut lane = vec![T::ZERO; n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, l) in lane.iter_mut().enumerate() {
                *l = data[(o * n + k) * inner + i];
            }
            let s = softmax_rows(&lane, n);
            for (k, v) in s.into_iter().enumerate() {
                out[(o * n + k) * inner + i] = v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Standard normal CDF via the exact error function.
pub fn normal_cdf<T: Real>(x: T) -> T {
    T::from_f64(0.5) * (T::ONE + (x / T::from_f64(SQRT_2)).erf())
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    normal_cdf(x) + x * pdf
}

pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::from_f64(slope);
    x.map(|v| if v >= T::ZERO { v } else { s * v })
}

/// Parameter-free normalization over rows of length `n`. Returns the
/// normalized values and the per-row `1/sqrt(var + eps)`.
pub fn layer_norm_rows<T: Real>(x: &[T], n: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::ZERO; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / n.max(1));
    let nf = T::from_f64(n as f64);
    for (row, orow) in x.chunks(n).zip(out.chunks_mut(n)) {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let inv = T::ONE / (var + T::from_f64(eps)).sqrt();
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn layer_norm_rows_backward<T: Real>(y: &[T], inv_std: &[T], dy: &[T], n: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; y.len()];
    let nf = T::from_f64(n as f64);
    for (((yr, gr), dr), &inv) in y
        .chunks(n)
        .zip(dy.chunks(n))
        .zip(dx.chunks_mut(n))
        .zip(inv_std)
    {
        let mean_g = gr.iter().copied().sum::<T>() / nf;
        let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / nf;
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = inv * (gv - mean_g - yv * mean_gy);
        }
    }
    dx
}

/// Layer normalization over `channel_axis` (population variance).
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    channel_axis: usize,
    eps: f64,
) -> Result<Tensor<T>, NumericsError> {
    let shape = x.shape();
    if channel_axis >= shape.len() {
        return Err(NumericsError::InvalidAxis {
            axis: channel_axis,
            rank: shape.len(),
        });
    }
    let n = shape[channel_axis];
    if n == 0 {
        return Err(NumericsError::ShapeMismatch(
            "layer_norm needs at least one channel".into(),
        ));
    }
    let inner: usize = shape[channel_axis + 1..].iter().product();
    let outer: usize = shape[..channel_axis].iter().product();
    let data = x.data();
    let mut out = vec![T::ZERO; data.len()];
    let mut lane = vec![T::ZERO; n];
    for o in 0..outer {
        for i in 0..inner {
            for (k, l) in lane.iter_mut().enumerate() {
                *l = data[(o * n + k) * inner + i];
            }
            let (y, _) = layer_norm_rows(&lane, n, eps);
            for (k, v) in y.into_iter().enumerate() {
                out[(o * n + k) * inner + i] = v;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}
