//! Graph-free entry points for the dense ops, used by inspection code, the
//! Python bindings, and as the forward half that the graph ops wrap.

use super::kernels;
use super::tensor::{Real, Tensor};
use super::{NumericsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    /// `kernel[Cin, Cout]`, mixes channels only.
    Pointwise1x1,
    /// `kernel[3, 3, C]`, each channel convolved independently.
    Depthwise3x3,
    /// `kernel[3, 3, Cin, Cout]`.
    Full3x3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

fn hwc<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(NumericsError::ShapeMismatch(format!(
            "expected an H×W×C tensor, got {s:?}"
        ))),
    }
}

/// Edge-replicating pad by one pixel on every side.
fn replicate_pad<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    let (ph, pw) = (h + 2, w + 2);
    let mut out = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        let sy = y.saturating_sub(1).min(h - 1);
        for xx in 0..pw {
            let sx = xx.saturating_sub(1).min(w - 1);
            out.extend_from_slice(&x.data()[(sy * w + sx) * c..][..c]);
        }
    }
    Tensor::new(vec![ph, pw, c], out)
}

fn crop_interior<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (ph, pw, c) = hwc(x)?;
    let (h, w) = (ph - 2, pw - 2);
    let mut out = Vec::with_capacity(h * w * c);
    for y in 1..=h {
        out.extend_from_slice(&x.data()[(y * pw + 1) * c..][..w * c]);
    }
    Tensor::new(vec![h, w, c], out)
}

/// Same-size convolution of `x[H, W, C]`. 3×3 modes pad by one pixel.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    mode: ConvMode,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    let ks = kernel.shape();
    let bad =
        || NumericsError::ShapeMismatch(format!("{mode:?} kernel {ks:?} for {c} input channels"));
    match mode {
        ConvMode::Pointwise1x1 => {
            if ks.len() != 2 || ks[0] != c {
                return Err(bad());
            }
            let out = kernels::matmul(x.data(), kernel.data(), h * w, c, ks[1]);
            Tensor::new(vec![h, w, ks[1]], out)
        }
        ConvMode::Depthwise3x3 | ConvMode::Full3x3 => {
            let ok = match mode {
                ConvMode::Depthwise3x3 => ks == [3, 3, c],
                _ => ks.len() == 4 && ks[..3] == [3, 3, c],
            };
            if !ok {
                return Err(bad());
            }
            let (src, (sh, sw)) = match padding {
                Padding::Zero => (x.clone(), (h, w)),
                Padding::Replicate => (replicate_pad(x)?, (h + 2, w + 2)),
            };
            let (out, cout) = match mode {
                ConvMode::Depthwise3x3 => (
                    kernels::depthwise3x3(src.data(), kernel.data(), sh, sw, c),
                    c,
                ),
                _ => (
                    kernels::conv3x3(src.data(), kernel.data(), None, sh, sw, c, ks[3]),
                    ks[3],
                ),
            };
            let out = Tensor::new(vec![sh, sw, cout], out)?;
            match padding {
                Padding::Zero => Ok(out),
                Padding::Replicate => crop_interior(&out),
            }
        }
    }
}

/// `y = x·W + b` over the last axis of `x`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let k = x.last_dim();
    let ws = weight.shape();
    if ws.len() != 2 || ws[0] != k || bias.shape() != [ws[1]] {
        return Err(NumericsError::ShapeMismatch(format!(
            "linear: x {:?}, W {ws:?}, b {:?}",
            x.shape(),
            bias.shape()
        )));
    }
    let n = ws[1];
    let mut out = kernels::matmul(x.data(), weight.data(), x.numel() / k, k, n);
    for row in out.chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    let mut shape = x.shape().to_vec();
    if shape.is_empty() {
        shape.push(1);
    }
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    for extent in [h, w] {
        if r == 0 || extent % r != 0 {
            return Err(NumericsError::NotDivisible { extent, factor: r });
        }
    }
    Tensor::new(
        vec![h / r, w / r, c * r * r],
        kernels::pixel_unshuffle(x.data(), h, w, c, r),
    )
}

pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x)?;
    if r == 0 || c % (r * r) != 0 {
        return Err(NumericsError::NotDivisible {
            extent: c,
            factor: r * r,
        });
    }
    Tensor::new(
        vec![h * r, w * r, c / (r * r)],
        kernels::pixel_shuffle(x.data(), h, w, c, r),
    )
}
