//! Forward and backward kernels on raw NCHW buffers.

use serde::{Deserialize, Serialize};

use super::tensor::Elem;
use crate::error::{Error, Result};
use crate::par;

/// Rows of an output matrix handled by one parallel task.
const ROW_BLOCK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Zero,
    Replicate,
}

/// Shapes of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: Padding,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        mode: Padding,
    ) -> Result<Self> {
        let (&[n, c, h, w], &[k, wc, kh, kw]) = (x_shape, w_shape) else {
            return Err(Error::shape(
                "conv2d",
                format!("need 4-d input and weight, got {x_shape:?} and {w_shape:?}"),
            ));
        };
        if wc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, weight expects {wc}"),
            ));
        }
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{w}"),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            mode,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.k, self.oh, self.ow]
    }
}

#[inline]
fn source_index(i: isize, len: usize, mode: Padding) -> Option<usize> {
    if (0..len as isize).contains(&i) {
        Some(i as usize)
    } else {
        match mode {
            Padding::Zero => None,
            Padding::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// Unfolds one sample into a `(c*kh*kw) x (oh*ow)` patch matrix.
fn im2col<T: Elem>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let hw = g.oh * g.ow;
    par::for_each_chunk(cols, hw, |r, row| {
        let kx = r % g.kw;
        let ky = (r / g.kw) % g.kh;
        let ci = r / (g.kw * g.kh);
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for oy in 0..g.oh {
            let iy = source_index((oy * g.stride + ky) as isize - g.pad as isize, g.h, g.mode);
            for ox in 0..g.ow {
                let ix = source_index((ox * g.stride + kx) as isize - g.pad as isize, g.w, g.mode);
                row[oy * g.ow + ox] = match (iy, ix) {
                    (Some(iy), Some(ix)) => plane[iy * g.w + ix],
                    _ => T::ZERO,
                };
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto one sample.
fn col2im<T: Elem>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let hw = g.oh * g.ow;
    let taps = g.kh * g.kw;
    // channels are independent, so parallelise over input planes
    par::for_each_chunk(dx, g.h * g.w, |ci, plane| {
        for t in 0..taps {
            let (ky, kx) = (t / g.kw, t % g.kw);
            let row = &cols[(ci * taps + t) * hw..][..hw];
            for oy in 0..g.oh {
                let Some(iy) =
                    source_index((oy * g.stride + ky) as isize - g.pad as isize, g.h, g.mode)
                else {
                    continue;
                };
                for ox in 0..g.ow {
                    if let Some(ix) =
                        source_index((ox * g.stride + kx) as isize - g.pad as isize, g.w, g.mode)
                    {
                        plane[iy * g.w + ix] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    });
}

/// `rows x inner` times `inner x n` into `out`, split into row blocks.
#[allow(clippy::too_many_arguments)]
fn blocked_gemm<T: Elem>(
    rows: usize,
    inner: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    out: &mut [T],
    accumulate: bool,
) {
    if n == 0 || rows == 0 {
        return;
    }
    par::for_each_chunk(&mut out[..rows * n], ROW_BLOCK * n, |bi, chunk| {
        let r0 = bi * ROW_BLOCK;
        let m = chunk.len() / n;
        if a_t {
            // rows of op(a) are columns of the stored `inner x rows` buffer
            let cols: Vec<T> = (0..inner)
                .flat_map(|i| a[i * rows + r0..i * rows + r0 + m].iter().copied())
                .collect();
            T::gemm(m, inner, n, &cols, true, b, b_t, chunk, accumulate);
        } else {
            T::gemm(
                m,
                inner,
                n,
                &a[r0 * inner..(r0 + m) * inner],
                false,
                b,
                b_t,
                chunk,
                accumulate,
            );
        }
    });
}

pub fn conv2d_forward<T: Elem>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (ckk, hw) = (g.patch_len(), g.oh * g.ow);
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::ZERO; g.n * g.k * hw];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; ckk * hw]
    };
    for ni in 0..g.n {
        let xs = &x[ni * in_len..(ni + 1) * in_len];
        let patches: &[T] = if g.pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        let os = &mut out[ni * g.k * hw..(ni + 1) * g.k * hw];
        blocked_gemm(g.k, ckk, hw, w, false, patches, false, os, false);
        if let Some(b) = b {
            for (row, &bk) in os.chunks_mut(hw).zip(b) {
                row.iter_mut().for_each(|v| *v += bk);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Elem>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let (ckk, hw) = (g.patch_len(), g.oh * g.ow);
    let in_len = g.c * g.h * g.w;
    let mut dw = vec![T::ZERO; g.k * ckk];
    let mut db = vec![T::ZERO; g.k];
    let mut dx = need_dx.then(|| vec![T::ZERO; g.n * in_len]);
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; ckk * hw]
    };
    let mut dcols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::ZERO; ckk * hw]
    };
    for ni in 0..g.n {
        let xs = &x[ni * in_len..(ni + 1) * in_len];
        let dys = &dy[ni * g.k * hw..(ni + 1) * g.k * hw];
        let patches: &[T] = if g.pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        blocked_gemm(g.k, hw, ckk, dys, false, patches, true, &mut dw, true);
        for (d, row) in db.iter_mut().zip(dys.chunks(hw)) {
            *d += row.iter().copied().sum::<T>();
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[ni * in_len..(ni + 1) * in_len];
            if g.pointwise() {
                blocked_gemm(ckk, g.k, hw, w, true, dys, false, dxs, false);
            } else {
                blocked_gemm(ckk, g.k, hw, w, true, dys, false, &mut dcols, false);
                col2im(g, &dcols, dxs);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Source taps for one output index of a half-pixel-aligned bilinear upsample.
#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    t: T,
}

fn upsample_taps<T: Elem>(n_in: usize, factor: usize) -> Vec<Tap<T>> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            Tap {
                i0,
                i1: (i0 + 1).min(n_in - 1),
                t: T::from_f64(src - i0 as f64),
            }
        })
        .collect()
}

pub fn upsample_forward<T: Elem>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let ty = upsample_taps::<T>(h, f);
    let tx = upsample_taps::<T>(w, f);
    let mut out = vec![T::ZERO; planes * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |p, o| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let (r0, r1) = (&src[a.i0 * w..][..w], &src[a.i1 * w..][..w]);
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.i0] + b.t * (r0[b.i1] - r0[b.i0]);
                let bot = r1[b.i0] + b.t * (r1[b.i1] - r1[b.i0]);
                o[oy * ow + ox] = top + a.t * (bot - top);
            }
        }
    });
    out
}

pub fn upsample_backward<T: Elem>(dy: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let ty = upsample_taps::<T>(h, f);
    let tx = upsample_taps::<T>(w, f);
    let mut dx = vec![T::ZERO; planes * h * w];
    par::for_each_chunk(&mut dx, h * w, |p, d| {
        let g = &dy[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let (top, bot) = (v * (T::ONE - a.t), v * a.t);
                d[a.i0 * w + b.i0] += top * (T::ONE - b.t);
                d[a.i0 * w + b.i1] += top * b.t;
                d[a.i1 * w + b.i0] += bot * (T::ONE - b.t);
                d[a.i1 * w + b.i1] += bot * b.t;
            }
        }
    });
    dx
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Returns the output and the within-plane index of each selected input,
/// taking the first maximum in row-major order on ties.
pub fn maxpool2_forward<T: Elem>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::ZERO; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    par::for_each_chunk2(&mut out, &mut arg, oh * ow, |p, o, a| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = 2 * oy * w + 2 * ox;
                for idx in [best + 1, best + w, best + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                o[oy * ow + ox] = src[best];
                a[oy * ow + ox] = best as u32;
            }
        }
    });
    (out, arg)
}

pub fn maxpool2_backward<T: Elem>(
    dy: &[T],
    arg: &[u32],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let per = (h / 2) * (w / 2);
    let mut dx = vec![T::ZERO; planes * h * w];
    par::for_each_chunk(&mut dx, h * w, |p, d| {
        for i in p * per..(p + 1) * per {
            d[arg[i] as usize] += dy[i];
        }
    });
    dx
}

/// Softmax over the middle axis of an `outer x len x inner` view.
pub fn softmax_forward<T: Elem>(x: &[T], len: usize, inner: usize) -> Vec<T> {
    let mut out = x.to_vec();
    par::for_each_chunk(&mut out, len * inner, |_, block| {
        for j in 0..inner {
            let m = (0..len).fold(block[j], |m, i| m.max(block[i * inner + j]));
            let mut z = T::ZERO;
            for i in 0..len {
                let e = (block[i * inner + j] - m).exp();
                block[i * inner + j] = e;
                z += e;
            }
            for i in 0..len {
                block[i * inner + j] = block[i * inner + j] / z;
            }
        }
    });
    out
}

pub fn softmax_backward<T: Elem>(y: &[T], dy: &[T], len: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; y.len()];
    par::for_each_chunk(&mut dx, len * inner, |b, d| {
        let base = b * len * inner;
        for j in 0..inner {
            let dot: T = (0..len)
                .map(|i| y[base + i * inner + j] * dy[base + i * inner + j])
                .sum();
            for i in 0..len {
                let k = i * inner + j;
                d[k] = y[base + k] * (dy[base + k] - dot);
            }
        }
    });
    dx
}
