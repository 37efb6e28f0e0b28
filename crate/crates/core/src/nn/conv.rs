//! 2-D convolution over NCHW batches, lowered to im2col + GEMM.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    /// Square kernel with the padding rule used throughout the crate:
    /// `(k - s + 1) / 2`, i.e. "same" for odd kernels at stride 1 and
    /// zero for patchifying kernels where `k == s`.
    pub fn square(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let pad = (kernel.saturating_sub(stride) + 1) / 2;
        ConvGeom {
            c_in,
            c_out,
            kh: kernel,
            kw: kernel,
            stride,
            pad_h: pad,
            pad_w: pad,
        }
    }

    /// Stride-1 convolution that preserves spatial dims (odd kernels).
    pub fn same(c_in: usize, c_out: usize, kh: usize, kw: usize) -> Self {
        ConvGeom {
            c_in,
            c_out,
            kh,
            kw,
            stride: 1,
            pad_h: kh / 2,
            pad_w: kw / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad_h).saturating_sub(self.kh) / self.stride + 1;
        let ow = (w + 2 * self.pad_w).saturating_sub(self.kw) / self.stride + 1;
        (oh, ow)
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.kh, self.kw]
    }

    pub fn weight_count(&self) -> usize {
        self.c_out * self.patch_len()
    }

    /// Multiply-accumulates for one image of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> usize {
        let (oh, ow) = self.out_hw(h, w);
        oh * ow * self.weight_count()
    }
}

/// Per-image column buffers kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<Vec<T>>,
    in_shape: [usize; 4],
}

fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, cols: &mut [T]) {
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize, dx: &mut [T]) {
    let p = oh * ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < w as isize {
                            line[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Result<[usize; 4]> {
    if x.shape().len() != 4 || x.dim(1) != g.c_in {
        return Err(Error::Shape(format!(
            "conv expects [N, {}, H, W], got {:?}",
            g.c_in,
            x.shape()
        )));
    }
    if w.shape() != g.weight_shape() {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not match geometry {:?}",
            w.shape(),
            g.weight_shape()
        )));
    }
    let s = x.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

/// `y = conv(x, w) + b` for `x: [N, C_in, H, W]`. Column buffers are
/// returned when `keep` is set.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    g: &ConvGeom,
    keep: bool,
) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
    let [n, _, h, wd] = check_input(x, w, g)?;
    let (oh, ow) = g.out_hw(h, wd);
    let p = oh * ow;
    let k = g.patch_len();
    let per_image: Vec<(Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cols = vec![T::zero(); k * p];
            im2col(x.outer(i), h, wd, g, oh, ow, &mut cols);
            let mut y = vec![T::zero(); g.c_out * p];
            if let Some(b) = b {
                for (o, row) in y.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v = b.data()[o]);
                }
            }
            let beta = if b.is_some() { T::one() } else { T::zero() };
            gemm(false, false, g.c_out, p, k, T::one(), w.data(), &cols, beta, &mut y);
            (y, cols)
        })
        .collect();
    let mut out = Vec::with_capacity(n * g.c_out * p);
    let mut cols_all = Vec::with_capacity(if keep { n } else { 0 });
    for (y, cols) in per_image {
        out.extend_from_slice(&y);
        if keep {
            cols_all.push(cols);
        }
    }
    let y = Tensor::from_vec(&[n, g.c_out, oh, ow], out)?;
    let cache = keep.then_some(ConvCache {
        cols: cols_all,
        in_shape: [n, g.c_in, h, wd],
    });
    Ok((y, cache))
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &ConvCache<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let [n, _, h, wd] = cache.in_shape;
    let (oh, ow) = g.out_hw(h, wd);
    let p = oh * ow;
    let k = g.patch_len();
    assert_eq!(dy.shape(), &[n, g.c_out, oh, ow], "conv backward: dy shape");

    let mut dw = Tensor::zeros(&g.weight_shape());
    let mut db = Tensor::zeros(&[g.c_out]);
    for i in 0..n {
        let dyi = dy.outer(i);
        gemm(false, true, g.c_out, k, p, T::one(), dyi, &cache.cols[i], T::one(), dw.data_mut());
        for (o, row) in dyi.chunks(p).enumerate() {
            db.data_mut()[o] += row.iter().copied().sum::<T>();
        }
    }

    let dx = need_dx.then(|| {
        let per_image: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut dcols = vec![T::zero(); k * p];
                gemm(true, false, k, p, g.c_out, T::one(), w.data(), dy.outer(i), T::zero(), &mut dcols);
                let mut dxi = vec![T::zero(); g.c_in * h * wd];
                col2im(&dcols, h, wd, g, oh, ow, &mut dxi);
                dxi
            })
            .collect();
        Tensor::from_vec(&[n, g.c_in, h, wd], per_image.concat()).unwrap()
    });
    ConvGrads { dx, dw, db }
}
