//! Convolutions via im2col + GEMM, plus the transposed variant.
//!
//! Layout is `[B, C, H, W]` throughout. Padding is asymmetric
//! `(top, bottom, left, right)` so 4×4 stride-1 layers can preserve shape.

use ndarray::{Array1, Array2, Array4, NdFloat};
use rand::Rng;

use super::Tensor;

/// Gathers conv patches: output `[B·OH·OW, Cin·kh·kw]`, zero-filled outside.
pub fn im2col<F: NdFloat>(
    x: &Array4<F>,
    k: (usize, usize),
    stride: usize,
    pad: (usize, usize, usize, usize),
    out_hw: (usize, usize),
) -> Array2<F> {
    let (bs, cin, h, w) = x.dim();
    let (kh, kw) = k;
    let (pt, _, pl, _) = pad;
    let (oh, ow) = out_hw;
    let mut cols = Array2::<F>::zeros((bs * oh * ow, cin * kh * kw));
    let xs = x.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    let kdim = cin * kh * kw;
    for b in 0..bs {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * kdim;
                for ci in 0..cin {
                    let plane = (b * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        let dst = row + (ci * kh + ky) * kw;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = plane + iy as usize * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix >= 0 && ix < w as isize {
                                cs[dst + kx] = xs[src + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch gradients back to input layout (inverse of [`im2col`]).
pub fn col2im<F: NdFloat>(
    cols: &Array2<F>,
    x_dim: (usize, usize, usize, usize),
    k: (usize, usize),
    stride: usize,
    pad: (usize, usize, usize, usize),
    out_hw: (usize, usize),
) -> Array4<F> {
    let (bs, cin, h, w) = x_dim;
    let (kh, kw) = k;
    let (pt, _, pl, _) = pad;
    let (oh, ow) = out_hw;
    let mut x = Array4::<F>::zeros(x_dim);
    let xs = x.as_slice_mut().unwrap();
    let cs = cols.as_slice().unwrap();
    let kdim = cin * kh * kw;
    for b in 0..bs {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * kdim;
                for ci in 0..cin {
                    let plane = (b * cin + ci) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = row + (ci * kh + ky) * kw;
                        let dst = plane + iy as usize * w;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pl as isize;
                            if ix >= 0 && ix < w as isize {
                                xs[dst + ix as usize] = xs[dst + ix as usize] + cs[src + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[B, C, H, W]` → `[B·H·W, C]` (pixels as GEMM rows).
pub fn nchw_to_rows<F: NdFloat>(x: &Array4<F>) -> Array2<F> {
    let (bs, c, h, w) = x.dim();
    let hw = h * w;
    let mut out = Array2::<F>::zeros((bs * hw, c));
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for b in 0..bs {
        for ci in 0..c {
            let src = (b * c + ci) * hw;
            let dst = b * hw * c + ci;
            for p in 0..hw {
                os[dst + p * c] = xs[src + p];
            }
        }
    }
    out
}

/// Inverse of [`nchw_to_rows`].
pub fn rows_to_nchw<F: NdFloat>(rows: &Array2<F>, dim: (usize, usize, usize, usize)) -> Array4<F> {
    let (bs, c, h, w) = dim;
    let hw = h * w;
    let mut out = Array4::<F>::zeros(dim);
    let rs = rows.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for b in 0..bs {
        for ci in 0..c {
            let dst = (b * c + ci) * hw;
            let src = b * hw * c + ci;
            for p in 0..hw {
                os[dst + p] = rs[src + p * c];
            }
        }
    }
    out
}

/// 2D convolution; weight shape `[Cout, Cin, kh, kw]`.
#[derive(Debug, Clone)]
pub struct Conv2d<F: NdFloat> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
    pub k: (usize, usize),
    pub stride: usize,
    pub pad: (usize, usize, usize, usize),
}

/// Saved forward state for the backward pass.
pub struct ConvCache<F: NdFloat> {
    cols: Array2<F>,
    x_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: NdFloat> Conv2d<F> {
    /// Stride-2 4×4 with symmetric padding 1 (halves each spatial dim) or
    /// stride-1 4×4 with padding (1,2,1,2) (shape-preserving).
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let pad = if stride == 2 { (1, 1, 1, 1) } else { (1, 2, 1, 2) };
        Self {
            w: Tensor::randn(&[cout, cin, 4, 4], 0.02, rng),
            b: Tensor::zeros(vec![cout]),
            k: (4, 4),
            stride,
            pad,
        }
    }

    /// General constructor for 3×3 shape-preserving convs (refiner).
    pub fn new3(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::randn(&[cout, cin, 3, 3], 0.02, rng),
            b: Tensor::zeros(vec![cout]),
            k: (3, 3),
            stride: 1,
            pad: (1, 1, 1, 1),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (pt, pb, pl, pr) = self.pad;
        (
            (h + pt + pb - self.k.0) / self.stride + 1,
            (w + pl + pr - self.k.1) / self.stride + 1,
        )
    }

    fn wmat(&self) -> Array2<F> {
        let sh = self.w.v.shape();
        let (cout, kdim) = (sh[0], sh[1] * sh[2] * sh[3]);
        self.w
            .v
            .view()
            .into_shape_with_order((cout, kdim))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (bs, _, h, w) = x.dim();
        let out_hw = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad, out_hw);
        let mut y2 = cols.dot(&self.wmat().t());
        let bias = self.b.v.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y2 += &bias;
        let cout = self.b.v.len();
        let y = rows_to_nchw(&y2, (bs, cout, out_hw.0, out_hw.1));
        (
            y,
            ConvCache {
                cols,
                x_dim: x.dim(),
                out_hw,
            },
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &Array4<F>) -> Array4<F> {
        let dy2 = nchw_to_rows(dy);
        let db = dy2.sum_axis(ndarray::Axis(0));
        let dwmat = dy2.t().dot(&cache.cols);
        let dcols = dy2.dot(&self.wmat());
        {
            let mut gw = self
                .w
                .g
                .view_mut()
                .into_shape_with_order(dwmat.dim())
                .unwrap();
            gw += &dwmat;
        }
        let mut gb = self.b.g.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
        gb += &db;
        col2im(&dcols, cache.x_dim, self.k, self.stride, self.pad, cache.out_hw)
    }
}

/// Transposed 2D convolution; weight shape `[Cin, Cout, kh, kw]`.
/// Fixed 4×4 kernel, stride 2, padding 1: exactly doubles spatial dims.
#[derive(Debug, Clone)]
pub struct ConvT2d<F: NdFloat> {
    pub w: Tensor<F>,
    pub b: Tensor<F>,
}

pub struct ConvTCache<F: NdFloat> {
    xrows: Array2<F>,
    x_dim: (usize, usize, usize, usize),
}

impl<F: NdFloat> ConvT2d<F> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Tensor::randn(&[cin, cout, 4, 4], 0.02, rng),
            b: Tensor::zeros(vec![cout]),
        }
    }

    fn wmat(&self) -> Array2<F> {
        let sh = self.w.v.shape();
        self.w
            .v
            .view()
            .into_shape_with_order((sh[0], sh[1] * sh[2] * sh[3]))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvTCache<F>) {
        let (bs, _cin, ih, iw) = x.dim();
        let cout = self.w.v.shape()[1];
        let (oh, ow) = (ih * 2, iw * 2);
        let xrows = nchw_to_rows(x);
        let p = xrows.dot(&self.wmat()); // [B·IH·IW, Cout·16]
        let mut y = Array4::<F>::zeros((bs, cout, oh, ow));
        let ys = y.as_slice_mut().unwrap();
        let ps = p.as_slice().unwrap();
        for b in 0..bs {
            for iy in 0..ih {
                for ix in 0..iw {
                    let row = ((b * ih + iy) * iw + ix) * cout * 16;
                    for co in 0..cout {
                        let plane = (b * cout + co) * oh * ow;
                        let cell = row + co * 16;
                        for ky in 0..4usize {
                            let oy = (iy * 2 + ky) as isize - 1;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let dst = plane + oy as usize * ow;
                            let src = cell + ky * 4;
                            for kx in 0..4usize {
                                let ox = (ix * 2 + kx) as isize - 1;
                                if ox >= 0 && ox < ow as isize {
                                    ys[dst + ox as usize] =
                                        ys[dst + ox as usize] + ps[src + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (co, &bv) in self
            .b
            .v
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .iter()
            .enumerate()
        {
            for b in 0..bs {
                let plane = (b * cout + co) * oh * ow;
                for v in &mut ys[plane..plane + oh * ow] {
                    *v = *v + bv;
                }
            }
        }
        (y, ConvTCache { xrows, x_dim: x.dim() })
    }

    pub fn backward(&mut self, cache: &ConvTCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (bs, cout, oh, ow) = dy.dim();
        let (_, _cin, ih, iw) = cache.x_dim;
        // Gather dP from dy at the scatter positions of the forward pass.
        let mut dp = Array2::<F>::zeros((bs * ih * iw, cout * 16));
        {
            let dps = dp.as_slice_mut().unwrap();
            let dys = dy.as_slice().unwrap();
            for b in 0..bs {
                for iy in 0..ih {
                    for ix in 0..iw {
                        let row = ((b * ih + iy) * iw + ix) * cout * 16;
                        for co in 0..cout {
                            let plane = (b * cout + co) * oh * ow;
                            let cell = row + co * 16;
                            for ky in 0..4usize {
                                let oy = (iy * 2 + ky) as isize - 1;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let src = plane + oy as usize * ow;
                                let dst = cell + ky * 4;
                                for kx in 0..4usize {
                                    let ox = (ix * 2 + kx) as isize - 1;
                                    if ox >= 0 && ox < ow as isize {
                                        dps[dst + kx] = dys[src + ox as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let dwmat = cache.xrows.t().dot(&dp);
        {
            let mut gw = self
                .w
                .g
                .view_mut()
                .into_shape_with_order(dwmat.dim())
                .unwrap();
            gw += &dwmat;
        }
        let mut db = Array1::<F>::zeros(cout);
        for b in 0..bs {
            for co in 0..cout {
                let plane = dy.index_axis(ndarray::Axis(0), b);
                let plane = plane.index_axis(ndarray::Axis(0), co);
                db[co] = db[co] + plane.sum();
            }
        }
        let mut gb = self.b.g.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
        gb += &db;
        let dxrows = dp.dot(&self.wmat().t());
        rows_to_nchw(&dxrows, cache.x_dim)
    }
}
