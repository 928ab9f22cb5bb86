//! Normalization layers.
//!
//! [`BatchNorm2d`] normalizes each `(sample, channel)` plane over its own
//! spatial statistics during training — per-layer renderer passes run as
//! rows of one batch, and per-sample statistics keep those passes
//! independent of how they are batched. Running estimates accumulate per
//! channel in a fixed sample order and are the (frozen) statistics used in
//! evaluation mode. [`InstanceNorm2d`] is the same normalization without
//! running state; evaluation equals training.

use ndarray::{Array2, Array4, NdFloat};

use super::Tensor;

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: NdFloat> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

pub struct NormCache<F: NdFloat> {
    xhat: Array4<F>,
    inv_std: Array2<F>,
}

fn plane_stats<F: NdFloat>(plane: &[F]) -> (F, F) {
    let n = F::from(plane.len()).unwrap();
    let mut mean = F::zero();
    for &v in plane {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = F::zero();
    for &v in plane {
        let d = v - mean;
        var = var + d * d;
    }
    (mean, var / n)
}

fn normalize_forward<F: NdFloat>(
    x: &Array4<F>,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    mut on_stats: impl FnMut(usize, F, F),
) -> (Array4<F>, NormCache<F>) {
    let (bs, c, h, w) = x.dim();
    let hw = h * w;
    let mut y = x.clone();
    let mut xhat = Array4::<F>::zeros(x.raw_dim());
    let mut inv_std = Array2::<F>::zeros((bs, c));
    let eps = F::from(EPS).unwrap();
    let ys = y.as_slice_mut().unwrap();
    let xh = xhat.as_slice_mut().unwrap();
    let g = gamma.v.as_slice().unwrap();
    let b = beta.v.as_slice().unwrap();
    for bi in 0..bs {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            let (mean, var) = plane_stats(&ys[off..off + hw]);
            on_stats(ci, mean, var);
            let istd = F::one() / (var + eps).sqrt();
            inv_std[[bi, ci]] = istd;
            for p in off..off + hw {
                let xv = (ys[p] - mean) * istd;
                xh[p] = xv;
                ys[p] = g[ci] * xv + b[ci];
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

fn normalize_backward<F: NdFloat>(
    gamma: &mut Tensor<F>,
    beta: &mut Tensor<F>,
    cache: &NormCache<F>,
    dy: &Array4<F>,
) -> Array4<F> {
    let (bs, c, h, w) = dy.dim();
    let hw = h * w;
    let m = F::from(hw).unwrap();
    let mut dx = Array4::<F>::zeros(dy.raw_dim());
    let dys = dy.as_slice().unwrap();
    let xh = cache.xhat.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    let g = gamma.v.as_slice().unwrap();
    let dg = gamma.g.as_slice_mut().unwrap();
    let db = beta.g.as_slice_mut().unwrap();
    for bi in 0..bs {
        for ci in 0..c {
            let off = (bi * c + ci) * hw;
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for p in off..off + hw {
                sum_dy = sum_dy + dys[p];
                sum_dy_xhat = sum_dy_xhat + dys[p] * xh[p];
            }
            dg[ci] = dg[ci] + sum_dy_xhat;
            db[ci] = db[ci] + sum_dy;
            let scale = g[ci] * cache.inv_std[[bi, ci]] / m;
            for p in off..off + hw {
                dxs[p] = scale * (m * dys[p] - sum_dy - xh[p] * sum_dy_xhat);
            }
        }
    }
    dx
}

impl<F: NdFloat> BatchNorm2d<F> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::new(ndarray::ArrayD::from_elem(vec![c], F::one())),
            beta: Tensor::zeros(vec![c]),
            running_mean: vec![F::zero(); c],
            running_var: vec![F::one(); c],
        }
    }

    /// Training forward: per-plane statistics, running estimates updated
    /// sample by sample in ascending order.
    pub fn forward_train(&mut self, x: &Array4<F>) -> (Array4<F>, NormCache<F>) {
        let hw = x.dim().2 * x.dim().3;
        let mom = F::from(MOMENTUM).unwrap();
        let unbias = if hw > 1 {
            F::from(hw).unwrap() / F::from(hw - 1).unwrap()
        } else {
            F::one()
        };
        let rm = &mut self.running_mean;
        let rv = &mut self.running_var;
        normalize_forward(x, &self.gamma, &self.beta, |ci, mean, var| {
            rm[ci] = (F::one() - mom) * rm[ci] + mom * mean;
            rv[ci] = (F::one() - mom) * rv[ci] + mom * var * unbias;
        })
    }

    /// Evaluation forward: frozen running statistics, no cache.
    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let (bs, c, h, w) = x.dim();
        let hw = h * w;
        let mut y = x.clone();
        let ys = y.as_slice_mut().unwrap();
        let g = self.gamma.v.as_slice().unwrap();
        let b = self.beta.v.as_slice().unwrap();
        let eps = F::from(EPS).unwrap();
        for bi in 0..bs {
            for ci in 0..c {
                let istd = F::one() / (self.running_var[ci] + eps).sqrt();
                let mean = self.running_mean[ci];
                let off = (bi * c + ci) * hw;
                for p in off..off + hw {
                    ys[p] = g[ci] * (ys[p] - mean) * istd + b[ci];
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &NormCache<F>, dy: &Array4<F>) -> Array4<F> {
        normalize_backward(&mut self.gamma, &mut self.beta, cache, dy)
    }
}

#[derive(Debug, Clone)]
pub struct InstanceNorm2d<F: NdFloat> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

impl<F: NdFloat> InstanceNorm2d<F> {
    pub fn new(c: usize) -> Self {
        Self {
            gamma: Tensor::new(ndarray::ArrayD::from_elem(vec![c], F::one())),
            beta: Tensor::zeros(vec![c]),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, NormCache<F>) {
        normalize_forward(x, &self.gamma, &self.beta, |_, _, _| {})
    }

    pub fn backward(&mut self, cache: &NormCache<F>, dy: &Array4<F>) -> Array4<F> {
        normalize_backward(&mut self.gamma, &mut self.beta, cache, dy)
    }
}
