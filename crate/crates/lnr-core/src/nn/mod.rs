//! Minimal hand-rolled neural network stack: im2col convolutions,
//! per-sample batch normalization, activations, and Adam.
//!
//! Everything is generic over `f32`/`f64`; training runs in single
//! precision while gradient tests instantiate double precision. All
//! reductions run in a fixed serial order, so results are reproducible
//! bit-for-bit for a given seed.

pub mod conv;
pub mod norm;
pub mod ops;

use std::collections::HashMap;

use ndarray::{ArrayD, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use conv::{Conv2d, ConvT2d};
pub use norm::{BatchNorm2d, InstanceNorm2d};

/// A learnable array with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Tensor<F: NdFloat> {
    pub v: ArrayD<F>,
    pub g: ArrayD<F>,
}

impl<F: NdFloat> Tensor<F> {
    pub fn new(v: ArrayD<F>) -> Self {
        let g = ArrayD::zeros(v.raw_dim());
        Self { v, g }
    }

    pub fn zeros<Sh: ndarray::ShapeBuilder>(shape: Sh) -> Self
    where
        ArrayD<F>: From<ndarray::Array<F, Sh::Dim>>,
    {
        Self::new(ndarray::Array::zeros(shape).into())
    }

    /// Fills with N(0, std²) samples; sampling happens in f64 so the same
    /// seed yields the same weights for every float type.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0f64, std).unwrap();
        let v = ArrayD::from_shape_simple_fn(shape.to_vec(), || {
            F::from(dist.sample(rng)).unwrap()
        });
        Self::new(v)
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(F::zero());
    }
}

/// Named mutable references to every parameter of a module, in a fixed
/// traversal order. The order defines optimizer-update and checkpoint
/// serialization order.
pub type ParamRefs<'a, F> = Vec<(String, &'a mut Tensor<F>)>;

/// Adam optimizer with per-parameter first/second moment state keyed by
/// parameter name.
#[derive(Debug, Clone)]
pub struct Adam<F: NdFloat> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub step: u64,
    pub state: HashMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(lr: F) -> Self {
        Self {
            lr,
            beta1: F::from(0.9).unwrap(),
            beta2: F::from(0.999).unwrap(),
            eps: F::from(1e-8).unwrap(),
            step: 0,
            state: HashMap::new(),
        }
    }

    /// Applies one update to every parameter, consuming the accumulated
    /// gradients (they are zeroed afterwards).
    pub fn step(&mut self, params: ParamRefs<'_, F>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = F::one() - self.beta1.powi(t);
        let bc2 = F::one() - self.beta2.powi(t);
        for (name, p) in params {
            let (m, v) = self
                .state
                .entry(name)
                .or_insert_with(|| (ArrayD::zeros(p.v.raw_dim()), ArrayD::zeros(p.v.raw_dim())));
            ndarray::Zip::from(&mut p.v)
                .and(&p.g)
                .and(m)
                .and(v)
                .for_each(|pv, &g, m, v| {
                    *m = self.beta1 * *m + (F::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (F::one() - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *pv = *pv - self.lr * mh / (vh.sqrt() + self.eps);
                });
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_minimizes_quadratic() {
        // f(p) = Σ (p − target)², gradient 2(p − target).
        let target = 3.0f32;
        let mut p = Tensor::new(ArrayD::from_elem(vec![4], 0.0f32));
        let mut opt = Adam::new(0.05f32);
        for _ in 0..2000 {
            p.g = p.v.mapv(|v| 2.0 * (v - target));
            opt.step(vec![("p".into(), &mut p)]);
        }
        assert!(p.v.iter().all(|&v| (v - target).abs() < 1e-3));
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // With bias correction, the very first step has magnitude ≈ lr.
        let mut p = Tensor::new(ArrayD::from_elem(vec![1], 1.0f64));
        let mut opt = Adam::new(0.01f64);
        p.g.fill(42.0);
        opt.step(vec![("p".into(), &mut p)]);
        assert!((p.v[[0]] - (1.0 - 0.01)).abs() < 1e-6);
        assert_eq!(p.g[[0]], 0.0);
    }

    #[test]
    fn layer_chain_grads_match_fd() {
        // conv(s2) → batchnorm → leaky → convT → tanh01, the building blocks
        // of one encoder/decoder rung, differentiated end to end.
        use ndarray::{Array4, Ix4};

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let conv = conv::Conv2d::<f64>::new(2, 3, 2, &mut rng);
        let bn = norm::BatchNorm2d::<f64>::new(3);
        let up = conv::ConvT2d::<f64>::new(3, 2, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 2, 6, 6], 1.0, &mut rng)
            .v
            .into_dimensionality::<Ix4>()
            .unwrap();
        let lw = Tensor::<f64>::randn(&[1, 2, 6, 6], 1.0, &mut rng)
            .v
            .into_dimensionality::<Ix4>()
            .unwrap();

        let run = |xx: &Array4<f64>| {
            let (h1, _) = conv.forward(xx);
            let (mut h2, _) = bn.clone().forward_train(&h1);
            ops::leaky_relu(&mut h2, 0.2);
            let (mut h3, _) = up.forward(&h2);
            ops::tanh01(&mut h3);
            (h3.clone() * &lw).sum()
        };

        let mut conv_b = conv.clone();
        let mut bn_b = bn.clone();
        let mut up_b = up.clone();
        let (h1, c1) = conv_b.forward(&x);
        let (mut h2, c2) = bn_b.forward_train(&h1);
        ops::leaky_relu(&mut h2, 0.2);
        let (mut h3, c3) = up_b.forward(&h2);
        ops::tanh01(&mut h3);
        let mut d3 = lw.clone();
        ops::tanh01_backward(&mut d3, &h3);
        let mut d2 = up_b.backward(&c3, &d3);
        ops::leaky_relu_backward(&mut d2, &h2, 0.2);
        let d1 = bn_b.backward(&c2, &d2);
        let dx = conv_b.backward(&c1, &d1);

        let fd_x = crate::fd::central_grad(
            |xd| run(&xd.view().into_dimensionality::<Ix4>().unwrap().to_owned()),
            &x.into_dyn(),
            1e-5,
        );
        assert!(crate::fd::max_rel_err(&dx.into_dyn(), &fd_x) < 1e-6);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a: Tensor<f32> = Tensor::randn(&[3, 5], 0.01, &mut ChaCha8Rng::seed_from_u64(4));
        let b: Tensor<f32> = Tensor::randn(&[3, 5], 0.01, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a.v, b.v);
        let c: Tensor<f64> = Tensor::randn(&[3, 5], 0.01, &mut ChaCha8Rng::seed_from_u64(4));
        for (x, y) in a.v.iter().zip(c.v.iter()) {
            assert!((*x as f64 - y).abs() < 1e-7);
        }
    }
}
