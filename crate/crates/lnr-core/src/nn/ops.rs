//! Elementwise activations and spatial plumbing (pad, crop, upsample,
//! channel concat/split). Activation backwards recompute masks from the
//! stored outputs, so no extra forward state is kept.

use ndarray::{Array4, NdFloat};

/// Leaky ReLU with the given negative slope.
pub fn leaky_relu<F: NdFloat>(x: &mut Array4<F>, slope: F) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { v * slope });
}

/// Backward through leaky ReLU given the *outputs* `y`.
pub fn leaky_relu_backward<F: NdFloat>(dy: &mut Array4<F>, y: &Array4<F>, slope: F) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = *d * slope;
        }
    });
}

pub fn relu<F: NdFloat>(x: &mut Array4<F>) {
    x.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
}

pub fn relu_backward<F: NdFloat>(dy: &mut Array4<F>, y: &Array4<F>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
}

/// `y = (tanh(x) + 1)/2`, mapping to [0,1].
pub fn tanh01<F: NdFloat>(x: &mut Array4<F>) {
    let half = F::from(0.5).unwrap();
    x.mapv_inplace(|v| (v.tanh() + F::one()) * half);
}

/// Backward through [`tanh01`] given the outputs `y`:
/// dx = dy · (1 − tanh²) / 2 with tanh = 2y − 1.
pub fn tanh01_backward<F: NdFloat>(dy: &mut Array4<F>, y: &Array4<F>) {
    let half = F::from(0.5).unwrap();
    let two = F::from(2.0).unwrap();
    ndarray::Zip::from(dy).and(y).for_each(|d, &yv| {
        let t = two * yv - F::one();
        *d = *d * (F::one() - t * t) * half;
    });
}

/// Replicate-pads the bottom/right edges so both spatial dims become
/// multiples of `multiple`. Returns the padded array and the original dims.
pub fn pad_to_multiple<F: NdFloat>(x: &Array4<F>, multiple: usize) -> (Array4<F>, (usize, usize)) {
    let (bs, c, h, w) = x.dim();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return (x.clone(), (h, w));
    }
    let mut y = Array4::<F>::zeros((bs, c, ph, pw));
    for b in 0..bs {
        for ci in 0..c {
            for yy in 0..ph {
                let sy = yy.min(h - 1);
                for xx in 0..pw {
                    y[[b, ci, yy, xx]] = x[[b, ci, sy, xx.min(w - 1)]];
                }
            }
        }
    }
    (y, (h, w))
}

/// Crops back to the original dims recorded by [`pad_to_multiple`].
pub fn crop_to<F: NdFloat>(x: &Array4<F>, hw: (usize, usize)) -> Array4<F> {
    let (bs, c, _, _) = x.dim();
    x.slice(ndarray::s![0..bs, 0..c, 0..hw.0, 0..hw.1]).to_owned()
}

/// Folds gradients of a padded array back onto the unpadded input
/// (replicated cells accumulate onto their source edge pixel).
pub fn pad_backward<F: NdFloat>(d_padded: &Array4<F>, hw: (usize, usize)) -> Array4<F> {
    let (bs, c, ph, pw) = d_padded.dim();
    let (h, w) = hw;
    let mut dx = Array4::<F>::zeros((bs, c, h, w));
    for b in 0..bs {
        for ci in 0..c {
            for yy in 0..ph {
                let sy = yy.min(h - 1);
                for xx in 0..pw {
                    let sx = xx.min(w - 1);
                    dx[[b, ci, sy, sx]] = dx[[b, ci, sy, sx]] + d_padded[[b, ci, yy, xx]];
                }
            }
        }
    }
    dx
}

/// Embeds a gradient w.r.t. the cropped output into the padded shape
/// (zeros outside the crop).
pub fn crop_backward<F: NdFloat>(dy: &Array4<F>, padded_hw: (usize, usize)) -> Array4<F> {
    let (bs, c, h, w) = dy.dim();
    let mut out = Array4::<F>::zeros((bs, c, padded_hw.0, padded_hw.1));
    out.slice_mut(ndarray::s![0..bs, 0..c, 0..h, 0..w]).assign(dy);
    out
}

/// Bilinear upsampling with corner alignment: output corners sample input
/// corners exactly.
pub fn bilinear_upsample<F: NdFloat>(x: &Array4<F>, factor: usize) -> Array4<F> {
    let (bs, c, h, w) = x.dim();
    let (oh, ow) = (h * factor, w * factor);
    let mut y = Array4::<F>::zeros((bs, c, oh, ow));
    let sy = if oh > 1 {
        (h - 1) as f64 / (oh - 1) as f64
    } else {
        0.0
    };
    let sx = if ow > 1 {
        (w - 1) as f64 / (ow - 1) as f64
    } else {
        0.0
    };
    for oy in 0..oh {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = F::from(fy - y0 as f64).unwrap();
        for ox in 0..ow {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = F::from(fx - x0 as f64).unwrap();
            for b in 0..bs {
                for ci in 0..c {
                    let tl = x[[b, ci, y0, x0]];
                    let tr = x[[b, ci, y0, x1]];
                    let bl = x[[b, ci, y1, x0]];
                    let br = x[[b, ci, y1, x1]];
                    let top = tl + (tr - tl) * wx;
                    let bot = bl + (br - bl) * wx;
                    y[[b, ci, oy, ox]] = top + (bot - top) * wy;
                }
            }
        }
    }
    y
}

/// Concatenates along the channel axis. Always standard layout, which
/// `ndarray::concatenate` does not guarantee for interior axes.
pub fn concat_channels<F: NdFloat>(parts: &[&Array4<F>]) -> Array4<F> {
    let (bs, _, h, w) = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Array4::<F>::zeros((bs, total, h, w));
    let mut start = 0;
    for p in parts {
        let c = p.dim().1;
        out.slice_mut(ndarray::s![.., start..start + c, .., ..])
            .assign(p);
        start += c;
    }
    out
}

/// Splits a channel-gradient back into per-part gradients with the given
/// channel counts.
pub fn split_channels<F: NdFloat>(d: &Array4<F>, counts: &[usize]) -> Vec<Array4<F>> {
    let mut out = Vec::with_capacity(counts.len());
    let mut start = 0;
    for &n in counts {
        out.push(
            d.slice(ndarray::s![.., start..start + n, .., ..])
                .to_owned(),
        );
        start += n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use ndarray::{ArrayD, Ix4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn4(dim: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f64> {
        super::super::Tensor::<f64>::randn(&[dim.0, dim.1, dim.2, dim.3], 1.0, rng)
            .v
            .into_dimensionality::<Ix4>()
            .unwrap()
    }

    fn as4(x: &ArrayD<f64>) -> Array4<f64> {
        x.view().into_dimensionality::<Ix4>().unwrap().to_owned()
    }

    #[test]
    fn activation_values_and_grads() {
        let xs = vec![-2.0, -0.5, 0.3, 1.7];
        let x = Array4::from_shape_vec((1, 1, 1, 4), xs).unwrap();

        let mut y = x.clone();
        leaky_relu(&mut y, 0.2);
        assert_eq!(y.as_slice().unwrap(), &[-0.4, -0.1, 0.3, 1.7]);
        let mut dy = Array4::<f64>::ones(x.dim());
        leaky_relu_backward(&mut dy, &y, 0.2);
        assert_eq!(dy.as_slice().unwrap(), &[0.2, 0.2, 1.0, 1.0]);

        let mut y = x.clone();
        relu(&mut y);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 0.3, 1.7]);
        let mut dy = Array4::<f64>::ones(x.dim());
        relu_backward(&mut dy, &y);
        assert_eq!(dy.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0]);

        let mut y = x.clone();
        tanh01(&mut y);
        for (yv, xv) in y.iter().zip(x.iter()) {
            assert!((yv - (xv.tanh() + 1.0) / 2.0).abs() < 1e-15);
            assert!(*yv > 0.0 && *yv < 1.0);
        }
        let mut dy = Array4::<f64>::ones(x.dim());
        tanh01_backward(&mut dy, &y);
        let fd_g = fd::central_grad(
            |xd| {
                let mut v = as4(xd);
                tanh01(&mut v);
                v.sum()
            },
            &x.clone().into_dyn(),
            1e-6,
        );
        assert!(fd::max_rel_err(&dy.into_dyn(), &fd_g) < 1e-8);
    }

    #[test]
    fn upsample_aligns_corners() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![0.0, 3.0, 6.0, 9.0]).unwrap();
        let y = bilinear_upsample(&x, 2);
        let want: [[f64; 4]; 4] = [
            [0.0, 1.0, 2.0, 3.0],
            [2.0, 3.0, 4.0, 5.0],
            [4.0, 5.0, 6.0, 7.0],
            [6.0, 7.0, 8.0, 9.0],
        ];
        for (r, row) in want.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((y[[0, 0, r, c]] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_is_exact_on_constants() {
        let x = Array4::from_elem((2, 3, 4, 5), 0.71f64);
        let y = bilinear_upsample(&x, 2);
        assert_eq!(y.dim(), (2, 3, 8, 10));
        assert!(y.iter().all(|&v| (v - 0.71).abs() < 1e-15));
    }

    #[test]
    fn pad_replicates_and_crop_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn4((1, 2, 5, 7), &mut rng);
        let (p, hw) = pad_to_multiple(&x, 4);
        assert_eq!(p.dim(), (1, 2, 8, 8));
        assert_eq!(hw, (5, 7));
        assert_eq!(p[[0, 1, 7, 7]], x[[0, 1, 4, 6]]);
        assert_eq!(p[[0, 0, 2, 7]], x[[0, 0, 2, 6]]);
        assert_eq!(crop_to(&p, hw), x);

        let (q, _) = pad_to_multiple(&x, 1);
        assert_eq!(q, x);
    }

    #[test]
    fn pad_backward_folds_replicated_cells() {
        let d = Array4::<f64>::ones((1, 1, 4, 4));
        let dx = pad_backward(&d, (2, 2));
        assert_eq!(dx[[0, 0, 0, 0]], 1.0);
        assert_eq!(dx[[0, 0, 0, 1]], 3.0);
        assert_eq!(dx[[0, 0, 1, 0]], 3.0);
        assert_eq!(dx[[0, 0, 1, 1]], 9.0);

        // And it is the exact adjoint of pad_to_multiple.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn4((1, 1, 3, 5), &mut rng);
        let lw = randn4((1, 1, 4, 8), &mut rng);
        let dx = pad_backward(&lw, (3, 5));
        let fd_g = fd::central_grad(
            |xd| (pad_to_multiple(&as4(xd), 4).0 * &lw).sum(),
            &x.into_dyn(),
            1e-5,
        );
        assert!(fd::max_rel_err(&dx.into_dyn(), &fd_g) < 1e-8);
    }

    #[test]
    fn crop_backward_zero_fills() {
        let dy = Array4::<f64>::ones((1, 1, 2, 3));
        let d = crop_backward(&dy, (4, 4));
        assert_eq!(d.dim(), (1, 1, 4, 4));
        assert_eq!(d.sum(), 6.0);
        assert_eq!(d[[0, 0, 3, 3]], 0.0);
    }

    #[test]
    fn concat_split_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn4((2, 3, 4, 4), &mut rng);
        let b = randn4((2, 1, 4, 4), &mut rng);
        let c = randn4((2, 5, 4, 4), &mut rng);
        let cat = concat_channels(&[&a, &b, &c]);
        assert_eq!(cat.dim(), (2, 9, 4, 4));
        let parts = split_channels(&cat, &[3, 1, 5]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert_eq!(parts[2], c);
    }
}
