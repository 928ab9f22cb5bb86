//! Training objectives: reconstruction, trimap-bootstrap mask loss,
//! sparsity regularizer with the smooth-L0 penalty, and the epoch schedule.
//!
//! Reconstruction and regularizer use per-pixel-per-channel means so their
//! magnitudes are resolution-independent; the mask distance is already
//! self-normalizing. Everything is generic over `f32`/`f64` so gradient
//! tests can run in double precision.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, NdFloat};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Epoch-dependent loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Mask-loss weight γ_m.
    pub gamma_m: f64,
    /// L1 mix γ inside the regularizer.
    pub gamma: f64,
    /// Regularizer weight β.
    pub beta: f64,
}

/// Weight schedule over epochs (1-based). `e_b` is the bootstrap epoch, or
/// `None` while the mask loss has not yet dropped below its threshold; unset
/// behaves as `e ≤ e_b`.
pub fn schedule(e: usize, e_b: Option<usize>) -> LossWeights {
    let gamma_m = match e_b {
        None => 50.0,
        Some(eb) if e <= eb => 50.0,
        Some(eb) if e <= 2 * eb => 5.0,
        Some(_) => 0.0,
    };
    let gamma = if e <= 200 { 2.0 } else { 0.0 };
    LossWeights {
        gamma_m,
        gamma,
        beta: 0.005,
    }
}

/// Mean absolute difference over pixels and channels of one frame.
pub fn recon_loss_frame<F: NdFloat>(frame: ArrayView3<F>, composite: ArrayView3<F>) -> F {
    debug_assert_eq!(frame.shape(), composite.shape());
    let n = F::from(frame.len()).unwrap();
    let mut acc = F::zero();
    for (&a, &b) in frame.iter().zip(composite.iter()) {
        acc = acc + (a - b).abs();
    }
    acc / n
}

/// Gradient of [`recon_loss_frame`] with respect to the composite.
pub fn recon_grad_frame<F: NdFloat>(frame: ArrayView3<F>, composite: ArrayView3<F>) -> Array3<F> {
    let n = F::from(frame.len()).unwrap();
    let mut g = Array3::<F>::zeros(composite.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(&frame)
        .and(&composite)
        .for_each(|g, &f, &c| {
            *g = if c > f {
                F::one() / n
            } else if c < f {
                -F::one() / n
            } else {
                F::zero()
            }
        });
    g
}

/// Mean over frames of the per-frame reconstruction loss.
///
/// # Errors
/// [`CoreError::ShapeMismatch`] when the sequences differ in length or any
/// pair of frames differs in shape.
pub fn recon_loss<F: NdFloat>(frames: &[Array3<F>], composites: &[Array3<F>]) -> Result<F> {
    if frames.len() != composites.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} frames vs {} composites",
            frames.len(),
            composites.len()
        )));
    }
    let mut acc = F::zero();
    for (f, c) in frames.iter().zip(composites) {
        if f.shape() != c.shape() {
            return Err(CoreError::ShapeMismatch(format!(
                "frame {:?} vs composite {:?}",
                f.shape(),
                c.shape()
            )));
        }
        acc = acc + recon_loss_frame(f.view(), c.view());
    }
    Ok(acc / F::from(frames.len()).unwrap())
}

/// Balanced trimap distance `D(m, α)`: misses over the positive region plus
/// false alarms over the negative region, each normalized to [0, 0.5];
/// uncertain pixels (m = 0.5) are ignored. Empty regions contribute 0.
pub fn mask_distance<F: NdFloat>(m: ArrayView2<F>, alpha: ArrayView2<F>) -> F {
    debug_assert_eq!(m.shape(), alpha.shape());
    let half = F::from(0.5).unwrap();
    let mut pos = F::zero();
    let mut pos_n = F::zero();
    let mut neg = F::zero();
    let mut neg_n = F::zero();
    for (&mv, &av) in m.iter().zip(alpha.iter()) {
        if mv > half {
            pos = pos + (F::one() - av);
            pos_n = pos_n + F::one();
        } else if mv < half {
            neg = neg + av;
            neg_n = neg_n + F::one();
        }
    }
    let two = F::from(2.0).unwrap();
    let mut d = F::zero();
    if pos_n > F::zero() {
        d = d + pos / (two * pos_n);
    }
    if neg_n > F::zero() {
        d = d + neg / (two * neg_n);
    }
    d
}

/// Gradient of [`mask_distance`] with respect to `alpha`.
pub fn mask_distance_grad<F: NdFloat>(m: ArrayView2<F>, alpha: ArrayView2<F>) -> Array2<F> {
    debug_assert_eq!(m.shape(), alpha.shape());
    let half = F::from(0.5).unwrap();
    let mut pos_n = F::zero();
    let mut neg_n = F::zero();
    for &mv in m.iter() {
        if mv > half {
            pos_n = pos_n + F::one();
        } else if mv < half {
            neg_n = neg_n + F::one();
        }
    }
    let two = F::from(2.0).unwrap();
    let mut g = Array2::<F>::zeros((m.nrows(), m.ncols()));
    ndarray::Zip::from(&mut g).and(&m).for_each(|g, &mv| {
        if mv > half && pos_n > F::zero() {
            *g = -F::one() / (two * pos_n);
        } else if mv < half && neg_n > F::zero() {
            *g = F::one() / (two * neg_n);
        }
    });
    g
}

/// `(1/K)(1/N) Σ_t Σ_i D(m_t^i, α_t^i)` over per-frame, per-layer pairs.
pub fn mask_loss<F: NdFloat>(trimaps: &[Vec<Array2<F>>], alphas: &[Vec<Array2<F>>]) -> F {
    let mut acc = F::zero();
    let mut count = 0usize;
    for (mt, at) in trimaps.iter().zip(alphas) {
        for (m, a) in mt.iter().zip(at) {
            acc = acc + mask_distance(m.view(), a.view());
            count += 1;
        }
    }
    if count == 0 {
        F::zero()
    } else {
        acc / F::from(count).unwrap()
    }
}

/// Smooth-L0 penalty `Φ0(x) = 2·sigmoid(5x) − 1`.
pub fn phi0<F: NdFloat>(x: F) -> F {
    let two = F::from(2.0).unwrap();
    let five = F::from(5.0).unwrap();
    two / (F::one() + (-five * x).exp()) - F::one()
}

/// Derivative of [`phi0`].
pub fn phi0_prime<F: NdFloat>(x: F) -> F {
    let five = F::from(5.0).unwrap();
    let ten = F::from(10.0).unwrap();
    let s = F::one() / (F::one() + (-five * x).exp());
    ten * s * (F::one() - s)
}

/// Per-layer regularizer term `γ·mean(α) + mean(Φ0(α))`.
pub fn reg_term<F: NdFloat>(alpha: ArrayView2<F>, gamma: F) -> F {
    let n = F::from(alpha.len()).unwrap();
    let mut l1 = F::zero();
    let mut l0 = F::zero();
    for &a in alpha.iter() {
        l1 = l1 + a;
        l0 = l0 + phi0(a);
    }
    gamma * l1 / n + l0 / n
}

/// Gradient of [`reg_term`] with respect to `alpha`.
pub fn reg_grad<F: NdFloat>(alpha: ArrayView2<F>, gamma: F) -> Array2<F> {
    let n = F::from(alpha.len()).unwrap();
    alpha.mapv(|a| (gamma + phi0_prime(a)) / n)
}

/// `(1/K)(1/N) Σ_t Σ_i [γ·mean(α) + mean(Φ0(α))]`.
pub fn reg_loss<F: NdFloat>(alphas: &[Vec<Array2<F>>], gamma: F) -> F {
    let mut acc = F::zero();
    let mut count = 0usize;
    for at in alphas {
        for a in at {
            acc = acc + reg_term(a.view(), gamma);
            count += 1;
        }
    }
    if count == 0 {
        F::zero()
    } else {
        acc / F::from(count).unwrap()
    }
}

/// `E_recon + γ_m·E_mask + β·E_reg`.
pub fn total_loss<F: NdFloat>(recon: F, mask: F, reg: F, w: &LossWeights) -> F {
    recon + F::from(w.gamma_m).unwrap() * mask + F::from(w.beta).unwrap() * reg
}
