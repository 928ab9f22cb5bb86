//! Compositing math: the over operator, transmittance maps, and
//! high-frequency detail transfer.
//!
//! A [`LayerSet`] holds one opaque background plus N RGBA person layers for a
//! single frame. Orders list person layer indices (1-based) back to front.

use ndarray::{Array2, Array3, Zip};

use crate::error::{CoreError, Result};

/// One RGBA layer: straight (non-premultiplied) color in [0,1] plus opacity.
#[derive(Debug, Clone)]
pub struct Rgba {
    /// Color, shape `[3, H, W]`.
    pub color: Array3<f32>,
    /// Opacity, shape `[H, W]`.
    pub alpha: Array2<f32>,
}

impl Rgba {
    pub fn new(color: Array3<f32>, alpha: Array2<f32>) -> Self {
        assert_eq!(
            &color.shape()[1..],
            alpha.shape(),
            "color and alpha resolution must agree"
        );
        Self { color, alpha }
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.alpha.nrows(), self.alpha.ncols())
    }
}

/// Background layer plus N person layers for one frame.
///
/// The background is stored as plain RGB; its opacity is 1 by construction.
#[derive(Debug, Clone)]
pub struct LayerSet {
    /// Background color, shape `[3, H, W]`.
    pub background: Array3<f32>,
    /// Person layers; layer `i` (1-based) lives at `layers[i-1]`.
    pub layers: Vec<Rgba>,
}

impl LayerSet {
    pub fn new(background: Array3<f32>, layers: Vec<Rgba>) -> Self {
        let res = (background.shape()[1], background.shape()[2]);
        for l in &layers {
            assert_eq!(l.resolution(), res, "layer resolution must match background");
        }
        Self { background, layers }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.background.shape()[1], self.background.shape()[2])
    }
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n + 1];
    let ok = order.len() == n
        && order.iter().all(|&i| {
            let fresh = (1..=n).contains(&i) && !seen[i];
            if fresh {
                seen[i] = true;
            }
            fresh
        });
    if ok {
        Ok(())
    } else {
        Err(CoreError::NotPermutation {
            order: order.to_vec(),
            n,
        })
    }
}

/// Composites layers back to front over the background.
///
/// Returns the RGB composite and the composite alpha of the person layers,
/// `1 − Π_i (1 − α_i)`.
///
/// # Errors
/// [`CoreError::NotPermutation`] if `order` is not a permutation of `1..=N`.
pub fn over_composite(set: &LayerSet, order: &[usize]) -> Result<(Array3<f32>, Array2<f32>)> {
    check_order(order, set.n_layers())?;
    let mut out = set.background.clone();
    let (h, w) = set.resolution();
    let mut comp_alpha = Array2::<f32>::zeros((h, w));
    for &i in order {
        let layer = &set.layers[i - 1];
        for c in 0..3 {
            Zip::from(out.index_axis_mut(ndarray::Axis(0), c))
                .and(layer.color.index_axis(ndarray::Axis(0), c))
                .and(&layer.alpha)
                .for_each(|o, &col, &a| *o = col * a + *o * (1.0 - a));
        }
        Zip::from(&mut comp_alpha)
            .and(&layer.alpha)
            .for_each(|ca, &a| *ca = a + *ca * (1.0 - a));
    }
    Ok((out, comp_alpha))
}

/// Transmittance map of layer `i` (0 = background): one minus the composite
/// alpha of every layer strictly in front of `i` in `order`.
///
/// # Errors
/// [`CoreError::InvalidLayerIndex`] if `i > N`;
/// [`CoreError::NotPermutation`] for a bad order.
pub fn transmittance(set: &LayerSet, order: &[usize], i: usize) -> Result<Array2<f32>> {
    let n = set.n_layers();
    check_order(order, n)?;
    if i > n {
        return Err(CoreError::InvalidLayerIndex { index: i, n });
    }
    let (h, w) = set.resolution();
    let mut tau = Array2::<f32>::ones((h, w));
    // Background sits behind everything; person i is occluded by the layers
    // listed after it in back-to-front order.
    let first_in_front = if i == 0 {
        0
    } else {
        order.iter().position(|&j| j == i).unwrap() + 1
    };
    for &j in &order[first_in_front..] {
        Zip::from(&mut tau)
            .and(&set.layers[j - 1].alpha)
            .for_each(|t, &a| *t *= 1.0 - a);
    }
    Ok(tau)
}

/// Pushes the residual between `frame` and the current composite back into
/// every layer color, weighted by that layer's transmittance, then clamps.
///
/// Alphas are unchanged; the background participates with the transmittance
/// of a layer behind everything.
///
/// # Errors
/// [`CoreError::ResolutionMismatch`] if `frame` and `set` disagree;
/// order errors as in [`over_composite`].
pub fn detail_transfer(set: &LayerSet, order: &[usize], frame: &Array3<f32>) -> Result<LayerSet> {
    let res = set.resolution();
    let got = (frame.shape()[1], frame.shape()[2]);
    if got != res || frame.shape()[0] != 3 {
        return Err(CoreError::ResolutionMismatch {
            expected: res,
            got,
        });
    }
    let (comp, _) = over_composite(set, order)?;
    let residual = frame - &comp;
    let mut out = set.clone();
    let add_weighted = |color: &mut Array3<f32>, tau: &Array2<f32>| {
        for c in 0..3 {
            Zip::from(color.index_axis_mut(ndarray::Axis(0), c))
                .and(residual.index_axis(ndarray::Axis(0), c))
                .and(tau)
                .for_each(|col, &r, &t| *col = (*col + t * r).clamp(0.0, 1.0));
        }
    };
    add_weighted(&mut out.background, &transmittance(set, order, 0)?);
    for i in 1..=set.n_layers() {
        let tau = transmittance(set, order, i)?;
        add_weighted(&mut out.layers[i - 1].color, &tau);
    }
    Ok(out)
}

/// Intermediate composites retained for [`over_composite_backward`].
pub struct CompositeCache {
    /// `outs[j]` is the composite after folding in the first `j` layers of
    /// the order; `outs[0]` is the background.
    pub outs: Vec<Array3<f32>>,
    pub comp_alpha: Array2<f32>,
}

/// [`over_composite`] variant that keeps every partial composite so the
/// backward pass can run without recomputation.
pub fn over_composite_cached(set: &LayerSet, order: &[usize]) -> Result<CompositeCache> {
    check_order(order, set.n_layers())?;
    let (h, w) = set.resolution();
    let mut outs = Vec::with_capacity(order.len() + 1);
    outs.push(set.background.clone());
    let mut comp_alpha = Array2::<f32>::zeros((h, w));
    for &i in order {
        let layer = &set.layers[i - 1];
        let prev = outs.last().unwrap();
        let mut next = prev.clone();
        for c in 0..3 {
            Zip::from(next.index_axis_mut(ndarray::Axis(0), c))
                .and(layer.color.index_axis(ndarray::Axis(0), c))
                .and(&layer.alpha)
                .for_each(|o, &col, &a| *o = col * a + *o * (1.0 - a));
        }
        outs.push(next);
        Zip::from(&mut comp_alpha)
            .and(&layer.alpha)
            .for_each(|ca, &a| *ca = a + *ca * (1.0 - a));
    }
    Ok(CompositeCache { outs, comp_alpha })
}

/// Gradients of a scalar loss through the over recursion.
pub struct CompositeGrads {
    pub d_background: Array3<f32>,
    /// Per person layer, in layer-index order (not composite order).
    pub d_color: Vec<Array3<f32>>,
    pub d_alpha: Vec<Array2<f32>>,
}

/// Backpropagates `d_out` (gradient w.r.t. the final composite) through the
/// over recursion recorded in `cache`.
pub fn over_composite_backward(
    set: &LayerSet,
    order: &[usize],
    cache: &CompositeCache,
    d_out: &Array3<f32>,
) -> CompositeGrads {
    let (h, w) = set.resolution();
    let n = set.n_layers();
    let mut d_color = vec![Array3::<f32>::zeros((3, h, w)); n];
    let mut d_alpha = vec![Array2::<f32>::zeros((h, w)); n];
    let mut d_cur = d_out.clone();
    for (pos, &i) in order.iter().enumerate().rev() {
        let layer = &set.layers[i - 1];
        let prev = &cache.outs[pos];
        for c in 0..3 {
            let axis = ndarray::Axis(0);
            Zip::from(&mut d_alpha[i - 1])
                .and(d_cur.index_axis(axis, c))
                .and(layer.color.index_axis(axis, c))
                .and(prev.index_axis(axis, c))
                .for_each(|da, &d, &col, &p| *da += d * (col - p));
            Zip::from(d_color[i - 1].index_axis_mut(axis, c))
                .and(d_cur.index_axis(axis, c))
                .and(&layer.alpha)
                .for_each(|dc, &d, &a| *dc += d * a);
            Zip::from(d_cur.index_axis_mut(axis, c))
                .and(&layer.alpha)
                .for_each(|d, &a| *d *= 1.0 - a);
        }
    }
    CompositeGrads {
        d_background: d_cur,
        d_color,
        d_alpha,
    }
}
