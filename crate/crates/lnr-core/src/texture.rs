//! Learnable texture atlases and differentiable UV sampling.
//!
//! Each object owns an atlas of shape `[parts, C, h, w]`; the background is
//! a single-part atlas sized to the (possibly panned) frame extent. A
//! [`UvMap`] addresses atlases per pixel: `part` 0 means "nothing here",
//! parts count from 1. Sampling is bilinear with align-corners scaling
//! (`u ∈ {0,1}` hits the border texel exactly) and edge clamping, and is
//! differentiable with respect to atlas entries (UVs are data, not
//! parameters).

use ndarray::{Array2, Array3, ArrayView4, Ix4, NdFloat};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::{ParamRefs, Tensor};

pub const DEFAULT_CHANNELS: usize = 16;
pub const DEFAULT_ATLAS_HW: usize = 16;
const INIT_STD: f64 = 0.01;

/// Per-pixel atlas addressing for one layer at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMap {
    pub part: Array2<u16>,
    pub u: Array2<f32>,
    pub v: Array2<f32>,
}

impl UvMap {
    /// No texture anywhere (the background layer's "person" map).
    pub fn empty(h: usize, w: usize) -> Self {
        Self {
            part: Array2::zeros((h, w)),
            u: Array2::zeros((h, w)),
            v: Array2::zeros((h, w)),
        }
    }

    /// Part-1 grid mapping the frame onto the whole atlas: an atlas sized
    /// exactly like the frame samples back unchanged.
    pub fn identity(h: usize, w: usize) -> Self {
        let mut uv = Self::empty(h, w);
        uv.part.fill(1);
        for y in 0..h {
            for x in 0..w {
                uv.u[[y, x]] = if w > 1 { x as f32 / (w - 1) as f32 } else { 0.0 };
                uv.v[[y, x]] = if h > 1 { y as f32 / (h - 1) as f32 } else { 0.0 };
            }
        }
        uv
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.part.dim()
    }
}

/// All learnable texture state for one video: one atlas per object plus the
/// background atlas.
#[derive(Debug, Clone)]
pub struct NeuralTexture<F: NdFloat> {
    /// Object atlases, `[parts, C, h, w]` each; index 0 is layer 1.
    pub objects: Vec<Tensor<F>>,
    /// Background atlas, `[1, C, h_b, w_b]`.
    pub background: Tensor<F>,
}

/// Entries drawn i.i.d. from N(0, 0.01²), deterministic per seed.
pub fn init_texture<F: NdFloat>(
    n_objects: usize,
    parts: usize,
    c: usize,
    h: usize,
    w: usize,
    bg_hw: (usize, usize),
    seed: u64,
) -> NeuralTexture<F> {
    assert!(parts >= 1 && c >= 1 && h >= 1 && w >= 1);
    assert!(bg_hw.0 >= 1 && bg_hw.1 >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = (0..n_objects)
        .map(|_| Tensor::randn(&[parts, c, h, w], INIT_STD, &mut rng))
        .collect();
    let background = Tensor::randn(&[1, c, bg_hw.0, bg_hw.1], INIT_STD, &mut rng);
    NeuralTexture { objects, background }
}

impl<F: NdFloat> NeuralTexture<F> {
    pub fn n_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn channels(&self) -> usize {
        self.background.v.shape()[1]
    }

    /// Atlas view for the 1-based object layer index.
    pub fn object(&self, layer: usize) -> Result<ArrayView4<'_, F>> {
        if layer == 0 || layer > self.objects.len() {
            return Err(CoreError::InvalidLayerIndex {
                index: layer,
                n: self.objects.len(),
            });
        }
        Ok(self.objects[layer - 1]
            .v
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap())
    }

    pub fn background_view(&self) -> ArrayView4<'_, F> {
        self.background.v.view().into_dimensionality::<Ix4>().unwrap()
    }

    /// Checkpoint/optimizer traversal order: objects ascending, then
    /// background.
    pub fn params(&mut self) -> ParamRefs<'_, F> {
        let mut out: ParamRefs<'_, F> = Vec::with_capacity(self.objects.len() + 1);
        for (i, t) in self.objects.iter_mut().enumerate() {
            out.push((format!("textures/object{:02}", i + 1), t));
        }
        out.push(("textures/background".into(), &mut self.background));
        out
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.objects {
            t.zero_grad();
        }
        self.background.zero_grad();
    }
}

struct Taps {
    part: usize,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
}

fn taps_at(uv: &UvMap, y: usize, x: usize, parts: usize, th: usize, tw: usize) -> Result<Option<Taps>> {
    let p = uv.part[[y, x]] as usize;
    if p == 0 {
        return Ok(None);
    }
    if p > parts {
        return Err(CoreError::InvalidPartId { part: p as u16, parts });
    }
    let fx = (uv.u[[y, x]] as f64 * (tw - 1) as f64).clamp(0.0, (tw - 1) as f64);
    let fy = (uv.v[[y, x]] as f64 * (th - 1) as f64).clamp(0.0, (th - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    Ok(Some(Taps {
        part: p - 1,
        x0,
        x1: (x0 + 1).min(tw - 1),
        y0,
        y1: (y0 + 1).min(th - 1),
        wx: fx - x0 as f64,
        wy: fy - y0 as f64,
    }))
}

/// Bilinear atlas lookup; output `[C, H, W]`, zeros where `part = 0`.
pub fn sample_texture<F: NdFloat>(atlas: ArrayView4<'_, F>, uv: &UvMap) -> Result<Array3<F>> {
    let (parts, c, th, tw) = atlas.dim();
    let (h, w) = uv.resolution();
    let mut out = Array3::<F>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let Some(t) = taps_at(uv, y, x, parts, th, tw)? else {
                continue;
            };
            let wx = F::from(t.wx).unwrap();
            let wy = F::from(t.wy).unwrap();
            for ci in 0..c {
                let tl = atlas[[t.part, ci, t.y0, t.x0]];
                let tr = atlas[[t.part, ci, t.y0, t.x1]];
                let bl = atlas[[t.part, ci, t.y1, t.x0]];
                let br = atlas[[t.part, ci, t.y1, t.x1]];
                let top = tl + (tr - tl) * wx;
                let bot = bl + (br - bl) * wx;
                out[[ci, y, x]] = top + (bot - top) * wy;
            }
        }
    }
    Ok(out)
}

/// Scatter-adds `d_out`'s bilinear weights into the atlas gradient.
pub fn sample_texture_backward<F: NdFloat>(
    atlas: &mut Tensor<F>,
    uv: &UvMap,
    d_out: &Array3<F>,
) -> Result<()> {
    let (parts, c, th, tw) = {
        let sh = atlas.v.shape();
        (sh[0], sh[1], sh[2], sh[3])
    };
    let (h, w) = uv.resolution();
    let mut g = atlas.g.view_mut().into_dimensionality::<Ix4>().unwrap();
    for y in 0..h {
        for x in 0..w {
            let Some(t) = taps_at(uv, y, x, parts, th, tw)? else {
                continue;
            };
            let wx = F::from(t.wx).unwrap();
            let wy = F::from(t.wy).unwrap();
            let one = F::one();
            for ci in 0..c {
                let d = d_out[[ci, y, x]];
                g[[t.part, ci, t.y0, t.x0]] =
                    g[[t.part, ci, t.y0, t.x0]] + d * (one - wx) * (one - wy);
                g[[t.part, ci, t.y0, t.x1]] = g[[t.part, ci, t.y0, t.x1]] + d * wx * (one - wy);
                g[[t.part, ci, t.y1, t.x0]] = g[[t.part, ci, t.y1, t.x0]] + d * (one - wx) * wy;
                g[[t.part, ci, t.y1, t.x1]] = g[[t.part, ci, t.y1, t.x1]] + d * wx * wy;
            }
        }
    }
    Ok(())
}

/// One layer's sampled features plus the per-pixel layer-id map.
#[derive(Debug, Clone)]
pub struct SampledTexture<F: NdFloat> {
    /// `[C, H, W]`.
    pub features: Array3<F>,
    /// Layer index where the layer's `part > 0`, 0 elsewhere.
    pub ids: Array2<u16>,
}

impl<F: NdFloat> SampledTexture<F> {
    /// The background layer's "person" sample: nothing anywhere.
    pub fn empty(c: usize, h: usize, w: usize) -> Self {
        Self {
            features: Array3::zeros((c, h, w)),
            ids: Array2::zeros((h, w)),
        }
    }
}

/// Samples the 1-based object layer's atlas and tags covered pixels with
/// the layer id.
pub fn sample_layer<F: NdFloat>(
    tex: &NeuralTexture<F>,
    layer: usize,
    uv: &UvMap,
) -> Result<SampledTexture<F>> {
    let features = sample_texture(tex.object(layer)?, uv)?;
    let ids = uv.part.mapv(|p| if p > 0 { layer as u16 } else { 0 });
    Ok(SampledTexture { features, ids })
}

/// Assembles one renderer input `[C+1, H, W]`: person features where the
/// layer covers the pixel, background features elsewhere, and the layer id
/// as the final channel.
pub fn compose_layer_input<F: NdFloat>(
    person: &SampledTexture<F>,
    background: &Array3<F>,
) -> Result<Array3<F>> {
    let (c, h, w) = background.dim();
    if person.features.dim() != (c, h, w) || person.ids.dim() != (h, w) {
        return Err(CoreError::ResolutionMismatch {
            expected: (h, w),
            got: (person.ids.dim().0, person.ids.dim().1),
        });
    }
    let mut out = Array3::<F>::zeros((c + 1, h, w));
    for y in 0..h {
        for x in 0..w {
            let id = person.ids[[y, x]];
            if id > 0 {
                for ci in 0..c {
                    out[[ci, y, x]] = person.features[[ci, y, x]];
                }
                out[[c, y, x]] = F::from(id).unwrap();
            } else {
                for ci in 0..c {
                    out[[ci, y, x]] = background[[ci, y, x]];
                }
            }
        }
    }
    Ok(out)
}

/// Routes a renderer-input gradient back to the person and background
/// samples (the id channel carries no gradient).
pub fn compose_layer_input_backward<F: NdFloat>(
    d_input: &Array3<F>,
    ids: &Array2<u16>,
) -> (Array3<F>, Array3<F>) {
    let (c1, h, w) = d_input.dim();
    let c = c1 - 1;
    let mut d_person = Array3::<F>::zeros((c, h, w));
    let mut d_background = Array3::<F>::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let dst = if ids[[y, x]] > 0 {
                &mut d_person
            } else {
                &mut d_background
            };
            for ci in 0..c {
                dst[[ci, y, x]] = d_input[[ci, y, x]];
            }
        }
    }
    (d_person, d_background)
}
