//! Layered neural renderer and the residual refinement network.
//!
//! The renderer is a modified pix2pix U-Net: `depth` stride-2 4×4 encoder
//! rows (leaky 0.2; batchnorm from row 2), two stride-1 bottleneck rows,
//! `depth` stride-2 transposed-conv decoder rows with skip concatenation
//! (relu), and a final stride-1 conv to RGBA mapped into [0,1] by
//! (tanh+1)/2. The feature maps entering that final conv are returned for
//! the refiner. One set of weights serves every layer; per-layer passes
//! differ only in input and run as rows of one batch (normalization is
//! per-sample, so batching never couples layers).
//!
//! Inputs whose extent is not a multiple of 2^depth are replicate-padded
//! and the outputs cropped back.

use ndarray::{s, Array2, Array3, Array4, Axis, NdFloat};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::conv::{ConvCache, ConvTCache};
use crate::nn::norm::NormCache;
use crate::nn::{ops, BatchNorm2d, Conv2d, ConvT2d, InstanceNorm2d, ParamRefs};

const LEAKY_SLOPE: f64 = 0.2;
const MID_ROWS: usize = 2;
const RES_BLOCKS: usize = 3;

/// Architecture knobs. `width` is the first encoder row's channel count;
/// deeper rows grow by powers of two up to `cap`·width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RendererConfig {
    pub in_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub cap: usize,
}

impl RendererConfig {
    /// The published table: width 64, five stride-2 rows, channels capped
    /// at 256.
    pub fn paper(in_channels: usize) -> Self {
        Self { in_channels, width: 64, depth: 5, cap: 4 }
    }

    /// CPU-sized variant with the same topology.
    pub fn desk(in_channels: usize) -> Self {
        Self { in_channels, width: 32, depth: 5, cap: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 {
            return Err(CoreError::BadConfig(format!(
                "renderer width {} < 8",
                self.width
            )));
        }
        if self.in_channels == 0 || self.depth == 0 || self.cap == 0 {
            return Err(CoreError::BadConfig(
                "renderer in_channels, depth, and cap must be ≥ 1".into(),
            ));
        }
        Ok(())
    }

    /// Encoder output channels, rows 1..=depth.
    pub fn enc_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|k| (1usize << k).min(self.cap) * self.width)
            .collect()
    }

    /// Decoder output channels, rows 1..=depth (last = `width`).
    pub fn dec_channels(&self) -> Vec<usize> {
        let enc = self.enc_channels();
        let mut out: Vec<usize> = (1..self.depth).map(|j| enc[self.depth - 1 - j]).collect();
        out.push(self.width);
        out
    }

    /// Channel count of the feature maps handed to the refiner.
    pub fn feature_channels(&self) -> usize {
        self.width
    }
}

/// One layer's rendered output.
#[derive(Debug, Clone)]
pub struct LayerOutput<F: NdFloat> {
    /// `[3, H, W]`, in [0,1].
    pub color: Array3<F>,
    /// `[H, W]`, in [0,1].
    pub alpha: Array2<F>,
    /// `[width, H, W]`: the final decoder activations.
    pub features: Array3<F>,
}

#[derive(Debug, Clone)]
pub struct Renderer<F: NdFloat> {
    pub cfg: RendererConfig,
    enc: Vec<Conv2d<F>>,
    enc_bn: Vec<Option<BatchNorm2d<F>>>,
    mid: Vec<Conv2d<F>>,
    mid_bn: Vec<BatchNorm2d<F>>,
    dec: Vec<ConvT2d<F>>,
    dec_bn: Vec<BatchNorm2d<F>>,
    out: Conv2d<F>,
}

pub struct RendererCache<F: NdFloat> {
    hw: (usize, usize),
    padded: (usize, usize),
    enc_conv: Vec<ConvCache<F>>,
    enc_norm: Vec<Option<NormCache<F>>>,
    enc_out: Vec<Array4<F>>,
    mid_conv: Vec<ConvCache<F>>,
    mid_norm: Vec<NormCache<F>>,
    mid_out: Vec<Array4<F>>,
    dec_conv: Vec<ConvTCache<F>>,
    dec_norm: Vec<NormCache<F>>,
    dec_out: Vec<Array4<F>>,
    out_conv: ConvCache<F>,
    rgba: Array4<F>,
}

impl<F: NdFloat> Renderer<F> {
    pub fn new(cfg: RendererConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let enc_ch = cfg.enc_channels();
        let dec_ch = cfg.dec_channels();
        let mut enc = Vec::with_capacity(cfg.depth);
        let mut enc_bn = Vec::with_capacity(cfg.depth);
        let mut prev = cfg.in_channels;
        for (k, &c) in enc_ch.iter().enumerate() {
            enc.push(Conv2d::new(prev, c, 2, rng));
            enc_bn.push(if k == 0 { None } else { Some(BatchNorm2d::new(c)) });
            prev = c;
        }
        let mut mid = Vec::with_capacity(MID_ROWS);
        let mut mid_bn = Vec::with_capacity(MID_ROWS);
        for _ in 0..MID_ROWS {
            mid.push(Conv2d::new(prev, prev, 1, rng));
            mid_bn.push(BatchNorm2d::new(prev));
        }
        let mut dec = Vec::with_capacity(cfg.depth);
        let mut dec_bn = Vec::with_capacity(cfg.depth);
        for (j, &c) in dec_ch.iter().enumerate() {
            let skip = enc_ch[cfg.depth - 1 - j];
            dec.push(ConvT2d::new(prev + skip, c, rng));
            dec_bn.push(BatchNorm2d::new(c));
            prev = c;
        }
        let out = Conv2d::new(prev, 4, 1, rng);
        Ok(Self { cfg, enc, enc_bn, mid, mid_bn, dec, dec_bn, out })
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.cfg.in_channels || h == 0 || w == 0 {
            return Err(CoreError::InvalidInputSize(format!(
                "{c} channels at {h}×{w}, renderer expects {} channels with nonzero extent",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Training-mode forward: returns cropped RGBA `[B,4,H,W]`, feature maps
    /// `[B,width,H,W]`, and the state the backward pass needs.
    pub fn forward_train(
        &mut self,
        x: &Array4<F>,
    ) -> Result<(Array4<F>, Array4<F>, RendererCache<F>)> {
        self.check_input(x)?;
        let slope = F::from(LEAKY_SLOPE).unwrap();
        let (xp, hw) = ops::pad_to_multiple(x, 1 << self.cfg.depth);
        let padded = (xp.dim().2, xp.dim().3);

        let mut enc_conv = Vec::with_capacity(self.cfg.depth);
        let mut enc_norm = Vec::with_capacity(self.cfg.depth);
        let mut enc_out = Vec::with_capacity(self.cfg.depth);
        let mut h = xp;
        for k in 0..self.cfg.depth {
            let (mut y, c) = self.enc[k].forward(&h);
            enc_conv.push(c);
            enc_norm.push(match &mut self.enc_bn[k] {
                Some(bn) => {
                    let (z, n) = bn.forward_train(&y);
                    y = z;
                    Some(n)
                }
                None => None,
            });
            ops::leaky_relu(&mut y, slope);
            enc_out.push(y.clone());
            h = y;
        }

        let mut mid_conv = Vec::with_capacity(MID_ROWS);
        let mut mid_norm = Vec::with_capacity(MID_ROWS);
        let mut mid_out = Vec::with_capacity(MID_ROWS);
        for m in 0..MID_ROWS {
            let (y, c) = self.mid[m].forward(&h);
            mid_conv.push(c);
            let (mut y, n) = self.mid_bn[m].forward_train(&y);
            mid_norm.push(n);
            ops::leaky_relu(&mut y, slope);
            mid_out.push(y.clone());
            h = y;
        }

        let mut dec_conv = Vec::with_capacity(self.cfg.depth);
        let mut dec_norm = Vec::with_capacity(self.cfg.depth);
        let mut dec_out = Vec::with_capacity(self.cfg.depth);
        for j in 0..self.cfg.depth {
            let input = ops::concat_channels(&[&h, &enc_out[self.cfg.depth - 1 - j]]);
            let (y, c) = self.dec[j].forward(&input);
            dec_conv.push(c);
            let (mut y, n) = self.dec_bn[j].forward_train(&y);
            dec_norm.push(n);
            ops::relu(&mut y);
            dec_out.push(y.clone());
            h = y;
        }

        let (mut rgba, out_conv) = self.out.forward(&h);
        ops::tanh01(&mut rgba);
        let features = ops::crop_to(&h, hw);
        let cropped = ops::crop_to(&rgba, hw);
        let cache = RendererCache {
            hw,
            padded,
            enc_conv,
            enc_norm,
            enc_out,
            mid_conv,
            mid_norm,
            mid_out,
            dec_conv,
            dec_norm,
            dec_out,
            out_conv,
            rgba,
        };
        Ok((cropped, features, cache))
    }

    /// Evaluation-mode forward: frozen normalization statistics, no cache.
    pub fn forward_eval(&self, x: &Array4<F>) -> Result<(Array4<F>, Array4<F>)> {
        self.check_input(x)?;
        let slope = F::from(LEAKY_SLOPE).unwrap();
        let (xp, hw) = ops::pad_to_multiple(x, 1 << self.cfg.depth);

        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = xp;
        for k in 0..self.cfg.depth {
            let (mut y, _) = self.enc[k].forward(&h);
            if let Some(bn) = &self.enc_bn[k] {
                y = bn.forward_eval(&y);
            }
            ops::leaky_relu(&mut y, slope);
            skips.push(y.clone());
            h = y;
        }
        for m in 0..MID_ROWS {
            let (y, _) = self.mid[m].forward(&h);
            let mut y = self.mid_bn[m].forward_eval(&y);
            ops::leaky_relu(&mut y, slope);
            h = y;
        }
        for j in 0..self.cfg.depth {
            let input = ops::concat_channels(&[&h, &skips[self.cfg.depth - 1 - j]]);
            let (y, _) = self.dec[j].forward(&input);
            let mut y = self.dec_bn[j].forward_eval(&y);
            ops::relu(&mut y);
            h = y;
        }
        let (mut rgba, _) = self.out.forward(&h);
        ops::tanh01(&mut rgba);
        Ok((ops::crop_to(&rgba, hw), ops::crop_to(&h, hw)))
    }

    /// Accumulates parameter gradients from `d_rgba` and returns the input
    /// gradient. Feature maps carry no loss of their own during base
    /// training, so only the RGBA gradient enters.
    pub fn backward(&mut self, cache: &RendererCache<F>, d_rgba: &Array4<F>) -> Array4<F> {
        let slope = F::from(LEAKY_SLOPE).unwrap();
        let depth = self.cfg.depth;
        let enc_ch = self.cfg.enc_channels();
        let dec_ch = self.cfg.dec_channels();

        let mut d = ops::crop_backward(d_rgba, cache.padded);
        ops::tanh01_backward(&mut d, &cache.rgba);
        let mut d = self.out.backward(&cache.out_conv, &d);

        let mut pending: Vec<Option<Array4<F>>> = (0..depth).map(|_| None).collect();
        for j in (0..depth).rev() {
            ops::relu_backward(&mut d, &cache.dec_out[j]);
            let d_bn = self.dec_bn[j].backward(&cache.dec_norm[j], &d);
            let d_in = self.dec[j].backward(&cache.dec_conv[j], &d_bn);
            let prev_ch = if j == 0 { enc_ch[depth - 1] } else { dec_ch[j - 1] };
            let skip_idx = depth - 1 - j;
            let mut parts = ops::split_channels(&d_in, &[prev_ch, enc_ch[skip_idx]]);
            pending[skip_idx] = parts.pop();
            d = parts.pop().unwrap();
        }
        for m in (0..MID_ROWS).rev() {
            ops::leaky_relu_backward(&mut d, &cache.mid_out[m], slope);
            let d_bn = self.mid_bn[m].backward(&cache.mid_norm[m], &d);
            d = self.mid[m].backward(&cache.mid_conv[m], &d_bn);
        }
        for k in (0..depth).rev() {
            if let Some(g) = &pending[k] {
                d += g;
            }
            ops::leaky_relu_backward(&mut d, &cache.enc_out[k], slope);
            if let Some(bn) = &mut self.enc_bn[k] {
                d = bn.backward(cache.enc_norm[k].as_ref().unwrap(), &d);
            }
            d = self.enc[k].backward(&cache.enc_conv[k], &d);
        }
        ops::pad_backward(&d, cache.hw)
    }

    /// Learnable parameters in checkpoint/optimizer order.
    pub fn params(&mut self) -> ParamRefs<'_, F> {
        let mut out: ParamRefs<'_, F> = Vec::new();
        for (k, conv) in self.enc.iter_mut().enumerate() {
            let Conv2d { w, b, .. } = conv;
            out.push((format!("renderer/enc{}/w", k + 1), w));
            out.push((format!("renderer/enc{}/b", k + 1), b));
        }
        for (k, bn) in self.enc_bn.iter_mut().enumerate() {
            if let Some(bn) = bn {
                out.push((format!("renderer/enc{}/bn/g", k + 1), &mut bn.gamma));
                out.push((format!("renderer/enc{}/bn/b", k + 1), &mut bn.beta));
            }
        }
        for (m, conv) in self.mid.iter_mut().enumerate() {
            let Conv2d { w, b, .. } = conv;
            out.push((format!("renderer/mid{}/w", m + 1), w));
            out.push((format!("renderer/mid{}/b", m + 1), b));
        }
        for (m, bn) in self.mid_bn.iter_mut().enumerate() {
            out.push((format!("renderer/mid{}/bn/g", m + 1), &mut bn.gamma));
            out.push((format!("renderer/mid{}/bn/b", m + 1), &mut bn.beta));
        }
        for (j, up) in self.dec.iter_mut().enumerate() {
            let ConvT2d { w, b } = up;
            out.push((format!("renderer/dec{}/w", j + 1), w));
            out.push((format!("renderer/dec{}/b", j + 1), b));
        }
        for (j, bn) in self.dec_bn.iter_mut().enumerate() {
            out.push((format!("renderer/dec{}/bn/g", j + 1), &mut bn.gamma));
            out.push((format!("renderer/dec{}/bn/b", j + 1), &mut bn.beta));
        }
        let Conv2d { w, b, .. } = &mut self.out;
        out.push(("renderer/out/w".into(), w));
        out.push(("renderer/out/b".into(), b));
        out
    }

    /// Running normalization statistics (not optimized, but checkpointed).
    pub fn norm_state(&mut self) -> Vec<(String, &mut Vec<F>)> {
        let mut out: Vec<(String, &mut Vec<F>)> = Vec::new();
        for (k, bn) in self.enc_bn.iter_mut().enumerate() {
            if let Some(bn) = bn {
                out.push((format!("renderer/enc{}/bn/rm", k + 1), &mut bn.running_mean));
                out.push((format!("renderer/enc{}/bn/rv", k + 1), &mut bn.running_var));
            }
        }
        for (m, bn) in self.mid_bn.iter_mut().enumerate() {
            out.push((format!("renderer/mid{}/bn/rm", m + 1), &mut bn.running_mean));
            out.push((format!("renderer/mid{}/bn/rv", m + 1), &mut bn.running_var));
        }
        for (j, bn) in self.dec_bn.iter_mut().enumerate() {
            out.push((format!("renderer/dec{}/bn/rm", j + 1), &mut bn.running_mean));
            out.push((format!("renderer/dec{}/bn/rv", j + 1), &mut bn.running_var));
        }
        out
    }

    pub fn param_count(&mut self) -> usize {
        self.params().iter().map(|(_, t)| t.v.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params() {
            t.zero_grad();
        }
    }
}

/// Evaluation-mode render of a single layer input `[C+1, H, W]`.
pub fn render_layer<F: NdFloat>(model: &Renderer<F>, input: &Array3<F>) -> Result<LayerOutput<F>> {
    let x = input.clone().insert_axis(Axis(0));
    let (rgba, features) = model.forward_eval(&x)?;
    Ok(LayerOutput {
        color: rgba.slice(s![0, 0..3, .., ..]).to_owned(),
        alpha: rgba.slice(s![0, 3, .., ..]).to_owned(),
        features: features.index_axis(Axis(0), 0).to_owned(),
    })
}

/// Refinement network: conv+in+relu, three resblocks, conv to a 4-channel
/// residual. Operates on the upsampled concatenation of RGBA, the sampled
/// texture input, and the renderer's feature maps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub in_channels: usize,
    pub width: usize,
}

impl RefinerConfig {
    /// The published table: width 64 on 4 + (C+1) + renderer-width inputs.
    pub fn paper(renderer: &RendererConfig) -> Self {
        Self::sized(renderer, 64)
    }

    pub fn sized(renderer: &RendererConfig, width: usize) -> Self {
        Self {
            in_channels: 4 + renderer.in_channels + renderer.feature_channels(),
            width,
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock<F: NdFloat> {
    c1: Conv2d<F>,
    n1: InstanceNorm2d<F>,
    c2: Conv2d<F>,
    n2: InstanceNorm2d<F>,
}

struct ResCache<F: NdFloat> {
    c1: ConvCache<F>,
    n1: NormCache<F>,
    mid: Array4<F>,
    c2: ConvCache<F>,
    n2: NormCache<F>,
    out: Array4<F>,
}

impl<F: NdFloat> ResBlock<F> {
    fn new(c: usize, rng: &mut impl Rng) -> Self {
        Self {
            c1: Conv2d::new3(c, c, rng),
            n1: InstanceNorm2d::new(c),
            c2: Conv2d::new3(c, c, rng),
            n2: InstanceNorm2d::new(c),
        }
    }

    fn forward(&self, x: &Array4<F>) -> (Array4<F>, ResCache<F>) {
        let (h, c1) = self.c1.forward(x);
        let (mut h, n1) = self.n1.forward(&h);
        ops::relu(&mut h);
        let mid = h.clone();
        let (h, c2) = self.c2.forward(&mid);
        let (h, n2) = self.n2.forward(&h);
        let mut y = h + x;
        ops::relu(&mut y);
        let out = y.clone();
        (y, ResCache { c1, n1, mid, c2, n2, out })
    }

    fn backward(&mut self, cache: &ResCache<F>, dy: &Array4<F>) -> Array4<F> {
        let mut dz = dy.clone();
        ops::relu_backward(&mut dz, &cache.out);
        let d_branch = self.n2.backward(&cache.n2, &dz);
        let mut d = self.c2.backward(&cache.c2, &d_branch);
        ops::relu_backward(&mut d, &cache.mid);
        let d = self.n1.backward(&cache.n1, &d);
        let d = self.c1.backward(&cache.c1, &d);
        d + dz
    }
}

#[derive(Debug, Clone)]
pub struct Refiner<F: NdFloat> {
    pub cfg: RefinerConfig,
    head: Conv2d<F>,
    head_in: InstanceNorm2d<F>,
    blocks: Vec<ResBlock<F>>,
    out: Conv2d<F>,
}

pub struct RefinerCache<F: NdFloat> {
    head: ConvCache<F>,
    head_in: NormCache<F>,
    head_out: Array4<F>,
    blocks: Vec<ResCache<F>>,
    out: ConvCache<F>,
}

impl<F: NdFloat> Refiner<F> {
    pub fn new(cfg: RefinerConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.width == 0 {
            return Err(CoreError::BadConfig(
                "refiner in_channels and width must be ≥ 1".into(),
            ));
        }
        Ok(Self {
            head: Conv2d::new3(cfg.in_channels, cfg.width, rng),
            head_in: InstanceNorm2d::new(cfg.width),
            blocks: (0..RES_BLOCKS).map(|_| ResBlock::new(cfg.width, rng)).collect(),
            out: Conv2d::new3(cfg.width, 4, rng),
            cfg,
        })
    }

    /// Residual prediction `[B,4,H,W]`. Instance normalization has no
    /// train/eval split, so one forward serves both.
    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, RefinerCache<F>)> {
        let c = x.dim().1;
        if c != self.cfg.in_channels {
            return Err(CoreError::RefinerInputMismatch(format!(
                "got {c} channels, expected {}",
                self.cfg.in_channels
            )));
        }
        let (h, head) = self.head.forward(x);
        let (mut h, head_in) = self.head_in.forward(&h);
        ops::relu(&mut h);
        let head_out = h.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = b.forward(&h);
            blocks.push(cache);
            h = y;
        }
        let (y, out) = self.out.forward(&h);
        Ok((y, RefinerCache { head, head_in, head_out, blocks, out }))
    }

    pub fn backward(&mut self, cache: &RefinerCache<F>, dy: &Array4<F>) -> Array4<F> {
        let mut d = self.out.backward(&cache.out, dy);
        for (b, c) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            d = b.backward(c, &d);
        }
        ops::relu_backward(&mut d, &cache.head_out);
        let d = self.head_in.backward(&cache.head_in, &d);
        self.head.backward(&cache.head, &d)
    }

    pub fn params(&mut self) -> ParamRefs<'_, F> {
        let mut out: ParamRefs<'_, F> = Vec::new();
        {
            let Conv2d { w, b, .. } = &mut self.head;
            out.push(("refiner/head/w".into(), w));
            out.push(("refiner/head/b".into(), b));
        }
        out.push(("refiner/head/in/g".into(), &mut self.head_in.gamma));
        out.push(("refiner/head/in/b".into(), &mut self.head_in.beta));
        for (r, blk) in self.blocks.iter_mut().enumerate() {
            let Conv2d { w, b, .. } = &mut blk.c1;
            out.push((format!("refiner/res{}/c1/w", r + 1), w));
            out.push((format!("refiner/res{}/c1/b", r + 1), b));
            out.push((format!("refiner/res{}/in1/g", r + 1), &mut blk.n1.gamma));
            out.push((format!("refiner/res{}/in1/b", r + 1), &mut blk.n1.beta));
            let Conv2d { w, b, .. } = &mut blk.c2;
            out.push((format!("refiner/res{}/c2/w", r + 1), w));
            out.push((format!("refiner/res{}/c2/b", r + 1), b));
            out.push((format!("refiner/res{}/in2/g", r + 1), &mut blk.n2.gamma));
            out.push((format!("refiner/res{}/in2/b", r + 1), &mut blk.n2.beta));
        }
        {
            let Conv2d { w, b, .. } = &mut self.out;
            out.push(("refiner/out/w".into(), w));
            out.push(("refiner/out/b".into(), b));
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.params() {
            t.zero_grad();
        }
    }
}

/// Stacks one layer's low-resolution RGBA, its renderer input, and its
/// feature maps into the refiner's input layout `[4 + C+1 + width, H, W]`.
pub fn refiner_input<F: NdFloat>(low: &LayerOutput<F>, texture_input: &Array3<F>) -> Array3<F> {
    let alpha = low.alpha.clone().insert_axis(Axis(0));
    ndarray::concatenate(
        Axis(0),
        &[
            low.color.view(),
            alpha.view(),
            texture_input.view(),
            low.features.view(),
        ],
    )
    .unwrap()
}

/// Upsamples a layer and adds the refiner's residual:
/// `clamp(upsample(RGBA) + residual, 0, 1)`.
pub fn refine_layer<F: NdFloat>(
    refiner: &Refiner<F>,
    low: &LayerOutput<F>,
    texture_input: &Array3<F>,
    factor: usize,
) -> Result<(Array3<F>, Array2<F>)> {
    let input = refiner_input(low, texture_input).insert_axis(Axis(0));
    let up_input = ops::bilinear_upsample(&input, factor);
    let (residual, _) = refiner.forward(&up_input)?;

    let (h, w) = low.alpha.dim();
    let mut rgba = Array4::<F>::zeros((1, 4, h, w));
    rgba.slice_mut(s![0, 0..3, .., ..]).assign(&low.color);
    rgba.slice_mut(s![0, 3, .., ..]).assign(&low.alpha);
    let mut up = ops::bilinear_upsample(&rgba, factor);
    up += &residual;
    up.mapv_inplace(|v| v.max(F::zero()).min(F::one()));
    Ok((
        up.slice(s![0, 0..3, .., ..]).to_owned(),
        up.slice(s![0, 3, .., ..]).to_owned(),
    ))
}
