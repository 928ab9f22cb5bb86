//! Evaluation against ground truth: PSNR, alpha IoU, and the report the CLI
//! serializes. Peak signal is 1.0 throughout (frames live in [0,1]).

use ndarray::{Array2, Array3, ArrayView3};
use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Result;
use crate::synth::Rect;

/// A decibel value that survives JSON: infinity (identical images) is written
/// as the string `"inf"`, every finite value as a plain number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct DbVisitor;
        impl Visitor<'_> for DbVisitor {
            type Value = Db;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or the string \"inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Db, E> {
                Ok(Db(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Db, E> {
                Ok(Db(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Db, E> {
                Ok(Db(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Db, E> {
                match v {
                    "inf" => Ok(Db(f64::INFINITY)),
                    _ => Err(E::custom(format!("unexpected PSNR string {v:?}"))),
                }
            }
        }
        d.deserialize_any(DbVisitor)
    }
}

fn mse_to_psnr(se: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// PSNR between two same-shape images, in dB. Identical inputs → +∞.
pub fn psnr(a: ArrayView3<f32>, b: ArrayView3<f32>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "psnr needs matching shapes");
    let se: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    mse_to_psnr(se, a.len())
}

/// PSNR pooled over a whole frame sequence.
pub fn psnr_frames(a: &[Array3<f32>], b: &[Array3<f32>]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr needs matching clip lengths");
    let mut se = 0.0;
    let mut n = 0;
    for (fa, fb) in a.iter().zip(b) {
        assert_eq!(fa.dim(), fb.dim(), "psnr needs matching shapes");
        se += fa
            .iter()
            .zip(fb.iter())
            .map(|(x, y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum::<f64>();
        n += fa.len();
    }
    mse_to_psnr(se, n)
}

/// Boolean coverage mask of a set of rectangles, clamped to the frame.
/// Overlapping rectangles count each pixel once.
pub fn region_mask(rects: &[Rect], resolution: (usize, usize)) -> Array2<bool> {
    let (h, w) = resolution;
    let mut mask = Array2::from_elem((h, w), false);
    for r in rects {
        for y in r.y..(r.y + r.h).min(h) {
            for x in r.x..(r.x + r.w).min(w) {
                mask[[y, x]] = true;
            }
        }
    }
    mask
}

/// PSNR restricted to masked pixels (all channels). An empty mask → +∞.
pub fn masked_psnr(a: ArrayView3<f32>, b: ArrayView3<f32>, mask: &Array2<bool>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "psnr needs matching shapes");
    let (c, h, w) = a.dim();
    assert_eq!(mask.dim(), (h, w), "mask must match the frame");
    let mut se = 0.0;
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            for ch in 0..c {
                let d = (a[[ch, y, x]] - b[[ch, y, x]]) as f64;
                se += d * d;
            }
            n += c;
        }
    }
    mse_to_psnr(se, n)
}

/// PSNR pooled over per-frame rectangle sets across a clip, e.g. the
/// companion-square regions of one layer.
pub fn region_psnr(pred: &[Array3<f32>], gt: &[Array3<f32>], rects: &[Vec<Rect>]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "psnr needs matching clip lengths");
    assert_eq!(pred.len(), rects.len(), "one rectangle set per frame");
    let mut se = 0.0;
    let mut n = 0;
    for ((fa, fb), rs) in pred.iter().zip(gt).zip(rects) {
        let (c, h, w) = fa.dim();
        assert_eq!(fa.dim(), fb.dim(), "psnr needs matching shapes");
        let mask = region_mask(rs, (h, w));
        for y in 0..h {
            for x in 0..w {
                if !mask[[y, x]] {
                    continue;
                }
                for ch in 0..c {
                    let d = (fa[[ch, y, x]] - fb[[ch, y, x]]) as f64;
                    se += d * d;
                }
                n += c;
            }
        }
    }
    mse_to_psnr(se, n)
}

/// Intersection-over-union of two alpha mattes binarized at 0.5 (a pixel is
/// foreground when alpha ≥ 0.5). Two empty masks are identical → 1.
pub fn alpha_iou(pred: &Array2<f32>, gt: &Array2<f32>) -> f64 {
    assert_eq!(pred.dim(), gt.dim(), "iou needs matching shapes");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let p = *p >= 0.5;
        let g = *g >= 0.5;
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// [`alpha_iou`] pooled over a whole sequence: one intersection and union
/// accumulated across every frame's pixels.
pub fn alpha_iou_frames(pred: &[Array2<f32>], gt: &[Array2<f32>]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "iou needs matching frame counts");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (pf, gf) in pred.iter().zip(gt.iter()) {
        assert_eq!(pf.dim(), gf.dim(), "iou needs matching shapes");
        for (p, g) in pf.iter().zip(gf.iter()) {
            let p = *p >= 0.5;
            let g = *g >= 0.5;
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// First index at which a curve strictly exceeds `threshold`.
pub fn first_crossing(values: &[f64], threshold: f64) -> Option<usize> {
    values.iter().position(|&v| v > threshold)
}

/// One named PSNR-over-evaluations curve pulled from training metrics.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RegionCurve {
    pub name: String,
    pub values: Vec<Db>,
}

/// Everything `cmd_eval` reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    /// Per-layer alpha IoU against ground truth, layer 1 first.
    pub layer_iou: Vec<f64>,
    /// Whole-clip reconstruction PSNR.
    pub recon_psnr: Db,
    /// Per-region PSNR curves over evaluation points, when metrics exist.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub region_curves: Vec<RegionCurve>,
    /// Retimed output vs the edit oracle, when an edit was evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retimed_psnr: Option<Db>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
