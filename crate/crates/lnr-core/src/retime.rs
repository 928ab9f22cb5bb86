//! Layer-level retiming: integer time warps, edit scripts, motion signals,
//! and Correlation Optimized Warping for automatic alignment.
//!
//! Warps use nearest-frame semantics — the layer shown at output frame `t`
//! is a copy of that layer at source frame `w(t)`. There is no temporal
//! blending, so retiming never invents unseen poses.

use std::collections::BTreeSet;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::compose::{over_composite, LayerSet};
use crate::dataio::{CompositeOrder, VideoClip};
use crate::error::{CoreError, Result};

/// Monotone non-decreasing map from output frame to source frame, 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeWarp {
    map: Vec<usize>,
    k_source: usize,
}

impl TimeWarp {
    pub fn new(map: Vec<usize>, k_source: usize) -> Result<Self> {
        if map.is_empty() {
            return Err(CoreError::EditOutOfRange("warp has no frames".into()));
        }
        let mut prev = 1usize;
        for (t0, &s) in map.iter().enumerate() {
            if s == 0 || s > k_source {
                return Err(CoreError::EditOutOfRange(format!(
                    "warp source {s} at output {} outside 1..={k_source}",
                    t0 + 1
                )));
            }
            if s < prev {
                return Err(CoreError::EditOutOfRange(format!(
                    "warp not monotone at output {}",
                    t0 + 1
                )));
            }
            prev = s;
        }
        Ok(Self { map, k_source })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            map: (1..=k).collect(),
            k_source: k,
        }
    }

    /// Builds a warp from sparse `(output, source)` pairs; outputs not
    /// listed take the source of the nearest earlier pair.
    pub fn from_pairs(pairs: &[(usize, usize)], k_out: usize, k_source: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(CoreError::EditOutOfRange("warp map has no pairs".into()));
        }
        let mut sorted = pairs.to_vec();
        sorted.sort_by_key(|&(o, _)| o);
        for &(o, s) in &sorted {
            if o == 0 || o > k_out {
                return Err(CoreError::EditOutOfRange(format!(
                    "warp output {o} outside 1..={k_out}"
                )));
            }
            if s == 0 || s > k_source {
                return Err(CoreError::EditOutOfRange(format!(
                    "warp source {s} outside 1..={k_source}"
                )));
            }
        }
        let mut map = Vec::with_capacity(k_out);
        let mut i = 0;
        let mut cur = sorted[0].1;
        for t in 1..=k_out {
            while i < sorted.len() && sorted[i].0 <= t {
                cur = sorted[i].1;
                i += 1;
            }
            map.push(cur);
        }
        Self::new(map, k_source)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn k_source(&self) -> usize {
        self.k_source
    }

    /// Source frame for 1-based output frame `t`.
    pub fn source(&self, t: usize) -> usize {
        self.map[t - 1]
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn to_pairs(&self) -> Vec<(usize, usize)> {
        self.map
            .iter()
            .enumerate()
            .map(|(t0, &s)| (t0 + 1, s))
            .collect()
    }

    /// `self ∘ inner`: first `inner` reads from `self`'s output timeline,
    /// i.e. applying warp `self` to a layer and then warp `inner` equals
    /// applying `self.compose(inner)` once.
    pub fn compose(&self, inner: &TimeWarp) -> Result<TimeWarp> {
        if inner.k_source != self.len() {
            return Err(CoreError::EditOutOfRange(format!(
                "warp composition length mismatch: {} vs {}",
                inner.k_source,
                self.len()
            )));
        }
        let map = inner.map.iter().map(|&t| self.map[t - 1]).collect();
        TimeWarp::new(map, self.k_source)
    }
}

/// One retiming operation; layers are 1-based ids on the current edit
/// state (originals first, duplicates appended in creation order).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EditOp {
    Remove {
        layer: usize,
    },
    Freeze {
        layer: usize,
        t0: usize,
    },
    Warp {
        layer: usize,
        /// Sparse `(output, source)` pairs; see [`TimeWarp::from_pairs`].
        map: Vec<(usize, usize)>,
    },
    Duplicate {
        layer: usize,
        offset: i64,
        count: usize,
    },
    SetOrder {
        orders: Vec<Vec<usize>>,
    },
}

/// Ordered list of retiming operations, applied in sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EditScript {
    pub ops: Vec<EditOp>,
}

impl EditScript {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("edit script serializes")
    }
}

/// Output of [`apply_edit`]: retimed frames plus the edited layer stacks.
#[derive(Debug, Clone)]
pub struct EditResult {
    pub clip: VideoClip,
    pub layers: Vec<LayerSet>,
    pub order: CompositeOrder,
    /// `sources[t][j]` is the 1-based input frame that `layers[t].layers[j]`
    /// was taken from, for re-registration under camera motion.
    pub sources: Vec<Vec<usize>>,
}

#[derive(Clone)]
struct Track {
    src: usize,
    map: Vec<usize>,
    alive: bool,
}

fn resolve(tracks: &[Track], layer: usize) -> Result<usize> {
    if layer == 0 || layer > tracks.len() || !tracks[layer - 1].alive {
        return Err(CoreError::EditOutOfRange(format!("no such layer: {layer}")));
    }
    Ok(layer)
}

/// Applies an edit script to per-frame layer stacks and recomposites.
///
/// The output timeline has the same length as the input; each operation
/// rewrites one layer's source-frame map (or the per-frame order), so a
/// frozen layer that is later warped stays frozen, and so on.
pub fn apply_edit(
    layers: &[LayerSet],
    order: &CompositeOrder,
    edit: &EditScript,
) -> Result<EditResult> {
    let k = layers.len();
    if k == 0 {
        return Err(CoreError::ShapeMismatch("no frames to edit".into()));
    }
    let n = layers[0].n_layers();
    for (t0, set) in layers.iter().enumerate() {
        if set.n_layers() != n {
            return Err(CoreError::ShapeMismatch(format!(
                "frame {} has {} layers, expected {n}",
                t0 + 1,
                set.n_layers()
            )));
        }
    }
    if order.n_frames() != k {
        return Err(CoreError::ShapeMismatch(format!(
            "order covers {} frames, expected {k}",
            order.n_frames()
        )));
    }

    let mut tracks: Vec<Track> = (0..n)
        .map(|i| Track {
            src: i,
            map: (1..=k).collect(),
            alive: true,
        })
        .collect();
    let mut orders: Vec<Vec<usize>> = order.all().to_vec();

    for op in &edit.ops {
        match op {
            EditOp::Remove { layer } => {
                let id = resolve(&tracks, *layer)?;
                tracks[id - 1].alive = false;
                for o in &mut orders {
                    o.retain(|&x| x != id);
                }
            }
            EditOp::Freeze { layer, t0 } => {
                let id = resolve(&tracks, *layer)?;
                if *t0 == 0 || *t0 > k {
                    return Err(CoreError::EditOutOfRange(format!(
                        "t0 {t0} outside 1..={k}"
                    )));
                }
                let s = tracks[id - 1].map[t0 - 1];
                tracks[id - 1].map = vec![s; k];
            }
            EditOp::Warp { layer, map } => {
                let id = resolve(&tracks, *layer)?;
                let w = TimeWarp::from_pairs(map, k, k)?;
                let old = std::mem::take(&mut tracks[id - 1].map);
                tracks[id - 1].map = (1..=k).map(|t| old[w.source(t) - 1]).collect();
            }
            EditOp::Duplicate {
                layer,
                offset,
                count,
            } => {
                let id = resolve(&tracks, *layer)?;
                let base = tracks[id - 1].clone();
                let mut new_ids = Vec::with_capacity(*count);
                for c in 1..=*count {
                    let shift = offset * c as i64;
                    let map = (1..=k as i64)
                        .map(|t| base.map[((t - shift).clamp(1, k as i64) as usize) - 1])
                        .collect();
                    tracks.push(Track {
                        src: base.src,
                        map,
                        alive: true,
                    });
                    new_ids.push(tracks.len());
                }
                for o in &mut orders {
                    if let Some(pos) = o.iter().position(|&x| x == id) {
                        for (j, &nid) in new_ids.iter().enumerate() {
                            o.insert(pos + 1 + j, nid);
                        }
                    }
                }
            }
            EditOp::SetOrder { orders: new_orders } => {
                if new_orders.len() != k {
                    return Err(CoreError::EditOutOfRange(format!(
                        "set_order covers {} frames, expected {k}",
                        new_orders.len()
                    )));
                }
                let live: BTreeSet<usize> = tracks
                    .iter()
                    .enumerate()
                    .filter(|(_, tr)| tr.alive)
                    .map(|(i, _)| i + 1)
                    .collect();
                for (t0, o) in new_orders.iter().enumerate() {
                    let ids: BTreeSet<usize> = o.iter().copied().collect();
                    if ids.len() != o.len() || ids != live {
                        return Err(CoreError::EditOutOfRange(format!(
                            "set_order at t={} is not a permutation of live layers",
                            t0 + 1
                        )));
                    }
                }
                orders = new_orders.clone();
            }
        }
    }

    let live: Vec<usize> = tracks
        .iter()
        .enumerate()
        .filter(|(_, tr)| tr.alive)
        .map(|(i, _)| i + 1)
        .collect();
    let mut compact = vec![0usize; tracks.len() + 1];
    for (j, &id) in live.iter().enumerate() {
        compact[id] = j + 1;
    }

    let mut out_layers = Vec::with_capacity(k);
    let mut out_orders = Vec::with_capacity(k);
    let mut out_sources = Vec::with_capacity(k);
    let mut frames = Vec::with_capacity(k);
    for t0 in 0..k {
        let stack = live
            .iter()
            .map(|&id| {
                let tr = &tracks[id - 1];
                layers[tr.map[t0] - 1].layers[tr.src].clone()
            })
            .collect();
        let sources: Vec<usize> = live.iter().map(|&id| tracks[id - 1].map[t0]).collect();
        let set = LayerSet::new(layers[t0].background.clone(), stack);
        let o: Vec<usize> = orders[t0].iter().map(|&id| compact[id]).collect();
        let (mut rgb, _) = over_composite(&set, &o)?;
        rgb.mapv_inplace(|v| v.clamp(0.0, 1.0));
        frames.push(rgb);
        out_layers.push(set);
        out_orders.push(o);
        out_sources.push(sources);
    }
    let order = CompositeOrder::new(out_orders, live.len())?;
    Ok(EditResult {
        clip: VideoClip::new(frames)?,
        layers: out_layers,
        order,
        sources: out_sources,
    })
}

// ---------------------------------------------------------------------------
// Motion signals

/// Per-frame scalar motion track, min-max normalized to [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSignal {
    pub values: Vec<f64>,
}

impl MotionSignal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Vertical center of mass of each frame's alpha, normalized over the
/// sequence. A constant track normalizes to all 0.5.
pub fn motion_signal(alphas: &[Array2<f32>]) -> Result<MotionSignal> {
    let mut com = Vec::with_capacity(alphas.len());
    for (t0, a) in alphas.iter().enumerate() {
        let mut wsum = 0f64;
        let mut ysum = 0f64;
        for ((y, _), &v) in a.indexed_iter() {
            wsum += v as f64;
            ysum += y as f64 * v as f64;
        }
        if wsum <= 0.0 {
            return Err(CoreError::EmptyLayer { frame: t0 + 1 });
        }
        com.push(ysum / wsum);
    }
    let min = com.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = com.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if max - min < 1e-9 {
        vec![0.5; com.len()]
    } else {
        com.iter().map(|v| (v - min) / (max - min)).collect()
    };
    Ok(MotionSignal { values })
}

// ---------------------------------------------------------------------------
// Correlation Optimized Warping

/// COW search parameters: number of segments and per-segment length slack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CowParams {
    pub segments: usize,
    pub slack: usize,
}

impl CowParams {
    pub fn default_for(k: usize) -> Self {
        Self {
            segments: (k / 8).max(1),
            slack: (k / 16).max(1),
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va < 1e-18 || vb < 1e-18 {
        0.0
    } else {
        num / (va.sqrt() * vb.sqrt())
    }
}

/// Linearly resamples `sig` between 1-based positions `b0..=b1` to `len`
/// points.
fn resample(sig: &[f64], b0: usize, b1: usize, len: usize) -> Vec<f64> {
    (0..len)
        .map(|j| {
            let pos = b0 as f64 + (b1 - b0) as f64 * j as f64 / (len - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let frac = pos - lo as f64;
            sig[lo - 1] * (1.0 - frac) + sig[hi - 1] * frac
        })
        .collect()
}

/// Evenly spaced 1-based boundary positions over a length-`len` signal.
fn boundaries(len: usize, segments: usize) -> Vec<usize> {
    (0..=segments)
        .map(|s| 1 + ((s * (len - 1)) as f64 / segments as f64).round() as usize)
        .collect()
}

/// Aligns `target` to `reference` by Correlation Optimized Warping.
///
/// The target is cut into `segments` pieces whose lengths may deviate by
/// `±slack` samples from uniform; a dynamic program picks the cut points
/// maximizing summed per-segment Pearson correlation against the evenly
/// split reference. Ties break toward the diagonal, so two constant
/// signals align with the identity warp. The result maps the reference
/// timeline onto target frames with fixed endpoints.
pub fn align_signals(
    reference: &MotionSignal,
    target: &MotionSignal,
    params: CowParams,
) -> Result<TimeWarp> {
    let r_len = reference.len();
    let t_len = target.len();
    let segs = params.segments.max(1);
    let need = segs + 1;
    if r_len < need {
        return Err(CoreError::SignalTooShort { len: r_len, need });
    }
    if t_len < need {
        return Err(CoreError::SignalTooShort { len: t_len, need });
    }

    let rb = boundaries(r_len, segs);
    let diag = boundaries(t_len, segs);

    const EPS: f64 = 1e-12;
    let mut score = vec![vec![f64::NEG_INFINITY; t_len + 1]; segs + 1];
    let mut penalty = vec![vec![f64::INFINITY; t_len + 1]; segs + 1];
    let mut parent = vec![vec![0usize; t_len + 1]; segs + 1];
    score[0][1] = 0.0;
    penalty[0][1] = 0.0;

    for s in 0..segs {
        let base = diag[s + 1] - diag[s];
        let lo = base.saturating_sub(params.slack);
        let hi = base + params.slack;
        let ref_seg = &reference.values[rb[s] - 1..rb[s + 1]];
        for b in 1..=t_len {
            if score[s][b] == f64::NEG_INFINITY {
                continue;
            }
            for step in lo..=hi {
                let b2 = b + step;
                if b2 > t_len || (s + 1 == segs && b2 != t_len) {
                    continue;
                }
                let seg = resample(&target.values, b, b2, ref_seg.len());
                let cand = score[s][b] + pearson(ref_seg, &seg);
                let pen = penalty[s][b] + (b2 as f64 - diag[s + 1] as f64).abs();
                let better = cand > score[s + 1][b2] + EPS
                    || (cand >= score[s + 1][b2] - EPS && pen + EPS < penalty[s + 1][b2]);
                if better {
                    score[s + 1][b2] = cand.max(score[s + 1][b2]);
                    penalty[s + 1][b2] = pen;
                    parent[s + 1][b2] = b;
                }
            }
        }
    }

    let mut cuts = vec![0usize; segs + 1];
    cuts[segs] = t_len;
    for s in (1..=segs).rev() {
        cuts[s - 1] = parent[s][cuts[s]];
    }
    debug_assert_eq!(cuts[0], 1);

    let mut map = vec![0usize; r_len];
    for s in 0..segs {
        let (r0, r1) = (rb[s], rb[s + 1]);
        let (b0, b1) = (cuts[s], cuts[s + 1]);
        for t in r0..=r1 {
            let frac = (t - r0) as f64 / (r1 - r0) as f64;
            map[t - 1] = (b0 as f64 + frac * (b1 - b0) as f64).round() as usize;
        }
    }
    TimeWarp::new(map, t_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compose::Rgba;
    use ndarray::Array3;
    use proptest::prelude::*;

    const K: usize = 6;
    const H: usize = 4;
    const W: usize = 8;

    fn block(x: usize, y: usize, color: [f32; 3]) -> Rgba {
        let mut c = Array3::zeros((3, H, W));
        let mut a = Array2::zeros((H, W));
        for dy in 0..2 {
            for dx in 0..2 {
                for ch in 0..3 {
                    c[[ch, y + dy, x + dx]] = color[ch];
                }
                a[[y + dy, x + dx]] = 1.0;
            }
        }
        Rgba::new(c, a)
    }

    /// Two 2×2 blocks sweeping in opposite directions over grey.
    fn scene() -> (Vec<LayerSet>, CompositeOrder) {
        let layers = (0..K)
            .map(|t| {
                LayerSet::new(
                    Array3::from_elem((3, H, W), 0.1),
                    vec![
                        block(t, 0, [1.0, 0.0, 0.0]),
                        block(5 - t, 0, [0.0, 0.0, 1.0]),
                    ],
                )
            })
            .collect();
        let order = CompositeOrder::new(vec![vec![1, 2]; K], 2).unwrap();
        (layers, order)
    }

    fn composites(layers: &[LayerSet], order: &CompositeOrder) -> Vec<Array3<f32>> {
        layers
            .iter()
            .enumerate()
            .map(|(t, s)| over_composite(s, order.frame(t)).unwrap().0)
            .collect()
    }

    fn max_diff(a: &Array3<f32>, b: &Array3<f32>) -> f32 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn empty_script_reproduces_the_input() {
        let (layers, order) = scene();
        let want = composites(&layers, &order);
        let res = apply_edit(&layers, &order, &EditScript::default()).unwrap();
        for (t, w) in want.iter().enumerate() {
            assert_eq!(max_diff(res.clip.frame(t), w), 0.0);
        }
        assert_eq!(res.order.frame(0), &[1, 2]);
    }

    #[test]
    fn remove_composites_without_the_layer() {
        let (layers, order) = scene();
        let script = EditScript {
            ops: vec![EditOp::Remove { layer: 1 }],
        };
        let res = apply_edit(&layers, &order, &script).unwrap();
        let solo: Vec<LayerSet> = layers
            .iter()
            .map(|s| LayerSet::new(s.background.clone(), vec![s.layers[1].clone()]))
            .collect();
        let solo_order = CompositeOrder::new(vec![vec![1]; K], 1).unwrap();
        let want = composites(&solo, &solo_order);
        for (t, w) in want.iter().enumerate() {
            assert_eq!(max_diff(res.clip.frame(t), w), 0.0);
        }
        assert_eq!(res.layers[0].n_layers(), 1);
    }

    #[test]
    fn freeze_holds_one_source_frame() {
        let (layers, order) = scene();
        let script = EditScript {
            ops: vec![EditOp::Freeze { layer: 2, t0: 3 }],
        };
        let res = apply_edit(&layers, &order, &script).unwrap();
        for t in 0..K {
            assert_eq!(
                res.layers[t].layers[1].alpha,
                layers[2].layers[1].alpha,
                "frozen layer differs at t={t}"
            );
        }
        // The freeze source frame itself is unchanged.
        let want = composites(&layers, &order);
        assert_eq!(max_diff(res.clip.frame(2), &want[2]), 0.0);
    }

    #[test]
    fn warp_pairs_fill_gaps_with_the_earlier_source() {
        let w = TimeWarp::from_pairs(&[(1, 1), (4, 2)], 6, 6).unwrap();
        assert_eq!(w.map(), &[1, 1, 1, 2, 2, 2]);

        let (layers, order) = scene();
        let script = EditScript {
            ops: vec![EditOp::Warp {
                layer: 1,
                map: vec![(1, 1), (4, 2)],
            }],
        };
        let res = apply_edit(&layers, &order, &script).unwrap();
        for t in 0..K {
            let src = if t < 3 { 0 } else { 1 };
            assert_eq!(res.layers[t].layers[0].alpha, layers[src].layers[0].alpha);
        }
    }

    #[test]
    fn warp_validation_rejects_bad_maps() {
        let err = TimeWarp::new(vec![2, 1], 3).unwrap_err();
        assert!(err.to_string().contains("not monotone"));
        let err = TimeWarp::new(vec![1, 4], 3).unwrap_err();
        assert!(err.to_string().contains("outside 1..=3"));
        let err = TimeWarp::from_pairs(&[(9, 1)], 6, 6).unwrap_err();
        assert!(err.to_string().starts_with("edit out of range"));
    }

    #[test]
    fn duplicate_stacks_copies_in_front() {
        let (layers, order) = scene();
        let script = EditScript {
            ops: vec![EditOp::Duplicate {
                layer: 1,
                offset: 2,
                count: 2,
            }],
        };
        let res = apply_edit(&layers, &order, &script).unwrap();
        assert_eq!(res.layers[0].n_layers(), 4);
        assert_eq!(res.order.frame(0), &[1, 3, 4, 2]);
        // Copy c lags the original by 2c frames, clamped at the start.
        assert_eq!(res.layers[5].layers[2].alpha, layers[3].layers[0].alpha);
        assert_eq!(res.layers[5].layers[3].alpha, layers[1].layers[0].alpha);
        assert_eq!(res.layers[0].layers[2].alpha, layers[0].layers[0].alpha);
    }

    #[test]
    fn remove_and_duplicate_of_distinct_layers_commute() {
        let (layers, order) = scene();
        let ab = EditScript {
            ops: vec![
                EditOp::Remove { layer: 2 },
                EditOp::Duplicate { layer: 1, offset: 1, count: 1 },
            ],
        };
        let ba = EditScript {
            ops: vec![
                EditOp::Duplicate { layer: 1, offset: 1, count: 1 },
                EditOp::Remove { layer: 2 },
            ],
        };
        let x = apply_edit(&layers, &order, &ab).unwrap();
        let y = apply_edit(&layers, &order, &ba).unwrap();
        for t in 0..K {
            assert_eq!(max_diff(x.clip.frame(t), y.clip.frame(t)), 0.0);
        }
    }

    #[test]
    fn set_order_overrides_the_stacking() {
        let (layers, order) = scene();
        let script = EditScript {
            ops: vec![EditOp::SetOrder {
                orders: vec![vec![2, 1]; K],
            }],
        };
        let res = apply_edit(&layers, &order, &script).unwrap();
        // At t=2 the blocks overlap on column 3; red is now in front.
        assert_eq!(res.clip.frame(2)[[0, 0, 3]], 1.0);
        let plain = composites(&layers, &order);
        assert_eq!(plain[2][[2, 0, 3]], 1.0);
    }

    #[test]
    fn edits_referencing_nothing_fail() {
        let (layers, order) = scene();
        for script in [
            EditScript { ops: vec![EditOp::Remove { layer: 7 }] },
            EditScript { ops: vec![EditOp::Remove { layer: 0 }] },
            EditScript { ops: vec![EditOp::Freeze { layer: 1, t0: 9 }] },
            EditScript {
                ops: vec![EditOp::Remove { layer: 1 }, EditOp::Remove { layer: 1 }],
            },
            EditScript {
                ops: vec![EditOp::SetOrder { orders: vec![vec![1, 2]] }],
            },
            EditScript {
                ops: vec![EditOp::SetOrder { orders: vec![vec![1, 1]; K] }],
            },
        ] {
            let err = apply_edit(&layers, &order, &script).err().unwrap();
            assert!(
                err.to_string().starts_with("edit out of range"),
                "{script:?} gave {err}"
            );
        }
    }

    #[test]
    fn script_json_matches_the_published_schema() {
        let text = r#"{"ops":[{"type":"remove","layer":1},
            {"type":"freeze","layer":2,"t0":34},
            {"type":"warp","layer":3,"map":[[1,1],[2,1],[3,2]]},
            {"type":"duplicate","layer":0,"offset":12,"count":2}]}"#;
        let script = EditScript::from_json(text).unwrap();
        assert_eq!(script.ops.len(), 4);
        assert_eq!(script.ops[0], EditOp::Remove { layer: 1 });
        assert_eq!(
            script.ops[2],
            EditOp::Warp { layer: 3, map: vec![(1, 1), (2, 1), (3, 2)] }
        );
        let back = EditScript::from_json(&script.to_json()).unwrap();
        assert_eq!(back, script);

        // Layer 0 parses but never resolves.
        let (layers, order) = scene();
        let dup = EditScript { ops: vec![script.ops[3].clone()] };
        let err = apply_edit(&layers, &order, &dup).err().unwrap();
        assert!(err.to_string().contains("no such layer: 0"));
    }

    #[test]
    fn sequential_warps_equal_their_composition() {
        let (layers, order) = scene();
        let w1 = TimeWarp::from_pairs(&[(1, 2), (4, 5)], K, K).unwrap();
        let w2 = TimeWarp::from_pairs(&[(1, 1), (3, 3), (5, 4)], K, K).unwrap();
        let combined = w1.compose(&w2).unwrap();

        let two_step = EditScript {
            ops: vec![
                EditOp::Warp { layer: 1, map: w1.to_pairs() },
                EditOp::Warp { layer: 1, map: w2.to_pairs() },
            ],
        };
        let one_step = EditScript {
            ops: vec![EditOp::Warp { layer: 1, map: combined.to_pairs() }],
        };
        let x = apply_edit(&layers, &order, &two_step).unwrap();
        let y = apply_edit(&layers, &order, &one_step).unwrap();
        for t in 0..K {
            assert_eq!(max_diff(x.clip.frame(t), y.clip.frame(t)), 0.0);
        }
    }

    fn falling_alphas(k: usize) -> Vec<Array2<f32>> {
        (0..k)
            .map(|t| {
                let mut a = Array2::zeros((k + 2, 3));
                a[[t + 1, 1]] = 1.0;
                a
            })
            .collect()
    }

    #[test]
    fn motion_signal_of_a_constant_fall_is_affine() {
        let sig = motion_signal(&falling_alphas(5)).unwrap();
        for (t, v) in sig.values.iter().enumerate() {
            assert!((v - t as f64 / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn motion_signal_guards_static_and_empty_layers() {
        let static_a = vec![Array2::from_elem((4, 4), 0.3); 6];
        let sig = motion_signal(&static_a).unwrap();
        assert!(sig.values.iter().all(|&v| v == 0.5));

        let mut alphas = falling_alphas(4);
        alphas[2].fill(0.0);
        let err = motion_signal(&alphas).err().unwrap();
        assert_eq!(err.to_string(), "empty layer at frame 3");
    }

    fn sinusoid(k: usize, period: f64) -> MotionSignal {
        let raw: Vec<f64> = (0..k)
            .map(|t| (2.0 * std::f64::consts::PI * t as f64 / period).sin())
            .collect();
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        MotionSignal {
            values: raw.iter().map(|v| (v - min) / (max - min)).collect(),
        }
    }

    #[test]
    fn aligning_a_signal_with_itself_is_the_identity() {
        let sig = sinusoid(33, 11.0);
        let w = align_signals(&sig, &sig, CowParams { segments: 4, slack: 2 }).unwrap();
        assert_eq!(w, TimeWarp::identity(33));
    }

    #[test]
    fn constant_signals_tie_break_to_the_identity() {
        let a = MotionSignal { values: vec![0.5; 24] };
        let w = align_signals(&a, &a, CowParams { segments: 3, slack: 4 }).unwrap();
        assert_eq!(w, TimeWarp::identity(24));
    }

    #[test]
    fn five_frame_delay_is_recovered_on_the_interior() {
        let k = 48;
        let reference = sinusoid(k, 16.0);
        let target = MotionSignal {
            values: (0..k)
                .map(|t| reference.values[t.saturating_sub(5)])
                .collect(),
        };
        let params = CowParams { segments: 8, slack: 6 };
        let w = align_signals(&reference, &target, params).unwrap();
        let rb = boundaries(k, params.segments);
        for t in rb[1]..=rb[params.segments - 1] {
            let want = (t + 5).min(k);
            let got = w.source(t) as i64;
            assert!(
                (got - want as i64).abs() <= 1,
                "t={t}: warp {got}, want {want}±1"
            );
        }
    }

    #[test]
    fn dp_matches_exhaustive_search_on_a_small_case() {
        let reference = sinusoid(13, 7.0);
        let target = MotionSignal {
            values: (0..13).map(|t| reference.values[(t * 97 % 13).min(12)]).collect(),
        };
        let params = CowParams { segments: 3, slack: 2 };
        let w = align_signals(&reference, &target, params).unwrap();

        // Enumerate every admissible cut pair and score it independently.
        let rb = boundaries(13, 3);
        let diag = boundaries(13, 3);
        let corr = |r0: usize, r1: usize, b0: usize, b1: usize| -> f64 {
            let len = r1 - r0 + 1;
            let a = &reference.values[r0 - 1..r1];
            let b = resample(&target.values, b0, b1, len);
            let n = len as f64;
            let (sa, sb) = (a.iter().sum::<f64>(), b.iter().sum::<f64>());
            let saa = a.iter().map(|v| v * v).sum::<f64>();
            let sbb = b.iter().map(|v| v * v).sum::<f64>();
            let sab = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
            let cov = sab - sa * sb / n;
            let (va, vb) = (saa - sa * sa / n, sbb - sb * sb / n);
            if va < 1e-15 || vb < 1e-15 { 0.0 } else { cov / (va * vb).sqrt() }
        };
        let mut best = f64::NEG_INFINITY;
        let mut best_cuts = (0, 0);
        let mut best_pen = f64::INFINITY;
        for b1 in 1..=13usize {
            for b2 in b1..=13usize {
                let s0 = b1 - 1;
                let s1 = b2 - b1;
                let s2 = 13 - b2;
                let within = |step: usize, base: usize| {
                    step + params.slack >= base && step <= base + params.slack
                };
                if !(within(s0, diag[1] - diag[0])
                    && within(s1, diag[2] - diag[1])
                    && within(s2, diag[3] - diag[2]))
                {
                    continue;
                }
                let total = corr(rb[0], rb[1], 1, b1)
                    + corr(rb[1], rb[2], b1, b2)
                    + corr(rb[2], rb[3], b2, 13);
                let pen = (b1 as f64 - diag[1] as f64).abs() + (b2 as f64 - diag[2] as f64).abs();
                if total > best + 1e-12 || ((total - best).abs() <= 1e-12 && pen < best_pen) {
                    best = total;
                    best_cuts = (b1, b2);
                    best_pen = pen;
                }
            }
        }
        assert_eq!((w.source(rb[1]), w.source(rb[2])), best_cuts);
    }

    proptest! {
        #[test]
        fn align_outputs_are_valid_warps(
            seed in 0u64..500,
            r_len in 10usize..30,
            t_len in 10usize..30,
            segs in 2usize..5,
            slack in 0usize..4,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| MotionSignal {
                values: (0..n).map(|_| rng.gen::<f64>()).collect(),
            };
            let reference = mk(&mut rng, r_len);
            let target = mk(&mut rng, t_len);
            let w = align_signals(&reference, &target, CowParams { segments: segs, slack }).unwrap();
            prop_assert_eq!(w.len(), r_len);
            prop_assert_eq!(w.source(1), 1);
            prop_assert_eq!(w.source(r_len), t_len);
            for t in 2..=r_len {
                prop_assert!(w.source(t) >= w.source(t - 1));
                prop_assert!(w.source(t) >= 1 && w.source(t) <= t_len);
            }
        }
    }
}
