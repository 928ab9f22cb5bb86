//! Synthetic scene generator: sprites with companion squares, exact
//! ground-truth layers, and an independent edit oracle.
//!
//! Scenes pair each moving sprite with one or more squares whose motion is
//! either tied to the sprite or randomized. Trimaps cover only the sprite,
//! and UV maps parameterize only the sprite's rectangle, so everything a
//! decomposition learns about the squares comes from motion correlation.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{over_composite, LayerSet, Rgba};
use crate::dataio::{
    self, derive_trimap, CompositeOrder, Dataset, RunConfig, Trimap, UvMapSequence, VideoClip,
};
use crate::error::{CoreError, Result};
use crate::retime::{EditOp, EditScript, TimeWarp};
use crate::texture::UvMap;

pub const DESK_WIDTH: usize = 160;
pub const DESK_HEIGHT: usize = 96;
pub const DESK_FRAMES: usize = 48;
const SPRITE_W: usize = 24;
const SPRITE_H: usize = 48;
const SQUARE: usize = 12;

/// RGBA sprite image; color is straight (unpremultiplied).
#[derive(Debug, Clone)]
pub struct Sprite {
    /// `[3, h, w]`.
    pub color: Array3<f32>,
    /// `[h, w]` in [0,1].
    pub alpha: Array2<f32>,
}

impl Sprite {
    pub fn size(&self) -> (usize, usize) {
        self.alpha.dim()
    }
}

/// A person-like capsule (head circle over a body ellipse) with
/// anti-aliased edges and a vertical shading gradient.
pub fn person_sprite(h: usize, w: usize, base: [f32; 3]) -> Sprite {
    let head_c = (w as f64 / 2.0, h as f64 * 0.17);
    let head_r = w as f64 * 0.26;
    let body_c = (w as f64 / 2.0, h as f64 * 0.62);
    let body_ax = (w as f64 * 0.42, h as f64 * 0.37);
    let mut alpha = Array2::zeros((h, w));
    let mut color = Array3::zeros((3, h, w));
    for y in 0..h {
        let shade = 0.7 + 0.3 * (1.0 - y as f32 / h as f32);
        for x in 0..w {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let d_head = ((p.0 - head_c.0).powi(2) + (p.1 - head_c.1).powi(2)).sqrt() - head_r;
            let rho = ((p.0 - body_c.0) / body_ax.0).powi(2)
                + ((p.1 - body_c.1) / body_ax.1).powi(2);
            let d_body = (rho.sqrt() - 1.0) * body_ax.0.min(body_ax.1);
            let d = d_head.min(d_body);
            alpha[[y, x]] = (0.5 - d).clamp(0.0, 1.0) as f32;
            for c in 0..3 {
                color[[c, y, x]] = (base[c] * shade).min(1.0);
            }
        }
    }
    Sprite { color, alpha }
}

/// Solid square, fully opaque.
pub fn square_sprite(size: usize, color: [f32; 3]) -> Sprite {
    let mut c = Array3::zeros((3, size, size));
    for ch in 0..3 {
        c.index_axis_mut(ndarray::Axis(0), ch).fill(color[ch]);
    }
    Sprite {
        color: c,
        alpha: Array2::from_elem((size, size), 1.0),
    }
}

/// Sprite center position per frame, in pixels.
#[derive(Debug, Clone)]
pub enum Trajectory {
    Linear {
        from: (f64, f64),
        to: (f64, f64),
    },
    Sinusoid {
        center: (f64, f64),
        amplitude: (f64, f64),
        period: f64,
        phase: f64,
    },
    Path(Vec<(f64, f64)>),
}

impl Trajectory {
    fn position(&self, t: usize, k: usize) -> (f64, f64) {
        match self {
            Trajectory::Linear { from, to } => {
                let s = t as f64 / (k - 1) as f64;
                (from.0 + s * (to.0 - from.0), from.1 + s * (to.1 - from.1))
            }
            Trajectory::Sinusoid {
                center,
                amplitude,
                period,
                phase,
            } => {
                let a = (2.0 * std::f64::consts::PI * t as f64 / period + phase).sin();
                (center.0 + amplitude.0 * a, center.1 + amplitude.1 * a)
            }
            Trajectory::Path(p) => p[t],
        }
    }
}

/// How a companion square moves relative to its sprite.
#[derive(Debug, Clone)]
pub enum MotionRule {
    /// Constant offset from the sprite center — moves with it.
    LockedOffset { dx: f64, dy: f64 },
    /// Placed uniformly in the ring `[amplitude/2, amplitude]` around the
    /// sprite center, resampled independently every frame.
    RandomJitter { seed: u64, amplitude: f64 },
    /// Constant offset at polar coordinates relative to the sprite center.
    FixedOffsetAtDistance { distance: f64, angle: f64 },
}

#[derive(Debug, Clone)]
pub struct CompanionSpec {
    pub color: [f32; 3],
    pub size: usize,
    pub rule: MotionRule,
}

#[derive(Debug, Clone)]
pub struct ObjectSpec {
    pub sprite: Sprite,
    pub trajectory: Trajectory,
    pub companions: Vec<CompanionSpec>,
}

#[derive(Debug, Clone)]
pub enum Background {
    Flat([f32; 3]),
    Image(Array3<f32>),
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub background: Background,
    pub objects: Vec<ObjectSpec>,
    pub seed: u64,
    pub trimap_radius: usize,
}

/// Integer pixel rectangle (top-left corner plus extent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }
}

/// A generated dataset together with its exact ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub dataset: Dataset,
    /// Ground-truth layers per frame; each object's layer holds the sprite
    /// and all of its companion squares.
    pub gt: Vec<LayerSet>,
    /// Companion rectangles, `companions[layer][frame]`, 0-indexed.
    pub companions: Vec<Vec<Vec<Rect>>>,
    /// Sprite bounding rectangles, `sprites[layer][frame]`.
    pub sprites: Vec<Vec<Rect>>,
}

fn background_frame(bg: &Background, h: usize, w: usize) -> Result<Array3<f32>> {
    match bg {
        Background::Flat(c) => {
            let mut out = Array3::zeros((3, h, w));
            for ch in 0..3 {
                out.index_axis_mut(ndarray::Axis(0), ch).fill(c[ch]);
            }
            Ok(out)
        }
        Background::Image(img) => {
            if img.dim() != (3, h, w) {
                return Err(CoreError::ResolutionMismatch {
                    expected: (h, w),
                    got: (img.dim().1, img.dim().2),
                });
            }
            Ok(img.clone())
        }
    }
}

/// Alpha-over of a sprite onto a straight-alpha canvas, clipped to it.
fn draw_over(color: &mut Array3<f32>, alpha: &mut Array2<f32>, s: &Sprite, x0: i64, y0: i64) {
    let (h, w) = alpha.dim();
    let (sh, sw) = s.alpha.dim();
    for sy in 0..sh {
        let y = y0 + sy as i64;
        if y < 0 || y >= h as i64 {
            continue;
        }
        for sx in 0..sw {
            let x = x0 + sx as i64;
            if x < 0 || x >= w as i64 {
                continue;
            }
            let sa = s.alpha[[sy, sx]];
            if sa <= 0.0 {
                continue;
            }
            let (y, x) = (y as usize, x as usize);
            let da = alpha[[y, x]];
            let oa = sa + da * (1.0 - sa);
            for ch in 0..3 {
                let num = s.color[[ch, sy, sx]] * sa + color[[ch, y, x]] * da * (1.0 - sa);
                color[[ch, y, x]] = if oa > 0.0 { num / oa } else { 0.0 };
            }
            alpha[[y, x]] = oa;
        }
    }
}

fn jitter_rng(scene_seed: u64, rule_seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(scene_seed ^ rule_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Renders a scene: frames, UV maps, trimaps, order, and ground-truth
/// layers, all deterministic in the spec (seed included).
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    let k = spec.n_frames;
    let (h, w) = (spec.height, spec.width);
    if k < 2 {
        return Err(CoreError::BadConfig(format!("need at least 2 frames, got {k}")));
    }
    if spec.objects.is_empty() {
        return Err(CoreError::BadConfig("scene has no objects".into()));
    }
    let n = spec.objects.len();

    // Each jitter companion owns its RNG stream; frames consume it in order.
    let mut jitter: Vec<Vec<Option<ChaCha8Rng>>> = spec
        .objects
        .iter()
        .map(|obj| {
            obj.companions
                .iter()
                .map(|comp| match comp.rule {
                    MotionRule::RandomJitter { seed, .. } => Some(jitter_rng(spec.seed, seed)),
                    _ => None,
                })
                .collect()
        })
        .collect();

    let order: Vec<usize> = (1..=n).collect();
    let mut frames = Vec::with_capacity(k);
    let mut gt = Vec::with_capacity(k);
    let mut uv_layers: Vec<Vec<UvMap>> = vec![Vec::with_capacity(k); n];
    let mut tri_layers: Vec<Vec<Trimap>> = vec![Vec::with_capacity(k); n];
    let mut companions: Vec<Vec<Vec<Rect>>> = vec![vec![Vec::new(); k]; n];
    let mut sprites: Vec<Vec<Rect>> = vec![Vec::with_capacity(k); n];

    for t in 0..k {
        let bg = background_frame(&spec.background, h, w)?;
        let mut stack = Vec::with_capacity(n);
        for (i, obj) in spec.objects.iter().enumerate() {
            let (sh, sw) = obj.sprite.size();
            let (cx, cy) = obj.trajectory.position(t, k);
            let x0 = (cx - sw as f64 / 2.0).round() as i64;
            let y0 = (cy - sh as f64 / 2.0).round() as i64;
            if x0 < 0 || y0 < 0 || x0 + sw as i64 > w as i64 || y0 + sh as i64 > h as i64 {
                return Err(CoreError::TrajectoryOutOfBounds(format!(
                    "object {} at frame {}",
                    i + 1,
                    t + 1
                )));
            }

            let mut lc = Array3::zeros((3, h, w));
            let mut la = Array2::zeros((h, w));
            for (j, comp) in obj.companions.iter().enumerate() {
                let place = |dx: f64, dy: f64| {
                    let qx = ((cx + dx - comp.size as f64 / 2.0).round() as i64)
                        .clamp(0, (w - comp.size) as i64) as usize;
                    let qy = ((cy + dy - comp.size as f64 / 2.0).round() as i64)
                        .clamp(0, (h - comp.size) as i64) as usize;
                    (qx, qy)
                };
                let (qx, qy) = match &comp.rule {
                    MotionRule::LockedOffset { dx, dy } => place(*dx, *dy),
                    MotionRule::FixedOffsetAtDistance { distance, angle } => {
                        place(distance * angle.cos(), distance * angle.sin())
                    }
                    MotionRule::RandomJitter { amplitude, .. } => {
                        // Uniform in the ring, rejecting placements that
                        // would land inside the trimap's dilation band so
                        // the trimap-excludes-square invariant holds.
                        let rng = jitter[i][j].as_mut().unwrap();
                        let margin = spec.trimap_radius as i64 + 1;
                        let mut pos = (0, 0);
                        for _ in 0..64 {
                            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                            let rad = rng.gen_range(amplitude * 0.5..=*amplitude);
                            pos = place(rad * ang.cos(), rad * ang.sin());
                            let (qx, qy) = (pos.0 as i64, pos.1 as i64);
                            let sz = comp.size as i64;
                            let clear_x = qx + sz - 1 < x0 - margin || qx > x0 + sw as i64 - 1 + margin;
                            let clear_y = qy + sz - 1 < y0 - margin || qy > y0 + sh as i64 - 1 + margin;
                            if clear_x || clear_y {
                                break;
                            }
                        }
                        pos
                    }
                };
                draw_over(
                    &mut lc,
                    &mut la,
                    &square_sprite(comp.size, comp.color),
                    qx as i64,
                    qy as i64,
                );
                companions[i][t].push(Rect {
                    x: qx,
                    y: qy,
                    w: comp.size,
                    h: comp.size,
                });
            }
            draw_over(&mut lc, &mut la, &obj.sprite, x0, y0);
            let rect = Rect {
                x: x0 as usize,
                y: y0 as usize,
                w: sw,
                h: sh,
            };
            sprites[i].push(rect);
            stack.push(Rgba::new(lc, la));

            let mut uv = UvMap::empty(h, w);
            for sy in 0..sh {
                for sx in 0..sw {
                    let (y, x) = (rect.y + sy, rect.x + sx);
                    uv.part[[y, x]] = 1;
                    uv.u[[y, x]] = sx as f32 / (sw - 1) as f32;
                    uv.v[[y, x]] = sy as f32 / (sh - 1) as f32;
                }
            }
            uv_layers[i].push(uv);

            let mut mask = Array2::from_elem((h, w), false);
            for sy in 0..sh {
                for sx in 0..sw {
                    mask[[rect.y + sy, rect.x + sx]] = obj.sprite.alpha[[sy, sx]] > 0.5;
                }
            }
            tri_layers[i].push(derive_trimap(&mask, spec.trimap_radius));
        }

        let set = LayerSet::new(bg, stack);
        let (frame, _) = over_composite(&set, &order)?;
        frames.push(frame);
        gt.push(set);
    }

    let config = RunConfig {
        width: w,
        height: h,
        n_frames: k,
        n_layers: n,
        texture_parts: 1,
        trimap_radius: spec.trimap_radius,
        trimap_element: "square".into(),
    };
    let dataset = Dataset {
        clip: VideoClip::new(frames)?,
        uv: UvMapSequence::new(uv_layers)?,
        trimaps: tri_layers,
        order: CompositeOrder::new(vec![order; k], n)?,
        homographies: None,
        config,
    };
    Ok(SyntheticScene {
        dataset,
        gt,
        companions,
        sprites,
    })
}

// ---------------------------------------------------------------------------
// Presets

/// One sprite sweeping left to right with a locked square and a
/// per-frame randomized square.
pub fn video1(seed: u64) -> SceneSpec {
    SceneSpec {
        width: DESK_WIDTH,
        height: DESK_HEIGHT,
        n_frames: DESK_FRAMES,
        background: Background::Flat([0.42, 0.45, 0.50]),
        objects: vec![ObjectSpec {
            sprite: person_sprite(SPRITE_H, SPRITE_W, [0.85, 0.30, 0.25]),
            trajectory: Trajectory::Linear {
                from: (30.0, 56.0),
                to: (130.0, 56.0),
            },
            companions: vec![
                CompanionSpec {
                    color: [0.20, 0.75, 0.70],
                    size: SQUARE,
                    rule: MotionRule::LockedOffset { dx: -24.0, dy: -30.0 },
                },
                CompanionSpec {
                    color: [0.95, 0.65, 0.15],
                    size: SQUARE,
                    rule: MotionRule::RandomJitter { seed: 1, amplitude: 34.0 },
                },
            ],
        }],
        seed,
        trimap_radius: dataio::default_trimap_radius(DESK_HEIGHT),
    }
}

/// One sprite with two squares sharing its motion at different distances.
pub fn video2(seed: u64) -> SceneSpec {
    let mk = |color, distance| CompanionSpec {
        color,
        size: SQUARE,
        rule: MotionRule::FixedOffsetAtDistance {
            distance,
            angle: std::f64::consts::PI,
        },
    };
    SceneSpec {
        width: DESK_WIDTH,
        height: DESK_HEIGHT,
        n_frames: DESK_FRAMES,
        background: Background::Flat([0.42, 0.45, 0.50]),
        objects: vec![ObjectSpec {
            sprite: person_sprite(SPRITE_H, SPRITE_W, [0.55, 0.35, 0.80]),
            trajectory: Trajectory::Linear {
                from: (58.0, 48.0),
                to: (140.0, 48.0),
            },
            companions: vec![mk([0.90, 0.80, 0.20], 24.0), mk([0.25, 0.60, 0.90], 48.0)],
        }],
        seed,
        trimap_radius: dataio::default_trimap_radius(DESK_HEIGHT),
    }
}

/// A vertical oscillator with a yellow square plus a horizontal translator
/// with a green square; the translator crosses in front of the oscillator's
/// square for several frames.
pub fn two_person(seed: u64) -> SceneSpec {
    SceneSpec {
        width: DESK_WIDTH,
        height: DESK_HEIGHT,
        n_frames: DESK_FRAMES,
        background: Background::Flat([0.42, 0.45, 0.50]),
        objects: vec![
            ObjectSpec {
                sprite: person_sprite(SPRITE_H, SPRITE_W, [0.25, 0.45, 0.85]),
                trajectory: Trajectory::Sinusoid {
                    center: (112.0, 48.0),
                    amplitude: (0.0, 16.0),
                    period: 24.0,
                    phase: 0.0,
                },
                companions: vec![CompanionSpec {
                    color: [0.92, 0.85, 0.20],
                    size: SQUARE,
                    rule: MotionRule::LockedOffset { dx: -26.0, dy: -8.0 },
                }],
            },
            ObjectSpec {
                sprite: person_sprite(SPRITE_H, SPRITE_W, [0.85, 0.30, 0.25]),
                trajectory: Trajectory::Linear {
                    from: (26.0, 52.0),
                    to: (146.0, 52.0),
                },
                companions: vec![CompanionSpec {
                    color: [0.20, 0.70, 0.30],
                    size: SQUARE,
                    rule: MotionRule::LockedOffset { dx: 0.0, dy: 36.0 },
                }],
            },
        ],
        seed,
        trimap_radius: dataio::default_trimap_radius(DESK_HEIGHT),
    }
}

pub const PRESETS: [&str; 3] = ["video1", "video2", "two-person"];

pub fn preset(name: &str, seed: u64) -> Option<SceneSpec> {
    match name {
        "video1" => Some(video1(seed)),
        "video2" => Some(video2(seed)),
        "two-person" => Some(two_person(seed)),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Export

/// Writes the dataio layout plus `gt_layers/` (layer 00 is the background)
/// and `regions.json` with sprite and companion rectangles.
pub fn export_dataset(scene: &SyntheticScene, dir: &Path) -> Result<()> {
    let ds = &scene.dataset;
    let k = ds.n_frames();
    let n = ds.n_layers();
    let (h, w) = ds.resolution();

    fs::create_dir_all(dir.join("frames"))?;
    fs::create_dir_all(dir.join("gt_layers").join(dataio::layer_dir(0)))?;
    for i in 1..=n {
        fs::create_dir_all(dir.join("uv").join(dataio::layer_dir(i)))?;
        fs::create_dir_all(dir.join("trimaps").join(dataio::layer_dir(i)))?;
        fs::create_dir_all(dir.join("gt_layers").join(dataio::layer_dir(i)))?;
    }

    let opaque = Array2::from_elem((h, w), 1.0f32);
    for t in 1..=k {
        let name = dataio::frame_name(t);
        dataio::write_rgb_png(&dir.join("frames").join(&name), ds.clip.frame(t - 1))?;
        dataio::write_rgba_png(
            &dir.join("gt_layers").join(dataio::layer_dir(0)).join(&name),
            &scene.gt[t - 1].background,
            &opaque,
        )?;
        for i in 1..=n {
            dataio::write_uvm(
                &dir.join("uv").join(dataio::layer_dir(i)).join(dataio::uvm_name(t)),
                ds.uv.get(i - 1, t - 1),
            )?;
            dataio::write_trimap_png(
                &dir.join("trimaps").join(dataio::layer_dir(i)).join(&name),
                &ds.trimaps[i - 1][t - 1],
            )?;
            let layer = &scene.gt[t - 1].layers[i - 1];
            dataio::write_rgba_png(
                &dir.join("gt_layers").join(dataio::layer_dir(i)).join(&name),
                &layer.color,
                &layer.alpha,
            )?;
        }
    }
    fs::write(
        dir.join("order.json"),
        serde_json::to_string(ds.order.all())?,
    )?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&ds.config)?,
    )?;
    #[derive(Serialize)]
    struct Regions<'a> {
        sprites: &'a [Vec<Rect>],
        companions: &'a [Vec<Vec<Rect>>],
    }
    fs::write(
        dir.join("regions.json"),
        serde_json::to_string(&Regions {
            sprites: &scene.sprites,
            companions: &scene.companions,
        })?,
    )?;
    Ok(())
}

/// Sprite and companion rectangles as stored in `regions.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneRegions {
    pub sprites: Vec<Vec<Rect>>,
    pub companions: Vec<Vec<Vec<Rect>>>,
}

pub fn load_regions(dir: &Path) -> Result<SceneRegions> {
    let path = dir.join("regions.json");
    if !path.exists() {
        return Err(CoreError::IncompleteDataset(path));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

// ---------------------------------------------------------------------------
// Ground-truth edit oracle

/// Applies an edit script directly to the ground-truth layers and
/// recomposites front-to-back. Deliberately a separate implementation from
/// the retiming pipeline so the two can check each other.
pub fn ground_truth_edit(scene: &SyntheticScene, edit: &EditScript) -> Result<VideoClip> {
    let k = scene.gt.len();
    let n = scene.gt[0].n_layers();
    let (h, w) = scene.gt[0].resolution();

    // 0-based track state: source object, per-output-frame source frame.
    let mut obj: Vec<usize> = (0..n).collect();
    let mut warp: Vec<Vec<usize>> = (0..n).map(|_| (0..k).collect()).collect();
    let mut live: Vec<bool> = vec![true; n];
    let mut orders: Vec<Vec<usize>> = scene
        .dataset
        .order
        .all()
        .iter()
        .map(|o| o.iter().map(|&id| id - 1).collect())
        .collect();

    let check = |live: &[bool], layer: usize| -> Result<usize> {
        if layer == 0 || layer > live.len() || !live[layer - 1] {
            return Err(CoreError::EditOutOfRange(format!("no such layer: {layer}")));
        }
        Ok(layer - 1)
    };

    for op in &edit.ops {
        match op {
            EditOp::Remove { layer } => {
                let id = check(&live, *layer)?;
                live[id] = false;
                for o in orders.iter_mut() {
                    o.retain(|&x| x != id);
                }
            }
            EditOp::Freeze { layer, t0 } => {
                let id = check(&live, *layer)?;
                if *t0 == 0 || *t0 > k {
                    return Err(CoreError::EditOutOfRange(format!(
                        "t0 {t0} outside 1..={k}"
                    )));
                }
                warp[id] = vec![warp[id][t0 - 1]; k];
            }
            EditOp::Warp { layer, map } => {
                let id = check(&live, *layer)?;
                let tw = TimeWarp::from_pairs(map, k, k)?;
                warp[id] = (1..=k).map(|t| warp[id][tw.source(t) - 1]).collect();
            }
            EditOp::Duplicate {
                layer,
                offset,
                count,
            } => {
                let id = check(&live, *layer)?;
                let first_new = live.len();
                for c in 1..=*count {
                    let shift = offset * c as i64;
                    warp.push(
                        (0..k as i64)
                            .map(|t| warp[id][(t - shift).clamp(0, k as i64 - 1) as usize])
                            .collect(),
                    );
                    obj.push(obj[id]);
                    live.push(true);
                }
                for o in orders.iter_mut() {
                    if let Some(pos) = o.iter().position(|&x| x == id) {
                        for c in 0..*count {
                            o.insert(pos + 1 + c, first_new + c);
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
                let want: std::collections::BTreeSet<usize> = live
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| a)
                    .map(|(i, _)| i + 1)
                    .collect();
                let mut next = Vec::with_capacity(k);
                for (t0, o) in new_orders.iter().enumerate() {
                    let ids: std::collections::BTreeSet<usize> = o.iter().copied().collect();
                    if ids.len() != o.len() || ids != want {
                        return Err(CoreError::EditOutOfRange(format!(
                            "set_order at t={} is not a permutation of live layers",
                            t0 + 1
                        )));
                    }
                    next.push(o.iter().map(|&id| id - 1).collect());
                }
                orders = next;
            }
        }
    }

    // Front-to-back accumulation under running transmittance; this is the
    // closed form dual of the over recursion used elsewhere.
    let mut frames = Vec::with_capacity(k);
    for t in 0..k {
        let mut out = Array3::<f32>::zeros((3, h, w));
        let mut trans = Array2::<f32>::from_elem((h, w), 1.0);
        for &id in orders[t].iter().rev() {
            let src = warp[id][t];
            let layer = &scene.gt[src].layers[obj[id]];
            for y in 0..h {
                for x in 0..w {
                    let a = layer.alpha[[y, x]] * trans[[y, x]];
                    for c in 0..3 {
                        out[[c, y, x]] += layer.color[[c, y, x]] * a;
                    }
                    trans[[y, x]] *= 1.0 - layer.alpha[[y, x]];
                }
            }
        }
        let bg = &scene.gt[t].background;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out[[c, y, x]] += bg[[c, y, x]] * trans[[y, x]];
                }
            }
        }
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        frames.push(out);
    }
    VideoClip::new(frames)
}
