//! Per-video optimization: curriculum ordering, augmentation, bootstrap
//! detection, the joint texture+renderer loop with its metrics log and
//! checkpoints, and the frozen-base refiner stage.
//!
//! Everything is driven by one seeded ChaCha stream whose exact position is
//! checkpointed, so an interrupted run resumed from disk replays the same
//! shuffles and jitters and lands on bit-identical weights.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, stack, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{atlas_extent, background_uv_from_homography, Homography};
use crate::compose::{
    over_composite, over_composite_backward, over_composite_cached, LayerSet, Rgba,
};
use crate::dataio::{Dataset, Trimap};
use crate::error::{CoreError, Result};
use crate::eval::region_psnr;
use crate::losses::{
    mask_distance, mask_distance_grad, recon_grad_frame, recon_loss_frame, reg_grad, reg_term,
    schedule, total_loss,
};
use crate::nn::{ops, Adam, Tensor};
use crate::renderer::{Refiner, RefinerConfig, Renderer, RendererConfig};
use crate::synth::SceneRegions;
use crate::texture::{
    compose_layer_input, compose_layer_input_backward, init_texture, sample_layer,
    sample_texture, sample_texture_backward, NeuralTexture, SampledTexture, UvMap,
};

const MASK_BOOTSTRAP_THRESHOLD: f64 = 0.02;
const CHECKPOINT_NAME: &str = "checkpoint.lnr";
const METRICS_NAME: &str = "metrics.csv";
const REFINER_METRICS_NAME: &str = "refiner_metrics.csv";

/// Knobs for one optimization run. Deserialization fills missing fields from
/// the desk defaults, so partial JSON configs stay valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Base-stage epochs.
    pub epochs: usize,
    /// Refiner-stage epochs.
    pub refiner_epochs: usize,
    pub lr: f64,
    /// Frames whose gradients are accumulated into one optimizer step.
    pub batch_frames: usize,
    /// While `e ≤ curriculum_epochs` only the easier half of the frames is
    /// visited.
    pub curriculum_epochs: usize,
    /// Brightness jitter amplitude `a`: factors drawn from [1−a, 1+a].
    pub brightness_amp: f32,
    /// Brightness jitter stops after this epoch.
    pub brightness_off_epoch: usize,
    /// Spatial jitter amplitude in pixels (applied to both axes).
    pub spatial_amp: usize,
    pub seed: u64,
    /// First encoder row's channel count; deeper rows grow by powers of two.
    pub width: usize,
    /// Channels per texture atlas.
    pub texture_channels: usize,
    /// Object atlases are `atlas_size × atlas_size` per part.
    pub atlas_size: usize,
    /// Epochs between region-PSNR evaluations (0 = never).
    pub eval_interval: usize,
    /// Epochs between intermediate checkpoints (0 = final only).
    pub checkpoint_interval: usize,
    /// `(height, width)` the run expects; must match the dataset.
    pub resolution: (usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// CPU-scale reference configuration: 160×96, width-32 renderer,
    /// 1200 epochs with a 600-epoch curriculum.
    pub fn desk() -> Self {
        Self {
            epochs: 1200,
            refiner_epochs: 500,
            lr: 1e-3,
            batch_frames: 1,
            curriculum_epochs: 600,
            brightness_amp: 0.2,
            brightness_off_epoch: 400,
            spatial_amp: 3,
            seed: 0,
            width: 32,
            texture_channels: 16,
            atlas_size: 64,
            eval_interval: 25,
            checkpoint_interval: 0,
            resolution: (96, 160),
        }
    }

    /// The published schedule: 2500 epochs, 1000-epoch curriculum, width-64
    /// renderer, 256² atlases.
    pub fn paper(resolution: (usize, usize)) -> Self {
        Self {
            epochs: 2500,
            refiner_epochs: 500,
            curriculum_epochs: 1000,
            width: 64,
            atlas_size: 256,
            eval_interval: 0,
            resolution,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(CoreError::BadConfig("epochs must be ≥ 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(CoreError::BadConfig(format!("lr {} must be > 0", self.lr)));
        }
        if self.batch_frames == 0 {
            return Err(CoreError::BadConfig("batch_frames must be ≥ 1".into()));
        }
        if self.texture_channels == 0 || self.atlas_size == 0 {
            return Err(CoreError::BadConfig(
                "texture_channels and atlas_size must be ≥ 1".into(),
            ));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(CoreError::BadConfig("resolution must be nonzero".into()));
        }
        if !(0.0..1.0).contains(&self.brightness_amp) {
            return Err(CoreError::BadConfig(format!(
                "brightness_amp {} outside [0, 1)",
                self.brightness_amp
            )));
        }
        self.renderer_config().validate()
    }

    pub fn renderer_config(&self) -> RendererConfig {
        RendererConfig {
            in_channels: self.texture_channels + 1,
            width: self.width,
            depth: 5,
            cap: if self.width >= 64 { 4 } else { 2 },
        }
    }

    /// Epoch at which `e_b` is forced if the mask loss never crosses the
    /// bootstrap threshold, so γ_m cannot stay at 50 forever.
    pub fn bootstrap_cap(&self) -> usize {
        ((self.epochs as f64 * 0.4).floor() as usize).max(1)
    }
}

/// Mutable loop state that survives checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    /// Bootstrap epoch; once set it never changes.
    pub e_b: Option<usize>,
    /// Epoch-mean mask loss, index e−1.
    pub mask_history: Vec<f64>,
}

impl TrainState {
    pub fn fresh() -> Self {
        Self { epoch: 0, e_b: None, mask_history: Vec::new() }
    }
}

/// Smallest 1-based epoch whose mean mask loss is below the bootstrap
/// threshold.
pub fn detect_bootstrap_epoch(epoch_mean_mask: &[f64]) -> Option<usize> {
    epoch_mean_mask
        .iter()
        .position(|&m| m < MASK_BOOTSTRAP_THRESHOLD)
        .map(|i| i + 1)
}

/// IoU of the trimap-value-1 regions of two layers.
pub fn trimap_pair_iou(a: &Trimap, b: &Trimap) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.m.iter().zip(b.m.iter()) {
        let x = x == 1.0;
        let y = y == 1.0;
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn trimap_bbox_center(t: &Trimap) -> Option<(f64, f64)> {
    let (h, w) = t.resolution();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if t.m[[y, x]] == 1.0 {
                any = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    any.then(|| ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0))
}

/// Frames ordered easiest first (1-based ids). Difficulty is the maximum
/// pairwise IoU of positive trimap regions; ties break toward the larger
/// minimum bounding-box-center distance (closer objects are harder). The
/// sort is stable, so fully tied frames keep their original order.
pub fn rank_difficulty(ds: &Dataset) -> Vec<usize> {
    let k = ds.n_frames();
    let n = ds.n_layers();
    let mut scored: Vec<(usize, f64, f64)> = (0..k)
        .map(|t| {
            let mut worst_iou = 0.0f64;
            let mut min_dist = f64::INFINITY;
            for i in 0..n {
                for j in i + 1..n {
                    let a = &ds.trimaps[i][t];
                    let b = &ds.trimaps[j][t];
                    worst_iou = worst_iou.max(trimap_pair_iou(a, b));
                    if let (Some(ca), Some(cb)) =
                        (trimap_bbox_center(a), trimap_bbox_center(b))
                    {
                        let d = ((ca.0 - cb.0).powi(2) + (ca.1 - cb.1).powi(2)).sqrt();
                        min_dist = min_dist.min(d);
                    }
                }
            }
            (t + 1, worst_iou, min_dist)
        })
        .collect();
    scored.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then_with(|| b.2.total_cmp(&a.2))
    });
    scored.into_iter().map(|(t, _, _)| t).collect()
}

/// The first ⌈K/2⌉ entries of a difficulty ranking.
pub fn easier_half(ranking: &[usize]) -> &[usize] {
    &ranking[..ranking.len().div_ceil(2)]
}

/// Per-epoch augmentation settings.
#[derive(Debug, Clone, Copy)]
pub struct AugmentParams {
    pub brightness_amp: f32,
    pub spatial_amp: usize,
    pub brightness_on: bool,
}

impl AugmentParams {
    pub fn at_epoch(cfg: &TrainConfig, e: usize) -> Self {
        Self {
            brightness_amp: cfg.brightness_amp,
            spatial_amp: cfg.spatial_amp,
            brightness_on: cfg.brightness_amp > 0.0 && e <= cfg.brightness_off_epoch,
        }
    }
}

fn shift_frame(f: &Array3<f32>, dx: i64, dy: i64) -> Array3<f32> {
    let (c, h, w) = f.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, x)| {
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
        f[[ci, sy, sx]]
    })
}

fn shift_uv(uv: &UvMap, dx: i64, dy: i64) -> UvMap {
    let (h, w) = uv.resolution();
    let mut out = UvMap::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let sy = y as i64 - dy;
            let sx = x as i64 - dx;
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                continue;
            }
            let (sy, sx) = (sy as usize, sx as usize);
            out.part[[y, x]] = uv.part[[sy, sx]];
            out.u[[y, x]] = uv.u[[sy, sx]];
            out.v[[y, x]] = uv.v[[sy, sx]];
        }
    }
    out
}

fn shift_trimap(m: &Array2<f32>, dx: i64, dy: i64) -> Array2<f32> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = y as i64 - dy;
        let sx = x as i64 - dx;
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            0.5
        } else {
            m[[sy as usize, sx as usize]]
        }
    })
}

/// Jitters one frame's training tuple. Brightness scales the frame only;
/// the spatial shift moves frame, UV maps, and trimaps identically so they
/// stay registered. Fill values: frame replicates its border, UV maps turn
/// to part 0, trimaps to the uncertain 0.5.
pub fn augment(
    frame: &Array3<f32>,
    uvs: &[UvMap],
    trimaps: &[Array2<f32>],
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> (Array3<f32>, Vec<UvMap>, Vec<Array2<f32>>) {
    let factor = if params.brightness_on {
        rng.gen_range(1.0 - params.brightness_amp..=1.0 + params.brightness_amp)
    } else {
        1.0
    };
    let (dx, dy) = if params.spatial_amp > 0 {
        let a = params.spatial_amp as i64;
        (rng.gen_range(-a..=a), rng.gen_range(-a..=a))
    } else {
        (0, 0)
    };

    let mut f = if (dx, dy) == (0, 0) {
        frame.clone()
    } else {
        shift_frame(frame, dx, dy)
    };
    if factor != 1.0 {
        f.mapv_inplace(|v| (v * factor).clamp(0.0, 1.0));
    }
    let uvs = uvs
        .iter()
        .map(|uv| if (dx, dy) == (0, 0) { uv.clone() } else { shift_uv(uv, dx, dy) })
        .collect();
    let trimaps = trimaps
        .iter()
        .map(|m| if (dx, dy) == (0, 0) { m.clone() } else { shift_trimap(m, dx, dy) })
        .collect();
    (f, uvs, trimaps)
}

/// The learnable state: shared renderer, per-video texture atlases, and the
/// refiner once its stage has run.
#[derive(Debug, Clone)]
pub struct Model {
    pub renderer: Renderer<f32>,
    pub textures: NeuralTexture<f32>,
    pub refiner: Option<Refiner<f32>>,
}

/// Deterministic fresh model for a dataset shape.
pub fn init_model(
    cfg: &TrainConfig,
    n_objects: usize,
    parts: usize,
    bg_atlas: (usize, usize),
) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let renderer = Renderer::new(cfg.renderer_config(), &mut rng)?;
    let textures = init_texture(
        n_objects,
        parts,
        cfg.texture_channels,
        cfg.atlas_size,
        cfg.atlas_size,
        bg_atlas,
        cfg.seed.wrapping_add(1),
    );
    Ok(Model { renderer, textures, refiner: None })
}

/// Background UV maps per frame plus the background-atlas pixel size.
/// Without homographies the camera is static: identity grids onto an atlas
/// the size of the frame. With homographies the atlas spans the union of
/// warped footprints.
pub fn background_geometry(ds: &Dataset) -> Result<(Vec<UvMap>, (usize, usize))> {
    let (h, w) = ds.resolution();
    let k = ds.n_frames();
    match &ds.homographies {
        None => Ok(((0..k).map(|_| UvMap::identity(h, w)).collect(), (h, w))),
        Some(rows) => {
            let homos: Vec<Homography> = rows
                .iter()
                .map(|r| Homography::from_rows(*r))
                .collect::<Result<_>>()?;
            let ext = atlas_extent(&homos, (h, w))?;
            let uvs = homos
                .iter()
                .map(|hm| background_uv_from_homography(hm, (h, w), ext))
                .collect();
            let bh = (ext[3] - ext[1]).round() as usize + 1;
            let bw = (ext[2] - ext[0]).round() as usize + 1;
            Ok((uvs, (bh, bw)))
        }
    }
}

/// Renderer inputs for one frame, one row per layer: row 0 is the background
/// (its sample everywhere, id 0), row i the 1-based object layer. Also
/// returns each row's id map for gradient routing.
pub fn frame_inputs(
    tex: &NeuralTexture<f32>,
    uvs: &[UvMap],
) -> Result<(Array4<f32>, Vec<Array2<u16>>)> {
    let (h, w) = uvs[0].resolution();
    let c = tex.channels();
    let bg = sample_texture(tex.background_view(), &uvs[0])?;
    let mut rows = Vec::with_capacity(uvs.len());
    let mut ids = Vec::with_capacity(uvs.len());
    let empty = SampledTexture::empty(c, h, w);
    rows.push(compose_layer_input(&empty, &bg)?);
    ids.push(empty.ids);
    for (i, uv) in uvs.iter().enumerate().skip(1) {
        let person = sample_layer(tex, i, uv)?;
        rows.push(compose_layer_input(&person, &bg)?);
        ids.push(person.ids);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok((stack(Axis(0), &views).unwrap(), ids))
}

/// Splits a `[N+1, 4, H, W]` render into background color plus person RGBA
/// layers. The background row's alpha channel is ignored: the background is
/// opaque by definition.
pub fn layer_set_from_rgba(rgba: &Array4<f32>) -> LayerSet {
    let b = rgba.dim().0;
    let background = rgba.slice(s![0, 0..3, .., ..]).to_owned();
    let layers = (1..b)
        .map(|i| {
            Rgba::new(
                rgba.slice(s![i, 0..3, .., ..]).to_owned(),
                rgba.slice(s![i, 3, .., ..]).to_owned(),
            )
        })
        .collect();
    LayerSet::new(background, layers)
}

/// Evaluation-mode decomposition of one frame (0-based index).
pub fn render_frame_eval(
    model: &Model,
    ds: &Dataset,
    bg_uvs: &[UvMap],
    t: usize,
) -> Result<LayerSet> {
    let mut uvs = Vec::with_capacity(ds.n_layers() + 1);
    uvs.push(bg_uvs[t].clone());
    for l in 0..ds.n_layers() {
        uvs.push(ds.uv.get(l, t).clone());
    }
    let (x, _) = frame_inputs(&model.textures, &uvs)?;
    let (rgba, _) = model.renderer.forward_eval(&x)?;
    Ok(layer_set_from_rgba(&rgba))
}

fn ensure_finite(total: f64, epoch: usize) -> Result<()> {
    if total.is_finite() {
        Ok(())
    } else {
        Err(CoreError::Diverged { epoch })
    }
}

/// Compresses a sorted 1-based frame list into `;`-separated runs
/// (`1-24` or `1;3-5;9`).
pub fn compress_frames(frames: &[usize]) -> String {
    let mut sorted = frames.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut parts: Vec<String> = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let start = sorted[i];
        let mut end = start;
        while i + 1 < sorted.len() && sorted[i + 1] == end + 1 {
            i += 1;
            end = sorted[i];
        }
        parts.push(if start == end {
            start.to_string()
        } else {
            format!("{start}-{end}")
        });
        i += 1;
    }
    parts.join(";")
}

/// Inverse of [`compress_frames`].
pub fn parse_frames(s: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    if s.is_empty() {
        return Ok(out);
    }
    for part in s.split(';') {
        let bad = || CoreError::InconsistentDataset(format!("bad frame run {part:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.parse().map_err(|_| bad())?;
                let b: usize = b.parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

/// One parsed metrics row. Region PSNR cells are `None` on epochs without an
/// evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub e_recon: f64,
    pub e_mask: f64,
    pub e_reg: f64,
    pub e_total: f64,
    pub gamma_m: f64,
    pub gamma: f64,
    pub beta: f64,
    pub regions: Vec<Option<f64>>,
    pub frames_visited: Vec<usize>,
}

/// The whole metrics log: region column names plus rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub region_names: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

const FIXED_COLUMNS: [&str; 8] =
    ["epoch", "e_recon", "e_mask", "e_reg", "e_total", "gamma_m", "gamma", "beta"];

fn metrics_header(region_names: &[String]) -> String {
    let mut cols: Vec<&str> = FIXED_COLUMNS.to_vec();
    cols.extend(region_names.iter().map(|s| s.as_str()));
    cols.push("frames_visited");
    cols.join(",")
}

fn format_row(row: &MetricsRow) -> String {
    let mut cells = vec![
        row.epoch.to_string(),
        format!("{:.6}", row.e_recon),
        format!("{:.6}", row.e_mask),
        format!("{:.6}", row.e_reg),
        format!("{:.6}", row.e_total),
        format!("{}", row.gamma_m),
        format!("{}", row.gamma),
        format!("{}", row.beta),
    ];
    for r in &row.regions {
        cells.push(match r {
            Some(v) => format!("{v:.3}"),
            None => String::new(),
        });
    }
    cells.push(compress_frames(&row.frames_visited));
    cells.join(",")
}

/// Parses a metrics.csv produced by [`train`].
pub fn read_metrics(path: &Path) -> Result<Metrics> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| CoreError::InconsistentDataset("empty metrics file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let bad_header = cols.len() < FIXED_COLUMNS.len() + 1
        || cols[..FIXED_COLUMNS.len()] != FIXED_COLUMNS
        || cols.last() != Some(&"frames_visited");
    if bad_header {
        return Err(CoreError::InconsistentDataset(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    let region_names: Vec<String> = cols[FIXED_COLUMNS.len()..cols.len() - 1]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(CoreError::InconsistentDataset(format!(
                "metrics row has {} cells, header has {}",
                cells.len(),
                cols.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|_| CoreError::InconsistentDataset(format!("bad cell {:?}", cells[i])))
        };
        let regions = (FIXED_COLUMNS.len()..cells.len() - 1)
            .map(|i| {
                if cells[i].is_empty() {
                    Ok(None)
                } else {
                    num(i).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        rows.push(MetricsRow {
            epoch: cells[0].parse().map_err(|_| {
                CoreError::InconsistentDataset(format!("bad epoch {:?}", cells[0]))
            })?,
            e_recon: num(1)?,
            e_mask: num(2)?,
            e_reg: num(3)?,
            e_total: num(4)?,
            gamma_m: num(5)?,
            gamma: num(6)?,
            beta: num(7)?,
            regions,
            frames_visited: parse_frames(cells[cells.len() - 1])?,
        });
    }
    Ok(Metrics { region_names, rows })
}

/// Region PSNR column names, layers ascending then companions ascending.
fn region_column_names(regions: &SceneRegions) -> Vec<String> {
    let mut names = Vec::new();
    for (li, per_frame) in regions.companions.iter().enumerate() {
        let count = per_frame.first().map_or(0, |f| f.len());
        for j in 0..count {
            names.push(format!("psnr_l{:02}c{:02}", li + 1, j + 1));
        }
    }
    names
}

fn eval_region_psnrs(
    model: &Model,
    ds: &Dataset,
    bg_uvs: &[UvMap],
    regions: &SceneRegions,
) -> Result<Vec<f64>> {
    let k = ds.n_frames();
    let mut composites = Vec::with_capacity(k);
    for t in 0..k {
        let set = render_frame_eval(model, ds, bg_uvs, t)?;
        let (c, _) = over_composite(&set, ds.order.frame(t))?;
        composites.push(c);
    }
    let mut out = Vec::new();
    for (li, per_frame) in regions.companions.iter().enumerate() {
        let count = per_frame.first().map_or(0, |f| f.len());
        for j in 0..count {
            let rects: Vec<_> = (0..k).map(|t| vec![regions.companions[li][t][j]]).collect();
            out.push(region_psnr(&composites, ds.clip.frames(), &rects));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

const MAGIC: [u8; 4] = *b"LNR1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    renderer: RendererConfig,
    refiner: Option<RefinerConfig>,
    n_objects: usize,
    parts: usize,
    atlas: (usize, usize),
    bg_atlas: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    version: String,
    epoch: usize,
    e_b: Option<usize>,
    mask_history: Vec<f64>,
    adam_step: u64,
    adam_lr: f64,
    rng_seed: [u8; 32],
    rng_word_pos: String,
    config: TrainConfig,
    model: ModelMeta,
}

/// Everything a run needs to continue: model, optimizer, loop state, the
/// config it was started with, and the exact RNG position.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: Adam<f32>,
    pub state: TrainState,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
}

fn model_meta(model: &Model, cfg: &TrainConfig) -> ModelMeta {
    let obj_shape = model.textures.objects.first().map(|t| t.v.shape().to_vec());
    let (parts, atlas) = match obj_shape {
        Some(sh) => (sh[0], (sh[2], sh[3])),
        None => (1, (cfg.atlas_size, cfg.atlas_size)),
    };
    let bg = model.textures.background.v.shape().to_vec();
    ModelMeta {
        renderer: model.renderer.cfg.clone(),
        refiner: model.refiner.as_ref().map(|r| r.cfg.clone()),
        n_objects: model.textures.n_objects(),
        parts,
        atlas,
        bg_atlas: (bg[2], bg[3]),
    }
}

fn write_tensor(w: &mut impl Write, name: &str, shape: &[usize], data: &[f32]) -> Result<()> {
    let name_bytes = name.as_bytes();
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn collect_tensors(ckpt: &mut Checkpoint) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    let Model { renderer, textures, refiner } = &mut ckpt.model;
    let mut params = renderer.params();
    params.extend(textures.params());
    if let Some(r) = refiner {
        params.extend(r.params());
    }
    for (name, t) in &params {
        out.push((
            name.clone(),
            t.v.shape().to_vec(),
            t.v.iter().copied().collect(),
        ));
    }
    for (name, _) in &params {
        if let Some((m, v)) = ckpt.opt.state.get(name) {
            out.push((format!("adam/m/{name}"), m.shape().to_vec(), m.iter().copied().collect()));
            out.push((format!("adam/v/{name}"), v.shape().to_vec(), v.iter().copied().collect()));
        }
    }
    drop(params);
    for (name, vec) in renderer.norm_state() {
        out.push((name, vec![vec.len()], vec.clone()));
    }
    out
}

/// Serializes a checkpoint: magic, JSON meta, then named f32 tensors.
pub fn save_checkpoint(path: &Path, ckpt: &mut Checkpoint) -> Result<()> {
    let meta = CheckpointMeta {
        version: "LNR1".into(),
        epoch: ckpt.state.epoch,
        e_b: ckpt.state.e_b,
        mask_history: ckpt.state.mask_history.clone(),
        adam_step: ckpt.opt.step,
        adam_lr: ckpt.opt.lr as f64,
        rng_seed: ckpt.rng.get_seed(),
        rng_word_pos: ckpt.rng.get_word_pos().to_string(),
        config: ckpt.cfg.clone(),
        model: model_meta(&ckpt.model, &ckpt.cfg),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let tensors = collect_tensors(ckpt);

    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("lnr.tmp");
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        w.write_all(&MAGIC)?;
        w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
        w.write_all(&meta_json)?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &tensors {
            write_tensor(&mut w, name, shape, data)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct TensorReader<R: Read> {
    r: R,
}

impl<R: Read> TensorReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| CoreError::BadCheckpoint("truncated checkpoint".into()))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name_len = self.u16()? as usize;
        let name = String::from_utf8(self.bytes(name_len)?)
            .map_err(|_| CoreError::BadCheckpoint("non-utf8 tensor name".into()))?;
        let ndim = self.bytes(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.bytes(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, shape, data))
    }
}

/// Loads a checkpoint written by [`save_checkpoint`], rebuilding the model,
/// optimizer state, and the exact RNG position.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path)
        .map_err(|_| CoreError::BadCheckpoint(format!("cannot open {}", path.display())))?;
    let mut r = TensorReader { r: std::io::BufReader::new(file) };
    if r.bytes(4)? != MAGIC {
        return Err(CoreError::BadCheckpoint("bad magic".into()));
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(&r.bytes(meta_len)?)
        .map_err(|e| CoreError::BadCheckpoint(format!("meta: {e}")))?;
    if meta.version != "LNR1" {
        return Err(CoreError::BadCheckpoint(format!(
            "unsupported version {:?}",
            meta.version
        )));
    }
    let n_tensors = r.u32()? as usize;
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    for _ in 0..n_tensors {
        let (name, shape, data) = r.tensor()?;
        tensors.insert(name, (shape, data));
    }

    let mm = &meta.model;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
    let renderer = Renderer::<f32>::new(mm.renderer.clone(), &mut seed_rng)?;
    let textures = init_texture::<f32>(
        mm.n_objects,
        mm.parts,
        mm.renderer.in_channels - 1,
        mm.atlas.0,
        mm.atlas.1,
        mm.bg_atlas,
        0,
    );
    let refiner = match &mm.refiner {
        Some(rc) => Some(Refiner::new(rc.clone(), &mut seed_rng)?),
        None => None,
    };
    let mut model = Model { renderer, textures, refiner };

    let mut take = |name: &str, t: &mut Tensor<f32>| -> Result<()> {
        let (shape, data) = tensors
            .remove(name)
            .ok_or_else(|| CoreError::BadCheckpoint(format!("missing tensor {name}")))?;
        if shape != t.v.shape() {
            return Err(CoreError::BadCheckpoint(format!(
                "tensor {name}: shape {:?} in file, {:?} expected",
                shape,
                t.v.shape()
            )));
        }
        t.v = ndarray::ArrayD::from_shape_vec(shape, data).unwrap();
        t.zero_grad();
        Ok(())
    };
    let mut opt = Adam::<f32>::new(meta.adam_lr as f32);
    {
        let Model { renderer, textures, refiner } = &mut model;
        let mut params = renderer.params();
        params.extend(textures.params());
        if let Some(rf) = refiner {
            params.extend(rf.params());
        }
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        for (name, t) in params {
            take(&name, t)?;
        }
        for name in names {
            let m = tensors.remove(&format!("adam/m/{name}"));
            let v = tensors.remove(&format!("adam/v/{name}"));
            if let (Some((ms, md)), Some((vs, vd))) = (m, v) {
                opt.state.insert(
                    name,
                    (
                        ndarray::ArrayD::from_shape_vec(ms, md).unwrap(),
                        ndarray::ArrayD::from_shape_vec(vs, vd).unwrap(),
                    ),
                );
            }
        }
        for (name, vec) in renderer.norm_state() {
            let (shape, data) = tensors
                .remove(&name)
                .ok_or_else(|| CoreError::BadCheckpoint(format!("missing tensor {name}")))?;
            if shape != [vec.len()] {
                return Err(CoreError::BadCheckpoint(format!(
                    "tensor {name}: wrong length"
                )));
            }
            *vec = data;
        }
    }
    opt.step = meta.adam_step;

    let mut rng = ChaCha8Rng::from_seed(meta.rng_seed);
    let pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| CoreError::BadCheckpoint("bad rng position".into()))?;
    rng.set_word_pos(pos);

    Ok(Checkpoint {
        model,
        opt,
        state: TrainState {
            epoch: meta.epoch,
            e_b: meta.e_b,
            mask_history: meta.mask_history,
        },
        cfg: meta.config,
        rng,
    })
}

// ---------------------------------------------------------------------------
// Base training stage
// ---------------------------------------------------------------------------

/// Where a run writes its outputs and what extra context it gets.
pub struct TrainSession<'a> {
    pub out_dir: &'a Path,
    /// Ground-truth regions for the evaluation hook, when known.
    pub regions: Option<&'a SceneRegions>,
    /// Continue from `out_dir`'s checkpoint instead of starting fresh.
    pub resume: bool,
    /// Progress lines on stderr.
    pub progress: bool,
}

struct FrameLosses {
    recon: f64,
    mask: f64,
    reg: f64,
    total: f64,
}

fn train_step(
    model: &mut Model,
    opt: &mut Adam<f32>,
    frame: &Array3<f32>,
    uvs: &[UvMap],
    trimaps: &[Array2<f32>],
    order: &[usize],
    weights: &crate::losses::LossWeights,
    step_now: bool,
) -> Result<FrameLosses> {
    let n = trimaps.len();
    let (x, ids) = frame_inputs(&model.textures, uvs)?;
    let (rgba, _features, cache) = model.renderer.forward_train(&x)?;
    let set = layer_set_from_rgba(&rgba);
    let ccache = over_composite_cached(&set, order)?;
    let composite = ccache.outs.last().unwrap();

    let e_recon = recon_loss_frame(frame.view(), composite.view()) as f64;
    let mut e_mask = 0.0f64;
    let mut e_reg = 0.0f64;
    for (i, tm) in trimaps.iter().enumerate() {
        let alpha = &set.layers[i].alpha;
        e_mask += mask_distance(tm.view(), alpha.view()) as f64;
        e_reg += reg_term(alpha.view(), weights.gamma as f32) as f64;
    }
    e_mask /= n as f64;
    e_reg /= n as f64;
    let total = total_loss(e_recon, e_mask, e_reg, weights);

    let d_comp = recon_grad_frame(frame.view(), composite.view());
    let grads = over_composite_backward(&set, order, &ccache, &d_comp);

    let (b, _, h, w) = rgba.dim();
    let mut d_rgba = Array4::<f32>::zeros((b, 4, h, w));
    d_rgba
        .slice_mut(s![0, 0..3, .., ..])
        .assign(&grads.d_background);
    let mask_w = (weights.gamma_m / n as f64) as f32;
    let reg_w = (weights.beta / n as f64) as f32;
    for i in 1..b {
        d_rgba
            .slice_mut(s![i, 0..3, .., ..])
            .assign(&grads.d_color[i - 1]);
        let mut d_alpha = grads.d_alpha[i - 1].clone();
        if mask_w != 0.0 {
            d_alpha += &(mask_distance_grad(trimaps[i - 1].view(), set.layers[i - 1].alpha.view())
                * mask_w);
        }
        d_alpha += &(reg_grad(set.layers[i - 1].alpha.view(), weights.gamma as f32) * reg_w);
        d_rgba.slice_mut(s![i, 3, .., ..]).assign(&d_alpha);
    }

    let d_input = model.renderer.backward(&cache, &d_rgba);
    for (r, id_map) in ids.iter().enumerate() {
        let d_row = d_input.index_axis(Axis(0), r).to_owned();
        let (d_person, d_bg) = compose_layer_input_backward(&d_row, id_map);
        if r > 0 {
            sample_texture_backward(&mut model.textures.objects[r - 1], &uvs[r], &d_person)?;
        }
        sample_texture_backward(&mut model.textures.background, &uvs[0], &d_bg)?;
    }

    if step_now {
        let Model { renderer, textures, .. } = model;
        let mut params = renderer.params();
        params.extend(textures.params());
        opt.step(params);
    }

    Ok(FrameLosses { recon: e_recon, mask: e_mask, reg: e_reg, total })
}

fn append_metrics_row(
    path: &Path,
    region_names: &[String],
    row: &MetricsRow,
    fresh: bool,
) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(file, "{}", metrics_header(region_names))?;
    }
    writeln!(file, "{}", format_row(row))?;
    Ok(())
}

/// Truncates metrics rows past the checkpoint's epoch (a crash may have left
/// rows the restored state never saw).
fn trim_metrics_past(path: &Path, epoch: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let mut keep: Vec<&str> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            keep.push(line);
            continue;
        }
        let first = line.split(',').next().unwrap_or("");
        if first.parse::<usize>().map(|e| e <= epoch).unwrap_or(false) {
            keep.push(line);
        }
    }
    fs::write(path, keep.join("\n") + "\n")?;
    Ok(())
}

/// Runs the base optimization stage. Writes `metrics.csv` and
/// `checkpoint.lnr` into the session's output directory and returns the live
/// final state.
pub fn train(ds: &Dataset, cfg: &TrainConfig, session: &TrainSession) -> Result<Checkpoint> {
    cfg.validate()?;
    if ds.resolution() != cfg.resolution {
        return Err(CoreError::BadConfig(format!(
            "dataset is {:?}, config expects {:?}",
            ds.resolution(),
            cfg.resolution
        )));
    }
    let k = ds.n_frames();
    let n = ds.n_layers();
    if n == 0 || k == 0 {
        return Err(CoreError::BadConfig("dataset has no layers or frames".into()));
    }

    let (bg_uvs, bg_atlas) = background_geometry(ds)?;
    fs::create_dir_all(session.out_dir)?;
    let ckpt_path = session.out_dir.join(CHECKPOINT_NAME);
    let metrics_path = session.out_dir.join(METRICS_NAME);

    let mut ckpt = if session.resume && ckpt_path.exists() {
        let loaded = load_checkpoint(&ckpt_path)?;
        let lm = model_meta(&loaded.model, &loaded.cfg);
        if lm.renderer != cfg.renderer_config() || lm.n_objects != n || lm.bg_atlas != bg_atlas {
            return Err(CoreError::BadCheckpoint(
                "checkpoint does not match this dataset/config".into(),
            ));
        }
        trim_metrics_past(&metrics_path, loaded.state.epoch)?;
        Checkpoint { cfg: cfg.clone(), ..loaded }
    } else {
        let parts = ds.config.texture_parts.max(1);
        let model = init_model(cfg, n, parts, bg_atlas)?;
        let _ = fs::remove_file(&metrics_path);
        Checkpoint {
            model,
            opt: Adam::new(cfg.lr as f32),
            state: TrainState::fresh(),
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2)),
        }
    };

    let ranking = rank_difficulty(ds);
    let easier: Vec<usize> = easier_half(&ranking).to_vec();
    let region_names = session.regions.map(region_column_names).unwrap_or_default();
    let mut metrics_fresh = !metrics_path.exists();

    let start = ckpt.state.epoch + 1;
    for e in start..=cfg.epochs {
        let weights = schedule(e, ckpt.state.e_b);
        let ap = AugmentParams::at_epoch(cfg, e);
        let mut active: Vec<usize> = if e <= cfg.curriculum_epochs {
            easier.clone()
        } else {
            (1..=k).collect()
        };
        active.shuffle(&mut ckpt.rng);

        let mut sums = FrameLosses { recon: 0.0, mask: 0.0, reg: 0.0, total: 0.0 };
        let mut pending = 0usize;
        for (fi, &t) in active.iter().enumerate() {
            let ti = t - 1;
            let mut uvs: Vec<UvMap> = Vec::with_capacity(n + 1);
            uvs.push(bg_uvs[ti].clone());
            for l in 0..n {
                uvs.push(ds.uv.get(l, ti).clone());
            }
            let trimaps: Vec<Array2<f32>> =
                (0..n).map(|l| ds.trimaps[l][ti].m.clone()).collect();
            let (frame, uvs, trimaps) =
                augment(ds.clip.frame(ti), &uvs, &trimaps, &ap, &mut ckpt.rng);
            pending += 1;
            let step_now = pending == cfg.batch_frames || fi + 1 == active.len();
            let losses = train_step(
                &mut ckpt.model,
                &mut ckpt.opt,
                &frame,
                &uvs,
                &trimaps,
                ds.order.frame(ti),
                &weights,
                step_now,
            )?;
            if step_now {
                pending = 0;
            }
            ensure_finite(losses.total, e)?;
            sums.recon += losses.recon;
            sums.mask += losses.mask;
            sums.reg += losses.reg;
            sums.total += losses.total;
        }
        let m = active.len() as f64;
        let mean_mask = sums.mask / m;
        ckpt.state.mask_history.push(mean_mask);
        ckpt.state.epoch = e;
        if ckpt.state.e_b.is_none() {
            if mean_mask < MASK_BOOTSTRAP_THRESHOLD {
                ckpt.state.e_b = Some(e);
            } else if e >= cfg.bootstrap_cap() {
                ckpt.state.e_b = Some(cfg.bootstrap_cap());
            }
        }

        let mut region_values: Vec<Option<f64>> = vec![None; region_names.len()];
        if cfg.eval_interval > 0 && e % cfg.eval_interval == 0 {
            if let Some(regions) = session.regions {
                let psnrs = eval_region_psnrs(&ckpt.model, ds, &bg_uvs, regions)?;
                region_values = psnrs.into_iter().map(Some).collect();
            }
        }

        let row = MetricsRow {
            epoch: e,
            e_recon: sums.recon / m,
            e_mask: mean_mask,
            e_reg: sums.reg / m,
            e_total: sums.total / m,
            gamma_m: weights.gamma_m,
            gamma: weights.gamma,
            beta: weights.beta,
            regions: region_values,
            frames_visited: active.clone(),
        };
        append_metrics_row(&metrics_path, &region_names, &row, metrics_fresh)?;
        metrics_fresh = false;

        if session.progress && (e % 25 == 0 || e == cfg.epochs) {
            eprintln!(
                "epoch {e}/{}: recon {:.5} mask {:.5} total {:.5}",
                cfg.epochs, row.e_recon, row.e_mask, row.e_total
            );
        }
        if cfg.checkpoint_interval > 0 && e % cfg.checkpoint_interval == 0 && e != cfg.epochs {
            save_checkpoint(&ckpt_path, &mut ckpt)?;
        }
    }

    save_checkpoint(&ckpt_path, &mut ckpt)?;
    Ok(ckpt)
}

// ---------------------------------------------------------------------------
// Refiner stage
// ---------------------------------------------------------------------------

fn half_uv(uv: &UvMap) -> UvMap {
    let (h, w) = uv.resolution();
    let mut out = UvMap::empty(h / 2, w / 2);
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            out.part[[y, x]] = uv.part[[2 * y, 2 * x]];
            out.u[[y, x]] = uv.u[[2 * y, 2 * x]];
            out.v[[y, x]] = uv.v[[2 * y, 2 * x]];
        }
    }
    out
}

/// Trains the refinement network on top of a frozen base checkpoint: the
/// base renders at half resolution, the refiner upsamples back to dataset
/// resolution, and only L1 reconstruction over random square crops drives
/// the refiner's parameters. Writes the combined checkpoint plus
/// `refiner_metrics.csv` into `out_dir`.
pub fn train_refiner(
    ds: &Dataset,
    base_checkpoint: &Path,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<Checkpoint> {
    let (h, w) = ds.resolution();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(CoreError::BadConfig(format!(
            "refiner stage needs even dataset extents, got {h}×{w}"
        )));
    }
    if cfg.refiner_epochs == 0 {
        return Err(CoreError::BadConfig("refiner_epochs must be ≥ 1".into()));
    }
    let mut ckpt = load_checkpoint(base_checkpoint)?;
    let rcfg = ckpt.model.renderer.cfg.clone();
    let k = ds.n_frames();
    let n = ds.n_layers();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    if ckpt.model.refiner.is_none() {
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
        ckpt.model.refiner = Some(Refiner::new(
            RefinerConfig::sized(&rcfg, rcfg.width),
            &mut init_rng,
        )?);
    }
    let mut opt = Adam::<f32>::new(cfg.lr as f32);

    let (bg_uvs, _) = background_geometry(ds)?;
    let crop = 256usize.min(h);
    if crop > w {
        return Err(CoreError::BadConfig(format!(
            "crop {crop} exceeds frame width {w}"
        )));
    }

    let metrics_path = out_dir.join(REFINER_METRICS_NAME);
    fs::create_dir_all(out_dir)?;
    let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
    writeln!(metrics, "epoch,e_recon")?;

    for e in 1..=cfg.refiner_epochs {
        let mut order_frames: Vec<usize> = (1..=k).collect();
        order_frames.shuffle(&mut rng);
        let mut sum = 0.0f64;
        for &t in &order_frames {
            let ti = t - 1;
            let mut uvs_half: Vec<UvMap> = Vec::with_capacity(n + 1);
            uvs_half.push(half_uv(&bg_uvs[ti]));
            for l in 0..n {
                uvs_half.push(half_uv(ds.uv.get(l, ti)));
            }
            let (x_half, _) = frame_inputs(&ckpt.model.textures, &uvs_half)?;
            let (rgba_low, feats_low) = ckpt.model.renderer.forward_eval(&x_half)?;

            let refiner = ckpt.model.refiner.as_mut().unwrap();
            let input = ops::concat_channels(&[&rgba_low, &x_half, &feats_low]);
            let up_input = ops::bilinear_upsample(&input, 2);
            let (residual, rcache) = refiner.forward(&up_input)?;
            let up_rgba = ops::bilinear_upsample(&rgba_low, 2);
            let pre = &up_rgba + &residual;
            let refined = pre.mapv(|v| v.clamp(0.0, 1.0));

            let set = layer_set_from_rgba(&refined);
            let ccache = over_composite_cached(&set, ds.order.frame(ti))?;
            let composite = ccache.outs.last().unwrap();

            let y0 = rng.gen_range(0..=h - crop);
            let x0 = rng.gen_range(0..=w - crop);
            let frame = ds.clip.frame(ti);
            let f_crop = frame.slice(s![.., y0..y0 + crop, x0..x0 + crop]);
            let c_crop = composite.slice(s![.., y0..y0 + crop, x0..x0 + crop]);
            let e_rec = recon_loss_frame(f_crop, c_crop) as f64;
            ensure_finite(e_rec, e)?;
            sum += e_rec;

            let mut d_comp = Array3::<f32>::zeros(composite.raw_dim());
            d_comp
                .slice_mut(s![.., y0..y0 + crop, x0..x0 + crop])
                .assign(&recon_grad_frame(f_crop, c_crop));
            let grads = over_composite_backward(&set, ds.order.frame(ti), &ccache, &d_comp);

            let (b, _, hh, ww) = refined.dim();
            let mut d_refined = Array4::<f32>::zeros((b, 4, hh, ww));
            d_refined
                .slice_mut(s![0, 0..3, .., ..])
                .assign(&grads.d_background);
            for i in 1..b {
                d_refined
                    .slice_mut(s![i, 0..3, .., ..])
                    .assign(&grads.d_color[i - 1]);
                d_refined
                    .slice_mut(s![i, 3, .., ..])
                    .assign(&grads.d_alpha[i - 1]);
            }
            ndarray::Zip::from(&mut d_refined).and(&pre).for_each(|d, &p| {
                if p <= 0.0 || p >= 1.0 {
                    *d = 0.0;
                }
            });
            refiner.backward(&rcache, &d_refined);
            opt.step(refiner.params());
        }
        writeln!(metrics, "{e},{:.6}", sum / k as f64)?;
    }
    metrics.flush()?;

    ckpt.opt = opt;
    ckpt.rng = rng;
    ckpt.cfg = cfg.clone();
    save_checkpoint(&out_dir.join(CHECKPOINT_NAME), &mut ckpt)?;
    Ok(ckpt)
}

/// Full-resolution composite of one frame through the frozen base plus the
/// refiner (factor-2 upsample), mirroring the refiner stage's eval path.
pub fn render_frame_refined(
    model: &Model,
    ds: &Dataset,
    bg_uvs: &[UvMap],
    t: usize,
) -> Result<LayerSet> {
    let refiner = model
        .refiner
        .as_ref()
        .ok_or_else(|| CoreError::BadConfig("model has no refiner".into()))?;
    let n = ds.n_layers();
    let mut uvs_half: Vec<UvMap> = Vec::with_capacity(n + 1);
    uvs_half.push(half_uv(&bg_uvs[t]));
    for l in 0..n {
        uvs_half.push(half_uv(ds.uv.get(l, t)));
    }
    let (x_half, _) = frame_inputs(&model.textures, &uvs_half)?;
    let (rgba_low, feats_low) = model.renderer.forward_eval(&x_half)?;
    let input = ops::concat_channels(&[&rgba_low, &x_half, &feats_low]);
    let up_input = ops::bilinear_upsample(&input, 2);
    let (residual, _) = refiner.forward(&up_input)?;
    let up_rgba = ops::bilinear_upsample(&rgba_low, 2);
    let refined = (&up_rgba + &residual).mapv(|v| v.clamp(0.0, 1.0));
    Ok(layer_set_from_rgba(&refined))
}
