//! On-disk dataset contract and loaders.
//!
//! A dataset directory holds `frames/%05d.png` (8-bit sRGB),
//! `uv/layer%02d/%05d.uvm`, `trimaps/layer%02d/%05d.png` (8-bit gray
//! {0,128,255}), `order.json`, `config.json`, and optionally
//! `homographies.json`. Frame and layer numbering on disk is 1-based.
//!
//! The `.uvm` format: magic `UVM1`, little-endian u32 height and width,
//! then H·W row-major records of (u16 part_id, f32 u, f32 v).
//!
//! All pixel math happens in `f32` in [0,1]; 8-bit quantization only at
//! the PNG boundary. Trimap bytes {0,128,255} map to exactly {0,0.5,1}.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::texture::UvMap;

/// Scales the 11-pixel-at-256-height default trimap dilation radius.
pub fn default_trimap_radius(height: usize) -> usize {
    ((11.0 * height as f64 / 256.0).round() as usize).max(1)
}

/// Per-dataset configuration stored as `config.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub n_layers: usize,
    /// Parts per object texture atlas.
    pub texture_parts: usize,
    /// Trimap dilation radius in pixels at this resolution.
    pub trimap_radius: usize,
    /// Structuring element used for the dilation.
    pub trimap_element: String,
}

impl RunConfig {
    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Input video: frames as `[3, H, W]` in [0,1].
#[derive(Debug, Clone)]
pub struct VideoClip {
    frames: Vec<Array3<f32>>,
}

impl VideoClip {
    pub fn new(frames: Vec<Array3<f32>>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(CoreError::InconsistentDataset("no frames".into()));
        };
        let dim = first.dim();
        if dim.0 != 3 {
            return Err(CoreError::InconsistentDataset(format!(
                "frames must have 3 channels, got {}",
                dim.0
            )));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(CoreError::InconsistentDataset(format!(
                    "frame {} has shape {:?}, expected {:?}",
                    t + 1,
                    f.dim(),
                    dim
                )));
            }
            if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(CoreError::InconsistentDataset(format!(
                    "frame {} has values outside [0,1]",
                    t + 1
                )));
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (_, h, w) = self.frames[0].dim();
        (h, w)
    }

    pub fn frame(&self, t: usize) -> &Array3<f32> {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Array3<f32>] {
        &self.frames
    }
}

/// UV maps for all layers: `maps[layer][frame]`, both 0-indexed here
/// (disk numbering is 1-based).
#[derive(Debug, Clone)]
pub struct UvMapSequence {
    maps: Vec<Vec<UvMap>>,
}

impl UvMapSequence {
    pub fn new(maps: Vec<Vec<UvMap>>) -> Result<Self> {
        let Some(first) = maps.first().and_then(|l| l.first()) else {
            return Err(CoreError::InconsistentDataset("no uv maps".into()));
        };
        let res = first.resolution();
        let k = maps[0].len();
        for (i, layer) in maps.iter().enumerate() {
            if layer.len() != k {
                return Err(CoreError::InconsistentDataset(format!(
                    "uv layer {} has {} frames, expected {}",
                    i + 1,
                    layer.len(),
                    k
                )));
            }
            for (t, m) in layer.iter().enumerate() {
                if m.resolution() != res {
                    return Err(CoreError::InconsistentDataset(format!(
                        "uv layer {} frame {} resolution {:?}, expected {:?}",
                        i + 1,
                        t + 1,
                        m.resolution(),
                        res
                    )));
                }
            }
        }
        Ok(Self { maps })
    }

    pub fn n_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn n_frames(&self) -> usize {
        self.maps[0].len()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.maps[0][0].resolution()
    }

    /// 0-indexed layer and frame.
    pub fn get(&self, layer: usize, frame: usize) -> &UvMap {
        &self.maps[layer][frame]
    }

    pub fn layer(&self, layer: usize) -> &[UvMap] {
        &self.maps[layer]
    }
}

/// Per-layer soft supervision mask with values in {0, 0.5, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Trimap {
    pub m: Array2<f32>,
}

impl Trimap {
    pub fn new(m: Array2<f32>) -> Result<Self> {
        if let Some(v) = m.iter().find(|&&v| v != 0.0 && v != 0.5 && v != 1.0) {
            return Err(CoreError::InvalidTrimap(format!(
                "value {v} not in {{0, 0.5, 1}}"
            )));
        }
        Ok(Self { m })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.m.dim()
    }
}

/// Per-frame back-to-front layer order; layer ids are 1-based, background
/// is implicit behind everything.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeOrder {
    orders: Vec<Vec<usize>>,
}

impl CompositeOrder {
    pub fn new(orders: Vec<Vec<usize>>, n_layers: usize) -> Result<Self> {
        for o in &orders {
            if !is_permutation(o, n_layers) {
                return Err(CoreError::NotPermutation {
                    order: o.clone(),
                    n: n_layers,
                });
            }
        }
        Ok(Self { orders })
    }

    pub fn n_frames(&self) -> usize {
        self.orders.len()
    }

    /// 0-indexed frame; returned slice is back-to-front 1-based layer ids.
    pub fn frame(&self, t: usize) -> &[usize] {
        &self.orders[t]
    }

    pub fn all(&self) -> &[Vec<usize>] {
        &self.orders
    }
}

fn is_permutation(order: &[usize], n: usize) -> bool {
    if order.len() != n {
        return false;
    }
    let mut seen = vec![false; n + 1];
    for &i in order {
        if i == 0 || i > n || seen[i] {
            return false;
        }
        seen[i] = true;
    }
    true
}

/// A fully loaded, cross-checked dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clip: VideoClip,
    pub uv: UvMapSequence,
    /// `trimaps[layer][frame]`, 0-indexed.
    pub trimaps: Vec<Vec<Trimap>>,
    pub order: CompositeOrder,
    /// Row-major 3×3 frame-to-reference homographies, when provided.
    pub homographies: Option<Vec<[[f64; 3]; 3]>>,
    pub config: RunConfig,
}

impl Dataset {
    pub fn n_frames(&self) -> usize {
        self.clip.len()
    }

    pub fn n_layers(&self) -> usize {
        self.uv.n_layers()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.clip.resolution()
    }
}

// ---------------------------------------------------------------------------
// PNG and UVM io

pub fn read_rgb_png(path: &Path) -> Result<Array3<f32>> {
    require(path)?;
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn write_rgb_png(path: &Path, rgb: &Array3<f32>) -> Result<()> {
    let (c, h, w) = rgb.dim();
    debug_assert_eq!(c, 3);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for ci in 0..3 {
            p.0[ci] = quantize(rgb[[ci, y as usize, x as usize]]);
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn read_rgba_png(path: &Path) -> Result<(Array3<f32>, Array2<f32>)> {
    require(path)?;
    let img = image::open(path)?.to_rgba8();
    let (w, h) = img.dimensions();
    let mut color = Array3::<f32>::zeros((3, h as usize, w as usize));
    let mut alpha = Array2::<f32>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            color[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
        alpha[[y as usize, x as usize]] = p.0[3] as f32 / 255.0;
    }
    Ok((color, alpha))
}

pub fn write_rgba_png(path: &Path, color: &Array3<f32>, alpha: &Array2<f32>) -> Result<()> {
    let (c, h, w) = color.dim();
    debug_assert_eq!(c, 3);
    if alpha.dim() != (h, w) {
        return Err(CoreError::ResolutionMismatch {
            expected: (h, w),
            got: alpha.dim(),
        });
    }
    let mut img = image::RgbaImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        for ci in 0..3 {
            p.0[ci] = quantize(color[[ci, y as usize, x as usize]]);
        }
        p.0[3] = quantize(alpha[[y as usize, x as usize]]);
    }
    img.save(path)?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_trimap_png(path: &Path) -> Result<Trimap> {
    require(path)?;
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut m = Array2::<f32>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        m[[y as usize, x as usize]] = match p.0[0] {
            0 => 0.0,
            128 => 0.5,
            255 => 1.0,
            other => {
                return Err(CoreError::InvalidTrimap(format!(
                    "pixel value {other} at ({x}, {y}) in {}",
                    path.display()
                )))
            }
        };
    }
    Ok(Trimap { m })
}

pub fn write_trimap_png(path: &Path, trimap: &Trimap) -> Result<()> {
    let (h, w) = trimap.m.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let v = trimap.m[[y as usize, x as usize]];
        p.0[0] = if v == 0.0 {
            0
        } else if v == 0.5 {
            128
        } else {
            255
        };
    }
    img.save(path)?;
    Ok(())
}

const UVM_MAGIC: &[u8; 4] = b"UVM1";

pub fn read_uvm(path: &Path) -> Result<UvMap> {
    require(path)?;
    let data = fs::read(path)?;
    let bad = |what: &str| {
        CoreError::InconsistentDataset(format!("{what} in {}", path.display()))
    };
    if data.len() < 12 || &data[0..4] != UVM_MAGIC {
        return Err(bad("bad uvm header"));
    }
    let h = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let expect = 12 + h * w * 10;
    if data.len() != expect {
        return Err(bad("truncated uvm payload"));
    }
    let mut part = Array2::<u16>::zeros((h, w));
    let mut u = Array2::<f32>::zeros((h, w));
    let mut v = Array2::<f32>::zeros((h, w));
    let mut off = 12;
    for y in 0..h {
        for x in 0..w {
            part[[y, x]] = u16::from_le_bytes(data[off..off + 2].try_into().unwrap());
            u[[y, x]] = f32::from_le_bytes(data[off + 2..off + 6].try_into().unwrap());
            v[[y, x]] = f32::from_le_bytes(data[off + 6..off + 10].try_into().unwrap());
            off += 10;
        }
    }
    Ok(UvMap { part, u, v })
}

pub fn write_uvm(path: &Path, map: &UvMap) -> Result<()> {
    let (h, w) = map.resolution();
    let mut data = Vec::with_capacity(12 + h * w * 10);
    data.extend_from_slice(UVM_MAGIC);
    data.extend_from_slice(&(h as u32).to_le_bytes());
    data.extend_from_slice(&(w as u32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            data.extend_from_slice(&map.part[[y, x]].to_le_bytes());
            data.extend_from_slice(&map.u[[y, x]].to_le_bytes());
            data.extend_from_slice(&map.v[[y, x]].to_le_bytes());
        }
    }
    fs::write(path, data)?;
    Ok(())
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CoreError::IncompleteDataset(path.to_path_buf()))
    }
}

// ---------------------------------------------------------------------------
// Loading

pub fn frame_name(t: usize) -> String {
    format!("{t:05}.png")
}

pub fn uvm_name(t: usize) -> String {
    format!("{t:05}.uvm")
}

pub fn layer_dir(i: usize) -> String {
    format!("layer{i:02}")
}

/// Loads and cross-checks a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let config_path = dir.join("config.json");
    require(&config_path)?;
    let config: RunConfig = serde_json::from_str(&fs::read_to_string(&config_path)?)?;
    let res = config.resolution();
    let k = config.n_frames;
    let n = config.n_layers;

    let mut frames = Vec::with_capacity(k);
    for t in 1..=k {
        let f = read_rgb_png(&dir.join("frames").join(frame_name(t)))?;
        check_res((f.dim().1, f.dim().2), res, &format!("frame {t}"))?;
        frames.push(f);
    }
    let clip = VideoClip::new(frames)?;

    let mut uv_layers = Vec::with_capacity(n);
    let mut tri_layers = Vec::with_capacity(n);
    for i in 1..=n {
        let mut uvs = Vec::with_capacity(k);
        let mut tris = Vec::with_capacity(k);
        for t in 1..=k {
            let m = read_uvm(&dir.join("uv").join(layer_dir(i)).join(uvm_name(t)))?;
            check_res(m.resolution(), res, &format!("uv layer {i} frame {t}"))?;
            uvs.push(m);
            let tri = read_trimap_png(&dir.join("trimaps").join(layer_dir(i)).join(frame_name(t)))?;
            check_res(tri.resolution(), res, &format!("trimap layer {i} frame {t}"))?;
            tris.push(tri);
        }
        uv_layers.push(uvs);
        tri_layers.push(tris);
    }
    let uv = UvMapSequence::new(uv_layers)?;

    let order_path = dir.join("order.json");
    require(&order_path)?;
    let orders: Vec<Vec<usize>> = serde_json::from_str(&fs::read_to_string(&order_path)?)?;
    if orders.len() != k {
        return Err(CoreError::InconsistentDataset(format!(
            "order.json has {} entries, expected {k}",
            orders.len()
        )));
    }
    let order = CompositeOrder::new(orders, n)?;

    let homo_path = dir.join("homographies.json");
    let homographies = if homo_path.exists() {
        let hs: Vec<[[f64; 3]; 3]> = serde_json::from_str(&fs::read_to_string(&homo_path)?)?;
        if hs.len() != k {
            return Err(CoreError::InconsistentDataset(format!(
                "homographies.json has {} entries, expected {k}",
                hs.len()
            )));
        }
        Some(hs)
    } else {
        None
    };

    Ok(Dataset {
        clip,
        uv,
        trimaps: tri_layers,
        order,
        homographies,
        config,
    })
}

fn check_res(got: (usize, usize), expected: (usize, usize), what: &str) -> Result<()> {
    if got != expected {
        return Err(CoreError::InconsistentDataset(format!(
            "{what}: resolution {got:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Trimap derivation

/// Builds a trimap from a binary mask: 1 inside, 0.5 on the dilation band
/// (Chebyshev/square structuring element of the given radius), 0 outside.
pub fn derive_trimap(mask: &Array2<bool>, radius: usize) -> Trimap {
    let (h, w) = mask.dim();
    // Separable Chebyshev dilation: horizontal then vertical max-run.
    let mut horiz = Array2::<bool>::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(radius);
            let hi = (x + radius).min(w - 1);
            horiz[[y, x]] = (lo..=hi).any(|xx| mask[[y, xx]]);
        }
    }
    let mut m = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] {
                m[[y, x]] = 1.0;
            } else {
                let lo = y.saturating_sub(radius);
                let hi = (y + radius).min(h - 1);
                if (lo..=hi).any(|yy| horiz[[yy, x]]) {
                    m[[y, x]] = 0.5;
                }
            }
        }
    }
    Trimap { m }
}

// ---------------------------------------------------------------------------
// Validation

/// One issue found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub frame: Option<usize>,
    pub layer: Option<usize>,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

fn finding(frame: Option<usize>, layer: Option<usize>, message: String) -> Finding {
    Finding { frame, layer, message }
}

/// Cross-checks a dataset and reports every inconsistency. Empty report
/// means consistent. Pure: the same dataset always yields the same report.
pub fn validate_dataset(ds: &Dataset) -> Vec<Finding> {
    let mut out = Vec::new();
    let k = ds.config.n_frames;
    let n = ds.config.n_layers;
    let res = ds.config.resolution();

    if ds.clip.len() != k {
        out.push(finding(
            None,
            None,
            format!("clip has {} frames, config says {k}", ds.clip.len()),
        ));
    }
    if ds.clip.resolution() != res {
        out.push(finding(
            None,
            None,
            format!(
                "clip resolution {:?} does not match config {:?}",
                ds.clip.resolution(),
                res
            ),
        ));
    }
    if ds.uv.n_layers() != n {
        out.push(finding(
            None,
            None,
            format!("uv has {} layers, config says {n}", ds.uv.n_layers()),
        ));
    }
    if ds.trimaps.len() != n {
        out.push(finding(
            None,
            None,
            format!("trimaps have {} layers, config says {n}", ds.trimaps.len()),
        ));
    }
    if ds.order.n_frames() != k {
        out.push(finding(
            None,
            None,
            format!("order has {} frames, config says {k}", ds.order.n_frames()),
        ));
    }
    if let Some(hs) = &ds.homographies {
        if hs.len() != k {
            out.push(finding(
                None,
                None,
                format!("homographies have {} entries, config says {k}", hs.len()),
            ));
        }
    }

    for (t0, o) in ds.order.all().iter().enumerate() {
        if !is_permutation(o, n) {
            out.push(finding(
                Some(t0 + 1),
                None,
                format!("order not a permutation at t={}", t0 + 1),
            ));
        }
    }

    for i0 in 0..ds.uv.n_layers() {
        for t0 in 0..ds.uv.n_frames() {
            let m = ds.uv.get(i0, t0);
            let mut bad_uv = false;
            let mut bad_part = false;
            for ((y, x), &p) in m.part.indexed_iter() {
                if p as usize > ds.config.texture_parts {
                    bad_part = true;
                }
                if p > 0 {
                    let (u, v) = (m.u[[y, x]], m.v[[y, x]]);
                    if !u.is_finite() || !v.is_finite() || !(0.0..=1.0).contains(&u)
                        || !(0.0..=1.0).contains(&v)
                    {
                        bad_uv = true;
                    }
                }
            }
            if bad_part {
                out.push(finding(
                    Some(t0 + 1),
                    Some(i0 + 1),
                    format!(
                        "part id out of range at t={}, layer {} (atlas has {} parts)",
                        t0 + 1,
                        i0 + 1,
                        ds.config.texture_parts
                    ),
                ));
            }
            if bad_uv {
                out.push(finding(
                    Some(t0 + 1),
                    Some(i0 + 1),
                    format!("uv out of range at t={}, layer {}", t0 + 1, i0 + 1),
                ));
            }
        }
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use tempfile::TempDir;

    fn sample_uv(h: usize, w: usize, seed: u16) -> UvMap {
        let part = Array2::from_shape_fn((h, w), |(y, x)| ((y + x + seed as usize) % 2) as u16);
        let u = Array2::from_shape_fn((h, w), |(_, x)| {
            (x as f32 + seed as f32) / (w as f32 + seed as f32)
        });
        let v = Array2::from_shape_fn((h, w), |(y, _)| y as f32 / h.max(2) as f32);
        UvMap { part, u, v }
    }

    #[test]
    fn uvm_roundtrip_is_bit_exact() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("00001.uvm");
        let map = sample_uv(5, 7, 3);
        write_uvm(&path, &map).unwrap();
        let back = read_uvm(&path).unwrap();
        assert_eq!(back.part, map.part);
        assert_eq!(back.u, map.u);
        assert_eq!(back.v, map.v);
    }

    #[test]
    fn uvm_rejects_bad_header_and_truncation() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("x.uvm");
        fs::write(&path, b"NOPE").unwrap();
        let err = read_uvm(&path).unwrap_err();
        assert!(err.to_string().contains("bad uvm header"));

        let map = sample_uv(3, 3, 0);
        write_uvm(&path, &map).unwrap();
        let mut data = fs::read(&path).unwrap();
        data.truncate(data.len() - 4);
        fs::write(&path, data).unwrap();
        let err = read_uvm(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn trimap_roundtrip_and_rejection() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("t.png");
        let tri = Trimap::new(array![[0.0, 0.5], [1.0, 0.0]]).unwrap();
        write_trimap_png(&path, &tri).unwrap();
        assert_eq!(read_trimap_png(&path).unwrap(), tri);

        let mut img = image::GrayImage::new(2, 2);
        img.put_pixel(1, 0, image::Luma([17]));
        img.save(&path).unwrap();
        let err = read_trimap_png(&path).unwrap_err();
        assert!(err.to_string().starts_with("invalid trimap"));
        assert!(err.to_string().contains("17"));

        let err = Trimap::new(array![[0.25]]).unwrap_err();
        assert!(err.to_string().starts_with("invalid trimap"));
    }

    #[test]
    fn rgb_roundtrip_within_quantization() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("f.png");
        let rgb = Array3::from_shape_fn((3, 4, 6), |(c, y, x)| {
            (c as f32 * 0.31 + y as f32 * 0.07 + x as f32 * 0.03) % 1.0
        });
        write_rgb_png(&path, &rgb).unwrap();
        let back = read_rgb_png(&path).unwrap();
        for (a, b) in back.iter().zip(rgb.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn rgba_roundtrip_within_quantization() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("l.png");
        let color = Array3::from_shape_fn((3, 3, 5), |(c, y, x)| {
            ((c + 2 * y + 3 * x) as f32 / 30.0) % 1.0
        });
        let alpha = Array2::from_shape_fn((3, 5), |(y, x)| (y * 5 + x) as f32 / 14.0);
        write_rgba_png(&path, &color, &alpha).unwrap();
        let (c2, a2) = read_rgba_png(&path).unwrap();
        for (a, b) in c2.iter().zip(color.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        for (a, b) in a2.iter().zip(alpha.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn derive_trimap_examples() {
        // Radius 0: binary, no uncertain band.
        let mask = Array2::from_shape_fn((3, 3), |(y, x)| y == 1 && x == 1);
        let t = derive_trimap(&mask, 0);
        assert_eq!(t.m, array![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);

        // Empty mask stays empty at any radius.
        let empty = Array2::from_elem((4, 4), false);
        assert!(derive_trimap(&empty, 5).m.iter().all(|&v| v == 0.0));

        // Single center pixel, radius 1, square element: 8-neighborhood ring.
        let t = derive_trimap(&mask, 1);
        assert_eq!(
            t.m,
            array![[0.5, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 0.5]]
        );

        // Radius larger than the frame saturates without panicking.
        let t = derive_trimap(&mask, 10);
        assert!(t.m.iter().all(|&v| v == 0.5 || v == 1.0));
    }

    proptest! {
        #[test]
        fn derive_trimap_regions_nest(seed in 0u64..1000, radius in 0usize..4) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mask = Array2::from_shape_fn((9, 11), |_| rng.gen_bool(0.2));
            let t = derive_trimap(&mask, radius);
            for ((y, x), &v) in t.m.indexed_iter() {
                prop_assert!(v == 0.0 || v == 0.5 || v == 1.0);
                prop_assert_eq!(v == 1.0, mask[[y, x]]);
                if v == 0.5 {
                    // Some mask pixel within Chebyshev distance `radius`.
                    let mut found = false;
                    for yy in y.saturating_sub(radius)..=(y + radius).min(8) {
                        for xx in x.saturating_sub(radius)..=(x + radius).min(10) {
                            found |= mask[[yy, xx]];
                        }
                    }
                    prop_assert!(found);
                }
            }
        }
    }

    fn write_tiny_dataset(dir: &Path) -> RunConfig {
        let config = RunConfig {
            width: 6,
            height: 4,
            n_frames: 2,
            n_layers: 2,
            texture_parts: 1,
            trimap_radius: 1,
            trimap_element: "square".into(),
        };
        fs::create_dir_all(dir.join("frames")).unwrap();
        for i in 1..=2 {
            fs::create_dir_all(dir.join("uv").join(layer_dir(i))).unwrap();
            fs::create_dir_all(dir.join("trimaps").join(layer_dir(i))).unwrap();
        }
        for t in 1..=2 {
            let rgb = Array3::from_elem((3, 4, 6), 0.25 * t as f32);
            write_rgb_png(&dir.join("frames").join(frame_name(t)), &rgb).unwrap();
            for i in 1..=2 {
                let mut map = UvMap::empty(4, 6);
                map.part[[1, 2]] = 1;
                map.u[[1, 2]] = 0.5;
                map.v[[1, 2]] = 0.25;
                write_uvm(&dir.join("uv").join(layer_dir(i)).join(uvm_name(t)), &map).unwrap();
                let mask = Array2::from_shape_fn((4, 6), |(y, x)| y == 1 && x == 2);
                let tri = derive_trimap(&mask, 1);
                write_trimap_png(
                    &dir.join("trimaps").join(layer_dir(i)).join(frame_name(t)),
                    &tri,
                )
                .unwrap();
            }
        }
        fs::write(dir.join("order.json"), "[[1,2],[2,1]]").unwrap();
        fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&config).unwrap(),
        )
        .unwrap();
        config
    }

    #[test]
    fn loads_a_consistent_directory() {
        let tmp = TempDir::new().unwrap();
        let config = write_tiny_dataset(tmp.path());
        let ds = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds.n_frames(), 2);
        assert_eq!(ds.n_layers(), 2);
        assert_eq!(ds.resolution(), (4, 6));
        assert_eq!(ds.config, config);
        assert_eq!(ds.order.frame(1), &[2, 1]);
        assert!(ds.homographies.is_none());
        assert_eq!(ds.uv.get(0, 0).part[[1, 2]], 1);
        assert!(validate_dataset(&ds).is_empty());

        // Identity homographies load when present.
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        fs::write(
            tmp.path().join("homographies.json"),
            serde_json::to_string(&vec![eye; 2]).unwrap(),
        )
        .unwrap();
        let ds = load_dataset(tmp.path()).unwrap();
        assert_eq!(ds.homographies.unwrap().len(), 2);
    }

    #[test]
    fn missing_order_is_incomplete() {
        let tmp = TempDir::new().unwrap();
        write_tiny_dataset(tmp.path());
        fs::remove_file(tmp.path().join("order.json")).unwrap();
        let err = load_dataset(tmp.path()).unwrap_err();
        assert!(err.to_string().starts_with("incomplete dataset"));
        assert!(err.to_string().contains("order.json"));
    }

    #[test]
    fn missing_frame_names_the_path() {
        let tmp = TempDir::new().unwrap();
        write_tiny_dataset(tmp.path());
        fs::remove_file(tmp.path().join("frames").join("00002.png")).unwrap();
        let err = load_dataset(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("00002.png"));
    }

    #[test]
    fn corrupt_trimap_is_invalid() {
        let tmp = TempDir::new().unwrap();
        write_tiny_dataset(tmp.path());
        let mut img = image::GrayImage::new(6, 4);
        img.put_pixel(0, 0, image::Luma([17]));
        img.save(tmp.path().join("trimaps/layer01/00001.png")).unwrap();
        let err = load_dataset(tmp.path()).unwrap_err();
        assert!(err.to_string().starts_with("invalid trimap"));
    }

    #[test]
    fn wrong_resolution_is_inconsistent() {
        let tmp = TempDir::new().unwrap();
        write_tiny_dataset(tmp.path());
        let rgb = Array3::from_elem((3, 5, 6), 0.5);
        write_rgb_png(&tmp.path().join("frames").join("00001.png"), &rgb).unwrap();
        let err = load_dataset(tmp.path()).unwrap_err();
        assert!(err.to_string().starts_with("inconsistent dataset"));
    }

    #[test]
    fn validation_flags_bad_order_and_uv() {
        let tmp = TempDir::new().unwrap();
        write_tiny_dataset(tmp.path());
        let mut ds = load_dataset(tmp.path()).unwrap();

        // Duplicate layer in frame 2's order (bypassing the constructor).
        ds.order = CompositeOrder {
            orders: vec![vec![1, 2], vec![2, 2]],
        };
        let findings = validate_dataset(&ds);
        assert!(findings
            .iter()
            .any(|f| f.message == "order not a permutation at t=2"));

        // u out of range where a part is assigned.
        let mut ds = load_dataset(tmp.path()).unwrap();
        ds.uv.maps[0][1].u[[1, 2]] = 1.3;
        let findings = validate_dataset(&ds);
        assert!(findings
            .iter()
            .any(|f| f.message.contains("uv out of range at t=2, layer 1")));

        // Reports are pure.
        assert_eq!(validate_dataset(&ds), findings);
    }

    #[test]
    fn order_constructor_rejects_non_permutations() {
        let err = CompositeOrder::new(vec![vec![1, 1]], 2).unwrap_err();
        assert!(matches!(err, CoreError::NotPermutation { .. }));
        let err = CompositeOrder::new(vec![vec![1, 3]], 2).unwrap_err();
        assert!(matches!(err, CoreError::NotPermutation { .. }));
        let ok = CompositeOrder::new(vec![vec![2, 1], vec![1, 2]], 2).unwrap();
        assert_eq!(ok.n_frames(), 2);
    }

    #[test]
    fn default_radius_scales_with_height() {
        assert_eq!(default_trimap_radius(256), 11);
        assert_eq!(default_trimap_radius(96), 4);
        assert_eq!(default_trimap_radius(512), 22);
        assert_eq!(default_trimap_radius(10), 1);
    }
}
