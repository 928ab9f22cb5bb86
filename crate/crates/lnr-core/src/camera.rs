//! Homography camera model: robust estimation from point correspondences,
//! feature tracking across a clip, background-UV generation, and the warp
//! chain that registers a layer from one frame's coordinates to another's.
//!
//! Homographies map *frame* pixel coordinates (x right, y down, origin at the
//! top-left pixel center) into a common coordinate system. `H_t` takes frame
//! `t` to frame 1; warping frame `t` content into frame `t̄` is therefore
//! `H_t̄⁻¹ · H_t`.

use nalgebra::{DMatrix, Matrix3, Vector3};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compose::Rgba;
use crate::dataio::VideoClip;
use crate::error::{CoreError, Result};
use crate::texture::UvMap;

/// A point correspondence: (source point, destination point), in pixels.
pub type PointPair = ((f64, f64), (f64, f64));

/// 3×3 projective transform, normalized so the bottom-right entry is 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    /// Normalizes and validates an arbitrary 3×3 matrix.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let s = m[(2, 2)];
        if !s.is_finite() || s.abs() < 1e-12 {
            return Err(CoreError::NonInvertible);
        }
        let m = m / s;
        if !m.iter().all(|v| v.is_finite()) || m.determinant().abs() <= 1e-12 {
            return Err(CoreError::NonInvertible);
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self { m: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0) }
    }

    /// Builds from row-major rows, as stored in `homographies.json`.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Applies the transform to a point. Points mapping to the line at
    /// infinity come back as non-finite coordinates; callers that resample
    /// guard on that.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.m * Vector3::new(x, y, 1.0);
        (p[0] / p[2], p[1] / p[2])
    }

    pub fn inverse(&self) -> Result<Self> {
        match self.m.try_inverse() {
            Some(inv) => Self::new(inv),
            None => Err(CoreError::NonInvertible),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::new(self.m * other.m)
    }

    /// Largest absolute deviation from the identity matrix.
    pub fn deviation_from_identity(&self) -> f64 {
        (self.m - Matrix3::identity())
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// True when every homography is the identity within `tol`; the all-static
/// fast path skips warping entirely.
pub fn is_static(homographies: &[Homography], tol: f64) -> bool {
    homographies.iter().all(|h| h.deviation_from_identity() <= tol)
}

/// RANSAC settings for [`estimate_homography`].
#[derive(Debug, Clone, Copy)]
pub struct RansacParams {
    /// Inlier reprojection threshold in pixels.
    pub threshold: f64,
    /// Iteration budget; confidence-based early exit may stop sooner.
    pub iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { threshold: 2.0, iterations: 2000, confidence: 0.995, seed: 0 }
    }
}

/// Hartley normalization: translate the centroid to the origin and scale the
/// mean distance to √2. Returns the transformed points and the similarity.
fn normalize_points(pts: &[(f64, f64)]) -> (Vec<(f64, f64)>, Matrix3<f64>) {
    let n = pts.len() as f64;
    let (cx, cy) = pts
        .iter()
        .fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    let (cx, cy) = (cx / n, cy / n);
    let mean_dist = pts
        .iter()
        .map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean_dist > 1e-12 { 2f64.sqrt() / mean_dist } else { 1.0 };
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let mapped = pts.iter().map(|(x, y)| (s * (x - cx), s * (y - cy))).collect();
    (mapped, t)
}

/// Direct linear transform on normalized coordinates. `None` when the system
/// is rank-deficient (collinear or repeated points).
fn dlt(pairs: &[PointPair]) -> Option<Matrix3<f64>> {
    let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let (src_n, t_src) = normalize_points(&src);
    let (dst_n, t_dst) = normalize_points(&dst);

    let n = pairs.len();
    // At least 9 rows (extra rows stay zero): the thin SVD of a 2n×9 system
    // with 2n < 9 does not expose the null-space direction we solve for.
    let mut a = DMatrix::<f64>::zeros((2 * n).max(9), 9);
    for i in 0..n {
        let (x, y) = src_n[i];
        let (u, v) = dst_n[i];
        a.row_mut(2 * i)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(2 * i + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }

    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    // Singular values come back sorted descending; the null-space direction is
    // the last row. A second vanishing singular value means the sample was
    // degenerate.
    let sv = &svd.singular_values;
    if sv.len() >= 2 && sv[sv.len() - 2] <= 1e-10 * sv[0].max(1.0) {
        return None;
    }
    let h = v_t.row(v_t.nrows() - 1);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let t_dst_inv = t_dst.try_inverse()?;
    Some(t_dst_inv * hn * t_src)
}

/// True when the points lie on a single line (smallest principal extent is
/// negligible against the largest).
fn collinear(pts: &[(f64, f64)]) -> bool {
    if pts.len() < 3 {
        return true;
    }
    let n = pts.len() as f64;
    let (cx, cy) = pts
        .iter()
        .fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
    let (cx, cy) = (cx / n, cy / n);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pts {
        let (dx, dy) = (x - cx, y - cy);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l_max = tr / 2.0 + disc;
    let l_min = tr / 2.0 - disc;
    l_min <= 1e-12 * l_max.max(1e-12)
}

fn reprojection_error(h: &Matrix3<f64>, pair: &PointPair) -> f64 {
    let ((x, y), (u, v)) = *pair;
    let p = h * Vector3::new(x, y, 1.0);
    if p[2].abs() < 1e-12 {
        return f64::INFINITY;
    }
    let (px, py) = (p[0] / p[2], p[1] / p[2]);
    ((px - u).powi(2) + (py - v).powi(2)).sqrt()
}

/// Robust homography fit: normalized DLT inside a RANSAC loop, refit on the
/// final inlier set.
pub fn estimate_homography(pairs: &[PointPair], params: &RansacParams) -> Result<Homography> {
    let n = pairs.len();
    if n < 4 {
        return Err(CoreError::Underdetermined { got: n, need: 4 });
    }
    let src: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<_> = pairs.iter().map(|p| p.1).collect();
    if collinear(&src) || collinear(&dst) {
        return Err(CoreError::Degenerate("collinear correspondences".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best_inliers: Vec<usize> = Vec::new();
    let mut best_err = f64::INFINITY;
    let mut required = params.iterations;

    for it in 0..params.iterations {
        if it >= required {
            break;
        }
        let mut idx = [0usize; 4];
        for k in 0..4 {
            loop {
                let c = rng.gen_range(0..n);
                if !idx[..k].contains(&c) {
                    idx[k] = c;
                    break;
                }
            }
        }
        let sample: Vec<PointPair> = idx.iter().map(|&i| pairs[i]).collect();
        let s_src: Vec<_> = sample.iter().map(|p| p.0).collect();
        let s_dst: Vec<_> = sample.iter().map(|p| p.1).collect();
        if collinear(&s_src[..3])
            || collinear(&s_dst[..3])
            || collinear(&s_src[1..])
            || collinear(&s_dst[1..])
        {
            continue;
        }
        let Some(h) = dlt(&sample) else { continue };

        let mut inliers = Vec::new();
        let mut err_sum = 0.0;
        for (i, pair) in pairs.iter().enumerate() {
            let e = reprojection_error(&h, pair);
            if e <= params.threshold {
                inliers.push(i);
                err_sum += e;
            }
        }
        if inliers.len() > best_inliers.len()
            || (inliers.len() == best_inliers.len() && err_sum < best_err)
        {
            best_inliers = inliers;
            best_err = err_sum;
            let w = best_inliers.len() as f64 / n as f64;
            let p_all_inlier = w.powi(4);
            if p_all_inlier > 1.0 - 1e-12 {
                required = it + 1;
            } else if p_all_inlier > 0.0 {
                let need = (1.0 - params.confidence).ln() / (1.0 - p_all_inlier).ln();
                required = required.min((need.ceil() as usize).max(it + 1));
            }
        }
    }

    if best_inliers.len() < 4 {
        return Err(CoreError::Degenerate(
            "no consensus set of at least 4 correspondences".into(),
        ));
    }
    let inlier_pairs: Vec<PointPair> = best_inliers.iter().map(|&i| pairs[i]).collect();
    let in_src: Vec<_> = inlier_pairs.iter().map(|p| p.0).collect();
    let in_dst: Vec<_> = inlier_pairs.iter().map(|p| p.1).collect();
    if collinear(&in_src) || collinear(&in_dst) {
        return Err(CoreError::Degenerate("collinear inlier set".into()));
    }
    let h = dlt(&inlier_pairs)
        .ok_or_else(|| CoreError::Degenerate("rank-deficient inlier set".into()))?;
    Homography::new(h)
}

/// How [`track_camera`] registers frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraMode {
    /// Match every frame directly against frame 1.
    Reference,
    /// Match adjacent frames and chain the pairwise transforms.
    Consecutive,
}

const PATCH_R: usize = 4;
const MAX_CORNERS: usize = 400;
const MIN_MATCHES: usize = 8;
const MIN_INLIER_RATIO: f64 = 0.35;

fn to_gray(frame: &Array3<f32>) -> Array2<f32> {
    let (_, h, w) = frame.dim();
    let mut g = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            g[[y, x]] =
                (frame[[0, y, x]] + frame[[1, y, x]] + frame[[2, y, x]]) / 3.0;
        }
    }
    g
}

/// Harris corners: Sobel gradients, 5×5 structure tensor, non-max suppressed,
/// strongest first, margin wide enough for the descriptor patch.
fn harris_corners(g: &Array2<f32>) -> Vec<(usize, usize)> {
    let (h, w) = g.dim();
    let margin = PATCH_R + 1;
    if h <= 2 * margin || w <= 2 * margin {
        return Vec::new();
    }
    let at = |y: isize, x: isize| -> f32 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        g[[y, x]]
    };
    let mut ixx = Array2::<f32>::zeros((h, w));
    let mut iyy = Array2::<f32>::zeros((h, w));
    let mut ixy = Array2::<f32>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            ixx[[y as usize, x as usize]] = gx * gx;
            iyy[[y as usize, x as usize]] = gy * gy;
            ixy[[y as usize, x as usize]] = gx * gy;
        }
    }
    let box5 = |m: &Array2<f32>, y: usize, x: usize| -> f32 {
        let mut s = 0.0;
        for dy in -2i32..=2 {
            for dx in -2i32..=2 {
                s += m[[(y as i32 + dy) as usize, (x as i32 + dx) as usize]];
            }
        }
        s
    };
    let mut resp = Array2::<f32>::zeros((h, w));
    let mut r_max = 0.0f32;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let (sxx, syy, sxy) =
                (box5(&ixx, y, x), box5(&iyy, y, x), box5(&ixy, y, x));
            let det = sxx * syy - sxy * sxy;
            let tr = sxx + syy;
            let r = det - 0.05 * tr * tr;
            resp[[y, x]] = r;
            r_max = r_max.max(r);
        }
    }
    if r_max <= 0.0 {
        return Vec::new();
    }
    let floor = 0.01 * r_max;
    let mut corners = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = resp[[y, x]];
            if r < floor {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if (dy, dx) == (0, 0) {
                        continue;
                    }
                    if resp[[(y as i32 + dy) as usize, (x as i32 + dx) as usize]] > r {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if is_max {
                corners.push((r, y, x));
            }
        }
    }
    corners.sort_by(|a, b| b.0.total_cmp(&a.0));
    corners.truncate(MAX_CORNERS);
    corners.into_iter().map(|(_, y, x)| (y, x)).collect()
}

/// Zero-mean, unit-norm 9×9 patch descriptor.
fn descriptor(g: &Array2<f32>, y: usize, x: usize) -> Vec<f32> {
    let side = 2 * PATCH_R + 1;
    let mut d = Vec::with_capacity(side * side);
    for dy in 0..side {
        for dx in 0..side {
            d.push(g[[y + dy - PATCH_R, x + dx - PATCH_R]]);
        }
    }
    let mean = d.iter().sum::<f32>() / d.len() as f32;
    for v in &mut d {
        *v -= mean;
    }
    let norm = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 1e-12 {
        for v in &mut d {
            *v /= norm;
        }
    }
    d
}

struct Features {
    points: Vec<(usize, usize)>,
    descs: Vec<Vec<f32>>,
}

fn detect_features(g: &Array2<f32>) -> Features {
    let points = harris_corners(g);
    let descs = points.iter().map(|&(y, x)| descriptor(g, y, x)).collect();
    Features { points, descs }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mutual-best matches passing Lowe's ratio test, as (src, dst) pixel pairs.
fn match_features(src: &Features, dst: &Features) -> Vec<PointPair> {
    if src.points.is_empty() || dst.points.is_empty() {
        return Vec::new();
    }
    let best_in = |descs: &[Vec<f32>], q: &[f32]| -> (usize, f32, f32) {
        let mut b1 = (0usize, f32::INFINITY);
        let mut d2 = f32::INFINITY;
        for (j, d) in descs.iter().enumerate() {
            let dist = sq_dist(q, d);
            if dist < b1.1 {
                d2 = b1.1;
                b1 = (j, dist);
            } else if dist < d2 {
                d2 = dist;
            }
        }
        (b1.0, b1.1, d2)
    };
    let mut pairs = Vec::new();
    for (i, q) in src.descs.iter().enumerate() {
        let (j, d1, d2) = best_in(&dst.descs, q);
        if d1 > 0.64 * d2 && d1 > 1e-8 {
            continue;
        }
        let (back, _, _) = best_in(&src.descs, &dst.descs[j]);
        if back != i {
            continue;
        }
        let (sy, sx) = src.points[i];
        let (dy, dx) = dst.points[j];
        pairs.push(((sx as f64, sy as f64), (dx as f64, dy as f64)));
    }
    pairs
}

fn estimate_pair(
    src: &Features,
    dst: &Features,
    frame: usize,
    params: &RansacParams,
) -> Result<Homography> {
    let pairs = match_features(src, dst);
    if pairs.len() < MIN_MATCHES {
        return Err(CoreError::TrackingFailed {
            frame,
            reason: format!("only {} feature matches", pairs.len()),
        });
    }
    let h = estimate_homography(&pairs, params).map_err(|e| CoreError::TrackingFailed {
        frame,
        reason: e.to_string(),
    })?;
    let inliers = pairs
        .iter()
        .filter(|p| reprojection_error(h.matrix(), p) <= params.threshold)
        .count();
    let ratio = inliers as f64 / pairs.len() as f64;
    if inliers < MIN_MATCHES || ratio < MIN_INLIER_RATIO {
        return Err(CoreError::TrackingFailed {
            frame,
            reason: format!(
                "consensus too weak: {inliers}/{} matches within threshold",
                pairs.len()
            ),
        });
    }
    Ok(h)
}

/// Tracks the camera across a clip. Returns one homography per frame mapping
/// that frame into frame 1's coordinates (`H_1` = identity).
pub fn track_camera(clip: &VideoClip, mode: CameraMode) -> Result<Vec<Homography>> {
    let k = clip.len();
    if k == 0 {
        return Ok(Vec::new());
    }
    let grays: Vec<Array2<f32>> = clip.frames().iter().map(to_gray).collect();
    let feats: Vec<Features> = grays.iter().map(detect_features).collect();
    let params = RansacParams::default();

    let mut homos = vec![Homography::identity()];
    match mode {
        CameraMode::Reference => {
            for t in 2..=k {
                homos.push(estimate_pair(&feats[t - 1], &feats[0], t, &params)?);
            }
        }
        CameraMode::Consecutive => {
            for t in 2..=k {
                let step = estimate_pair(&feats[t - 1], &feats[t - 2], t, &params)?;
                let chained = homos[t - 2].compose(&step).map_err(|_| {
                    CoreError::TrackingFailed {
                        frame: t,
                        reason: "chained transform became singular".into(),
                    }
                })?;
                homos.push(chained);
            }
        }
    }
    Ok(homos)
}

/// Axis-aligned bounds `[x0, y0, x1, y1]` of the union of all frames'
/// pixel-center footprints after warping by their homographies. This is the
/// background-atlas extent for a panning shot; for a single identity
/// homography it degenerates to the frame rectangle.
pub fn atlas_extent(
    homographies: &[Homography],
    resolution: (usize, usize),
) -> Result<[f64; 4]> {
    let (h, w) = resolution;
    if homographies.is_empty() || h < 2 || w < 2 {
        return Err(CoreError::BadConfig(
            "atlas extent needs at least one homography and a 2x2 frame".into(),
        ));
    }
    let corners = [
        (0.0, 0.0),
        (w as f64 - 1.0, 0.0),
        (0.0, h as f64 - 1.0),
        (w as f64 - 1.0, h as f64 - 1.0),
    ];
    let mut ext = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for hom in homographies {
        for &(x, y) in &corners {
            let (px, py) = hom.apply(x, y);
            if !px.is_finite() || !py.is_finite() {
                return Err(CoreError::Degenerate(
                    "frame corner maps to infinity".into(),
                ));
            }
            ext[0] = ext[0].min(px);
            ext[1] = ext[1].min(py);
            ext[2] = ext[2].max(px);
            ext[3] = ext[3].max(py);
        }
    }
    Ok(ext)
}

/// Background UV map for one frame: the pixel grid pushed through `H_t`,
/// normalized to [0,1] over the atlas extent. Every pixel references part 1;
/// the background atlas has no unmapped region by construction.
pub fn background_uv_from_homography(
    h: &Homography,
    resolution: (usize, usize),
    extent: [f64; 4],
) -> UvMap {
    let (rows, cols) = resolution;
    let [x0, y0, x1, y1] = extent;
    let spanx = (x1 - x0).max(1e-12);
    let spany = (y1 - y0).max(1e-12);
    let mut uv = UvMap::empty(rows, cols);
    uv.part.fill(1);
    for y in 0..rows {
        for x in 0..cols {
            let (px, py) = h.apply(x as f64, y as f64);
            uv.u[[y, x]] = (((px - x0) / spanx).clamp(0.0, 1.0)) as f32;
            uv.v[[y, x]] = (((py - y0) / spany).clamp(0.0, 1.0)) as f32;
        }
    }
    uv
}

fn bilinear(src: &Rgba, x: f64, y: f64) -> ([f32; 3], f32) {
    let (h, w) = src.resolution();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let mut color = [0.0f32; 3];
    let mut alpha = 0.0f32;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let yy = y0 as i64 + dy;
            let xx = x0 as i64 + dx;
            let wgt = wy * wx;
            if wgt == 0.0 || yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                continue;
            }
            let (yy, xx) = (yy as usize, xx as usize);
            alpha += wgt * src.alpha[[yy, xx]];
            for (c, ch) in color.iter_mut().enumerate() {
                *ch += wgt * src.color[[c, yy, xx]];
            }
        }
    }
    (color, alpha)
}

/// Registers a layer rendered at frame `t` into frame `t̄`'s coordinates:
/// warp by `H_t̄⁻¹ · H_t` with bilinear resampling. Alpha outside the warped
/// footprint is 0. `t == t̄` is a bit-exact bypass, as is an identity chain.
pub fn retime_transform(
    layer: &Rgba,
    t: usize,
    t_bar: usize,
    homographies: &[Homography],
) -> Result<Rgba> {
    let k = homographies.len();
    if t == 0 || t > k || t_bar == 0 || t_bar > k {
        return Err(CoreError::EditOutOfRange(format!(
            "frames {t} and {t_bar} must lie in 1..={k}"
        )));
    }
    if t == t_bar {
        return Ok(layer.clone());
    }
    let forward = homographies[t_bar - 1]
        .inverse()?
        .compose(&homographies[t - 1])?;
    if forward.deviation_from_identity() <= 1e-12 {
        return Ok(layer.clone());
    }
    let back = forward.inverse()?;

    let (h, w) = layer.resolution();
    let mut color = Array3::<f32>::zeros((3, h, w));
    let mut alpha = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let p = back.matrix() * Vector3::new(x as f64, y as f64, 1.0);
            if p[2].abs() < 1e-9 {
                continue;
            }
            let (sx, sy) = (p[0] / p[2], p[1] / p[2]);
            if sx < -1.0 || sy < -1.0 || sx > w as f64 || sy > h as f64 {
                continue;
            }
            let (c, a) = bilinear(layer, sx, sy);
            alpha[[y, x]] = a;
            for (ch, v) in c.iter().enumerate() {
                color[[ch, y, x]] = *v;
            }
        }
    }
    Ok(Rgba::new(color, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::Rng;

    fn apply_pairs(h: &Homography, pts: &[(f64, f64)]) -> Vec<PointPair> {
        pts.iter().map(|&(x, y)| ((x, y), h.apply(x, y))).collect()
    }

    fn grid_points(n: usize, w: f64, h: f64) -> Vec<(f64, f64)> {
        let side = (n as f64).sqrt().ceil() as usize;
        let mut pts = Vec::new();
        for i in 0..side {
            for j in 0..side {
                if pts.len() == n {
                    return pts;
                }
                pts.push((
                    w * (j as f64 + 0.5) / side as f64,
                    h * (i as f64 + 0.5) / side as f64,
                ));
            }
        }
        pts
    }

    fn max_abs_diff(a: &Homography, b: &Homography) -> f64 {
        a.rows()
            .iter()
            .flatten()
            .zip(b.rows().iter().flatten())
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    }

    #[test]
    fn normalization_fixes_bottom_right_to_one() {
        let h = Homography::new(Matrix3::new(
            2.0, 0.0, 4.0, 0.0, 2.0, -6.0, 0.0, 0.0, 2.0,
        ))
        .unwrap();
        let rows = h.rows();
        assert_eq!(rows[2][2], 1.0);
        assert_eq!(rows[0][0], 1.0);
        assert_eq!(rows[0][2], 2.0);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let err = Homography::new(Matrix3::new(
            1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0,
        ))
        .unwrap_err();
        assert!(matches!(err, CoreError::NonInvertible));
        assert!(Homography::from_rows([
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0]
        ])
        .is_err());
    }

    #[test]
    fn identity_correspondences_recover_identity() {
        let pts = grid_points(24, 160.0, 96.0);
        let pairs = apply_pairs(&Homography::identity(), &pts);
        let h = estimate_homography(&pairs, &RansacParams::default()).unwrap();
        assert!(max_abs_diff(&h, &Homography::identity()) < 1e-9);
    }

    #[test]
    fn translated_points_recover_the_translation() {
        let pts = grid_points(24, 160.0, 96.0);
        let truth = Homography::translation(7.0, -3.0);
        let pairs = apply_pairs(&truth, &pts);
        let h = estimate_homography(&pairs, &RansacParams::default()).unwrap();
        assert!(max_abs_diff(&h, &truth) < 1e-6);
    }

    #[test]
    fn projective_recovery_with_thirty_percent_outliers() {
        let truth = Homography::new(Matrix3::new(
            1.02, 0.03, 5.0, -0.02, 0.98, -3.0, 1e-4, -5e-5, 1.0,
        ))
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (w, h) = (160.0, 96.0);
        let mut pairs = Vec::new();
        for _ in 0..70 {
            let p = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            pairs.push((p, truth.apply(p.0, p.1)));
        }
        for _ in 0..30 {
            let p = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            let q = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
            pairs.push((p, q));
        }
        let est = estimate_homography(&pairs, &RansacParams::default()).unwrap();
        let corners = [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)];
        for (x, y) in corners {
            let (ex, ey) = est.apply(x, y);
            let (tx, ty) = truth.apply(x, y);
            let err = ((ex - tx).powi(2) + (ey - ty).powi(2)).sqrt();
            assert!(err <= 0.5, "corner ({x},{y}) off by {err}");
        }
    }

    #[test]
    fn too_few_pairs_is_underdetermined() {
        let pairs: Vec<PointPair> =
            vec![((0.0, 0.0), (0.0, 0.0)), ((1.0, 0.0), (1.0, 0.0)), ((0.0, 1.0), (0.0, 1.0))];
        let err = estimate_homography(&pairs, &RansacParams::default()).unwrap_err();
        assert!(matches!(err, CoreError::Underdetermined { got: 3, need: 4 }));
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pairs: Vec<PointPair> = (0..10)
            .map(|i| {
                let p = (i as f64, 2.0 * i as f64 + 1.0);
                (p, p)
            })
            .collect();
        let err = estimate_homography(&pairs, &RansacParams::default()).unwrap_err();
        assert!(matches!(err, CoreError::Degenerate(_)));
    }

    fn smooth_texture(h: usize, w: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves: Vec<[f64; 5]> = (0..12)
            .map(|_| {
                [
                    rng.gen_range(0.02..0.35),
                    rng.gen_range(0.02..0.35),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut v = 0.0;
            for wv in &waves {
                v += wv[3]
                    * (wv[0] * x as f64 + wv[1] * y as f64 + wv[2]).sin()
                    * (0.7 * wv[0] * y as f64 + wv[4]).cos();
            }
            (0.5 + 0.35 * (v / 3.0)).clamp(0.0, 1.0) as f32
        })
    }

    fn window_clip(big: &Array2<f32>, offsets: &[(usize, usize)], h: usize, w: usize) -> VideoClip {
        let frames = offsets
            .iter()
            .map(|&(oy, ox)| {
                Array3::from_shape_fn((3, h, w), |(_, y, x)| big[[y + oy, x + ox]])
            })
            .collect();
        VideoClip::new(frames).unwrap()
    }

    #[test]
    fn static_clip_tracks_to_identity() {
        let big = smooth_texture(140, 220, 3);
        let offsets = vec![(20, 30); 5];
        let clip = window_clip(&big, &offsets, 96, 160);
        for mode in [CameraMode::Reference, CameraMode::Consecutive] {
            let homos = track_camera(&clip, mode).unwrap();
            assert_eq!(homos.len(), 5);
            for h in &homos {
                assert!(h.deviation_from_identity() < 1e-3);
            }
        }
    }

    #[test]
    fn known_translations_are_recovered_by_chaining() {
        let big = smooth_texture(160, 260, 11);
        let offsets = [(30, 40), (28, 44), (25, 49), (23, 55), (26, 61)];
        let clip = window_clip(&big, &offsets, 96, 160);
        for mode in [CameraMode::Reference, CameraMode::Consecutive] {
            let homos = track_camera(&clip, mode).unwrap();
            for (t, h) in homos.iter().enumerate() {
                let truth_dx = offsets[t].1 as f64 - offsets[0].1 as f64;
                let truth_dy = offsets[t].0 as f64 - offsets[0].0 as f64;
                for (x, y) in [(0.0, 0.0), (159.0, 95.0), (80.0, 48.0)] {
                    let (px, py) = h.apply(x, y);
                    let err = ((px - (x + truth_dx)).powi(2)
                        + (py - (y + truth_dy)).powi(2))
                    .sqrt();
                    assert!(
                        err <= 0.5,
                        "{mode:?} frame {}: ({x},{y}) off by {err}",
                        t + 1
                    );
                }
            }
        }
    }

    #[test]
    fn pure_noise_fails_tracking() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let frames: Vec<Array3<f32>> = (0..3)
            .map(|_| Array3::from_shape_fn((3, 96, 160), |_| rng.gen_range(0.0..1.0)))
            .collect();
        let clip = VideoClip::new(frames).unwrap();
        let err = track_camera(&clip, CameraMode::Consecutive).unwrap_err();
        assert!(matches!(err, CoreError::TrackingFailed { .. }));
    }

    #[test]
    fn identity_background_uv_matches_the_identity_grid() {
        let homos = [Homography::identity()];
        let ext = atlas_extent(&homos, (96, 160)).unwrap();
        assert_eq!(ext, [0.0, 0.0, 159.0, 95.0]);
        let uv = background_uv_from_homography(&homos[0], (96, 160), ext);
        let id = UvMap::identity(96, 160);
        assert_eq!(uv.part, id.part);
        for y in 0..96 {
            for x in 0..160 {
                assert!((uv.u[[y, x]] - id.u[[y, x]]).abs() < 1e-6);
                assert!((uv.v[[y, x]] - id.v[[y, x]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn translated_background_uv_shifts_u() {
        let h = Homography::translation(10.0, 0.0);
        let ext = [0.0, 0.0, 100.0, 95.0];
        let uv = background_uv_from_homography(&h, (96, 160), ext);
        let base = background_uv_from_homography(&Homography::identity(), (96, 160), ext);
        for y in (0..96).step_by(13) {
            for x in (0..90).step_by(7) {
                assert!((uv.u[[y, x]] - base.u[[y, x]] - 0.1).abs() < 1e-6);
                assert!((uv.v[[y, x]] - base.v[[y, x]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projective_background_uv_matches_corner_points() {
        let h = Homography::new(Matrix3::new(
            1.1, 0.02, 3.0, -0.01, 0.95, 2.0, 2e-4, 1e-4, 1.0,
        ))
        .unwrap();
        let homos = [Homography::identity(), h];
        let ext = atlas_extent(&homos, (96, 160)).unwrap();
        let uv = background_uv_from_homography(&h, (96, 160), ext);
        for (x, y) in [(0usize, 0usize), (159, 0), (0, 95), (159, 95), (80, 48)] {
            let (px, py) = h.apply(x as f64, y as f64);
            let eu = ((px - ext[0]) / (ext[2] - ext[0])) as f32;
            let ev = ((py - ext[1]) / (ext[3] - ext[1])) as f32;
            assert!((uv.u[[y, x]] - eu).abs() < 1e-6);
            assert!((uv.v[[y, x]] - ev).abs() < 1e-6);
        }
    }

    #[test]
    fn atlas_extent_is_the_union_of_footprints() {
        let homos = [
            Homography::identity(),
            Homography::translation(10.0, 0.0),
            Homography::translation(-4.0, 6.0),
        ];
        let ext = atlas_extent(&homos, (96, 160)).unwrap();
        assert_eq!(ext, [-4.0, 0.0, 169.0, 101.0]);
    }

    fn smooth_layer(h: usize, w: usize, seed: u64) -> Rgba {
        let g = smooth_texture(h, w, seed);
        let color = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            (g[[y, x]] * (0.5 + 0.25 * c as f32)).clamp(0.0, 1.0)
        });
        let alpha = Array2::from_shape_fn((h, w), |(y, x)| {
            (0.3 + 0.7 * g[[y, x]]).clamp(0.0, 1.0)
        });
        Rgba::new(color, alpha)
    }

    #[test]
    fn same_frame_retime_is_bit_exact() {
        let layer = smooth_layer(40, 60, 5);
        let homos = vec![Homography::translation(3.7, -1.2), Homography::identity()];
        let out = retime_transform(&layer, 1, 1, &homos).unwrap();
        assert_eq!(out.color, layer.color);
        assert_eq!(out.alpha, layer.alpha);
    }

    #[test]
    fn static_chain_leaves_the_layer_unchanged() {
        let layer = smooth_layer(40, 60, 6);
        let homos = vec![Homography::identity(); 4];
        let out = retime_transform(&layer, 2, 4, &homos).unwrap();
        assert_eq!(out.color, layer.color);
        assert_eq!(out.alpha, layer.alpha);
    }

    #[test]
    fn integer_translation_matches_direct_shift() {
        let layer = smooth_layer(48, 64, 8);
        // H_t = translation mapping frame t into frame 1 coordinates.
        let homos = vec![Homography::identity(), Homography::translation(5.0, -3.0)];
        // Warp from frame 1 into frame 2: M = H_2^{-1} H_1 = translation (-5, 3).
        let out = retime_transform(&layer, 1, 2, &homos).unwrap();
        let (h, w) = layer.resolution();
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y as i64 - 3, x as i64 + 5);
                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    let (sy, sx) = (sy as usize, sx as usize);
                    assert!((out.alpha[[y, x]] - layer.alpha[[sy, sx]]).abs() < 1e-6);
                    for c in 0..3 {
                        assert!(
                            (out.color[[c, y, x]] - layer.color[[c, sy, sx]]).abs() < 1e-6
                        );
                    }
                } else {
                    assert_eq!(out.alpha[[y, x]], 0.0);
                }
            }
        }
    }

    fn psnr(a: &Rgba, b: &Rgba, margin: usize) -> f64 {
        let (h, w) = a.resolution();
        let mut se = 0.0f64;
        let mut n = 0usize;
        for y in margin..h - margin {
            for x in margin..w - margin {
                for c in 0..3 {
                    let d = (a.color[[c, y, x]] - b.color[[c, y, x]]) as f64;
                    se += d * d;
                    n += 1;
                }
                let d = (a.alpha[[y, x]] - b.alpha[[y, x]]) as f64;
                se += d * d;
                n += 1;
            }
        }
        let mse = se / n as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * (mse).log10()
        }
    }

    #[test]
    fn round_trip_warp_keeps_smooth_content_above_forty_db() {
        let layer = smooth_layer(72, 104, 13);
        let h2 = Homography::new(Matrix3::new(
            1.01, 0.015, 2.6, -0.012, 0.99, -1.4, 4e-5, -3e-5, 1.0,
        ))
        .unwrap();
        let homos = vec![Homography::identity(), h2];
        let there = retime_transform(&layer, 1, 2, &homos).unwrap();
        let back = retime_transform(&there, 2, 1, &homos).unwrap();
        assert!(psnr(&back, &layer, 10) >= 40.0);
    }

    #[test]
    fn out_of_range_frames_are_rejected() {
        let layer = smooth_layer(16, 16, 1);
        let homos = vec![Homography::identity(); 3];
        assert!(retime_transform(&layer, 0, 1, &homos).is_err());
        assert!(retime_transform(&layer, 1, 4, &homos).is_err());
    }

    #[test]
    fn rows_round_trip_through_json_shape() {
        let h = Homography::new(Matrix3::new(
            1.2, 0.1, -4.0, -0.05, 0.9, 2.5, 1e-4, 2e-4, 1.0,
        ))
        .unwrap();
        let rows = h.rows();
        let back = Homography::from_rows(rows).unwrap();
        assert!(max_abs_diff(&h, &back) < 1e-15);
        assert!(is_static(&[Homography::identity()], 1e-9));
        assert!(!is_static(&[h], 1e-3));
    }
}
