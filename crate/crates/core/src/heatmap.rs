//! Appearance-similarity heatmaps.
//!
//! Ground truth for location proposal is built in stages: per-instance
//! appearance distance maps, their cubic consistency normalization, a
//! pixelwise max over instances, edge-based segmentation, thresholding, and
//! component filtering with hole inpainting. [`propose_regions`] is the
//! model-free proposal backend used at synthesis time.

use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{box_mean, connected_components, fill_holes, normalize_by_max, sobel_magnitude};
use crate::raster::{luma, rgb_to_raster, unit_to_u8, BinaryMask, Raster, ShapeError};
use crate::types::{QuadBox, SceneRecord, StrokeMask};

/// Single-channel float map over image pixels.
pub type Heatmap = Raster<f32>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeatmapError {
    #[error("instance has an empty stroke mask")]
    EmptyInstance,
    #[error("bbox covers no pixel centers inside the image")]
    DegenerateBBox,
    #[error("distance map has no finite value")]
    NoFiniteDistance,
    #[error("record has no valid instance")]
    NoValidInstances,
    #[error("no heatmaps to combine")]
    NoMaps,
    #[error("invalid heatmap params: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapParams {
    /// Region weights `w_1 > w_2 > w_3`, summing to one.
    pub weights: [f64; 3],
    /// Edge weight λ.
    pub lambda_edge: f64,
    /// Threshold T (strict).
    pub threshold: f64,
    pub min_region_area_ratio: f64,
    pub min_peak_score: f64,
    /// Inner contour band radius as a fraction of text height.
    pub inner_dilate_ratio: f64,
    /// Outer contour band radius as a fraction of text height.
    pub outer_dilate_ratio: f64,
    /// Anchor sampling stride inside the bbox; 1 is exact.
    pub stride: usize,
    /// Per-region pixel cap; 0 disables the cap (exact).
    pub region_cap: usize,
}

impl Default for HeatmapParams {
    fn default() -> Self {
        Self {
            weights: [0.6, 0.3, 0.1],
            lambda_edge: 5.0,
            threshold: 0.75,
            min_region_area_ratio: 0.5,
            min_peak_score: 0.9,
            inner_dilate_ratio: 0.15,
            outer_dilate_ratio: 0.40,
            stride: 2,
            region_cap: 512,
        }
    }
}

impl HeatmapParams {
    /// Default params with every approximation disabled.
    pub fn exact() -> Self {
        Self {
            stride: 1,
            region_cap: 0,
            ..Self::default()
        }
    }

    pub fn is_exact(&self) -> bool {
        self.stride == 1 && self.region_cap == 0
    }

    pub fn validate(&self) -> Result<(), HeatmapError> {
        let bad = |m: &str| Err(HeatmapError::InvalidParams(m.to_string()));
        let [w1, w2, w3] = self.weights;
        if !(w1 > w2 && w2 > w3 && w3 > 0.0 && w1 <= 1.0) || ((w1 + w2 + w3) - 1.0).abs() > 1e-9 {
            return bad("weights must satisfy 1 >= w1 > w2 > w3 > 0 and sum to 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if !(self.lambda_edge > 0.0) {
            return bad("lambda_edge must be positive");
        }
        if self.stride == 0 {
            return bad("stride must be at least 1");
        }
        if !(self.inner_dilate_ratio > 0.0 && self.outer_dilate_ratio > self.inner_dilate_ratio) {
            return bad("need 0 < inner_dilate_ratio < outer_dilate_ratio");
        }
        Ok(())
    }
}

/// Stroke region plus inner and outer contour bands around an instance
/// center, each with its weight.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceDescriptor {
    /// Integer instance center `(p_x, p_y)`.
    pub center: (i64, i64),
    /// Pixel offsets from `center` for R₁ (strokes), R₂ (inner band), R₃ (outer band).
    pub regions: [Vec<(i64, i64)>; 3],
    pub weights: [f64; 3],
}

/// Band radii in pixels for a given text height.
pub fn band_radii(text_height: f64, params: &HeatmapParams) -> (usize, usize) {
    let r_in = ((params.inner_dilate_ratio * text_height).round() as usize).max(1);
    let r_out = ((params.outer_dilate_ratio * text_height).round() as usize).max(r_in + 1);
    (r_in, r_out)
}

pub fn build_descriptor(
    mask: &StrokeMask,
    quad: &QuadBox,
    params: &HeatmapParams,
) -> Result<AppearanceDescriptor, HeatmapError> {
    let (r_in, r_out) = band_radii(quad.height(), params);
    let c = quad.centroid();
    descriptor_with_radii(
        &mask.mask,
        (c.x.round() as i64, c.y.round() as i64),
        r_in,
        r_out,
        params.weights,
    )
}

/// Descriptor with explicit band radii (square structuring elements).
pub fn descriptor_with_radii(
    mask: &BinaryMask,
    center: (i64, i64),
    r_in: usize,
    r_out: usize,
    weights: [f64; 3],
) -> Result<AppearanceDescriptor, HeatmapError> {
    if mask.is_empty() {
        return Err(HeatmapError::EmptyInstance);
    }
    let inner = mask.dilate(r_in);
    let outer = mask.dilate(r_out);
    let rel = |m: &BinaryMask| -> Vec<(i64, i64)> {
        m.iter_set()
            .map(|(x, y)| (x as i64 - center.0, y as i64 - center.1))
            .collect()
    };
    Ok(AppearanceDescriptor {
        center,
        regions: [
            rel(mask),
            rel(&inner.difference(mask)),
            rel(&outer.difference(&inner)),
        ],
        weights,
    })
}

/// Evenly spaced deterministic subsample with the weight multiplier that
/// keeps the region's total contribution on the same scale.
fn subsample(region: &[(i64, i64)], cap: Option<usize>) -> (Vec<(i64, i64)>, f64) {
    match cap {
        Some(c) if region.len() > c => {
            let n = region.len();
            let picked = (0..c).map(|k| region[k * n / c]).collect();
            (picked, n as f64 / c as f64)
        }
        _ => (region.to_vec(), 1.0),
    }
}

/// Appearance distance map `H_d` of one target descriptor.
///
/// For every pixel `(x, y)` the value is the minimum, over anchors `(u, v)`
/// inside `bbox`, of the weighted color distance between the descriptor's
/// regions and the same regions displaced by `(x − u, y − v)`. A
/// displacement that moves any region pixel off the image scores `+∞`.
pub fn appearance_distance_map(
    erased: &RgbImage,
    target: &AppearanceDescriptor,
    bbox: &QuadBox,
    params: &HeatmapParams,
) -> Result<Heatmap, HeatmapError> {
    let (w, h) = (erased.width() as usize, erased.height() as usize);
    if target.regions[0].is_empty() {
        return Err(HeatmapError::EmptyInstance);
    }
    let interior = bbox.interior_mask(w, h);
    let (ux0, vy0, _, _) = interior.bounds().ok_or(HeatmapError::DegenerateBBox)?;
    let stride = params.stride.max(1);
    let anchors: Vec<(i64, i64)> = interior
        .iter_set()
        .filter(|&(u, v)| (u - ux0) % stride == 0 && (v - vy0) % stride == 0)
        .map(|(u, v)| (u as i64, v as i64))
        .collect();

    let img = rgb_to_raster::<f64>(erased);
    let (cx, cy) = target.center;
    // absolute target pixels with their effective weights
    let mut pixels: Vec<(i64, i64, f64)> = Vec::new();
    for (region, &wt) in target.regions.iter().zip(&target.weights) {
        let (sub, mult) = subsample(region, (params.region_cap > 0).then_some(params.region_cap));
        pixels.extend(sub.into_iter().map(|(ox, oy)| (cx + ox, cy + oy, wt * mult)));
    }
    let (min_tx, max_tx) = pixels.iter().fold((i64::MAX, i64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (min_ty, max_ty) = pixels.iter().fold((i64::MAX, i64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));

    // shift table S(dx, dy) over every displacement reachable from some anchor
    let umin = anchors.iter().map(|a| a.0).min().unwrap();
    let umax = anchors.iter().map(|a| a.0).max().unwrap();
    let vmin = anchors.iter().map(|a| a.1).min().unwrap();
    let vmax = anchors.iter().map(|a| a.1).max().unwrap();
    let (dx0, dx1) = (-umax, w as i64 - 1 - umin);
    let (dy0, dy1) = (-vmax, h as i64 - 1 - vmin);
    let sw = (dx1 - dx0 + 1) as usize;
    let sh = (dy1 - dy0 + 1) as usize;
    let (ok_dx0, ok_dx1) = (-min_tx, w as i64 - 1 - max_tx);
    let (ok_dy0, ok_dy1) = (-min_ty, h as i64 - 1 - max_ty);
    let mut shifts = vec![f64::INFINITY; sw * sh];
    shifts.par_chunks_mut(sw).enumerate().for_each(|(j, row)| {
        let dy = dy0 + j as i64;
        if dy < ok_dy0 || dy > ok_dy1 {
            return;
        }
        for (i, slot) in row.iter_mut().enumerate() {
            let dx = dx0 + i as i64;
            if dx < ok_dx0 || dx > ok_dx1 {
                continue;
            }
            let mut acc = 0.0;
            for &(tx, ty, wt) in &pixels {
                let a = img.pixel(tx as usize, ty as usize);
                let b = img.pixel((tx + dx) as usize, (ty + dy) as usize);
                let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                acc += wt * d2.sqrt();
            }
            *slot = acc;
        }
    });

    let mut out = Heatmap::zeros(w, h, 1);
    out.data_mut().par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, slot) in row.iter_mut().enumerate() {
            let mut best = f64::INFINITY;
            for &(u, v) in &anchors {
                let si = (y as i64 - v - dy0) as usize * sw + (x as i64 - u - dx0) as usize;
                best = best.min(shifts[si]);
            }
            *slot = best as f32;
        }
    });
    Ok(out)
}

/// Appearance consistency `H_a = (1 − H_d / d_max)³`, with infinities
/// replaced by `d_max` (the largest finite distance). A map whose finite
/// distances are all zero is uniformly consistent.
pub fn consistency_heatmap(hd: &Heatmap) -> Result<Heatmap, HeatmapError> {
    let d_max = hd.max_finite().ok_or(HeatmapError::NoFiniteDistance)?;
    Ok(hd.map(|v| {
        if d_max <= 0.0 {
            return 1.0;
        }
        let d = if v.is_finite() { v.min(d_max) } else { d_max };
        let r = 1.0 - (d as f64) / (d_max as f64);
        (r * r * r) as f32
    }))
}

/// Pixelwise maximum over instance heatmaps.
pub fn combine_heatmaps(maps: &[Heatmap]) -> Result<Heatmap, HeatmapError> {
    let first = maps.first().ok_or(HeatmapError::NoMaps)?;
    let mut out = first.clone();
    for m in &maps[1..] {
        m.expect_dims(first, "combine_heatmaps")?;
        for (o, &v) in out.data_mut().iter_mut().zip(m.data()) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// `1` inside any of the quads, `0` elsewhere.
pub fn bbox_heatmap(quads: &[QuadBox], width: usize, height: usize) -> Heatmap {
    quads_union(quads, width, height).to_raster()
}

fn quads_union(quads: &[QuadBox], width: usize, height: usize) -> BinaryMask {
    quads
        .iter()
        .fold(BinaryMask::new(width, height), |acc, q| acc.union(&q.interior_mask(width, height)))
}

/// Sobel gradient magnitude of the BT.601 luma, divided by its image maximum.
pub fn normalized_sobel(img: &RgbImage) -> Heatmap {
    normalize_by_max(&sobel_magnitude(&luma(img)))
}

/// `H_e = max(H_a − λ·Sobel(I), H_BBOX)`, clamped to `[0, 1]`.
pub fn edge_segment(
    ha: &Heatmap,
    erased: &RgbImage,
    quads: &[QuadBox],
    params: &HeatmapParams,
) -> Result<Heatmap, HeatmapError> {
    let (w, h) = (erased.width() as usize, erased.height() as usize);
    if ha.dims() != (w, h) {
        return Err(ShapeError(format!("heatmap {:?} vs image {:?}", ha.dims(), (w, h))).into());
    }
    let sobel = normalized_sobel(erased);
    let hb = bbox_heatmap(quads, w, h);
    let lambda = params.lambda_edge as f32;
    let data = ha
        .data()
        .iter()
        .zip(sobel.data())
        .zip(hb.data())
        .map(|((&a, &s), &b)| (a - lambda * s).max(b).clamp(0.0, 1.0))
        .collect();
    Ok(Heatmap::from_vec(w, h, 1, data)?)
}

/// Keeps values strictly above `t`, zeroes the rest.
pub fn threshold_heatmap(he: &Heatmap, t: f64) -> Heatmap {
    let t = t as f32;
    he.map(|v| if v > t { v } else { 0.0 })
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Component filtering and hole inpainting producing the binary `H_f`.
///
/// A 4-connected component of the support of `ht` survives when it touches
/// a valid quad, or when it is both large (area at least
/// `min_region_area_ratio` × median quad area) and strong (peak at least
/// `min_peak_score`). Survivors are closed with a square of side equal to
/// the median text height, then enclosed holes up to that side squared are
/// filled.
pub fn finalize_regions(ht: &Heatmap, quads: &[QuadBox], params: &HeatmapParams) -> Heatmap {
    let (w, h) = ht.dims();
    let quad_mask = quads_union(quads, w, h);
    let median_area = median(
        quads
            .iter()
            .map(|q| q.interior_mask(w, h).count() as f64)
            .collect(),
    );
    let side = (median(quads.iter().map(|q| q.height()).collect()).round() as usize).max(1);

    let comps = connected_components(&ht.support(), false);
    let n = comps.count();
    let mut touches = vec![false; n];
    let mut peak = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            let l = comps.label(x, y);
            if l == 0 {
                continue;
            }
            let k = l as usize - 1;
            touches[k] |= quad_mask.get(x, y);
            peak[k] = peak[k].max(ht.get(x, y, 0));
        }
    }
    let keep: Vec<bool> = (0..n)
        .map(|k| {
            touches[k]
                || (comps.areas[k] as f64 >= params.min_region_area_ratio * median_area
                    && peak[k] as f64 >= params.min_peak_score)
        })
        .collect();
    let kept = BinaryMask::from_fn(w, h, |x, y| {
        let l = comps.label(x, y);
        l > 0 && keep[l as usize - 1]
    })
    .union(&quad_mask);
    let closed = kept.close(side / 2);
    fill_holes(&closed, side * side).union(&quad_mask).to_raster()
}

/// Every intermediate map of the ground-truth construction.
#[derive(Clone, Debug)]
pub struct GtStages {
    /// Instance index in the record for each per-instance map.
    pub instances: Vec<usize>,
    pub distance: Vec<Heatmap>,
    pub consistency: Vec<Heatmap>,
    pub combined: Heatmap,
    pub edge: Heatmap,
    pub thresholded: Heatmap,
    pub final_map: Heatmap,
}

pub fn generate_gt_stages(rec: &SceneRecord, params: &HeatmapParams) -> Result<GtStages, HeatmapError> {
    params.validate()?;
    let valid: Vec<usize> = rec.valid_instances().map(|(k, _)| k).collect();
    if valid.is_empty() {
        return Err(HeatmapError::NoValidInstances);
    }
    let mut distance = Vec::with_capacity(valid.len());
    let mut consistency = Vec::with_capacity(valid.len());
    for &k in &valid {
        let inst = &rec.instances[k];
        let desc = build_descriptor(&inst.mask, &inst.quad, params)?;
        let hd = appearance_distance_map(&rec.erased, &desc, &inst.quad, params)?;
        consistency.push(consistency_heatmap(&hd)?);
        distance.push(hd);
    }
    let quads: Vec<QuadBox> = valid.iter().map(|&k| rec.instances[k].quad).collect();
    let combined = combine_heatmaps(&consistency)?;
    let edge = edge_segment(&combined, &rec.erased, &quads, params)?;
    let thresholded = threshold_heatmap(&edge, params.threshold);
    let final_map = finalize_regions(&thresholded, &quads, params);
    Ok(GtStages {
        instances: valid,
        distance,
        consistency,
        combined,
        edge,
        thresholded,
        final_map,
    })
}

/// Final binary heatmap `H_f` for a record.
pub fn generate_gt(rec: &SceneRecord, params: &HeatmapParams) -> Result<Heatmap, HeatmapError> {
    Ok(generate_gt_stages(rec, params)?.final_map)
}

/// Plainness-based proposal: one minus the box-averaged, max-normalized
/// Sobel energy, thresholded at `params.threshold`. Components smaller than
/// `min_region_area_ratio` windows or without a pixel reaching
/// `min_peak_score` are dropped. The window side is 1/16 of the shorter
/// image side.
pub fn propose_regions(background: &RgbImage, params: &HeatmapParams) -> Heatmap {
    let (w, h) = (background.width() as usize, background.height() as usize);
    if w == 0 || h == 0 {
        return Heatmap::zeros(w, h, 1);
    }
    let side = (w.min(h) / 16).max(1);
    let energy = normalize_by_max(&box_mean(&sobel_magnitude(&luma(background)), side));
    let plain = energy.map(|e| 1.0 - e);
    let support = plain.above(params.threshold as f32);
    let comps = connected_components(&support, false);
    let mut peak = vec![0.0f32; comps.count()];
    for (i, &l) in comps.labels.iter().enumerate() {
        if l > 0 {
            let k = l as usize - 1;
            peak[k] = peak[k].max(plain.data()[i]);
        }
    }
    let min_area = params.min_region_area_ratio * (side * side) as f64;
    let keep: Vec<bool> = (0..comps.count())
        .map(|k| comps.areas[k] as f64 >= min_area && peak[k] as f64 >= params.min_peak_score)
        .collect();
    Heatmap::from_fn(w, h, 1, |x, y, _| {
        let l = comps.label(x, y);
        if l > 0 && keep[l as usize - 1] {
            1.0
        } else {
            0.0
        }
    })
}

/// Sidecar metadata written next to a heatmap PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub params: HeatmapParams,
    pub exact: bool,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Error)]
pub enum HeatmapIoError {
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Sidecar path for a heatmap PNG: same stem, `.json` extension.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

/// 8-bit grayscale encoding, `round(255 · v)` with `v` clamped to `[0, 1]`.
pub fn heatmap_to_gray(map: &Heatmap) -> image::GrayImage {
    let (w, h) = map.dims();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([unit_to_u8(map.get(x as usize, y as usize, 0) as f64)])
    })
}

pub fn gray_to_heatmap(img: &image::GrayImage) -> Heatmap {
    Heatmap::from_fn(img.width() as usize, img.height() as usize, 1, |x, y, _| {
        img.get_pixel(x as u32, y as u32).0[0] as f32 / 255.0
    })
}

/// Writes the PNG and, when `params` is given, its JSON sidecar.
pub fn save_heatmap_png(path: &Path, map: &Heatmap, params: Option<&HeatmapParams>) -> Result<(), HeatmapIoError> {
    heatmap_to_gray(map).save(path).map_err(|source| HeatmapIoError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    if let Some(p) = params {
        let meta = HeatmapMeta {
            params: p.clone(),
            exact: p.is_exact(),
            width: map.width(),
            height: map.height(),
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&meta).map_err(|source| HeatmapIoError::Json {
            path: side.clone(),
            source,
        })?;
        std::fs::write(&side, text).map_err(|source| HeatmapIoError::Io { path: side, source })?;
    }
    Ok(())
}

pub fn load_heatmap_png(path: &Path) -> Result<Heatmap, HeatmapIoError> {
    let img = image::open(path)
        .map_err(|source| HeatmapIoError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    Ok(gray_to_heatmap(&img))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn point_mask(w: usize, h: usize, x: usize, y: usize) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        m.set(x, y, true);
        m
    }

    #[test]
    fn single_pixel_descriptor_bands() {
        let params = HeatmapParams::default();
        // height 5: r_in = round(0.75) = 1, r_out = round(2.0) = 2
        let quad = QuadBox::axis_aligned(2.0, 1.5, 6.0, 6.5).unwrap();
        assert_eq!(band_radii(quad.height(), &params), (1, 2));
        let sm = StrokeMask {
            mask: point_mask(9, 9, 4, 4),
            instance_id: 0,
        };
        let d = build_descriptor(&sm, &quad, &params).unwrap();
        assert_eq!(d.center, (4, 4));
        assert_eq!(d.regions[0], vec![(0, 0)]);
        let mut r2 = d.regions[1].clone();
        r2.sort();
        let mut exp2: Vec<(i64, i64)> = (-1..=1)
            .flat_map(|y| (-1..=1).map(move |x| (x, y)))
            .filter(|&p| p != (0, 0))
            .collect();
        exp2.sort();
        assert_eq!(r2, exp2);
        let mut r3 = d.regions[2].clone();
        r3.sort();
        let mut exp3: Vec<(i64, i64)> = (-2..=2)
            .flat_map(|y| (-2..=2).map(move |x| (x, y)))
            .filter(|&(x, y): &(i64, i64)| x.abs() == 2 || y.abs() == 2)
            .collect();
        exp3.sort();
        assert_eq!(r3, exp3);
    }

    #[test]
    fn full_canvas_mask_has_empty_bands() {
        let m = BinaryMask::full(6, 5);
        let d = descriptor_with_radii(&m, (3, 2), 1, 2, [0.6, 0.3, 0.1]).unwrap();
        assert_eq!(d.regions[0].len(), 30);
        assert!(d.regions[1].is_empty() && d.regions[2].is_empty());
    }

    #[test]
    fn empty_mask_is_rejected() {
        let q = QuadBox::axis_aligned(1.0, 1.0, 4.0, 4.0).unwrap();
        let sm = StrokeMask {
            mask: BinaryMask::new(8, 8),
            instance_id: 0,
        };
        assert_eq!(
            build_descriptor(&sm, &q, &HeatmapParams::default()),
            Err(HeatmapError::EmptyInstance)
        );
    }

    #[test]
    fn uniform_image_distance_is_zero_where_reachable() {
        let img = RgbImage::from_pixel(12, 12, Rgb([90, 120, 30]));
        let q = QuadBox::axis_aligned(4.0, 4.0, 7.0, 7.0).unwrap();
        let m = BinaryMask::from_fn(12, 12, |x, y| (5..=6).contains(&x) && (5..=6).contains(&y));
        let d = descriptor_with_radii(&m, (6, 6), 1, 2, [0.6, 0.3, 0.1]).unwrap();
        let hd = appearance_distance_map(&img, &d, &q, &HeatmapParams::exact()).unwrap();
        assert!(hd.data().iter().all(|&v| v == 0.0 || v.is_infinite()));
        assert_eq!(hd.get(6, 6, 0), 0.0);
    }

    #[test]
    fn degenerate_bbox_outside_image() {
        let img = RgbImage::new(8, 8);
        let q = QuadBox::axis_aligned(20.0, 20.0, 30.0, 30.0).unwrap();
        let d = descriptor_with_radii(&point_mask(8, 8, 3, 3), (3, 3), 1, 2, [0.6, 0.3, 0.1]).unwrap();
        assert_eq!(
            appearance_distance_map(&img, &d, &q, &HeatmapParams::exact()),
            Err(HeatmapError::DegenerateBBox)
        );
    }

    #[test]
    fn consistency_cases() {
        let hd = Heatmap::from_vec(4, 1, 1, vec![0.0, 2.0, 4.0, f32::INFINITY]).unwrap();
        let ha = consistency_heatmap(&hd).unwrap();
        assert_eq!(ha.data(), &[1.0, 0.125, 0.0, 0.0]);
        let all_inf = Heatmap::new(2, 2, 1, f32::INFINITY);
        assert_eq!(consistency_heatmap(&all_inf), Err(HeatmapError::NoFiniteDistance));
    }

    #[test]
    fn combine_is_pixelwise_max() {
        let a = Heatmap::from_vec(3, 1, 1, vec![0.5, 0.0, 0.0]).unwrap();
        let b = Heatmap::from_vec(3, 1, 1, vec![0.0, 0.0, 0.7]).unwrap();
        assert_eq!(combine_heatmaps(&[a.clone()]).unwrap(), a);
        assert_eq!(combine_heatmaps(&[a, b]).unwrap().data(), &[0.5, 0.0, 0.7]);
        assert_eq!(combine_heatmaps(&[]), Err(HeatmapError::NoMaps));
        let c = Heatmap::zeros(2, 2, 1);
        let d = Heatmap::zeros(3, 1, 1);
        assert!(matches!(combine_heatmaps(&[c, d]), Err(HeatmapError::Shape(_))));
    }

    #[test]
    fn threshold_is_strict() {
        let he = Heatmap::from_vec(3, 1, 1, vec![0.76, 0.75, 0.0]).unwrap();
        assert_eq!(threshold_heatmap(&he, 0.75).data(), &[0.76, 0.0, 0.0]);
    }

    #[test]
    fn edge_segment_bbox_dominates_and_flat_passes_through() {
        // strong vertical step inside the quad
        let img = RgbImage::from_fn(10, 6, |x, _| if x >= 5 { Rgb([255; 3]) } else { Rgb([0; 3]) });
        let q = QuadBox::axis_aligned(3.0, 1.0, 6.0, 4.0).unwrap();
        let ha = Heatmap::new(10, 6, 1, 0.8);
        let he = edge_segment(&ha, &img, &[q], &HeatmapParams::default()).unwrap();
        assert_eq!(he.get(4, 2, 0), 1.0);
        assert_eq!(he.get(5, 2, 0), 1.0);
        // far from the step Sobel is zero: H_e = max(H_a, 0)
        assert_eq!(he.get(0, 0, 0), 0.8);
        assert_eq!(he.get(9, 5, 0), 0.8);
    }

    #[test]
    fn finalize_keeps_quads_and_drops_small_blobs() {
        let q = QuadBox::axis_aligned(2.0, 2.0, 9.0, 5.0).unwrap();
        let hb = bbox_heatmap(&[q], 30, 20);
        let hf = finalize_regions(&hb, &[q], &HeatmapParams::default());
        assert_eq!(hf, hb);
        let mut ht = hb.clone();
        for x in 20..23 {
            ht.set(x, 15, 0, 0.95);
        }
        let hf = finalize_regions(&ht, &[q], &HeatmapParams::default());
        assert_eq!(hf, hb);
    }

    #[test]
    fn finalize_fills_interior_hole() {
        let q = QuadBox::axis_aligned(1.0, 1.0, 4.0, 4.0).unwrap();
        // blob attached to the quad with a 2x2 hole
        let mut ht = Heatmap::zeros(16, 16, 1);
        for y in 1..10 {
            for x in 1..10 {
                if !((5..=6).contains(&x) && (5..=6).contains(&y)) {
                    ht.set(x, y, 0, 0.9);
                }
            }
        }
        let hf = finalize_regions(&ht, &[q], &HeatmapParams::default());
        assert_eq!(hf.get(5, 5, 0), 1.0);
        assert_eq!(hf.get(6, 6, 0), 1.0);
        assert!(hf.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn uniform_background_is_fully_proposed() {
        let img = RgbImage::from_pixel(64, 48, Rgb([200, 190, 180]));
        let p = propose_regions(&img, &HeatmapParams::default());
        assert!(p.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn png_round_trip_is_exact_for_binary_maps() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.png");
        let map = Heatmap::from_fn(7, 5, 1, |x, y, _| ((x + y) % 2) as f32);
        save_heatmap_png(&path, &map, Some(&HeatmapParams::exact())).unwrap();
        assert_eq!(load_heatmap_png(&path).unwrap(), map);
        let meta: HeatmapMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        assert!(meta.exact);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = HeatmapParams::default();
        p.weights = [0.3, 0.3, 0.4];
        assert!(p.validate().is_err());
        let mut p = HeatmapParams::default();
        p.stride = 0;
        assert!(p.validate().is_err());
        assert!(HeatmapParams::exact().validate().is_ok());
    }
}
