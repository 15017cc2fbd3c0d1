//! Training-triplet preparation for the appearance adaptation stage.
//!
//! A target instance is rectified to a horizontal layer, its box is
//! perturbed, its colors are flattened and shifted, and the other instances
//! are randomly erased from the background. The patch `P_pt` is sampled from
//! the original image in one pass through the composed transform so that
//! only one resampling loss is incurred.

use image::{Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{gt_matrix, make_rect, patch_to_rect, quad_to_homography, warp_sample, GeometryError};
use crate::raster::{unit_to_u8, BinaryMask, Raster};
use crate::seeding::{derive_seed, rng_from, Rng};
use crate::types::{Homography, Point2, QuadBox, QuadError, SceneRecord, TextPatch, PATCH_SIZE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("instance {0} is missing or not valid")]
    InvalidInstance(usize),
    #[error("invalid preprocessing params: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("perturbed quad is degenerate: {0}")]
    Quad(#[from] QuadError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterParams {
    /// Multiplicative range for the box width.
    pub aspect_range: [f64; 2],
    /// Center shift bound as a fraction of text height.
    pub center_jitter_frac: f64,
    /// Hue shift bound in degrees, then saturation and lightness bounds.
    pub hsl_jitter: [f64; 3],
    /// Probability that a non-target instance stays erased.
    pub erase_prob: f64,
    pub seed: u64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            aspect_range: [0.8, 1.25],
            center_jitter_frac: 0.15,
            hsl_jitter: [20.0, 0.2, 0.2],
            erase_prob: 0.5,
            seed: 0,
        }
    }
}

impl JitterParams {
    /// No geometric or color perturbation.
    pub fn zero() -> Self {
        Self {
            aspect_range: [1.0, 1.0],
            center_jitter_frac: 0.0,
            hsl_jitter: [0.0; 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let [lo, hi] = self.aspect_range;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(PreprocessError::InvalidParams("aspect_range must satisfy 0 < lo <= 1 <= hi".into()));
        }
        if !(self.center_jitter_frac >= 0.0) || self.hsl_jitter.iter().any(|v| !(*v >= 0.0)) {
            return Err(PreprocessError::InvalidParams("jitter magnitudes must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.erase_prob) {
            return Err(PreprocessError::InvalidParams("erase_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessParams {
    pub jitter: JitterParams,
    pub rect_scale: f64,
    pub kmeans_k: usize,
    pub kmeans_iterations: usize,
    /// Centroids closer than this (8-bit RGB distance) are merged.
    pub merge_distance: f64,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        Self {
            jitter: JitterParams::default(),
            rect_scale: 1.4,
            kmeans_k: 3,
            kmeans_iterations: 20,
            merge_distance: 24.0,
        }
    }
}

/// Horizontal text layer at image dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct RectifiedLayer {
    /// Straight (non-premultiplied) RGB in `[0, 1]`.
    pub rgb: Raster<f32>,
    pub alpha: Raster<f32>,
    /// Axis-aligned box with the quad's mean edge lengths, same centroid.
    pub quad: QuadBox,
    /// Original quad onto `quad`.
    pub transform: Homography<f64>,
}

/// One prepared training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainTriplet {
    pub patch: TextPatch,
    pub rect: QuadBox,
    pub bg: RgbImage,
    /// Processed quad in `P_pt` onto the original quad in `P_before`.
    pub gt_matrix: Homography<f64>,
    pub gt_alpha: Raster<f32>,
    pub gt_bm: BinaryMask,
    pub source: RgbImage,
    pub pt_quad: QuadBox,
    pub before_quad: QuadBox,
    pub instance: usize,
}

impl TrainTriplet {
    /// Patch-to-image placement `A_m` for this triplet's rect.
    pub fn placement(&self) -> Homography<f64> {
        patch_to_rect(&self.rect, PATCH_SIZE).expect("rect is a valid square")
    }
}

/// Premultiplied RGBA layer of an instance's original pixels.
fn text_layer(rec: &SceneRecord, idx: usize) -> Raster<f32> {
    let mask = &rec.instances[idx].mask.mask;
    let (w, h) = (rec.original.width() as usize, rec.original.height() as usize);
    Raster::from_fn(w, h, 4, |x, y, c| {
        if !mask.get(x, y) {
            return 0.0;
        }
        if c == 3 {
            1.0
        } else {
            rec.original.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        }
    })
}

/// Splits a premultiplied RGBA raster into straight RGB and alpha.
fn unpremultiply(layer: &Raster<f32>) -> (Raster<f32>, Raster<f32>) {
    let (w, h) = layer.dims();
    let alpha = layer.channel(3).map(|a| a.clamp(0.0, 1.0));
    let rgb = Raster::from_fn(w, h, 3, |x, y, c| {
        let a = layer.get(x, y, 3);
        if a > 0.0 {
            (layer.get(x, y, c) / a).clamp(0.0, 1.0)
        } else {
            0.0
        }
    });
    (rgb, alpha)
}

fn checked_instance(rec: &SceneRecord, idx: usize) -> Result<&crate::types::SceneInstance, PreprocessError> {
    match rec.instances.get(idx) {
        Some(inst) if inst.valid && !inst.mask.mask.is_empty() => Ok(inst),
        _ => Err(PreprocessError::InvalidInstance(idx)),
    }
}

fn rectification(quad: &QuadBox) -> Result<(QuadBox, Homography<f64>), PreprocessError> {
    let c = quad.centroid();
    let (hw, hh) = (quad.width() / 2.0, quad.height() / 2.0);
    let rect = QuadBox::axis_aligned(c.x - hw, c.y - hh, c.x + hw, c.y + hh)?;
    let h = quad_to_homography(quad, &rect)?;
    Ok((rect, h))
}

/// Warps the instance's text pixels so that its quad becomes an
/// axis-aligned rectangle.
pub fn rectify_instance(rec: &SceneRecord, idx: usize) -> Result<RectifiedLayer, PreprocessError> {
    let inst = checked_instance(rec, idx)?;
    let (quad, transform) = rectification(&inst.quad)?;
    let (w, h) = (rec.original.width() as usize, rec.original.height() as usize);
    let warped = warp_sample(&text_layer(rec, idx), &transform.cast::<f32>(), w, h)?;
    let (rgb, alpha) = unpremultiply(&warped);
    Ok(RectifiedLayer {
        rgb,
        alpha,
        quad,
        transform,
    })
}

/// Scales the quad's width about its centroid by `u ~ U(aspect_range)` and
/// shifts it by `(dx, dy)`, each uniform within `± center_jitter_frac ×
/// height`. Always consumes three draws.
pub fn jitter_geometry(quad: &QuadBox, params: &JitterParams, rng: &mut Rng) -> Result<QuadBox, PreprocessError> {
    let [lo, hi] = params.aspect_range;
    let u = lo + (hi - lo) * rng.gen::<f64>();
    let bound = params.center_jitter_frac * quad.height();
    let dx = bound * (2.0 * rng.gen::<f64>() - 1.0);
    let dy = bound * (2.0 * rng.gen::<f64>() - 1.0);
    let c = quad.centroid();
    let p = quad.points();
    let moved = p.map(|q| Point2::new(c.x + u * (q.x - c.x) + dx, q.y + dy));
    Ok(QuadBox::new(moved)?)
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Weighted k-means++ seeding followed by Lloyd iterations. Returns at most
/// `k` centroids; fewer when the data has fewer distinct points.
pub fn weighted_kmeans(points: &[[f64; 3]], weights: &[f64], k: usize, iterations: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    if points.is_empty() || k == 0 {
        return Vec::new();
    }
    let pick = |rng: &mut Rng, scores: &[f64]| -> Option<usize> {
        let total: f64 = scores.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut r = rng.gen::<f64>() * total;
        for (i, s) in scores.iter().enumerate() {
            if *s > 0.0 {
                if r < *s {
                    return Some(i);
                }
                r -= s;
            }
        }
        scores.iter().rposition(|s| *s > 0.0)
    };
    let mut centroids = Vec::with_capacity(k);
    let first = pick(rng, weights).unwrap_or(0);
    centroids.push(points[first]);
    while centroids.len() < k {
        let scores: Vec<f64> = points
            .iter()
            .zip(weights)
            .map(|(p, w)| w * centroids.iter().map(|c| dist2(*p, *c)).fold(f64::INFINITY, f64::min))
            .collect();
        match pick(rng, &scores) {
            Some(i) => centroids.push(points[i]),
            None => break,
        }
    }
    for _ in 0..iterations {
        let mut sums = vec![[0.0f64; 4]; centroids.len()];
        for (p, w) in points.iter().zip(weights) {
            let j = nearest(&centroids, *p);
            for c in 0..3 {
                sums[j][c] += w * p[c];
            }
            sums[j][3] += w;
        }
        let mut moved = false;
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s[3] > 0.0 {
                let next = [s[0] / s[3], s[1] / s[3], s[2] / s[3]];
                moved |= next != *c;
                *c = next;
            }
        }
        if !moved {
            break;
        }
    }
    centroids
}

fn nearest(centroids: &[[f64; 3]], p: [f64; 3]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, *c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Repeatedly merges the closest centroid pair while it is nearer than
/// `min_dist`, weighting by cluster mass.
fn merge_close(points: &[[f64; 3]], weights: &[f64], mut centroids: Vec<[f64; 3]>, min_dist: f64) -> Vec<[f64; 3]> {
    loop {
        let mut mass = vec![0.0f64; centroids.len()];
        for (p, w) in points.iter().zip(weights) {
            mass[nearest(&centroids, *p)] += w;
        }
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                let d = dist2(centroids[i], centroids[j]).sqrt();
                if d < min_dist && best.map_or(true, |b| d < b.2) {
                    best = Some((i, j, d));
                }
            }
        }
        let Some((i, j, _)) = best else {
            return centroids;
        };
        let (mi, mj) = (mass[i], mass[j]);
        let t = if mi + mj > 0.0 { mj / (mi + mj) } else { 0.5 };
        let merged = [0, 1, 2].map(|c| centroids[i][c] + t * (centroids[j][c] - centroids[i][c]));
        centroids[i] = merged;
        centroids.remove(j);
    }
}

/// Replaces every text pixel (`alpha > 0`) by its cluster color. Pixels
/// outside the text are copied unchanged.
pub fn quantize_colors(text_rgb: &RgbImage, alpha: &Raster<f32>, params: &PreprocessParams, rng: &mut Rng) -> RgbImage {
    let mut coords = Vec::new();
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (x, y, px) in text_rgb.enumerate_pixels() {
        let a = alpha.get(x as usize, y as usize, 0);
        if a > 0.0 {
            coords.push((x, y));
            points.push(px.0.map(|v| v as f64));
            weights.push(a as f64);
        }
    }
    let centroids = weighted_kmeans(&points, &weights, params.kmeans_k, params.kmeans_iterations, rng);
    let centroids = merge_close(&points, &weights, centroids, params.merge_distance);
    let mut out = text_rgb.clone();
    for ((x, y), p) in coords.into_iter().zip(&points) {
        let c = centroids[nearest(&centroids, *p)];
        out.put_pixel(x, y, Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8)));
    }
    out
}

/// RGB in `[0, 1]` to (hue degrees in `[0, 360)`, saturation, lightness).
pub fn rgb_to_hsl(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let l = (max + min) / 2.0;
    let d = max - min;
    if d == 0.0 {
        return [0.0, 0.0, l];
    }
    let s = d / (1.0 - (2.0 * l - 1.0).abs());
    let h = if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    [h.rem_euclid(360.0), s.clamp(0.0, 1.0), l]
}

pub fn hsl_to_rgb(hsl: [f64; 3]) -> [f64; 3] {
    let [h, s, l] = hsl;
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    [r + m, g + m, b + m].map(|v| v.clamp(0.0, 1.0))
}

/// Shifts hue by `dh` degrees and saturation/lightness additively, clamped.
pub fn shift_hsl(px: [u8; 3], dh: f64, ds: f64, dl: f64) -> [u8; 3] {
    let [h, s, l] = rgb_to_hsl(px.map(|v| v as f64 / 255.0));
    let out = hsl_to_rgb([h + dh, (s + ds).clamp(0.0, 1.0), (l + dl).clamp(0.0, 1.0)]);
    out.map(unit_to_u8)
}

/// One `(Δh, Δs, Δl)` draw applied to every text pixel. Always consumes
/// three draws.
pub fn jitter_hsl(text_rgb: &RgbImage, alpha: &Raster<f32>, params: &JitterParams, rng: &mut Rng) -> RgbImage {
    let [mh, ms, ml] = params.hsl_jitter;
    let dh = mh * (2.0 * rng.gen::<f64>() - 1.0);
    let ds = ms * (2.0 * rng.gen::<f64>() - 1.0);
    let dl = ml * (2.0 * rng.gen::<f64>() - 1.0);
    let mut out = text_rgb.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if alpha.get(x as usize, y as usize, 0) > 0.0 {
            px.0 = shift_hsl(px.0, dh, ds, dl);
        }
    }
    out
}

/// Starts from the erased image and, with probability `1 − erase_prob` per
/// other instance, restores that instance's original pixels. Pixels under
/// the kept instance's mask are never restored. Consumes one draw per
/// other instance.
pub fn erase_others(rec: &SceneRecord, keep_idx: usize, params: &JitterParams, rng: &mut Rng) -> RgbImage {
    let mut out = rec.erased.clone();
    let keep = rec.instances.get(keep_idx).map(|i| &i.mask.mask);
    for (k, inst) in rec.instances.iter().enumerate() {
        if k == keep_idx {
            continue;
        }
        let u = rng.gen::<f64>();
        if u < params.erase_prob {
            continue;
        }
        for (x, y) in inst.mask.mask.iter_set() {
            if keep.map_or(false, |m| m.get(x, y)) {
                continue;
            }
            out.put_pixel(x as u32, y as u32, *rec.original.get_pixel(x as u32, y as u32));
        }
    }
    out
}

/// Full preprocessing of one instance, seeded per `(record id, idx)`.
pub fn build_triplet(rec: &SceneRecord, idx: usize, params: &PreprocessParams) -> Result<TrainTriplet, PreprocessError> {
    params.jitter.validate()?;
    let inst = checked_instance(rec, idx)?;
    let mut rng = rng_from(derive_seed(params.jitter.seed, &rec.id, idx as u64));
    let (w, h) = (rec.original.width() as usize, rec.original.height() as usize);

    let (rectified, h_rect) = rectification(&inst.quad)?;
    let processed = jitter_geometry(&rectified, &params.jitter, &mut rng)?;
    let h_jit = quad_to_homography::<f64>(&rectified, &processed)?;
    let rect = make_rect(&processed, params.rect_scale)?;
    let a_m = patch_to_rect(&rect, PATCH_SIZE)?;
    let to_patch = a_m.inverse().map_err(GeometryError::from)?;

    // original image -> processed patch frame, sampled once
    let forward = to_patch
        .then_after(&h_jit)
        .and_then(|m| m.then_after(&h_rect))
        .map_err(GeometryError::from)?;
    let layer = text_layer(rec, idx);
    let warped = warp_sample(&layer, &forward.cast::<f32>(), PATCH_SIZE, PATCH_SIZE)?;
    let (rgb, alpha) = unpremultiply(&warped);
    let mut patch_rgb = RgbImage::from_fn(PATCH_SIZE as u32, PATCH_SIZE as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if alpha.get(x, y, 0) > 0.0 {
            Rgb([0, 1, 2].map(|c| unit_to_u8(rgb.get(x, y, c) as f64)))
        } else {
            Rgb([0, 0, 0])
        }
    });
    patch_rgb = quantize_colors(&patch_rgb, &alpha, params, &mut rng);
    patch_rgb = jitter_hsl(&patch_rgb, &alpha, &params.jitter, &mut rng);
    let bg = erase_others(rec, idx, &params.jitter, &mut rng);

    let pt_quad = processed.transform(&to_patch)?;
    let before_quad = inst.quad.transform(&to_patch)?;
    let gt = gt_matrix(&pt_quad, &before_quad)?;
    let bbox_mask = pt_quad.interior_mask(PATCH_SIZE, PATCH_SIZE).union(&alpha.support());

    Ok(TrainTriplet {
        patch: TextPatch {
            rgb: patch_rgb,
            alpha,
            bbox_mask,
            text: inst.text.clone().unwrap_or_default(),
            rect: Some(rect),
        },
        rect,
        bg,
        gt_matrix: gt,
        gt_alpha: inst.mask.mask.to_raster(),
        gt_bm: inst.quad.interior_mask(w, h),
        source: rec.original.clone(),
        pt_quad,
        before_quad,
        instance: idx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{SceneInstance, StrokeMask};

    fn record_with_box(x0: usize, y0: usize, x1: usize, y1: usize) -> SceneRecord {
        let (w, h) = (96u32, 64u32);
        let mask = BinaryMask::from_fn(w as usize, h as usize, |x, y| {
            (x0..=x1).contains(&x) && (y0..=y1).contains(&y) && (x + y) % 3 != 0
        });
        let original = RgbImage::from_fn(w, h, |x, y| {
            if mask.get(x as usize, y as usize) {
                Rgb([220, 30, 30])
            } else {
                Rgb([40, 90, 140])
            }
        });
        SceneRecord {
            id: "t_1".into(),
            erased: RgbImage::from_pixel(w, h, Rgb([40, 90, 140])),
            original,
            instances: vec![SceneInstance {
                quad: QuadBox::axis_aligned(x0 as f64 - 0.5, y0 as f64 - 0.5, x1 as f64 + 0.5, y1 as f64 + 0.5).unwrap(),
                mask: StrokeMask { mask, instance_id: 0 },
                valid: true,
                text: Some("ab".into()),
            }],
        }
    }

    #[test]
    fn horizontal_instance_rectifies_to_itself() {
        let rec = record_with_box(20, 20, 50, 31);
        let layer = rectify_instance(&rec, 0).unwrap();
        assert!(layer.transform.max_abs_diff(&Homography::identity()) < 1e-9);
        assert_eq!(layer.alpha.support(), rec.instances[0].mask.mask);
    }

    #[test]
    fn invalid_instance_rejected() {
        let mut rec = record_with_box(20, 20, 50, 31);
        assert_eq!(rectify_instance(&rec, 3), Err(PreprocessError::InvalidInstance(3)));
        rec.instances[0].valid = false;
        assert!(build_triplet(&rec, 0, &PreprocessParams::default()).is_err());
    }

    #[test]
    fn zero_jitter_geometry_is_identity() {
        let q = QuadBox::axis_aligned(3.0, 4.0, 30.0, 12.0).unwrap();
        let mut rng = rng_from(5);
        assert_eq!(jitter_geometry(&q, &JitterParams::zero(), &mut rng).unwrap(), q);
    }

    #[test]
    fn zero_jitter_horizontal_gives_identity_gt() {
        let rec = record_with_box(20, 20, 50, 31);
        let mut p = PreprocessParams::default();
        p.jitter = JitterParams::zero();
        let t = build_triplet(&rec, 0, &p).unwrap();
        assert!(t.gt_matrix.max_abs_diff(&Homography::identity()) < 1e-3);
        t.patch.check().unwrap();
    }

    #[test]
    fn hsl_round_trip_and_hue_wheel() {
        for px in [[0u8, 0, 0], [255, 255, 255], [12, 200, 77], [255, 0, 0], [90, 90, 91]] {
            let back = shift_hsl(px, 0.0, 0.0, 0.0);
            for k in 0..3 {
                assert!((back[k] as i32 - px[k] as i32).abs() <= 1);
            }
        }
        assert_eq!(shift_hsl([255, 0, 0], 180.0, 0.0, 0.0), [0, 255, 255]);
    }

    #[test]
    fn two_tone_and_single_tone_quantization() {
        let img = RgbImage::from_fn(10, 10, |x, _| if x < 5 { Rgb([10, 20, 30]) } else { Rgb([200, 180, 10]) });
        let alpha = Raster::<f32>::new(10, 10, 1, 1.0);
        let mut rng = rng_from(1);
        let q = quantize_colors(&img, &alpha, &PreprocessParams::default(), &mut rng);
        assert_eq!(q, img);
        let flat = RgbImage::from_pixel(6, 6, Rgb([9, 9, 9]));
        let a = Raster::<f32>::new(6, 6, 1, 1.0);
        assert_eq!(quantize_colors(&flat, &a, &PreprocessParams::default(), &mut rng), flat);
    }

    #[test]
    fn erase_prob_extremes() {
        let mut rec = record_with_box(10, 10, 30, 20);
        let mut second = record_with_box(50, 40, 80, 50).instances.remove(0);
        second.mask.instance_id = 1;
        let second_mask = second.mask.mask.clone();
        for (x, y) in second_mask.iter_set() {
            rec.original.put_pixel(x as u32, y as u32, Rgb([250, 250, 0]));
        }
        rec.instances.push(second);
        let mut p = JitterParams::default();
        p.erase_prob = 1.0;
        assert_eq!(erase_others(&rec, 0, &p, &mut rng_from(3)), rec.erased);
        p.erase_prob = 0.0;
        let bg = erase_others(&rec, 0, &p, &mut rng_from(3));
        for (x, y, px) in bg.enumerate_pixels() {
            if rec.instances[0].mask.mask.get(x as usize, y as usize) {
                assert_eq!(px, rec.erased.get_pixel(x, y));
            } else {
                assert_eq!(px, rec.original.get_pixel(x, y));
            }
        }
    }
}
