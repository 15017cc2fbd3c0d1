//! Synthesis orchestration: propose regions, sample reference squares,
//! place rendered text through pluggable geometry and color backends, and
//! filter the result into a [`SynthRecord`].

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use image::RgbImage;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{patch_to_rect, warp_sample, GeometryError};
use crate::harmonize::{harmonize_text, HarmonizeError, HarmonizeParams};
use crate::heatmap::{load_heatmap_png, propose_regions, Heatmap, HeatmapIoError, HeatmapParams};
use crate::ops::{gaussian_blur, sobel, Integral};
use crate::raster::{luma, rgb_to_raster, unit_to_u8, BinaryMask, Raster};
use crate::seeding::{derive_seed, rng_from, Rng};
use crate::textrender::{apply_effects, ink_quad, render_patch, sample_spec, Effect, FontStore, Lexicon, RenderError, SpecPolicy, TextureSet};
use crate::types::{Homography, Point2, QuadBox, StrokeMask, SynthInstance, SynthRecord, SynthStatus, TextPatch, PATCH_SIZE};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error("placement rejected: {0}")]
    PlacementRejected(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Harmonize(#[from] HarmonizeError),
    #[error(transparent)]
    HeatmapIo(#[from] HeatmapIoError),
}

/// Suitable-region proposal for a background.
pub trait LocationBackend: Send + Sync {
    fn name(&self) -> String;
    fn propose(&self, id: &str, background: &RgbImage) -> Result<Heatmap, PipelineError>;
}

/// Fine perspective `A_n` in patch coordinates for a reference square.
pub trait GeometryBackend: Send + Sync {
    fn name(&self) -> String;
    fn fit(&self, rect: &QuadBox, background: &RgbImage, proposal: &Heatmap, rng: &mut Rng) -> Homography<f64>;
}

/// Recolors text inside a composite given its placed alpha.
pub trait ColorBackend: Send + Sync {
    fn name(&self) -> String;
    fn harmonize(&self, comp: &RgbImage, alpha: &Raster<f32>) -> Result<RgbImage, PipelineError>;
}

/// Plainness proposal computed from the background itself.
#[derive(Clone, Debug, Default)]
pub struct PlainnessLocation {
    pub params: HeatmapParams,
}

impl LocationBackend for PlainnessLocation {
    fn name(&self) -> String {
        "plainness".into()
    }

    fn propose(&self, _id: &str, background: &RgbImage) -> Result<Heatmap, PipelineError> {
        Ok(propose_regions(background, &self.params))
    }
}

/// Reads `<dir>/<id>.png`, resamples to the background size with nearest
/// neighbour and binarizes at 0.5.
#[derive(Clone, Debug)]
pub struct HeatmapFileLocation {
    pub dir: PathBuf,
}

impl LocationBackend for HeatmapFileLocation {
    fn name(&self) -> String {
        format!("heatmap-file:{}", self.dir.display())
    }

    fn propose(&self, id: &str, background: &RgbImage) -> Result<Heatmap, PipelineError> {
        let map = load_heatmap_png(&self.dir.join(format!("{id}.png")))?;
        let (w, h) = (background.width() as usize, background.height() as usize);
        let (mw, mh) = map.dims();
        Ok(Heatmap::from_fn(w, h, 1, |x, y, _| {
            let sx = (x * mw / w.max(1)).min(mw - 1);
            let sy = (y * mh / h.max(1)).min(mh - 1);
            if map.get(sx, sy, 0) > 0.5 {
                1.0
            } else {
                0.0
            }
        }))
    }
}

/// Rule-based perspective following dominant near-horizontal lines.
#[derive(Clone, Debug)]
pub struct LeadingLineGeometry {
    pub max_angle_deg: f64,
    /// Bound on the difference of top and bottom edge slopes.
    pub max_slope_gap: f64,
    pub fallback_angle_deg: f64,
    pub window_scale: f64,
}

impl Default for LeadingLineGeometry {
    fn default() -> Self {
        Self {
            max_angle_deg: 25.0,
            max_slope_gap: 0.3,
            fallback_angle_deg: 8.0,
            window_scale: 1.5,
        }
    }
}

impl GeometryBackend for LeadingLineGeometry {
    fn name(&self) -> String {
        "leading-line".into()
    }

    fn fit(&self, rect: &QuadBox, background: &RgbImage, proposal: &Heatmap, rng: &mut Rng) -> Homography<f64> {
        fit_geometry_with(self, rect, background, proposal, rng)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityGeometry;

impl GeometryBackend for IdentityGeometry {
    fn name(&self) -> String {
        "identity".into()
    }

    fn fit(&self, _: &QuadBox, _: &RgbImage, _: &Heatmap, _: &mut Rng) -> Homography<f64> {
        Homography::identity()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RainColor {
    pub params: HarmonizeParams,
}

impl ColorBackend for RainColor {
    fn name(&self) -> String {
        "rain".into()
    }

    fn harmonize(&self, comp: &RgbImage, alpha: &Raster<f32>) -> Result<RgbImage, PipelineError> {
        Ok(harmonize_text(comp, alpha, &self.params)?)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PassthroughColor;

impl ColorBackend for PassthroughColor {
    fn name(&self) -> String {
        "passthrough".into()
    }

    fn harmonize(&self, comp: &RgbImage, _: &Raster<f32>) -> Result<RgbImage, PipelineError> {
        Ok(comp.clone())
    }
}

#[derive(Clone)]
pub struct Backends {
    pub location: Arc<dyn LocationBackend>,
    pub geometry: Arc<dyn GeometryBackend>,
    pub color: Arc<dyn ColorBackend>,
}

impl Backends {
    /// Plainness proposals, leading-line geometry and RAIN colors.
    pub fn reference(heatmap: HeatmapParams, harmonize: HarmonizeParams) -> Self {
        Self {
            location: Arc::new(PlainnessLocation { params: heatmap }),
            geometry: Arc::new(LeadingLineGeometry::default()),
            color: Arc::new(RainColor { params: harmonize }),
        }
    }
}

impl Default for Backends {
    fn default() -> Self {
        Self::reference(HeatmapParams::default(), HarmonizeParams::default())
    }
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("location", &self.location.name())
            .field("geometry", &self.geometry.name())
            .field("color", &self.color.name())
            .finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Target long side of the background.
    pub image_size: u32,
    pub texts_per_image: [usize; 2],
    pub overlap_required: f64,
    pub min_text_height_px: f64,
    pub max_rect_attempts: usize,
    pub seed: u64,
    pub heatmap: HeatmapParams,
    pub harmonize: HarmonizeParams,
    pub spec_policy: SpecPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            image_size: 768,
            texts_per_image: [1, 8],
            overlap_required: 0.7,
            min_text_height_px: 12.0,
            max_rect_attempts: 100,
            seed: 0,
            heatmap: HeatmapParams::default(),
            harmonize: HarmonizeParams::default(),
            spec_policy: SpecPolicy::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.overlap_required > 0.0 && self.overlap_required <= 1.0) {
            return bad("overlap_required must lie in (0, 1]");
        }
        if self.texts_per_image[0] > self.texts_per_image[1] {
            return bad("texts_per_image must be a nonempty range");
        }
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        if !(self.min_text_height_px > 0.0) {
            return bad("min_text_height_px must be positive");
        }
        self.heatmap.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.harmonize.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    /// Side range of sampled reference squares for an image.
    pub fn rect_side_range(&self, width: usize, height: usize) -> (f64, f64) {
        (1.4 * self.min_text_height_px, 0.5 * width.min(height) as f64)
    }
}

/// Rendering inputs shared by all images.
#[derive(Clone, Debug)]
pub struct Assets {
    pub fonts: FontStore,
    pub lexicon: Lexicon,
    pub textures: TextureSet,
}

/// Per-pixel integer class labels for semantic boundary filtering.
pub type LabelMap = Raster<u32>;

/// Fraction of the square's pixels covered by the proposal.
pub fn rect_overlap(integral: &Integral, x0: usize, y0: usize, side: usize) -> f64 {
    integral.sum(x0, y0, x0 + side - 1, y0 + side - 1) / (side * side) as f64
}

/// Square covering pixels `x0..x0+side` × `y0..y0+side` exactly.
pub fn pixel_square(x0: usize, y0: usize, side: usize) -> QuadBox {
    let (x, y, s) = (x0 as f64 - 0.5, y0 as f64 - 0.5, side as f64);
    QuadBox::axis_aligned(x, y, x + s, y + s).expect("positive side")
}

/// Pixel origin and side of a square built by [`pixel_square`].
pub fn square_pixels(rect: &QuadBox) -> (usize, usize, usize) {
    let (x0, y0, x1, _) = rect.bounds();
    ((x0 + 0.5).round() as usize, (y0 + 0.5).round() as usize, (x1 - x0).round() as usize)
}

/// Rejection-samples an axis-aligned square whose pixels are at least
/// `overlap_required` covered by the proposal. The center is drawn
/// uniformly from the proposal support and the side uniformly from
/// [`PipelineConfig::rect_side_range`]; the square is then shifted inside
/// the image. Returns `None` after `max_rect_attempts` failures or when the
/// proposal is empty.
pub fn sample_rect(proposal: &Heatmap, rng: &mut Rng, config: &PipelineConfig) -> Option<QuadBox> {
    let (w, h) = proposal.dims();
    let support = proposal.above(0.5);
    let pixels: Vec<(usize, usize)> = support.iter_set().collect();
    if pixels.is_empty() {
        return None;
    }
    let (lo, hi) = config.rect_side_range(w, h);
    if hi < lo || hi < 1.0 {
        return None;
    }
    let integral = Integral::from_mask(&support);
    for _ in 0..config.max_rect_attempts {
        let (cx, cy) = pixels[rng.gen_range(0..pixels.len())];
        let side = (lo + (hi - lo) * rng.gen::<f64>()).round().max(1.0) as usize;
        let side = side.min(w).min(h);
        let x0 = (cx as i64 - side as i64 / 2).clamp(0, (w - side) as i64) as usize;
        let y0 = (cy as i64 - side as i64 / 2).clamp(0, (h - side) as i64) as usize;
        if rect_overlap(&integral, x0, y0, side) >= config.overlap_required {
            return Some(pixel_square(x0, y0, side));
        }
    }
    None
}

const ORIENT_BINS: usize = 91;
const REFINE_WINDOW_DEG: f64 = 10.0;

/// Line orientations in `[-45°, 45°]` with gradient magnitudes over the
/// given pixel columns and rows.
fn line_samples(gx: &Raster<f32>, gy: &Raster<f32>, xs: (usize, usize), ys: (usize, usize)) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for y in ys.0..ys.1 {
        for x in xs.0..xs.1 {
            let (a, b) = (gx.get(x, y, 0) as f64, gy.get(x, y, 0) as f64);
            let mag = (a * a + b * b).sqrt();
            if mag < 1e-3 {
                continue;
            }
            // line direction is perpendicular to the gradient
            let mut deg = (-a).atan2(b).to_degrees();
            if deg > 90.0 {
                deg -= 180.0;
            } else if deg <= -90.0 {
                deg += 180.0;
            }
            if deg.abs() <= 45.0 {
                out.push((deg, mag));
            }
        }
    }
    out
}

/// Dominant line angle in degrees, if any. The 1° magnitude-weighted
/// histogram must peak at least twice its median; the angle is then the
/// doubled-angle mean of samples within 10° of the peak, which removes the
/// bias pixel staircases put on the mode.
fn dominant_angle(samples: &[(f64, f64)]) -> Option<f64> {
    let mut hist = [0.0f64; ORIENT_BINS];
    for &(deg, mag) in samples {
        hist[(deg.round() as i64 + 45) as usize] += mag;
    }
    let (bin, peak) = hist
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    if peak <= 0.0 {
        return None;
    }
    let mut sorted = hist.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if peak < 2.0 * sorted[ORIENT_BINS / 2] {
        return None;
    }
    let mode = bin as f64 - 45.0;
    let (mut s, mut c) = (0.0, 0.0);
    for &(deg, mag) in samples {
        if (deg - mode).abs() <= REFINE_WINDOW_DEG {
            let t = (2.0 * deg).to_radians();
            s += mag * t.sin();
            c += mag * t.cos();
        }
    }
    Some(0.5 * s.atan2(c).to_degrees())
}

/// Maps the patch's reference square (half-side 64 about the patch center)
/// onto a quad whose top and bottom edges have the given slopes, with
/// vertical offsets added per corner.
fn edge_homography(top_slope: f64, bottom_slope: f64, offsets: [f64; 4]) -> Homography<f64> {
    let c = PATCH_SIZE as f64 / 2.0;
    let r = PATCH_SIZE as f64 / 4.0;
    let src = QuadBox::axis_aligned(c - r, c - r, c + r, c + r).expect("square");
    let dst = QuadBox::new([
        Point2::new(c - r, c - r - r * top_slope + offsets[0]),
        Point2::new(c + r, c - r + r * top_slope + offsets[1]),
        Point2::new(c + r, c + r + r * bottom_slope + offsets[2]),
        Point2::new(c - r, c + r - r * bottom_slope + offsets[3]),
    ]);
    match dst {
        Ok(dst) => crate::geometry::quad_to_homography(&src, &dst).unwrap_or_else(|_| Homography::identity()),
        Err(_) => Homography::identity(),
    }
}

/// Reference geometry backend with default bounds.
pub fn fit_geometry(rect: &QuadBox, background: &RgbImage, proposal: &Heatmap, rng: &mut Rng) -> Homography<f64> {
    fit_geometry_with(&LeadingLineGeometry::default(), rect, background, proposal, rng)
}

fn fit_geometry_with(
    g: &LeadingLineGeometry,
    rect: &QuadBox,
    background: &RgbImage,
    _proposal: &Heatmap,
    rng: &mut Rng,
) -> Homography<f64> {
    // fallback offsets are drawn unconditionally to keep the stream aligned
    let fb = g.fallback_angle_deg.to_radians().tan() * PATCH_SIZE as f64 / 4.0;
    let offsets: [f64; 4] = [0; 4].map(|_| fb * (2.0 * rng.gen::<f64>() - 1.0));

    let (w, h) = (background.width() as usize, background.height() as usize);
    let c = rect.centroid();
    let (x0, y0, x1, y1) = rect.bounds();
    let half = (x1 - x0).max(y1 - y0) * g.window_scale / 2.0;
    let wx0 = (c.x - half).floor().max(0.0) as usize;
    let wy0 = (c.y - half).floor().max(0.0) as usize;
    let wx1 = ((c.x + half).ceil().max(0.0) as usize).min(w);
    let wy1 = ((c.y + half).ceil().max(0.0) as usize).min(h);
    if wx1 <= wx0 + 2 || wy1 <= wy0 + 2 {
        return edge_homography(0.0, 0.0, offsets);
    }
    let gray = luma(background).crop(wx0, wy0, wx1 - wx0, wy1 - wy0);
    // smoothing first keeps staircase edges from voting for 0°
    let (gx, gy) = sobel(&gaussian_blur(&gray, 1.5));
    let (ww, wh) = gray.dims();
    let top = dominant_angle(&line_samples(&gx, &gy, (0, ww), (0, wh / 2)));
    let bottom = dominant_angle(&line_samples(&gx, &gy, (0, ww), (wh / 2, wh)));
    let (ta, ba) = match (top, bottom) {
        (Some(t), Some(b)) => (t, b),
        (Some(t), None) => (t, t),
        (None, Some(b)) => (b, b),
        (None, None) => return edge_homography(0.0, 0.0, offsets),
    };
    let clamp_angle = |a: f64| a.clamp(-g.max_angle_deg, g.max_angle_deg).to_radians().tan();
    let (mut ts, mut bs) = (clamp_angle(ta), clamp_angle(ba));
    let gap = bs - ts;
    if gap.abs() > g.max_slope_gap {
        let mid = (ts + bs) / 2.0;
        let half_gap = g.max_slope_gap / 2.0 * gap.signum();
        ts = mid - half_gap;
        bs = mid + half_gap;
    }
    edge_homography(ts, bs, [0.0; 4])
}

/// Result of placing one patch.
#[derive(Clone, Debug)]
pub struct Placement {
    pub image: RgbImage,
    /// Warped coverage of everything drawn (text plus effects).
    pub alpha: Raster<f32>,
    /// Warped coverage of the glyphs alone.
    pub ink: Raster<f32>,
    pub quad: QuadBox,
    /// `A_m · A_n`.
    pub transform: Homography<f64>,
}

/// Transform and quad a patch would be placed with.
pub fn plan_placement(
    ink: &Raster<f32>,
    rect: &QuadBox,
    a_n: &Homography<f64>,
) -> Result<(Homography<f64>, QuadBox), PipelineError> {
    let a_m = patch_to_rect(rect, PATCH_SIZE)?;
    let t = a_m.then_after(a_n).map_err(GeometryError::from)?;
    let probe = TextPatch {
        rgb: RgbImage::new(1, 1),
        alpha: ink.clone(),
        bbox_mask: BinaryMask::new(1, 1),
        text: String::new(),
        rect: None,
    };
    let q = ink_quad(&probe).ok_or_else(|| PipelineError::PlacementRejected("patch has no ink".into()))?;
    let quad = q
        .transform(&t)
        .map_err(|e| PipelineError::PlacementRejected(format!("placed quad: {e}")))?;
    Ok((t, quad))
}

/// Warps the patch into the background by `A_m · A_n`, composites it and
/// harmonizes the text colors. `ink` is the glyph coverage before effects;
/// the placed quad is its bounding box mapped forward.
pub fn place_instance(
    bg: &RgbImage,
    patch: &TextPatch,
    ink: &Raster<f32>,
    rect: &QuadBox,
    a_n: &Homography<f64>,
    color: &dyn ColorBackend,
) -> Result<Placement, PipelineError> {
    let (w, h) = (bg.width() as usize, bg.height() as usize);
    let (t, quad) = plan_placement(ink, rect, a_n)?;
    if !quad.within(w, h) {
        return Err(PipelineError::PlacementRejected("quad leaves the image".into()));
    }
    let n = PATCH_SIZE;
    let layer = Raster::<f32>::from_fn(n, n, 5, |x, y, c| {
        let a = patch.alpha.get(x, y, 0);
        match c {
            3 => a,
            4 => ink.get(x, y, 0),
            _ => a * patch.rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0,
        }
    });
    let warped = warp_sample(&layer, &t.cast::<f32>(), w, h)?;
    let alpha = warped.channel(3).map(|v| v.clamp(0.0, 1.0));
    let placed_ink = warped.channel(4).map(|v| v.clamp(0.0, 1.0));
    let mut comp = bg.clone();
    for y in 0..h {
        for x in 0..w {
            let a = alpha.get(x, y, 0);
            if a <= 0.0 {
                continue;
            }
            let px = comp.get_pixel_mut(x as u32, y as u32);
            for c in 0..3 {
                // premultiplied text over background
                let v = warped.get(x, y, c) as f64 + (1.0 - a as f64) * px.0[c] as f64 / 255.0;
                px.0[c] = unit_to_u8(v);
            }
        }
    }
    let image = if alpha.support().is_empty() {
        comp
    } else {
        color.harmonize(&comp, &alpha)?
    };
    Ok(Placement {
        image,
        alpha,
        ink: placed_ink,
        quad,
        transform: t,
    })
}

/// Gaussian blur blended in by the placed alpha; pixels with zero alpha are
/// left untouched.
pub fn blur_within_alpha(img: &RgbImage, alpha: &Raster<f32>, sigma: f64) -> RgbImage {
    let Some((x0, y0, x1, y1)) = alpha.support().bounds() else {
        return img.clone();
    };
    let pad = (3.0 * sigma).ceil() as usize + 1;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (wx0, wy0) = (x0.saturating_sub(pad), y0.saturating_sub(pad));
    let (wx1, wy1) = ((x1 + pad).min(w - 1), (y1 + pad).min(h - 1));
    let (ww, wh) = (wx1 - wx0 + 1, wy1 - wy0 + 1);
    let window = rgb_to_raster::<f32>(img).crop(wx0, wy0, ww, wh);
    let blurred: Vec<Raster<f32>> = (0..3).map(|c| gaussian_blur(&window.channel(c), sigma)).collect();
    let mut out = img.clone();
    for y in 0..wh {
        for x in 0..ww {
            let a = alpha.get(wx0 + x, wy0 + y, 0);
            if a <= 0.0 {
                continue;
            }
            let px = out.get_pixel_mut((wx0 + x) as u32, (wy0 + y) as u32);
            for c in 0..3 {
                let v = window.get(x, y, c) as f64 * (1.0 - a as f64) + blurred[c].get(x, y, 0) as f64 * a as f64;
                px.0[c] = unit_to_u8(v);
            }
        }
    }
    out
}

/// True when the quad's interior spans more than one semantic label.
pub fn crosses_semantic_boundary(quad: &QuadBox, labels: &LabelMap) -> bool {
    let (w, h) = labels.dims();
    let mut first = None;
    for (x, y) in quad.interior_mask(w, h).iter_set() {
        let l = labels.get(x, y, 0);
        match first {
            None => first = Some(l),
            Some(f) if f != l => return true,
            _ => {}
        }
    }
    false
}

/// Dimensions after scaling the long side to `image_size`.
pub fn resized_dims(w: u32, h: u32, image_size: u32) -> (u32, u32) {
    let long = w.max(h);
    if long == image_size || long == 0 {
        return (w, h);
    }
    let s = image_size as f64 / long as f64;
    (((w as f64 * s).round() as u32).max(1), ((h as f64 * s).round() as u32).max(1))
}

/// Resizes so the long side equals `image_size` (triangle filter).
pub fn resize_background(bg: &RgbImage, image_size: u32) -> RgbImage {
    let (w, h) = bg.dimensions();
    let (nw, nh) = resized_dims(w, h, image_size);
    if (nw, nh) == (w, h) {
        return bg.clone();
    }
    image::imageops::resize(bg, nw, nh, image::imageops::FilterType::Triangle)
}

/// Per-image seed derived from the run seed and the background id.
pub fn image_seed(run_seed: u64, id: &str) -> u64 {
    derive_seed(run_seed, id, 0)
}

struct Candidate {
    patch: TextPatch,
    ink: Raster<f32>,
    blur: Option<f64>,
    rect: QuadBox,
}

/// Generates one sample from a background.
///
/// The background is resized so its long side equals `image_size`; a
/// count of texts is drawn, each with a rendered patch and a reference
/// square; candidates are placed largest square first. A candidate is
/// dropped when its square cannot be sampled, its placed quad leaves the
/// image, touches an earlier quad, is shorter than `min_text_height_px`,
/// or crosses a semantic boundary. Everything is determined by `seed`.
pub fn synthesize(
    id: &str,
    background: &RgbImage,
    semantic: Option<&LabelMap>,
    config: &PipelineConfig,
    backends: &Backends,
    assets: &Assets,
    seed: u64,
) -> Result<SynthRecord, PipelineError> {
    config.validate()?;
    let mut rng = rng_from(seed);
    let mut image = resize_background(background, config.image_size);
    let (w, h) = (image.width() as usize, image.height() as usize);
    if let Some(l) = semantic {
        if l.dims() != (w, h) {
            return Err(PipelineError::Config(format!(
                "semantic map is {:?}, background resized to {:?}",
                l.dims(),
                (w, h)
            )));
        }
    }
    let [lo, hi] = config.texts_per_image;
    let count = rng.gen_range(lo..=hi);
    let mut instances: Vec<SynthInstance> = Vec::new();
    if count > 0 {
        let proposal = backends.location.propose(id, &image)?;
        let mut candidates = Vec::with_capacity(count);
        for _ in 0..count {
            let spec = sample_spec(&assets.lexicon, &assets.fonts, &config.spec_policy, &mut rng)?;
            let Some(rect) = sample_rect(&proposal, &mut rng, config) else {
                continue;
            };
            let rendered = match render_patch(&assets.fonts, &spec) {
                Ok(p) => p,
                Err(RenderError::Glyph { .. } | RenderError::Overflow(_) | RenderError::EmptyText) => continue,
                Err(e) => return Err(e.into()),
            };
            let (pre, post): (Vec<Effect>, Vec<Effect>) =
                spec.effects.into_iter().partition(|e| !matches!(e, Effect::Blur { .. }));
            let blur = post.iter().find_map(|e| match e {
                Effect::Blur { sigma } => Some(*sigma),
                _ => None,
            });
            let ink = rendered.alpha.clone();
            let patch = apply_effects(&rendered, &pre, &assets.textures, &mut rng);
            candidates.push(Candidate { patch, ink, blur, rect });
        }
        // larger squares first; the sort is stable so ties keep draw order
        candidates.sort_by(|a, b| square_pixels(&b.rect).2.cmp(&square_pixels(&a.rect).2));
        for cand in candidates {
            let a_n = backends.geometry.fit(&cand.rect, &image, &proposal, &mut rng);
            let Ok((t, quad)) = plan_placement(&cand.ink, &cand.rect, &a_n) else {
                continue;
            };
            if !quad.within(w, h)
                || quad.height() < config.min_text_height_px
                || instances.iter().any(|i| i.quad.intersection_area(&quad) > 0.0)
                || semantic.is_some_and(|l| crosses_semantic_boundary(&quad, l))
            {
                continue;
            }
            let placed = match place_instance(&image, &cand.patch, &cand.ink, &cand.rect, &a_n, backends.color.as_ref()) {
                Ok(p) => p,
                Err(PipelineError::PlacementRejected(_) | PipelineError::Harmonize(_)) => continue,
                Err(e) => return Err(e),
            };
            image = match cand.blur {
                Some(sigma) => blur_within_alpha(&placed.image, &placed.alpha, sigma),
                None => placed.image,
            };
            let mask = placed.ink.above(0.5);
            instances.push(SynthInstance {
                quad,
                mask: StrokeMask {
                    mask,
                    instance_id: instances.len() as u32,
                },
                text: cand.patch.text.clone(),
                rect: cand.rect,
                transform: t,
            });
        }
    }
    let status = if instances.is_empty() {
        SynthStatus::Empty
    } else {
        SynthStatus::Ok
    };
    Ok(SynthRecord {
        provenance: id.to_string(),
        image,
        instances,
        seed,
        status,
    })
}
