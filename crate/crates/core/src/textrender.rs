//! Plain text patch rendering and post-processing effects.

use std::fs;
use std::path::{Path, PathBuf};

use ab_glyph::{point, Font, FontArc, GlyphId, PxScale, ScaleFont};
use image::{Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::gaussian_blur;
use crate::raster::{luma, unit_to_u8, BinaryMask, Raster};
use crate::seeding::{rng_from, Rng};
use crate::types::{QuadBox, TextPatch, PATCH_SIZE};

/// Largest ink extent as a fraction of the patch side.
pub const MAX_INK_FRACTION: f64 = 0.8;
pub const MIN_SIZE_PX: u32 = 8;
/// Glyph coverage below one 8-bit level is dropped.
pub const COVERAGE_FLOOR: f32 = 1.0 / 255.0;

const BUNDLED_FONT: &[u8] = include_bytes!("../assets/fonts/DejaVuSans.ttf");
pub const BUNDLED_FONT_ID: &str = "DejaVuSans";

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("text is empty or has no visible ink")]
    EmptyText,
    #[error("font {0:?} is not registered")]
    UnknownFont(String),
    #[error("font {font:?} has no glyph for {ch:?}")]
    Glyph { font: String, ch: char },
    #[error("{0:?} does not fit the patch at {MIN_SIZE_PX} px")]
    Overflow(String),
    #[error("invalid render spec: {0}")]
    InvalidSpec(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse font {0}")]
    FontParse(PathBuf),
    #[error("cannot decode texture {path}: {source}")]
    Texture {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RenderError + '_ {
    move |source| RenderError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Registered fonts, addressed by id. No system fallback is consulted.
#[derive(Clone, Default)]
pub struct FontStore {
    fonts: Vec<(String, FontArc)>,
}

impl std::fmt::Debug for FontStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.ids()).finish()
    }
}

impl FontStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store holding only the font shipped with the crate.
    pub fn bundled() -> Self {
        let mut s = Self::new();
        s.fonts.push((
            BUNDLED_FONT_ID.to_string(),
            FontArc::try_from_slice(BUNDLED_FONT).expect("bundled font parses"),
        ));
        s
    }

    pub fn add_bytes(&mut self, id: &str, bytes: Vec<u8>) -> Result<(), RenderError> {
        let font = FontArc::try_from_vec(bytes).map_err(|_| RenderError::FontParse(PathBuf::from(id)))?;
        self.fonts.retain(|(k, _)| k != id);
        self.fonts.push((id.to_string(), font));
        Ok(())
    }

    /// Registers a font file under its file stem.
    pub fn add_file(&mut self, path: &Path) -> Result<String, RenderError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.add_bytes(&id, bytes)
            .map_err(|_| RenderError::FontParse(path.to_path_buf()))?;
        Ok(id)
    }

    /// Registers every `.ttf`/`.otf` file in `dir`, in file-name order.
    pub fn load_dir(dir: &Path) -> Result<Self, RenderError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "ttf" | "otf"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        let mut s = Self::new();
        for p in paths {
            s.add_file(&p)?;
        }
        Ok(s)
    }

    pub fn get(&self, id: &str) -> Option<&FontArc> {
        self.fonts.iter().find(|(k, _)| k == id).map(|(_, f)| f)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.fonts.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.fonts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fonts.is_empty()
    }
}

/// Word list, one token per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    pub words: Vec<String>,
}

impl Lexicon {
    pub fn parse(text: &str) -> Self {
        Self {
            words: text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, RenderError> {
        Ok(Self::parse(&fs::read_to_string(path).map_err(io_err(path))?))
    }
}

/// Grayscale tiles used by the texture effect.
#[derive(Clone, Debug, Default)]
pub struct TextureSet {
    tiles: Vec<Raster<f32>>,
}

impl TextureSet {
    pub fn load_dir(dir: &Path) -> Result<Self, RenderError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        paths.sort();
        let mut tiles = Vec::with_capacity(paths.len());
        for p in paths {
            let img = image::open(&p)
                .map_err(|source| RenderError::Texture { path: p.clone(), source })?
                .to_rgb8();
            tiles.push(luma(&img));
        }
        Ok(Self { tiles })
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Tile for `id`: a loaded texture when any exist, otherwise smooth
    /// value noise seeded by `id`.
    pub fn tile(&self, id: u64) -> Raster<f32> {
        if !self.tiles.is_empty() {
            return self.tiles[(id % self.tiles.len() as u64) as usize].clone();
        }
        procedural_tile(id, 64)
    }
}

fn procedural_tile(id: u64, side: usize) -> Raster<f32> {
    let mut rng = rng_from(id);
    let cells = 8;
    let grid: Vec<f32> = (0..cells * cells).map(|_| rng.gen::<f32>()).collect();
    let step = side as f32 / cells as f32;
    Raster::from_fn(side, side, 1, |x, y, _| {
        let fx = x as f32 / step;
        let fy = y as f32 / step;
        let (i, j) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - i as f32, fy - j as f32);
        let g = |a: usize, b: usize| grid[(b % cells) * cells + a % cells];
        let top = g(i, j) * (1.0 - tx) + g(i + 1, j) * tx;
        let bot = g(i, j + 1) * (1.0 - tx) + g(i + 1, j + 1) * tx;
        top * (1.0 - ty) + bot * ty
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    Shadow { dx: i32, dy: i32, opacity: f32 },
    Blur { sigma: f64 },
    Emboss { depth: f64 },
    Texture { id: u64, opacity: f32 },
}

impl Effect {
    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: &str| Err(RenderError::InvalidSpec(m.to_string()));
        match *self {
            Effect::Shadow { dx, dy, opacity } => {
                if dx.abs() > 6 || dy.abs() > 6 || !(0.0..=0.6).contains(&opacity) {
                    return bad("shadow offset must be at most 6 px and opacity at most 0.6");
                }
            }
            Effect::Blur { sigma } => {
                if !(sigma > 0.0 && sigma <= 1.5) {
                    return bad("blur sigma must lie in (0, 1.5]");
                }
            }
            Effect::Emboss { depth } => {
                if !(depth > 0.0 && depth <= 2.0) {
                    return bad("emboss depth must lie in (0, 2]");
                }
            }
            Effect::Texture { opacity, .. } => {
                if !(0.0..=0.3).contains(&opacity) {
                    return bad("texture opacity must lie in [0, 0.3]");
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub text: String,
    pub font_id: String,
    pub fill: [u8; 3],
    pub size_px: u32,
    #[serde(default)]
    pub effects: Vec<Effect>,
}

impl RenderSpec {
    pub fn validate(&self) -> Result<(), RenderError> {
        if self.text.trim().is_empty() {
            return Err(RenderError::EmptyText);
        }
        if self.size_px < MIN_SIZE_PX {
            return Err(RenderError::InvalidSpec(format!("size_px must be at least {MIN_SIZE_PX}")));
        }
        self.effects.iter().try_for_each(Effect::validate)
    }
}

struct Laid {
    glyphs: Vec<ab_glyph::OutlinedGlyph>,
    bounds: Option<(f32, f32, f32, f32)>,
}

fn layout(font: &FontArc, ids: &[GlyphId], size: f32, origin: (f32, f32)) -> Laid {
    let scale = PxScale::from(size);
    let scaled = font.as_scaled(scale);
    let mut x = origin.0;
    let y = origin.1 + scaled.ascent();
    let mut prev: Option<GlyphId> = None;
    let mut glyphs = Vec::new();
    let mut bounds: Option<(f32, f32, f32, f32)> = None;
    for &id in ids {
        if let Some(p) = prev {
            x += scaled.kern(p, id);
        }
        let g = id.with_scale_and_position(scale, point(x, y));
        x += scaled.h_advance(id);
        prev = Some(id);
        if let Some(og) = font.outline_glyph(g) {
            let b = og.px_bounds();
            bounds = Some(match bounds {
                None => (b.min.x, b.min.y, b.max.x, b.max.y),
                Some((a, c, d, e)) => (a.min(b.min.x), c.min(b.min.y), d.max(b.max.x), e.max(b.max.y)),
            });
            glyphs.push(og);
        }
    }
    Laid { glyphs, bounds }
}

/// Axis-aligned bounding box of the alpha support as a filled mask.
pub fn bbox_of_alpha(alpha: &Raster<f32>) -> BinaryMask {
    let (w, h) = alpha.dims();
    match alpha.support().bounds() {
        None => BinaryMask::new(w, h),
        Some((x0, y0, x1, y1)) => BinaryMask::from_fn(w, h, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y)),
    }
}

/// Ink bounding box of a patch: the extent of the region where the
/// bilinearly interpolated coverage exceeds one half. Warped stroke masks
/// sample exactly this region, so they stay inside the mapped box. Edges
/// are located by linear interpolation between neighbouring pixels, with
/// zero coverage outside the patch.
pub fn ink_quad(patch: &TextPatch) -> Option<QuadBox> {
    let a = &patch.alpha;
    let (w, h) = (a.width() as i64, a.height() as i64);
    let cov = |x: i64, y: i64| if x < 0 || y < 0 || x >= w || y >= h { 0.0 } else { a.get(x as usize, y as usize, 0) as f64 };
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for y in 0..h {
        for x in 0..w {
            let v = cov(x, y);
            if v <= 0.5 {
                continue;
            }
            for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let n = cov(x + dx, y + dy);
                let t = if n > 0.5 { 0.0 } else { (v - 0.5) / (v - n) };
                let (px, py) = (x as f64 + dx as f64 * t, y as f64 + dy as f64 * t);
                x0 = x0.min(px);
                x1 = x1.max(px);
                y0 = y0.min(py);
                y1 = y1.max(py);
            }
        }
    }
    if x0 > x1 {
        return None;
    }
    QuadBox::axis_aligned(x0, y0, x1, y1).ok()
}

fn patch_from_layers(rgb: &Raster<f32>, alpha: Raster<f32>, text: &str) -> TextPatch {
    let n = PATCH_SIZE as u32;
    let img = RgbImage::from_fn(n, n, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if alpha.get(x, y, 0) > 0.0 {
            Rgb([0, 1, 2].map(|c| unit_to_u8(rgb.get(x, y, c) as f64)))
        } else {
            Rgb([0, 0, 0])
        }
    });
    TextPatch {
        rgb: img,
        bbox_mask: bbox_of_alpha(&alpha),
        alpha,
        text: text.to_string(),
        rect: None,
    }
}

/// Rasterizes `spec.text` horizontally, centered on the patch, shrinking
/// the size until the ink box fits within 80% of the patch side. Effects in
/// the spec are not applied here.
pub fn render_patch(fonts: &FontStore, spec: &RenderSpec) -> Result<TextPatch, RenderError> {
    spec.validate()?;
    let font = fonts
        .get(&spec.font_id)
        .ok_or_else(|| RenderError::UnknownFont(spec.font_id.clone()))?;
    let mut ids = Vec::with_capacity(spec.text.len());
    for ch in spec.text.chars() {
        let id = font.glyph_id(ch);
        if id.0 == 0 && !ch.is_whitespace() {
            return Err(RenderError::Glyph {
                font: spec.font_id.clone(),
                ch,
            });
        }
        ids.push(id);
    }
    let limit = (MAX_INK_FRACTION * PATCH_SIZE as f64) as f32;
    let mut size = spec.size_px;
    let laid = loop {
        let laid = layout(font, &ids, size as f32, (0.0, 0.0));
        let (x0, y0, x1, y1) = laid.bounds.ok_or(RenderError::EmptyText)?;
        let extent = (x1 - x0).max(y1 - y0);
        if extent <= limit {
            break laid;
        }
        let next = ((size as f32 * limit / extent).floor() as u32).min(size - 1);
        if next < MIN_SIZE_PX {
            return Err(RenderError::Overflow(spec.text.clone()));
        }
        size = next;
    };
    let (x0, y0, x1, y1) = laid.bounds.expect("checked above");
    let half = PATCH_SIZE as f32 / 2.0;
    // whole-pixel shift keeps the rasterization identical to the measured one
    let sx = (half - (x0 + x1) / 2.0).round();
    let sy = (half - (y0 + y1) / 2.0).round();
    let laid = layout(font, &ids, size as f32, (sx, sy));

    let mut alpha = Raster::<f32>::zeros(PATCH_SIZE, PATCH_SIZE, 1);
    for og in &laid.glyphs {
        let b = og.px_bounds();
        let (bx, by) = (b.min.x as i64, b.min.y as i64);
        og.draw(|x, y, c| {
            let (px, py) = (bx + x as i64, by + y as i64);
            if px < 0 || py < 0 || px >= PATCH_SIZE as i64 || py >= PATCH_SIZE as i64 || c <= 0.0 {
                return;
            }
            let v = alpha.get(px as usize, py as usize, 0);
            alpha.set(px as usize, py as usize, 0, (v + c).min(1.0));
        });
    }
    // rasterizer round-off leaves faint coverage across whole glyph boxes
    let alpha = alpha.map(|v| if v < COVERAGE_FLOOR { 0.0 } else { v });
    if alpha.support().is_empty() {
        return Err(RenderError::EmptyText);
    }
    let fill = spec.fill.map(|v| v as f32 / 255.0);
    let rgb = Raster::from_fn(PATCH_SIZE, PATCH_SIZE, 3, |_, _, c| fill[c]);
    Ok(patch_from_layers(&rgb, alpha, &spec.text))
}

fn straight_rgb(patch: &TextPatch) -> Raster<f32> {
    Raster::from_fn(PATCH_SIZE, PATCH_SIZE, 3, |x, y, c| {
        patch.rgb.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
    })
}

/// Applies `effects` in order. The bbox mask is recomputed from the final
/// alpha. `rng` only chooses texture tile offsets.
pub fn apply_effects(patch: &TextPatch, effects: &[Effect], textures: &TextureSet, rng: &mut Rng) -> TextPatch {
    if effects.is_empty() {
        return patch.clone();
    }
    let n = PATCH_SIZE;
    let mut rgb = straight_rgb(patch);
    let mut alpha = patch.alpha.clone();
    for e in effects {
        match *e {
            Effect::Shadow { dx, dy, opacity } => {
                let src = |x: usize, y: usize| -> Option<(usize, usize)> {
                    let (sx, sy) = (x as i64 - dx as i64, y as i64 - dy as i64);
                    (sx >= 0 && sy >= 0 && sx < n as i64 && sy < n as i64).then_some((sx as usize, sy as usize))
                };
                let mut out_rgb = rgb.clone();
                let mut out_a = alpha.clone();
                for y in 0..n {
                    for x in 0..n {
                        let Some((sx, sy)) = src(x, y) else { continue };
                        let s = alpha.get(sx, sy, 0) * opacity;
                        if s <= 0.0 {
                            continue;
                        }
                        let a = alpha.get(x, y, 0);
                        let ao = a + s * (1.0 - a);
                        for c in 0..3 {
                            let shade = 0.3 * rgb.get(sx, sy, c);
                            out_rgb.set(x, y, c, (rgb.get(x, y, c) * a + shade * s * (1.0 - a)) / ao);
                        }
                        out_a.set(x, y, 0, ao);
                    }
                }
                rgb = out_rgb;
                alpha = out_a;
            }
            Effect::Blur { sigma } => {
                let pre: Vec<Raster<f32>> = (0..3)
                    .map(|c| {
                        let ch = Raster::from_fn(n, n, 1, |x, y, _| rgb.get(x, y, c) * alpha.get(x, y, 0));
                        gaussian_blur(&ch, sigma)
                    })
                    .collect();
                alpha = gaussian_blur(&alpha, sigma).map(|v| if v < 1e-4 { 0.0 } else { v.min(1.0) });
                rgb = Raster::from_fn(n, n, 3, |x, y, c| {
                    let a = alpha.get(x, y, 0);
                    if a > 0.0 {
                        (pre[c].get(x, y, 0) / a).clamp(0.0, 1.0)
                    } else {
                        0.0
                    }
                });
            }
            Effect::Emboss { depth } => {
                let d = depth.round().max(1.0) as i64;
                let at = |x: i64, y: i64| -> f32 {
                    if x < 0 || y < 0 || x >= n as i64 || y >= n as i64 {
                        0.0
                    } else {
                        alpha.get(x as usize, y as usize, 0)
                    }
                };
                let mut out = rgb.clone();
                for y in 0..n {
                    for x in 0..n {
                        if alpha.get(x, y, 0) <= 0.0 {
                            continue;
                        }
                        // light from the top-left: edges facing it brighten
                        let (xi, yi) = (x as i64, y as i64);
                        let shade = 0.5 * (at(xi + d, yi + d) - at(xi - d, yi - d));
                        for c in 0..3 {
                            out.set(x, y, c, (rgb.get(x, y, c) + shade).clamp(0.0, 1.0));
                        }
                    }
                }
                rgb = out;
            }
            Effect::Texture { id, opacity } => {
                let tile = textures.tile(id);
                let (tw, th) = tile.dims();
                let ox = rng.gen_range(0..tw);
                let oy = rng.gen_range(0..th);
                for y in 0..n {
                    for x in 0..n {
                        let t = tile.get((x + ox) % tw, (y + oy) % th, 0);
                        let k = 1.0 - opacity + opacity * t;
                        for c in 0..3 {
                            rgb.set(x, y, c, rgb.get(x, y, c) * k);
                        }
                    }
                }
            }
        }
    }
    let mut out = patch_from_layers(&rgb, alpha, &patch.text);
    out.rect = patch.rect;
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecPolicy {
    pub size_range: [u32; 2],
    /// Minimum |luma − 0.5| of the fill color.
    pub min_contrast: f64,
    pub effect_prob: f64,
}

impl Default for SpecPolicy {
    fn default() -> Self {
        Self {
            size_range: [24, 96],
            min_contrast: 0.3,
            effect_prob: 0.25,
        }
    }
}

fn fill_luma(c: [u8; 3]) -> f64 {
    (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0
}

/// Draws a word, a font, a fill color and an effect set.
pub fn sample_spec(lexicon: &Lexicon, fonts: &FontStore, policy: &SpecPolicy, rng: &mut Rng) -> Result<RenderSpec, RenderError> {
    if lexicon.words.is_empty() {
        return Err(RenderError::Config("lexicon is empty".into()));
    }
    if fonts.is_empty() {
        return Err(RenderError::Config("no fonts registered".into()));
    }
    if !(policy.min_contrast >= 0.0 && policy.min_contrast <= 0.5) {
        return Err(RenderError::Config("min_contrast must lie in [0, 0.5]".into()));
    }
    let [lo, hi] = policy.size_range;
    if lo < MIN_SIZE_PX || hi < lo {
        return Err(RenderError::Config("invalid size_range".into()));
    }
    let text = lexicon.words[rng.gen_range(0..lexicon.words.len())].clone();
    let font_id = fonts.fonts[rng.gen_range(0..fonts.len())].0.clone();
    let fill = loop {
        let c: [u8; 3] = [rng.gen(), rng.gen(), rng.gen()];
        if (fill_luma(c) - 0.5).abs() >= policy.min_contrast {
            break c;
        }
    };
    let size_px = rng.gen_range(lo..=hi);
    let mut effects = Vec::new();
    if rng.gen::<f64>() < policy.effect_prob {
        effects.push(Effect::Shadow {
            dx: rng.gen_range(1..=6),
            dy: rng.gen_range(1..=6),
            opacity: rng.gen_range(0.2..=0.6),
        });
    }
    if rng.gen::<f64>() < policy.effect_prob {
        effects.push(Effect::Emboss {
            depth: rng.gen_range(1.0..=2.0),
        });
    }
    if rng.gen::<f64>() < policy.effect_prob {
        effects.push(Effect::Texture {
            id: rng.gen(),
            opacity: rng.gen_range(0.1..=0.3),
        });
    }
    if rng.gen::<f64>() < policy.effect_prob {
        effects.push(Effect::Blur {
            sigma: rng.gen_range(0.3..=1.5),
        });
    }
    Ok(RenderSpec {
        text,
        font_id,
        fill,
        size_px,
        effects,
    })
}
