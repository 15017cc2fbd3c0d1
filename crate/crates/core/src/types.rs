//! Domain types shared by every stage.
//!
//! Pixel coordinates: origin top-left, x rightward, y downward; integer
//! coordinates sit on pixel centers.

use std::fmt;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{BinaryMask, Raster};
use crate::scalar::Scalar;

/// Side of the square text patch.
pub const PATCH_SIZE: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point2) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2)).sqrt()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("quad has non-finite coordinates")]
    NonFinite,
    #[error("quad has zero area")]
    ZeroArea,
    #[error("quad edges self-intersect")]
    SelfIntersecting,
    #[error("quad has three collinear corners")]
    Collinear,
}

/// Four-corner text box, ordered clockwise (on screen) from the top-left
/// corner of the reading order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[Point2; 4]", into = "[Point2; 4]")]
pub struct QuadBox {
    pts: [Point2; 4],
}

impl TryFrom<[Point2; 4]> for QuadBox {
    type Error = QuadError;
    fn try_from(pts: [Point2; 4]) -> Result<Self, QuadError> {
        QuadBox::new(pts)
    }
}

impl From<QuadBox> for [Point2; 4] {
    fn from(q: QuadBox) -> Self {
        q.pts
    }
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn segments_cross(a: Point2, b: Point2, c: Point2, d: Point2) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

fn point_segment_dist(p: Point2, a: Point2, b: Point2) -> f64 {
    let (vx, vy) = (b.x - a.x, b.y - a.y);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * vx + (p.y - a.y) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    p.dist(Point2::new(a.x + t * vx, a.y + t * vy))
}

impl QuadBox {
    pub fn new(pts: [Point2; 4]) -> Result<Self, QuadError> {
        if pts.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(QuadError::NonFinite);
        }
        let q = Self { pts };
        if segments_cross(pts[0], pts[1], pts[2], pts[3])
            || segments_cross(pts[1], pts[2], pts[3], pts[0])
        {
            return Err(QuadError::SelfIntersecting);
        }
        let scale = q.extent().max(1e-12);
        if q.area() <= 1e-9 * scale * scale {
            return Err(QuadError::ZeroArea);
        }
        Ok(q)
    }

    pub fn from_coords(c: [f64; 8]) -> Result<Self, QuadError> {
        Self::new([
            Point2::new(c[0], c[1]),
            Point2::new(c[2], c[3]),
            Point2::new(c[4], c[5]),
            Point2::new(c[6], c[7]),
        ])
    }

    /// Axis-aligned box with corners `(x0, y0)` and `(x1, y1)`.
    pub fn axis_aligned(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, QuadError> {
        Self::new([
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ])
    }

    /// Axis-aligned square of the given side centered on `c`.
    pub fn square(c: Point2, side: f64) -> Result<Self, QuadError> {
        let h = side / 2.0;
        Self::axis_aligned(c.x - h, c.y - h, c.x + h, c.y + h)
    }

    pub fn points(&self) -> &[Point2; 4] {
        &self.pts
    }

    pub fn coords(&self) -> [f64; 8] {
        let p = &self.pts;
        [
            p[0].x, p[0].y, p[1].x, p[1].y, p[2].x, p[2].y, p[3].x, p[3].y,
        ]
    }

    pub fn signed_area(&self) -> f64 {
        let p = &self.pts;
        0.5 * (0..4)
            .map(|i| {
                let j = (i + 1) % 4;
                p[i].x * p[j].y - p[j].x * p[i].y
            })
            .sum::<f64>()
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Mean of the four corners.
    pub fn centroid(&self) -> Point2 {
        let p = &self.pts;
        Point2::new(
            (p[0].x + p[1].x + p[2].x + p[3].x) / 4.0,
            (p[0].y + p[1].y + p[2].y + p[3].y) / 4.0,
        )
    }

    /// Mean length of the top and bottom edges.
    pub fn width(&self) -> f64 {
        let p = &self.pts;
        (p[0].dist(p[1]) + p[3].dist(p[2])) / 2.0
    }

    /// Mean length of the left and right edges.
    pub fn height(&self) -> f64 {
        let p = &self.pts;
        (p[0].dist(p[3]) + p[1].dist(p[2])) / 2.0
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.pts.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }

    fn extent(&self) -> f64 {
        let (x0, y0, x1, y1) = self.bounds();
        (x1 - x0).max(y1 - y0)
    }

    pub fn is_convex(&self) -> bool {
        let p = &self.pts;
        let signs: Vec<f64> = (0..4)
            .map(|i| cross(p[i], p[(i + 1) % 4], p[(i + 2) % 4]))
            .collect();
        signs.iter().all(|&s| s >= 0.0) || signs.iter().all(|&s| s <= 0.0)
    }

    /// True when three consecutive corners are (nearly) collinear.
    pub fn has_collinear_corners(&self) -> bool {
        let p = &self.pts;
        let scale = self.extent().max(1e-12);
        (0..4).any(|i| cross(p[i], p[(i + 1) % 4], p[(i + 2) % 4]).abs() <= 1e-9 * scale * scale)
    }

    /// Closed point-in-polygon test (boundary counts as inside).
    pub fn contains(&self, q: Point2) -> bool {
        let p = &self.pts;
        let mut inside = false;
        for i in 0..4 {
            let (a, b) = (p[i], p[(i + 1) % 4]);
            if point_segment_dist(q, a, b) <= 1e-9 {
                return true;
            }
            if (a.y > q.y) != (b.y > q.y) {
                let xi = a.x + (q.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if q.x < xi {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Euclidean distance from `q` to the quad; zero inside.
    pub fn distance_to(&self, q: Point2) -> f64 {
        if self.contains(q) {
            return 0.0;
        }
        (0..4)
            .map(|i| point_segment_dist(q, self.pts[i], self.pts[(i + 1) % 4]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Pixels whose centers lie inside the closed quad.
    pub fn interior_mask(&self, width: usize, height: usize) -> BinaryMask {
        let mut m = BinaryMask::new(width, height);
        let (x0, y0, x1, y1) = self.bounds();
        let xs = x0.ceil().max(0.0) as i64;
        let ys = y0.ceil().max(0.0) as i64;
        let xe = (x1.floor() as i64).min(width as i64 - 1);
        let ye = (y1.floor() as i64).min(height as i64 - 1);
        for y in ys..=ye {
            for x in xs..=xe {
                if self.contains(Point2::new(x as f64, y as f64)) {
                    m.set(x as usize, y as usize, true);
                }
            }
        }
        m
    }

    /// True when every corner lies in `[0, w-1] × [0, h-1]`.
    pub fn within(&self, width: usize, height: usize) -> bool {
        let (x0, y0, x1, y1) = self.bounds();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= (width - 1) as f64 && y1 <= (height - 1) as f64
    }

    /// Maps every corner through `h`.
    pub fn transform<T: Scalar>(&self, h: &Homography<T>) -> Result<QuadBox, QuadError> {
        let mut pts = [Point2::default(); 4];
        for (o, p) in pts.iter_mut().zip(&self.pts) {
            *o = h.apply_point(*p).ok_or(QuadError::NonFinite)?;
        }
        QuadBox::new(pts)
    }

    fn ccw_points(&self) -> [Point2; 4] {
        let mut p = self.pts;
        if self.signed_area() < 0.0 {
            p.reverse();
        }
        p
    }

    /// Area of intersection with another quad. Exact for convex quads
    /// (Sutherland–Hodgman clipping); non-convex operands are handled by
    /// convex decomposition into two triangles.
    pub fn intersection_area(&self, other: &QuadBox) -> f64 {
        let a = self.convex_parts();
        let b = other.convex_parts();
        let mut total = 0.0;
        for pa in &a {
            for pb in &b {
                total += polygon_area(&clip_convex(pa, pb)).abs();
            }
        }
        total
    }

    pub fn iou(&self, other: &QuadBox) -> f64 {
        let inter = self.intersection_area(other);
        let uni = self.area() + other.area() - inter;
        if uni <= 0.0 {
            0.0
        } else {
            inter / uni
        }
    }

    fn convex_parts(&self) -> Vec<Vec<Point2>> {
        let p = self.ccw_points();
        if self.is_convex() {
            return vec![p.to_vec()];
        }
        // split along the diagonal through the reflex vertex
        let reflex = (0..4)
            .find(|&i| cross(p[(i + 3) % 4], p[i], p[(i + 1) % 4]) < 0.0)
            .unwrap_or(0);
        let o = (reflex + 2) % 4;
        vec![
            vec![p[reflex], p[(reflex + 1) % 4], p[o]],
            vec![p[o], p[(o + 1) % 4], p[reflex]],
        ]
    }
}

fn polygon_area(p: &[Point2]) -> f64 {
    if p.len() < 3 {
        return 0.0;
    }
    0.5 * (0..p.len())
        .map(|i| {
            let j = (i + 1) % p.len();
            p[i].x * p[j].y - p[j].x * p[i].y
        })
        .sum::<f64>()
}

// Clip `subject` by convex CCW `clip`.
fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cin = cross(a, b, cur) >= 0.0;
            let pin = cross(a, b, prev) >= 0.0;
            if cin {
                if !pin {
                    out.push(line_intersect(prev, cur, a, b));
                }
                out.push(cur);
            } else if pin {
                out.push(line_intersect(prev, cur, a, b));
            }
        }
    }
    out
}

fn line_intersect(p: Point2, q: Point2, a: Point2, b: Point2) -> Point2 {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    Point2::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("transform is singular (|det| = {0:e})")]
    Singular(f64),
    #[error("transform cannot be normalized (m[2][2] = 0)")]
    Unnormalizable,
}

/// 3×3 projective transform, normalized so that `m[2][2] = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography<T> {
    m: [[T; 3]; 3],
}

impl<T: Scalar> Homography<T> {
    pub fn new(m: [[T; 3]; 3]) -> Result<Self, TransformError> {
        let s = m[2][2];
        if s.abs() <= T::lit(1e-300) || !s.is_finite() {
            return Err(TransformError::Unnormalizable);
        }
        let mut n = m;
        for row in n.iter_mut() {
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let h = Self { m: n };
        let det = h.det().as_f64();
        if !det.is_finite() || det.abs() <= 1e-9 {
            return Err(TransformError::Singular(det));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self {
            m: [[o, z, tx], [z, o, ty], [z, z, o]],
        }
    }

    /// `x' = s·x + tx`, `y' = s·y + ty`.
    pub fn similarity(s: T, tx: T, ty: T) -> Result<Self, TransformError> {
        let (o, z) = (T::one(), T::zero());
        Self::new([[s, z, tx], [z, s, ty], [z, z, o]])
    }

    pub fn scaling(sx: T, sy: T) -> Result<Self, TransformError> {
        let (o, z) = (T::one(), T::zero());
        Self::new([[sx, z, z], [z, sy, z], [z, z, o]])
    }

    pub fn matrix(&self) -> [[T; 3]; 3] {
        self.m
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self, TransformError> {
        let m = &self.m;
        let det = self.det();
        if det.as_f64().abs() <= 1e-300 {
            return Err(TransformError::Singular(det.as_f64()));
        }
        let c = |a: usize, b: usize, c: usize, d: usize| m[a][b] * m[c][d] - m[a][d] * m[c][b];
        let adj = [
            [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
            [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
            [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
        ];
        let mut inv = adj;
        for row in inv.iter_mut() {
            for v in row.iter_mut() {
                *v = *v / det;
            }
        }
        Self::new(inv)
    }

    /// Matrix product `self · other` (apply `other` first).
    pub fn then_after(&self, other: &Self) -> Result<Self, TransformError> {
        let mut p = [[T::zero(); 3]; 3];
        for (i, row) in p.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).fold(T::zero(), |acc, k| acc + self.m[i][k] * other.m[k][j]);
            }
        }
        Self::new(p)
    }

    /// Maps `(x, y)`; `None` when the point goes to infinity.
    #[inline]
    pub fn apply(&self, x: T, y: T) -> Option<(T, T)> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() <= T::epsilon() {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    pub fn apply_point(&self, p: Point2) -> Option<Point2> {
        let (x, y) = self.apply(T::lit(p.x), T::lit(p.y))?;
        Some(Point2::new(x.as_f64(), y.as_f64()))
    }

    /// The eight free parameters, row-major, `m[2][2]` excluded.
    pub fn params8(&self) -> [T; 8] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1],
        ]
    }

    pub fn cast<U: Scalar>(&self) -> Homography<U> {
        let mut m = [[U::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = U::lit(self.m[i][j].as_f64());
            }
        }
        Homography { m }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((self.m[i][j] - other.m[i][j]).abs().as_f64());
            }
        }
        d
    }
}

/// Binary ink mask of one text instance at parent image dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrokeMask {
    pub mask: BinaryMask,
    pub instance_id: u32,
}

/// Five-channel text patch: RGB, coverage alpha, and bbox mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPatch {
    pub rgb: RgbImage,
    pub alpha: Raster<f32>,
    pub bbox_mask: BinaryMask,
    pub text: String,
    /// Reference square in background coordinates, once assigned.
    pub rect: Option<QuadBox>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PatchError {
    #[error("patch must be {PATCH_SIZE}x{PATCH_SIZE}, got {0}x{1}")]
    Size(usize, usize),
    #[error("{0} alpha pixels lie outside the bbox mask")]
    AlphaOutsideBbox(usize),
}

impl TextPatch {
    pub fn check(&self) -> Result<(), PatchError> {
        let (w, h) = (self.rgb.width() as usize, self.rgb.height() as usize);
        for (pw, ph) in [(w, h), self.alpha.dims(), self.bbox_mask.dims()] {
            if pw != PATCH_SIZE || ph != PATCH_SIZE {
                return Err(PatchError::Size(pw, ph));
            }
        }
        let outside = self
            .alpha
            .data()
            .iter()
            .zip(self.bbox_mask.data())
            .filter(|(&a, &b)| a > 0.0 && !b)
            .count();
        if outside > 0 {
            return Err(PatchError::AlphaOutsideBbox(outside));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneInstance {
    pub quad: QuadBox,
    pub mask: StrokeMask,
    pub valid: bool,
    pub text: Option<String>,
}

/// One decomposed scene: original, text-erased background and instances.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub original: RgbImage,
    pub erased: RgbImage,
    pub instances: Vec<SceneInstance>,
}

impl SceneRecord {
    pub fn valid_instances(&self) -> impl Iterator<Item = (usize, &SceneInstance)> {
        self.instances.iter().enumerate().filter(|(_, i)| i.valid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthInstance {
    pub quad: QuadBox,
    pub mask: StrokeMask,
    pub text: String,
    /// Reference square the instance was placed into.
    pub rect: QuadBox,
    /// Patch-to-image transform used for placement.
    pub transform: Homography<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthStatus {
    Ok,
    /// No instance survived placement and filtering.
    Empty,
}

/// One generated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthRecord {
    /// Background identifier.
    pub provenance: String,
    pub image: RgbImage,
    pub instances: Vec<SynthInstance>,
    pub seed: u64,
    pub status: SynthStatus,
}

/// A broken invariant found by [`validate_scene_record`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DimensionMismatch {
        field: &'static str,
        expected: (u32, u32),
        found: (u32, u32),
    },
    EmptyMask {
        instance: usize,
    },
    MaskOutsideQuad {
        instance: usize,
        pixels: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DimensionMismatch {
                field,
                expected,
                found,
            } => write!(
                f,
                "dimension mismatch in {field}: expected {}x{}, found {}x{}",
                expected.0, expected.1, found.0, found.1
            ),
            Violation::EmptyMask { instance } => {
                write!(f, "empty mask on valid instance {instance}")
            }
            Violation::MaskOutsideQuad { instance, pixels } => write!(
                f,
                "instance {instance}: {pixels} mask pixels farther than 3 px from the quad"
            ),
        }
    }
}

/// Maximum distance of a stroke pixel from its quad.
pub const MASK_QUAD_TOLERANCE_PX: f64 = 3.0;

/// Lists every broken record invariant; empty when the record is well formed.
pub fn validate_scene_record(rec: &SceneRecord) -> Vec<Violation> {
    let mut out = Vec::new();
    let dims = rec.original.dimensions();
    if rec.erased.dimensions() != dims {
        out.push(Violation::DimensionMismatch {
            field: "erased",
            expected: dims,
            found: rec.erased.dimensions(),
        });
    }
    for (k, inst) in rec.instances.iter().enumerate() {
        let md = inst.mask.mask.dims();
        let md = (md.0 as u32, md.1 as u32);
        if md != dims {
            out.push(Violation::DimensionMismatch {
                field: "instance mask",
                expected: dims,
                found: md,
            });
            continue;
        }
        if inst.valid && inst.mask.mask.is_empty() {
            out.push(Violation::EmptyMask { instance: k });
        }
        let outside = inst
            .mask
            .mask
            .iter_set()
            .filter(|&(x, y)| {
                inst.quad.distance_to(Point2::new(x as f64, y as f64)) > MASK_QUAD_TOLERANCE_PX
            })
            .count();
        if outside > 0 {
            out.push(Violation::MaskOutsideQuad {
                instance: k,
                pixels: outside,
            });
        }
    }
    out
}
