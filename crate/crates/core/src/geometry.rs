//! Projective transforms, bilinear grid sampling and alpha compositing.
//!
//! Transforms map patch coordinates forward into image coordinates; sampling
//! walks the output grid and pulls source values through the inverse.

use rayon::prelude::*;
use thiserror::Error;

use crate::raster::{Raster, ShapeError};
use crate::scalar::Scalar;
use crate::types::{Homography, QuadBox, TransformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate quad: three corners are collinear")]
    DegenerateQuad,
    #[error("singular transform: {0}")]
    SingularTransform(#[from] TransformError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("rect scale must exceed 1, got {0}")]
    InvalidScale(f64),
}

/// Maps the unit square `(0,0),(1,0),(1,1),(0,1)` onto `q`'s corners.
fn square_to_quad<T: Scalar>(q: &QuadBox) -> [[T; 3]; 3] {
    let p = q.points();
    let (x0, y0) = (p[0].x, p[0].y);
    let (x1, y1) = (p[1].x, p[1].y);
    let (x2, y2) = (p[2].x, p[2].y);
    let (x3, y3) = (p[3].x, p[3].y);
    let sx = x0 - x1 + x2 - x3;
    let sy = y0 - y1 + y2 - y3;
    let (g, h) = if sx == 0.0 && sy == 0.0 {
        (0.0, 0.0)
    } else {
        let (dx1, dx2) = (x1 - x2, x3 - x2);
        let (dy1, dy2) = (y1 - y2, y3 - y2);
        let den = dx1 * dy2 - dx2 * dy1;
        ((sx * dy2 - dx2 * sy) / den, (dx1 * sy - sx * dy1) / den)
    };
    let l = T::lit;
    [
        [l(x1 - x0 + g * x1), l(x3 - x0 + h * x3), l(x0)],
        [l(y1 - y0 + g * y1), l(y3 - y0 + h * y3), l(y0)],
        [l(g), l(h), T::one()],
    ]
}

/// Exact four-point homography taking `src`'s corners onto `dst`'s corners.
pub fn quad_to_homography<T: Scalar>(
    src: &QuadBox,
    dst: &QuadBox,
) -> Result<Homography<T>, GeometryError> {
    if src.has_collinear_corners() || dst.has_collinear_corners() {
        return Err(GeometryError::DegenerateQuad);
    }
    let to_src = Homography::new(square_to_quad::<f64>(src))?;
    let to_dst = Homography::new(square_to_quad::<f64>(dst))?;
    let h = to_dst.then_after(&to_src.inverse()?)?;
    Ok(h.cast())
}

/// `a_m · a_n`: apply `a_n` first, then `a_m`.
pub fn compose<T: Scalar>(
    a_m: &Homography<T>,
    a_n: &Homography<T>,
) -> Result<Homography<T>, GeometryError> {
    Ok(a_m.then_after(a_n)?)
}

/// Bilinear sample with zero padding outside the source.
#[inline]
fn bilinear<T: Scalar>(src: &Raster<T>, x: T, y: T, out: &mut [T]) {
    let (w, h) = (src.width() as i64, src.height() as i64);
    let x0f = x.floor();
    let y0f = y.floor();
    let ax = x - x0f;
    let ay = y - y0f;
    let (x0, y0) = (x0f.to_i64().unwrap_or(i64::MIN / 2), y0f.to_i64().unwrap_or(i64::MIN / 2));
    out.iter_mut().for_each(|v| *v = T::zero());
    if x0 < -1 || y0 < -1 || x0 >= w || y0 >= h {
        return;
    }
    let taps = [
        (x0, y0, (T::one() - ax) * (T::one() - ay)),
        (x0 + 1, y0, ax * (T::one() - ay)),
        (x0, y0 + 1, (T::one() - ax) * ay),
        (x0 + 1, y0 + 1, ax * ay),
    ];
    for (tx, ty, wt) in taps {
        if wt == T::zero() || tx < 0 || ty < 0 || tx >= w || ty >= h {
            continue;
        }
        let px = src.pixel(tx as usize, ty as usize);
        for (o, &v) in out.iter_mut().zip(px) {
            *o = *o + wt * v;
        }
    }
}

/// Warps `src` by `h` (source → output coordinates) into an
/// `out_w × out_h` raster. Each output pixel is the bilinear interpolation
/// of its four source neighbours at `h⁻¹(x, y)`; samples outside the source
/// read as zero in every channel.
pub fn warp_sample<T: Scalar>(
    src: &Raster<T>,
    h: &Homography<T>,
    out_w: usize,
    out_h: usize,
) -> Result<Raster<T>, GeometryError> {
    let inv = h.inverse()?;
    let ch = src.channels();
    let mut out = Raster::zeros(out_w, out_h, ch);
    if out_w == 0 || out_h == 0 || src.width() == 0 || src.height() == 0 {
        return Ok(out);
    }
    let (xr, yr) = output_window(src, h, out_w, out_h);
    let row_len = out_w * ch;
    out.data_mut()
        .par_chunks_mut(row_len)
        .enumerate()
        .filter(|(y, _)| yr.0 <= *y && *y <= yr.1)
        .for_each(|(y, row)| {
            for x in xr.0..=xr.1 {
                if let Some((sx, sy)) = inv.apply(T::from_usize(x).unwrap(), T::from_usize(y).unwrap()) {
                    bilinear(src, sx, sy, &mut row[x * ch..(x + 1) * ch]);
                }
            }
        });
    Ok(out)
}

// Output pixel window that can receive nonzero samples. When the source
// rectangle stays on one side of the line at infinity its image is the
// convex hull of its mapped corners; otherwise the whole output is scanned.
fn output_window<T: Scalar>(
    src: &Raster<T>,
    h: &Homography<T>,
    out_w: usize,
    out_h: usize,
) -> ((usize, usize), (usize, usize)) {
    let full = ((0, out_w - 1), (0, out_h - 1));
    let m = h.matrix();
    let (sw, sh) = (src.width() as f64, src.height() as f64);
    let corners = [(-1.0, -1.0), (sw, -1.0), (sw, sh), (-1.0, sh)];
    let mut pts = Vec::with_capacity(4);
    for (x, y) in corners {
        let w = m[2][0].as_f64() * x + m[2][1].as_f64() * y + m[2][2].as_f64();
        if w <= 1e-9 {
            return full;
        }
        match h.apply(T::lit(x), T::lit(y)) {
            Some((px, py)) => pts.push((px.as_f64(), py.as_f64())),
            None => return full,
        }
    }
    let x0 = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).floor() - 1.0;
    let x1 = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
    let y0 = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor() - 1.0;
    let y1 = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil() + 1.0;
    let clampx = |v: f64| v.clamp(0.0, (out_w - 1) as f64) as usize;
    let clampy = |v: f64| v.clamp(0.0, (out_h - 1) as f64) as usize;
    if x1 < 0.0 || y1 < 0.0 || x0 > (out_w - 1) as f64 || y0 > (out_h - 1) as f64 {
        // empty window: an inverted range skips every row
        return ((1, 0), (1, 0));
    }
    ((clampx(x0), clampx(x1)), (clampy(y0), clampy(y1)))
}

/// `text ∘ α + background ∘ (1 − α)`, per channel.
pub fn compose_over<T: Scalar>(
    text_rgb: &Raster<T>,
    alpha: &Raster<T>,
    background: &Raster<T>,
) -> Result<Raster<T>, GeometryError> {
    text_rgb.expect_dims(background, "text vs background")?;
    alpha.expect_dims(background, "alpha vs background")?;
    if alpha.channels() != 1 || text_rgb.channels() != background.channels() {
        return Err(ShapeError("channel count".into()).into());
    }
    let ch = background.channels();
    let mut out = background.clone();
    for (i, (o, &t)) in out.data_mut().iter_mut().zip(text_rgb.data()).enumerate() {
        let a = alpha.data()[i / ch];
        *o = t * a + *o * (T::one() - a);
    }
    Ok(out)
}

/// Axis-aligned square centered on the quad's centroid with side
/// `scale × max(extent_x, extent_y)`. The square may exceed image bounds.
pub fn make_rect(quad: &QuadBox, scale: f64) -> Result<QuadBox, GeometryError> {
    if !(scale > 1.0) {
        return Err(GeometryError::InvalidScale(scale));
    }
    if quad.has_collinear_corners() {
        return Err(GeometryError::DegenerateQuad);
    }
    let (x0, y0, x1, y1) = quad.bounds();
    let side = scale * (x1 - x0).max(y1 - y0);
    QuadBox::square(quad.centroid(), side).map_err(|_| GeometryError::DegenerateQuad)
}

/// Ground-truth fine transform: processed quad in `P_pt` onto the original
/// quad in `P_before`, both in patch coordinates.
pub fn gt_matrix(
    p_pt_quad: &QuadBox,
    p_before_quad: &QuadBox,
) -> Result<Homography<f64>, GeometryError> {
    quad_to_homography(p_pt_quad, p_before_quad)
}

/// Coarse placement transform `A_m`: a similarity taking the
/// `patch_size × patch_size` patch frame onto the square `rect`.
pub fn patch_to_rect(rect: &QuadBox, patch_size: usize) -> Result<Homography<f64>, GeometryError> {
    let (x0, y0, x1, _) = rect.bounds();
    let s = (x1 - x0) / patch_size as f64;
    Ok(Homography::similarity(s, x0, y0)?)
}

/// Corners of the axis-aligned box spanning the inclusive pixel bounds.
pub fn bounds_quad(b: (usize, usize, usize, usize)) -> QuadBox {
    let (x0, y0, x1, y1) = b;
    // single-pixel rows/columns get half-pixel padding so the quad has area
    let (fx0, fx1) = if x1 > x0 { (x0 as f64, x1 as f64) } else { (x0 as f64 - 0.5, x1 as f64 + 0.5) };
    let (fy0, fy1) = if y1 > y0 { (y0 as f64, y1 as f64) } else { (y0 as f64 - 0.5, y1 as f64 + 0.5) };
    QuadBox::axis_aligned(fx0, fy0, fx1, fy1).expect("non-empty bounds")
}

/// Maximum corner displacement between `h(src)` and `dst`.
pub fn corner_error(h: &Homography<f64>, src: &QuadBox, dst: &QuadBox) -> f64 {
    src.points()
        .iter()
        .zip(dst.points())
        .map(|(s, d)| {
            h.apply_point(*s)
                .map(|p| p.dist(*d))
                .unwrap_or(f64::INFINITY)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Point2;

    fn q(c: [f64; 8]) -> QuadBox {
        QuadBox::from_coords(c).unwrap()
    }

    #[test]
    fn identity_and_scale() {
        let a = q([0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let h: Homography<f64> = quad_to_homography(&a, &a).unwrap();
        assert!(h.max_abs_diff(&Homography::identity()) < 1e-12);
        let b = q([0.0, 0.0, 2.0, 0.0, 2.0, 2.0, 0.0, 2.0]);
        let h: Homography<f64> = quad_to_homography(&a, &b).unwrap();
        assert!(h.max_abs_diff(&Homography::scaling(2.0, 2.0).unwrap()) < 1e-12);
    }

    #[test]
    fn collinear_corners_rejected() {
        // a valid (non-zero-area) triangle-shaped quad with a straight corner
        let tri = q([0.0, 0.0, 2.0, 0.0, 4.0, 0.0, 2.0, 3.0]);
        let sq = q([0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        assert_eq!(
            quad_to_homography::<f64>(&tri, &sq),
            Err(GeometryError::DegenerateQuad)
        );
    }

    #[test]
    fn translations_compose_additively() {
        let t1 = Homography::translation(1.5, -2.0);
        let t2 = Homography::translation(0.5, 4.0);
        let c = compose(&t1, &t2).unwrap();
        assert!(c.max_abs_diff(&Homography::translation(2.0, 2.0)) < 1e-12);
        let i = compose(&Homography::identity(), &t1).unwrap();
        assert_eq!(i, t1);
    }

    #[test]
    fn identity_warp_is_exact() {
        let src = Raster::from_fn(7, 5, 2, |x, y, c| (x * 31 + y * 7 + c) as f32 * 0.013);
        let out = warp_sample(&src, &Homography::identity(), 7, 5).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn half_pixel_translation_interpolates() {
        let src = Raster::from_vec(2, 1, 1, vec![0.0f64, 1.0]).unwrap();
        let out = warp_sample(&src, &Homography::translation(0.5, 0.0), 2, 1).unwrap();
        assert_eq!(out.get(1, 0, 0), 0.5);
    }

    #[test]
    fn out_of_bounds_is_zero() {
        let src = Raster::new(4, 4, 3, 1.0f32);
        let out = warp_sample(&src, &Homography::translation(10.0, 0.0), 8, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_over_cases() {
        let text = Raster::new(3, 2, 3, 1.0f64);
        let bg = Raster::new(3, 2, 3, 0.0f64);
        let a0 = Raster::new(3, 2, 1, 0.0f64);
        let a1 = Raster::new(3, 2, 1, 1.0f64);
        let aq = Raster::new(3, 2, 1, 0.25f64);
        assert_eq!(compose_over(&text, &a0, &bg).unwrap(), bg);
        assert_eq!(compose_over(&text, &a1, &bg).unwrap(), text);
        assert!(compose_over(&text, &aq, &bg).unwrap().data().iter().all(|&v| v == 0.25));
        let wrong = Raster::new(2, 2, 1, 0.0f64);
        assert!(matches!(compose_over(&text, &wrong, &bg), Err(GeometryError::Shape(_))));
    }

    #[test]
    fn make_rect_cases() {
        let unit = QuadBox::axis_aligned(0.0, 0.0, 1.0, 1.0).unwrap();
        let r = make_rect(&unit, 2.0).unwrap();
        assert_eq!(r.bounds(), (-0.5, -0.5, 1.5, 1.5));
        let wide = QuadBox::axis_aligned(0.0, 0.0, 4.0, 1.0).unwrap();
        let r = make_rect(&wide, 1.5).unwrap();
        let (x0, _, x1, _) = r.bounds();
        assert_eq!(x1 - x0, 6.0);
        assert!(make_rect(&unit, 1.0).is_err());
    }

    #[test]
    fn patch_to_rect_maps_corners() {
        let rect = QuadBox::axis_aligned(10.0, 20.0, 138.0, 148.0).unwrap();
        let a_m = patch_to_rect(&rect, 256).unwrap();
        let p = a_m.apply_point(Point2::new(256.0, 256.0)).unwrap();
        assert_eq!((p.x, p.y), (138.0, 148.0));
    }
}
