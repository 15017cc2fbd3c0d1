//! Region-aware adaptive instance normalization and the model-free text
//! color harmonizer built on it.

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::gaussian_kernel;
use crate::raster::{rgb_to_raster, unit_to_u8, Raster, ShapeError};
use crate::scalar::Scalar;

pub const RAIN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarmonizeError {
    #[error("mask selects no pixel ({0})")]
    EmptyRegion(&'static str),
    #[error("invalid harmonize params: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Channel-wise masked mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionStats<T> {
    pub mean: Vec<T>,
    /// `sqrt(variance + eps)`.
    pub std: Vec<T>,
    pub eps: T,
}

/// Weighted channel moments of `features` under a real-valued `mask`.
///
/// The variance is the mask-weighted mean squared deviation, so a constant
/// map has `std = sqrt(eps)` whatever the mask.
pub fn masked_stats<T: Scalar>(features: &Raster<T>, mask: &Raster<T>) -> Result<RegionStats<T>, HarmonizeError> {
    if mask.channels() != 1 || !features.same_dims(mask) {
        return Err(ShapeError(format!(
            "features {:?}x{} vs mask {:?}x{}",
            features.dims(),
            features.channels(),
            mask.dims(),
            mask.channels()
        ))
        .into());
    }
    let c = features.channels();
    let m = mask.data();
    let total: f64 = m.iter().map(|v| v.as_f64()).sum();
    if !(total > 0.0) {
        return Err(HarmonizeError::EmptyRegion("mask sum is zero"));
    }
    let f = features.data();
    let mut mean = vec![0.0f64; c];
    for (px, &w) in f.chunks_exact(c).zip(m) {
        let w = w.as_f64();
        for k in 0..c {
            mean[k] += w * px[k].as_f64();
        }
    }
    mean.iter_mut().for_each(|v| *v /= total);
    let mut var = vec![0.0f64; c];
    for (px, &w) in f.chunks_exact(c).zip(m) {
        let w = w.as_f64();
        for k in 0..c {
            let d = px[k].as_f64() - mean[k];
            var[k] += w * d * d;
        }
    }
    Ok(RegionStats {
        mean: mean.into_iter().map(T::lit).collect(),
        std: var.into_iter().map(|v| T::lit((v / total + RAIN_EPS).sqrt())).collect(),
        eps: T::lit(RAIN_EPS),
    })
}

/// Re-styles foreground features with background statistics:
/// `σ_bg · (F − μ_fg) / σ_fg + μ_bg`, evaluated at every pixel.
pub fn rain<T: Scalar>(features: &Raster<T>, fg_mask: &Raster<T>) -> Result<Raster<T>, HarmonizeError> {
    let fg = masked_stats(features, fg_mask).map_err(|e| match e {
        HarmonizeError::EmptyRegion(_) => HarmonizeError::EmptyRegion("empty foreground"),
        e => e,
    })?;
    let bg_mask = fg_mask.map(|v| T::one() - v);
    let bg = masked_stats(features, &bg_mask).map_err(|e| match e {
        HarmonizeError::EmptyRegion(_) => HarmonizeError::EmptyRegion("empty background"),
        e => e,
    })?;
    Ok(apply_rain(features, &fg, &bg))
}

fn apply_rain<T: Scalar>(features: &Raster<T>, fg: &RegionStats<T>, bg: &RegionStats<T>) -> Raster<T> {
    let c = features.channels();
    let mut out = features.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = bg.std[k] * (px[k] - fg.mean[k]) / fg.std[k] + bg.mean[k];
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonizeParams {
    /// Pyramid levels; 1 applies RAIN to the raw window.
    pub levels: usize,
    /// Blend strength α_harm in `[0, 1]`.
    pub alpha: f64,
    /// Local window size relative to the text extent.
    pub window_scale: f64,
}

impl Default for HarmonizeParams {
    fn default() -> Self {
        Self {
            levels: 3,
            alpha: 0.8,
            window_scale: 2.0,
        }
    }
}

impl HarmonizeParams {
    pub fn validate(&self) -> Result<(), HarmonizeError> {
        if self.levels == 0 {
            return Err(HarmonizeError::InvalidParams("levels must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(HarmonizeError::InvalidParams("alpha must lie in [0, 1]".into()));
        }
        if !(self.window_scale >= 1.0) {
            return Err(HarmonizeError::InvalidParams("window_scale must be at least 1".into()));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with replicated borders.
fn blur_clamped(src: &Raster<f64>, sigma: f64) -> Raster<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h, c) = (src.width(), src.height(), src.channels());
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let tmp = Raster::<f64>::from_fn(w, h, c, |x, y, ch| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * src.get(clamp(x as i64 + i as i64 - r, w), y, ch))
            .sum()
    });
    Raster::<f64>::from_fn(w, h, c, |x, y, ch| {
        k.iter()
            .enumerate()
            .map(|(i, kv)| kv * tmp.get(x, clamp(y as i64 + i as i64 - r, h), ch))
            .sum()
    })
}

/// Band-pass decomposition: `levels − 1` detail bands plus a low-pass
/// residual. The bands sum back to the input exactly.
fn decompose(window: &Raster<f64>, levels: usize) -> Vec<Raster<f64>> {
    let mut bands = Vec::with_capacity(levels);
    let mut current = window.clone();
    for k in 1..levels {
        let low = blur_clamped(&current, (1u64 << (k - 1)) as f64);
        let detail = Raster::from_vec(
            current.width(),
            current.height(),
            current.channels(),
            current.data().iter().zip(low.data()).map(|(a, b)| a - b).collect(),
        )
        .expect("same dims");
        bands.push(detail);
        current = low;
    }
    bands.push(current);
    bands
}

/// Local window around the mask support: the support's bounding box scaled
/// by `scale` about its center and clipped to the image.
pub fn harmonize_window(mask: &Raster<f32>, scale: f64) -> Option<(usize, usize, usize, usize)> {
    let (x0, y0, x1, y1) = mask.support().bounds()?;
    let (w, h) = mask.dims();
    let cx = (x0 + x1) as f64 / 2.0;
    let cy = (y0 + y1) as f64 / 2.0;
    let hw = (x1 - x0 + 1) as f64 * scale / 2.0;
    let hh = (y1 - y0 + 1) as f64 * scale / 2.0;
    let wx0 = (cx - hw).floor().max(0.0) as usize;
    let wy0 = (cy - hh).floor().max(0.0) as usize;
    let wx1 = ((cx + hw).ceil() as usize).min(w - 1);
    let wy1 = ((cy + hh).ceil() as usize).min(h - 1);
    Some((wx0, wy0, wx1 - wx0 + 1, wy1 - wy0 + 1))
}

/// Pulls text colors toward the local background's statistics.
///
/// Within a window around the text, each pyramid band is re-styled by
/// [`rain`] against the window's background, the bands are summed, and the
/// result is blended into `comp` with weight `alpha · text_mask`, so only
/// pixels with `text_mask > 0` change. Every other pixel is returned untouched.
pub fn harmonize_text(
    comp: &RgbImage,
    text_mask: &Raster<f32>,
    params: &HarmonizeParams,
) -> Result<RgbImage, HarmonizeError> {
    params.validate()?;
    let (w, h) = (comp.width() as usize, comp.height() as usize);
    if text_mask.dims() != (w, h) || text_mask.channels() != 1 {
        return Err(ShapeError(format!("mask {:?} vs image {:?}", text_mask.dims(), (w, h))).into());
    }
    let (wx, wy, ww, wh) =
        harmonize_window(text_mask, params.window_scale).ok_or(HarmonizeError::EmptyRegion("empty text mask"))?;
    let mut out = comp.clone();
    if params.alpha == 0.0 {
        return Ok(out);
    }
    let window = rgb_to_raster::<f64>(comp).crop(wx, wy, ww, wh);
    let m = text_mask.crop(wx, wy, ww, wh).map(|v| v as f64);
    let mut restyled = Raster::<f64>::zeros(ww, wh, 3);
    for band in decompose(&window, params.levels) {
        let r = rain(&band, &m)?;
        for (o, v) in restyled.data_mut().iter_mut().zip(r.data()) {
            *o += v;
        }
    }
    let a = params.alpha;
    for y in 0..wh {
        for x in 0..ww {
            let mv = m.get(x, y, 0);
            if mv <= 0.0 {
                continue;
            }
            let t = a * mv.min(1.0);
            let src = window.pixel(x, y);
            let dst = restyled.pixel(x, y);
            let px = out.get_pixel_mut((wx + x) as u32, (wy + y) as u32);
            for k in 0..3 {
                px.0[k] = unit_to_u8(src[k] + t * (dst[k] - src[k]));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    #[test]
    fn constant_map_has_eps_std() {
        let f = Raster::<f64>::new(4, 3, 2, 0.3);
        let m = Raster::<f64>::from_fn(4, 3, 1, |x, _, _| if x < 2 { 1.0 } else { 0.0 });
        let s = masked_stats(&f, &m).unwrap();
        assert!((s.mean[0] - 0.3).abs() < 1e-12);
        assert!((s.std[1] - RAIN_EPS.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_point_variance() {
        let f = Raster::<f64>::from_vec(2, 1, 1, vec![0.0, 2.0]).unwrap();
        let m = Raster::<f64>::new(2, 1, 1, 1.0);
        let s = masked_stats(&f, &m).unwrap();
        assert_eq!(s.mean[0], 1.0);
        assert!((s.std[0] - (1.0 + RAIN_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_regions_rejected() {
        let f = Raster::<f32>::new(3, 3, 1, 0.5);
        let zero = Raster::<f32>::zeros(3, 3, 1);
        let one = Raster::<f32>::new(3, 3, 1, 1.0);
        assert!(matches!(masked_stats(&f, &zero), Err(HarmonizeError::EmptyRegion(_))));
        assert!(matches!(rain(&f, &zero), Err(HarmonizeError::EmptyRegion(_))));
        assert!(matches!(rain(&f, &one), Err(HarmonizeError::EmptyRegion(_))));
    }

    #[test]
    fn uniform_foreground_maps_to_background_mean() {
        let f = Raster::<f64>::from_fn(6, 6, 1, |x, y, _| if x < 3 { 0.9 } else { (x * 7 + y * 3) as f64 / 60.0 });
        let m = Raster::<f64>::from_fn(6, 6, 1, |x, _, _| if x < 3 { 1.0 } else { 0.0 });
        let bg = masked_stats(&f, &m.map(|v| 1.0 - v)).unwrap();
        let out = rain(&f, &m).unwrap();
        for y in 0..6 {
            for x in 0..3 {
                assert!((out.get(x, y, 0) - bg.mean[0]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decomposition_sums_to_input() {
        let win = Raster::<f64>::from_fn(9, 7, 3, |x, y, c| ((x * 31 + y * 17 + c * 5) % 11) as f64 / 10.0);
        let bands = decompose(&win, 3);
        assert_eq!(bands.len(), 3);
        for (i, v) in win.data().iter().enumerate() {
            let s: f64 = bands.iter().map(|b| b.data()[i]).sum();
            assert!((s - v).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_zero_is_identity_and_background_untouched() {
        let comp = RgbImage::from_fn(20, 20, |x, y| Rgb([(x * 12) as u8, (y * 12) as u8, 100]));
        let mask = Raster::<f32>::from_fn(20, 20, 1, |x, y, _| {
            if (8..12).contains(&x) && (8..12).contains(&y) {
                1.0
            } else {
                0.0
            }
        });
        let p = HarmonizeParams {
            alpha: 0.0,
            ..Default::default()
        };
        assert_eq!(harmonize_text(&comp, &mask, &p).unwrap(), comp);
        let out = harmonize_text(&comp, &mask, &HarmonizeParams::default()).unwrap();
        for (x, y, px) in out.enumerate_pixels() {
            if mask.get(x as usize, y as usize, 0) == 0.0 {
                assert_eq!(px, comp.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn window_is_scaled_about_center_and_clipped() {
        let mask = Raster::<f32>::from_fn(30, 30, 1, |x, y, _| {
            if (10..14).contains(&x) && (12..14).contains(&y) {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(harmonize_window(&mask, 2.0), Some((7, 10, 10, 6)));
        let edge = Raster::<f32>::from_fn(10, 10, 1, |x, y, _| if x < 2 && y < 2 { 1.0 } else { 0.0 });
        assert_eq!(harmonize_window(&edge, 2.0).unwrap().0, 0);
    }
}
