//! Dense pixel containers.
//!
//! [`Raster`] is an interleaved multi-channel map used for float images,
//! alpha channels and heatmaps. [`BinaryMask`] holds set membership for
//! stroke masks, bbox masks and segmentation results. External 8-bit RGB
//! images use [`image::RgbImage`] and are converted at module boundaries.

use image::{Rgb, RgbImage};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("shape mismatch: {0}")]
pub struct ShapeError(pub String);

/// Interleaved `width × height × channels` map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(width: usize, height: usize, channels: usize, fill: T) -> Self {
        assert!(channels > 0, "raster needs at least one channel");
        Self {
            width,
            height,
            channels,
            data: vec![fill; width * height * channels],
        }
    }

    pub fn from_vec(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<T>,
    ) -> Result<Self, ShapeError> {
        if channels == 0 || data.len() != width * height * channels {
            return Err(ShapeError(format!(
                "buffer of {} values for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [T] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn expect_dims<U>(&self, other: &Raster<U>, what: &str) -> Result<(), ShapeError> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(ShapeError(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    /// Copies channel `c` into a single-channel raster.
    pub fn channel(&self, c: usize) -> Raster<T> {
        assert!(c < self.channels);
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .data
                .iter()
                .skip(c)
                .step_by(self.channels)
                .copied()
                .collect(),
        }
    }

    /// Copies the rectangle `[x0, x0+w) × [y0, y0+h)`, which must lie inside.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster<T> {
        assert!(x0 + w <= self.width && y0 + h <= self.height);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Raster {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }
}

impl<T: Scalar> Raster<T> {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::new(width, height, channels, T::zero())
    }

    /// Largest finite value, if any.
    pub fn max_finite(&self) -> Option<T> {
        self.data
            .iter()
            .copied()
            .filter(|v| v.is_finite())
            .fold(None, |acc, v| Some(acc.map_or(v, |a: T| a.max(v))))
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &v| a + v)
    }

    /// Support of a single-channel map: pixels whose value is `> 0`.
    pub fn support(&self) -> BinaryMask {
        assert_eq!(self.channels, 1, "support of a single-channel map");
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v > T::zero()).collect(),
        }
    }

    /// Pixels whose single-channel value is strictly greater than `t`.
    pub fn above(&self, t: T) -> BinaryMask {
        assert_eq!(self.channels, 1);
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v > t).collect(),
        }
    }
}

/// Binary pixel set with image dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self, ShapeError> {
        if data.len() != width * height {
            return Err(ShapeError(format!(
                "mask buffer of {} for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Like [`get`](Self::get) but `false` outside the canvas.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.data[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % w, i / w))
    }

    /// Inclusive bounds `(x0, y0, x1, y1)` of the set pixels.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.iter_set();
        let (fx, fy) = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (fx, fy, fx, fy);
        for (x, y) in it {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        Some((x0, y0, x1, y1))
    }

    pub fn union(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a || b)
                .collect(),
        }
    }

    pub fn intersection(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        }
    }

    /// `self \ other`.
    pub fn difference(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims());
        BinaryMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && !b)
                .collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Intersection over union; 1 when both masks are empty.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let (mut inter, mut uni) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            uni += (a || b) as usize;
        }
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }

    /// Dilation by a `(2r+1)²` square, clipped to the canvas.
    pub fn dilate(&self, r: usize) -> BinaryMask {
        if r == 0 {
            return self.clone();
        }
        let horiz = self.sweep(r, true, false);
        horiz.sweep(r, false, false)
    }

    /// Erosion by a `(2r+1)²` square; pixels outside the canvas count as set
    /// so that closing (`dilate` then `erode`) never shrinks the input.
    pub fn erode(&self, r: usize) -> BinaryMask {
        if r == 0 {
            return self.clone();
        }
        let horiz = self.sweep(r, true, true);
        horiz.sweep(r, false, true)
    }

    pub fn close(&self, r: usize) -> BinaryMask {
        self.dilate(r).erode(r)
    }

    // 1-D max (dilate) or min (erode) filter along one axis using running counts.
    fn sweep(&self, r: usize, horizontal: bool, erode: bool) -> BinaryMask {
        let (w, h) = (self.width, self.height);
        let (len, lines) = if horizontal { (w, h) } else { (h, w) };
        let mut out = vec![false; w * h];
        let idx = |line: usize, k: usize| {
            if horizontal {
                line * w + k
            } else {
                k * w + line
            }
        };
        for line in 0..lines {
            // prefix count of set pixels along the line
            let mut prefix = vec![0usize; len + 1];
            for k in 0..len {
                prefix[k + 1] = prefix[k] + self.data[idx(line, k)] as usize;
            }
            for k in 0..len {
                let lo = k.saturating_sub(r);
                let hi = (k + r).min(len - 1);
                let set = prefix[hi + 1] - prefix[lo];
                out[idx(line, k)] = if erode {
                    set == hi + 1 - lo
                } else {
                    set > 0
                };
            }
        }
        BinaryMask {
            width: w,
            height: h,
            data: out,
        }
    }

    pub fn to_raster<T: Scalar>(&self) -> Raster<T> {
        Raster {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self
                .data
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        }
    }
}

/// 8-bit RGB to float RGB in `[0, 1]`.
pub fn rgb_to_raster<T: Scalar>(img: &RgbImage) -> Raster<T> {
    let (w, h) = img.dimensions();
    let inv = T::lit(1.0 / 255.0);
    Raster {
        width: w as usize,
        height: h as usize,
        channels: 3,
        data: img
            .as_raw()
            .iter()
            .map(|&v| T::from_u8(v).unwrap() * inv)
            .collect(),
    }
}

/// Float RGB in `[0, 1]` to 8-bit RGB, clamped and rounded.
pub fn raster_to_rgb<T: Scalar>(r: &Raster<T>) -> RgbImage {
    assert_eq!(r.channels(), 3, "expected three channels");
    let buf: Vec<u8> = r.data().iter().map(|&v| unit_to_u8(v.as_f64())).collect();
    RgbImage::from_raw(r.width() as u32, r.height() as u32, buf).expect("buffer size")
}

#[inline]
pub fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// ITU-R BT.601 luma of an 8-bit RGB image, in `[0, 1]`.
pub fn luma(img: &RgbImage) -> Raster<f32> {
    let (w, h) = img.dimensions();
    let data = img
        .pixels()
        .map(|Rgb([r, g, b])| {
            ((0.299 * *r as f64 + 0.587 * *g as f64 + 0.114 * *b as f64) / 255.0) as f32
        })
        .collect();
    Raster {
        width: w as usize,
        height: h as usize,
        channels: 1,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_dilate(m: &BinaryMask, r: i64) -> BinaryMask {
        BinaryMask::from_fn(m.width(), m.height(), |x, y| {
            (-r..=r).any(|dy| (-r..=r).any(|dx| m.get_signed(x as i64 + dx, y as i64 + dy)))
        })
    }

    #[test]
    fn dilate_matches_brute_force() {
        let m = BinaryMask::from_fn(13, 9, |x, y| (x * 7 + y * 3) % 11 == 0);
        for r in 0..4 {
            assert_eq!(m.dilate(r), brute_dilate(&m, r as i64), "r={r}");
        }
    }

    #[test]
    fn closing_is_extensive() {
        let m = BinaryMask::from_fn(20, 20, |x, y| (x + y) % 5 == 0 || x < 2);
        for r in 1..4 {
            assert!(m.is_subset_of(&m.close(r)));
        }
    }

    #[test]
    fn rgb_round_trip() {
        let img = RgbImage::from_fn(4, 3, |x, y| Rgb([x as u8 * 60, y as u8 * 80, 255]));
        assert_eq!(raster_to_rgb(&rgb_to_raster::<f32>(&img)), img);
    }

    #[test]
    fn crop_and_channel() {
        let r = Raster::from_fn(5, 4, 2, |x, y, c| (x + 10 * y + 100 * c) as f32);
        let c = r.crop(1, 2, 3, 2);
        assert_eq!(c.get(0, 0, 1), 121.0);
        assert_eq!(r.channel(1).get(4, 3, 0), 134.0);
    }
}
