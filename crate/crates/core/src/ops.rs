//! Low-level image operations shared across modules: Sobel gradients, box
//! and Gaussian filtering, connected components and hole filling.

use crate::raster::{BinaryMask, Raster};

/// Horizontal and vertical Sobel responses of a single-channel map, with
/// replicated borders.
pub fn sobel(gray: &Raster<f32>) -> (Raster<f32>, Raster<f32>) {
    assert_eq!(gray.channels(), 1);
    let (w, h) = gray.dims();
    let at = |x: i64, y: i64| {
        let xc = x.clamp(0, w as i64 - 1) as usize;
        let yc = y.clamp(0, h as i64 - 1) as usize;
        gray.get(xc, yc, 0)
    };
    let mut gx = Raster::zeros(w, h, 1);
    let mut gy = Raster::zeros(w, h, 1);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (a, b, c) = (at(x - 1, y - 1), at(x, y - 1), at(x + 1, y - 1));
            let (d, f) = (at(x - 1, y), at(x + 1, y));
            let (g, hh, i) = (at(x - 1, y + 1), at(x, y + 1), at(x + 1, y + 1));
            gx.set(x as usize, y as usize, 0, (c + 2.0 * f + i) - (a + 2.0 * d + g));
            gy.set(x as usize, y as usize, 0, (g + 2.0 * hh + i) - (a + 2.0 * b + c));
        }
    }
    (gx, gy)
}

/// Gradient magnitude of the Sobel responses.
pub fn sobel_magnitude(gray: &Raster<f32>) -> Raster<f32> {
    let (gx, gy) = sobel(gray);
    let data = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&a, &b)| (a * a + b * b).sqrt())
        .collect();
    Raster::from_vec(gray.width(), gray.height(), 1, data).unwrap()
}

/// Divides by the map maximum; an all-zero map stays zero.
pub fn normalize_by_max(map: &Raster<f32>) -> Raster<f32> {
    let m = map.data().iter().fold(0.0f32, |a, &v| a.max(v));
    if m <= 0.0 {
        return Raster::zeros(map.width(), map.height(), map.channels());
    }
    map.map(|v| v / m)
}

/// Summed-area table over a single-channel map, `(w+1) × (h+1)` entries.
pub struct Integral {
    w: usize,
    table: Vec<f64>,
}

impl Integral {
    pub fn new(map: &Raster<f32>) -> Self {
        assert_eq!(map.channels(), 1);
        let (w, h) = map.dims();
        let mut table = vec![0.0f64; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += map.get(x, y, 0) as f64;
                table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, table }
    }

    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self::new(&mask.to_raster::<f32>())
    }

    /// Sum over the inclusive rectangle `[x0, x1] × [y0, y1]`.
    pub fn sum(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
        let s = self.w + 1;
        self.table[(y1 + 1) * s + x1 + 1] - self.table[y0 * s + x1 + 1]
            - self.table[(y1 + 1) * s + x0]
            + self.table[y0 * s + x0]
    }
}

/// Mean over a `side × side` window centered on each pixel (clipped at the
/// borders, averaging only in-image pixels).
pub fn box_mean(map: &Raster<f32>, side: usize) -> Raster<f32> {
    let (w, h) = map.dims();
    let integral = Integral::new(map);
    let before = (side.max(1) - 1) / 2;
    let after = side.max(1) - 1 - before;
    Raster::from_fn(w, h, 1, |x, y, _| {
        let x0 = x.saturating_sub(before);
        let y0 = y.saturating_sub(before);
        let x1 = (x + after).min(w - 1);
        let y1 = (y + after).min(h - 1);
        let n = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        (integral.sum(x0, y0, x1, y1) / n) as f32
    })
}

/// Normalized discrete Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of every channel with zero padding outside the canvas.
pub fn gaussian_blur(src: &Raster<f32>, sigma: f64) -> Raster<f32> {
    if sigma <= 0.0 {
        return src.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h, ch) = (src.width(), src.height(), src.channels());
    let pass = |input: &Raster<f32>, horizontal: bool| {
        Raster::from_fn(w, h, ch, |x, y, c| {
            let mut acc = 0.0f64;
            for (j, &kv) in k.iter().enumerate() {
                let off = j as i64 - r;
                let (sx, sy) = if horizontal {
                    (x as i64 + off, y as i64)
                } else {
                    (x as i64, y as i64 + off)
                };
                if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                    acc += kv * input.get(sx as usize, sy as usize, c) as f64;
                }
            }
            acc as f32
        })
    };
    let tmp = pass(src, true);
    pass(&tmp, false)
}

/// Labelled connected components of a mask.
#[derive(Clone, Debug)]
pub struct Components {
    /// `0` for background, `1..=count` for components, row-major.
    pub labels: Vec<u32>,
    /// Pixel count per component; index `k` holds label `k + 1`.
    pub areas: Vec<usize>,
    pub width: usize,
}

impl Components {
    pub fn count(&self) -> usize {
        self.areas.len()
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// 4- or 8-connected component labelling by breadth-first flood fill in
/// row-major seed order, so labels are deterministic.
pub fn connected_components(mask: &BinaryMask, eight: bool) -> Components {
    let (w, h) = mask.dims();
    let mut labels = vec![0u32; w * h];
    let mut areas = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    let n4: &[(i64, i64)] = &[(1, 0), (-1, 0), (0, 1), (0, -1)];
    let n8: &[(i64, i64)] = &[
        (1, 0),
        (-1, 0),
        (0, 1),
        (0, -1),
        (1, 1),
        (1, -1),
        (-1, 1),
        (-1, -1),
    ];
    let nbrs = if eight { n8 } else { n4 };
    for start in 0..w * h {
        if !mask.data()[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        let mut area = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for &(dx, dy) in nbrs {
                let (nx, ny) = (x + dx, y + dy);
                if mask.get_signed(nx, ny) {
                    let j = ny as usize * w + nx as usize;
                    if labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    Components {
        labels,
        areas,
        width: w,
    }
}

/// Fills background components that do not touch the canvas border and
/// have at most `max_area` pixels.
pub fn fill_holes(mask: &BinaryMask, max_area: usize) -> BinaryMask {
    let (w, h) = mask.dims();
    let background = BinaryMask::from_fn(w, h, |x, y| !mask.get(x, y));
    let comps = connected_components(&background, false);
    let mut touches = vec![false; comps.count()];
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x + 1 == w || y + 1 == h {
                let l = comps.label(x, y);
                if l > 0 {
                    touches[l as usize - 1] = true;
                }
            }
        }
    }
    BinaryMask::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            return true;
        }
        let l = comps.label(x, y) as usize - 1;
        !touches[l] && comps.areas[l] <= max_area
    })
}

/// Bilinear resize of every channel, sampling at aligned pixel centers.
pub fn resize_bilinear(src: &Raster<f32>, w: usize, h: usize) -> Raster<f32> {
    let (sw, sh) = src.dims();
    let sx = sw as f64 / w as f64;
    let sy = sh as f64 / h as f64;
    Raster::from_fn(w, h, src.channels(), |x, y, c| {
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (sw - 1) as f64);
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (sh - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let v = |xx, yy| src.get(xx, yy, c) as f64;
        let top = v(x0, y0) * (1.0 - ax) + v(x1, y0) * ax;
        let bot = v(x0, y1) * (1.0 - ax) + v(x1, y1) * ax;
        (top * (1.0 - ay) + bot * ay) as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sobel_of_constant_is_zero() {
        let m = Raster::new(6, 5, 1, 0.3f32);
        assert!(sobel_magnitude(&m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sobel_vertical_step() {
        let m = Raster::from_fn(6, 4, 1, |x, _, _| if x >= 3 { 1.0f32 } else { 0.0 });
        let g = sobel_magnitude(&m);
        // columns 2 and 3 straddle the step: (1 + 2 + 1) = 4
        assert_eq!(g.get(2, 1, 0), 4.0);
        assert_eq!(g.get(3, 1, 0), 4.0);
        assert_eq!(g.get(0, 1, 0), 0.0);
        assert_eq!(g.get(5, 1, 0), 0.0);
    }

    #[test]
    fn integral_sums() {
        let m = Raster::from_fn(5, 4, 1, |x, y, _| (x + y * 5) as f32);
        let ig = Integral::new(&m);
        let brute: f64 = (1..=3)
            .flat_map(|y| (2..=4).map(move |x| (x + y * 5) as f64))
            .sum();
        assert_eq!(ig.sum(2, 1, 4, 3), brute);
    }

    #[test]
    fn components_four_vs_eight() {
        let m = BinaryMask::from_fn(3, 3, |x, y| x == y);
        assert_eq!(connected_components(&m, false).count(), 3);
        assert_eq!(connected_components(&m, true).count(), 1);
    }

    #[test]
    fn fills_enclosed_holes_only() {
        // ring with a 2x2 hole, plus an open notch on the border
        let m = BinaryMask::from_fn(8, 8, |x, y| {
            (1..=4).contains(&x) && (1..=4).contains(&y) && !((2..=3).contains(&x) && (2..=3).contains(&y))
        });
        let f = fill_holes(&m, 4);
        assert!(f.get(2, 2) && f.get(3, 3));
        assert!(!f.get(6, 6));
        let g = fill_holes(&m, 3);
        assert!(!g.get(2, 2));
    }

    #[test]
    fn blur_preserves_mass_away_from_border() {
        let m = Raster::from_fn(40, 40, 1, |x, y, _| {
            if (15..25).contains(&x) && (15..25).contains(&y) {
                1.0f32
            } else {
                0.0
            }
        });
        let b = gaussian_blur(&m, 1.5);
        assert!((b.sum() - m.sum()).abs() / m.sum() < 1e-5);
    }
}
