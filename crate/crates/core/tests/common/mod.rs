//! Independent reference implementations used by the integration tests.
//! They favour obviously-correct loops over speed.
#![allow(dead_code)]

use std::collections::BTreeSet;

use image::{Rgb, RgbImage};
use rand::Rng as _;
use scenesynth::heatmap::{Heatmap, HeatmapParams};
use scenesynth::raster::{BinaryMask, Raster};
use scenesynth::seeding::{rng_from, Rng};
use scenesynth::types::{QuadBox, SceneInstance, SceneRecord, StrokeMask};

/// `|a − b| ≤ tol · max(|a|, |b|, 1)`.
pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }
}

/// Largest relative error between a map and oracle values (same order).
pub fn max_map_err(map: &Heatmap, oracle: &[f64]) -> f64 {
    assert_eq!(map.data().len(), oracle.len());
    map.data()
        .iter()
        .zip(oracle)
        .map(|(&a, &b)| {
            if a.is_infinite() && b.is_infinite() {
                0.0
            } else {
                rel_err(a as f64, b)
            }
        })
        .fold(0.0, f64::max)
}

// ---------- small scene fixtures ----------

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug)]
pub struct PixBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixBox {
    pub fn quad(&self) -> QuadBox {
        QuadBox::axis_aligned(
            self.x0 as f64 - 0.5,
            self.y0 as f64 - 0.5,
            self.x1 as f64 + 0.5,
            self.y1 as f64 + 0.5,
        )
        .unwrap()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn height(&self) -> f64 {
        (self.y1 - self.y0 + 1) as f64
    }

    pub fn center(&self) -> (i64, i64) {
        // the box is symmetric about ((x0+x1)/2, (y0+y1)/2); ties round away from zero
        let c = |a: usize, b: usize| ((a + b) as f64 / 2.0).round() as i64;
        (c(self.x0, self.x1), c(self.y0, self.y1))
    }
}

/// A scene of at most 16×16 pixels with one or two non-overlapping boxes.
pub struct SmallScene {
    pub record: SceneRecord,
    pub boxes: Vec<PixBox>,
}

pub fn small_scene(seed: u64) -> SmallScene {
    let mut rng = rng_from(seed);
    let w = rng.gen_range(10..=16u32);
    let h = rng.gen_range(10..=16u32);
    let flat = [rng.gen_range(40..200u8), rng.gen_range(40..200u8), rng.gen_range(40..200u8)];
    let split = rng.gen_range(w / 3..=2 * w / 3);
    let erased = RgbImage::from_fn(w, h, |x, _| {
        if x < split {
            Rgb(flat.map(|c| c.saturating_add(rng.gen_range(0..4))))
        } else {
            Rgb([rng.gen(), rng.gen(), rng.gen()])
        }
    });
    let n = rng.gen_range(1..=2);
    let mut boxes: Vec<PixBox> = Vec::new();
    while boxes.len() < n {
        let bw = rng.gen_range(3..=6usize);
        let bh = rng.gen_range(3..=5usize);
        let x0 = rng.gen_range(0..=w as usize - bw);
        let y0 = rng.gen_range(0..=h as usize - bh);
        let b = PixBox { x0, y0, x1: x0 + bw - 1, y1: y0 + bh - 1 };
        let apart = boxes
            .iter()
            .all(|o| b.x1 < o.x0 || o.x1 < b.x0 || b.y1 < o.y0 || o.y1 < b.y0);
        if apart {
            boxes.push(b);
        }
    }
    let mut original = erased.clone();
    let instances = boxes
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let mut mask = BinaryMask::from_fn(w as usize, h as usize, |x, y| b.contains(x, y) && rng.gen_bool(0.6));
            if mask.is_empty() {
                mask.set(b.x0, b.y0, true);
            }
            for (x, y) in mask.iter_set() {
                original.put_pixel(x as u32, y as u32, Rgb([250, 250, 250]));
            }
            SceneInstance {
                quad: b.quad(),
                mask: StrokeMask { mask, instance_id: k as u32 },
                valid: true,
                text: Some("x".into()),
            }
        })
        .collect();
    SmallScene {
        record: SceneRecord { id: format!("small_{seed}"), original, erased, instances },
        boxes,
    }
}

// ---------- morphology and components ----------

/// Chebyshev-ball dilation, one pixel at a time.
pub fn dilate_bruteforce(m: &BinaryMask, r: usize) -> BinaryMask {
    let (w, h) = m.dims();
    let r = r as i64;
    BinaryMask::from_fn(w, h, |x, y| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && m.get(nx as usize, ny as usize) {
                    return true;
                }
            }
        }
        false
    })
}

/// Chebyshev-ball erosion where off-canvas pixels count as set.
pub fn erode_bruteforce(m: &BinaryMask, r: usize) -> BinaryMask {
    let (w, h) = m.dims();
    let r = r as i64;
    BinaryMask::from_fn(w, h, |x, y| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                let inside = nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64;
                if inside && !m.get(nx as usize, ny as usize) {
                    return false;
                }
            }
        }
        true
    })
}

/// 4-connected components by depth-first search: per-pixel label (0 = unset)
/// and component sizes.
pub fn components4(m: &BinaryMask) -> (Vec<usize>, Vec<usize>) {
    let (w, h) = m.dims();
    let mut label = vec![0usize; w * h];
    let mut sizes = Vec::new();
    for s in 0..w * h {
        if !m.data()[s] || label[s] != 0 {
            continue;
        }
        sizes.push(0);
        let id = sizes.len();
        let mut stack = vec![s];
        label[s] = id;
        while let Some(i) = stack.pop() {
            sizes[id - 1] += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |nx: usize, ny: usize| {
                let j = ny * w + nx;
                if m.data()[j] && label[j] == 0 {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < w {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < h {
                visit(x, y + 1);
            }
        }
    }
    (label, sizes)
}

// ---------- heatmap stages ----------

pub struct DescriptorOracle {
    pub center: (i64, i64),
    /// Absolute pixel coordinates per region.
    pub regions: [BTreeSet<(i64, i64)>; 3],
}

pub fn descriptor_oracle(mask: &BinaryMask, b: &PixBox, params: &HeatmapParams) -> DescriptorOracle {
    let hgt = b.height();
    let r_in = ((params.inner_dilate_ratio * hgt).round() as usize).max(1);
    let r_out = ((params.outer_dilate_ratio * hgt).round() as usize).max(r_in + 1);
    let inner = dilate_bruteforce(mask, r_in);
    let outer = dilate_bruteforce(mask, r_out);
    let (w, h) = mask.dims();
    let mut regions: [BTreeSet<(i64, i64)>; 3] = Default::default();
    for y in 0..h {
        for x in 0..w {
            let p = (x as i64, y as i64);
            if mask.get(x, y) {
                regions[0].insert(p);
            } else if inner.get(x, y) {
                regions[1].insert(p);
            } else if outer.get(x, y) {
                regions[2].insert(p);
            }
        }
    }
    DescriptorOracle { center: b.center(), regions }
}

/// Triple loop over output pixels, anchors in the box and descriptor
/// pixels. Colors are compared on the `[0, 1]` scale.
pub fn distance_oracle(img: &RgbImage, d: &DescriptorOracle, b: &PixBox, weights: [f64; 3]) -> Vec<f64> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let px = |x: i64, y: i64| img.get_pixel(x as u32, y as u32).0.map(|c| c as f64 / 255.0);
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let mut best = f64::INFINITY;
            for v in b.y0 as i64..=b.y1 as i64 {
                for u in b.x0 as i64..=b.x1 as i64 {
                    let (sx, sy) = (x - u, y - v);
                    let mut total = 0.0;
                    'regions: for (region, wt) in d.regions.iter().zip(weights) {
                        for &(tx, ty) in region {
                            let (qx, qy) = (tx + sx, ty + sy);
                            if qx < 0 || qy < 0 || qx >= w || qy >= h {
                                total = f64::INFINITY;
                                break 'regions;
                            }
                            let (a, c) = (px(tx, ty), px(qx, qy));
                            let dist = ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2) + (a[2] - c[2]).powi(2)).sqrt();
                            total += wt * dist;
                        }
                    }
                    best = best.min(total);
                }
            }
            out.push(best);
        }
    }
    out
}

pub fn consistency_oracle(hd: &[f64]) -> Vec<f64> {
    let d_max = hd.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    hd.iter()
        .map(|&v| {
            if d_max <= 0.0 {
                return 1.0;
            }
            let d = if v.is_finite() { v } else { d_max };
            (1.0 - d / d_max).powi(3)
        })
        .collect()
}

/// BT.601 luma, 3×3 Sobel with replicated borders, divided by the maximum.
pub fn sobel_oracle(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let l = |x: i64, y: i64| {
        let p = img.get_pixel(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32).0;
        (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0
    };
    const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut mag = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..3 {
                for i in 0..3 {
                    let v = l(x + i - 1, y + j - 1);
                    gx += KX[j as usize][i as usize] * v;
                    gy += KX[i as usize][j as usize] * v;
                }
            }
            mag.push((gx * gx + gy * gy).sqrt());
        }
    }
    let m = mag.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        mag.iter().map(|v| v / m).collect()
    } else {
        mag
    }
}

pub fn box_union(boxes: &[PixBox], w: usize, h: usize) -> BinaryMask {
    BinaryMask::from_fn(w, h, |x, y| boxes.iter().any(|b| b.contains(x, y)))
}

pub fn edge_oracle(ha: &[f64], img: &RgbImage, boxes: &[PixBox], lambda: f64) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let s = sobel_oracle(img);
    let inside = box_union(boxes, w, h);
    (0..w * h)
        .map(|i| {
            let hb = if inside.data()[i] { 1.0 } else { 0.0 };
            f64::max(ha[i] - lambda * s[i], hb).clamp(0.0, 1.0)
        })
        .collect()
}

pub fn threshold_oracle(he: &[f64], t: f64) -> Vec<f64> {
    he.iter().map(|&v| if v > t { v } else { 0.0 }).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Component filtering, closing and hole filling written out directly.
pub fn finalize_oracle(ht: &[f64], w: usize, h: usize, boxes: &[PixBox], params: &HeatmapParams) -> Vec<f64> {
    let quads = box_union(boxes, w, h);
    let support = BinaryMask::from_fn(w, h, |x, y| ht[y * w + x] > 0.0);
    let (label, sizes) = components4(&support);
    let med_area = median(boxes.iter().map(|b| b.area() as f64).collect());
    let side = (median(boxes.iter().map(|b| b.height()).collect()).round() as usize).max(1);
    let keep: Vec<bool> = (1..=sizes.len())
        .map(|id| {
            let pix: Vec<usize> = (0..w * h).filter(|&i| label[i] == id).collect();
            let touches = pix.iter().any(|&i| quads.data()[i]);
            let peak = pix.iter().map(|&i| ht[i]).fold(0.0, f64::max);
            touches || (pix.len() as f64 >= params.min_region_area_ratio * med_area && peak >= params.min_peak_score)
        })
        .collect();
    let kept = BinaryMask::from_fn(w, h, |x, y| {
        let l = label[y * w + x];
        quads.get(x, y) || (l > 0 && keep[l - 1])
    });
    let r = side / 2;
    let closed = erode_bruteforce(&dilate_bruteforce(&kept, r), r);
    let holes = BinaryMask::from_fn(w, h, |x, y| !closed.get(x, y));
    let (hl, hs) = components4(&holes);
    let mut border = vec![false; hs.len()];
    for y in 0..h {
        for x in 0..w {
            let l = hl[y * w + x];
            if l > 0 && (x == 0 || y == 0 || x == w - 1 || y == h - 1) {
                border[l - 1] = true;
            }
        }
    }
    (0..w * h)
        .map(|i| {
            let l = hl[i];
            let filled = l > 0 && !border[l - 1] && hs[l - 1] <= side * side;
            if closed.data()[i] || filled || quads.data()[i] {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

pub fn to_f64(map: &Heatmap) -> Vec<f64> {
    map.data().iter().map(|&v| v as f64).collect()
}

// ---------- geometry ----------

/// Solves the 8×8 direct linear transform with Gaussian elimination and
/// partial pivoting; returns the matrix with `m[2][2] = 1`.
pub fn dlt_homography(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> [[f64; 3]; 3] {
    let mut a = [[0.0f64; 9]; 8];
    for k in 0..4 {
        let (x, y) = src[k];
        let (u, v) = dst[k];
        a[2 * k] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * k + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for c in col..9 {
                    a[row][c] -= f * a[col][c];
                }
            }
        }
    }
    let s: Vec<f64> = (0..8).map(|i| a[i][8] / a[i][i]).collect();
    [[s[0], s[1], s[2]], [s[3], s[4], s[5]], [s[6], s[7], 1.0]]
}

pub fn apply_matrix(m: &[[f64; 3]; 3], x: f64, y: f64) -> (f64, f64) {
    let w = m[2][0] * x + m[2][1] * y + m[2][2];
    ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
}

pub fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

// ---------- statistics ----------

/// Weighted mean, then weighted variance in a second pass, with `eps`
/// added before the square root.
pub fn two_pass_stats(values: &[Vec<f64>], weights: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let c = values[0].len();
    let total: f64 = weights.iter().sum();
    let mut mean = vec![0.0; c];
    for (v, w) in values.iter().zip(weights) {
        for k in 0..c {
            mean[k] += w * v[k] / total;
        }
    }
    let mut var = vec![0.0; c];
    for (v, w) in values.iter().zip(weights) {
        for k in 0..c {
            var[k] += w * (v[k] - mean[k]).powi(2) / total;
        }
    }
    (mean, var.into_iter().map(|s| (s + eps).sqrt()).collect())
}

pub fn pixels(r: &Raster<f64>) -> Vec<Vec<f64>> {
    r.data().chunks_exact(r.channels()).map(|p| p.to_vec()).collect()
}

// ---------- derivatives ----------

/// Central differences of `f` at `x` with step `h`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_unit_vec(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

// ---------- stage-by-stage heatmap comparison ----------

/// Largest relative error of every ground-truth stage against the
/// oracles. Each stage oracle is fed the library's previous stage so a
/// threshold tie cannot cascade; the descriptor is compared as sets.
pub fn heatmap_stage_errors(scene: &SmallScene, params: &HeatmapParams) -> Vec<(&'static str, f64)> {
    use scenesynth::heatmap::{build_descriptor, generate_gt_stages};
    let rec = &scene.record;
    let (w, h) = (rec.erased.width() as usize, rec.erased.height() as usize);
    let st = generate_gt_stages(rec, params).expect("stages");
    let mut desc_err = 0.0f64;
    let mut dist_err = 0.0f64;
    let mut cons_err = 0.0f64;
    for (k, &idx) in st.instances.iter().enumerate() {
        let inst = &rec.instances[idx];
        let b = &scene.boxes[idx];
        let oracle = descriptor_oracle(&inst.mask.mask, b, params);
        let lib = build_descriptor(&inst.mask, &inst.quad, params).unwrap();
        let same_center = lib.center == oracle.center;
        let same_regions = (0..3).all(|r| {
            let got: BTreeSet<(i64, i64)> =
                lib.regions[r].iter().map(|&(dx, dy)| (lib.center.0 + dx, lib.center.1 + dy)).collect();
            got == oracle.regions[r]
        });
        if !(same_center && same_regions) {
            desc_err = 1.0;
        }
        let hd = distance_oracle(&rec.erased, &oracle, b, params.weights);
        dist_err = dist_err.max(max_map_err(&st.distance[k], &hd));
        let ha = consistency_oracle(&to_f64(&st.distance[k]));
        cons_err = cons_err.max(max_map_err(&st.consistency[k], &ha));
    }
    let combined: Vec<f64> = (0..w * h)
        .map(|i| st.consistency.iter().map(|m| m.data()[i] as f64).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let boxes: Vec<PixBox> = st.instances.iter().map(|&i| scene.boxes[i]).collect();
    let edge = edge_oracle(&to_f64(&st.combined), &rec.erased, &boxes, params.lambda_edge);
    let thr = threshold_oracle(&to_f64(&st.edge), params.threshold);
    let fin = finalize_oracle(&to_f64(&st.thresholded), w, h, &boxes, params);
    vec![
        ("descriptor", desc_err),
        ("distance", dist_err),
        ("consistency", cons_err),
        ("combined", max_map_err(&st.combined, &combined)),
        ("edge", max_map_err(&st.edge, &edge)),
        ("threshold", max_map_err(&st.thresholded, &thr)),
        ("final", max_map_err(&st.final_map, &fin)),
    ]
}
