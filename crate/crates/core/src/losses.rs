//! Training objectives as plain numerics over slices.
//!
//! BCE and hinge terms are means, smooth-L1 is a sum, dice is a global
//! ratio over all elements.

use serde::{Deserialize, Serialize};

use crate::raster::{Raster, ShapeError};
use crate::scalar::Scalar;
use crate::types::Homography;

pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda0: 10.0,
            lambda1: 50.0,
            lambda2: 10.0,
            lambda3: 5.0,
        }
    }
}

impl LossWeights {
    pub fn is_valid(&self) -> bool {
        [self.lambda0, self.lambda1, self.lambda2, self.lambda3]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
    }
}

fn same_len<T>(a: &[T], b: &[T], what: &str) -> Result<(), ShapeError> {
    if a.len() != b.len() {
        return Err(ShapeError(format!("{what}: {} vs {} elements", a.len(), b.len())));
    }
    Ok(())
}

fn mean<T: Scalar>(v: impl Iterator<Item = T>) -> T {
    let (s, n) = v.fold((T::zero(), 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        T::zero()
    } else {
        s / T::lit(n as f64)
    }
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce<T: Scalar>(s: &[T], t: &[T]) -> Result<T, ShapeError> {
    same_len(s, t, "bce")?;
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    Ok(mean(s.iter().zip(t).map(|(&s, &t)| {
        let s = s.max(lo).min(hi);
        -(t * s.ln() + (T::one() - t) * (T::one() - s).ln())
    })))
}

/// `1 − 2Σsₜ / (Σs + Σt)`; zero when both inputs sum to zero.
pub fn dice<T: Scalar>(s: &[T], t: &[T]) -> Result<T, ShapeError> {
    same_len(s, t, "dice")?;
    let (a, b) = dice_terms(s, t);
    if b == T::zero() {
        return Ok(T::zero());
    }
    Ok(T::one() - T::lit(2.0) * a / b)
}

fn dice_terms<T: Scalar>(s: &[T], t: &[T]) -> (T, T) {
    s.iter()
        .zip(t)
        .fold((T::zero(), T::zero()), |(a, b), (&s, &t)| (a + s * t, b + s + t))
}

/// Gradient of [`dice`] with respect to `s`.
pub fn dice_grad<T: Scalar>(s: &[T], t: &[T]) -> Result<Vec<T>, ShapeError> {
    same_len(s, t, "dice_grad")?;
    let (a, b) = dice_terms(s, t);
    if b == T::zero() {
        return Ok(vec![T::zero(); s.len()]);
    }
    let two = T::lit(2.0);
    Ok(t.iter().map(|&ti| -two * (ti * b - a) / (b * b)).collect())
}

pub fn tlpnet_loss<T: Scalar>(pred: &[T], gt: &[T], w: &LossWeights) -> Result<T, ShapeError> {
    Ok(T::lit(w.lambda0) * bce(pred, gt)? + dice(pred, gt)?)
}

fn smooth_l1_one<T: Scalar>(x: T) -> T {
    if x.abs() < T::one() {
        T::lit(0.5) * x * x
    } else {
        x.abs() - T::lit(0.5)
    }
}

/// Summed smooth-L1.
pub fn smooth_l1<T: Scalar>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &v| acc + smooth_l1_one(v))
}

pub fn smooth_l1_grad<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v.abs() < T::one() { v } else { v.signum() })
        .collect()
}

/// Smooth-L1 over the eight free entries of `pred − gt` (both normalized
/// so the bottom-right entry is one).
pub fn homography_l1<T: Scalar>(pred: &Homography<T>, gt: &Homography<T>) -> T {
    let (p, g) = (pred.params8(), gt.params8());
    let diff: Vec<T> = p.iter().zip(&g).map(|(&a, &b)| a - b).collect();
    smooth_l1(&diff)
}

pub fn region_loss<T: Scalar>(
    pred_alpha: &[T],
    gt_alpha: &[T],
    pred_bm: &[T],
    gt_bm: &[T],
) -> Result<T, ShapeError> {
    Ok(dice(pred_alpha, gt_alpha)? + dice(pred_bm, gt_bm)?)
}

/// Hinge discriminator loss: `mean ReLU(1 − real) + mean ReLU(1 + fake)`.
pub fn hinge_d<T: Scalar>(real: &[T], fake: &[T]) -> T {
    let relu = |v: T| v.max(T::zero());
    mean(real.iter().map(|&r| relu(T::one() - r))) + mean(fake.iter().map(|&f| relu(T::one() + f)))
}

pub fn gtm_gen_loss<T: Scalar>(l1: T, region: T, fake: &[T], w: &LossWeights) -> T {
    T::lit(w.lambda1) * l1 + T::lit(w.lambda2) * region - mean(fake.iter().copied())
}

/// `λ3 · mean|out − source| − mean(fake)`.
pub fn chm_gen_loss<T: Scalar>(
    out: &Raster<T>,
    source: &Raster<T>,
    fake: &[T],
    w: &LossWeights,
) -> Result<T, ShapeError> {
    if out.channels() != source.channels() {
        return Err(ShapeError(format!("chm_gen_loss: {} vs {} channels", out.channels(), source.channels())));
    }
    out.expect_dims(source, "chm_gen_loss")?;
    let l = mean(out.data().iter().zip(source.data()).map(|(&a, &b)| (a - b).abs()));
    Ok(T::lit(w.lambda3) * l - mean(fake.iter().copied()))
}
