//! Deterministic scene-text synthesis.
//!
//! Backgrounds get placement proposals ([`heatmap`], [`pipeline`]), text is
//! rendered into 256×256 patches ([`textrender`]), warped by a coarse
//! square placement and a fine homography ([`geometry`]), recolored from
//! its surroundings ([`harmonize`]) and written out with detection
//! annotations ([`datio`]). Training-side numerics live in [`losses`] and
//! [`preprocess`].
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod datio;
pub mod geometry;
pub mod harmonize;
pub mod heatmap;
pub mod losses;
pub mod ops;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod scalar;
pub mod seeding;
#[doc(hidden)]
pub mod testkit;
pub mod textrender;
pub mod types;

pub use scalar::Scalar;

pub type Homography64 = types::Homography<f64>;
pub type Homography32 = types::Homography<f32>;
pub type Raster64 = raster::Raster<f64>;
pub type Raster32 = raster::Raster<f32>;
pub type RegionStats64 = harmonize::RegionStats<f64>;
pub type RegionStats32 = harmonize::RegionStats<f32>;
