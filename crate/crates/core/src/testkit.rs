//! Deterministic synthetic fixtures for tests, benchmarks and examples.

use image::{Rgb, RgbImage};
use rand::Rng as _;

use crate::pipeline::{pixel_square, place_instance, Assets, PassthroughColor};
use crate::raster::unit_to_u8;
use crate::seeding::{derive_seed, rng_from};
use crate::textrender::{render_patch, FontStore, Lexicon, RenderSpec, TextureSet, BUNDLED_FONT_ID};
use crate::types::{Homography, Point2, QuadBox, SceneInstance, SceneRecord, StrokeMask, PATCH_SIZE};

pub const WORDS: [&str; 12] = [
    "OPEN", "Cafe", "EXIT", "sale", "Hotel", "BUS", "north", "Market", "PARK", "Taxi", "bread", "STOP",
];

pub fn lexicon() -> Lexicon {
    Lexicon::parse(&WORDS.join("\n"))
}

/// Bundled font, the fixed word list and procedural textures.
pub fn assets() -> Assets {
    Assets {
        fonts: FontStore::bundled(),
        lexicon: lexicon(),
        textures: TextureSet::default(),
    }
}

fn color(rng: &mut crate::seeding::Rng) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

/// A background with a smooth upper band, a flat lower band and one
/// strongly textured block, so proposals are neither empty nor full.
pub fn background(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = rng_from(seed);
    let (top, bottom, tex) = (color(&mut rng), color(&mut rng), color(&mut rng));
    let split = (h as f64 * rng.gen_range(0.4..0.7)) as u32;
    let bw = w / 3;
    let bx = if rng.gen_bool(0.5) { 0 } else { w - bw };
    let period = rng.gen_range(3..7);
    RgbImage::from_fn(w, h, |x, y| {
        let v = if (bx..bx + bw).contains(&x) && y >= split {
            let on = ((x / period) + (y / period)) % 2 == 0;
            tex.map(|c| if on { c } else { 1.0 - c })
        } else if y < split {
            let t = y as f64 / h as f64;
            top.map(|c| c * (0.8 + 0.2 * t))
        } else {
            bottom
        };
        Rgb(v.map(unit_to_u8))
    })
}

/// Small tilt-and-keystone transform about the patch center, within
/// `max_deg` of rotation.
pub fn tilt(rng: &mut crate::seeding::Rng, max_deg: f64) -> Homography<f64> {
    let a = rng.gen_range(-max_deg..=max_deg).to_radians();
    let k = rng.gen_range(-2e-4..2e-4);
    let c = PATCH_SIZE as f64 / 2.0;
    let (s, co) = a.sin_cos();
    let rot = Homography::new([[co, -s, c - co * c + s * c], [s, co, c - s * c - co * c], [0.0, 0.0, 1.0]]).unwrap();
    let persp = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [k, 0.0, 1.0 - k * c]]).unwrap();
    rot.then_after(&persp).unwrap()
}

/// A decomposed scene with `valid + invalid` text instances laid out on a
/// 2-column grid of a 384×288 background. Instance masks are the ink
/// coverage above 0.5, quads are the ink boxes mapped into the image.
pub fn scene_record(id: &str, seed: u64, valid: usize, invalid: usize) -> SceneRecord {
    let (w, h) = (384u32, 288u32);
    let n = valid + invalid;
    assert!(n <= 6, "the grid has six cells");
    let erased = background(w, h, derive_seed(seed, id, 0));
    let mut rng = rng_from(derive_seed(seed, id, 1));
    let fonts = FontStore::bundled();
    let mut original = erased.clone();
    let mut instances = Vec::with_capacity(n);
    for k in 0..n {
        let (cx, cy) = (96 + 192 * (k % 2) as i64, 48 + 96 * (k / 2) as i64);
        let word = WORDS[rng.gen_range(0..WORDS.len())];
        let fill = if rng.gen_bool(0.5) { [245, 245, 240] } else { [15, 20, 25] };
        let spec = RenderSpec {
            text: word.to_string(),
            font_id: BUNDLED_FONT_ID.to_string(),
            fill,
            size_px: 64,
            effects: vec![],
        };
        let patch = render_patch(&fonts, &spec).expect("bundled glyphs");
        let side = rng.gen_range(140..170) as i64;
        let rect = pixel_square_signed(cx - side / 2, cy - side / 2, side as usize);
        let a_n = tilt(&mut rng, 6.0);
        let placed = place_instance(&original, &patch, &patch.alpha, &rect, &a_n, &PassthroughColor)
            .expect("grid cells keep text inside the image");
        original = placed.image;
        instances.push(SceneInstance {
            quad: placed.quad,
            mask: StrokeMask {
                mask: placed.ink.above(0.5),
                instance_id: k as u32,
            },
            valid: k < valid,
            text: Some(word.to_string()),
        });
    }
    SceneRecord {
        id: id.to_string(),
        original,
        erased,
        instances,
    }
}

// squares may start left of or above the image; the quad is still valid
fn pixel_square_signed(x0: i64, y0: i64, side: usize) -> QuadBox {
    if x0 >= 0 && y0 >= 0 {
        return pixel_square(x0 as usize, y0 as usize, side);
    }
    let c = Point2::new(x0 as f64 - 0.5 + side as f64 / 2.0, y0 as f64 - 0.5 + side as f64 / 2.0);
    QuadBox::square(c, side as f64).expect("positive side")
}

/// The committed three-record DecompST fixture.
pub fn fixture_records() -> Vec<SceneRecord> {
    vec![
        scene_record("ic15_0001", 11, 2, 1),
        scene_record("mlt19_0001", 12, 3, 0),
        scene_record("segtext_0001", 13, 1, 1),
    ]
}

/// Counts per source of [`fixture_records`]: (source, images, valid).
pub const FIXTURE_COUNTS: [(&str, usize, usize); 3] = [("IC15", 1, 2), ("MLT19", 1, 3), ("SegText", 1, 1)];
