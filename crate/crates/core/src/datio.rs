//! Dataset ingestion, statistics and output serialization.
//!
//! DecompST layout under a root directory:
//!
//! ```text
//! images/<id>.<ext>        original scene image
//! erased/<id>.<ext>        text-erased background, same size
//! masks/<id>_<k>.png       stroke mask of instance k (0-based line index)
//! annots/<id>.txt          one line per instance:
//!                          x1,y1,x2,y2,x3,y3,x4,y4,valid,transcript
//! ```
//!
//! The source subset is the id prefix before the first `_`. All layout
//! assumptions live in [`DecompstLayout`]; records and statistics only go
//! through [`RecordRef`].

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::TrainTriplet;
use crate::raster::{BinaryMask, Raster};
use crate::types::{
    validate_scene_record, Homography, QuadBox, SceneInstance, SceneRecord, StrokeMask, SynthInstance,
    SynthRecord, SynthStatus,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Per-source image and valid-instance counts of the DecompST release.
pub const RELEASE_COUNTS: [(&str, usize, usize); 3] = [("IC15", 787, 1848), ("MLT19", 1681, 6652), ("SegText", 2117, 7517)];
pub const RELEASE_TOTAL: (usize, usize) = (4585, 16017);

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Error)]
pub enum DatioError {
    #[error("{id}: {path}: {source}")]
    Io {
        id: String,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{id}: missing {what} ({path})")]
    Missing { id: String, what: &'static str, path: PathBuf },
    #[error("{id}: {path}: {source}")]
    Image {
        id: String,
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    /// Malformed annotation content or an inconsistent record. `line` is
    /// 1-based; 0 refers to the record as a whole.
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: png encoding: {msg}")]
    Encode { path: PathBuf, msg: String },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("unsupported schema version {found} in {path}")]
    Schema { path: PathBuf, found: u32 },
}

impl DatioError {
    fn io(id: &str, path: &Path, source: std::io::Error) -> Self {
        DatioError::Io {
            id: id.to_string(),
            path: path.to_path_buf(),
            source,
        }
    }

    fn image(id: &str, path: &Path, source: image::ImageError) -> Self {
        DatioError::Image {
            id: id.to_string(),
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Stop at the first error.
    #[default]
    Strict,
    /// Report errors and keep going.
    Lenient,
}

/// One parsed annotation line.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotLine {
    pub quad: QuadBox,
    pub valid: bool,
    pub text: Option<String>,
}

/// File references of one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordRef {
    pub id: String,
    pub source: String,
    pub original: PathBuf,
    pub erased: PathBuf,
    /// One entry per annotation line; `None` for invalid instances
    /// without a mask file.
    pub masks: Vec<Option<PathBuf>>,
    pub annotation: PathBuf,
    pub valid_instances: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCount {
    pub images: usize,
    pub valid_instances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<RecordRef>,
    pub counts: BTreeMap<String, SourceCount>,
}

/// Canonical subset name for an id prefix; unknown prefixes pass through.
pub fn source_of(id: &str) -> String {
    let prefix = id.split('_').next().unwrap_or(id);
    for (name, _, _) in RELEASE_COUNTS {
        if prefix.eq_ignore_ascii_case(name) {
            return name.to_string();
        }
    }
    prefix.to_string()
}

/// Parses one DecompST annotation file. A UTF-8 BOM and CRLF line endings
/// are accepted; blank lines are skipped but still counted for line
/// numbers. The transcript is everything after the ninth comma, so it may
/// itself contain commas.
pub fn parse_annotations(path: &Path, text: &str) -> Result<Vec<AnnotLine>, DatioError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DatioError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.splitn(10, ',').collect();
        if fields.len() < 9 {
            return Err(err(format!("expected at least 9 fields, found {}", fields.len())));
        }
        let mut c = [0.0f64; 8];
        for (k, f) in fields[..8].iter().enumerate() {
            c[k] = f
                .trim()
                .parse::<f64>()
                .map_err(|_| err(format!("coordinate {} is not a number: {f:?}", k + 1)))?;
        }
        let valid = match fields[8].trim() {
            "1" => true,
            "0" => false,
            other => return Err(err(format!("validity must be 0 or 1, found {other:?}"))),
        };
        let quad = QuadBox::from_coords(c).map_err(|e| err(e.to_string()))?;
        let text = fields.get(9).map(|t| t.to_string()).filter(|t| !t.is_empty());
        out.push(AnnotLine { quad, valid, text });
    }
    Ok(out)
}

/// Formats annotation lines back into the DecompST text format (LF
/// endings, coordinates in shortest round-trip form).
pub fn format_annotations(lines: &[AnnotLine]) -> String {
    let mut s = String::new();
    for l in lines {
        let c = l.quad.coords();
        let coords: Vec<String> = c.iter().map(|v| v.to_string()).collect();
        s.push_str(&coords.join(","));
        s.push_str(if l.valid { ",1," } else { ",0," });
        s.push_str(l.text.as_deref().unwrap_or(""));
        s.push('\n');
    }
    s
}

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTS
        .iter()
        .map(|e| dir.join(format!("{id}.{e}")))
        .find(|p| p.is_file())
}

/// Directory conventions of a DecompST release.
#[derive(Clone, Debug)]
pub struct DecompstLayout {
    pub images: &'static str,
    pub erased: &'static str,
    pub masks: &'static str,
    pub annots: &'static str,
}

impl Default for DecompstLayout {
    fn default() -> Self {
        Self {
            images: "images",
            erased: "erased",
            masks: "masks",
            annots: "annots",
        }
    }
}

impl DecompstLayout {
    /// Record ids, sorted: stems of the files in the images directory.
    pub fn ids(&self, root: &Path) -> Result<Vec<String>, DatioError> {
        let dir = root.join(self.images);
        let entries = fs::read_dir(&dir).map_err(|e| DatioError::io("<root>", &dir, e))?;
        let mut ids = Vec::new();
        let mut seen = HashSet::new();
        for entry in entries {
            let path = entry.map_err(|e| DatioError::io("<root>", &dir, e))?.path();
            let ext_ok = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()));
            if !ext_ok {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if !seen.insert(stem.to_string()) {
                    return Err(DatioError::DuplicateId(stem.to_string()));
                }
                ids.push(stem.to_string());
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Resolves and checks every file of one record.
    pub fn record_ref(&self, root: &Path, id: &str) -> Result<RecordRef, DatioError> {
        let missing = |what, path: PathBuf| DatioError::Missing {
            id: id.to_string(),
            what,
            path,
        };
        let original = find_image(&root.join(self.images), id)
            .ok_or_else(|| missing("original image", root.join(self.images).join(id)))?;
        let erased = find_image(&root.join(self.erased), id)
            .ok_or_else(|| missing("erased image", root.join(self.erased).join(id)))?;
        let annotation = root.join(self.annots).join(format!("{id}.txt"));
        let text = fs::read_to_string(&annotation).map_err(|e| DatioError::io(id, &annotation, e))?;
        let lines = parse_annotations(&annotation, &text)?;
        let mut masks = Vec::with_capacity(lines.len());
        for (k, l) in lines.iter().enumerate() {
            let p = root.join(self.masks).join(format!("{id}_{k}.png"));
            if p.is_file() {
                masks.push(Some(p));
            } else if l.valid {
                return Err(missing("stroke mask", p));
            } else {
                masks.push(None);
            }
        }
        Ok(RecordRef {
            id: id.to_string(),
            source: source_of(id),
            original,
            erased,
            masks,
            annotation,
            valid_instances: lines.iter().filter(|l| l.valid).count(),
        })
    }
}

/// Indexes a DecompST root. In strict mode the first broken record is an
/// error; in lenient mode broken records are left out and returned
/// alongside the manifest.
pub fn scan_decompst(root: &Path, mode: LoadMode) -> Result<(DatasetManifest, Vec<DatioError>), DatioError> {
    scan_with_layout(root, &DecompstLayout::default(), mode)
}

pub fn scan_with_layout(
    root: &Path,
    layout: &DecompstLayout,
    mode: LoadMode,
) -> Result<(DatasetManifest, Vec<DatioError>), DatioError> {
    if !root.is_dir() {
        return Err(DatioError::Missing {
            id: "<root>".into(),
            what: "dataset root",
            path: root.to_path_buf(),
        });
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for id in layout.ids(root)? {
        match layout.record_ref(root, &id) {
            Ok(r) => records.push(r),
            Err(e) if mode == LoadMode::Lenient => skipped.push(e),
            Err(e) => return Err(e),
        }
    }
    let counts = count_sources(&records);
    Ok((
        DatasetManifest {
            root: root.to_path_buf(),
            records,
            counts,
        },
        skipped,
    ))
}

fn count_sources(records: &[RecordRef]) -> BTreeMap<String, SourceCount> {
    let mut counts: BTreeMap<String, SourceCount> = BTreeMap::new();
    for r in records {
        let c = counts.entry(r.source.clone()).or_default();
        c.images += 1;
        c.valid_instances += r.valid_instances;
    }
    counts
}

fn read_rgb(id: &str, path: &Path) -> Result<RgbImage, DatioError> {
    Ok(image::open(path).map_err(|e| DatioError::image(id, path, e))?.to_rgb8())
}

/// Reads a mask image; any nonzero gray value is set.
pub fn read_mask(id: &str, path: &Path) -> Result<BinaryMask, DatioError> {
    let img = image::open(path).map_err(|e| DatioError::image(id, path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(BinaryMask::from_fn(w as usize, h as usize, |x, y| img.get_pixel(x as u32, y as u32).0[0] > 0))
}

/// Loads one record and checks its invariants; violations surface as a
/// record-level [`DatioError::Parse`].
pub fn load_record(r: &RecordRef) -> Result<SceneRecord, DatioError> {
    let original = read_rgb(&r.id, &r.original)?;
    let erased = read_rgb(&r.id, &r.erased)?;
    let text = fs::read_to_string(&r.annotation).map_err(|e| DatioError::io(&r.id, &r.annotation, e))?;
    let lines = parse_annotations(&r.annotation, &text)?;
    if lines.len() != r.masks.len() {
        return Err(DatioError::Parse {
            path: r.annotation.clone(),
            line: 0,
            msg: format!("{} annotation lines but {} mask slots", lines.len(), r.masks.len()),
        });
    }
    let (w, h) = (original.width() as usize, original.height() as usize);
    let mut instances = Vec::with_capacity(lines.len());
    for (k, (l, m)) in lines.into_iter().zip(&r.masks).enumerate() {
        let mask = match m {
            Some(p) => read_mask(&r.id, p)?,
            None => BinaryMask::new(w, h),
        };
        instances.push(SceneInstance {
            quad: l.quad,
            mask: StrokeMask {
                mask,
                instance_id: k as u32,
            },
            valid: l.valid,
            text: l.text,
        });
    }
    let rec = SceneRecord {
        id: r.id.clone(),
        original,
        erased,
        instances,
    };
    let violations = validate_scene_record(&rec);
    if !violations.is_empty() {
        let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(DatioError::Parse {
            path: r.original.clone(),
            line: 0,
            msg: msg.join("; "),
        });
    }
    Ok(rec)
}

/// Streams records in id order. Strict mode yields the first error and
/// then ends; lenient mode yields every error and continues.
pub fn load_decompst(manifest: &DatasetManifest, mode: LoadMode) -> impl Iterator<Item = Result<SceneRecord, DatioError>> + '_ {
    let mut failed = false;
    manifest.records.iter().map_while(move |r| {
        if failed {
            return None;
        }
        let res = load_record(r);
        if res.is_err() && mode == LoadMode::Strict {
            failed = true;
        }
        Some(res)
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub source: String,
    pub images: usize,
    pub valid_instances: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsTable {
    pub rows: Vec<StatsRow>,
    pub total: (usize, usize),
}

/// Per-source counts in the release's subset order, then any other
/// sources alphabetically, plus totals.
pub fn stats(manifest: &DatasetManifest) -> StatsTable {
    let mut rows = Vec::new();
    for (name, _, _) in RELEASE_COUNTS {
        if let Some(c) = manifest.counts.get(name) {
            rows.push(StatsRow {
                source: name.to_string(),
                images: c.images,
                valid_instances: c.valid_instances,
            });
        }
    }
    for (name, c) in &manifest.counts {
        if !RELEASE_COUNTS.iter().any(|t| t.0 == name) {
            rows.push(StatsRow {
                source: name.clone(),
                images: c.images,
                valid_instances: c.valid_instances,
            });
        }
    }
    let total = rows
        .iter()
        .fold((0, 0), |(a, b), r| (a + r.images, b + r.valid_instances));
    StatsTable { rows, total }
}

impl StatsTable {
    /// Plain-text table with a header, one row per source and totals.
    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|r| r.source.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<width$}  {:>8}  {:>15}\n", "Source", "Images", "Valid instances");
        for r in &self.rows {
            s.push_str(&format!("{:<width$}  {:>8}  {:>15}\n", r.source, r.images, r.valid_instances));
        }
        s.push_str(&format!("{:<width$}  {:>8}  {:>15}\n", "Total", self.total.0, self.total.1));
        s
    }

    /// Whether every release subset and the totals match exactly.
    pub fn matches_release(&self) -> bool {
        RELEASE_COUNTS.iter().all(|(name, im, inst)| {
            self.rows
                .iter()
                .any(|r| r.source == *name && r.images == *im && r.valid_instances == *inst)
        }) && self.total == RELEASE_TOTAL
    }
}

fn create_dir(path: &Path) -> Result<(), DatioError> {
    fs::create_dir_all(path).map_err(|e| DatioError::io("<out>", path, e))
}

/// Writes a mask as a 1-bit grayscale PNG (set pixels white).
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<(), DatioError> {
    let (w, h) = mask.dims();
    let file = File::create(path).map_err(|e| DatioError::io("<out>", path, e))?;
    let enc_err = |e: png::EncodingError| DatioError::Encode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(enc_err)?;
    let stride = w.div_ceil(8);
    let mut buf = vec![0u8; stride * h];
    for (x, y) in mask.iter_set() {
        buf[y * stride + x / 8] |= 0x80 >> (x % 8);
    }
    writer.write_image_data(&buf).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

fn save_rgb(path: &Path, img: &RgbImage) -> Result<(), DatioError> {
    img.save(path).map_err(|e| DatioError::image("<out>", path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatioError> {
    let s = serde_json::to_string_pretty(value).map_err(|source| DatioError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatioError> {
    let s = fs::read_to_string(path).map_err(|e| DatioError::io("<in>", path, e))?;
    serde_json::from_str(&s).map_err(|source| DatioError::Json {
        path: path.to_path_buf(),
        source,
    })
}

// write to a sibling temp file then rename so readers never see a partial file
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatioError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(|e| DatioError::io("<out>", &tmp, e))?;
    f.write_all(bytes).map_err(|e| DatioError::io("<out>", &tmp, e))?;
    f.sync_all().map_err(|e| DatioError::io("<out>", &tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DatioError::io("<out>", path, e))
}

/// Writes records in the DecompST layout. Used for fixtures and tests.
pub fn write_decompst(root: &Path, records: &[SceneRecord]) -> Result<(), DatioError> {
    let l = DecompstLayout::default();
    for d in [l.images, l.erased, l.masks, l.annots] {
        create_dir(&root.join(d))?;
    }
    for rec in records {
        save_rgb(&root.join(l.images).join(format!("{}.png", rec.id)), &rec.original)?;
        save_rgb(&root.join(l.erased).join(format!("{}.png", rec.id)), &rec.erased)?;
        let mut lines = Vec::new();
        for (k, inst) in rec.instances.iter().enumerate() {
            write_mask_png(&root.join(l.masks).join(format!("{}_{k}.png", rec.id)), &inst.mask.mask)?;
            lines.push(AnnotLine {
                quad: inst.quad,
                valid: inst.valid,
                text: inst.text.clone(),
            });
        }
        let path = root.join(l.annots).join(format!("{}.txt", rec.id));
        fs::write(&path, format_annotations(&lines)).map_err(|e| DatioError::io(&rec.id, &path, e))?;
    }
    Ok(())
}

/// ICDAR-2015 ground truth: UTF-8 with BOM, CRLF line endings, eight
/// integer coordinates then the transcript on every line.
pub fn format_icdar(instances: &[(QuadBox, &str)]) -> String {
    let mut s = String::from("\u{feff}");
    for (q, t) in instances {
        let c: Vec<String> = q.coords().iter().map(|v| format!("{}", v.round() as i64)).collect();
        s.push_str(&c.join(","));
        s.push(',');
        s.push_str(t);
        s.push_str("\r\n");
    }
    s
}

/// Parses ICDAR-2015 ground truth; BOM and CRLF are optional.
pub fn parse_icdar(path: &Path, text: &str) -> Result<Vec<([i64; 8], String)>, DatioError> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut out = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(9, ',').collect();
        if fields.len() != 9 {
            return Err(DatioError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 8 coordinates and a transcript, found {} fields", fields.len()),
            });
        }
        let mut c = [0i64; 8];
        for (k, f) in fields[..8].iter().enumerate() {
            c[k] = f.trim().parse().map_err(|_| DatioError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("coordinate {} is not an integer: {f:?}", k + 1),
            })?;
        }
        out.push((c, fields[8].to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub instance_id: u32,
    pub quad: QuadBox,
    pub rect: QuadBox,
    pub text: String,
    /// Row-major patch-to-image transform.
    pub transform: [[f64; 3]; 3],
    /// Mask path relative to the output root.
    pub mask: String,
}

/// Native per-image annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthAnnotation {
    pub schema_version: u32,
    pub id: String,
    pub provenance: String,
    pub seed: u64,
    pub status: SynthStatus,
    pub width: u32,
    pub height: u32,
    pub image: String,
    pub instances: Vec<InstanceAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEntry {
    pub id: String,
    pub provenance: String,
    pub seed: u64,
    pub status: SynthStatus,
    pub instances: usize,
    pub image: String,
    pub annotation: Option<String>,
    pub icdar: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub schema_version: u32,
    /// Effective configuration the records were generated with.
    pub config: serde_json::Value,
    pub records: Vec<SynthEntry>,
}

impl SynthManifest {
    pub fn load(out_root: &Path) -> Result<Self, DatioError> {
        let path = out_root.join("manifest.json");
        let m: SynthManifest = read_json(&path)?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(DatioError::Schema {
                path,
                found: m.schema_version,
            });
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthFormat {
    pub native: bool,
    pub icdar: bool,
}

impl Default for SynthFormat {
    fn default() -> Self {
        Self {
            native: true,
            icdar: true,
        }
    }
}

/// Output directory for generated samples. Each record's files are
/// written by exactly one caller; the manifest is assembled from the
/// completed entries on [`SynthWriter::flush`].
pub struct SynthWriter {
    root: PathBuf,
    format: SynthFormat,
    config: serde_json::Value,
    entries: Mutex<BTreeMap<String, SynthEntry>>,
}

impl SynthWriter {
    /// Prepares `out_root`. With `resume`, entries of an existing manifest
    /// are kept and reported by [`SynthWriter::contains`].
    pub fn create(out_root: &Path, format: SynthFormat, config: serde_json::Value, resume: bool) -> Result<Self, DatioError> {
        for d in ["images", "masks", "annots", "gt"] {
            create_dir(&out_root.join(d))?;
        }
        let mut entries = BTreeMap::new();
        if resume && out_root.join("manifest.json").is_file() {
            for e in SynthManifest::load(out_root)?.records {
                entries.insert(e.id.clone(), e);
            }
        }
        Ok(Self {
            root: out_root.to_path_buf(),
            format,
            config,
            entries: Mutex::new(entries),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.lock().unwrap().contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes one record's image, masks and annotations.
    pub fn write(&self, id: &str, rec: &SynthRecord) -> Result<SynthEntry, DatioError> {
        let image = format!("images/{id}.png");
        save_rgb(&self.root.join(&image), &rec.image)?;
        let mut instances = Vec::with_capacity(rec.instances.len());
        for (k, inst) in rec.instances.iter().enumerate() {
            let mask = format!("masks/{id}_{k}.png");
            write_mask_png(&self.root.join(&mask), &inst.mask.mask)?;
            instances.push(InstanceAnnotation {
                instance_id: inst.mask.instance_id,
                quad: inst.quad,
                rect: inst.rect,
                text: inst.text.clone(),
                transform: inst.transform.matrix(),
                mask,
            });
        }
        let annotation = if self.format.native {
            let rel = format!("annots/{id}.json");
            let a = SynthAnnotation {
                schema_version: SCHEMA_VERSION,
                id: id.to_string(),
                provenance: rec.provenance.clone(),
                seed: rec.seed,
                status: rec.status,
                width: rec.image.width(),
                height: rec.image.height(),
                image: image.clone(),
                instances,
            };
            write_json(&self.root.join(&rel), &a)?;
            Some(rel)
        } else {
            None
        };
        let icdar = if self.format.icdar {
            let rel = format!("gt/gt_{id}.txt");
            let rows: Vec<(QuadBox, &str)> = rec.instances.iter().map(|i| (i.quad, i.text.as_str())).collect();
            let path = self.root.join(&rel);
            fs::write(&path, format_icdar(&rows)).map_err(|e| DatioError::io(id, &path, e))?;
            Some(rel)
        } else {
            None
        };
        let entry = SynthEntry {
            id: id.to_string(),
            provenance: rec.provenance.clone(),
            seed: rec.seed,
            status: rec.status,
            instances: rec.instances.len(),
            image,
            annotation,
            icdar,
        };
        self.entries.lock().unwrap().insert(id.to_string(), entry.clone());
        Ok(entry)
    }

    /// Writes `manifest.json` listing every completed record in id order.
    pub fn flush(&self) -> Result<SynthManifest, DatioError> {
        let m = SynthManifest {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            records: self.entries.lock().unwrap().values().cloned().collect(),
        };
        write_json(&self.root.join("manifest.json"), &m)?;
        Ok(m)
    }
}

/// Writes all records and the manifest in one call.
pub fn write_synth(
    records: impl IntoIterator<Item = (String, SynthRecord)>,
    out_root: &Path,
    format: SynthFormat,
    config: serde_json::Value,
) -> Result<SynthManifest, DatioError> {
    let w = SynthWriter::create(out_root, format, config, false)?;
    for (id, rec) in records {
        w.write(&id, &rec)?;
    }
    w.flush()
}

/// Reads back records written with the native format.
pub fn load_synth(out_root: &Path) -> Result<Vec<(String, SynthRecord)>, DatioError> {
    let m = SynthManifest::load(out_root)?;
    let mut out = Vec::with_capacity(m.records.len());
    for e in m.records {
        let Some(rel) = &e.annotation else {
            return Err(DatioError::Parse {
                path: out_root.join("manifest.json"),
                line: 0,
                msg: format!("{} has no native annotation", e.id),
            });
        };
        let apath = out_root.join(rel);
        let a: SynthAnnotation = read_json(&apath)?;
        if a.schema_version != SCHEMA_VERSION {
            return Err(DatioError::Schema {
                path: apath,
                found: a.schema_version,
            });
        }
        let image = read_rgb(&e.id, &out_root.join(&a.image))?;
        let mut instances = Vec::with_capacity(a.instances.len());
        for ia in a.instances {
            let transform = Homography::new(ia.transform).map_err(|err| DatioError::Parse {
                path: apath.clone(),
                line: 0,
                msg: err.to_string(),
            })?;
            instances.push(SynthInstance {
                quad: ia.quad,
                mask: StrokeMask {
                    mask: read_mask(&e.id, &out_root.join(&ia.mask))?,
                    instance_id: ia.instance_id,
                },
                text: ia.text,
                rect: ia.rect,
                transform,
            });
        }
        out.push((
            e.id,
            SynthRecord {
                provenance: a.provenance,
                image,
                instances,
                seed: a.seed,
                status: a.status,
            },
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletMeta {
    pub schema_version: u32,
    pub record: String,
    pub instance: usize,
    pub seed: u64,
    pub text: String,
    pub rect: QuadBox,
    pub pt_quad: QuadBox,
    pub before_quad: QuadBox,
    pub gt_matrix: [[f64; 3]; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletEntry {
    pub id: String,
    pub record: String,
    pub instance: usize,
    pub seed: u64,
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletManifest {
    pub schema_version: u32,
    pub config: serde_json::Value,
    pub records: Vec<TripletEntry>,
}

fn save_gray16(path: &Path, map: &Raster<f32>) -> Result<(), DatioError> {
    let (w, h) = map.dims();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(map.get(x as usize, y as usize, 0).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| DatioError::image("<out>", path, e))
}

/// Reads a 16-bit (or 8-bit) gray PNG as a map in `[0, 1]`.
pub fn read_gray16(path: &Path) -> Result<Raster<f32>, DatioError> {
    let img = image::open(path).map_err(|e| DatioError::image("<in>", path, e))?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Raster::from_fn(w as usize, h as usize, 1, |x, y, _| {
        img.get_pixel(x as u32, y as u32).0[0] as f32 / 65535.0
    }))
}

/// Writes one triplet into `<out_root>/<record>_<instance>/`:
/// `patch_rgb.png`, `patch_alpha.png` (16-bit), `patch_bbox.png`, `bg.png`,
/// `source.png`, `gt_alpha.png` (16-bit), `gt_bm.png` and `meta.json`.
pub fn write_triplet(out_root: &Path, record: &str, seed: u64, t: &TrainTriplet) -> Result<TripletEntry, DatioError> {
    let id = format!("{record}_{}", t.instance);
    let dir = out_root.join(&id);
    create_dir(&dir)?;
    save_rgb(&dir.join("patch_rgb.png"), &t.patch.rgb)?;
    save_gray16(&dir.join("patch_alpha.png"), &t.patch.alpha)?;
    write_mask_png(&dir.join("patch_bbox.png"), &t.patch.bbox_mask)?;
    save_rgb(&dir.join("bg.png"), &t.bg)?;
    save_rgb(&dir.join("source.png"), &t.source)?;
    save_gray16(&dir.join("gt_alpha.png"), &t.gt_alpha)?;
    write_mask_png(&dir.join("gt_bm.png"), &t.gt_bm)?;
    write_json(
        &dir.join("meta.json"),
        &TripletMeta {
            schema_version: SCHEMA_VERSION,
            record: record.to_string(),
            instance: t.instance,
            seed,
            text: t.patch.text.clone(),
            rect: t.rect,
            pt_quad: t.pt_quad,
            before_quad: t.before_quad,
            gt_matrix: t.gt_matrix.matrix(),
        },
    )?;
    Ok(TripletEntry {
        id: id.clone(),
        record: record.to_string(),
        instance: t.instance,
        seed,
        dir: id,
    })
}

pub fn write_triplet_manifest(out_root: &Path, config: serde_json::Value, mut records: Vec<TripletEntry>) -> Result<TripletManifest, DatioError> {
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let m = TripletManifest {
        schema_version: SCHEMA_VERSION,
        config,
        records,
    };
    write_json(&out_root.join("manifest.json"), &m)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_lines_tolerate_bom_crlf_and_commas_in_text() {
        let text = "\u{feff}1,2,10,2,10,8,1,8,1,a,b\r\n\r\n0,0,4,0,4,4,0,4,0,\r\n";
        let lines = parse_annotations(Path::new("a.txt"), text).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].text.as_deref(), Some("a,b"));
        assert!(lines[0].valid && !lines[1].valid);
        assert_eq!(lines[1].text, None);
    }

    #[test]
    fn malformed_line_reports_its_number() {
        let err = parse_annotations(Path::new("a.txt"), "0,0,4,0,4,4,0,4,1,x\n0,0,4,0,4,4,0,4,2,y\n").unwrap_err();
        assert!(matches!(err, DatioError::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn annotation_text_round_trips() {
        let lines = vec![AnnotLine {
            quad: QuadBox::from_coords([0.5, 1.25, 9.0, 1.0, 9.0, 7.0, 0.0, 7.5]).unwrap(),
            valid: true,
            text: Some("x,y".into()),
        }];
        let back = parse_annotations(Path::new("a"), &format_annotations(&lines)).unwrap();
        assert_eq!(back, lines);
    }

    #[test]
    fn icdar_lines_have_eight_integers_and_crlf() {
        let q = QuadBox::from_coords([0.4, 0.6, 10.5, 0.0, 10.0, 5.0, 0.0, 5.0]).unwrap();
        let s = format_icdar(&[(q, "hi")]);
        assert_eq!(s, "\u{feff}0,1,11,0,10,5,0,5,hi\r\n");
        let p = parse_icdar(Path::new("gt"), &s).unwrap();
        assert_eq!(p, vec![([0, 1, 11, 0, 10, 5, 0, 5], "hi".to_string())]);
        assert_eq!(parse_icdar(Path::new("gt"), "0,1,11,0,10,5,0,5,hi\n").unwrap(), p);
    }

    #[test]
    fn sources_are_canonicalized() {
        assert_eq!(source_of("ic15_0001"), "IC15");
        assert_eq!(source_of("SEGTEXT_a_b"), "SegText");
        assert_eq!(source_of("other"), "other");
    }

    #[test]
    fn one_bit_masks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::from_fn(13, 7, |x, y| (x * 3 + y) % 5 == 0);
        let p = dir.path().join("m.png");
        write_mask_png(&p, &m).unwrap();
        assert_eq!(read_mask("m", &p).unwrap(), m);
    }

    #[test]
    fn stats_table_orders_release_subsets_first() {
        let mut counts = BTreeMap::new();
        counts.insert("zzz".to_string(), SourceCount { images: 1, valid_instances: 1 });
        for (n, i, v) in RELEASE_COUNTS {
            counts.insert(n.to_string(), SourceCount { images: i, valid_instances: v });
        }
        let m = DatasetManifest {
            root: PathBuf::new(),
            records: vec![],
            counts,
        };
        let t = stats(&m);
        assert_eq!(t.rows[0].source, "IC15");
        assert_eq!(t.rows[3].source, "zzz");
        assert_eq!(t.total, (4586, 16018));
        assert!(!t.matches_release());
    }
}
