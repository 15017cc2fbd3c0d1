use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use image::{Rgba, RgbaImage};
use rayon::prelude::*;

use scenesynth::datio::{
    load_record, scan_decompst, stats, write_triplet, write_triplet_manifest, DatasetManifest, LoadMode, RecordRef,
    SynthFormat, SynthWriter,
};
use scenesynth::heatmap::{generate_gt, save_heatmap_png, HeatmapError, HeatmapParams};
use scenesynth::pipeline::{
    image_seed, resized_dims, synthesize, Assets, Backends, HeatmapFileLocation, LabelMap, PassthroughColor,
};
use scenesynth::preprocess::build_triplet;
use scenesynth::raster::Raster;
use scenesynth::seeding::{derive_seed, rng_from};
use scenesynth::textrender::{
    apply_effects, ink_quad, render_patch, Effect, FontStore, Lexicon, RenderSpec, TextureSet, BUNDLED_FONT_ID,
};

use crate::config::RunConfig;
use crate::error::Failure;
use crate::{Cli, Command, DatasetArgs, GenHeatmapArgs, PreprocessArgs, RenderPatchArgs, StatsArgs, SynthArgs};

/// Asset root: `fonts/` (TTF/OTF), `lexicon.txt` (one word per line) and
/// `textures/` (images). Missing parts fall back to the bundled font, a
/// small built-in word list and procedural textures.
pub const ASSETS_ENV: &str = "SCENESYNTH_ASSETS";

const DEFAULT_WORDS: &str = "OPEN\nCafe\nEXIT\nsale\nHotel\nBUS\nnorth\nMarket\nPARK\nTaxi\nbread\nSTOP\nPharmacy\nstreet\nBakery\nHOTEL\nwelcome\nBANK\n";

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    match cli.command {
        Command::GenHeatmap(a) => {
            if a.exact {
                cfg.heatmap.stride = 1;
                cfg.heatmap.region_cap = 0;
            }
            if let Some(s) = a.stride {
                cfg.heatmap.stride = s;
            }
            gen_heatmap(&cfg.resolve()?, &a)
        }
        Command::Preprocess(a) => preprocess(&cfg.resolve()?, &a),
        Command::Synth(a) => {
            if let Some(t) = &a.texts {
                cfg.pipeline.texts_per_image = [t[0], t[1]];
            }
            if let Some(v) = a.image_size {
                cfg.pipeline.image_size = v;
            }
            if let Some(v) = a.overlap {
                cfg.pipeline.overlap_required = v;
            }
            if let Some(v) = a.min_height {
                cfg.pipeline.min_text_height_px = v;
            }
            synth(&cfg.resolve()?, &a)
        }
        Command::Validate(a) => validate(&cfg.resolve()?, &a),
        Command::Stats(a) => cmd_stats(&cfg.resolve()?, &a),
        Command::RenderPatch(a) => render(&cfg.resolve()?, &a),
    }
}

fn echo(cfg: &RunConfig) {
    eprintln!("# resolved config\n{}", cfg.to_toml());
}

fn pool(cfg: &RunConfig) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Failure::config(format!("worker pool: {e}")))
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))
}

fn write_run_config(dir: &Path, cfg: &RunConfig) -> Result<(), Failure> {
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg.to_toml()).map_err(|e| Failure::io(format!("{}: {e}", p.display())))
}

fn scan(data: &DatasetArgs) -> Result<DatasetManifest, Failure> {
    let mode = if data.lenient { LoadMode::Lenient } else { LoadMode::Strict };
    let (m, skipped) = scan_decompst(&data.root, mode)?;
    for e in &skipped {
        eprintln!("skipped: {e}");
    }
    Ok(m)
}

/// Runs `f` on every record in parallel. In strict mode the first failure
/// (in id order) is returned; in lenient mode failures are printed.
fn for_records<F>(cfg: &RunConfig, records: &[RecordRef], lenient: bool, f: F) -> Result<usize, Failure>
where
    F: Fn(&RecordRef) -> Result<(), Failure> + Sync,
{
    let results: Vec<Result<(), Failure>> = pool(cfg)?.install(|| records.par_iter().map(&f).collect());
    let mut ok = 0;
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(()) => ok += 1,
            Err(e) if lenient => eprintln!("{}: {e}", r.id),
            Err(e) => return Err(e),
        }
    }
    Ok(ok)
}

fn gen_heatmap(cfg: &RunConfig, a: &GenHeatmapArgs) -> Result<(), Failure> {
    echo(cfg);
    let manifest = scan(&a.data)?;
    create_out(&a.out)?;
    write_run_config(&a.out, cfg)?;
    let params: &HeatmapParams = &cfg.heatmap;
    let written = for_records(cfg, &manifest.records, a.data.lenient, |r| {
        let rec = load_record(r)?;
        match generate_gt(&rec, params) {
            Ok(map) => Ok(save_heatmap_png(&a.out.join(format!("{}.png", r.id)), &map, Some(params))?),
            Err(HeatmapError::NoValidInstances) => {
                log::warn!("{}: no valid instance, skipped", r.id);
                Ok(())
            }
            Err(e) => Err(Failure::validation(format!("{}: {e}", r.id))),
        }
    })?;
    eprintln!("heatmaps: {written}/{} records", manifest.records.len());
    Ok(())
}

fn preprocess(cfg: &RunConfig, a: &PreprocessArgs) -> Result<(), Failure> {
    echo(cfg);
    let manifest = scan(&a.data)?;
    let records: Vec<RecordRef> = match &a.record {
        Some(id) => {
            let r = manifest
                .records
                .iter()
                .find(|r| &r.id == id)
                .ok_or_else(|| Failure::validation(format!("no record {id:?}")))?;
            vec![r.clone()]
        }
        None => manifest.records.clone(),
    };
    create_out(&a.out)?;
    let entries = Mutex::new(Vec::new());
    for_records(cfg, &records, a.data.lenient, |r| {
        let rec = load_record(r)?;
        let targets: Vec<usize> = match a.instance {
            Some(k) => vec![k],
            None => rec.valid_instances().map(|(k, _)| k).collect(),
        };
        for k in targets {
            let t = build_triplet(&rec, k, &cfg.preprocess).map_err(|e| Failure::validation(format!("{} instance {k}: {e}", r.id)))?;
            let seed = derive_seed(cfg.preprocess.jitter.seed, &rec.id, k as u64);
            let entry = write_triplet(&a.out, &rec.id, seed, &t)?;
            entries.lock().unwrap().push(entry);
        }
        Ok(())
    })?;
    let m = write_triplet_manifest(&a.out, cfg.to_json(), entries.into_inner().unwrap())?;
    eprintln!("triplets: {}", m.records.len());
    Ok(())
}

fn load_assets() -> Result<(Assets, serde_json::Value), Failure> {
    let root = std::env::var_os(ASSETS_ENV).map(PathBuf::from);
    let fonts_dir = root.as_ref().map(|r| r.join("fonts")).filter(|p| p.is_dir());
    let fonts = match &fonts_dir {
        Some(d) => FontStore::load_dir(d)?,
        None => FontStore::bundled(),
    };
    if fonts.is_empty() {
        return Err(Failure::config("no usable fonts in the asset root"));
    }
    let lex_path = root.as_ref().map(|r| r.join("lexicon.txt")).filter(|p| p.is_file());
    let lexicon = match &lex_path {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::parse(DEFAULT_WORDS),
    };
    let tex_dir = root.as_ref().map(|r| r.join("textures")).filter(|p| p.is_dir());
    let textures = match &tex_dir {
        Some(d) => TextureSet::load_dir(d)?,
        None => TextureSet::default(),
    };
    let summary = serde_json::json!({
        "root": root.as_ref().map(|p| p.display().to_string()),
        "fonts": fonts.ids().collect::<Vec<_>>(),
        "lexicon_words": lexicon.words.len(),
        "textures": textures.len(),
    });
    Ok((
        Assets {
            fonts,
            lexicon,
            textures,
        },
        summary,
    ))
}

const BG_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn list_backgrounds(dir: &Path) -> Result<Vec<(String, PathBuf)>, Failure> {
    let dir = if dir.join("erased").is_dir() { dir.join("erased") } else { dir.to_path_buf() };
    let rd = std::fs::read_dir(&dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if ext.is_some_and(|e| BG_EXTS.contains(&e.as_str())) {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), p.clone()));
            }
        }
    }
    out.sort();
    if out.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Failure::validation(format!("duplicate background ids in {}", dir.display())));
    }
    Ok(out)
}

/// Label map from `<dir>/<id>.png` with RGB packed into one integer,
/// nearest-neighbour resized to `(w, h)`.
fn load_labels(dir: &Path, id: &str, w: u32, h: u32) -> Result<LabelMap, Failure> {
    let p = dir.join(format!("{id}.png"));
    let img = image::open(&p)
        .map_err(|e| Failure::io(format!("{}: {e}", p.display())))?
        .to_rgb8();
    let (lw, lh) = img.dimensions();
    Ok(Raster::from_fn(w as usize, h as usize, 1, |x, y, _| {
        let sx = ((x as u64 * lw as u64) / w as u64) as u32;
        let sy = ((y as u64 * lh as u64) / h as u64) as u32;
        let [r, g, b] = img.get_pixel(sx.min(lw - 1), sy.min(lh - 1)).0;
        (r as u32) << 16 | (g as u32) << 8 | b as u32
    }))
}

fn synth(cfg: &RunConfig, a: &SynthArgs) -> Result<(), Failure> {
    echo(cfg);
    let (assets, asset_summary) = load_assets()?;
    eprintln!("# assets {asset_summary}");
    let mut backends = Backends::reference(cfg.pipeline.heatmap.clone(), cfg.pipeline.harmonize.clone());
    if let Some(d) = &a.heatmaps {
        backends.location = Arc::new(HeatmapFileLocation { dir: d.clone() });
    }
    if a.no_harmonize {
        backends.color = Arc::new(PassthroughColor);
    }
    let mut all = list_backgrounds(&a.backgrounds)?;
    if let Some(n) = a.limit {
        all.truncate(n);
    }
    let echo_json = serde_json::json!({
        "run": cfg.to_json(),
        "assets": asset_summary,
        "backends": format!("{backends:?}"),
    });
    let format = SynthFormat {
        native: true,
        icdar: !a.no_icdar,
    };
    let writer = SynthWriter::create(&a.out, format, echo_json, a.resume)?;
    let todo: Vec<&(String, PathBuf)> = all.iter().filter(|(id, _)| !writer.contains(id)).collect();
    if todo.len() < all.len() {
        eprintln!("resume: skipping {} completed ids", all.len() - todo.len());
    }

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install interrupt handler: {e}");
        }
    }

    let started = Instant::now();
    let results: Vec<Result<bool, Failure>> = pool(cfg)?.install(|| {
        todo.par_iter()
            .map(|(id, path)| {
                if stop.load(Ordering::SeqCst) {
                    return Ok(false);
                }
                let bg = image::open(path)
                    .map_err(|e| Failure::io(format!("{}: {e}", path.display())))?
                    .to_rgb8();
                let labels = match &a.semantic {
                    Some(d) => {
                        let (w, h) = resized_dims(bg.width(), bg.height(), cfg.pipeline.image_size);
                        Some(load_labels(d, id, w, h)?)
                    }
                    None => None,
                };
                let seed = image_seed(cfg.seed, id);
                let rec = synthesize(id, &bg, labels.as_ref(), &cfg.pipeline, &backends, &assets, seed)?;
                writer.write(id, &rec)?;
                log::info!("{id}: seed {seed}, {} instances", rec.instances.len());
                Ok(true)
            })
            .collect()
    });
    let elapsed = started.elapsed().as_secs_f64();
    // the manifest lists every completed record even when something failed
    writer.flush()?;
    let mut done = 0usize;
    for r in results {
        if r? {
            done += 1;
        }
    }
    let rate = if elapsed > 0.0 { done as f64 / elapsed } else { 0.0 };
    eprintln!("synthesized {done} images in {elapsed:.2} s ({rate:.2} images/s, {} workers)", rayon_workers(cfg));
    if stop.load(Ordering::SeqCst) {
        return Err(Failure::Interrupted);
    }
    Ok(())
}

fn rayon_workers(cfg: &RunConfig) -> usize {
    if cfg.workers == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    } else {
        cfg.workers
    }
}

fn validate(cfg: &RunConfig, a: &DatasetArgs) -> Result<(), Failure> {
    echo(cfg);
    let (manifest, mut problems) = scan_decompst(&a.root, LoadMode::Lenient)?;
    let indexed = manifest.records.len() + problems.len();
    let loaded: Vec<_> = pool(cfg)?.install(|| manifest.records.par_iter().map(load_record).collect());
    problems.extend(loaded.into_iter().filter_map(Result::err));
    for p in &problems {
        println!("violation: {p}");
    }
    println!("{indexed} records checked, {} violations", problems.len());
    if !problems.is_empty() && !a.lenient {
        return Err(Failure::validation(format!("{} violations", problems.len())));
    }
    Ok(())
}

fn cmd_stats(cfg: &RunConfig, a: &StatsArgs) -> Result<(), Failure> {
    echo(cfg);
    let manifest = scan(&a.data)?;
    let table = stats(&manifest);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&table).expect("table serializes"));
    } else {
        print!("{}", table.render());
    }
    if a.expect_release && !table.matches_release() {
        return Err(Failure::validation("counts differ from the DecompST release"));
    }
    Ok(())
}

fn render(cfg: &RunConfig, a: &RenderPatchArgs) -> Result<(), Failure> {
    echo(cfg);
    let (assets, _) = load_assets()?;
    let effects: Vec<Effect> = match &a.effects {
        Some(s) => serde_json::from_str(s).map_err(|e| Failure::config(format!("--effects: {e}")))?,
        None => vec![],
    };
    let spec = RenderSpec {
        text: a.text.clone(),
        font_id: a.font.clone().unwrap_or_else(|| {
            if assets.fonts.get(BUNDLED_FONT_ID).is_some() {
                BUNDLED_FONT_ID.to_string()
            } else {
                assets.fonts.ids().next().unwrap_or_default().to_string()
            }
        }),
        fill: a.fill,
        size_px: a.size,
        effects: effects.clone(),
    };
    let patch = render_patch(&assets.fonts, &spec)?;
    let quad = ink_quad(&patch);
    let mut rng = rng_from(derive_seed(cfg.seed, &a.text, 0));
    let patch = apply_effects(&patch, &effects, &assets.textures, &mut rng);
    let img = RgbaImage::from_fn(patch.rgb.width(), patch.rgb.height(), |x, y| {
        let [r, g, b] = patch.rgb.get_pixel(x, y).0;
        let al = patch.alpha.get(x as usize, y as usize, 0);
        Rgba([r, g, b, (al.clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(&a.out).map_err(|e| Failure::io(format!("{}: {e}", a.out.display())))?;
    println!(
        "{}",
        serde_json::json!({ "spec": spec, "ink_quad": quad, "out": a.out.display().to_string() })
    );
    Ok(())
}
