use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scenesynth::datio::{load_synth, parse_icdar, SynthManifest};

fn fixture_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/decompst")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenesynth"))
        .args(args)
        .env_remove("DECOMPST_ROOT")
        .env_remove("SCENESYNTH_ASSETS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for e in fs::read_dir(src).unwrap() {
        let e = e.unwrap();
        let to = dst.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &to);
        } else {
            fs::copy(e.path(), to).unwrap();
        }
    }
}

fn synth(out: &Path, extra: &[&str]) -> Output {
    let root = fixture_root();
    let mut args = vec!["synth", "--backgrounds", s(&root), "--out", s(out), "--image-size", "384"];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn missing_root_exits_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let out = dir.path().join("h");
    let o = run(&["gen-heatmap", "--root", s(&missing), "--out", s(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere"));
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "sed = 3\n").unwrap();
    let o = run(&["--config", s(&cfg), "stats", "--root", s(&fixture_root())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn gen_heatmap_writes_one_map_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h");
    let o = run(&["gen-heatmap", "--root", s(&fixture_root()), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for id in ["ic15_0001", "mlt19_0001", "segtext_0001"] {
        let img = image::open(out.join(format!("{id}.png"))).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (384, 288));
        assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    }
    assert!(out.join("run.toml").is_file());
}

#[test]
fn preprocessing_an_invalid_instance_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let (root, out) = (fixture_root(), dir.path().join("t"));
    let base = ["preprocess", "--root", s(&root), "--out", s(&out), "--record", "ic15_0001"];
    let o = run(&[&base[..], &["--instance", "2"]].concat());
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = run(&[&base[..], &["--instance", "0"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn zero_texts_give_empty_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let o = synth(dir.path(), &["--texts", "0", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs = load_synth(dir.path()).unwrap();
    assert_eq!(recs.len(), 3);
    for (id, rec) in &recs {
        assert!(rec.instances.is_empty());
        let gt = fs::read_to_string(dir.path().join(format!("gt/gt_{id}.txt"))).unwrap();
        assert!(parse_icdar(Path::new("gt"), &gt).unwrap().is_empty());
    }
}

#[test]
fn resume_skips_completed_ids() {
    let dir = tempfile::tempdir().unwrap();
    let o = synth(dir.path(), &["--limit", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(SynthManifest::load(dir.path()).unwrap().records.len(), 1);
    let first = load_synth(dir.path()).unwrap();
    let o = synth(dir.path(), &["--resume"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("skipping 1 completed"), "{}", stderr(&o));
    let all = load_synth(dir.path()).unwrap();
    assert_eq!(all.len(), 3);
    assert!(all.contains(&first[0]));
}

#[test]
fn same_seed_gives_identical_output_for_any_worker_count() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert_eq!(code(&synth(a.path(), &["--seed", "5", "--workers", "1"])), 0);
    assert_eq!(code(&synth(b.path(), &["--seed", "5", "--workers", "3"])), 0);
    let (ra, rb) = (load_synth(a.path()).unwrap(), load_synth(b.path()).unwrap());
    assert_eq!(ra, rb);
    for (id, _) in &ra {
        for rel in [format!("images/{id}.png"), format!("gt/gt_{id}.txt")] {
            assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel}");
        }
    }
    let c = tempfile::tempdir().unwrap();
    assert_eq!(code(&synth(c.path(), &["--seed", "6"])), 0);
    assert_ne!(load_synth(c.path()).unwrap(), ra);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let o = synth(a.path(), &["--seed", "9", "--texts", "1", "3", "--min-height", "14"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let err = stderr(&o);
    let echoed = err
        .split("# resolved config\n")
        .nth(1)
        .and_then(|rest| rest.split("# assets").next())
        .expect("config is echoed");
    let cfg = b.path().join("echoed.toml");
    fs::write(&cfg, echoed).unwrap();
    let (root, out) = (fixture_root(), b.path().join("o"));
    let o = run(&["--config", s(&cfg), "synth", "--backgrounds", s(&root), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_synth(&out).unwrap(), load_synth(a.path()).unwrap());
}

#[test]
fn validate_reports_corruption() {
    let o = run(&["validate", "--root", s(&fixture_root())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("3 records checked, 0 violations"));

    let dir = tempfile::tempdir().unwrap();
    copy_dir(&fixture_root(), dir.path());
    fs::write(dir.path().join("annots/segtext_0001.txt"), "1,2,3\n").unwrap();
    let o = run(&["validate", "--root", s(dir.path())]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stdout(&o).contains("segtext_0001"));
    let o = run(&["validate", "--root", s(dir.path()), "--lenient"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("1 violations"));
}

#[test]
fn stats_prints_fixture_counts() {
    let o = run(&["stats", "--root", s(&fixture_root()), "--json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["total"], serde_json::json!([3, 6]));
    let o = run(&["stats", "--root", s(&fixture_root())]);
    assert!(stdout(&o).contains("MLT19"));
    let o = run(&["stats", "--root", s(&fixture_root()), "--expect-release"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn root_can_come_from_the_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_scenesynth"))
        .args(["stats", "--json"])
        .env("DECOMPST_ROOT", fixture_root())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn render_patch_writes_rgba_and_reports_the_ink_box() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p.png");
    let o = run(&[
        "render-patch",
        "--text",
        "Cafe",
        "--out",
        s(&out),
        "--fill",
        "200,30,30",
        "--effects",
        r#"[{"kind":"shadow","dx":3,"dy":3,"opacity":0.5}]"#,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let img = image::open(&out).unwrap().to_rgba8();
    assert_eq!(img.dimensions(), (256, 256));
    assert!(img.pixels().any(|p| p.0[3] == 255));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["ink_quad"].as_array().unwrap().len(), 4);

    let o = run(&["render-patch", "--text", "x", "--out", s(&out), "--effects", "not json"]);
    assert_eq!(code(&o), 2);
}
