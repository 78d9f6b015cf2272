use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mminr::synth::manifest::CorpusManifest;
use mminr::synth::{read_nifti, write_nifti};
use mminr::volume::Volume;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mminr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A config small enough to train in seconds.
fn tiny_config(dir: &Path, iterations: u64) -> PathBuf {
    let cfg = serde_json::json!({
        "preset": "full",
        "corpus": { "num_subjects": 3, "seed": 5, "phantom": { "grid_shape": [16, 16, 16] } },
        "model": {
            "encoder": { "channels": 4, "blocks": 1, "layers": 1, "growth": 2, "global_conv": false },
            "attention": { "pool_factor": [4, 4, 4] },
            "decoder": { "hidden": 8, "layers": 2 },
            "pe_bands": 2,
            "intensity_skip": true
        },
        "train": {
            "batch_size": 1, "iterations": iterations, "coords_per_patch": 64, "val_every": 2, "val_patches": 1,
            "adam": { "learning_rate": 0.001 },
            "patch": { "patch_shape": [8, 8, 8], "foreground_threshold": 0.0 }
        },
        "paths": { "corpus_dir": dir.join("corpus"), "run_dir": dir.join("run") }
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn make_phantom_default_split_and_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({ "corpus": { "phantom": { "grid_shape": [16, 16, 16] } } });
    let cfg_path = dir.path().join("c.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["make-phantom", "--config", p(&cfg_path), "--out", p(out)]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let m = CorpusManifest::load(a.join("manifest.json")).unwrap();
    assert_eq!(m.subjects.len(), 12);
    let counts: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|s| m.subjects.iter().filter(|r| serde_json::to_value(r.split).unwrap() == *s).count())
        .collect();
    assert_eq!(counts, [8, 2, 2]);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn one_subject_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["make-phantom", "--num-subjects", "1", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("at least 3"), "{}", text(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    fs::write(&path, r#"{ "train": { "iterationz": 3 } }"#).unwrap();
    let o = run(&["make-phantom", "--config", p(&path), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("iterationz"), "{}", text(&o));
}

#[test]
fn bad_flags_exit_2() {
    assert_eq!(run(&["train", "--preset", "everything"]).status.code(), Some(2));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn train_without_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 2);
    let o = run(&["train", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("make-phantom"), "{}", text(&o));
}

#[test]
fn shipped_schemas_match_generated() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas");
    for (kind, file) in [("run-config", "run_config.schema.json"), ("manifest", "manifest.schema.json")] {
        let o = run(&["schema", kind]);
        assert!(o.status.success());
        let shipped = fs::read_to_string(root.join(file)).unwrap();
        assert_eq!(String::from_utf8(o.stdout).unwrap(), shipped, "{file} is stale; regenerate with `mminr schema {kind}`");
    }
}

#[test]
fn train_superres_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 4);
    let o = run(&["make-phantom", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", text(&o));
    let o = run(&["train", "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", text(&o));
    let out = text(&o);
    assert!(out.contains("kd") && out.contains("val psnr"), "{out}");
    let run_dir = dir.path().join("run");
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    // Resume with a longer schedule appends to the log.
    let o = run(&["train", "--config", p(&cfg), "--iterations", "6", "--resume"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("resuming at iteration 4"));
    assert_eq!(fs::read_to_string(run_dir.join("metrics.csv")).unwrap().lines().count(), 1 + 6);

    // LR inputs from a corpus subject.
    let corpus = dir.path().join("corpus");
    let lr = dir.path().join("lr");
    for m in ["t1", "t2"] {
        let o = run(&[
            "degrade", "--config", p(&cfg), "--modality", m,
            "--input", p(&corpus.join(format!("sub-000_{m}.nii.gz"))),
            "--out", p(&lr.join(format!("sub-000_{m}.nii.gz"))),
        ]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let t1 = lr.join("sub-000_t1.nii.gz");
    let t2 = lr.join("sub-000_t2.nii.gz");
    assert_eq!(read_nifti(&t1).unwrap().shape(), [16, 16, 8]);
    let ckpt = run_dir.join("last.ckpt");

    let sr = dir.path().join("sr");
    let o = run(&["superres", "--checkpoint", p(&ckpt), "--t1", p(&t1), "--t2", p(&t2), "--scale", "1,1,2", "--out", p(&sr), "--seg"]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["t1.nii.gz", "t2.nii.gz", "seg.nii.gz"] {
        assert!(sr.join(f).exists(), "{f}");
    }
    assert_eq!(read_nifti(sr.join("t1.nii.gz")).unwrap().shape(), [16, 16, 16]);

    let o = run(&["superres", "--checkpoint", p(&ckpt), "--t1", p(&t1), "--t2", p(&t2), "--shape", "9x7x5", "--out", p(&sr)]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(read_nifti(sr.join("t2.nii.gz")).unwrap().shape(), [9, 7, 5]);

    // Identity request reports PSNR against the input.
    let o = run(&["superres", "--checkpoint", p(&ckpt), "--t1", p(&t1), "--t2", p(&t1), "--scale", "1", "--out", p(&sr)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("psnr vs input"), "{}", text(&o));

    // A different preset than the one trained is a hash mismatch.
    let o = run(&["superres", "--checkpoint", p(&ckpt), "--t1", p(&t1), "--t2", p(&t2), "--scale", "2", "--out", p(&sr), "--preset", "baseline"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("hash mismatch"), "{}", text(&o));
    let o = run(&["superres", "--checkpoint", p(&ckpt), "--t1", p(&t1), "--t2", p(&t2), "--scale", "2", "--out", p(&sr), "--config", p(&cfg)]);
    assert!(o.status.success(), "{}", text(&o));

    // Evaluate the model's T1 against ground truth with the trilinear row.
    let (pred, gt, lrd) = (dir.path().join("pred"), dir.path().join("gt"), dir.path().join("lrd"));
    let o = run(&["superres", "--checkpoint", p(&ckpt), "--t1", p(&t1), "--t2", p(&t2), "--scale", "1,1,2", "--out", p(&pred)]);
    assert!(o.status.success());
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&lrd).unwrap();
    fs::copy(corpus.join("sub-000_t1.nii.gz"), gt.join("t1.nii.gz")).unwrap();
    fs::copy(corpus.join("sub-000_t2.nii.gz"), gt.join("t2.nii.gz")).unwrap();
    fs::copy(&t1, lrd.join("t1.nii.gz")).unwrap();
    let ev = dir.path().join("eval");
    let o = run(&["evaluate", "--pred", p(&pred), "--gt", p(&gt), "--lr", p(&lrd), "--out", p(&ev)]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(ev.join("image_metrics.csv")).unwrap();
    assert!(csv.contains("t1,model,") && csv.contains("t1,trilinear,") && csv.contains("t2,model,"), "{csv}");
    assert!(ev.join("t1.png").exists() && ev.join("report.json").exists());
    let png = image::open(ev.join("t1.png")).unwrap();
    // Model, trilinear and ground truth columns of 16 * 8 pixels plus gaps.
    assert_eq!((png.width(), png.height()), (3 * 130 + 2, 3 * 130 + 2));
}

#[test]
fn evaluate_identity_hits_caps() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    let v = Volume::from_fn([12, 12, 12], |x, y, z| ((x * 7 + y * 3 + z) % 11) as f32).unwrap();
    for d in [&pred, &gt] {
        write_nifti(d.join("a_t1.nii.gz"), &v).unwrap();
        write_nifti(d.join("a_t2.nii.gz"), &v).unwrap();
    }
    let ev = dir.path().join("eval");
    let o = run(&["evaluate", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&ev)]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(ev.join("image_metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[2].parse::<f64>().unwrap(), 100.0, "{line}");
        assert!((cells[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-9, "{line}");
    }
}

#[test]
fn evaluate_lists_missing_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    let v = Volume::filled([8, 8, 8], 1.0).unwrap();
    write_nifti(pred.join("present.nii.gz"), &v).unwrap();
    write_nifti(pred.join("absent_t2.nii.gz"), &v).unwrap();
    write_nifti(gt.join("present.nii.gz"), &v).unwrap();
    let o = run(&["evaluate", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&dir.path().join("e"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("absent_t2"), "{}", text(&o));
}

#[test]
fn guide_config_example_parses() {
    let guide = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../book/src/cli.md")).unwrap();
    let start = guide.find("```json\n").unwrap() + "```json\n".len();
    let json = &guide[start..start + guide[start..].find("```").unwrap()];
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, json).unwrap();
    let o = run(&["make-phantom", "--config", p(&cfg), "--out", p(&dir.path().join("c")), "--num-subjects", "3"]);
    assert!(o.status.success(), "{}", text(&o));
}
