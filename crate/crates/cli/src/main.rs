use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mminr::inference::{reconstruct, scaled_shape, DEFAULT_MEMORY_BUDGET, DEFAULT_TILE};
use mminr::metrics::{score_modality, score_segmentation, MetricReport, ModalityScores};
use mminr::model::Preset;
use mminr::synth::manifest::{load_subject, write_corpus, CorpusManifest};
use mminr::synth::nifti::{nifti_stem, read_nifti_labels, write_nifti_labels};
use mminr::synth::{degrade, read_nifti, write_nifti, Split, Subject};
use mminr::train::checkpoint::Checkpoint;
use mminr::train::{calibrate_weights, model_from_checkpoint, LogRow, Trainer, ValScores, LAST_CHECKPOINT};
use mminr::volume::{resize_trilinear, Modality, Shape3, Volume};
use mminr::Error;

mod config;
mod panels;

use config::{schema_json, usage, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "mminr", version, about = "Multi-modal implicit super-resolution of anisotropic MRI volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus with a train/val/test manifest.
    MakePhantom(MakePhantomArgs),
    /// Degrade an HR volume along one modality's acquisition axis.
    Degrade(DegradeArgs),
    /// Train a model on the corpus named in the config.
    Train(TrainArgs),
    /// Reconstruct both modalities from LR inputs on any target grid.
    Superres(SuperresArgs),
    /// Score predictions against ground truth and render slice panels.
    Evaluate(EvaluateArgs),
    /// Train every ablation preset for several seeds and tabulate the results.
    Ablate(AblateArgs),
    /// Print a JSON schema for a file format.
    Schema {
        #[arg(value_enum)]
        which: SchemaKind,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemaKind {
    RunConfig,
    Manifest,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    T1,
    T2,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::T1 => Modality::T1,
            ModalityArg::T2 => Modality::T2,
        }
    }
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct MakePhantomArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory (overrides `paths.corpus_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    num_subjects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DegradeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, value_enum)]
    modality: ModalityArg,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `paths.run_dir`).
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from `last.ckpt` in the run directory.
    #[arg(long)]
    resume: bool,
    /// Rescale the enabled auxiliary weights so each term starts at this
    /// fraction of L_SR, measured on one batch of the fresh model.
    #[arg(long)]
    calibrate: Option<f64>,
}

#[derive(Args)]
struct SuperresArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    t1: PathBuf,
    #[arg(long)]
    t2: PathBuf,
    /// Scale relative to the T1 input: one factor or `sx,sy,sz`.
    #[arg(long, conflicts_with = "shape", value_parser = parse_scale)]
    scale: Option<[f64; 3]>,
    /// Explicit output extents, e.g. `57x33x41`.
    #[arg(long, value_parser = parse_shape)]
    shape: Option<Shape3>,
    #[arg(long, short)]
    out: PathBuf,
    /// Also write the segmentation label map (needs a model with SEL).
    #[arg(long)]
    seg: bool,
    #[arg(long, default_value_t = DEFAULT_TILE)]
    tile: usize,
    #[arg(long, default_value_t = DEFAULT_MEMORY_BUDGET >> 20)]
    memory_mib: usize,
    /// Refuse to run unless this config matches the checkpoint's.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Refuse to run unless the checkpoint was trained with this preset.
    #[arg(long, value_parser = parse_preset)]
    preset: Option<Preset>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted volumes (`<stem>.nii.gz`).
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth with the same stems. Stems ending in `seg` are label maps.
    #[arg(long)]
    gt: PathBuf,
    /// LR inputs with the same stems, scored and plotted as the trilinear row.
    #[arg(long)]
    lr: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    num_classes: u8,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', value_parser = parse_preset, default_value = "baseline,mmf,mmf-kd,full")]
    presets: Vec<Preset>,
    /// Output directory (overrides `paths.run_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    /// As for `train`.
    #[arg(long)]
    calibrate: Option<f64>,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scale(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [a] => Ok([a; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err("expected one factor or three comma-separated factors".into()),
    }
}

fn parse_shape(s: &str) -> Result<Shape3, String> {
    let v: Vec<usize> = s.split(['x', ',']).map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] if a > 0 && b > 0 && c > 0 => Ok([a, b, c]),
        _ => Err("expected three positive extents such as 57x33x41".into()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakePhantom(a) => make_phantom(a),
        Command::Degrade(a) => degrade_cmd(a),
        Command::Train(a) => train(a),
        Command::Superres(a) => superres(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Ablate(a) => ablate(a),
        Command::Schema { which } => {
            print!(
                "{}",
                match which {
                    SchemaKind::RunConfig => schema_json::<RunConfig>(),
                    SchemaKind::Manifest => schema_json::<CorpusManifest>(),
                }
            );
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for invocation and validation problems, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::ConfigHashMismatch { .. } | Error::FileNotFound(_)) => 2,
        _ => 1,
    }
}

fn make_phantom(a: MakePhantomArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.config.as_deref())?;
    if let Some(n) = a.num_subjects {
        cfg.corpus.num_subjects = n;
    }
    if let Some(s) = a.seed {
        cfg.corpus.seed = s;
    }
    let dir = a.out.unwrap_or(cfg.paths.corpus_dir);
    let m = write_corpus(&dir, &cfg.corpus).with_context(|| format!("writing corpus to {}", dir.display()))?;
    let count = |s| m.split(s).count();
    println!(
        "wrote {} subjects to {} (train {}, val {}, test {})",
        m.subjects.len(),
        dir.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn degrade_cmd(a: DegradeArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.config.as_deref())?;
    let hr = read_nifti(&a.input)?;
    let lr = degrade(&hr, &cfg.degradation, a.modality.into())?;
    write_nifti(&a.out, &lr)?;
    println!("{:?} -> {:?}", hr.shape(), lr.shape());
    Ok(())
}

fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<Subject>> {
    let m = CorpusManifest::load(manifest_path).map_err(|e| match e {
        Error::FileNotFound(p) => usage(format!("manifest {} not found; run `mminr make-phantom` first", p.display())),
        e => e.into(),
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    m.split(split).map(|r| load_subject(dir, r).with_context(|| format!("loading subject {}", r.id))).collect()
}

fn print_row(row: &LogRow) {
    let Some(v) = row.val else { return };
    let t = &row.loss.terms;
    println!(
        "iter {:>6}  total {:.5}  sr {:.5}  seg {:.5}  kd {:.5}  t2self {:.5}  cmfa {:.5}  fdl {:.5}  val psnr {:.2}/{:.2}  ssim {:.4}/{:.4}",
        row.iteration, row.loss.total, t.sr, t.seg, t.kd, t.t2self, t.cmfa, t.fdl, v.psnr[0], v.psnr[1], v.ssim[0], v.ssim[1]
    );
}

fn run_training(cfg: &RunConfig, resume: bool, calibrate: Option<f64>) -> Result<(Trainer, Vec<LogRow>)> {
    let mut setup = cfg.setup();
    setup.validate()?;
    let train = load_split(&cfg.manifest_path(), Split::Train)?;
    let val = load_split(&cfg.manifest_path(), Split::Val)?;
    let mut cfg = cfg.clone();
    if let Some(ratio) = calibrate {
        setup.weights = calibrate_weights(&setup, &train, ratio)?;
        cfg.weights = setup.weights;
        let w = &setup.weights;
        println!(
            "calibrated weights: seg {:.3e}  kd {:.3e}  t2self {:.3e}  cmfa {:.3e}  fdl {:.3e}",
            w.lambda_seg, w.lambda_kd, w.lambda_t2self, w.lambda_cmfa, w.lambda_fdl
        );
    }
    let last = cfg.paths.run_dir.join(LAST_CHECKPOINT);
    let mut trainer = if resume && last.exists() {
        let t = Trainer::from_checkpoint(Checkpoint::load(&last)?, Some(setup))?;
        println!("resuming at iteration {}", t.iteration);
        t
    } else {
        Trainer::new(setup)?
    };
    fs::create_dir_all(&cfg.paths.run_dir)?;
    fs::write(cfg.paths.run_dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    println!("{} parameters, config hash {}", trainer.model.param_count(), trainer.setup.config_hash());
    let rows = trainer.fit(&train, &val, print_row)?;
    Ok((trainer, rows))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.config.as_deref())?;
    if a.preset.is_some() {
        cfg.preset = a.preset;
    }
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(d) = a.run_dir {
        cfg.paths.run_dir = d;
    }
    let (trainer, _) = run_training(&cfg, a.resume, a.calibrate)?;
    println!("done: {} iterations, best val psnr {:?}, outputs in {}", trainer.iteration, trainer.best_val_psnr, cfg.paths.run_dir.display());
    Ok(())
}

fn superres(a: SuperresArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    if a.config.is_some() || a.preset.is_some() {
        let mut expected = match &a.config {
            Some(p) => RunConfig::load(p)?.setup(),
            None => ckpt.setup.clone(),
        };
        if let Some(p) = a.preset {
            expected.weights.toggles = p.toggles();
        }
        let (have, want) = (ckpt.setup.config_hash(), expected.config_hash());
        if have != want {
            return Err(Error::ConfigHashMismatch { expected: have, found: want }.into());
        }
    }
    let model = model_from_checkpoint(&ckpt)?;
    let lr1 = read_nifti(&a.t1)?;
    let lr2 = read_nifti(&a.t2)?;
    let shape = match (a.shape, a.scale) {
        (Some(s), _) => s,
        (None, Some(f)) => scaled_shape(lr1.shape(), f)?,
        (None, None) => return Err(usage("give --scale or --shape")),
    };
    if a.seg && model.seg.is_none() {
        return Err(usage("--seg needs a checkpoint trained with the SEL component"));
    }
    let rec = reconstruct(&model, &lr1, &lr2, shape, a.tile, a.memory_mib << 20)?;
    fs::create_dir_all(&a.out)?;
    for (m, input) in Modality::BOTH.iter().zip([&lr1, &lr2]) {
        let v = rec.volume(*m);
        let path = a.out.join(format!("{}.nii.gz", m.name()));
        write_nifti(&path, v)?;
        print!("{} {:?} -> {}", m.name(), input.shape(), path.display());
        if input.shape() == shape {
            print!("  psnr vs input {:.2}", mminr::metrics::psnr(v, input, None)?);
        }
        println!();
    }
    if a.seg {
        let seg = rec.seg.as_ref().expect("model has SEL");
        let path = a.out.join("seg.nii.gz");
        write_nifti_labels(&path, seg, rec.volumes[0].spacing())?;
        println!("seg -> {}", path.display());
    }
    Ok(())
}

fn nifti_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| usage(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if let Some(stem) = nifti_stem(&path) {
            out.insert(stem, path);
        }
    }
    Ok(out)
}

fn is_label_stem(stem: &str) -> bool {
    stem.ends_with("seg")
}

#[derive(serde::Serialize)]
struct EvalRow {
    stem: String,
    method: &'static str,
    #[serde(flatten)]
    scores: ModalityScores,
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let pred = nifti_stems(&a.pred)?;
    let gt = nifti_stems(&a.gt)?;
    let lr = a.lr.as_deref().map(nifti_stems).transpose()?;
    let missing: Vec<&str> = pred.keys().filter(|s| !gt.contains_key(*s)).map(String::as_str).collect();
    if !missing.is_empty() {
        return Err(usage(format!("no ground truth in {} for: {}", a.gt.display(), missing.join(", "))));
    }
    if pred.is_empty() {
        return Err(usage(format!("no NIfTI volumes in {}", a.pred.display())));
    }
    fs::create_dir_all(&a.out)?;
    let mut images = Vec::new();
    let mut reports = Vec::new();
    for (stem, p) in &pred {
        if is_label_stem(stem) {
            let (pm, gm) = (read_nifti_labels(p)?, read_nifti_labels(&gt[stem])?);
            let spacing = read_nifti(&gt[stem]).map(|v| v.spacing()).unwrap_or([1.0; 3]);
            let classes = score_segmentation(&pm, &gm, a.num_classes, spacing).with_context(|| format!("scoring {stem}"))?;
            reports.push(MetricReport { subject: stem.clone(), classes, ..MetricReport::default() });
            continue;
        }
        let (pv, gv) = (read_nifti(p)?, read_nifti(&gt[stem])?);
        let scores = score_modality(&pv, &gv, None).with_context(|| format!("scoring {stem}"))?;
        let mut report = MetricReport { subject: stem.clone(), ..MetricReport::default() };
        if stem.ends_with("t2") {
            report.t2 = Some(scores.clone());
        } else {
            report.t1 = Some(scores.clone());
        }
        reports.push(report);
        images.push(EvalRow { stem: stem.clone(), method: "model", scores });
        let mut columns = vec![pv];
        if let Some(lr_path) = lr.as_ref().and_then(|l| l.get(stem)) {
            let up = resize_trilinear(&read_nifti(lr_path)?.to_feature_volume(), gv.shape())?;
            let tri = Volume::with_geometry(gv.shape(), gv.spacing(), gv.origin(), up.data().to_vec())?;
            images.push(EvalRow { stem: stem.clone(), method: "trilinear", scores: score_modality(&tri, &gv, None)? });
            columns.push(tri);
        }
        columns.push(gv);
        panels::write(&a.out.join(format!("{stem}.png")), &columns.iter().collect::<Vec<_>>())?;
    }
    let mut csv = fs::File::create(a.out.join("image_metrics.csv"))?;
    writeln!(csv, "stem,method,psnr,ssim")?;
    for r in &images {
        writeln!(csv, "{},{},{},{}", r.stem, r.method, r.scores.psnr, r.scores.ssim)?;
        println!("{:<24} {:<10} psnr {:>7.3}  ssim {:.5}", r.stem, r.method, r.scores.psnr, r.scores.ssim);
    }
    let seg_reports: Vec<&MetricReport> = reports.iter().filter(|r| !r.classes.is_empty()).collect();
    if !seg_reports.is_empty() {
        let mut csv = fs::File::create(a.out.join("seg_metrics.csv"))?;
        writeln!(csv, "stem,class,dice,hd95")?;
        for r in seg_reports {
            for c in &r.classes {
                let hd = c.hd95.map(|h| h.to_string()).unwrap_or_default();
                writeln!(csv, "{},{},{},{}", r.subject, c.class, c.dice, hd)?;
                println!("{:<24} class {}   dice {:.4}  hd95 {}", r.subject, c.class, c.dice, if hd.is_empty() { "-" } else { &hd });
            }
        }
    }
    let json = serde_json::json!({ "images": images, "reports": reports });
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&json)? + "\n")?;
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base = RunConfig::load_or_default(a.config.config.as_deref())?;
    let root = a.out.unwrap_or_else(|| base.paths.run_dir.clone());
    fs::create_dir_all(&root)?;
    let mut csv = fs::File::create(root.join("ablation.csv"))?;
    writeln!(csv, "preset,seed,psnr_t1,psnr_t2,ssim_t1,ssim_t2,mean_psnr")?;
    let mut summary: Vec<(Preset, Vec<ValScores>)> = Vec::new();
    for &preset in &a.presets {
        let mut scores = Vec::new();
        for &seed in &a.seeds {
            let mut cfg = base.clone();
            cfg.preset = Some(preset);
            cfg.train.seed = seed;
            cfg.model.seed = seed;
            if let Some(n) = a.iterations {
                cfg.train.iterations = n;
            }
            cfg.paths.run_dir = root.join(preset.name()).join(format!("seed-{seed}"));
            println!("== {preset} seed {seed}");
            let (_, rows) = run_training(&cfg, false, a.calibrate)?;
            let v = rows.iter().rev().find_map(|r| r.val).ok_or_else(|| usage("training produced no validation rows"))?;
            writeln!(csv, "{preset},{seed},{},{},{},{},{}", v.psnr[0], v.psnr[1], v.ssim[0], v.ssim[1], v.mean_psnr())?;
            csv.flush()?;
            scores.push(v);
        }
        summary.push((preset, scores));
    }
    let mut out = fs::File::create(root.join("summary.csv"))?;
    writeln!(out, "preset,runs,psnr_t1,psnr_t2,mean_psnr")?;
    println!("{:<10} {:>8} {:>8} {:>8}", "preset", "T1", "T2", "mean");
    for (p, s) in &summary {
        let n = s.len() as f64;
        let t1 = s.iter().map(|v| v.psnr[0]).sum::<f64>() / n;
        let t2 = s.iter().map(|v| v.psnr[1]).sum::<f64>() / n;
        writeln!(out, "{p},{},{t1},{t2},{}", s.len(), 0.5 * (t1 + t2))?;
        println!("{:<10} {t1:>8.3} {t2:>8.3} {:>8.3}", p.name(), 0.5 * (t1 + t2));
    }
    Ok(())
}
