//! Optimization loop, validation, logging and checkpointing.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod losses;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::inference::{reconstruct, DEFAULT_MEMORY_BUDGET, DEFAULT_TILE};
use crate::metrics::{psnr, ssim3d};
use crate::model::{Model, ModelConfig};
use crate::synth::{sample_patches, AugmentFlags, DegradationSpec, PatchConfig, PatchPair, Subject};
use adam::{Adam, AdamConfig};
use checkpoint::{Checkpoint, RngState};
use data::TrainItem;
use losses::{item_loss, total_loss, LossBreakdown, LossTerms, LossWeights};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Patches per optimizer step.
    pub batch_size: usize,
    pub iterations: u64,
    /// Supervised coordinates per patch.
    pub coords_per_patch: usize,
    pub seed: u64,
    /// Validate every this many iterations (and after the last one).
    pub val_every: u64,
    /// Fixed validation patches per validation subject.
    pub val_patches: usize,
    /// Share of coordinates drawn from lesion voxels.
    pub lesion_fraction: f64,
    pub patch: PatchConfig,
    /// Coordinates per decoder call during validation.
    pub tile: usize,
    /// Where `last.ckpt`, `best.ckpt` and `metrics.csv` go.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 4,
            iterations: 1000,
            coords_per_patch: 4096,
            seed: 0,
            val_every: 100,
            val_patches: 2,
            lesion_fraction: 0.0,
            patch: PatchConfig::default(),
            tile: DEFAULT_TILE,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 || self.coords_per_patch == 0 || self.val_every == 0 || self.tile == 0 {
            return Err(Error::Config("batch_size, coords_per_patch, val_every and tile must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lesion_fraction) {
            return Err(Error::Config(format!("lesion_fraction must be in [0, 1], got {}", self.lesion_fraction)));
        }
        Ok(())
    }
}

/// Everything that determines a training run's numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct Setup {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub degradation: DegradationSpec,
}

impl Setup {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.train.validate()?;
        self.degradation.validate()
    }

    /// SHA-256 of the setup with the run length, cadence and output
    /// location cleared, so a run can be resumed with a longer schedule.
    pub fn config_hash(&self) -> String {
        let mut s = self.clone();
        s.train.iterations = 0;
        s.train.val_every = 1;
        s.train.checkpoint_dir = None;
        let json = serde_json::to_vec(&s).expect("setup serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Mean validation scores over the fixed validation patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValScores {
    pub psnr: [f64; 2],
    pub ssim: [f64; 2],
}

impl ValScores {
    pub fn mean_psnr(&self) -> f64 {
        0.5 * (self.psnr[0] + self.psnr[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub val: Option<ValScores>,
    /// Best mean validation PSNR so far.
    pub best_val_psnr: Option<f64>,
}

pub const CSV_HEADER: &str =
    "iteration,sr,seg,kd,t2self,cmfa,fdl,total,val_psnr_t1,val_psnr_t2,val_ssim_t1,val_ssim_t2,best_val_psnr";

impl LogRow {
    pub fn csv(&self) -> String {
        let mut cells = vec![self.iteration.to_string()];
        cells.extend(self.loss.terms.values().iter().map(|v| v.to_string()));
        cells.push(self.loss.total.to_string());
        match &self.val {
            Some(v) => cells.extend([v.psnr[0], v.psnr[1], v.ssim[0], v.ssim[1]].iter().map(|x| x.to_string())),
            None => cells.extend(std::iter::repeat(String::new()).take(4)),
        }
        cells.push(self.best_val_psnr.map(|b| b.to_string()).unwrap_or_default());
        cells.join(",")
    }
}

/// Deterministic validation patches: no augmentation, seeded from the run
/// seed and the subject position.
pub fn validation_patches(subjects: &[Subject], setup: &Setup) -> Result<Vec<PatchPair>> {
    let cfg = PatchConfig { augment: AugmentFlags::none(), ..setup.train.patch.clone() };
    let mut out = Vec::new();
    for (i, s) in subjects.iter().enumerate() {
        let seed = setup.train.seed ^ 0x5eed_0000_0000 ^ i as u64;
        out.extend(sample_patches(s, &setup.degradation, &cfg, setup.train.val_patches, seed)?);
    }
    Ok(out)
}

/// Reconstructs each patch on its full HR grid and scores both modalities.
pub fn evaluate_patches(model: &Model, patches: &[PatchPair], tile: usize) -> Result<ValScores> {
    if patches.is_empty() {
        return Err(Error::Domain("no validation patches".into()));
    }
    let mut psnr_sum = [0.0; 2];
    let mut ssim_sum = [0.0; 2];
    for p in patches {
        let rec = reconstruct(model, &p.lr_t1, &p.lr_t2, p.hr_t1.shape(), tile, DEFAULT_MEMORY_BUDGET)?;
        for m in 0..2 {
            let gt = if m == 0 { &p.hr_t1 } else { &p.hr_t2 };
            psnr_sum[m] += psnr(&rec.volumes[m], gt, None)?;
            ssim_sum[m] += ssim3d(&rec.volumes[m], gt, None).unwrap_or(f64::NAN);
        }
    }
    let n = patches.len() as f64;
    Ok(ValScores { psnr: psnr_sum.map(|s| s / n), ssim: ssim_sum.map(|s| s / n) })
}

pub struct Trainer {
    pub setup: Setup,
    pub model: Model,
    pub adam: Adam,
    pub iteration: u64,
    pub best_val_psnr: Option<f64>,
    rng: ChaCha8Rng,
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(7);
    r
}

impl Trainer {
    pub fn new(setup: Setup) -> Result<Self> {
        setup.validate()?;
        let model = Model::new(&setup.model, setup.weights.toggles)?;
        let adam = Adam::new(setup.train.adam, &model.params);
        let rng = data_rng(setup.train.seed);
        Ok(Trainer { setup, model, adam, iteration: 0, best_val_psnr: None, rng })
    }

    /// Restores a run. `setup`, when given, must hash like the checkpoint's.
    pub fn from_checkpoint(ckpt: Checkpoint, setup: Option<Setup>) -> Result<Self> {
        let setup = match setup {
            Some(s) => {
                let (expected, found) = (ckpt.setup.config_hash(), s.config_hash());
                if expected != found {
                    return Err(Error::ConfigHashMismatch { expected, found });
                }
                s
            }
            None => ckpt.setup.clone(),
        };
        setup.validate()?;
        let mut model = Model::new(&setup.model, setup.weights.toggles)?;
        load_params(&mut model, &ckpt.params)?;
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        let adam = Adam { config: setup.train.adam, ..ckpt.adam };
        Ok(Trainer { setup, model, adam, iteration: ckpt.iteration, best_val_psnr: ckpt.best_val_psnr, rng })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            setup: self.setup.clone(),
            iteration: self.iteration,
            rng: RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos() },
            best_val_psnr: self.best_val_psnr,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Draws `batch_size` patches (subject, corner, augmentation) and their
    /// supervised coordinates from the run's RNG.
    pub fn sample_batch(&mut self, subjects: &[Subject]) -> Result<Vec<TrainItem>> {
        if subjects.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let t = &self.setup.train;
        let lesion = (self.setup.model.num_classes - 1) as u8;
        let mut items = Vec::with_capacity(t.batch_size);
        for _ in 0..t.batch_size {
            let s = self.rng.gen_range(0..subjects.len());
            let seed: u64 = self.rng.gen();
            let pair = sample_patches(&subjects[s], &self.setup.degradation, &t.patch, 1, seed)?.remove(0);
            items.push(TrainItem::sample(&pair, t.coords_per_patch, t.lesion_fraction, lesion, &mut self.rng)?);
        }
        Ok(items)
    }

    /// One optimizer update on the mean loss over `batch`.
    pub fn train_step(&mut self, batch: &[TrainItem]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let params = &self.model.params;
        let mut acc: Vec<Vec<f32>> = params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        let mut terms = [0.0f64; 6];
        for item in batch {
            let g = Graph::<f32>::new();
            let cx = params.bind(&g, true);
            let loss = item_loss(&self.model, &cx, item, &self.setup.weights)?;
            for (t, v) in terms.iter_mut().zip(&loss.terms) {
                if let Some(v) = v {
                    *t += g.value(*v).item() as f64;
                }
            }
            let grads = g.backward(loss.total);
            for (i, id) in params.ids().enumerate() {
                if let Some(gr) = grads.get(cx.p(id)) {
                    for (a, &b) in acc[i].iter_mut().zip(gr.data()) {
                        *a += b;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        for (i, id) in params.ids().enumerate() {
            for a in acc[i].iter_mut() {
                *a *= inv;
            }
            if acc[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} at iteration {}", params.name(id), self.iteration + 1)));
            }
        }
        let terms = LossTerms::from_values(terms.map(|t| t / batch.len() as f64));
        let breakdown = total_loss(&terms, &self.setup.weights)?;
        self.adam.update(&mut self.model.params, &acc)?;
        self.iteration += 1;
        Ok(breakdown)
    }

    /// `sample_batch` followed by `train_step`.
    pub fn step(&mut self, subjects: &[Subject]) -> Result<LossBreakdown> {
        let batch = self.sample_batch(subjects)?;
        self.train_step(&batch)
    }

    /// Trains until `iterations`, validating on `val` (or on `train` when
    /// `val` is empty). Each row is passed to `observe` as it is produced.
    pub fn fit(&mut self, train: &[Subject], val: &[Subject], mut observe: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        if train.is_empty() {
            return Err(Error::Config("empty training split".into()));
        }
        let val_patches = validation_patches(if val.is_empty() { train } else { val }, &self.setup)?;
        let dir = self.setup.train.checkpoint_dir.clone();
        let mut csv = match &dir {
            Some(d) => Some(open_log(d, self.iteration > 0)?),
            None => None,
        };
        let mut rows = Vec::new();
        while self.iteration < self.setup.train.iterations {
            let loss = self.step(train)?;
            let it = self.iteration;
            let mut row = LogRow { iteration: it, loss, val: None, best_val_psnr: self.best_val_psnr };
            if it % self.setup.train.val_every == 0 || it == self.setup.train.iterations {
                let scores = evaluate_patches(&self.model, &val_patches, self.setup.train.tile)?;
                let improved = self.best_val_psnr.map_or(true, |b| scores.mean_psnr() > b);
                if improved {
                    self.best_val_psnr = Some(scores.mean_psnr());
                }
                row.val = Some(scores);
                row.best_val_psnr = self.best_val_psnr;
                if let Some(d) = &dir {
                    let ckpt = self.checkpoint();
                    if improved {
                        ckpt.save(d.join(BEST_CHECKPOINT))?;
                    }
                    ckpt.save(d.join(LAST_CHECKPOINT))?;
                }
            }
            if let Some(w) = csv.as_mut() {
                writeln!(w, "{}", row.csv())?;
                w.flush()?;
            }
            observe(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Weights rescaled by [`LossWeights::calibrated`] from the loss terms of
/// a freshly initialized model on one training batch.
pub fn calibrate_weights(setup: &Setup, subjects: &[Subject], ratio: f64) -> Result<LossWeights> {
    let mut probe = Trainer::new(setup.clone())?;
    let batch = probe.sample_batch(subjects)?;
    let mut sums = [0.0f64; 6];
    for item in &batch {
        let g = Graph::<f32>::new();
        let cx = probe.model.params.bind(&g, false);
        let loss = item_loss(&probe.model, &cx, item, &setup.weights)?;
        for (s, v) in sums.iter_mut().zip(&loss.terms) {
            if let Some(v) = v {
                *s += g.value(*v).item() as f64;
            }
        }
    }
    let init = LossTerms::from_values(sums.map(|s| s / batch.len() as f64));
    setup.weights.calibrated(&init, ratio)
}

fn open_log(dir: &Path, append: bool) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir)?;
    let path = dir.join(METRICS_FILE);
    if append && path.exists() {
        return Ok(BufWriter::new(fs::OpenOptions::new().append(true).open(path)?));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    Ok(w)
}

/// Copies parameters by name, checking names and shapes match exactly.
pub fn load_params(model: &mut Model, stored: &crate::model::params::ParamStore<f32>) -> Result<()> {
    if stored.names() != model.params.names() {
        return Err(Error::Checkpoint("checkpoint parameters do not match the model built from its config".into()));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        model.params.set(id, stored.get(id).clone()).map_err(|e| Error::Checkpoint(format!("{}: {e}", stored.name(id))))?;
    }
    Ok(())
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(&ckpt.setup.model, ckpt.setup.weights.toggles)?;
    load_params(&mut model, &ckpt.params)?;
    Ok(model)
}
