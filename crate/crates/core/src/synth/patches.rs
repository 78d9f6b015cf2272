//! Random foreground-rich patch pairs with optional flip/rotation
//! augmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::degrade::{degrade, DegradationSpec};
use crate::error::{Error, Result};
use crate::volume::{linear_index, LabelMap, Modality, Shape3, Volume};

/// Which voxels count as foreground when screening patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ForegroundRule {
    /// `|intensity| > min_abs` in either HR modality.
    Intensity { min_abs: f32 },
    /// Nonzero segmentation label.
    Labels,
}

impl Default for ForegroundRule {
    fn default() -> Self {
        ForegroundRule::Intensity { min_abs: 0.05 }
    }
}

/// Random augmentations, each applied with `probability`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentFlags {
    /// Per-axis random flips.
    pub flip: [bool; 3],
    /// Random multiple of 90 degrees in the x-y plane (needs equal x and y
    /// patch extents).
    pub rotate_xy: bool,
    pub probability: Option<f64>,
}

impl AugmentFlags {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn flip_x() -> Self {
        AugmentFlags { flip: [true, false, false], ..Self::default() }
    }

    fn p(&self) -> f64 {
        self.probability.unwrap_or(0.5)
    }

    pub fn is_active(&self) -> bool {
        self.rotate_xy || self.flip.iter().any(|&f| f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    pub patch_shape: Shape3,
    pub foreground_threshold: f64,
    pub foreground: ForegroundRule,
    /// Attempts allowed per requested patch before giving up.
    pub attempts_per_patch: usize,
    pub augment: AugmentFlags,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            patch_shape: [40, 40, 40],
            foreground_threshold: 0.3,
            foreground: ForegroundRule::default(),
            attempts_per_patch: 50,
            augment: AugmentFlags::none(),
        }
    }
}

/// The transform that was applied to a patch, in application order:
/// flips first, then `rot90` quarter turns in the x-y plane.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub flips: [bool; 3],
    pub rot90: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject: String,
    /// Corner of the HR crop in the subject grid.
    pub offset: Shape3,
    pub transform: Transform,
}

#[derive(Clone, Debug)]
pub struct PatchPair {
    pub lr_t1: Volume,
    pub lr_t2: Volume,
    pub hr_t1: Volume,
    pub hr_t2: Volume,
    pub seg_mask: LabelMap,
    pub provenance: Provenance,
}

impl PatchPair {
    pub fn lr(&self, m: Modality) -> &Volume {
        match m {
            Modality::T1 => &self.lr_t1,
            Modality::T2 => &self.lr_t2,
        }
    }

    pub fn hr(&self, m: Modality) -> &Volume {
        match m {
            Modality::T1 => &self.hr_t1,
            Modality::T2 => &self.hr_t2,
        }
    }
}

/// HR volumes of one subject on a shared grid.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub t1: Volume,
    pub t2: Volume,
    pub seg: LabelMap,
}

impl Subject {
    pub fn new(id: impl Into<String>, t1: Volume, t2: Volume, seg: LabelMap) -> Result<Self> {
        if t1.shape() != t2.shape() || t1.shape() != seg.shape() {
            return Err(Error::Shape(format!(
                "subject volumes must share one grid: t1 {:?}, t2 {:?}, seg {:?}",
                t1.shape(),
                t2.shape(),
                seg.shape()
            )));
        }
        Ok(Subject { id: id.into(), t1, t2, seg })
    }

    pub fn shape(&self) -> Shape3 {
        self.t1.shape()
    }

    pub fn hr(&self, m: Modality) -> &Volume {
        match m {
            Modality::T1 => &self.t1,
            Modality::T2 => &self.t2,
        }
    }
}

/// Fraction of foreground voxels in a crop.
pub fn foreground_fraction(t1: &Volume, t2: &Volume, seg: &LabelMap, rule: ForegroundRule) -> f64 {
    let n = t1.data().len().max(1) as f64;
    let count = match rule {
        ForegroundRule::Intensity { min_abs } => {
            t1.data().iter().zip(t2.data()).filter(|(a, b)| a.abs() > min_abs || b.abs() > min_abs).count()
        }
        ForegroundRule::Labels => seg.data().iter().filter(|&&l| l != 0).count(),
    };
    count as f64 / n
}

/// Applies `t` to a C-order grid. Quarter turns map `(x, y)` to `(y, nx-1-x)`
/// and require `nx == ny`.
pub fn transform_grid<T: Copy>(data: &[T], shape: Shape3, t: Transform) -> Vec<T> {
    let mut cur = data.to_vec();
    for a in 0..3 {
        if t.flips[a] {
            let mut out = cur.clone();
            for x in 0..shape[0] {
                for y in 0..shape[1] {
                    for z in 0..shape[2] {
                        let mut q = [x, y, z];
                        q[a] = shape[a] - 1 - q[a];
                        out[linear_index(shape, x, y, z)] = cur[linear_index(shape, q[0], q[1], q[2])];
                    }
                }
            }
            cur = out;
        }
    }
    for _ in 0..t.rot90 % 4 {
        assert_eq!(shape[0], shape[1], "quarter turns need a square x-y plane");
        let n = shape[0];
        let mut out = cur.clone();
        for x in 0..n {
            for y in 0..n {
                for z in 0..shape[2] {
                    out[linear_index(shape, y, n - 1 - x, z)] = cur[linear_index(shape, x, y, z)];
                }
            }
        }
        cur = out;
    }
    cur
}

fn transform_volume(v: &Volume, t: Transform) -> Result<Volume> {
    if t == Transform::default() {
        return Ok(v.clone());
    }
    Volume::with_geometry(v.shape(), v.spacing(), v.origin(), transform_grid(v.data(), v.shape(), t))
}

fn transform_labels(m: &LabelMap, t: Transform) -> Result<LabelMap> {
    LabelMap::new(m.shape(), transform_grid(m.data(), m.shape(), t))
}

/// Crops one HR patch at `offset`, augments it with `t` and degrades it.
pub fn extract_pair(subject: &Subject, deg: &DegradationSpec, offset: Shape3, size: Shape3, t: Transform) -> Result<PatchPair> {
    let hr_t1 = transform_volume(&subject.t1.crop(offset, size)?, t)?;
    let hr_t2 = transform_volume(&subject.t2.crop(offset, size)?, t)?;
    let seg_mask = transform_labels(&subject.seg.crop(offset, size)?, t)?;
    Ok(PatchPair {
        lr_t1: degrade(&hr_t1, deg, Modality::T1)?,
        lr_t2: degrade(&hr_t2, deg, Modality::T2)?,
        hr_t1,
        hr_t2,
        seg_mask,
        provenance: Provenance { subject: subject.id.clone(), offset, transform: t },
    })
}

/// Draws one crop corner. Corners along each axis are multiples of
/// `steps[a]` so that cropping commutes with degradation.
pub fn draw_offset(rng: &mut impl Rng, shape: Shape3, size: Shape3, steps: [usize; 3]) -> Shape3 {
    let mut o = [0; 3];
    for a in 0..3 {
        let slots = (shape[a] - size[a]) / steps[a] + 1;
        o[a] = rng.gen_range(0..slots) * steps[a];
    }
    o
}

/// Samples `count` patch pairs. Crop corners come from one RNG stream and
/// augmentation choices from another, so enabling augmentation does not move
/// the corners.
pub fn sample_patches(subject: &Subject, deg: &DegradationSpec, cfg: &PatchConfig, count: usize, seed: u64) -> Result<Vec<PatchPair>> {
    if count == 0 {
        return Err(Error::Domain("patch count must be >= 1".into()));
    }
    let size = cfg.patch_shape;
    let shape = subject.shape();
    if (0..3).any(|a| size[a] > shape[a]) {
        return Err(Error::Domain(format!("patch {size:?} does not fit in subject grid {shape:?}")));
    }
    deg.lr_shape(size, Modality::T1)?;
    deg.lr_shape(size, Modality::T2)?;
    if cfg.augment.rotate_xy && size[0] != size[1] {
        return Err(Error::Config(format!("x-y rotation needs equal x and y patch extents, got {size:?}")));
    }
    let steps = deg.offset_steps();
    let mut offsets = ChaCha8Rng::seed_from_u64(seed);
    let mut aug = ChaCha8Rng::seed_from_u64(seed);
    aug.set_stream(1);

    let budget = count * cfg.attempts_per_patch.max(1);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts == budget {
            return Err(Error::InsufficientForeground { needed: count, threshold: cfg.foreground_threshold, attempts });
        }
        attempts += 1;
        let offset = draw_offset(&mut offsets, shape, size, steps);
        if cfg.foreground_threshold > 0.0 {
            let frac = foreground_fraction(
                &subject.t1.crop(offset, size)?,
                &subject.t2.crop(offset, size)?,
                &subject.seg.crop(offset, size)?,
                cfg.foreground,
            );
            if frac < cfg.foreground_threshold {
                continue;
            }
        }
        let mut t = Transform::default();
        let p = cfg.augment.p();
        for a in 0..3 {
            t.flips[a] = cfg.augment.flip[a] && aug.gen_bool(p);
        }
        if cfg.augment.rotate_xy && aug.gen_bool(p) {
            t.rot90 = aug.gen_range(1..4);
        }
        out.push(extract_pair(subject, deg, offset, size, t)?);
    }
    Ok(out)
}
