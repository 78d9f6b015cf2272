//! Image-quality and overlap metrics: PSNR, 3D SSIM, Dice and HD95.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, LabelMap, Shape3, Volume};

/// PSNR reported when the two volumes are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: Shape3, b: Shape3, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `max(gt) - min(gt)`.
pub fn data_range(gt: &Volume) -> f64 {
    let (lo, hi) = gt.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    hi - lo
}

fn resolve_range(gt: &Volume, range: Option<f64>) -> Result<f64> {
    let r = range.unwrap_or_else(|| data_range(gt));
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Domain(format!("data range must be positive, got {r}")));
    }
    Ok(r)
}

pub fn mse(pred: &Volume, gt: &Volume) -> Result<f64> {
    same_shape(pred.shape(), gt.shape(), "mse")?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n)
}

/// `10 log10(range^2 / MSE)`, capped at [`PSNR_CAP_DB`]. The range defaults to
/// the dynamic range of `gt`.
pub fn psnr(pred: &Volume, gt: &Volume, range: Option<f64>) -> Result<f64> {
    let err = mse(pred, gt)?;
    let r = resolve_range(gt, range)?;
    Ok(psnr_from_mse(err, r))
}

pub fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (range * range / mse).log10()).min(PSNR_CAP_DB)
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

// Valid-mode separable filtering of a C-order grid.
fn filter_valid(data: &[f64], shape: Shape3, taps: &[f64]) -> (Vec<f64>, Shape3) {
    let k = taps.len();
    let mut cur = data.to_vec();
    let mut s = shape;
    for axis in 0..3 {
        let mut out_shape = s;
        out_shape[axis] = s[axis] + 1 - k;
        let mut out = vec![0.0; out_shape.iter().product()];
        for x in 0..out_shape[0] {
            for y in 0..out_shape[1] {
                for z in 0..out_shape[2] {
                    let mut acc = 0.0;
                    for (t, &w) in taps.iter().enumerate() {
                        let mut p = [x, y, z];
                        p[axis] += t;
                        acc += w * cur[linear_index(s, p[0], p[1], p[2])];
                    }
                    out[linear_index(out_shape, x, y, z)] = acc;
                }
            }
        }
        cur = out;
        s = out_shape;
    }
    (cur, s)
}

/// Mean 3D SSIM with a 7-voxel Gaussian window (sigma 1.5) over all voxels
/// where the window fits.
pub fn ssim3d(pred: &Volume, gt: &Volume, range: Option<f64>) -> Result<f64> {
    same_shape(pred.shape(), gt.shape(), "ssim3d")?;
    let shape = gt.shape();
    if shape.iter().any(|&n| n < SSIM_WINDOW) {
        return Err(Error::Domain(format!("volume {shape:?} smaller than the {SSIM_WINDOW}-voxel SSIM window")));
    }
    let l = resolve_range(gt, range)?;
    let (c1, c2) = ((SSIM_K1 * l).powi(2), (SSIM_K2 * l).powi(2));
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    let taps = gaussian_taps();
    let f = |v: &[f64]| filter_valid(v, shape, &taps).0;
    let mx = f(&x);
    let my = f(&y);
    let mxx = f(&x.iter().map(|v| v * v).collect::<Vec<_>>());
    let myy = f(&y.iter().map(|v| v * v).collect::<Vec<_>>());
    let mxy = f(&x.iter().zip(&y).map(|(a, b)| a * b).collect::<Vec<_>>());
    let n = mx.len() as f64;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n)
}

/// `2 |A ∩ B| / (|A| + |B|)` for one class; 1.0 when both are empty.
pub fn dice(pred: &LabelMap, gt: &LabelMap, class: u8) -> Result<f64> {
    same_shape(pred.shape(), gt.shape(), "dice")?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (pa, gb) = (p == class, g == class);
        a += pa as usize;
        b += gb as usize;
        inter += (pa && gb) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Mask voxels with at least one face neighbour outside the mask (the grid
/// border counts as outside).
pub fn surface_voxels(mask: &[bool], shape: Shape3) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                if !mask[linear_index(shape, x, y, z)] {
                    continue;
                }
                let p = [x, y, z];
                let mut boundary = false;
                for a in 0..3 {
                    for d in [-1isize, 1] {
                        let q = p[a] as isize + d;
                        if q < 0 || q >= shape[a] as isize {
                            boundary = true;
                        } else {
                            let mut n = p;
                            n[a] = q as usize;
                            boundary |= !mask[linear_index(shape, n[0], n[1], n[2])];
                        }
                    }
                }
                if boundary {
                    out.push(p);
                }
            }
        }
    }
    out
}

// Squared distance transform along one line (lower envelope of parabolas).
// `f` holds squared distances in units of the line spacing; `None` is +inf.
fn edt_line(f: &[Option<f64>], out: &mut [Option<f64>]) {
    let n = f.len();
    let sites: Vec<usize> = (0..n).filter(|&q| f[q].is_some()).collect();
    if sites.is_empty() {
        out.iter_mut().for_each(|v| *v = None);
        return;
    }
    let fv = |q: usize| f[q].unwrap();
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    v.push(sites[0]);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    for &q in &sites[1..] {
        loop {
            let p = *v.last().unwrap();
            let s = ((fv(q) + (q * q) as f64) - (fv(p) + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[v.len() - 1] {
                // z[0] is -inf, so the first parabola is never popped.
                v.pop();
                z.pop();
                continue;
            }
            v.push(q);
            *z.last_mut().unwrap() = s;
            z.push(f64::INFINITY);
            break;
        }
    }
    let mut j = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while z[j + 1] < p as f64 {
            j += 1;
        }
        let q = v[j];
        *o = Some((p as f64 - q as f64).powi(2) + fv(q));
    }
}

/// Euclidean distance (physical units) from every voxel to the nearest
/// `site` voxel.
pub fn distance_transform(sites: &[bool], shape: Shape3, spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<Option<f64>> = sites.iter().map(|&s| if s { Some(0.0) } else { None }).collect();
    for axis in (0..3).rev() {
        let s2 = spacing[axis] * spacing[axis];
        let n = shape[axis];
        let mut line_in = vec![None; n];
        let mut line_out = vec![None; n];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..shape[others[0]] {
            for j in 0..shape[others[1]] {
                let idx = |t: usize| {
                    let mut p = [0; 3];
                    p[axis] = t;
                    p[others[0]] = i;
                    p[others[1]] = j;
                    linear_index(shape, p[0], p[1], p[2])
                };
                for t in 0..n {
                    line_in[t] = d[idx(t)].map(|v| v / s2);
                }
                edt_line(&line_in, &mut line_out);
                for t in 0..n {
                    d[idx(t)] = line_out[t].map(|v| v * s2);
                }
            }
        }
    }
    d.into_iter().map(|v| v.map_or(f64::INFINITY, f64::sqrt)).collect()
}

/// `q`-quantile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    values[lo] * (1.0 - t) + values[hi] * t
}

/// Symmetric surface distances between two boolean masks.
pub fn surface_distances(a: &[bool], b: &[bool], shape: Shape3, spacing: [f64; 3]) -> Result<Vec<f64>> {
    let sa = surface_voxels(a, shape);
    let sb = surface_voxels(b, shape);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::EmptyMask("surface distance needs two nonempty masks".into()));
    }
    let mark = |s: &[[usize; 3]]| {
        let mut m = vec![false; a.len()];
        for p in s {
            m[linear_index(shape, p[0], p[1], p[2])] = true;
        }
        m
    };
    let da = distance_transform(&mark(&sa), shape, spacing);
    let db = distance_transform(&mark(&sb), shape, spacing);
    let mut out: Vec<f64> = sa.iter().map(|p| db[linear_index(shape, p[0], p[1], p[2])]).collect();
    out.extend(sb.iter().map(|p| da[linear_index(shape, p[0], p[1], p[2])]));
    Ok(out)
}

/// 95th percentile of the symmetric surface distance for one class.
pub fn hd95(pred: &LabelMap, gt: &LabelMap, class: u8, spacing: [f64; 3]) -> Result<f64> {
    same_shape(pred.shape(), gt.shape(), "hd95")?;
    let (a, b) = (pred.class_mask(class), gt.class_mask(class));
    if !a.iter().any(|&v| v) || !b.iter().any(|&v| v) {
        return Err(Error::EmptyMask(format!("class {class} is absent from one of the masks")));
    }
    let mut d = surface_distances(&a, &b, pred.shape(), spacing)?;
    Ok(percentile(&mut d, 0.95))
}

/// External perceptual scorer (for example LPIPS) plugged into evaluation.
pub trait PerceptualScorer {
    fn name(&self) -> &str;
    fn score(&self, pred: &Volume, gt: &Volume) -> Result<f64>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityScores {
    pub psnr: f64,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: u8,
    pub dice: f64,
    /// `None` when either mask lacks the class.
    pub hd95: Option<f64>,
}

/// Per-modality image scores plus optional per-class segmentation scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub subject: String,
    pub t1: Option<ModalityScores>,
    pub t2: Option<ModalityScores>,
    pub classes: Vec<ClassScores>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.t1.iter().chain(self.t2.iter()).map(|s| s.psnr))
    }
    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.t1.iter().chain(self.t2.iter()).map(|s| s.ssim))
    }
    pub fn mean_dice(&self) -> Option<f64> {
        mean(self.classes.iter().map(|c| c.dice))
    }
    pub fn mean_hd95(&self) -> Option<f64> {
        mean(self.classes.iter().filter_map(|c| c.hd95))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// PSNR and SSIM of one prediction, plus the perceptual score when a scorer
/// is supplied.
pub fn score_modality(pred: &Volume, gt: &Volume, scorer: Option<&dyn PerceptualScorer>) -> Result<ModalityScores> {
    Ok(ModalityScores {
        psnr: psnr(pred, gt, None)?,
        ssim: ssim3d(pred, gt, None)?,
        perceptual: scorer.map(|s| s.score(pred, gt)).transpose()?,
    })
}

/// Dice and HD95 for classes `1..num_classes` (background excluded).
pub fn score_segmentation(pred: &LabelMap, gt: &LabelMap, num_classes: u8, spacing: [f64; 3]) -> Result<Vec<ClassScores>> {
    (1..num_classes)
        .map(|c| {
            let hd = match hd95(pred, gt, c, spacing) {
                Ok(v) => Some(v),
                Err(Error::EmptyMask(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(ClassScores { class: c, dice: dice(pred, gt, c)?, hd95: hd })
        })
        .collect()
}
