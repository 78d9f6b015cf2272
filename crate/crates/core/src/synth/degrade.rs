//! Anisotropic through-plane degradation.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, Axis, Modality, Shape3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum DegradeMode {
    /// Mean of each `factor`-slice block (slice-thickness averaging).
    BlockAverage,
    /// Keep every `factor`-th slice, starting with the first.
    StridedSubsample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationSpec {
    pub axis_t1: Axis,
    pub factor_t1: usize,
    pub axis_t2: Axis,
    pub factor_t2: usize,
    pub mode: DegradeMode,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec { axis_t1: Axis::Z, factor_t1: 2, axis_t2: Axis::Y, factor_t2: 4, mode: DegradeMode::BlockAverage }
    }
}

impl DegradationSpec {
    pub fn axis(&self, m: Modality) -> Axis {
        match m {
            Modality::T1 => self.axis_t1,
            Modality::T2 => self.axis_t2,
        }
    }

    pub fn factor(&self, m: Modality) -> usize {
        match m {
            Modality::T1 => self.factor_t1,
            Modality::T2 => self.factor_t2,
        }
    }

    /// Per-axis reduction factors for one modality.
    pub fn factors(&self, m: Modality) -> [usize; 3] {
        let mut f = [1; 3];
        f[self.axis(m).index()] = self.factor(m);
        f
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor_t1 < 2 || self.factor_t2 < 2 {
            return Err(Error::Config(format!(
                "degradation factors must be >= 2, got {} and {}",
                self.factor_t1, self.factor_t2
            )));
        }
        Ok(())
    }

    /// LR extent of `hr` for one modality, or a domain error when the factor
    /// does not divide the degraded extent.
    pub fn lr_shape(&self, hr: Shape3, m: Modality) -> Result<Shape3> {
        let (a, f) = (self.axis(m).index(), self.factor(m));
        if f == 0 || hr[a] % f != 0 {
            return Err(Error::Domain(format!(
                "factor {f} does not divide extent {} of axis {:?} for {}",
                hr[a],
                self.axis(m),
                m.name()
            )));
        }
        let mut s = hr;
        s[a] /= f;
        Ok(s)
    }

    /// Per-axis step that crop offsets must respect so that cropping
    /// commutes with degradation for both modalities.
    pub fn offset_steps(&self) -> [usize; 3] {
        let (f1, f2) = (self.factors(Modality::T1), self.factors(Modality::T2));
        let mut out = [1; 3];
        for a in 0..3 {
            out[a] = lcm(f1[a], f2[a]);
        }
        out
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Reduces `hr` along one axis. Spacing along that axis is multiplied by
/// `factor`; the origin moves to the center of the first block.
pub fn degrade_axis(hr: &Volume, axis: Axis, factor: usize, mode: DegradeMode) -> Result<Volume> {
    let a = axis.index();
    let src = hr.shape();
    if factor == 0 || src[a] % factor != 0 {
        return Err(Error::Domain(format!("factor {factor} does not divide extent {} of axis {axis:?}", src[a])));
    }
    let mut dst = src;
    dst[a] /= factor;
    let mut data = vec![0f32; voxel_count(dst)];
    let inv = 1.0 / factor as f64;
    for x in 0..dst[0] {
        for y in 0..dst[1] {
            for z in 0..dst[2] {
                let mut p = [x, y, z];
                let base = p[a] * factor;
                let v = match mode {
                    DegradeMode::StridedSubsample => {
                        p[a] = base;
                        hr.get(p[0], p[1], p[2])
                    }
                    DegradeMode::BlockAverage => {
                        let mut acc = 0f64;
                        for t in 0..factor {
                            p[a] = base + t;
                            acc += hr.get(p[0], p[1], p[2]) as f64;
                        }
                        (acc * inv) as f32
                    }
                };
                data[linear_index(dst, x, y, z)] = v;
            }
        }
    }
    let mut spacing = hr.spacing();
    let mut origin = hr.origin();
    if mode == DegradeMode::BlockAverage {
        origin[a] += spacing[a] * (factor as f64 - 1.0) / 2.0;
    }
    spacing[a] *= factor as f64;
    Volume::with_geometry(dst, spacing, origin, data)
}

/// Degrades `hr` per the modality's axis and factor.
pub fn degrade(hr: &Volume, spec: &DegradationSpec, modality: Modality) -> Result<Volume> {
    degrade_axis(hr, spec.axis(modality), spec.factor(modality), spec.mode)
}
