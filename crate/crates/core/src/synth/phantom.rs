//! Synthetic two-contrast head phantoms with known segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{center_coordinate, linear_index, voxel_count, LabelMap, Shape3, Volume};

/// Edge width of the soft ellipsoid indicator, in normalized radius units.
const EDGE: f64 = 0.08;

/// Level at which soft indicators (and the lesion field) count as inside.
pub const INSIDE_LEVEL: f64 = 0.5;

/// Monotone intensity map applied to the shared anatomy field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastMap {
    Identity,
    Inverted,
    Gamma,
    Sigmoid,
}

impl ContrastMap {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            ContrastMap::Identity => v,
            ContrastMap::Inverted => 1.0 - v,
            ContrastMap::Gamma => v.signum() * v.abs().powf(0.6),
            ContrastMap::Sigmoid => 1.0 / (1.0 + (-8.0 * (v - 0.5)).exp()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub grid_shape: Shape3,
    pub num_blobs: usize,
    pub lesion_count: usize,
    pub contrast_t1: ContrastMap,
    pub contrast_t2: ContrastMap,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid_shape: [80, 80, 80],
            num_blobs: 10,
            lesion_count: 2,
            contrast_t1: ContrastMap::Identity,
            contrast_t2: ContrastMap::Inverted,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Checks everything [`generate_phantom`] needs.
    pub fn validate_geometry(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma)));
        }
        if self.grid_shape.iter().any(|&n| n < 16) {
            return Err(Error::Config(format!("phantom grid extents must be >= 16, got {:?}", self.grid_shape)));
        }
        Ok(())
    }

    /// Full check for corpus specs, which also need two distinct contrasts.
    pub fn validate(&self) -> Result<()> {
        self.validate_geometry()?;
        if self.contrast_t1 == self.contrast_t2 {
            return Err(Error::Config("contrast_t1 and contrast_t2 must differ".into()));
        }
        Ok(())
    }
}

/// A rotated ellipsoid in normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Rows are the ellipsoid's principal axes.
    pub rotation: [[f64; 3]; 3],
    pub amplitude: f64,
}

impl Ellipsoid {
    /// Normalized radius: 1 on the surface.
    pub fn radius_at(&self, p: [f64; 3]) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut r2 = 0.0;
        for (row, r) in self.rotation.iter().zip(self.radii) {
            let t = (row[0] * d[0] + row[1] * d[1] + row[2] * d[2]) / r;
            r2 += t * t;
        }
        r2.sqrt()
    }

    /// Smooth indicator in `(0, 1)`, equal to 0.5 on the surface.
    pub fn soft(&self, p: [f64; 3]) -> f64 {
        1.0 / (1.0 + ((self.radius_at(p) - 1.0) / EDGE).exp())
    }
}

/// The random geometry behind one phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomLayout {
    pub head: Ellipsoid,
    pub blobs: Vec<Ellipsoid>,
    pub lesions: Vec<Ellipsoid>,
}

/// Noise-free fields a phantom is built from, each on the phantom grid.
#[derive(Clone, Debug)]
pub struct PhantomFields {
    pub layout: PhantomLayout,
    /// Shared anatomy in roughly `[0, 1]`.
    pub anatomy: Vec<f64>,
    /// Sum of lesion indicators; lesion voxels are where it exceeds [`INSIDE_LEVEL`].
    pub lesion: Vec<f64>,
    pub head: Vec<f64>,
}

/// Mean and standard deviation removed by z-scoring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub t1: Volume,
    pub t2: Volume,
    pub seg: LabelMap,
    pub stats: [NormStats; 2],
}

fn rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (a, b, c) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let rz = [[a.cos(), -a.sin(), 0.0], [a.sin(), a.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
    let rx = [[1.0, 0.0, 0.0], [0.0, c.cos(), -c.sin()], [0.0, c.sin(), c.cos()]];
    mat_mul(&mat_mul(&rz, &ry), &rx)
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

// A point inside the head, kept away from its rim.
fn interior_point(rng: &mut ChaCha8Rng, head: &Ellipsoid, limit: f64) -> [f64; 3] {
    loop {
        let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        if head.radius_at(p) < limit {
            return p;
        }
    }
}

/// Draws the blob geometry for `spec`. Only depends on the seed and counts.
pub fn phantom_layout(spec: &PhantomSpec) -> PhantomLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let head = Ellipsoid {
        center: [0.0; 3],
        radii: [rng.gen_range(0.78..0.9), rng.gen_range(0.72..0.86), rng.gen_range(0.7..0.84)],
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        amplitude: 0.35,
    };
    let blobs = (0..spec.num_blobs)
        .map(|_| Ellipsoid {
            center: interior_point(&mut rng, &head, 0.75),
            radii: [rng.gen_range(0.08..0.35), rng.gen_range(0.08..0.35), rng.gen_range(0.08..0.35)],
            rotation: rotation(&mut rng),
            amplitude: rng.gen_range(-0.25..0.35),
        })
        .collect();
    let lesions = (0..spec.lesion_count)
        .map(|_| Ellipsoid {
            center: interior_point(&mut rng, &head, 0.6),
            radii: [rng.gen_range(0.08..0.18), rng.gen_range(0.08..0.18), rng.gen_range(0.08..0.18)],
            rotation: rotation(&mut rng),
            amplitude: rng.gen_range(0.35..0.5),
        })
        .collect();
    PhantomLayout { head, blobs, lesions }
}

/// Evaluates the layout on the voxel centers of `spec.grid_shape`.
pub fn phantom_fields(spec: &PhantomSpec) -> Result<PhantomFields> {
    spec.validate_geometry()?;
    let layout = phantom_layout(spec);
    let shape = spec.grid_shape;
    let n = voxel_count(shape);
    let (mut anatomy, mut lesion, mut head) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for x in 0..shape[0] {
        for y in 0..shape[1] {
            for z in 0..shape[2] {
                let p = [center_coordinate(x, shape[0]), center_coordinate(y, shape[1]), center_coordinate(z, shape[2])];
                let i = linear_index(shape, x, y, z);
                let h = layout.head.soft(p);
                let tissue: f64 = layout.blobs.iter().map(|b| b.amplitude * b.soft(p)).sum();
                let les: f64 = layout.lesions.iter().map(|b| b.soft(p)).sum();
                let les_amp: f64 = layout.lesions.iter().map(|b| b.amplitude * b.soft(p)).sum();
                head[i] = h;
                lesion[i] = les;
                anatomy[i] = h * (layout.head.amplitude + tissue) + les_amp;
            }
        }
    }
    Ok(PhantomFields { layout, anatomy, lesion, head })
}

/// Class 2 where the lesion field exceeds [`INSIDE_LEVEL`], otherwise class 1
/// inside the head, otherwise 0.
pub fn label_fields(shape: Shape3, fields: &PhantomFields) -> Result<LabelMap> {
    let data = fields
        .lesion
        .iter()
        .zip(&fields.head)
        .map(|(&l, &h)| {
            if l > INSIDE_LEVEL {
                2
            } else if h > INSIDE_LEVEL {
                1
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(shape, data)
}

/// Both contrasts (z-scored per volume) and the segmentation of one phantom.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let fields = phantom_fields(spec)?;
    let shape = spec.grid_shape;
    let seg = label_fields(shape, &fields)?;
    let contrast = |map: ContrastMap, stream: u64| -> Result<(Volume, NormStats)> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
        let data = fields
            .anatomy
            .iter()
            .map(|&a| {
                let v = map.apply(a);
                (if spec.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v }) as f32
            })
            .collect();
        let (v, mean, std) = Volume::new(shape, data)?.zscore();
        Ok((v, NormStats { mean, std }))
    };
    let (t1, s1) = contrast(spec.contrast_t1, 2)?;
    let (t2, s2) = contrast(spec.contrast_t2, 3)?;
    Ok(Phantom { t1, t2, seg, stats: [s1, s2] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec { grid_shape: [24, 20, 16], seed, ..PhantomSpec::default() }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        for noise in [0.0, 0.05] {
            let spec = PhantomSpec { noise_sigma: noise, ..small(9) };
            let a = generate_phantom(&spec).unwrap();
            let b = generate_phantom(&spec).unwrap();
            assert_eq!(a.t1.data(), b.t1.data());
            assert_eq!(a.t2.data(), b.t2.data());
            assert_eq!(a.seg, b.seg);
        }
        let c = generate_phantom(&small(10)).unwrap();
        assert_ne!(c.t1.data(), generate_phantom(&small(9)).unwrap().t1.data());
    }

    #[test]
    fn identity_contrasts_share_anatomy() {
        let spec = PhantomSpec {
            contrast_t1: ContrastMap::Identity,
            contrast_t2: ContrastMap::Identity,
            noise_sigma: 0.0,
            ..small(3)
        };
        let p = generate_phantom(&spec).unwrap();
        assert_eq!(p.t1.data(), p.t2.data());
        assert!(spec.validate().is_err());
        assert!(spec.validate_geometry().is_ok());
    }

    #[test]
    fn volumes_are_zscored() {
        let p = generate_phantom(&small(4)).unwrap();
        for v in [&p.t1, &p.t2] {
            let (m, s) = crate::volume::mean_std(v.data());
            assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-4, "{m} {s}");
        }
    }

    #[test]
    fn lesion_labels_follow_recomputed_field() {
        let spec = PhantomSpec { grid_shape: [32, 32, 32], ..PhantomSpec::default() };
        let p = generate_phantom(&spec).unwrap();
        let layout = phantom_layout(&spec);
        let mut lesion_voxels = 0;
        for x in 0..32 {
            for y in 0..32 {
                for z in 0..32 {
                    let c = |i: usize| (2 * i + 1) as f64 / 32.0 - 1.0;
                    let pos = [c(x), c(y), c(z)];
                    // Independent evaluation of the summed logistic indicators.
                    let f: f64 = layout
                        .lesions
                        .iter()
                        .map(|e| {
                            let d: Vec<f64> = (0..3).map(|a| pos[a] - e.center[a]).collect();
                            let r = (0..3)
                                .map(|k| ((0..3).map(|a| e.rotation[k][a] * d[a]).sum::<f64>() / e.radii[k]).powi(2))
                                .sum::<f64>()
                                .sqrt();
                            1.0 / (1.0 + ((r - 1.0) / EDGE).exp())
                        })
                        .sum();
                    let label = p.seg.get(x, y, z);
                    assert_eq!(label == 2, f > 0.5, "voxel {x},{y},{z} field {f}");
                    lesion_voxels += (label == 2) as usize;
                }
            }
        }
        assert!(lesion_voxels > 0);
        assert!(p.seg.data().iter().any(|&l| l == 1));
        assert!(p.seg.data().iter().any(|&l| l == 0));
    }

    #[test]
    fn contrast_maps_are_monotone() {
        for m in [ContrastMap::Identity, ContrastMap::Inverted, ContrastMap::Gamma, ContrastMap::Sigmoid] {
            let vals: Vec<f64> = (0..200).map(|i| m.apply(-0.5 + i as f64 * 0.01)).collect();
            let inc = vals.windows(2).all(|w| w[1] > w[0]);
            let dec = vals.windows(2).all(|w| w[1] < w[0]);
            assert!(inc || dec, "{m:?}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_phantom(&PhantomSpec { grid_shape: [15, 16, 16], ..small(0) }).is_err());
        assert!(generate_phantom(&PhantomSpec { noise_sigma: -1.0, ..small(0) }).is_err());
    }
}
