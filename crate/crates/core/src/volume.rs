//! Volumes, feature grids and the coordinate conventions shared by every
//! other module.
//!
//! Grids are indexed `(x, y, z)` and stored in C order (`z` fastest). A
//! voxel index `i` on an axis of extent `n` sits at the normalized
//! coordinate `-1 + (2i + 1) / n`, so the outermost voxel centers lie half a
//! voxel inside `[-1, 1]`. Sampling beyond the outermost centers clamps to
//! the border value.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents along `(x, y, z)`.
pub type Shape3 = [usize; 3];

/// Number of voxels in a grid.
pub fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// Linear C-order offset of voxel `(x, y, z)`.
#[inline]
pub fn linear_index(shape: Shape3, x: usize, y: usize, z: usize) -> usize {
    (x * shape[1] + y) * shape[2] + z
}

/// A grid axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One of the two MRI contrasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1,
    T2,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::T1, Modality::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T2 => "t2",
        }
    }
}

/// A single-channel intensity volume with physical geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    shape: Shape3,
    spacing: [f64; 3],
    origin: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: Shape3, data: Vec<f32>) -> Result<Self> {
        Self::with_geometry(shape, [1.0; 3], [0.0; 3], data)
    }

    pub fn with_geometry(shape: Shape3, spacing: [f64; 3], origin: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::Shape(format!(
                "volume of shape {shape:?} needs {} values, got {}",
                voxel_count(shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Self { shape, spacing, origin, data })
    }

    pub fn filled(shape: Shape3, value: f32) -> Result<Self> {
        Self::new(shape, vec![value; voxel_count(shape)])
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }
    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[linear_index(self.shape, x, y, z)]
    }

    pub fn set_spacing(&mut self, spacing: [f64; 3]) {
        self.spacing = spacing;
    }

    /// View as a one-channel feature volume.
    pub fn to_feature_volume(&self) -> FeatureVolume {
        FeatureVolume { channels: 1, shape: self.shape, data: self.data.clone() }
    }

    /// Zero mean, unit variance. A standard deviation below `1e-8` is treated
    /// as 1, so constant volumes map to all zeros.
    pub fn zscore(&self) -> (Volume, f64, f64) {
        let (mean, std) = mean_std(&self.data);
        let denom = if std < 1e-8 { 1.0 } else { std };
        let data = self.data.iter().map(|&v| ((v as f64 - mean) / denom) as f32).collect();
        (Volume { data, ..self.clone() }, mean, std)
    }

    /// Crops `size` voxels starting at `offset`.
    pub fn crop(&self, offset: Shape3, size: Shape3) -> Result<Volume> {
        for a in 0..3 {
            if offset[a] + size[a] > self.shape[a] {
                return Err(Error::Domain(format!(
                    "crop {offset:?}+{size:?} exceeds volume shape {:?}",
                    self.shape
                )));
            }
        }
        let data = crop_slice(&self.data, self.shape, offset, size);
        let origin = [
            self.origin[0] + offset[0] as f64 * self.spacing[0],
            self.origin[1] + offset[1] as f64 * self.spacing[1],
            self.origin[2] + offset[2] as f64 * self.spacing[2],
        ];
        Volume::with_geometry(size, self.spacing, origin, data)
    }
}

pub(crate) fn crop_slice<T: Copy>(data: &[T], shape: Shape3, offset: Shape3, size: Shape3) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(size));
    for x in 0..size[0] {
        for y in 0..size[1] {
            let start = linear_index(shape, offset[0] + x, offset[1] + y, offset[2]);
            out.extend_from_slice(&data[start..start + size[2]]);
        }
    }
    out
}

pub(crate) fn mean_std(data: &[f32]) -> (f64, f64) {
    let n = data.len().max(1) as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_shape(shape: Shape3) -> Result<()> {
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::Domain(format!("grid extents must be >= 1, got {shape:?}")));
    }
    Ok(())
}

/// A per-voxel class-index grid (segmentation mask).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    shape: Shape3,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != voxel_count(shape) {
            return Err(Error::Shape(format!(
                "label map of shape {shape:?} needs {} values, got {}",
                voxel_count(shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for x in 0..shape[0] {
            for y in 0..shape[1] {
                for z in 0..shape[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[linear_index(self.shape, x, y, z)]
    }

    pub fn crop(&self, offset: Shape3, size: Shape3) -> Result<LabelMap> {
        for a in 0..3 {
            if offset[a] + size[a] > self.shape[a] {
                return Err(Error::Domain(format!("crop {offset:?}+{size:?} exceeds mask shape {:?}", self.shape)));
            }
        }
        LabelMap::new(size, crop_slice(&self.data, self.shape, offset, size))
    }

    /// Boolean mask of one class.
    pub fn class_mask(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }

    /// Labels at voxel centers, in the order of `CoordinateBatch::grid`.
    pub fn labels(&self) -> &[u8] {
        &self.data
    }
}

/// A C-channel feature grid, stored `[C][x][y][z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    channels: usize,
    shape: Shape3,
    data: Vec<f32>,
}

impl FeatureVolume {
    pub fn new(channels: usize, shape: Shape3, data: Vec<f32>) -> Result<Self> {
        check_shape(shape)?;
        if channels == 0 {
            return Err(Error::Domain("feature volume needs at least one channel".into()));
        }
        if data.len() != channels * voxel_count(shape) {
            return Err(Error::Shape(format!(
                "{channels} x {shape:?} feature volume needs {} values, got {}",
                channels * voxel_count(shape),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature volume data".into()));
        }
        Ok(Self { channels, shape, data })
    }

    pub fn filled(channels: usize, shape: Shape3, value: f32) -> Result<Self> {
        Self::new(channels, shape, vec![value; channels * voxel_count(shape)])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn shape(&self) -> Shape3 {
        self.shape
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[c * voxel_count(self.shape) + linear_index(self.shape, x, y, z)]
    }
}

/// Query points in normalized space with optional supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateBatch {
    points: Vec<[f64; 3]>,
    pub targets_t1: Option<Vec<f32>>,
    pub targets_t2: Option<Vec<f32>>,
    pub seg_labels: Option<Vec<u8>>,
}

impl CoordinateBatch {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Domain("coordinate batch must contain at least one point".into()));
        }
        for p in &points {
            for &c in p {
                if !c.is_finite() {
                    return Err(Error::Domain(format!("non-finite coordinate {p:?}")));
                }
                if !(-1.0..=1.0).contains(&c) {
                    return Err(Error::Domain(format!("coordinate {p:?} outside [-1, 1]^3")));
                }
            }
        }
        Ok(Self { points, targets_t1: None, targets_t2: None, seg_labels: None })
    }

    /// Every voxel center of `shape`, in C order.
    pub fn grid(shape: Shape3) -> Result<Self> {
        check_shape(shape)?;
        Self::new(grid_points(shape))
    }

    pub fn with_targets(mut self, t1: Option<Vec<f32>>, t2: Option<Vec<f32>>, labels: Option<Vec<u8>>) -> Result<Self> {
        let k = self.points.len();
        for (name, len) in [
            ("targets_t1", t1.as_ref().map(Vec::len)),
            ("targets_t2", t2.as_ref().map(Vec::len)),
            ("seg_labels", labels.as_ref().map(Vec::len)),
        ] {
            if let Some(len) = len {
                if len != k {
                    return Err(Error::Shape(format!("{name} has {len} entries for {k} points")));
                }
            }
        }
        self.targets_t1 = t1;
        self.targets_t2 = t2;
        self.seg_labels = labels;
        Ok(self)
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }
    pub fn len(&self) -> usize {
        self.points.len()
    }
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Per-coordinate feature rows, `K x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledFeatures {
    width: usize,
    data: Vec<f32>,
}

impl SampledFeatures {
    pub fn new(width: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || data.len() % width != 0 {
            return Err(Error::Shape(format!("{} values cannot form rows of width {width}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampled features".into()));
        }
        Ok(Self { width, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn rows(&self) -> usize {
        self.data.len() / self.width
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn row(&self, k: usize) -> &[f32] {
        &self.data[k * self.width..(k + 1) * self.width]
    }
}

/// Fourier features of coordinates, `K x 6L`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    bands: usize,
    data: Vec<f32>,
}

impl PositionalEncoding {
    pub fn bands(&self) -> usize {
        self.bands
    }
    pub fn width(&self) -> usize {
        6 * self.bands
    }
    pub fn rows(&self) -> usize {
        self.data.len() / self.width()
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn row(&self, k: usize) -> &[f32] {
        let w = self.width();
        &self.data[k * w..(k + 1) * w]
    }
}

/// Normalized center of a voxel: `-1 + (2 i + 1) / n` per axis.
pub fn normalize_coordinates(index: Shape3, shape: Shape3) -> Result<[f64; 3]> {
    check_shape(shape)?;
    let mut out = [0.0; 3];
    for a in 0..3 {
        if index[a] >= shape[a] {
            return Err(Error::Domain(format!("voxel index {index:?} out of range for shape {shape:?}")));
        }
        out[a] = center_coordinate(index[a], shape[a]);
    }
    Ok(out)
}

#[inline]
pub fn center_coordinate(i: usize, n: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / n as f64
}

/// Voxel centers of `shape` in normalized coordinates, C order.
pub fn grid_points(shape: Shape3) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(voxel_count(shape));
    for x in 0..shape[0] {
        let cx = center_coordinate(x, shape[0]);
        for y in 0..shape[1] {
            let cy = center_coordinate(y, shape[1]);
            for z in 0..shape[2] {
                pts.push([cx, cy, center_coordinate(z, shape[2])]);
            }
        }
    }
    pts
}

/// Trilinear interpolation of every channel at every query point.
pub fn trilinear_sample(fv: &FeatureVolume, coords: &CoordinateBatch) -> Result<SampledFeatures> {
    for p in coords.points() {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain(format!("non-finite coordinate {p:?}")));
        }
    }
    let data = kernels::grid_sample(&fv.data, fv.channels, fv.shape, coords.points());
    SampledFeatures::new(fv.channels, data)
}

/// Resamples a feature grid onto `target` by trilinear interpolation at the
/// target voxel centers.
pub fn resize_trilinear(fv: &FeatureVolume, target: Shape3) -> Result<FeatureVolume> {
    check_shape(target)?;
    let data = kernels::resize(&fv.data, fv.channels, fv.shape, target);
    FeatureVolume::new(fv.channels, target, data)
}

/// `[sin(2^l pi p_a), cos(2^l pi p_a)]` for each axis `a` and level `l < bands`.
pub fn fourier_encode(coords: &CoordinateBatch, bands: usize) -> Result<PositionalEncoding> {
    if bands == 0 {
        return Err(Error::Domain("fourier encoding needs at least one band".into()));
    }
    let data = kernels::fourier(coords.points(), bands);
    Ok(PositionalEncoding { bands, data })
}

/// Raw kernels over flat buffers, generic in the element type. The public
/// functions above and the differentiable graph both call into these.
pub mod kernels {
    use super::*;

    /// Lower corner, upper corner and fractional offset of a continuous
    /// voxel-index coordinate `u`, clamped to the valid range.
    #[inline]
    pub fn axis_lerp(u: f64, n: usize) -> (usize, usize, f64) {
        let u = u.clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    }

    /// Continuous voxel-index coordinate of a normalized coordinate.
    #[inline]
    pub fn normalized_to_index(p: f64, n: usize) -> f64 {
        ((p + 1.0) * n as f64 - 1.0) * 0.5
    }

    /// Eight corner offsets (into one channel) and weights for point `p`.
    #[inline]
    pub fn corners(shape: Shape3, p: &[f64; 3]) -> ([usize; 8], [f64; 8]) {
        let (x0, x1, tx) = axis_lerp(normalized_to_index(p[0], shape[0]), shape[0]);
        let (y0, y1, ty) = axis_lerp(normalized_to_index(p[1], shape[1]), shape[1]);
        let (z0, z1, tz) = axis_lerp(normalized_to_index(p[2], shape[2]), shape[2]);
        let xs = [(x0, 1.0 - tx), (x1, tx)];
        let ys = [(y0, 1.0 - ty), (y1, ty)];
        let zs = [(z0, 1.0 - tz), (z1, tz)];
        let mut idx = [0; 8];
        let mut w = [0.0; 8];
        let mut n = 0;
        for &(x, wx) in &xs {
            for &(y, wy) in &ys {
                for &(z, wz) in &zs {
                    idx[n] = linear_index(shape, x, y, z);
                    w[n] = wx * wy * wz;
                    n += 1;
                }
            }
        }
        (idx, w)
    }

    /// `[C][grid]` sampled at `points` into `[K][C]`.
    pub fn grid_sample<S: Scalar>(data: &[S], channels: usize, shape: Shape3, points: &[[f64; 3]]) -> Vec<S> {
        let n = voxel_count(shape);
        debug_assert_eq!(data.len(), channels * n);
        let mut out = vec![S::zero(); points.len() * channels];
        for (k, p) in points.iter().enumerate() {
            let (idx, w) = corners(shape, p);
            let row = &mut out[k * channels..(k + 1) * channels];
            for j in 0..8 {
                if w[j] == 0.0 {
                    continue;
                }
                let wj = S::from_f64(w[j]);
                for (c, r) in row.iter_mut().enumerate() {
                    *r += wj * data[c * n + idx[j]];
                }
            }
        }
        out
    }

    /// Adjoint of [`grid_sample`]: scatters `[K][C]` gradients onto `[C][grid]`.
    pub fn grid_sample_adjoint<S: Scalar>(grad: &[S], channels: usize, shape: Shape3, points: &[[f64; 3]]) -> Vec<S> {
        let n = voxel_count(shape);
        let mut out = vec![S::zero(); channels * n];
        for (k, p) in points.iter().enumerate() {
            let (idx, w) = corners(shape, p);
            let row = &grad[k * channels..(k + 1) * channels];
            for j in 0..8 {
                if w[j] == 0.0 {
                    continue;
                }
                let wj = S::from_f64(w[j]);
                for (c, &g) in row.iter().enumerate() {
                    out[c * n + idx[j]] += wj * g;
                }
            }
        }
        out
    }

    /// Interpolation taps for resizing an axis from `src` to `dst` voxels.
    pub fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
        let ratio = src as f64 / dst as f64;
        (0..dst).map(|i| axis_lerp((i as f64 + 0.5) * ratio - 0.5, src)).collect()
    }

    // Linear interpolation along the middle axis of an `[outer][n][inner]` buffer.
    fn lerp_axis<S: Scalar>(data: &[S], outer: usize, n: usize, inner: usize, taps: &[(usize, usize, f64)]) -> Vec<S> {
        let m = taps.len();
        let mut out = vec![S::zero(); outer * m * inner];
        for o in 0..outer {
            let src = &data[o * n * inner..(o + 1) * n * inner];
            let dst = &mut out[o * m * inner..(o + 1) * m * inner];
            for (i, &(i0, i1, t)) in taps.iter().enumerate() {
                let (w0, w1) = (S::from_f64(1.0 - t), S::from_f64(t));
                let a = &src[i0 * inner..(i0 + 1) * inner];
                let b = &src[i1 * inner..(i1 + 1) * inner];
                for ((d, &va), &vb) in dst[i * inner..(i + 1) * inner].iter_mut().zip(a).zip(b) {
                    *d = if t == 0.0 { va } else { w0 * va + w1 * vb };
                }
            }
        }
        out
    }

    fn lerp_axis_adjoint<S: Scalar>(grad: &[S], outer: usize, n: usize, inner: usize, taps: &[(usize, usize, f64)]) -> Vec<S> {
        let m = taps.len();
        let mut out = vec![S::zero(); outer * n * inner];
        for o in 0..outer {
            let g = &grad[o * m * inner..(o + 1) * m * inner];
            let dst = &mut out[o * n * inner..(o + 1) * n * inner];
            for (i, &(i0, i1, t)) in taps.iter().enumerate() {
                let gi = &g[i * inner..(i + 1) * inner];
                if t == 0.0 {
                    for (d, &v) in dst[i0 * inner..(i0 + 1) * inner].iter_mut().zip(gi) {
                        *d += v;
                    }
                    continue;
                }
                let (w0, w1) = (S::from_f64(1.0 - t), S::from_f64(t));
                for (j, &v) in gi.iter().enumerate() {
                    dst[i0 * inner + j] += w0 * v;
                    dst[i1 * inner + j] += w1 * v;
                }
            }
        }
        out
    }

    /// Separable trilinear resize of `[C][src]` to `[C][dst]`.
    pub fn resize<S: Scalar>(data: &[S], channels: usize, src: Shape3, dst: Shape3) -> Vec<S> {
        if src == dst {
            return data.to_vec();
        }
        let [sx, sy, sz] = src;
        let [dx, dy, dz] = dst;
        let a = lerp_axis(data, channels * sx * sy, sz, 1, &resize_taps(sz, dz));
        let b = lerp_axis(&a, channels * sx, sy, dz, &resize_taps(sy, dy));
        lerp_axis(&b, channels, sx, dy * dz, &resize_taps(sx, dx))
    }

    /// Adjoint of [`resize`].
    pub fn resize_adjoint<S: Scalar>(grad: &[S], channels: usize, src: Shape3, dst: Shape3) -> Vec<S> {
        if src == dst {
            return grad.to_vec();
        }
        let [sx, sy, sz] = src;
        let [dx, dy, dz] = dst;
        let b = lerp_axis_adjoint(grad, channels, sx, dy * dz, &resize_taps(sx, dx));
        let a = lerp_axis_adjoint(&b, channels * sx, sy, dz, &resize_taps(sy, dy));
        lerp_axis_adjoint(&a, channels * sx * sy, sz, 1, &resize_taps(sz, dz))
    }

    /// Mean over non-overlapping `factor` blocks; every extent must divide.
    pub fn avg_pool<S: Scalar>(data: &[S], channels: usize, shape: Shape3, factor: [usize; 3]) -> Vec<S> {
        let out_shape = [shape[0] / factor[0], shape[1] / factor[1], shape[2] / factor[2]];
        let n_in = voxel_count(shape);
        let n_out = voxel_count(out_shape);
        let inv = S::from_f64(1.0 / (factor[0] * factor[1] * factor[2]) as f64);
        let mut out = vec![S::zero(); channels * n_out];
        for c in 0..channels {
            let src = &data[c * n_in..(c + 1) * n_in];
            let dst = &mut out[c * n_out..(c + 1) * n_out];
            for x in 0..shape[0] {
                for y in 0..shape[1] {
                    let row = linear_index(shape, x, y, 0);
                    let orow = linear_index(out_shape, x / factor[0], y / factor[1], 0);
                    for z in 0..shape[2] {
                        dst[orow + z / factor[2]] += src[row + z];
                    }
                }
            }
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        out
    }

    pub fn avg_pool_adjoint<S: Scalar>(grad: &[S], channels: usize, shape: Shape3, factor: [usize; 3]) -> Vec<S> {
        let out_shape = [shape[0] / factor[0], shape[1] / factor[1], shape[2] / factor[2]];
        let n_in = voxel_count(shape);
        let n_out = voxel_count(out_shape);
        let inv = S::from_f64(1.0 / (factor[0] * factor[1] * factor[2]) as f64);
        let mut out = vec![S::zero(); channels * n_in];
        for c in 0..channels {
            let g = &grad[c * n_out..(c + 1) * n_out];
            let dst = &mut out[c * n_in..(c + 1) * n_in];
            for x in 0..shape[0] {
                for y in 0..shape[1] {
                    let row = linear_index(shape, x, y, 0);
                    let orow = linear_index(out_shape, x / factor[0], y / factor[1], 0);
                    for z in 0..shape[2] {
                        dst[row + z] = g[orow + z / factor[2]] * inv;
                    }
                }
            }
        }
        out
    }

    /// Fourier features, `K x 6L`, ordered axis-major then level then (sin, cos).
    pub fn fourier<S: Scalar>(points: &[[f64; 3]], bands: usize) -> Vec<S> {
        let mut out = Vec::with_capacity(points.len() * 6 * bands);
        for p in points {
            for &c in p {
                for l in 0..bands {
                    let arg = (1u64 << l) as f64 * std::f64::consts::PI * c;
                    out.push(S::from_f64(arg.sin()));
                    out.push(S::from_f64(arg.cos()));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_fv(rng: &mut ChaCha8Rng, c: usize, shape: Shape3) -> FeatureVolume {
        let data = (0..c * voxel_count(shape)).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeatureVolume::new(c, shape, data).unwrap()
    }

    // Independent 8-corner oracle: weights from the hat function directly,
    // summing over every voxel rather than just the bracketing ones.
    fn hat_oracle(fv: &FeatureVolume, p: [f64; 3]) -> Vec<f64> {
        let shape = fv.shape();
        let u: Vec<f64> = (0..3)
            .map(|a| {
                let n = shape[a] as f64;
                (((p[a] + 1.0) * n - 1.0) / 2.0).clamp(0.0, n - 1.0)
            })
            .collect();
        let mut out = vec![0.0; fv.channels()];
        for x in 0..shape[0] {
            let wx = (1.0 - (u[0] - x as f64).abs()).max(0.0);
            for y in 0..shape[1] {
                let wy = (1.0 - (u[1] - y as f64).abs()).max(0.0);
                for z in 0..shape[2] {
                    let wz = (1.0 - (u[2] - z as f64).abs()).max(0.0);
                    let w = wx * wy * wz;
                    if w == 0.0 {
                        continue;
                    }
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += w * fv.get(c, x, y, z) as f64;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn normalize_coordinate_examples() {
        assert_eq!(normalize_coordinates([0, 0, 0], [2, 2, 2]).unwrap(), [-0.5; 3]);
        assert_eq!(normalize_coordinates([0, 0, 0], [1, 1, 1]).unwrap(), [0.0; 3]);
        let c = normalize_coordinates([39, 39, 39], [40, 40, 40]).unwrap();
        for v in c {
            assert!((v - 0.975).abs() < 1e-12);
        }
        assert!(matches!(normalize_coordinates([2, 0, 0], [2, 2, 2]), Err(Error::Domain(_))));
    }

    #[test]
    fn normalize_is_strictly_monotone() {
        for n in 1..20 {
            let cs: Vec<f64> = (0..n).map(|i| normalize_coordinates([i, 0, 0], [n, 1, 1]).unwrap()[0]).collect();
            assert!(cs.windows(2).all(|w| w[0] < w[1]));
            assert!(cs.iter().all(|c| c.abs() < 1.0));
        }
    }

    #[test]
    fn constant_volume_samples_constant() {
        let fv = FeatureVolume::filled(3, [4, 5, 6], 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<[f64; 3]> = (0..200).map(|_| [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]).collect();
        let s = trilinear_sample(&fv, &CoordinateBatch::new(pts).unwrap()).unwrap();
        assert!(s.data().iter().all(|&v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn voxel_centers_reproduce_values_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fv = random_fv(&mut rng, 2, [4, 4, 4]);
        let s = trilinear_sample(&fv, &CoordinateBatch::grid([4, 4, 4]).unwrap()).unwrap();
        for (k, p) in grid_points([4, 4, 4]).iter().enumerate() {
            let _ = p;
            let (x, y, z) = (k / 16, (k / 4) % 4, k % 4);
            for c in 0..2 {
                assert_eq!(s.row(k)[c], fv.get(c, x, y, z));
            }
        }
    }

    #[test]
    fn random_points_match_hat_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fv = random_fv(&mut rng, 3, [5, 6, 7]);
        let pts: Vec<[f64; 3]> = (0..1000).map(|_| [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]).collect();
        let s = trilinear_sample(&fv, &CoordinateBatch::new(pts.clone()).unwrap()).unwrap();
        for (k, p) in pts.iter().enumerate() {
            let want = hat_oracle(&fv, *p);
            for c in 0..3 {
                assert!((s.row(k)[c] as f64 - want[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn border_clamps() {
        let fv = FeatureVolume::new(1, [2, 1, 1], vec![1.0, 3.0]).unwrap();
        let s = trilinear_sample(&fv, &CoordinateBatch::new(vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[1.0, 3.0, 2.0]);
    }

    #[test]
    fn samples_are_linear_between_adjacent_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fv = random_fv(&mut rng, 1, [6, 6, 6]);
        let a = normalize_coordinates([2, 3, 1], [6, 6, 6]).unwrap();
        let b = normalize_coordinates([3, 3, 1], [6, 6, 6]).unwrap();
        let ts: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let pts: Vec<[f64; 3]> = ts.iter().map(|t| [a[0] + t * (b[0] - a[0]), a[1], a[2]]).collect();
        let s = trilinear_sample(&fv, &CoordinateBatch::new(pts).unwrap()).unwrap();
        let (va, vb) = (s.data()[0] as f64, s.data()[10] as f64);
        for (i, t) in ts.iter().enumerate() {
            assert!((s.data()[i] as f64 - (va + t * (vb - va))).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_coordinates_rejected() {
        assert!(CoordinateBatch::new(vec![[0.0, 1.5, 0.0]]).is_err());
        assert!(CoordinateBatch::new(vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(CoordinateBatch::new(vec![]).is_err());
    }

    #[test]
    fn resize_same_shape_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fv = random_fv(&mut rng, 2, [5, 4, 3]);
        assert_eq!(resize_trilinear(&fv, [5, 4, 3]).unwrap(), fv);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let fv = FeatureVolume::filled(2, [3, 5, 2], -1.5).unwrap();
        let out = resize_trilinear(&fv, [7, 2, 9]).unwrap();
        assert_eq!(out.shape(), [7, 2, 9]);
        assert!(out.data().iter().all(|&v| (v + 1.5).abs() < 1e-6));
    }

    #[test]
    fn resize_matches_per_voxel_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fv = random_fv(&mut rng, 2, [40, 40, 20]);
        let out = resize_trilinear(&fv, [40, 40, 40]).unwrap();
        let pts = grid_points([40, 40, 40]);
        for k in (0..pts.len()).step_by(97) {
            let want = hat_oracle(&fv, pts[k]);
            let (x, y, z) = (k / 1600, (k / 40) % 40, k % 40);
            for c in 0..2 {
                assert!((out.get(c, x, y, z) as f64 - want[c]).abs() < 1e-6);
            }
        }
        assert!(resize_trilinear(&fv, [0, 2, 2]).is_err());
    }

    #[test]
    fn fourier_examples() {
        let pe = fourier_encode(&CoordinateBatch::new(vec![[0.0; 3]]).unwrap(), 6).unwrap();
        assert_eq!(pe.width(), 36);
        for (i, &v) in pe.row(0).iter().enumerate() {
            assert_eq!(v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        let pe = fourier_encode(&CoordinateBatch::new(vec![[1.0, 0.0, 0.0]]).unwrap(), 1).unwrap();
        assert!(pe.row(0)[0].abs() < 1e-6);
        assert!((pe.row(0)[1] + 1.0).abs() < 1e-6);
        assert!(fourier_encode(&CoordinateBatch::new(vec![[0.0; 3]]).unwrap(), 0).is_err());
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, src, dst) = (2, [3, 4, 5], [6, 3, 7]);
        let x: Vec<f64> = (0..c * voxel_count(src)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..c * voxel_count(dst)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ax = kernels::resize(&x, c, src, dst);
        let aty = kernels::resize_adjoint(&y, c, src, dst);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let pts: Vec<[f64; 3]> = (0..50).map(|_| [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)]).collect();
        let g: Vec<f64> = (0..50 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sx = kernels::grid_sample(&x, c, src, &pts);
        let sty = kernels::grid_sample_adjoint(&g, c, src, &pts);
        let lhs: f64 = sx.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&sty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let shape = [4, 6, 2];
        let f = [2, 3, 1];
        let x: Vec<f64> = (0..c * voxel_count(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..c * 2 * 2 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let px = kernels::avg_pool(&x, c, shape, f);
        let pty = kernels::avg_pool_adjoint(&y, c, shape, f);
        let lhs: f64 = px.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&pty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
