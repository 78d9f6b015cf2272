//! Arbitrary-resolution reconstruction: encode once, decode the target grid
//! in independent tiles.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{volume_tensor, GridFeatures, Model};
use crate::tensor::Tensor;
use crate::volume::{grid_points, voxel_count, LabelMap, Modality, Shape3, Volume};

pub const DEFAULT_TILE: usize = 4096;
pub const DEFAULT_MEMORY_BUDGET: usize = 2 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPlan {
    pub shape: Shape3,
    /// Coordinates per decoder call.
    pub tile: usize,
    pub modality: Modality,
    /// Upper bound on bytes held at once.
    pub memory_budget: usize,
}

impl QueryPlan {
    pub fn new(shape: Shape3, modality: Modality) -> Self {
        QueryPlan { shape, tile: DEFAULT_TILE, modality, memory_budget: DEFAULT_MEMORY_BUDGET }
    }

    pub fn with_tile(mut self, tile: usize) -> Self {
        self.tile = tile;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 {
            return Err(Error::Config("tile size must be >= 1".into()));
        }
        if self.shape.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("target shape {:?} has an empty axis", self.shape)));
        }
        Ok(())
    }
}

/// Target extents for per-axis scale factors relative to `lr`.
pub fn scaled_shape(lr: Shape3, scale: [f64; 3]) -> Result<Shape3> {
    let mut out = [0; 3];
    for a in 0..3 {
        if !(scale[a] > 0.0) || !scale[a].is_finite() {
            return Err(Error::Config(format!("scale factors must be positive, got {scale:?}")));
        }
        out[a] = ((lr[a] as f64 * scale[a]).round() as usize).max(1);
    }
    Ok(out)
}

/// Unified-grid features held outside any graph.
#[derive(Clone, Debug)]
pub struct EncodedGrids {
    inputs: [Rc<Tensor<f32>>; 2],
    shared: [Rc<Tensor<f32>>; 2],
    t2_fused: Rc<Tensor<f32>>,
    specific: Option<[Rc<Tensor<f32>>; 2]>,
}

impl EncodedGrids {
    pub fn encode(model: &Model, lr_t1: &Volume, lr_t2: &Volume) -> Result<Self> {
        let g = Graph::<f32>::new();
        let cx = model.params.bind(&g, false);
        let lr = [g.constant(volume_tensor(lr_t1)), g.constant(volume_tensor(lr_t2))];
        let grids = model.encode_grids(&cx, lr)?;
        let t2_fused = g.value(grids.t2_fused);
        if !t2_fused.is_finite() {
            return Err(Error::NonFinite("encoded feature grids".into()));
        }
        Ok(EncodedGrids {
            inputs: grids.inputs.map(|v| g.value(v)),
            shared: grids.shared.map(|v| g.value(v)),
            t2_fused,
            specific: grids.specific.map(|s| s.map(|v| g.value(v))),
        })
    }

    pub fn bytes(&self) -> usize {
        let n = |t: &Rc<Tensor<f32>>| t.len() * 4;
        n(&self.shared[0]) * (3 + if self.specific.is_some() { 2 } else { 0 })
    }

    fn bind(&self, g: &Graph<f32>) -> GridFeatures {
        let leaf = |t: &Rc<Tensor<f32>>| g.leaf_rc(Rc::clone(t), false);
        let shared = [leaf(&self.shared[0]), leaf(&self.shared[1])];
        let t2_fused = if Rc::ptr_eq(&self.t2_fused, &self.shared[1]) { shared[1] } else { leaf(&self.t2_fused) };
        GridFeatures { inputs: [leaf(&self.inputs[0]), leaf(&self.inputs[1])], shared, t2_fused, specific: self.specific.as_ref().map(|s| [leaf(&s[0]), leaf(&s[1])]) }
    }
}

/// Both reconstructed modalities and, with segmentation enhancement, the
/// predicted label map.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub volumes: [Volume; 2],
    pub seg: Option<LabelMap>,
}

impl Reconstruction {
    pub fn volume(&self, m: Modality) -> &Volume {
        &self.volumes[m.index()]
    }
}

fn tile_bytes(model: &Model, tile: usize) -> usize {
    let c = model.channels();
    let d = model.config.decoder.hidden;
    let pe = 6 * model.config.pe_bands;
    let seg = model.seg.as_ref().map_or(0, |s| 4 * (c + s.num_classes));
    // Rows kept alive per tile: sampled and fused features, decoder
    // activations for both modalities, positional encoding.
    tile * 4 * (10 * c + seg + 2 * (c + pe) + 2 * model.config.decoder.layers * d + pe)
}

/// Output geometry covering the same field of view as `reference`.
fn output_geometry(reference: &Volume, shape: Shape3) -> ([f64; 3], [f64; 3]) {
    let (s, o, n) = (reference.spacing(), reference.origin(), reference.shape());
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        let start = o[a] - 0.5 * s[a];
        spacing[a] = s[a] * n[a] as f64 / shape[a] as f64;
        origin[a] = start + 0.5 * spacing[a];
    }
    (spacing, origin)
}

/// Decodes every voxel center of `shape` for both modalities.
pub fn reconstruct(model: &Model, lr_t1: &Volume, lr_t2: &Volume, shape: Shape3, tile: usize, memory_budget: usize) -> Result<Reconstruction> {
    QueryPlan { shape, tile, modality: Modality::T1, memory_budget }.validate()?;
    let need = tile_bytes(model, tile.min(voxel_count(shape)));
    if need > memory_budget {
        return Err(Error::Memory(format!(
            "a tile of {tile} coordinates needs about {} MiB, over the {} MiB budget; use a smaller tile",
            need >> 20,
            memory_budget >> 20
        )));
    }
    let grids = EncodedGrids::encode(model, lr_t1, lr_t2)?;
    if grids.bytes() + need > memory_budget {
        return Err(Error::Memory(format!(
            "feature grids need about {} MiB, over the {} MiB budget; the inputs are too large for this budget",
            grids.bytes() >> 20,
            memory_budget >> 20
        )));
    }
    let points = grid_points(shape);
    let n = points.len();
    let mut out = [Vec::with_capacity(n), Vec::with_capacity(n)];
    let mut labels = model.seg.as_ref().map(|_| Vec::with_capacity(n));
    for chunk in points.chunks(tile) {
        let g = Graph::<f32>::new();
        let cx = model.params.bind(&g, false);
        let bound = grids.bind(&g);
        let res = model.decode_points(&cx, &bound, Rc::new(chunk.to_vec()))?;
        for m in 0..2 {
            out[m].extend_from_slice(g.value(res.pred[m]).data());
        }
        if let (Some(labels), Some(logits)) = (labels.as_mut(), res.seg_logits) {
            append_argmax(&g, logits, labels);
        }
    }
    let (spacing, origin) = output_geometry(lr_t1, shape);
    let [o1, o2] = out;
    let volumes = [Volume::with_geometry(shape, spacing, origin, o1)?, Volume::with_geometry(shape, spacing, origin, o2)?];
    let seg = labels.map(|l| LabelMap::new(shape, l)).transpose()?;
    Ok(Reconstruction { volumes, seg })
}

/// Class with the largest summed logit over both heads.
fn append_argmax(g: &Graph<f32>, logits: [Var; 2], out: &mut Vec<u8>) {
    let (a, b) = (g.value(logits[0]), g.value(logits[1]));
    let n = a.shape()[1];
    for (ra, rb) in a.data().chunks(n).zip(b.data().chunks(n)) {
        let mut best = 0;
        for c in 1..n {
            if ra[c] + rb[c] > ra[best] + rb[best] {
                best = c;
            }
        }
        out.push(best as u8);
    }
}

/// One modality of [`reconstruct`] on the requested grid.
pub fn query_volume(model: &Model, lr_t1: &Volume, lr_t2: &Volume, plan: &QueryPlan) -> Result<Volume> {
    plan.validate()?;
    let rec = reconstruct(model, lr_t1, lr_t2, plan.shape, plan.tile, plan.memory_budget)?;
    let [t1, t2] = rec.volumes;
    Ok(match plan.modality {
        Modality::T1 => t1,
        Modality::T2 => t2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::decoder::DecoderConfig;
    use crate::model::encoder::EncoderConfig;
    use crate::model::kd::AttentionConfig;
    use crate::model::{ModelConfig, Toggles};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { channels: 4, blocks: 1, layers: 1, growth: 2, global_conv: false, ..EncoderConfig::default() },
            attention: AttentionConfig { pool_factor: [2, 2, 2], ..AttentionConfig::default() },
            decoder: DecoderConfig { hidden: 8, layers: 3, ..DecoderConfig::default() },
            pe_bands: 2,
            ..ModelConfig::default()
        }
    }

    fn vol(shape: Shape3, spacing: [f64; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..voxel_count(shape)).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Volume::with_geometry(shape, spacing, [0.0; 3], data).unwrap()
    }

    fn inputs() -> (Volume, Volume) {
        (vol([8, 8, 4], [1.0, 1.0, 2.0], 1), vol([8, 2, 8], [1.0, 4.0, 1.0], 2))
    }

    #[test]
    fn output_shapes_follow_the_plan() {
        let model = Model::new(&config(), Toggles::default()).unwrap();
        let (a, b) = inputs();
        for shape in [[8, 8, 8], [13, 5, 9], [1, 1, 1]] {
            let v = query_volume(&model, &a, &b, &QueryPlan::new(shape, Modality::T2)).unwrap();
            assert_eq!(v.shape(), shape);
        }
        let rec = reconstruct(&model, &a, &b, [16, 16, 8], 100, DEFAULT_MEMORY_BUDGET).unwrap();
        assert_eq!(rec.seg.unwrap().shape(), [16, 16, 8]);
        // Same field of view as the T1 input: 8 x 8 x 8 world units.
        assert_eq!(rec.volumes[0].spacing(), [0.5, 0.5, 1.0]);
    }

    #[test]
    fn tiling_does_not_change_values() {
        let model = Model::new(&config(), Toggles::default()).unwrap();
        let (a, b) = inputs();
        let big = reconstruct(&model, &a, &b, [9, 7, 11], 4096, DEFAULT_MEMORY_BUDGET).unwrap();
        let small = reconstruct(&model, &a, &b, [9, 7, 11], 64, DEFAULT_MEMORY_BUDGET).unwrap();
        for m in 0..2 {
            for (x, y) in big.volumes[m].data().iter().zip(small.volumes[m].data()) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
        assert_eq!(big.seg, small.seg);
    }

    #[test]
    fn zeroed_decoder_gives_zero_volume() {
        let mut cfg = config();
        cfg.decoder.zero_last = true;
        let model = Model::new(&cfg, Toggles::default()).unwrap();
        let (a, b) = inputs();
        let v = query_volume(&model, &a, &b, &QueryPlan::new([5, 6, 7], Modality::T1)).unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn memory_guard_suggests_a_smaller_tile() {
        let model = Model::new(&config(), Toggles::default()).unwrap();
        let (a, b) = inputs();
        let plan = QueryPlan { memory_budget: 1 << 16, ..QueryPlan::new([32, 32, 32], Modality::T1) };
        match query_volume(&model, &a, &b, &plan) {
            Err(Error::Memory(msg)) => assert!(msg.contains("smaller tile"), "{msg}"),
            other => panic!("expected memory error, got {other:?}"),
        }
        assert!(query_volume(&model, &a, &b, &plan.clone().with_tile(16)).is_ok());
        assert!(query_volume(&model, &a, &b, &plan.with_tile(0)).is_err());
    }

    #[test]
    fn scale_factors() {
        assert_eq!(scaled_shape([40, 40, 20], [2.0; 3]).unwrap(), [80, 80, 40]);
        assert_eq!(scaled_shape([10, 10, 10], [1.5, 1.0, 0.25]).unwrap(), [15, 10, 3]);
        assert!(scaled_shape([4, 4, 4], [0.0, 1.0, 1.0]).is_err());
    }
}
