//! Turning patch pairs into supervised coordinate batches.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::synth::PatchPair;
use crate::volume::{center_coordinate, voxel_count, Shape3, Volume};

/// One training item: both LR inputs and `K` supervised HR coordinates.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub lr: [Volume; 2],
    pub points: Rc<Vec<[f64; 3]>>,
    pub targets: [Vec<f32>; 2],
    pub labels: Rc<Vec<usize>>,
}

fn index_to_point(i: usize, shape: Shape3) -> [f64; 3] {
    let z = i % shape[2];
    let y = (i / shape[2]) % shape[1];
    let x = i / (shape[1] * shape[2]);
    [center_coordinate(x, shape[0]), center_coordinate(y, shape[1]), center_coordinate(z, shape[2])]
}

impl TrainItem {
    /// Supervision at the given HR voxel indices (C order).
    pub fn at_indices(pair: &PatchPair, indices: &[usize]) -> Result<Self> {
        let shape = pair.hr_t1.shape();
        let n = voxel_count(shape);
        if indices.is_empty() {
            return Err(Error::Domain("a training item needs at least one coordinate".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Domain(format!("voxel index {bad} outside a patch of {n} voxels")));
        }
        let pick = |v: &Volume| indices.iter().map(|&i| v.data()[i]).collect::<Vec<f32>>();
        Ok(TrainItem {
            lr: [pair.lr_t1.clone(), pair.lr_t2.clone()],
            points: Rc::new(indices.iter().map(|&i| index_to_point(i, shape)).collect()),
            targets: [pick(&pair.hr_t1), pick(&pair.hr_t2)],
            labels: Rc::new(indices.iter().map(|&i| pair.seg_mask.data()[i] as usize).collect()),
        })
    }

    /// `k` voxel centers drawn uniformly with replacement. With
    /// `lesion_fraction > 0`, that share of draws comes from voxels labelled
    /// `lesion_class` when the patch contains any.
    pub fn sample(pair: &PatchPair, k: usize, lesion_fraction: f64, lesion_class: u8, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("coords_per_patch must be >= 1".into()));
        }
        let n = voxel_count(pair.hr_t1.shape());
        let lesion: Vec<usize> = if lesion_fraction > 0.0 {
            pair.seg_mask.data().iter().enumerate().filter(|(_, &l)| l == lesion_class).map(|(i, _)| i).collect()
        } else {
            Vec::new()
        };
        let indices: Vec<usize> = (0..k)
            .map(|_| {
                if !lesion.is_empty() && rng.gen_bool(lesion_fraction.min(1.0)) {
                    lesion[rng.gen_range(0..lesion.len())]
                } else {
                    rng.gen_range(0..n)
                }
            })
            .collect();
        Self::at_indices(pair, &indices)
    }

    /// Every HR voxel of the patch, in C order.
    pub fn full_grid(pair: &PatchPair) -> Result<Self> {
        let n = voxel_count(pair.hr_t1.shape());
        Self::at_indices(pair, &(0..n).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
