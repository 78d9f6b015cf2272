//! Per-coordinate segmentation heads and the fusion of their logits back
//! into the reconstruction features.

use std::rc::Rc;

use super::kd::matrix;
use super::nn::{Mlp2, WeightInit};
use super::params::{Ctx, Init, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{Modality, SampledFeatures};

#[derive(Clone, Debug, PartialEq)]
pub struct SegHeads {
    pub channels: usize,
    pub num_classes: usize,
    /// `C -> C -> N` per modality.
    pub heads: [Mlp2; 2],
    /// `C + N -> C -> C` per modality, no residual.
    pub fusion: [Mlp2; 2],
}

impl SegHeads {
    pub fn new(store: &mut ParamStore<f32>, channels: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {num_classes}")));
        }
        let (c, n) = (channels, num_classes);
        let heads = Modality::BOTH.map(|m| {
            let name = format!("seg.head.{}", m.name());
            Mlp2::new(store, &mut Init::new(seed, &name), &name, [c, c, n], WeightInit::LINEAR)
        });
        let fusion = Modality::BOTH.map(|m| {
            let name = format!("seg.fusion.{}", m.name());
            Mlp2::new(store, &mut Init::new(seed, &name), &name, [c + n, c, c], WeightInit::LINEAR)
        });
        Ok(SegHeads { channels, num_classes, heads, fusion })
    }

    pub fn logits<S: Scalar>(&self, cx: &Ctx<S>, f: Var, m: Modality) -> Var {
        self.heads[m.index()].forward(cx, f)
    }

    pub fn fuse_back<S: Scalar>(&self, cx: &Ctx<S>, f: Var, logits: Var, m: Modality) -> Var {
        let h = cx.g.concat_cols(&[f, logits]);
        self.fusion[m.index()].forward(cx, h)
    }
}

pub fn seg_loss_graph<S: Scalar>(g: &Graph<S>, logits: Var, labels: Rc<Vec<usize>>) -> Var {
    g.softmax_cross_entropy(logits, labels)
}

fn rows_tensor(z: &SampledFeatures) -> Tensor<f32> {
    Tensor::from_f32(vec![z.rows(), z.width()], z.data())
}

/// Segmentation logits for plain rows, without gradients.
pub fn seg_logits(store: &ParamStore<f32>, seg: &SegHeads, f: &SampledFeatures, m: Modality) -> Result<SampledFeatures> {
    if f.width() != seg.channels {
        return Err(Error::Shape(format!("seg head expects width {}, got {}", seg.channels, f.width())));
    }
    let g = Graph::<f32>::new();
    let cx = store.bind(&g, false);
    let out = seg.logits(&cx, g.constant(rows_tensor(f)), m);
    SampledFeatures::new(seg.num_classes, g.value(out).data().to_vec())
}

pub fn fuse_back(store: &ParamStore<f32>, seg: &SegHeads, f: &SampledFeatures, logits: &SampledFeatures, m: Modality) -> Result<SampledFeatures> {
    if f.width() != seg.channels || logits.width() != seg.num_classes || f.rows() != logits.rows() {
        return Err(Error::Shape(format!(
            "fuse_back expects K x {} features and K x {} logits",
            seg.channels, seg.num_classes
        )));
    }
    let g = Graph::<f32>::new();
    let cx = store.bind(&g, false);
    let out = seg.fuse_back(&cx, g.constant(rows_tensor(f)), g.constant(rows_tensor(logits)), m);
    SampledFeatures::new(seg.channels, g.value(out).data().to_vec())
}

/// Mean softmax cross-entropy of `K x N` logits.
pub fn seg_loss(logits: &SampledFeatures, labels: &[u8]) -> Result<f64> {
    if labels.len() != logits.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), logits.rows())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= logits.width()) {
        return Err(Error::Domain(format!("label {bad} out of range for {} classes", logits.width())));
    }
    let g = Graph::<f64>::new();
    let l = g.constant(matrix(logits));
    let y = Rc::new(labels.iter().map(|&v| v as usize).collect());
    Ok(g.value(seg_loss_graph(&g, l, y)).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(k: usize, c: usize, seed: u64) -> SampledFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampledFeatures::new(c, (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_mlp(store: &mut ParamStore<f32>, m: &Mlp2) {
        for id in [m.l1.w, m.l1.b.unwrap(), m.l2.w, m.l2.b.unwrap()] {
            let z = Tensor::zeros(store.get(id).shape().to_vec());
            store.set(id, z).unwrap();
        }
    }

    #[test]
    fn zero_head_and_zero_fusion() {
        let mut store = ParamStore::new();
        let seg = SegHeads::new(&mut store, 8, 3, 0).unwrap();
        zero_mlp(&mut store, &seg.heads[0]);
        zero_mlp(&mut store, &seg.fusion[1]);
        let f = rows(5, 8, 1);
        let l = seg_logits(&store, &seg, &f, Modality::T1).unwrap();
        assert_eq!((l.rows(), l.width()), (5, 3));
        assert!(l.data().iter().all(|&v| v == 0.0));
        let out = fuse_back(&store, &seg, &f, &rows(5, 3, 2), Modality::T2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_logits_and_fusion() {
        let mut store = ParamStore::new();
        let seg = SegHeads::new(&mut store, 2, 2, 0).unwrap();
        let h = &seg.heads[0];
        store.set(h.l1.w, Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        store.set(h.l2.w, Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.5, 3.0])).unwrap();
        store.set(h.l2.b.unwrap(), Tensor::new(vec![2], vec![0.1, 0.0])).unwrap();
        let f = SampledFeatures::new(2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let l = seg_logits(&store, &seg, &f, Modality::T1).unwrap();
        // Row 0: relu = (1, 2) -> (2 + 1 + 0.1, -1 + 6); row 1: relu = (0, 0.5) -> (0.25 + 0.1, 1.5).
        let want = [3.1f32, 5.0, 0.35, 1.5];
        for (a, b) in l.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
        let fm = &seg.fusion[0];
        let mut w1 = vec![0.0f32; 8];
        w1[0] = 1.0; // feature 0 -> hidden 0
        w1[2 * 2 + 1] = 1.0; // logit 0 -> hidden 1
        store.set(fm.l1.w, Tensor::new(vec![4, 2], w1)).unwrap();
        store.set(fm.l2.w, Tensor::new(vec![2, 2], vec![1.0, 1.0, -1.0, 2.0])).unwrap();
        let out = fuse_back(&store, &seg, &f, &l, Modality::T1).unwrap();
        // Row 0: hidden (1, 3.1) -> (1 - 3.1, 1 + 6.2).
        assert!((out.row(0)[0] - -2.1).abs() < 1e-5 && (out.row(0)[1] - 7.2).abs() < 1e-5);
    }

    #[test]
    fn widths() {
        for c in [8, 32] {
            let mut store = ParamStore::new();
            let seg = SegHeads::new(&mut store, c, 3, 1).unwrap();
            let f = rows(4, c, 1);
            let l = seg_logits(&store, &seg, &f, Modality::T2).unwrap();
            assert_eq!(fuse_back(&store, &seg, &f, &l, Modality::T2).unwrap().width(), c);
            assert!(fuse_back(&store, &seg, &f, &rows(4, 2, 1), Modality::T2).is_err());
        }
        assert!(SegHeads::new(&mut ParamStore::new(), 4, 1, 0).is_err());
    }

    #[test]
    fn seg_loss_closed_forms() {
        let perfect = SampledFeatures::new(3, vec![10.0, -10.0, -10.0, -10.0, 10.0, -10.0]).unwrap();
        assert!(seg_loss(&perfect, &[0, 1]).unwrap() < 1e-3);
        let uniform = SampledFeatures::new(3, vec![0.0; 12]).unwrap();
        assert!((seg_loss(&uniform, &[0, 1, 2, 1]).unwrap() - 3f64.ln()).abs() < 1e-9);
        let r = rows(6, 3, 5);
        let labels = [0u8, 2, 1, 1, 0, 2];
        let oracle: f64 = (0..6)
            .map(|k| {
                let row = r.row(k);
                let m = row.iter().cloned().fold(f32::MIN, f32::max) as f64;
                let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
                lse - row[labels[k] as usize] as f64
            })
            .sum::<f64>()
            / 6.0;
        assert!((seg_loss(&r, &labels).unwrap() - oracle).abs() < 1e-6);
        assert!(matches!(seg_loss(&r, &[0, 1, 2, 3, 0, 0]), Err(Error::Domain(_))));
    }

    #[test]
    fn seg_path_gradients() {
        let mut store = ParamStore::new();
        let seg = SegHeads::new(&mut store, 3, 3, 2).unwrap();
        let s = store.cast::<f64>();
        let mut inputs: Vec<Tensor<f64>> = s.ids().map(|id| s.get(id).clone()).collect();
        let np = inputs.len();
        inputs.push(matrix(&rows(5, 3, 3)));
        let labels = Rc::new(vec![0usize, 1, 2, 1, 0]);
        let r = check_gradients(&inputs, 1e-6, usize::MAX, |g, v| {
            let cx = Ctx::from_vars(g, v[..np].to_vec());
            let l = seg.logits(&cx, v[np], Modality::T1);
            let h = seg.fuse_back(&cx, v[np], l, Modality::T1);
            let ce = seg_loss_graph(g, l, Rc::clone(&labels));
            g.add(ce, g.mean_all(h))
        });
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    proptest! {
        #[test]
        fn seg_loss_shift_invariant(seed in 0u64..500, shift in -5.0f32..5.0) {
            let r = rows(4, 3, seed);
            let labels = [0u8, 1, 2, 0];
            let shifted = SampledFeatures::new(3, r.data().iter().enumerate().map(|(i, v)| v + shift * (1 + i / 3) as f32).collect()).unwrap();
            prop_assert!((seg_loss(&r, &labels).unwrap() - seg_loss(&shifted, &labels).unwrap()).abs() < 1e-6);
        }
    }
}
