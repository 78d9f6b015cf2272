//! Residual fusion of shared and specific features plus the two auxiliary
//! alignment losses.

use std::rc::Rc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::kd::matrix;
use super::nn::{Linear, Mlp2, WeightInit};
use super::params::{Ctx, Init, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::volume::{Modality, SampledFeatures};

/// Which T2 shared features the mean-alignment loss compares against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum CmfaSource {
    PreAttention,
    PostAttention,
}

/// Reduction over channels in the mean-alignment loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum CmfaReduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub cmfa_source: CmfaSource,
    pub cmfa_reduction: CmfaReduction,
    /// Start the second projection layer at zero (fusion begins as identity).
    pub zero_init: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { cmfa_source: CmfaSource::PreAttention, cmfa_reduction: CmfaReduction::Mean, zero_init: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion {
    pub channels: usize,
    /// Per-modality `2C -> 2C -> C` projections.
    pub proj: [Mlp2; 2],
    /// Modality classifier `C -> 2`, shared by both modalities.
    pub cls: Linear,
    pub reduction: CmfaReduction,
}

impl Fusion {
    pub fn new(store: &mut ParamStore<f32>, cfg: &FusionConfig, channels: usize, seed: u64) -> Self {
        let c = channels;
        let last = if cfg.zero_init { WeightInit::Zero } else { WeightInit::LINEAR };
        let proj = Modality::BOTH.map(|m| {
            let name = format!("fusion.proj.{}", m.name());
            Mlp2::new(store, &mut Init::new(seed, &name), &name, [2 * c, 2 * c, c], last)
        });
        let cls = Linear::new(store, &mut Init::new(seed, "fusion.cls"), "fusion.cls", c, 2, WeightInit::LINEAR, true);
        Fusion { channels, proj, cls, reduction: cfg.cmfa_reduction }
    }

    /// `f = proj_m([z_shared, z_spec]) + z_shared`.
    pub fn residual_fuse<S: Scalar>(&self, cx: &Ctx<S>, z_shared: Var, z_spec: Var, m: Modality) -> Var {
        let g = cx.g;
        let h = g.concat_cols(&[z_shared, z_spec]);
        let p = self.proj[m.index()].forward(cx, h);
        g.add(p, z_shared)
    }

    /// L1 distance between per-channel means, divided by `C` under the mean
    /// reduction.
    pub fn cmfa<S: Scalar>(&self, g: &Graph<S>, z1_shared: Var, z2_shared: Var) -> Var {
        cmfa_graph(g, z1_shared, z2_shared, self.reduction)
    }

    /// `CE(cls(z1_spec), 0) + CE(cls(z2_spec), 1)`, each averaged over rows.
    pub fn fdl<S: Scalar>(&self, cx: &Ctx<S>, z1_spec: Var, z2_spec: Var) -> Var {
        let l1 = self.cls.forward(cx, z1_spec);
        let l2 = self.cls.forward(cx, z2_spec);
        fdl_from_logits(cx.g, l1, l2)
    }
}

pub fn cmfa_graph<S: Scalar>(g: &Graph<S>, a: Var, b: Var, reduction: CmfaReduction) -> Var {
    let l = g.mean_feature_l1(a, b);
    match reduction {
        CmfaReduction::Mean => l,
        CmfaReduction::Sum => g.scale(l, g.shape(a)[1] as f64),
    }
}

pub fn fdl_from_logits<S: Scalar>(g: &Graph<S>, logits_t1: Var, logits_t2: Var) -> Var {
    let k1 = g.shape(logits_t1)[0];
    let k2 = g.shape(logits_t2)[0];
    let a = g.softmax_cross_entropy(logits_t1, Rc::new(vec![0; k1]));
    let b = g.softmax_cross_entropy(logits_t2, Rc::new(vec![1; k2]));
    g.add(a, b)
}

/// Value of the mean-alignment loss (mean reduction).
pub fn cmfa_loss(z1_shared: &SampledFeatures, z2_shared: &SampledFeatures) -> Result<f64> {
    if z1_shared.width() != z2_shared.width() {
        return Err(Error::Shape(format!("cmfa_loss widths {} vs {}", z1_shared.width(), z2_shared.width())));
    }
    let g = Graph::<f64>::new();
    let (a, b) = (g.constant(matrix(z1_shared)), g.constant(matrix(z2_shared)));
    Ok(g.value(cmfa_graph(&g, a, b, CmfaReduction::Mean)).item())
}

/// Value of the discrimination loss for given classifier logits (`K x 2`).
pub fn fdl_loss_from_logits(logits_t1: &SampledFeatures, logits_t2: &SampledFeatures) -> Result<f64> {
    if logits_t1.width() != 2 || logits_t2.width() != 2 {
        return Err(Error::Shape("fdl logits must have width 2".into()));
    }
    let g = Graph::<f64>::new();
    let (a, b) = (g.constant(matrix(logits_t1)), g.constant(matrix(logits_t2)));
    Ok(g.value(fdl_from_logits(&g, a, b)).item())
}

/// Value of the discrimination loss through the fusion classifier.
pub fn fdl_loss(store: &ParamStore<f32>, fusion: &Fusion, z1_spec: &SampledFeatures, z2_spec: &SampledFeatures) -> Result<f64> {
    for z in [z1_spec, z2_spec] {
        if z.width() != fusion.channels {
            return Err(Error::Shape(format!("fdl_loss expects width {}, got {}", fusion.channels, z.width())));
        }
    }
    let store = store.cast::<f64>();
    let g = Graph::<f64>::new();
    let cx = store.bind(&g, false);
    let (a, b) = (g.constant(matrix(z1_spec)), g.constant(matrix(z2_spec)));
    Ok(g.value(fusion.fdl(&cx, a, b)).item())
}

/// `residual_fuse` on plain rows, without gradients.
pub fn residual_fuse(store: &ParamStore<f32>, fusion: &Fusion, z_shared: &SampledFeatures, z_spec: &SampledFeatures, m: Modality) -> Result<SampledFeatures> {
    if z_shared.width() != fusion.channels || z_spec.width() != fusion.channels || z_shared.rows() != z_spec.rows() {
        return Err(Error::Shape(format!(
            "residual_fuse expects two K x {} inputs, got {}x{} and {}x{}",
            fusion.channels,
            z_shared.rows(),
            z_shared.width(),
            z_spec.rows(),
            z_spec.width()
        )));
    }
    let g = Graph::<f32>::new();
    let cx = store.bind(&g, false);
    let t = |z: &SampledFeatures| crate::tensor::Tensor::from_f32(vec![z.rows(), z.width()], z.data());
    let out = fusion.residual_fuse(&cx, g.constant(t(z_shared)), g.constant(t(z_spec)), m);
    SampledFeatures::new(fusion.channels, g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::check_gradients;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(k: usize, c: usize, seed: u64) -> SampledFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampledFeatures::new(c, (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_projection_is_identity() {
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, &FusionConfig { zero_init: true, ..FusionConfig::default() }, 8, 0);
        let (zs, zp) = (rows(5, 8, 1), rows(5, 8, 2));
        assert_eq!(residual_fuse(&store, &f, &zs, &zp, Modality::T2).unwrap(), zs);
    }

    #[test]
    fn hand_set_projection() {
        // K = 1, C = 2: h = [zs, zp] (width 4), layer 1 = identity-like 4x4,
        // layer 2 = 4x2 hand matrix; ReLU keeps positive entries only.
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, &FusionConfig::default(), 2, 0);
        let p = &f.proj[0];
        let mut eye = vec![0.0f32; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        store.set(p.l1.w, Tensor::new(vec![4, 4], eye)).unwrap();
        store.set(p.l2.w, Tensor::new(vec![4, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, -1.0])).unwrap();
        let zs = SampledFeatures::new(2, vec![0.5, -0.25]).unwrap();
        let zp = SampledFeatures::new(2, vec![1.0, 3.0]).unwrap();
        let out = residual_fuse(&store, &f, &zs, &zp, Modality::T1).unwrap();
        // relu(h) = [0.5, 0, 1, 3]; W2^T relu(h) = [0.5 + 2, 0 - 3]; + zs.
        assert_eq!(out.data(), &[3.0, -3.25]);
    }

    #[test]
    fn output_width_contract() {
        for c in [8, 32] {
            let mut store = ParamStore::new();
            let f = Fusion::new(&mut store, &FusionConfig::default(), c, 1);
            assert_eq!(residual_fuse(&store, &f, &rows(3, c, 1), &rows(3, c, 2), Modality::T1).unwrap().width(), c);
            assert!(residual_fuse(&store, &f, &rows(3, c, 1), &rows(3, c + 1, 2), Modality::T1).is_err());
        }
    }

    #[test]
    fn cmfa_closed_forms() {
        let a = rows(6, 4, 1);
        assert_eq!(cmfa_loss(&a, &a).unwrap(), 0.0);
        let b = SampledFeatures::new(4, a.data().iter().map(|v| v - 0.3).collect()).unwrap();
        assert!((cmfa_loss(&a, &b).unwrap() - 0.3).abs() < 1e-6);
        let c = rows(9, 4, 2);
        let mean = |z: &SampledFeatures, ch: usize| (0..z.rows()).map(|k| z.row(k)[ch] as f64).sum::<f64>() / z.rows() as f64;
        let oracle = (0..4).map(|ch| (mean(&a, ch) - mean(&c, ch)).abs()).sum::<f64>() / 4.0;
        assert!((cmfa_loss(&a, &c).unwrap() - oracle).abs() < 1e-6);
        assert!(cmfa_loss(&a, &rows(2, 3, 0)).is_err());
    }

    #[test]
    fn fdl_closed_forms() {
        let t1 = SampledFeatures::new(2, [10.0, -10.0].repeat(5)).unwrap();
        let t2 = SampledFeatures::new(2, [-10.0, 10.0].repeat(7)).unwrap();
        assert!(fdl_loss_from_logits(&t1, &t2).unwrap() < 1e-3);
        let zeros = SampledFeatures::new(2, vec![0.0; 8]).unwrap();
        assert!((fdl_loss_from_logits(&zeros, &zeros).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-9);
        let (r1, r2) = (rows(5, 2, 3), rows(4, 2, 4));
        let ce = |z: &SampledFeatures, y: usize| {
            (0..z.rows())
                .map(|k| {
                    let r = z.row(k);
                    let lse = ((r[0] as f64).exp() + (r[1] as f64).exp()).ln();
                    lse - r[y] as f64
                })
                .sum::<f64>()
                / z.rows() as f64
        };
        assert!((fdl_loss_from_logits(&r1, &r2).unwrap() - (ce(&r1, 0) + ce(&r2, 1))).abs() < 1e-6);
    }

    #[test]
    fn fdl_descends_along_negative_gradient() {
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, &FusionConfig::default(), 4, 2);
        let (z1, z2) = (rows(8, 4, 5), rows(8, 4, 6));
        let before = fdl_loss(&store, &f, &z1, &z2).unwrap();
        let s64 = store.cast::<f64>();
        let g = Graph::<f64>::new();
        let cx = s64.bind(&g, true);
        let l = f.fdl(&cx, g.constant(matrix(&z1)), g.constant(matrix(&z2)));
        let grads = g.backward(l);
        for id in [f.cls.w, f.cls.b.unwrap()] {
            let gr = grads.get(cx.p(id)).unwrap();
            let t = store.get_mut(id);
            for (w, d) in t.data_mut().iter_mut().zip(gr.data()) {
                *w -= (1e-3 * d) as f32;
            }
        }
        assert!(fdl_loss(&store, &f, &z1, &z2).unwrap() < before);
    }

    #[test]
    fn fuse_gradients() {
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, &FusionConfig::default(), 3, 3);
        let s = store.cast::<f64>();
        let mut inputs: Vec<Tensor<f64>> = s.ids().map(|id| s.get(id).clone()).collect();
        let np = inputs.len();
        inputs.push(matrix(&rows(4, 3, 1)));
        inputs.push(matrix(&rows(4, 3, 2)));
        let r = check_gradients(&inputs, 1e-6, usize::MAX, |g, v| {
            let cx = Ctx::from_vars(g, v[..np].to_vec());
            let out = f.residual_fuse(&cx, v[np], v[np + 1], Modality::T2);
            let cm = f.cmfa(g, v[np], out);
            let fd = f.fdl(&cx, v[np + 1], out);
            g.weighted_sum(&[(g.mean_all(g.relu(out)), 1.0), (cm, 0.7), (fd, 0.3)])
        });
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    proptest! {
        #[test]
        fn cmfa_symmetric_and_row_permutation_invariant(seed in 0u64..500) {
            let (a, b) = (rows(6, 3, seed), rows(4, 3, seed + 1));
            let x = cmfa_loss(&a, &b).unwrap();
            prop_assert!((x - cmfa_loss(&b, &a).unwrap()).abs() < 1e-9);
            let mut rev = Vec::new();
            for k in (0..6).rev() {
                rev.extend_from_slice(a.row(k));
            }
            let ar = SampledFeatures::new(3, rev).unwrap();
            prop_assert!((x - cmfa_loss(&ar, &b).unwrap()).abs() < 1e-6);
        }
    }
}
