//! Cross-modal attention from the T2 shared stream (queries) to the T1
//! shared stream (keys and values), and the distillation losses built on it.

use std::rc::Rc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::nn::{Linear, WeightInit};
use super::params::{Ctx, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{voxel_count, FeatureVolume, SampledFeatures, Shape3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Average-pooling factor per axis that turns the unified grid into tokens.
    pub pool_factor: [usize; 3],
    /// Add a learnable `-beta * d^2` bias to the logits, where `d` is the
    /// token-grid distance between query and key.
    pub locality_bias: bool,
    /// Initial `beta` for the locality bias.
    pub locality_init: f64,
    /// Start `proj_v` and `proj_out` at zero (attention begins as identity).
    pub zero_init: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { heads: 1, pool_factor: [4, 4, 4], locality_bias: false, locality_init: 0.5, zero_init: false }
    }
}

impl AttentionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(Error::Config(format!("{channels} channels are not divisible into {} heads", self.heads)));
        }
        if self.pool_factor.iter().any(|&f| f == 0) {
            return Err(Error::Config("pool_factor entries must be >= 1".into()));
        }
        Ok(())
    }

    pub fn token_grid(&self, unified: Shape3) -> Result<Shape3> {
        let mut t = [0; 3];
        for a in 0..3 {
            if unified[a] % self.pool_factor[a] != 0 {
                return Err(Error::Config(format!(
                    "pool_factor {:?} does not divide the unified grid {unified:?}",
                    self.pool_factor
                )));
            }
            t[a] = unified[a] / self.pool_factor[a];
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttention {
    pub channels: usize,
    pub heads: usize,
    pub pool_factor: [usize; 3],
    pub proj_q: Linear,
    pub proj_k: Linear,
    pub proj_v: Linear,
    pub proj_out: Linear,
    pub beta: Option<ParamId>,
}

/// Negated squared token-index distances, `T x T`.
fn neg_sq_distances<S: Scalar>(tokens: Shape3) -> Tensor<S> {
    let t = voxel_count(tokens);
    let pos: Vec<[f64; 3]> = (0..tokens[0])
        .flat_map(|x| (0..tokens[1]).flat_map(move |y| (0..tokens[2]).map(move |z| [x as f64, y as f64, z as f64])))
        .collect();
    let mut d = Vec::with_capacity(t * t);
    for p in &pos {
        for q in &pos {
            d.push(S::from_f64(-((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))));
        }
    }
    Tensor::new(vec![t, t], d)
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore<f32>, cfg: &AttentionConfig, channels: usize, seed: u64) -> Result<Self> {
        cfg.validate(channels)?;
        let mut init = Init::new(seed, "attn");
        let c = channels;
        let vo = if cfg.zero_init { WeightInit::Zero } else { WeightInit::LINEAR };
        let proj_q = Linear::new(store, &mut init, "attn.q", c, c, WeightInit::LINEAR, false);
        let proj_k = Linear::new(store, &mut init, "attn.k", c, c, WeightInit::LINEAR, false);
        let proj_v = Linear::new(store, &mut init, "attn.v", c, c, vo, false);
        let proj_out = Linear::new(store, &mut init, "attn.out", c, c, vo, false);
        let beta = cfg
            .locality_bias
            .then(|| store.add("attn.beta", Tensor::scalar(cfg.locality_init as f32)));
        Ok(CrossAttention { channels, heads: cfg.heads, pool_factor: cfg.pool_factor, proj_q, proj_k, proj_v, proj_out, beta })
    }

    /// Returns the updated T2 grid and the per-head `T x T` attention weights.
    pub fn forward_with_weights<S: Scalar>(&self, cx: &Ctx<S>, f2: Var, f1: Var) -> (Var, Vec<Var>) {
        let g = cx.g;
        let s2 = g.shape(f2);
        assert_eq!(s2, g.shape(f1), "cross_attend: grids differ");
        let (c, grid) = (s2[0], [s2[1], s2[2], s2[3]]);
        assert_eq!(c, self.channels, "cross_attend: channel mismatch");
        let tokens = [grid[0] / self.pool_factor[0], grid[1] / self.pool_factor[1], grid[2] / self.pool_factor[2]];
        let t = voxel_count(tokens);
        let as_tokens = |f: Var| {
            let pooled = g.avg_pool(f, self.pool_factor);
            g.transpose(g.reshape(pooled, vec![c, t]))
        };
        let (q_in, kv_in) = (as_tokens(f2), as_tokens(f1));
        let q = self.proj_q.forward(cx, q_in);
        let k = self.proj_k.forward(cx, kv_in);
        let v = self.proj_v.forward(cx, kv_in);
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias = self.beta.map(|b| (cx.p(b), Rc::new(neg_sq_distances::<S>(tokens))));
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let mut logits = g.scale(g.matmul_t(qh, false, kh, true), scale);
            if let Some((beta, d)) = &bias {
                logits = g.add_scaled_const(logits, *beta, Rc::clone(d));
            }
            let w = g.softmax_rows(logits);
            outs.push(g.matmul(w, vh));
            weights.push(w);
        }
        let att = if self.heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let proj = self.proj_out.forward(cx, att);
        let back = g.reshape(g.transpose(proj), vec![c, tokens[0], tokens[1], tokens[2]]);
        let up = g.resize(back, grid);
        (g.add(f2, up), weights)
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, f2: Var, f1: Var) -> Var {
        self.forward_with_weights(cx, f2, f1).0
    }

    pub fn check_grid(&self, grid: Shape3) -> Result<()> {
        if (0..3).any(|a| grid[a] % self.pool_factor[a] != 0) {
            return Err(Error::Config(format!("pool_factor {:?} does not divide the unified grid {grid:?}", self.pool_factor)));
        }
        Ok(())
    }
}

fn grid_tensor(f: &FeatureVolume) -> Tensor<f32> {
    let s = f.shape();
    Tensor::new(vec![f.channels(), s[0], s[1], s[2]], f.data().to_vec())
}

/// `cross_attend` on plain feature volumes, without gradients.
pub fn cross_attend(store: &ParamStore<f32>, attn: &CrossAttention, f2_shared_up: &FeatureVolume, f1_shared_up: &FeatureVolume) -> Result<FeatureVolume> {
    if f2_shared_up.shape() != f1_shared_up.shape() || f2_shared_up.channels() != f1_shared_up.channels() {
        return Err(Error::Shape(format!(
            "cross_attend inputs differ: {}x{:?} vs {}x{:?}",
            f2_shared_up.channels(),
            f2_shared_up.shape(),
            f1_shared_up.channels(),
            f1_shared_up.shape()
        )));
    }
    if f2_shared_up.channels() != attn.channels {
        return Err(Error::Shape(format!("attention expects {} channels, got {}", attn.channels, f2_shared_up.channels())));
    }
    let shape = f2_shared_up.shape();
    attn.check_grid(shape)?;
    let g = Graph::<f32>::new();
    let cx = store.bind(&g, false);
    let f2 = g.constant(grid_tensor(f2_shared_up));
    let f1 = g.constant(grid_tensor(f1_shared_up));
    let out = g.value(attn.forward(&cx, f2, f1));
    FeatureVolume::new(attn.channels, shape, out.data().to_vec())
}

/// Voxel KD: mean over rows of `||z2 - sg(z1)||^2`. The teacher
/// `z1_shared` is detached.
pub fn kd_loss_graph<S: Scalar>(g: &Graph<S>, z2_fused: Var, z1_shared: Var) -> Var {
    let teacher = g.detach(z1_shared);
    g.mean_sq_distance(z2_fused, teacher)
}

/// Samples `f2_shared_up` at `points`, appends the Fourier encoding `pe`,
/// decodes and scores against `targets`. Returns `(pred, loss)`.
pub fn t2_self_loss_graph<S: Scalar>(
    g: &Graph<S>,
    decode: impl Fn(Var) -> Var,
    f2_shared_up: Var,
    points: Rc<Vec<[f64; 3]>>,
    pe: Var,
    targets: Rc<Vec<S>>,
) -> (Var, Var) {
    let z = g.grid_sample(f2_shared_up, points);
    let pred = decode(g.concat_cols(&[z, pe]));
    let loss = g.mse(pred, targets);
    (pred, loss)
}

fn check_same(a: &SampledFeatures, b: &SampledFeatures, what: &str) -> Result<()> {
    if a.width() != b.width() || a.rows() != b.rows() {
        return Err(Error::Shape(format!("{what}: {}x{} vs {}x{}", a.rows(), a.width(), b.rows(), b.width())));
    }
    Ok(())
}

pub(crate) fn matrix(f: &SampledFeatures) -> Tensor<f64> {
    Tensor::from_f32(vec![f.rows(), f.width()], f.data())
}

/// Value of the KD loss for two sampled feature sets.
pub fn kd_loss(z2_fused: &SampledFeatures, z1_shared: &SampledFeatures) -> Result<f64> {
    check_same(z2_fused, z1_shared, "kd_loss")?;
    let g = Graph::<f64>::new();
    let (a, b) = (g.constant(matrix(z2_fused)), g.constant(matrix(z1_shared)));
    Ok(g.value(kd_loss_graph(&g, a, b)).item())
}

/// T2 self-reconstruction on a decoded prediction: MSE against the targets.
pub fn t2_self_loss(pred: &[f32], targets: Option<&[f32]>) -> Result<f64> {
    let t = targets.ok_or_else(|| Error::Missing("t2 targets for the self-reconstruction loss".into()))?;
    if t.len() != pred.len() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), t.len())));
    }
    Ok(pred.iter().zip(t).map(|(&p, &y)| (p as f64 - y as f64).powi(2)).sum::<f64>() / t.len() as f64)
}

/// `lambda_kd * kd + lambda_t2self * t2self`.
pub fn kd_total(kd: f64, t2self: f64, lambda_kd: f64, lambda_t2self: f64) -> f64 {
    lambda_kd * kd + lambda_t2self * t2self
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_fv(c: usize, shape: Shape3, seed: u64) -> FeatureVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureVolume::new(c, shape, (0..c * voxel_count(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_rows(k: usize, c: usize, seed: u64) -> SampledFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SampledFeatures::new(c, (0..k * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_value_and_output_projections_are_identity() {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig { zero_init: true, pool_factor: [2, 2, 2], ..AttentionConfig::default() };
        let attn = CrossAttention::new(&mut store, &cfg, 4, 0).unwrap();
        let f2 = random_fv(4, [4, 4, 6], 1);
        let f1 = random_fv(4, [4, 4, 6], 2);
        assert_eq!(cross_attend(&store, &attn, &f2, &f1).unwrap(), f2);
        assert!(cross_attend(&store, &attn, &f2, &random_fv(4, [4, 4, 4], 3)).is_err());
    }

    #[test]
    fn two_token_hand_oracle() {
        // C = 2, grid 1x1x2 pooled by 1 -> two tokens.
        let mut store = ParamStore::new();
        let cfg = AttentionConfig { pool_factor: [1, 1, 1], ..AttentionConfig::default() };
        let attn = CrossAttention::new(&mut store, &cfg, 2, 0).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]);
        for l in [&attn.proj_q, &attn.proj_k, &attn.proj_v, &attn.proj_out] {
            store.set(l.w, eye.clone()).unwrap();
        }
        // Channel-major [C, 1, 1, 2]: token0 = (1, 0), token1 = (0, 2).
        let f2 = FeatureVolume::new(2, [1, 1, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let f1 = FeatureVolume::new(2, [1, 1, 2], vec![0.5, -1.0, 1.0, 0.0]).unwrap();
        let out = cross_attend(&store, &attn, &f2, &f1).unwrap();
        let q = [[1.0f64, 0.0], [0.0, 2.0]];
        let kv = [[0.5f64, 1.0], [-1.0, 0.0]];
        let s = 1.0 / 2f64.sqrt();
        for (i, qi) in q.iter().enumerate() {
            let l: Vec<f64> = kv.iter().map(|k| (qi[0] * k[0] + qi[1] * k[1]) * s).collect();
            let e0 = l[0].exp() / (l[0].exp() + l[1].exp());
            let e1 = 1.0 - e0;
            for c in 0..2 {
                let want = qi[c] + e0 * kv[0][c] + e1 * kv[1][c];
                let got = out.data()[c * 2 + i] as f64;
                assert!((got - want).abs() < 1e-6, "token {i} channel {c}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        for heads in [1, 2] {
            let mut store = ParamStore::new();
            let cfg = AttentionConfig { heads, pool_factor: [2, 2, 2], locality_bias: true, ..AttentionConfig::default() };
            let attn = CrossAttention::new(&mut store, &cfg, 4, 1).unwrap();
            let g = Graph::<f32>::new();
            let cx = store.bind(&g, false);
            let f2 = g.constant(grid_tensor(&random_fv(4, [4, 6, 4], 5)));
            let f1 = g.constant(grid_tensor(&random_fv(4, [4, 6, 4], 6)));
            let (_, ws) = attn.forward_with_weights(&cx, f2, f1);
            for w in ws {
                let v = g.value(w);
                let t = v.shape()[0];
                for row in v.data().chunks(t) {
                    assert!((row.iter().map(|&x| x as f64).sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn key_value_permutation_invariance() {
        // 1x1x4 token grid: permuting T1 tokens leaves each output unchanged.
        let mut store = ParamStore::new();
        let cfg = AttentionConfig { pool_factor: [1, 1, 1], ..AttentionConfig::default() };
        let attn = CrossAttention::new(&mut store, &cfg, 3, 2).unwrap();
        let f2 = random_fv(3, [1, 1, 4], 7);
        let f1 = random_fv(3, [1, 1, 4], 8);
        let perm = [2usize, 0, 3, 1];
        let mut pdata = vec![0.0; 12];
        for c in 0..3 {
            for (j, &i) in perm.iter().enumerate() {
                pdata[c * 4 + j] = f1.data()[c * 4 + i];
            }
        }
        let f1p = FeatureVolume::new(3, [1, 1, 4], pdata).unwrap();
        let a = cross_attend(&store, &attn, &f2, &f1).unwrap();
        let b = cross_attend(&store, &attn, &f2, &f1p).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_wrt_projections() {
        for locality in [false, true] {
            let mut store = ParamStore::new();
            let cfg = AttentionConfig { heads: 2, pool_factor: [2, 2, 2], locality_bias: locality, ..AttentionConfig::default() };
            let attn = CrossAttention::new(&mut store, &cfg, 4, 3).unwrap();
            let store = store.cast::<f64>();
            let mut inputs: Vec<Tensor<f64>> = store.ids().map(|id| store.get(id).clone()).collect();
            let np = inputs.len();
            inputs.push(grid_tensor(&random_fv(4, [4, 4, 4], 9)).cast());
            inputs.push(grid_tensor(&random_fv(4, [4, 4, 4], 10)).cast());
            let w = Rc::new(random_fv(4, [4, 4, 4], 11).data().iter().map(|&v| v as f64).collect::<Vec<_>>());
            let r = check_gradients(&inputs, 1e-6, usize::MAX, |g, v| {
                let cx = Ctx::from_vars(g, v[..np].to_vec());
                let out = attn.forward(&cx, v[np], v[np + 1]);
                let flat = g.reshape(out, vec![256]);
                g.mse(flat, Rc::clone(&w))
            });
            assert!(r.max_rel_err < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn kd_closed_forms() {
        let a = random_rows(8, 4, 1);
        assert_eq!(kd_loss(&a, &a).unwrap(), 0.0);
        let shifted = SampledFeatures::new(4, a.data().iter().map(|v| v + 0.5).collect()).unwrap();
        assert!((kd_loss(&shifted, &a).unwrap() - 0.25 * 4.0).abs() < 1e-6);
        let b = random_rows(8, 4, 2);
        let mut oracle = 0.0;
        for k in 0..8 {
            for c in 0..4 {
                oracle += (a.row(k)[c] as f64 - b.row(k)[c] as f64).powi(2);
            }
        }
        assert!((kd_loss(&a, &b).unwrap() - oracle / 8.0).abs() < 1e-6);
        assert!(kd_loss(&a, &random_rows(7, 4, 3)).is_err());
    }

    #[test]
    fn kd_teacher_receives_no_gradient() {
        let g = Graph::<f64>::new();
        let a = g.param(matrix(&random_rows(3, 2, 1)));
        let b = g.param(matrix(&random_rows(3, 2, 2)));
        let l = kd_loss_graph(&g, a, b);
        let grads = g.backward(l);
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn t2_self_closed_forms() {
        assert_eq!(t2_self_loss(&[1.0, 2.0], Some(&[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(t2_self_loss(&[0.0; 5], Some(&[1.0; 5])).unwrap(), 1.0);
        assert!(matches!(t2_self_loss(&[0.0], None), Err(Error::Missing(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f32> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f32> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let oracle = p.iter().zip(&t).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / 20.0;
        assert!((t2_self_loss(&p, Some(&t)).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn t2_self_graph_with_stub_decoders() {
        let g = Graph::<f64>::new();
        let grid = g.constant(grid_tensor(&random_fv(2, [3, 3, 3], 1)).cast());
        let pts = Rc::new(vec![[0.1, -0.2, 0.3], [0.0, 0.5, -0.9]]);
        let pe = g.constant(Tensor::new(vec![2, 6], crate::volume::kernels::fourier(&pts, 1)));
        let targets = Rc::new(vec![0.3, -0.7]);
        let exact = g.constant(Tensor::new(vec![2, 1], vec![0.3, -0.7]));
        let (_, l) = t2_self_loss_graph(&g, |_| exact, grid, Rc::clone(&pts), pe, Rc::clone(&targets));
        assert_eq!(g.value(l).item(), 0.0);
        let zero = g.constant(Tensor::zeros(vec![2, 1]));
        let (_, l) = t2_self_loss_graph(&g, |_| zero, grid, pts, pe, Rc::new(vec![1.0, 1.0]));
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn kd_total_arithmetic() {
        assert_eq!(kd_total(0.5, 0.25, 1.0, 1.0), 0.75);
        assert_eq!(kd_total(0.5, 0.25, 0.0, 1.0), 0.25);
        assert!((kd_total(0.1, 0.2, 2.0, 0.5) - 0.3).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kd_nonnegative_and_zero_only_on_equality(seed in 0u64..1000, eps in 1e-3f32..1.0) {
            let a = random_rows(5, 3, seed);
            let mut d = a.data().to_vec();
            d[(seed % 15) as usize] += eps;
            let b = SampledFeatures::new(3, d).unwrap();
            prop_assert!(kd_loss(&a, &b).unwrap() > 0.0);
            prop_assert_eq!(kd_loss(&a, &a).unwrap(), 0.0);
        }
    }
}
