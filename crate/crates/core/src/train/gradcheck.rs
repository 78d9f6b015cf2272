//! Registry of analytic-vs-numerical gradient checks on tiny dimensions.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::TrainItem;
use super::losses::{item_loss, item_loss_with_teacher, LossWeights};
use crate::error::{Error, Result};
use crate::graph::gradcheck::check_gradients;
use crate::graph::{Graph, Var};
use crate::model::decoder::{Decoder, DecoderConfig, DecoderKind};
use crate::model::encoder::{Encoder, EncoderConfig, Role};
use crate::model::fusion::{cmfa_graph, CmfaReduction, Fusion, FusionConfig};
use crate::model::kd::{kd_loss_graph, t2_self_loss_graph, AttentionConfig, CrossAttention};
use crate::model::params::{Ctx, ParamStore};
use crate::model::seg::{seg_loss_graph, SegHeads};
use crate::model::{Model, ModelConfig, Toggles};
use crate::tensor::Tensor;
use crate::volume::{kernels, Modality, Volume};

/// Registered check ids.
pub const LOSS_IDS: [&str; 11] =
    ["kd", "t2self", "cmfa", "fdl", "seg", "sr", "total", "cross_attend", "decode_mlp", "decode_siren", "encode"];

const EPS: f64 = 1e-6;

/// Sizes for the checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub channels: usize,
    pub points: usize,
    pub hidden: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { channels: 4, points: 8, hidden: 6 }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn rand_points(rng: &mut ChaCha8Rng, k: usize) -> Rc<Vec<[f64; 3]>> {
    Rc::new((0..k).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect())
}

/// Parameter tensors in store order. Biases are randomized: zero biases
/// would put ReLU pre-activations exactly on the kink for inactive rows.
fn param_inputs(store: &ParamStore<f32>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    store
        .ids()
        .map(|id| {
            let t: Tensor<f64> = store.get(id).cast();
            if store.name(id).ends_with(".b") {
                Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| rng.gen_range(-0.2..0.2)).collect())
            } else {
                t
            }
        })
        .collect()
}

fn pe(g: &Graph<f64>, points: &[[f64; 3]], bands: usize) -> Var {
    g.constant(Tensor::new(vec![points.len(), 6 * bands], kernels::fourier::<f64>(points, bands)))
}

/// Largest relative gradient error of check `id` at the given sizes.
pub fn finite_diff_check(id: &str, dims: Dims, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, k) = (dims.channels, dims.points);
    if c == 0 || k == 0 || dims.hidden == 0 {
        return Err(Error::Config("finite_diff_check dims must be >= 1".into()));
    }
    let mut store = ParamStore::new();
    let report = match id {
        "kd" => {
            let z1 = rand_tensor(&mut rng, vec![k, c]);
            let z2 = rand_tensor(&mut rng, vec![k, c]);
            // The teacher is detached, so only the student carries a gradient.
            check_gradients(&[z2], EPS, usize::MAX, |g, v| kd_loss_graph(g, v[0], g.constant(z1.clone())))
        }
        "cmfa" => {
            let a = rand_tensor(&mut rng, vec![k, c]);
            let b = rand_tensor(&mut rng, vec![k + 3, c]);
            check_gradients(&[a, b], EPS, usize::MAX, |g, v| cmfa_graph(g, v[0], v[1], CmfaReduction::Mean))
        }
        "fdl" => {
            let f = Fusion::new(&mut store, &FusionConfig::default(), c, seed);
            let mut inputs = param_inputs(&store, &mut rng);
            let np = inputs.len();
            inputs.push(rand_tensor(&mut rng, vec![k, c]));
            inputs.push(rand_tensor(&mut rng, vec![k, c]));
            check_gradients(&inputs, EPS, usize::MAX, |g, v| f.fdl(&Ctx::from_vars(g, v[..np].to_vec()), v[np], v[np + 1]))
        }
        "seg" => {
            let s = SegHeads::new(&mut store, c, 3, seed)?;
            let mut inputs = param_inputs(&store, &mut rng);
            let np = inputs.len();
            inputs.push(rand_tensor(&mut rng, vec![k, c]));
            let labels = Rc::new((0..k).map(|_| rng.gen_range(0..3)).collect::<Vec<usize>>());
            check_gradients(&inputs, EPS, usize::MAX, |g, v| {
                let cx = Ctx::from_vars(g, v[..np].to_vec());
                seg_loss_graph(g, s.logits(&cx, v[np], Modality::T1), Rc::clone(&labels))
            })
        }
        "sr" | "decode_mlp" | "decode_siren" => {
            let kind = if id == "decode_siren" { DecoderKind::Siren } else { DecoderKind::Mlp };
            let cfg = DecoderConfig { kind, layers: 3, hidden: dims.hidden, omega0: 3.0, ..DecoderConfig::default() };
            let d = Decoder::new(&mut store, &cfg, c + 6, "dec", seed)?;
            let mut inputs = param_inputs(&store, &mut rng);
            let np = inputs.len();
            inputs.push(rand_tensor(&mut rng, vec![k, c + 6]));
            let targets = Rc::new((0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
            check_gradients(&inputs, EPS, usize::MAX, |g, v| {
                let out = d.forward(&Ctx::from_vars(g, v[..np].to_vec()), v[np]);
                if id == "sr" {
                    g.mse(out, Rc::clone(&targets))
                } else {
                    g.mean_all(g.sin(out, 1.0))
                }
            })
        }
        "t2self" => {
            let cfg = DecoderConfig { layers: 3, hidden: dims.hidden, ..DecoderConfig::default() };
            let d = Decoder::new(&mut store, &cfg, c + 6, "dec", seed)?;
            let mut inputs = param_inputs(&store, &mut rng);
            let np = inputs.len();
            inputs.push(rand_tensor(&mut rng, vec![c, 3, 3, 2]));
            let points = rand_points(&mut rng, k);
            let targets = Rc::new((0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>());
            check_gradients(&inputs, EPS, usize::MAX, |g, v| {
                let cx = Ctx::from_vars(g, v[..np].to_vec());
                let enc = pe(g, &points, 1);
                t2_self_loss_graph(g, |rows| d.forward(&cx, rows), v[np], Rc::clone(&points), enc, Rc::clone(&targets)).1
            })
        }
        "cross_attend" => {
            let cfg = AttentionConfig { pool_factor: [1, 1, 1], locality_bias: true, ..AttentionConfig::default() };
            let a = CrossAttention::new(&mut store, &cfg, c, seed)?;
            let mut inputs = param_inputs(&store, &mut rng);
            let np = inputs.len();
            inputs.push(rand_tensor(&mut rng, vec![c, 2, 2, 2]));
            inputs.push(rand_tensor(&mut rng, vec![c, 2, 2, 2]));
            check_gradients(&inputs, EPS, usize::MAX, |g, v| {
                let out = a.forward(&Ctx::from_vars(g, v[..np].to_vec()), v[np], v[np + 1]);
                g.mean_all(g.sin(out, 1.0))
            })
        }
        "encode" => {
            let cfg = EncoderConfig { channels: c, blocks: 1, layers: 2, growth: 2, ..EncoderConfig::default() };
            let e = Encoder::new(&mut store, &cfg, Role::Shared, Modality::T1, seed)?;
            let mut inputs = param_inputs(&store, &mut rng);
            let np = inputs.len();
            inputs.push(rand_tensor(&mut rng, vec![1, 4, 3, 4]));
            check_gradients(&inputs, EPS, 12, |g, v| {
                let out = e.forward(&Ctx::from_vars(g, v[..np].to_vec()), v[np]);
                g.mean_all(g.sin(out, 1.0))
            })
        }
        "total" => {
            let cfg = tiny_model_config(dims, seed);
            let model = Model::new(&cfg, Toggles::default())?;
            let inputs = param_inputs(&model.params, &mut rng);
            let item = random_item(&mut rng, k)?;
            let weights = LossWeights { lambda_cmfa: 0.5, lambda_fdl: 0.5, lambda_seg: 0.5, ..LossWeights::default() };
            let probe = Graph::<f64>::new();
            let base = Ctx::from_vars(&probe, inputs.iter().map(|t| probe.constant(t.clone())).collect());
            let teacher = probe.value(item_loss(&model, &base, &item, &weights)?.teacher);
            check_gradients(&inputs, EPS, 8, |g, v| {
                let cx = Ctx::from_vars(g, v.to_vec());
                item_loss_with_teacher(&model, &cx, &item, &weights, Some(&teacher)).expect("loss graph built above").total
            })
        }
        other => {
            return Err(Error::Config(format!("unregistered loss id {other:?}; registered ids: {}", LOSS_IDS.join(", "))));
        }
    };
    Ok(report.max_rel_err)
}

fn tiny_model_config(dims: Dims, seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { channels: dims.channels, blocks: 1, layers: 1, growth: 2, global_conv: false, ..EncoderConfig::default() },
        attention: AttentionConfig { pool_factor: [2, 2, 2], locality_bias: true, ..AttentionConfig::default() },
        decoder: DecoderConfig { layers: 3, hidden: dims.hidden, ..DecoderConfig::default() },
        pe_bands: 1,
        seed,
        ..ModelConfig::default()
    }
}

fn random_item(rng: &mut ChaCha8Rng, k: usize) -> Result<TrainItem> {
    let mut vol = |shape: [usize; 3]| Volume::from_fn(shape, |_, _, _| rng.gen_range(-1.0f32..1.0));
    let lr = [vol([4, 4, 2])?, vol([4, 2, 4])?];
    let points = rand_points(rng, k);
    let targets = [(0..k).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), (0..k).map(|_| rng.gen_range(-1.0f32..1.0)).collect()];
    let labels = Rc::new((0..k).map(|_| rng.gen_range(0..3)).collect());
    Ok(TrainItem { lr, points, targets, labels })
}
