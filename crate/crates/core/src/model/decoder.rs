//! Coordinate decoders: features plus positional encoding to one intensity.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::nn::{Linear, WeightInit};
use super::params::{Ctx, Init, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// ReLU multilayer perceptron.
    Mlp,
    /// Sine activations `sin(omega0 (W x + b))`.
    Siren,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// Number of linear layers, including the output layer.
    pub layers: usize,
    pub hidden: usize,
    pub omega0: f64,
    /// Start the output layer at zero.
    pub zero_last: bool,
    /// One decoder per modality instead of one shared decoder.
    pub per_modality: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { kind: DecoderKind::Mlp, layers: 4, hidden: 64, omega0: 30.0, zero_last: false, per_modality: false }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.hidden == 0 {
            return Err(Error::Config("decoder needs at least 2 layers and hidden > 0".into()));
        }
        if !(self.omega0 > 0.0) {
            return Err(Error::Config("siren omega0 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub kind: DecoderKind,
    pub input: usize,
    pub omega0: f64,
    pub layers: Vec<Linear>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore<f32>, cfg: &DecoderConfig, input: usize, name: &str, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed, name);
        let n = cfg.layers;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let fan_in = if i == 0 { input } else { cfg.hidden };
            let out = if i + 1 == n { 1 } else { cfg.hidden };
            let w = if i + 1 == n && cfg.zero_last {
                WeightInit::Zero
            } else {
                match cfg.kind {
                    DecoderKind::Mlp if i + 1 == n => WeightInit::LINEAR,
                    DecoderKind::Mlp => WeightInit::RELU,
                    DecoderKind::Siren if i == 0 => WeightInit::Uniform { bound: 1.0 / fan_in as f64 },
                    DecoderKind::Siren => WeightInit::Uniform { bound: (6.0 / fan_in as f64).sqrt() / cfg.omega0 },
                }
            };
            layers.push(Linear::new(store, &mut init, &format!("{name}.l{i}"), fan_in, out, w, true));
        }
        Ok(Decoder { kind: cfg.kind, input, omega0: cfg.omega0, layers })
    }

    /// `[K, input]` rows to `[K, 1]` intensities.
    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, rows: Var) -> Var {
        let g = cx.g;
        let last = self.layers.len() - 1;
        let mut h = rows;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, h);
            if i < last {
                h = match self.kind {
                    DecoderKind::Mlp => g.relu(h),
                    DecoderKind::Siren => g.sin(h, self.omega0),
                };
            }
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }
}

/// Decodes `K` rows of width `decoder.input` without gradients.
pub fn decode(store: &ParamStore<f32>, decoder: &Decoder, rows: &[f32]) -> Result<Vec<f32>> {
    if rows.len() % decoder.input != 0 {
        return Err(Error::Shape(format!("{} values are not rows of width {}", rows.len(), decoder.input)));
    }
    let g = Graph::<f32>::new();
    let cx = store.bind(&g, false);
    let k = rows.len() / decoder.input;
    let x = g.constant(Tensor::new(vec![k, decoder.input], rows.to_vec()));
    Ok(g.value(decoder.forward(&cx, x)).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(k: usize, w: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k * w).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        for kind in [DecoderKind::Mlp, DecoderKind::Siren] {
            let mut store = ParamStore::new();
            let cfg = DecoderConfig { kind, zero_last: true, ..DecoderConfig::default() };
            let d = Decoder::new(&mut store, &cfg, 10, "dec", 0).unwrap();
            assert!(decode(&store, &d, &rows(7, 10, 1)).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn siren_single_neuron_chain() {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig { kind: DecoderKind::Siren, layers: 3, hidden: 1, omega0: 30.0, ..DecoderConfig::default() };
        let d = Decoder::new(&mut store, &cfg, 1, "dec", 0).unwrap();
        let set = |s: &mut ParamStore<f32>, name: &str, v: f32| {
            let id = s.find(name).unwrap();
            s.set(id, Tensor::new(s.get(id).shape().to_vec(), vec![v])).unwrap();
        };
        set(&mut store, "dec.l0.w", 0.02);
        set(&mut store, "dec.l0.b", 0.01);
        set(&mut store, "dec.l1.w", 0.5);
        set(&mut store, "dec.l1.b", -0.03);
        set(&mut store, "dec.l2.w", 2.0);
        set(&mut store, "dec.l2.b", 0.25);
        let x = 0.7f64;
        let h1 = (30.0 * (0.02 * x + 0.01)).sin();
        let h2 = (30.0 * (0.5 * h1 - 0.03)).sin();
        let want = 2.0 * h2 + 0.25;
        let got = decode(&store, &d, &[0.7]).unwrap()[0];
        assert!((got as f64 - want).abs() < 1e-5, "{got} vs {want}");
    }

    #[test]
    fn pointwise_under_permutation() {
        let mut store = ParamStore::new();
        let d = Decoder::new(&mut store, &DecoderConfig::default(), 6, "dec", 2).unwrap();
        let r = rows(9, 6, 3);
        let out = decode(&store, &d, &r).unwrap();
        assert_eq!(out.len(), 9);
        let perm = [4usize, 0, 8, 2, 6, 1, 3, 7, 5];
        let permuted: Vec<f32> = perm.iter().flat_map(|&i| r[i * 6..i * 6 + 6].to_vec()).collect();
        let pout = decode(&store, &d, &permuted).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert!((pout[j] - out[i]).abs() < 1e-6);
        }
        assert!(decode(&store, &d, &r[..10]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [DecoderKind::Mlp, DecoderKind::Siren] {
            let mut store = ParamStore::new();
            let cfg = DecoderConfig { kind, hidden: 5, omega0: 3.0, ..DecoderConfig::default() };
            let d = Decoder::new(&mut store, &cfg, 4, "dec", 4).unwrap();
            let store = store.cast::<f64>();
            // Zero biases put ReLU pre-activations exactly on the kink for rows
            // whose previous layer is fully inactive.
            let mut inputs: Vec<Tensor<f64>> = store
                .ids()
                .enumerate()
                .map(|(i, id)| {
                    let t = store.get(id);
                    if store.name(id).ends_with(".b") {
                        Tensor::from_f32(t.shape().to_vec(), &rows(1, t.len(), 10 + i as u64))
                    } else {
                        t.clone()
                    }
                })
                .collect();
            inputs.push(Tensor::from_f32(vec![6, 4], &rows(6, 4, 5)));
            let r = check_gradients(&inputs, 1e-6, usize::MAX, |g, v| {
                let cx = Ctx::from_vars(g, v[..v.len() - 1].to_vec());
                let out = d.forward(&cx, v[v.len() - 1]);
                let sq = g.mse(out, std::rc::Rc::new(vec![0.3; 6]));
                sq
            });
            assert!(r.max_rel_err < 1e-3, "{kind:?} {r:?}");
        }
    }
}
