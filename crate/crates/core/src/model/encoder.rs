//! Convolutional feature encoders (shared and modality-specific).

use std::fmt;
use std::str::FromStr;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::nn::{Conv3, WeightInit};
use super::params::{Ctx, Init, ParamStore};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{FeatureVolume, Modality, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    /// Residual dense blocks with local and global feature fusion.
    RdnLite,
    /// A plain stack of residual 3x3x3 convolutions.
    ResCnnLite,
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rdn-lite" => Ok(Backbone::RdnLite),
            "rescnn-lite" => Ok(Backbone::ResCnnLite),
            other => Err(Error::Config(format!("unknown backbone {other:?}; expected rdn-lite or rescnn-lite"))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::RdnLite => "rdn-lite",
            Backbone::ResCnnLite => "rescnn-lite",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Shared,
    Specific,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub channels: usize,
    /// Residual dense blocks (rdn-lite).
    pub blocks: usize,
    /// Dense layers per block (rdn-lite).
    pub layers: usize,
    pub growth: usize,
    /// Follow the global 1x1x1 fusion with a 3x3x3 convolution (rdn-lite).
    pub global_conv: bool,
    /// Residual layers (rescnn-lite).
    pub res_layers: usize,
    /// Start the final 1x1x1 projection at zero.
    pub zero_out: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone: Backbone::RdnLite,
            channels: 32,
            blocks: 3,
            layers: 3,
            growth: 16,
            global_conv: true,
            res_layers: 6,
            zero_out: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("encoder channels must be > 0".into()));
        }
        if self.backbone == Backbone::RdnLite && (self.blocks == 0 || self.layers == 0 || self.growth == 0) {
            return Err(Error::Config("rdn-lite needs blocks, layers and growth > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DenseBlock {
    layers: Vec<Conv3>,
    fuse: Conv3,
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Rdn { blocks: Vec<DenseBlock>, gff: Conv3, gff3: Option<Conv3> },
    Res { layers: Vec<Conv3> },
}

/// One encoder: `[1, X, Y, Z]` intensities to `[C, X, Y, Z]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub role: Role,
    pub modality: Modality,
    pub name: String,
    pub channels: usize,
    head: Conv3,
    body: Body,
    out: Conv3,
}

impl Encoder {
    pub fn new(store: &mut ParamStore<f32>, cfg: &EncoderConfig, role: Role, modality: Modality, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let role_name = match role {
            Role::Shared => "shared",
            Role::Specific => "specific",
        };
        let name = format!("enc.{role_name}.{}", modality.name());
        let mut init = Init::new(seed, &name);
        let c = cfg.channels;
        let head = Conv3::new(store, &mut init, &format!("{name}.head"), 1, c, 3, WeightInit::RELU);
        let body = match cfg.backbone {
            Backbone::RdnLite => {
                let blocks = (0..cfg.blocks)
                    .map(|b| {
                        let layers = (0..cfg.layers)
                            .map(|l| Conv3::new(store, &mut init, &format!("{name}.rdb{b}.conv{l}"), c + l * cfg.growth, cfg.growth, 3, WeightInit::RELU))
                            .collect();
                        let fuse = Conv3::new(store, &mut init, &format!("{name}.rdb{b}.lff"), c + cfg.layers * cfg.growth, c, 1, WeightInit::LINEAR);
                        DenseBlock { layers, fuse }
                    })
                    .collect();
                let gff = Conv3::new(store, &mut init, &format!("{name}.gff1"), cfg.blocks * c, c, 1, WeightInit::LINEAR);
                let gff3 = cfg.global_conv.then(|| Conv3::new(store, &mut init, &format!("{name}.gff3"), c, c, 3, WeightInit::LINEAR));
                Body::Rdn { blocks, gff, gff3 }
            }
            Backbone::ResCnnLite => Body::Res {
                layers: (0..cfg.res_layers)
                    .map(|l| Conv3::new(store, &mut init, &format!("{name}.res{l}"), c, c, 3, WeightInit::FanIn { gain: 1.0 }))
                    .collect(),
            },
        };
        let out_init = if cfg.zero_out { WeightInit::Zero } else { WeightInit::LINEAR };
        let out = Conv3::new(store, &mut init, &format!("{name}.out"), c, c, 1, out_init);
        Ok(Encoder { role, modality, name, channels: c, head, body, out })
    }

    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, x: Var) -> Var {
        let g = cx.g;
        let f0 = self.head.forward(cx, x);
        let feat = match &self.body {
            Body::Rdn { blocks, gff, gff3 } => {
                let mut cur = f0;
                let mut outs = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let mut inputs = vec![cur];
                    for conv in &block.layers {
                        let stacked = g.concat_leading(&inputs);
                        inputs.push(g.relu(conv.forward(cx, stacked)));
                    }
                    let fused = block.fuse.forward(cx, g.concat_leading(&inputs));
                    cur = g.add(cur, fused);
                    outs.push(cur);
                }
                let mut global = gff.forward(cx, g.concat_leading(&outs));
                if let Some(c3) = gff3 {
                    global = c3.forward(cx, global);
                }
                g.add(f0, global)
            }
            Body::Res { layers } => {
                let mut cur = f0;
                for conv in layers {
                    let r = conv.forward(cx, g.relu(cur));
                    cur = g.add(cur, r);
                }
                cur
            }
        };
        self.out.forward(cx, feat)
    }

    /// Number of scalars in this encoder.
    pub fn param_count(&self) -> usize {
        let body = match &self.body {
            Body::Rdn { blocks, gff, gff3 } => {
                blocks.iter().map(|b| b.layers.iter().map(Conv3::param_count).sum::<usize>() + b.fuse.param_count()).sum::<usize>()
                    + gff.param_count()
                    + gff3.as_ref().map_or(0, Conv3::param_count)
            }
            Body::Res { layers } => layers.iter().map(Conv3::param_count).sum(),
        };
        self.head.param_count() + body + self.out.param_count()
    }
}

/// Runs one encoder on a volume without recording gradients.
pub fn encode(store: &ParamStore<f32>, enc: &Encoder, x: &Volume) -> Result<FeatureVolume> {
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("input to {}", enc.name)));
    }
    let g = Graph::<f32>::new();
    let cx = store.bind(&g, false);
    let s = x.shape();
    let input = g.constant(Tensor::new(vec![1, s[0], s[1], s[2]], x.data().to_vec()));
    let out = g.value(enc.forward(&cx, input));
    FeatureVolume::new(enc.channels, s, out.data().to_vec())
}
