//! Network modules and their assembly into the full model.
//!
//! One forward pass per item runs in two stages. [`Model::encode_grids`]
//! encodes both low-resolution inputs, resamples the features onto the
//! unified grid and applies cross-modal attention. [`Model::decode_points`]
//! samples those grids at query coordinates, fuses, runs the segmentation
//! heads and decodes intensities.

pub mod decoder;
pub mod encoder;
pub mod fusion;
pub mod kd;
pub mod nn;
pub mod params;
pub mod seg;

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::{kernels, Modality, Shape3, Volume};
use decoder::{Decoder, DecoderConfig};
use encoder::{Encoder, EncoderConfig, Role};
use fusion::{CmfaSource, Fusion, FusionConfig};
use kd::{AttentionConfig, CrossAttention};
use params::{Ctx, ParamStore};
use seg::SegHeads;

/// Which optional components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub enable_mmf: bool,
    pub enable_kd_attn: bool,
    pub enable_sel: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Preset::Full.toggles()
    }
}

/// The four ablation rows: each adds one component to the previous row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Baseline,
    Mmf,
    MmfKd,
    Full,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Baseline, Preset::Mmf, Preset::MmfKd, Preset::Full];

    pub fn toggles(self) -> Toggles {
        let (enable_mmf, enable_kd_attn, enable_sel) = match self {
            Preset::Baseline => (false, false, false),
            Preset::Mmf => (true, false, false),
            Preset::MmfKd => (true, true, false),
            Preset::Full => (true, true, true),
        };
        Toggles { enable_mmf, enable_kd_attn, enable_sel }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::Mmf => "mmf",
            Preset::MmfKd => "mmf-kd",
            Preset::Full => "full",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?}; expected baseline, mmf, mmf-kd or full")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub num_classes: usize,
    /// Fourier frequency levels per axis; the encoding has `6 * pe_bands` columns.
    pub pe_bands: usize,
    /// Add the trilinearly sampled LR intensity to each decoded value, so the
    /// decoder learns a correction to interpolation.
    pub intensity_skip: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            num_classes: 3,
            pe_bands: 6,
            intensity_skip: false,
            seed: 0,
        }
    }
}

/// The assembled network. Components disabled by the toggles are never
/// constructed, so their parameters do not exist.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub toggles: Toggles,
    pub params: ParamStore<f32>,
    pub shared: [Encoder; 2],
    pub specific: Option<[Encoder; 2]>,
    pub attention: Option<CrossAttention>,
    pub fusion: Option<Fusion>,
    pub seg: Option<SegHeads>,
    /// One shared decoder, or one per modality.
    pub decoders: Vec<Decoder>,
}

/// Feature grids on the unified grid, `[C, X, Y, Z]` each.
#[derive(Clone, Copy, Debug)]
pub struct GridFeatures {
    /// The `[1, X, Y, Z]` LR inputs.
    pub inputs: [Var; 2],
    pub shared: [Var; 2],
    /// The T2 shared grid after attention; equals `shared[1]` without it.
    pub t2_fused: Var,
    pub specific: Option<[Var; 2]>,
}

/// Everything computed at a set of query points, `K` rows each.
#[derive(Clone, Copy, Debug)]
pub struct PointOutputs {
    pub z1_shared: Var,
    pub z2_shared: Var,
    pub z2_fused: Var,
    pub specific: Option<[Var; 2]>,
    /// Fused features `f_m` (before segmentation enhancement).
    pub fused: [Var; 2],
    pub seg_logits: Option<[Var; 2]>,
    /// Decoder features `h_m` (without the positional encoding).
    pub final_features: [Var; 2],
    /// `[K, 1]` intensities per modality.
    pub pred: [Var; 2],
    /// Sampled LR intensities added to `pred` when `intensity_skip` is on.
    pub skip: Option<[Var; 2]>,
    /// Positional encoding rows used for decoding.
    pub pe: Var,
}

/// Elementwise maximum of the two input extents.
pub fn unified_grid(a: Shape3, b: Shape3) -> Shape3 {
    [a[0].max(b[0]), a[1].max(b[1]), a[2].max(b[2])]
}

pub(crate) fn volume_tensor<S: Scalar>(v: &Volume) -> Tensor<S> {
    let s = v.shape();
    Tensor::from_f32(vec![1, s[0], s[1], s[2]], v.data())
}

impl Model {
    pub fn new(config: &ModelConfig, toggles: Toggles) -> Result<Self> {
        if config.pe_bands == 0 {
            return Err(Error::Config("pe_bands must be >= 1".into()));
        }
        config.decoder.validate()?;
        let seed = config.seed;
        let c = config.encoder.channels;
        let mut params = ParamStore::new();
        let shared = [
            Encoder::new(&mut params, &config.encoder, Role::Shared, Modality::T1, seed)?,
            Encoder::new(&mut params, &config.encoder, Role::Shared, Modality::T2, seed)?,
        ];
        let specific = if toggles.enable_mmf {
            Some([
                Encoder::new(&mut params, &config.encoder, Role::Specific, Modality::T1, seed)?,
                Encoder::new(&mut params, &config.encoder, Role::Specific, Modality::T2, seed)?,
            ])
        } else {
            None
        };
        let attention = if toggles.enable_kd_attn {
            Some(CrossAttention::new(&mut params, &config.attention, c, seed)?)
        } else {
            None
        };
        let fusion = toggles.enable_mmf.then(|| Fusion::new(&mut params, &config.fusion, c, seed));
        let seg = if toggles.enable_sel { Some(SegHeads::new(&mut params, c, config.num_classes, seed)?) } else { None };
        let input = c + 6 * config.pe_bands;
        let decoders = if config.decoder.per_modality {
            Modality::BOTH
                .iter()
                .map(|m| Decoder::new(&mut params, &config.decoder, input, &format!("dec.{}", m.name()), seed))
                .collect::<Result<_>>()?
        } else {
            vec![Decoder::new(&mut params, &config.decoder, input, "dec", seed)?]
        };
        Ok(Model { config: config.clone(), toggles, params, shared, specific, attention, fusion, seg, decoders })
    }

    pub fn channels(&self) -> usize {
        self.config.encoder.channels
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn decoder(&self, m: Modality) -> &Decoder {
        &self.decoders[m.index().min(self.decoders.len() - 1)]
    }

    fn need<'a, T>(&self, part: &'a Option<T>, what: &str) -> Result<&'a T> {
        part.as_ref().ok_or_else(|| Error::Missing(format!("{what} is enabled but the model was built without it")))
    }

    /// Encodes `[1, X, Y, Z]` inputs and prepares the unified-grid features.
    pub fn encode_grids<S: Scalar>(&self, cx: &Ctx<S>, lr: [Var; 2]) -> Result<GridFeatures> {
        let g = cx.g;
        let spatial = |v: Var| {
            let s = g.shape(v);
            [s[1], s[2], s[3]]
        };
        let grid = unified_grid(spatial(lr[0]), spatial(lr[1]));
        let to_grid = |v: Var| if spatial(v) == grid { v } else { g.resize(v, grid) };
        let shared = [0, 1].map(|m| to_grid(self.shared[m].forward(cx, lr[m])));
        let specific = if self.toggles.enable_mmf {
            let enc = self.need(&self.specific, "MMF")?;
            Some([0, 1].map(|m| to_grid(enc[m].forward(cx, lr[m]))))
        } else {
            None
        };
        let t2_fused = if self.toggles.enable_kd_attn {
            let attn = self.need(&self.attention, "KD-Attn")?;
            attn.check_grid(grid)?;
            attn.forward(cx, shared[1], shared[0])
        } else {
            shared[1]
        };
        Ok(GridFeatures { inputs: lr, shared, t2_fused, specific })
    }

    /// Samples the grids at `points` (normalized coordinates) and decodes.
    pub fn decode_points<S: Scalar>(&self, cx: &Ctx<S>, grids: &GridFeatures, points: Rc<Vec<[f64; 3]>>) -> Result<PointOutputs> {
        let g = cx.g;
        let k = points.len();
        let pe = g.constant(Tensor::new(vec![k, 6 * self.config.pe_bands], kernels::fourier::<S>(&points, self.config.pe_bands)));
        let sample = |v: Var| g.grid_sample(v, Rc::clone(&points));
        let z1_shared = sample(grids.shared[0]);
        let z2_shared = sample(grids.shared[1]);
        let z2_fused = if self.toggles.enable_kd_attn { sample(grids.t2_fused) } else { z2_shared };
        let (specific, fused) = if self.toggles.enable_mmf {
            let fusion = self.need(&self.fusion, "MMF")?;
            let spec = grids.specific.ok_or_else(|| Error::Missing("specific feature grids".into()))?;
            let spec = spec.map(sample);
            let f1 = fusion.residual_fuse(cx, z1_shared, spec[0], Modality::T1);
            let f2 = fusion.residual_fuse(cx, z2_fused, spec[1], Modality::T2);
            (Some(spec), [f1, f2])
        } else {
            (None, [z1_shared, z2_fused])
        };
        let (seg_logits, final_features) = if self.toggles.enable_sel {
            let seg = self.need(&self.seg, "SEL")?;
            let logits = [0, 1].map(|m| seg.logits(cx, fused[m], Modality::BOTH[m]));
            let h = [0, 1].map(|m| seg.fuse_back(cx, fused[m], logits[m], Modality::BOTH[m]));
            (Some(logits), h)
        } else {
            (None, fused)
        };
        let skip = self.config.intensity_skip.then(|| grids.inputs.map(sample));
        let pred = [0, 1].map(|m| self.decode_rows(cx, final_features[m], pe, skip.map(|s| s[m]), Modality::BOTH[m]));
        Ok(PointOutputs { z1_shared, z2_shared, z2_fused, specific, fused, seg_logits, final_features, pred, skip, pe })
    }

    /// Decoder on `[features, pe]` rows, plus the intensity skip if given.
    pub fn decode_rows<S: Scalar>(&self, cx: &Ctx<S>, features: Var, pe: Var, skip: Option<Var>, m: Modality) -> Var {
        let g = cx.g;
        let out = self.decoder(m).forward(cx, g.concat_cols(&[features, pe]));
        match skip {
            Some(s) => g.add(out, s),
            None => out,
        }
    }

    /// Both stages on plain LR volumes.
    pub fn forward<S: Scalar>(&self, cx: &Ctx<S>, lr_t1: &Volume, lr_t2: &Volume, points: Rc<Vec<[f64; 3]>>) -> Result<PointOutputs> {
        let lr = [cx.g.constant(volume_tensor(lr_t1)), cx.g.constant(volume_tensor(lr_t2))];
        let grids = self.encode_grids(cx, lr)?;
        self.decode_points(cx, &grids, points)
    }

    /// The T2 shared features the mean-alignment loss compares against.
    pub fn cmfa_t2(&self, out: &PointOutputs) -> Var {
        match self.config.fusion.cmfa_source {
            CmfaSource::PreAttention => out.z2_shared,
            CmfaSource::PostAttention => out.z2_fused,
        }
    }
}
