//! Loss weights, per-term bookkeeping and the per-item loss graph.

use std::rc::Rc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::data::TrainItem;
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::model::kd::kd_loss_graph;
use crate::model::params::Ctx;
use crate::model::seg::seg_loss_graph;
use crate::model::{volume_tensor, Model, Toggles};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_kd: f64,
    pub lambda_t2self: f64,
    pub lambda_seg: f64,
    pub lambda_cmfa: f64,
    pub lambda_fdl: f64,
    pub toggles: Toggles,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_kd: 1.0, lambda_t2self: 1.0, lambda_seg: 0.1, lambda_cmfa: 0.05, lambda_fdl: 0.05, toggles: Toggles::default() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_kd", self.lambda_kd),
            ("lambda_t2self", self.lambda_t2self),
            ("lambda_seg", self.lambda_seg),
            ("lambda_cmfa", self.lambda_cmfa),
            ("lambda_fdl", self.lambda_fdl),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Per-term multipliers with disabled components forced to 0. The order
    /// matches [`LossTerms::values`].
    pub fn multipliers(&self) -> [f64; 6] {
        let t = self.toggles;
        let on = |b: bool, v: f64| if b { v } else { 0.0 };
        [
            1.0,
            on(t.enable_sel, self.lambda_seg),
            on(t.enable_kd_attn, self.lambda_kd),
            on(t.enable_kd_attn, self.lambda_t2self),
            on(t.enable_mmf, self.lambda_cmfa),
            on(t.enable_mmf, self.lambda_fdl),
        ]
    }

    /// Rescales each enabled auxiliary weight so that its weighted term is
    /// `ratio * init.sr`, given the unweighted terms measured at
    /// initialization. Disabled or zero-valued terms keep their weight.
    pub fn calibrated(&self, init: &LossTerms, ratio: f64) -> Result<LossWeights> {
        if !(ratio > 0.0) || !ratio.is_finite() {
            return Err(Error::Config(format!("calibration ratio must be finite and > 0, got {ratio}")));
        }
        if !(init.sr > 0.0) || !init.sr.is_finite() {
            return Err(Error::Domain(format!("cannot calibrate against L_SR = {}", init.sr)));
        }
        let on = self.multipliers().map(|m| m != 0.0);
        let v = init.values();
        let scale = |i: usize, current: f64| if on[i] && v[i] > 0.0 && v[i].is_finite() { ratio * init.sr / v[i] } else { current };
        Ok(LossWeights {
            lambda_seg: scale(1, self.lambda_seg),
            lambda_kd: scale(2, self.lambda_kd),
            lambda_t2self: scale(3, self.lambda_t2self),
            lambda_cmfa: scale(4, self.lambda_cmfa),
            lambda_fdl: scale(5, self.lambda_fdl),
            toggles: self.toggles,
        })
    }
}

/// Unweighted loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sr: f64,
    pub seg: f64,
    pub kd: f64,
    pub t2self: f64,
    pub cmfa: f64,
    pub fdl: f64,
}

impl LossTerms {
    pub const NAMES: [&'static str; 6] = ["sr", "seg", "kd", "t2self", "cmfa", "fdl"];

    pub fn values(&self) -> [f64; 6] {
        [self.sr, self.seg, self.kd, self.t2self, self.cmfa, self.fdl]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        LossTerms { sr: v[0], seg: v[1], kd: v[2], t2self: v[3], cmfa: v[4], fdl: v[5] }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    /// Each term times its effective weight; these sum to `total`.
    pub weighted: LossTerms,
    pub total: f64,
}

/// `L = L_SR + l_seg L_seg + (l_kd L_kd + l_t2self L_t2self + l_cmfa L_cmfa + l_fdl L_fdl)`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossBreakdown> {
    let v = terms.values();
    for (name, x) in LossTerms::NAMES.iter().zip(v) {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let w = weights.multipliers();
    let weighted: [f64; 6] = std::array::from_fn(|i| if w[i] == 0.0 { 0.0 } else { w[i] * v[i] });
    let total = weighted.iter().sum();
    Ok(LossBreakdown { terms: *terms, weighted: LossTerms::from_values(weighted), total })
}

/// The loss graph for one item. Disabled terms are `None` and never built.
pub struct ItemLoss {
    pub total: Var,
    pub terms: [Option<Var>; 6],
    /// T1 shared rows at the query points (the KD teacher).
    pub teacher: Var,
}

fn cast<S: Scalar>(v: &[f32]) -> Rc<Vec<S>> {
    Rc::new(v.iter().map(|&x| S::from_f64(x as f64)).collect())
}

pub fn item_loss<S: Scalar>(model: &Model, cx: &Ctx<S>, item: &TrainItem, weights: &LossWeights) -> Result<ItemLoss> {
    item_loss_with_teacher(model, cx, item, weights, None)
}

/// `item_loss` with the KD teacher rows optionally replaced by a constant.
/// Finite differences need this: perturbing a T1 parameter moves the
/// teacher, which the stop-gradient deliberately ignores.
pub(crate) fn item_loss_with_teacher<S: Scalar>(
    model: &Model,
    cx: &Ctx<S>,
    item: &TrainItem,
    weights: &LossWeights,
    teacher: Option<&Tensor<S>>,
) -> Result<ItemLoss> {
    let g = cx.g;
    let t = model.toggles;
    if t != weights.toggles {
        return Err(Error::Config("loss toggles differ from the toggles the model was built with".into()));
    }
    let lr = [g.constant(volume_tensor(&item.lr[0])), g.constant(volume_tensor(&item.lr[1]))];
    let grids = model.encode_grids(cx, lr)?;
    let out = model.decode_points(cx, &grids, Rc::clone(&item.points))?;
    let targets = [cast::<S>(&item.targets[0]), cast::<S>(&item.targets[1])];

    let sr = g.weighted_sum(&[(g.mse(out.pred[0], Rc::clone(&targets[0])), 0.5), (g.mse(out.pred[1], Rc::clone(&targets[1])), 0.5)]);
    let seg = match out.seg_logits {
        Some(l) => {
            let labels = Rc::clone(&item.labels);
            Some(g.weighted_sum(&[(seg_loss_graph(g, l[0], Rc::clone(&labels)), 0.5), (seg_loss_graph(g, l[1], labels), 0.5)]))
        }
        None => None,
    };
    let (kd, t2self) = if t.enable_kd_attn {
        let z1 = teacher.map_or(out.z1_shared, |t| g.constant(t.clone()));
        let kd = kd_loss_graph(g, out.z2_fused, z1);
        let pred = model.decode_rows(cx, out.z2_shared, out.pe, out.skip.map(|s| s[1]), Modality::T2);
        (Some(kd), Some(g.mse(pred, Rc::clone(&targets[1]))))
    } else {
        (None, None)
    };
    let (cmfa, fdl) = match (&model.fusion, out.specific) {
        (Some(f), Some(spec)) if t.enable_mmf => (Some(f.cmfa(g, out.z1_shared, model.cmfa_t2(&out))), Some(f.fdl(cx, spec[0], spec[1]))),
        _ => (None, None),
    };
    let terms = [Some(sr), seg, kd, t2self, cmfa, fdl];
    let w = weights.multipliers();
    let parts: Vec<(Var, f64)> = terms.iter().zip(w).filter_map(|(v, w)| v.filter(|_| w != 0.0).map(|v| (v, w))).collect();
    Ok(ItemLoss { total: g.weighted_sum(&parts), terms, teacher: out.z1_shared })
}
