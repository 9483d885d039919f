//! The five-term cross-supervised loss and its analytic gradients.
//!
//! Each training sample carries a [`SampleKind`] that decides which
//! parameter block it may touch:
//!
//! | kind       | term        | blocks                |
//! |------------|-------------|-----------------------|
//! | `BoxRpn`   | `l_csrpn_b` | `rpn_obj`, `rpn_reg`  |
//! | `BoxReg`   | `l_reg_b`   | `head_reg`            |
//! | `BoxObj`   | `l_obj_b`   | `head_obj`            |
//! | `BoxCls`   | `l_cls_b`   | `head_cls`            |
//! | `ImageCls` | `l_cls_i`   | `head_cls`            |
//!
//! Image-level data only ever produces `ImageCls` samples, so it cannot move
//! the proposal network or the detection branch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{Linear, ModelParams};
use crate::featurizer::FeatureVector;
use crate::geometry::BoxDelta;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("sample labelled with ancestor category {0}; filter it before computing the loss")]
    UnfilteredAncestorLabel(String),
    #[error("feature length {got} does not match model input {expected}")]
    FeatureDim { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleKind {
    BoxRpn,
    BoxReg,
    BoxObj,
    BoxCls,
    ImageCls,
}

/// Classification target. Ancestor labels are representable so that routing
/// mistakes surface as errors instead of silent mislabels.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassTarget {
    Leaf(usize),
    Ancestor(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    /// Anchor sample; positive anchors carry a regression target.
    BoxRpn {
        features: FeatureVector,
        target: Option<BoxDelta>,
    },
    BoxReg {
        features: FeatureVector,
        target: BoxDelta,
    },
    BoxObj {
        features: FeatureVector,
        object: bool,
    },
    BoxCls {
        features: FeatureVector,
        class: ClassTarget,
    },
    ImageCls {
        features: FeatureVector,
        class: ClassTarget,
    },
}

impl Sample {
    pub fn kind(&self) -> SampleKind {
        match self {
            Sample::BoxRpn { .. } => SampleKind::BoxRpn,
            Sample::BoxReg { .. } => SampleKind::BoxReg,
            Sample::BoxObj { .. } => SampleKind::BoxObj,
            Sample::BoxCls { .. } => SampleKind::BoxCls,
            Sample::ImageCls { .. } => SampleKind::ImageCls,
        }
    }

    pub fn features(&self) -> &[f64] {
        match self {
            Sample::BoxRpn { features, .. }
            | Sample::BoxReg { features, .. }
            | Sample::BoxObj { features, .. }
            | Sample::BoxCls { features, .. }
            | Sample::ImageCls { features, .. } => features,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub smooth_l1_beta: f64,
    /// Weights of `l_csrpn_b, l_reg_b, l_obj_b, l_cls_b, l_cls_i`.
    pub term_weights: [f64; 5],
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smooth_l1_beta: 1.0,
            term_weights: [1.0; 5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_csrpn_b: f64,
    pub l_reg_b: f64,
    pub l_obj_b: f64,
    pub l_cls_b: f64,
    pub l_cls_i: f64,
    pub l_cross: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [
            self.l_csrpn_b,
            self.l_reg_b,
            self.l_obj_b,
            self.l_cls_b,
            self.l_cls_i,
        ]
    }

    fn from_terms(t: [f64; 5]) -> Self {
        Self {
            l_csrpn_b: t[0],
            l_reg_b: t[1],
            l_obj_b: t[2],
            l_cls_b: t[3],
            l_cls_i: t[4],
            l_cross: t[0] + t[1] + t[2] + t[3] + t[4],
        }
    }
}

/// Softmax cross-entropy: `-ln p[label]` and its gradient `p - onehot`.
pub fn softmax_ce(scores: &[f64], label: usize) -> Result<(f64, Vec<f64>), LossError> {
    if label >= scores.len() {
        return Err(LossError::LabelOutOfRange {
            label,
            classes: scores.len(),
        });
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let log_z = max + z.ln();
    let loss = log_z - scores[label];
    let mut grad: Vec<f64> = scores.iter().map(|s| (s - log_z).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Smooth L1 summed over the four coordinates.
pub fn smooth_l1(pred: &BoxDelta, target: &BoxDelta, beta: f64) -> (f64, [f64; 4]) {
    let p = pred.to_array();
    let t = target.to_array();
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = p[i] - t[i];
        if d.abs() < beta {
            loss += 0.5 * d * d / beta;
            grad[i] = d / beta;
        } else {
            loss += d.abs() - 0.5 * beta;
            grad[i] = d.signum();
        }
    }
    (loss, grad)
}

fn leaf_label(class: &ClassTarget, classes: usize) -> Result<usize, LossError> {
    match class {
        ClassTarget::Leaf(l) if *l < classes => Ok(*l),
        ClassTarget::Leaf(l) => Err(LossError::LabelOutOfRange {
            label: *l,
            classes,
        }),
        ClassTarget::Ancestor(name) => Err(LossError::UnfilteredAncestorLabel(name.clone())),
    }
}

fn add_ce(
    block: &Linear,
    grad: &mut Linear,
    x: &[f64],
    label: usize,
    scale: f64,
) -> Result<f64, LossError> {
    let (loss, g) = softmax_ce(&block.forward(x), label)?;
    let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
    grad.accumulate_outer(x, &g);
    Ok(loss * scale)
}

fn add_smooth_l1(block: &Linear, grad: &mut Linear, x: &[f64], target: &BoxDelta, beta: f64, scale: f64) -> f64 {
    let pred = BoxDelta::from_slice(&block.forward(x));
    let (loss, g) = smooth_l1(&pred, target, beta);
    grad.accumulate_outer(x, &g.map(|v| v * scale));
    loss * scale
}

/// Objectness logits are ordered `(object, background)`.
fn objectness_label(object: bool) -> usize {
    if object {
        0
    } else {
        1
    }
}

/// Loss breakdown and gradients for a mixed batch.
///
/// Every term is the mean over its own contributing samples (terms without
/// samples are exactly zero) times its configured weight. `l_csrpn_b` is the
/// anchor classification mean plus the regression mean over positive
/// anchors. Samples are reduced in batch order, so results do not depend on
/// scheduling.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    batch: &[Sample],
    config: &LossConfig,
) -> Result<(LossBreakdown, ModelParams), LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let dim = params.feature_dim();
    let classes = params.num_classes();
    let mut n_rpn = 0usize;
    let mut n_rpn_reg = 0usize;
    let mut n = [0usize; 5];
    for s in batch {
        if s.features().len() != dim {
            return Err(LossError::FeatureDim {
                expected: dim,
                got: s.features().len(),
            });
        }
        match s {
            Sample::BoxRpn { target, .. } => {
                n_rpn += 1;
                n_rpn_reg += target.is_some() as usize;
            }
            Sample::BoxReg { .. } => n[1] += 1,
            Sample::BoxObj { .. } => n[2] += 1,
            Sample::BoxCls { class, .. } => {
                leaf_label(class, classes)?;
                n[3] += 1;
            }
            Sample::ImageCls { class, .. } => {
                leaf_label(class, classes)?;
                n[4] += 1;
            }
        }
    }
    let w = config.term_weights;
    let beta = config.smooth_l1_beta;
    let scale = |weight: f64, count: usize| if count == 0 { 0.0 } else { weight / count as f64 };
    let s_rpn_cls = scale(w[0], n_rpn);
    let s_rpn_reg = scale(w[0], n_rpn_reg);
    let s: [f64; 5] = std::array::from_fn(|k| scale(w[k], n[k]));

    let mut grads = params.zeros_like();
    let mut rpn_cls = 0.0;
    let mut rpn_reg = 0.0;
    let mut terms = [0.0; 5];
    for sample in batch {
        match sample {
            Sample::BoxRpn { features, target } => {
                let label = objectness_label(target.is_some());
                rpn_cls += add_ce(&params.rpn_obj, &mut grads.rpn_obj, features, label, s_rpn_cls)?;
                if let Some(t) = target {
                    rpn_reg +=
                        add_smooth_l1(&params.rpn_reg, &mut grads.rpn_reg, features, t, beta, s_rpn_reg);
                }
            }
            Sample::BoxReg { features, target } => {
                terms[1] +=
                    add_smooth_l1(&params.head_reg, &mut grads.head_reg, features, target, beta, s[1]);
            }
            Sample::BoxObj { features, object } => {
                terms[2] += add_ce(
                    &params.head_obj,
                    &mut grads.head_obj,
                    features,
                    objectness_label(*object),
                    s[2],
                )?;
            }
            Sample::BoxCls { features, class } => {
                let l = leaf_label(class, classes)?;
                terms[3] += add_ce(&params.head_cls, &mut grads.head_cls, features, l, s[3])?;
            }
            Sample::ImageCls { features, class } => {
                let l = leaf_label(class, classes)?;
                terms[4] += add_ce(&params.head_cls, &mut grads.head_cls, features, l, s[4])?;
            }
        }
    }
    terms[0] = rpn_cls + rpn_reg;
    Ok((LossBreakdown::from_terms(terms), grads))
}
