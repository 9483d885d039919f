//! Two-stage detector over hand-crafted region features.
//!
//! Stage one (CS-RPN) scores and regresses anchors with two linear maps and
//! turns them into proposals. Stage two is a decoupled head: a
//! category-agnostic detection branch (objectness and box regression) and a
//! classification branch scoring leaf categories only. Ancestor categories
//! are scored at inference by aggregating leaf probabilities.

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use params::{Linear, ModelParams, BLOCK_NAMES};

use crate::featurizer::{FeatureConfig, FeatureError, FeatureMaps};
use crate::geometry::{decode_delta, generate_anchors, nms, BBox, BoxDelta, GeometryError};
use crate::taxonomy::{aggregate, leaf_softmax, CategoryProbabilities, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("{what}: model expects {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("checkpoint leaf order {checkpoint:?} does not match taxonomy {taxonomy:?}")]
    LeafOrderMismatch {
        checkpoint: Vec<String>,
        taxonomy: Vec<String>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub features: FeatureConfig,
    pub anchor_stride: usize,
    pub anchor_scales: Vec<f64>,
    /// Width / height.
    pub anchor_ratios: Vec<f64>,
    pub anchor_pos_thresh: f64,
    pub anchor_neg_thresh: f64,
    /// Anchors kept (by objectness) before proposal NMS.
    pub pre_nms_top_n: usize,
    pub proposal_nms_thresh: f64,
    pub min_proposal_size: f64,
    /// Optional objectness cut applied to proposals before top-K.
    pub min_objectness: Option<f64>,
    pub detection_nms_thresh: f64,
    pub score_floor: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            anchor_stride: 4,
            anchor_scales: vec![12.0, 18.0, 27.0],
            anchor_ratios: vec![0.6, 1.0, 1.6],
            anchor_pos_thresh: 0.7,
            anchor_neg_thresh: 0.3,
            pre_nms_top_n: 600,
            proposal_nms_thresh: 0.7,
            min_proposal_size: 4.0,
            min_objectness: None,
            detection_nms_thresh: 0.45,
            score_floor: 1e-3,
        }
    }
}

impl DetectorConfig {
    pub fn anchors(&self, width: usize, height: usize) -> Result<Vec<BBox>, GeometryError> {
        generate_anchors(
            width,
            height,
            self.anchor_stride,
            &self.anchor_scales,
            &self.anchor_ratios,
        )
    }
}

/// Probability of the first ("object") entry of a two-way softmax.
pub fn object_probability(logits: &[f64]) -> f64 {
    leaf_softmax(logits)[0]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnOutput {
    /// `(object, background)` logits.
    pub logits: [f64; 2],
    pub delta: BoxDelta,
}

impl RpnOutput {
    pub fn objectness(&self) -> f64 {
        object_probability(&self.logits)
    }
}

fn check_dims(params: &ModelParams, maps: &FeatureMaps) -> Result<(), DetectorError> {
    if params.feature_dim() != maps.dim() {
        return Err(DetectorError::DimMismatch {
            what: "feature dimension",
            expected: params.feature_dim(),
            got: maps.dim(),
        });
    }
    Ok(())
}

/// Scores every anchor. Anchors that cover no pixel come back as `None` and
/// are ignored downstream.
pub fn rpn_forward(
    params: &ModelParams,
    maps: &FeatureMaps,
    anchors: &[BBox],
) -> Result<Vec<Option<RpnOutput>>, DetectorError> {
    check_dims(params, maps)?;
    Ok(anchors
        .iter()
        .map(|a| {
            maps.features(a).ok().map(|f| {
                let l = params.rpn_obj.forward(&f);
                RpnOutput {
                    logits: [l[0], l[1]],
                    delta: BoxDelta::from_slice(&params.rpn_reg.forward(&f)),
                }
            })
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// All proposals surviving NMS, sorted by objectness. `propose(K)` is the
/// first `K` entries of this list, so larger budgets only ever append.
pub fn ranked_proposals(
    params: &ModelParams,
    maps: &FeatureMaps,
    anchors: &[BBox],
    config: &DetectorConfig,
    image_w: f64,
    image_h: f64,
) -> Result<Vec<Proposal>, DetectorError> {
    let outputs = rpn_forward(params, maps, anchors)?;
    let mut candidates: Vec<(BBox, f64)> = anchors
        .iter()
        .zip(&outputs)
        .filter_map(|(a, out)| {
            let out = out.as_ref()?;
            let b = decode_delta(a, &out.delta).clip(image_w, image_h)?;
            (b.width() >= config.min_proposal_size && b.height() >= config.min_proposal_size)
                .then_some((b, out.objectness()))
        })
        .filter(|(_, s)| config.min_objectness.is_none_or(|m| *s >= m))
        .collect();
    // Stable: equal scores keep anchor order.
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
    candidates.truncate(config.pre_nms_top_n);
    Ok(nms(&candidates, config.proposal_nms_thresh)
        .into_iter()
        .map(|i| Proposal {
            bbox: candidates[i].0,
            objectness: candidates[i].1,
        })
        .collect())
}

/// Top-`k` proposals for one image.
pub fn propose(
    params: &ModelParams,
    maps: &FeatureMaps,
    anchors: &[BBox],
    k: usize,
    config: &DetectorConfig,
    image_w: f64,
    image_h: f64,
) -> Result<Vec<Proposal>, DetectorError> {
    let mut all = ranked_proposals(params, maps, anchors, config, image_w, image_h)?;
    all.truncate(k);
    Ok(all)
}

/// A classification-only training sample harvested from an image-level
/// image. It carries a category and a region, never a box or objectness
/// target.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLevelSample {
    pub proposal: Proposal,
    pub category: String,
}

/// Labels every proposal of an image-level image with the image's category.
pub fn label_imagelevel_proposals(
    proposals: &[Proposal],
    image_category: &str,
    taxonomy: &Taxonomy,
) -> Result<Vec<ImageLevelSample>, TaxonomyError> {
    if taxonomy.node(image_category).is_none() {
        return Err(TaxonomyError::UnknownCategory(image_category.to_string()));
    }
    Ok(proposals
        .iter()
        .map(|p| ImageLevelSample {
            proposal: *p,
            category: image_category.to_string(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReportNodes {
    LeafOnly,
    AllNodes,
}

/// Head outputs for one proposal, before thresholding and per-category NMS.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRegion {
    pub proposal: Proposal,
    /// Proposal refined by the head regressor.
    pub bbox: BBox,
    pub objectness: f64,
    pub probs: CategoryProbabilities,
}

impl ScoredRegion {
    /// Detection score of a taxonomy node for this region.
    pub fn score(&self, node: usize) -> f64 {
        self.objectness * self.probs.node(node)
    }
}

pub fn score_proposals(
    params: &ModelParams,
    taxonomy: &Taxonomy,
    maps: &FeatureMaps,
    proposals: &[Proposal],
    image_w: f64,
    image_h: f64,
) -> Result<Vec<ScoredRegion>, DetectorError> {
    check_dims(params, maps)?;
    if params.num_classes() != taxonomy.num_leaves() {
        return Err(DetectorError::DimMismatch {
            what: "classifier outputs",
            expected: params.num_classes(),
            got: taxonomy.num_leaves(),
        });
    }
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        let Ok(f) = maps.features(&p.bbox) else {
            continue;
        };
        let objectness = object_probability(&params.head_obj.forward(&f));
        let leaf_probs = leaf_softmax(&params.head_cls.forward(&f));
        let probs = aggregate(taxonomy, &leaf_probs)?;
        let delta = BoxDelta::from_slice(&params.head_reg.forward(&f));
        let bbox = decode_delta(&p.bbox, &delta)
            .clip(image_w, image_h)
            .unwrap_or(p.bbox);
        out.push(ScoredRegion {
            proposal: *p,
            bbox,
            objectness,
            probs,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub category: String,
    pub score: f64,
}

/// Turns scored regions into per-category detections: score floor, then
/// per-category NMS. Output is grouped by node index, each group sorted by
/// descending score.
pub fn regions_to_detections(
    regions: &[ScoredRegion],
    taxonomy: &Taxonomy,
    report: ReportNodes,
    config: &DetectorConfig,
) -> Vec<Detection> {
    let nodes: Vec<usize> = match report {
        ReportNodes::LeafOnly => taxonomy.leaf_nodes().to_vec(),
        ReportNodes::AllNodes => (0..taxonomy.len()).collect(),
    };
    let mut out = Vec::new();
    for v in nodes {
        let scored: Vec<(BBox, f64)> = regions
            .iter()
            .map(|r| (r.bbox, r.score(v)))
            .filter(|(_, s)| *s >= config.score_floor)
            .collect();
        for i in nms(&scored, config.detection_nms_thresh) {
            out.push(Detection {
                bbox: scored[i].0,
                category: taxonomy.name(v).to_string(),
                score: scored[i].1,
            });
        }
    }
    out
}

/// Full inference on one image.
#[allow(clippy::too_many_arguments)]
pub fn detect(
    params: &ModelParams,
    taxonomy: &Taxonomy,
    maps: &FeatureMaps,
    anchors: &[BBox],
    k: usize,
    report: ReportNodes,
    config: &DetectorConfig,
    image_w: f64,
    image_h: f64,
) -> Result<Vec<Detection>, DetectorError> {
    let proposals = propose(params, maps, anchors, k, config, image_w, image_h)?;
    let regions = score_proposals(params, taxonomy, maps, &proposals, image_w, image_h)?;
    Ok(regions_to_detections(&regions, taxonomy, report, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Raster;

    fn scene() -> (Raster, BBox) {
        let mut r = Raster::filled(64, 64, 3, 0.1);
        let b = BBox::new(20.0, 16.0, 40.0, 36.0).unwrap();
        for y in 16..36 {
            for x in 20..40 {
                r.set(y, x, 0, 0.9);
            }
        }
        (r, b)
    }

    fn tax() -> Taxonomy {
        Taxonomy::build(&[
            ("a", "g1"),
            ("b", "g1"),
            ("c", "g2"),
            ("g1", "root"),
            ("g2", "root"),
        ])
        .unwrap()
    }

    fn maps(r: &Raster) -> FeatureMaps {
        FeatureMaps::new(r, FeatureConfig::default()).unwrap()
    }

    #[test]
    fn zero_model_is_uninformative() {
        let (r, _) = scene();
        let cfg = DetectorConfig::default();
        let anchors = cfg.anchors(64, 64).unwrap();
        let p = ModelParams::zeros(25, 3);
        let out = rpn_forward(&p, &maps(&r), &anchors).unwrap();
        assert!(out.iter().all(|o| o.unwrap().objectness() == 0.5));
        assert_eq!(out, rpn_forward(&p, &maps(&r), &anchors).unwrap());

        let props = propose(&p, &maps(&r), &anchors, 5, &cfg, 64.0, 64.0).unwrap();
        let regions = score_proposals(&p, &tax(), &maps(&r), &props, 64.0, 64.0).unwrap();
        for reg in &regions {
            assert_eq!(reg.objectness, 0.5);
            for &leaf in tax().leaf_nodes() {
                assert!((reg.probs.node(leaf) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_set_rpn_weights() {
        // 1x1 grid: [mean rgb, std rgb, lum, log aspect, area, edges]
        let fc = FeatureConfig::new(1).unwrap();
        let r = Raster::filled(32, 32, 3, 0.25);
        let m = FeatureMaps::new(&r, fc).unwrap();
        let anchor = BBox::new(0.0, 0.0, 16.0, 8.0).unwrap();
        let f = m.features(&anchor).unwrap();
        assert_eq!(f.len(), 10);
        let mut p = ModelParams::zeros(10, 2);
        let w = p.rpn_obj.weights_mut();
        w[0] = 2.0; // mean red: 2 * 0.25 - 1 = -0.5
        w[7] = 1.0; // log aspect: ln 2 / ln 4 = 0.5
        w[10] = 0.25; // bias
        let out = rpn_forward(&p, &m, &[anchor]).unwrap()[0].unwrap();
        let by_hand = 2.0 * -0.5 + 1.0 * 0.5 + 0.25;
        assert!((out.logits[0] - by_hand).abs() < 1e-12);
        assert_eq!(out.logits[1], 0.0);
        let prob = 1.0 / (1.0 + (-by_hand as f64).exp());
        assert!((out.objectness() - prob).abs() < 1e-12);
    }

    fn biased_model() -> ModelParams {
        // Objectness grows with mean red; regression and classes vary too.
        let mut p = ModelParams::zeros(25, 3);
        p.rpn_obj.weights_mut()[0] = 3.0;
        p.rpn_obj.weights_mut()[24] = 2.0;
        p.head_obj.weights_mut()[0] = 2.0;
        p.head_cls.weights_mut()[0] = 1.5;
        p.head_cls.weights_mut()[26 + 1] = -0.5;
        p.head_reg.weights_mut()[25] = 0.05;
        p
    }

    #[test]
    fn propose_budget_and_prefix() {
        let (r, _) = scene();
        let cfg = DetectorConfig::default();
        let anchors = cfg.anchors(64, 64).unwrap();
        let p = biased_model();
        let m = maps(&r);
        let all = ranked_proposals(&p, &m, &anchors, &cfg, 64.0, 64.0).unwrap();
        assert!(!all.is_empty());
        let big = propose(&p, &m, &anchors, all.len() + 50, &cfg, 64.0, 64.0).unwrap();
        assert_eq!(big, all);
        let one = propose(&p, &m, &anchors, 1, &cfg, 64.0, 64.0).unwrap();
        assert_eq!(one[0], all[0]);
        assert!(all.windows(2).all(|w| w[0].objectness >= w[1].objectness));
        for k in [2, 10, 40] {
            let pk = propose(&p, &m, &anchors, k, &cfg, 64.0, 64.0).unwrap();
            assert_eq!(&pk[..], &all[..k.min(all.len())]);
        }
    }

    #[test]
    fn min_objectness_filters_proposals() {
        let (r, _) = scene();
        let cfg = DetectorConfig {
            min_objectness: Some(0.99),
            ..DetectorConfig::default()
        };
        let anchors = cfg.anchors(64, 64).unwrap();
        let all = ranked_proposals(&biased_model(), &maps(&r), &anchors, &cfg, 64.0, 64.0).unwrap();
        assert!(all.iter().all(|p| p.objectness >= 0.99));
    }

    #[test]
    fn imagelevel_labelling() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0).unwrap();
        let props = vec![
            Proposal {
                bbox: b,
                objectness: 0.9
            };
            10
        ];
        let s = label_imagelevel_proposals(&props, "a", &tax()).unwrap();
        assert_eq!(s.len(), 10);
        assert!(s.iter().all(|x| x.category == "a"));
        assert!(label_imagelevel_proposals(&[], "g1", &tax()).unwrap().is_empty());
        assert!(label_imagelevel_proposals(&props, "zzz", &tax()).is_err());
    }

    #[test]
    fn ancestor_scores_sum_descendant_scores() {
        let (r, _) = scene();
        let cfg = DetectorConfig::default();
        let anchors = cfg.anchors(64, 64).unwrap();
        let t = tax();
        let p = biased_model();
        let m = maps(&r);
        let props = propose(&p, &m, &anchors, 30, &cfg, 64.0, 64.0).unwrap();
        let regions = score_proposals(&p, &t, &m, &props, 64.0, 64.0).unwrap();
        for reg in &regions {
            for v in 0..t.len() {
                let leaves: f64 = t
                    .descendant_leaves(v)
                    .iter()
                    .map(|&l| reg.score(t.leaf_nodes()[l]))
                    .sum();
                assert!((reg.score(v) - leaves).abs() < 1e-9);
                for &l in t.descendant_leaves(v) {
                    assert!(reg.score(v) >= reg.score(t.leaf_nodes()[l]));
                }
            }
        }
        let dets = detect(&p, &t, &m, &anchors, 30, ReportNodes::AllNodes, &cfg, 64.0, 64.0)
            .unwrap();
        assert!(dets.iter().any(|d| d.category == "g1"));
        let leaf_only =
            detect(&p, &t, &m, &anchors, 30, ReportNodes::LeafOnly, &cfg, 64.0, 64.0).unwrap();
        assert!(leaf_only.iter().all(|d| t.is_leaf(t.node(&d.category).unwrap())));
        assert!(dets.iter().all(|d| d.score >= cfg.score_floor));
    }

    #[test]
    fn taxonomy_change_is_a_dim_mismatch() {
        let (r, _) = scene();
        let cfg = DetectorConfig::default();
        let anchors = cfg.anchors(64, 64).unwrap();
        let p = ModelParams::zeros(25, 2);
        let err = detect(&p, &tax(), &maps(&r), &anchors, 5, ReportNodes::LeafOnly, &cfg, 64.0, 64.0);
        assert!(matches!(err, Err(DetectorError::DimMismatch { .. })));
    }
}
