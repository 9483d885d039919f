//! Cross-supervised training loop.
//!
//! Every iteration binds `batch_box` box-level and `batch_img` image-level
//! images. Box-level images produce anchor samples for CS-RPN and RoI
//! samples for the head. Image-level images are run through the current
//! CS-RPN, their top proposals are labelled with the image category, and the
//! resulting samples reach only the classification branch.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{
    label_imagelevel_proposals, propose, DetectorConfig, DetectorError, ModelParams,
};
use crate::featurizer::{feature_dim, FeatureConfig, FeatureError, FeatureMaps};
use crate::geometry::{assign_anchor_labels, encode_delta, flip_box, iou, BBox};
use crate::losses::{batch_loss_and_grads, ClassTarget, LossBreakdown, LossConfig, LossError, Sample};
use crate::seeding;
use crate::synthworld::{AnnotatedImage, Dataset, Supervision};
use crate::taxonomy::{filter_ancestor_samples, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no {0} images to draw batches from")]
    EmptyPool(&'static str),
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("config line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("non-finite loss at iteration {iter}: {breakdown:?}")]
    NonFiniteLoss { iter: usize, breakdown: LossBreakdown },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_box: usize,
    pub batch_img: usize,
    pub k_imagelevel_proposals: usize,
    pub warmup_iters: usize,
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    /// Epochs (1-based count) after which the rate drops once.
    pub lr_drop_epoch: usize,
    pub total_epochs: usize,
    pub seed: u64,
    pub momentum: f64,
    pub flip_prob: f64,
    /// Anchors sampled per box-level image for the CS-RPN loss.
    pub rpn_samples_per_image: usize,
    pub rpn_positive_fraction: f64,
    /// Proposals harvested per box-level image as head RoI candidates.
    pub roi_proposals: usize,
    pub roi_max_positives: usize,
    pub roi_negative_ratio: usize,
    pub roi_pos_thresh: f64,
    pub roi_neg_thresh: f64,
    /// When false, image-level images are drawn into batches but contribute
    /// nothing.
    pub image_level_flow: bool,
    pub loss: LossConfig,
    pub detector: DetectorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_box: 4,
            batch_img: 4,
            k_imagelevel_proposals: 10,
            warmup_iters: 50,
            base_lr: 0.05,
            lr_drop_factor: 10.0,
            lr_drop_epoch: 3,
            total_epochs: 4,
            seed: 7,
            momentum: 0.0,
            flip_prob: 0.5,
            rpn_samples_per_image: 64,
            rpn_positive_fraction: 0.5,
            roi_proposals: 32,
            roi_max_positives: 16,
            roi_negative_ratio: 3,
            roi_pos_thresh: 0.5,
            roi_neg_thresh: 0.3,
            image_level_flow: true,
            loss: LossConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

fn parse_list(v: &str) -> Result<Vec<f64>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| format!("{s}: {e}")))
        .collect()
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_box == 0 {
            return bad("batch_box must be positive");
        }
        if self.k_imagelevel_proposals == 0 || self.total_epochs == 0 {
            return bad("k_imagelevel_proposals and total_epochs must be positive");
        }
        if self.lr_drop_epoch > self.total_epochs {
            return bad("lr_drop_epoch exceeds total_epochs");
        }
        if !(self.base_lr > 0.0 && self.lr_drop_factor >= 1.0) {
            return bad("base_lr must be positive and lr_drop_factor at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("momentum must be in [0, 1) and flip_prob in [0, 1]");
        }
        if self.roi_neg_thresh > self.roi_pos_thresh {
            return bad("roi_neg_thresh exceeds roi_pos_thresh");
        }
        if self.loss.smooth_l1_beta <= 0.0 {
            return bad("smooth_l1_beta must be positive");
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults. `#` starts a
    /// comment. List values (anchor scales and ratios) are comma-separated.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| TrainError::Parse { line: i + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected key=value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            c.set(key, value).map_err(err)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse::<T>().map_err(|e| format!("{v}: {e}"))
        }
        let d = &mut self.detector;
        match key {
            "batch_box" => self.batch_box = num(v)?,
            "batch_img" => self.batch_img = num(v)?,
            "k_imagelevel_proposals" => self.k_imagelevel_proposals = num(v)?,
            "warmup_iters" => self.warmup_iters = num(v)?,
            "base_lr" => self.base_lr = num(v)?,
            "lr_drop_factor" => self.lr_drop_factor = num(v)?,
            "lr_drop_epoch" => self.lr_drop_epoch = num(v)?,
            "total_epochs" => self.total_epochs = num(v)?,
            "seed" => self.seed = num(v)?,
            "momentum" => self.momentum = num(v)?,
            "flip_prob" => self.flip_prob = num(v)?,
            "rpn_samples_per_image" => self.rpn_samples_per_image = num(v)?,
            "rpn_positive_fraction" => self.rpn_positive_fraction = num(v)?,
            "roi_proposals" => self.roi_proposals = num(v)?,
            "roi_max_positives" => self.roi_max_positives = num(v)?,
            "roi_negative_ratio" => self.roi_negative_ratio = num(v)?,
            "roi_pos_thresh" => self.roi_pos_thresh = num(v)?,
            "roi_neg_thresh" => self.roi_neg_thresh = num(v)?,
            "image_level_flow" => self.image_level_flow = num(v)?,
            "smooth_l1_beta" => self.loss.smooth_l1_beta = num(v)?,
            "weight_csrpn_b" => self.loss.term_weights[0] = num(v)?,
            "weight_reg_b" => self.loss.term_weights[1] = num(v)?,
            "weight_obj_b" => self.loss.term_weights[2] = num(v)?,
            "weight_cls_b" => self.loss.term_weights[3] = num(v)?,
            "weight_cls_i" => self.loss.term_weights[4] = num(v)?,
            "feature_grid" => {
                d.features = FeatureConfig::new(num(v)?).map_err(|e| e.to_string())?
            }
            "anchor_stride" => d.anchor_stride = num(v)?,
            "anchor_scales" => d.anchor_scales = parse_list(v)?,
            "anchor_ratios" => d.anchor_ratios = parse_list(v)?,
            "anchor_pos_thresh" => d.anchor_pos_thresh = num(v)?,
            "anchor_neg_thresh" => d.anchor_neg_thresh = num(v)?,
            "pre_nms_top_n" => d.pre_nms_top_n = num(v)?,
            "proposal_nms_thresh" => d.proposal_nms_thresh = num(v)?,
            "min_proposal_size" => d.min_proposal_size = num(v)?,
            "min_objectness" => {
                d.min_objectness = match v {
                    "none" | "" => None,
                    _ => Some(num(v)?),
                }
            }
            "detection_nms_thresh" => d.detection_nms_thresh = num(v)?,
            "score_floor" => d.score_floor = num(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

/// Warmup ramp from `base_lr / 10` to `base_lr`, then constant, divided by
/// `lr_drop_factor` from the first iteration after `lr_drop_epoch` epochs.
pub fn lr_schedule(iter: usize, iters_per_epoch: usize, config: &TrainConfig) -> f64 {
    let base = config.base_lr;
    let mut lr = if iter < config.warmup_iters {
        let start = base / 10.0;
        start + (base - start) * iter as f64 / config.warmup_iters as f64
    } else {
        base
    };
    if iters_per_epoch > 0 && iter / iters_per_epoch >= config.lr_drop_epoch {
        lr /= config.lr_drop_factor;
    }
    lr
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchEntry {
    pub index: usize,
    pub flip: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Batch {
    pub box_level: Vec<BatchEntry>,
    pub image_level: Vec<BatchEntry>,
}

fn ceil_div(a: usize, b: usize) -> usize {
    if b == 0 {
        0
    } else {
        a.div_ceil(b)
    }
}

/// One epoch of mixed batches over pools of `n_box` and `n_img` images
/// (indices into each pool).
pub fn make_batches(
    n_box: usize,
    n_img: usize,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Batch>, TrainError> {
    if n_box == 0 {
        return Err(TrainError::EmptyPool("box-level"));
    }
    if n_img == 0 && config.batch_img > 0 {
        return Err(TrainError::EmptyPool("image-level"));
    }
    let mut rng = seeding::rng_for(config.seed, seeding::stream::BATCHES, epoch as u64);
    let mut box_order: Vec<usize> = (0..n_box).collect();
    let mut img_order: Vec<usize> = (0..n_img).collect();
    box_order.shuffle(&mut rng);
    img_order.shuffle(&mut rng);
    let len = ceil_div(n_box, config.batch_box).max(ceil_div(n_img, config.batch_img));
    let mut batches = Vec::with_capacity(len);
    for j in 0..len {
        let mut take = |order: &[usize], per: usize| -> Vec<BatchEntry> {
            (0..per)
                .map(|t| BatchEntry {
                    index: order[(j * per + t) % order.len()],
                    flip: rng.random_bool(config.flip_prob),
                })
                .collect()
        };
        let box_level = take(&box_order, config.batch_box);
        let image_level = take(&img_order, config.batch_img);
        batches.push(Batch {
            box_level,
            image_level,
        });
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "iter,lr,l_csrpn_b,l_reg_b,l_obj_b,l_cls_b,l_cls_i,l_cross";

/// CSV training log. Floats use the shortest exact representation.
pub fn log_to_csv(log: &[LogEntry]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for e in log {
        let l = &e.loss;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.iter, e.lr, l.l_csrpn_b, l.l_reg_b, l.l_obj_b, l.l_cls_b, l.l_cls_i, l.l_cross
        );
    }
    out
}

/// Parses a log written by `log_to_csv` (epoch is not stored and reads as 0).
pub fn log_from_csv(text: &str) -> Result<Vec<LogEntry>, TrainError> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(TrainError::Parse {
            line: 1,
            msg: "unexpected log header".into(),
        });
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let err = |msg: String| TrainError::Parse { line: i + 2, msg };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(err(format!("expected 8 columns, got {}", cols.len())));
            }
            let f = |k: usize| cols[k].parse::<f64>().map_err(|e| err(e.to_string()));
            Ok(LogEntry {
                iter: cols[0].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?,
                epoch: 0,
                lr: f(1)?,
                loss: LossBreakdown {
                    l_csrpn_b: f(2)?,
                    l_reg_b: f(3)?,
                    l_obj_b: f(4)?,
                    l_cls_b: f(5)?,
                    l_cls_i: f(6)?,
                    l_cross: f(7)?,
                },
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub iterations: usize,
    /// Image-level classification samples dropped for ancestor labels.
    pub filtered_samples: usize,
    pub filtered_categories: std::collections::BTreeSet<String>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogEntry>,
    /// Parameters at the end of each epoch.
    pub epoch_params: Vec<ModelParams>,
    pub stats: TrainStats,
}

struct Context<'a> {
    taxonomy: &'a Taxonomy,
    config: &'a TrainConfig,
    anchors: &'a [BBox],
    width: f64,
    height: f64,
}

fn class_target(taxonomy: &Taxonomy, category: &str) -> Result<ClassTarget, TaxonomyError> {
    let node = taxonomy
        .node(category)
        .ok_or_else(|| TaxonomyError::UnknownCategory(category.to_string()))?;
    Ok(match taxonomy.leaf_position(node) {
        Some(l) => ClassTarget::Leaf(l),
        None => ClassTarget::Ancestor(category.to_string()),
    })
}

fn prepared(im: &AnnotatedImage, flip: bool) -> (crate::raster::Raster, Vec<(BBox, String)>) {
    let w = im.raster.width() as f64;
    let anns: Vec<(BBox, String)> = match &im.supervision {
        Supervision::BoxLevel(a) => a
            .iter()
            .map(|a| {
                let b = if flip { flip_box(&a.bbox, w) } else { a.bbox };
                (b, a.category.clone())
            })
            .collect(),
        Supervision::ImageLevel(_) => Vec::new(),
    };
    let raster = if flip {
        im.raster.flipped_horizontally()
    } else {
        im.raster.clone()
    };
    (raster, anns)
}

fn take_shuffled<R: Rng>(mut v: Vec<usize>, n: usize, rng: &mut R) -> Vec<usize> {
    v.shuffle(rng);
    v.truncate(n);
    v
}

fn box_level_samples<R: Rng>(
    ctx: &Context,
    params: &ModelParams,
    im: &AnnotatedImage,
    flip: bool,
    rng: &mut R,
) -> Result<Vec<Sample>, TrainError> {
    let cfg = ctx.config;
    let (raster, anns) = prepared(im, flip);
    let maps = FeatureMaps::new(&raster, cfg.detector.features)?;
    let gts: Vec<BBox> = anns.iter().map(|(b, _)| *b).collect();
    let mut samples = Vec::new();

    // CS-RPN anchor samples.
    let labels = assign_anchor_labels(
        ctx.anchors,
        &gts,
        cfg.detector.anchor_pos_thresh,
        cfg.detector.anchor_neg_thresh,
    );
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_positive()).collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == crate::geometry::AnchorAssignment::Negative)
        .collect();
    let max_pos = (cfg.rpn_samples_per_image as f64 * cfg.rpn_positive_fraction).round() as usize;
    let pos = take_shuffled(pos, max_pos, rng);
    let neg = take_shuffled(neg, cfg.rpn_samples_per_image - pos.len(), rng);
    for &i in pos.iter().chain(&neg) {
        if let Ok(features) = maps.features(&ctx.anchors[i]) {
            samples.push(Sample::BoxRpn {
                features,
                target: labels[i].target(),
            });
        }
    }

    // Head RoIs: ground truth, current proposals and anchors.
    let proposals = propose(
        params,
        &maps,
        ctx.anchors,
        cfg.roi_proposals,
        &cfg.detector,
        ctx.width,
        ctx.height,
    )?;
    let best = |b: &BBox| -> (usize, f64) {
        gts.iter()
            .enumerate()
            .map(|(g, gt)| (g, iou(b, gt)))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc })
    };
    let mut pos_rois: Vec<(BBox, usize)> = gts.iter().enumerate().map(|(g, b)| (*b, g)).collect();
    let mut extra_pos = Vec::new();
    let mut neg_rois = Vec::new();
    let candidates = proposals
        .iter()
        .map(|p| p.bbox)
        .chain(pos.iter().map(|&i| ctx.anchors[i]))
        .chain(neg.iter().map(|&i| ctx.anchors[i]));
    for b in candidates {
        let (g, v) = best(&b);
        if v >= cfg.roi_pos_thresh {
            extra_pos.push((b, g));
        } else if v < cfg.roi_neg_thresh {
            neg_rois.push(b);
        }
    }
    extra_pos.shuffle(rng);
    pos_rois.extend(extra_pos);
    pos_rois.truncate(cfg.roi_max_positives.max(gts.len()));
    neg_rois.shuffle(rng);
    neg_rois.truncate(cfg.roi_negative_ratio * pos_rois.len().max(1));

    for (b, g) in pos_rois {
        let Ok(features) = maps.features(&b) else {
            continue;
        };
        samples.push(Sample::BoxObj {
            features: features.clone(),
            object: true,
        });
        samples.push(Sample::BoxReg {
            features: features.clone(),
            target: encode_delta(&b, &gts[g]),
        });
        // Ancestor-labelled boxes still train objectness and regression.
        if let ClassTarget::Leaf(l) = class_target(ctx.taxonomy, &anns[g].1)? {
            samples.push(Sample::BoxCls {
                features,
                class: ClassTarget::Leaf(l),
            });
        }
    }
    for b in neg_rois {
        if let Ok(features) = maps.features(&b) {
            samples.push(Sample::BoxObj {
                features,
                object: false,
            });
        }
    }
    Ok(samples)
}

fn image_level_samples(
    ctx: &Context,
    params: &ModelParams,
    im: &AnnotatedImage,
    flip: bool,
) -> Result<(Vec<Sample>, usize, Option<String>), TrainError> {
    let Supervision::ImageLevel(category) = &im.supervision else {
        unreachable!("image-level pool holds image-level images");
    };
    let cfg = ctx.config;
    let (raster, _) = prepared(im, flip);
    let maps = FeatureMaps::new(&raster, cfg.detector.features)?;
    let proposals = propose(
        params,
        &maps,
        ctx.anchors,
        cfg.k_imagelevel_proposals,
        &cfg.detector,
        ctx.width,
        ctx.height,
    )?;
    let labelled = label_imagelevel_proposals(&proposals, category, ctx.taxonomy)?;
    let labels: Vec<&str> = labelled.iter().map(|s| s.category.as_str()).collect();
    let filter = filter_ancestor_samples(&labels, ctx.taxonomy)?;
    let mut samples = Vec::with_capacity(filter.kept.len());
    for i in filter.kept {
        let s = &labelled[i];
        let Ok(features) = maps.features(&s.proposal.bbox) else {
            continue;
        };
        samples.push(Sample::ImageCls {
            features,
            class: ClassTarget::Leaf(ctx.taxonomy.leaf_index(&s.category)?),
        });
    }
    let filtered_category = filter.filtered_categories.into_iter().next();
    Ok((samples, filter.filtered, filtered_category))
}

/// Trains a model bound to `taxonomy` (its leaves are the classifier's
/// classes) on `dataset.train`.
pub fn train(
    dataset: &Dataset,
    taxonomy: &Taxonomy,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let box_pool: Vec<&AnnotatedImage> = dataset.box_level_train().collect();
    let img_pool: Vec<&AnnotatedImage> = dataset.image_level_train().collect();
    let first = box_pool.first().ok_or(TrainError::EmptyPool("box-level"))?;
    let (width, height) = (first.raster.width(), first.raster.height());
    let anchors = config.detector.anchors(width, height).map_err(DetectorError::from)?;
    let ctx = Context {
        taxonomy,
        config,
        anchors: &anchors,
        width: width as f64,
        height: height as f64,
    };

    let mut params = ModelParams::zeros(feature_dim(&config.detector.features), taxonomy.num_leaves());
    let mut velocity = params.zeros_like();
    let mut log = Vec::new();
    let mut epoch_params = Vec::with_capacity(config.total_epochs);
    let mut stats = TrainStats::default();
    let iters_per_epoch = make_batches(box_pool.len(), img_pool.len(), config, 0)?.len();
    let mut iter = 0usize;

    for epoch in 0..config.total_epochs {
        for batch in make_batches(box_pool.len(), img_pool.len(), config, epoch)? {
            let box_parts: Vec<Vec<Sample>> = batch
                .box_level
                .par_iter()
                .enumerate()
                .map(|(slot, e)| {
                    let mut rng = seeding::rng_for(
                        config.seed,
                        seeding::stream::SAMPLING,
                        (iter as u64) << 16 | slot as u64,
                    );
                    box_level_samples(&ctx, &params, box_pool[e.index], e.flip, &mut rng)
                })
                .collect::<Result<_, _>>()?;
            let img_parts: Vec<(Vec<Sample>, usize, Option<String>)> = if config.image_level_flow {
                batch
                    .image_level
                    .par_iter()
                    .map(|e| image_level_samples(&ctx, &params, img_pool[e.index], e.flip))
                    .collect::<Result<_, _>>()?
            } else {
                Vec::new()
            };
            let mut samples: Vec<Sample> = box_parts.into_iter().flatten().collect();
            for (s, filtered, cat) in img_parts {
                samples.extend(s);
                stats.filtered_samples += filtered;
                stats.filtered_categories.extend(cat);
            }

            let lr = lr_schedule(iter, iters_per_epoch, config);
            let (loss, grads) = batch_loss_and_grads(&params, &samples, &config.loss)?;
            if !loss.l_cross.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iter,
                    breakdown: loss,
                });
            }
            if config.momentum > 0.0 {
                for (v, g) in velocity.blocks_mut().into_iter().zip(grads.blocks()) {
                    for (vw, gw) in v.weights_mut().iter_mut().zip(g.weights()) {
                        *vw = config.momentum * *vw - lr * gw;
                    }
                }
                params.add_scaled(1.0, &velocity);
            } else {
                params.add_scaled(-lr, &grads);
            }
            if !params.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    iter,
                    breakdown: loss,
                });
            }
            log.push(LogEntry {
                iter,
                epoch,
                lr,
                loss,
            });
            iter += 1;
        }
        log::info!(
            "epoch {} done: l_cross={:.4}",
            epoch + 1,
            log.last().map(|e| e.loss.l_cross).unwrap_or(f64::NAN)
        );
        epoch_params.push(params.clone());
    }
    stats.iterations = iter;
    Ok(TrainOutcome {
        params,
        log,
        epoch_params,
        stats,
    })
}
