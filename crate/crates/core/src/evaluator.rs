//! mAP at IoU 0.5, split reporting and proposal AP/AR tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::detector::{
    ranked_proposals, regions_to_detections, score_proposals, DetectorConfig, DetectorError,
    ModelParams, Proposal, ReportNodes,
};
use crate::featurizer::{FeatureError, FeatureMaps};
use crate::geometry::{iou, BBox};
use crate::synthworld::{AnnotatedImage, Split, Supervision};
use crate::taxonomy::{Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("proposal counts must be positive and strictly ascending: {0:?}")]
    BadCounts(Vec<usize>),
    #[error("evaluation image {0} has no boxes")]
    NotBoxLevel(String),
    #[error("report format: {0}")]
    Format(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A scored box in image `image`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedBox {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_gt: usize,
    pub curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    Ignored,
}

/// Indices of `dets` by descending score, ties in input order.
fn ranking(dets: &[RankedBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

struct ImageMatcher {
    /// Candidate GTs per detection, by descending IoU.
    cands: Vec<Vec<usize>>,
    gt_owner: Vec<Option<usize>>,
}

impl ImageMatcher {
    fn augment(&mut self, d: usize, seen: &mut [bool]) -> bool {
        for k in 0..self.cands[d].len() {
            let g = self.cands[d][k];
            if seen[g] {
                continue;
            }
            seen[g] = true;
            let free = match self.gt_owner[g] {
                None => true,
                Some(o) => self.augment(o, seen),
            };
            if free {
                self.gt_owner[g] = Some(d);
                return true;
            }
        }
        false
    }
}

/// Walks detections in rank order. Each takes the highest-IoU unmatched GT
/// of its image; when all of its candidates are taken, earlier matches are
/// reassigned along an augmenting path if that frees one. The TP count of
/// every prefix is therefore the largest achievable for that prefix.
fn match_detections(
    dets: &[RankedBox],
    order: &[usize],
    gts: &[Vec<BBox>],
    ignore: Option<&[Vec<BBox>]>,
    iou_thresh: f64,
) -> Vec<Outcome> {
    let mut matchers: Vec<ImageMatcher> = gts
        .iter()
        .map(|g| ImageMatcher {
            cands: Vec::new(),
            gt_owner: vec![None; g.len()],
        })
        .collect();
    let mut outcomes = Vec::with_capacity(order.len());
    for &i in order {
        let det = &dets[i];
        let Some(m) = matchers.get_mut(det.image) else {
            outcomes.push(Outcome::Fp);
            continue;
        };
        let image_gts = &gts[det.image];
        let mut scored: Vec<(usize, f64)> = image_gts
            .iter()
            .enumerate()
            .map(|(g, b)| (g, iou(&det.bbox, b)))
            .filter(|&(_, v)| v >= iou_thresh)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        let local = m.cands.len();
        m.cands.push(scored.iter().map(|&(g, _)| g).collect());
        let hit = match scored.iter().find(|&&(g, _)| m.gt_owner[g].is_none()) {
            Some(&(g, _)) => {
                m.gt_owner[g] = Some(local);
                true
            }
            None => {
                let mut seen = vec![false; image_gts.len()];
                m.augment(local, &mut seen)
            }
        };
        let outcome = if hit {
            Outcome::Tp
        } else if ignore.is_some_and(|ig| {
            ig.get(det.image)
                .is_some_and(|bs| bs.iter().any(|b| iou(&det.bbox, b) >= iou_thresh))
        }) {
            Outcome::Ignored
        } else {
            Outcome::Fp
        };
        outcomes.push(outcome);
    }
    outcomes
}

/// All-point interpolated area under a precision-recall sequence given as
/// `(tp, fp)` counts after each ranked detection.
fn envelope_area(points: &[(usize, usize)], num_gt: usize) -> f64 {
    let mut precision: Vec<f64> = points
        .iter()
        .map(|&(tp, fp)| tp as f64 / (tp + fp) as f64)
        .collect();
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (i, &(tp, _)) in points.iter().enumerate() {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / num_gt as f64 * precision[i];
            prev_tp = tp;
        }
    }
    ap
}

fn ap_from_outcomes(
    dets: &[RankedBox],
    order: &[usize],
    outcomes: &[Outcome],
    num_gt: usize,
) -> Option<ApResult> {
    if num_gt == 0 {
        return None;
    }
    let (mut tp, mut fp) = (0, 0);
    let mut points = Vec::new();
    let mut curve = Vec::new();
    for (&i, &o) in order.iter().zip(outcomes) {
        match o {
            Outcome::Tp => tp += 1,
            Outcome::Fp => fp += 1,
            Outcome::Ignored => continue,
        }
        points.push((tp, fp));
        curve.push(PrPoint {
            threshold: dets[i].score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / num_gt as f64,
        });
    }
    Some(ApResult {
        ap: envelope_area(&points, num_gt),
        true_positives: tp,
        false_positives: fp,
        num_gt,
        curve,
    })
}

/// AP of one category. `gts[i]` holds the category's boxes in image `i`.
/// Returns `None` when there is no ground truth.
pub fn average_precision(dets: &[RankedBox], gts: &[Vec<BBox>], iou_thresh: f64) -> Option<ApResult> {
    let num_gt = gts.iter().map(Vec::len).sum();
    let order = ranking(dets);
    let outcomes = match_detections(dets, &order, gts, None, iou_thresh);
    ap_from_outcomes(dets, &order, &outcomes, num_gt)
}

/// Like `average_precision`, but a detection that matches no box of `gts`
/// and overlaps a box of `ignore` at the threshold is left out of the
/// ranking instead of counting as a false positive.
pub fn average_precision_ignoring(
    dets: &[RankedBox],
    gts: &[Vec<BBox>],
    ignore: &[Vec<BBox>],
    iou_thresh: f64,
) -> Option<ApResult> {
    let num_gt = gts.iter().map(Vec::len).sum();
    let order = ranking(dets);
    let outcomes = match_detections(dets, &order, gts, Some(ignore), iou_thresh);
    ap_from_outcomes(dets, &order, &outcomes, num_gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MapSummary {
    pub all: Option<f64>,
    pub box_level: Option<f64>,
    pub image_level: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Unweighted means over evaluated categories. Categories without an AP
/// are skipped; an empty split is reported as `None`.
pub fn mean_ap(aps: &BTreeMap<String, Option<f64>>, splits: &BTreeMap<String, Split>) -> MapSummary {
    let mut all = Vec::new();
    let mut by_split: BTreeMap<Split, Vec<f64>> = BTreeMap::new();
    for (cat, ap) in aps {
        let Some(ap) = *ap else { continue };
        all.push(ap);
        if let Some(&s) = splits.get(cat) {
            by_split.entry(s).or_default().push(ap);
        }
    }
    let split_mean = |s| by_split.get(&s).and_then(|v| mean(v));
    MapSummary {
        all: mean(&all),
        box_level: split_mean(Split::Box),
        image_level: split_mean(Split::Image),
    }
}

/// Proposal metrics at one budget, ordered all / box-level / image-level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalRow {
    pub count: usize,
    pub ap: [Option<f64>; 3],
    pub ar: [Option<f64>; 3],
}

pub const DEFAULT_PROPOSAL_COUNTS: [usize; 6] = [10, 20, 50, 100, 200, 300];

fn check_counts(counts: &[usize]) -> Result<(), EvalError> {
    if counts.is_empty() || counts[0] == 0 || counts.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadCounts(counts.to_vec()));
    }
    Ok(())
}

/// Ground truth of one evaluation image: leaf category and box.
pub type ImageTruth = Vec<(String, BBox)>;

/// Class-agnostic proposal AP and AR per budget. `ranked[i]` is image `i`'s
/// full ranked proposal list, so a budget `K` takes its first `K` entries.
/// AP pools every image's proposals and ranks them by objectness. A GT box
/// counts towards AR when any of the image's first `K` proposals reaches
/// the IoU threshold. For a split, proposals on GT boxes of the other split
/// are ignored.
pub fn proposal_table(
    ranked: &[Vec<Proposal>],
    truth: &[ImageTruth],
    splits: &BTreeMap<String, Split>,
    counts: &[usize],
    iou_thresh: f64,
) -> Result<Vec<ProposalRow>, EvalError> {
    check_counts(counts)?;
    let select = |keep: &dyn Fn(&str) -> bool| -> Vec<Vec<BBox>> {
        truth
            .iter()
            .map(|t| t.iter().filter(|(c, _)| keep(c)).map(|(_, b)| *b).collect())
            .collect()
    };
    let in_split = |c: &str, s: Split| splits.get(c) == Some(&s);
    let groups: [(Vec<Vec<BBox>>, Option<Vec<Vec<BBox>>>); 3] = [
        (select(&|_| true), None),
        (
            select(&|c| in_split(c, Split::Box)),
            Some(select(&|c| !in_split(c, Split::Box))),
        ),
        (
            select(&|c| in_split(c, Split::Image)),
            Some(select(&|c| !in_split(c, Split::Image))),
        ),
    ];
    let rows = counts
        .par_iter()
        .map(|&k| {
            let dets: Vec<RankedBox> = ranked
                .iter()
                .enumerate()
                .flat_map(|(image, props)| {
                    props.iter().take(k).map(move |p| RankedBox {
                        image,
                        bbox: p.bbox,
                        score: p.objectness,
                    })
                })
                .collect();
            let mut ap = [None; 3];
            let mut ar = [None; 3];
            for (s, (gts, ignore)) in groups.iter().enumerate() {
                ap[s] = match ignore {
                    None => average_precision(&dets, gts, iou_thresh),
                    Some(ig) => average_precision_ignoring(&dets, gts, ig, iou_thresh),
                }
                .map(|r| r.ap);
                let total: usize = gts.iter().map(Vec::len).sum();
                let found: usize = gts
                    .iter()
                    .zip(ranked)
                    .map(|(g, props)| {
                        g.iter()
                            .filter(|b| props.iter().take(k).any(|p| iou(&p.bbox, b) >= iou_thresh))
                            .count()
                    })
                    .sum();
                ar[s] = (total > 0).then(|| found as f64 / total as f64);
            }
            ProposalRow { count: k, ap, ar }
        })
        .collect();
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryAp {
    pub category: String,
    pub split: Option<Split>,
    pub num_gt: usize,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub per_category: Vec<CategoryAp>,
    pub summary: MapSummary,
    pub proposals: Vec<ProposalRow>,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub proposal_counts: Vec<usize>,
    /// Proposals per image fed to the head at inference.
    pub inference_proposals: usize,
    pub report: ReportNodes,
    /// Categories to score; the truth taxonomy's leaves when `None`.
    pub categories: Option<Vec<String>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            proposal_counts: DEFAULT_PROPOSAL_COUNTS.to_vec(),
            inference_proposals: 300,
            report: ReportNodes::LeafOnly,
            categories: None,
        }
    }
}

/// Evaluates a model on `images`. `model_taxonomy` is the classifier's
/// taxonomy; ground truth for a category is every instance whose leaf lies
/// within it in `truth`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    params: &ModelParams,
    model_taxonomy: &Taxonomy,
    truth: &Taxonomy,
    images: &[AnnotatedImage],
    splits: &BTreeMap<String, Split>,
    detector: &DetectorConfig,
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    check_counts(&config.proposal_counts)?;
    let truths: Vec<ImageTruth> = images
        .iter()
        .map(|im| match &im.supervision {
            Supervision::BoxLevel(anns) => {
                Ok(anns.iter().map(|a| (a.category.clone(), a.bbox)).collect())
            }
            Supervision::ImageLevel(_) => Err(EvalError::NotBoxLevel(im.id.clone())),
        })
        .collect::<Result<_, _>>()?;
    let categories: Vec<String> = match &config.categories {
        Some(c) => c.clone(),
        None => truth.leaf_names().iter().map(|s| s.to_string()).collect(),
    };
    let budget = config
        .inference_proposals
        .max(*config.proposal_counts.last().expect("checked"));

    let per_image: Vec<(Vec<Proposal>, Vec<crate::detector::Detection>)> = images
        .par_iter()
        .map(|im| {
            let (w, h) = (im.raster.width() as f64, im.raster.height() as f64);
            let anchors = detector
                .anchors(im.raster.width(), im.raster.height())
                .map_err(DetectorError::from)?;
            let maps = FeatureMaps::new(&im.raster, detector.features)?;
            let mut ranked = ranked_proposals(params, &maps, &anchors, detector, w, h)?;
            ranked.truncate(budget);
            let k = config.inference_proposals.min(ranked.len());
            let regions = score_proposals(params, model_taxonomy, &maps, &ranked[..k], w, h)?;
            let dets = regions_to_detections(&regions, model_taxonomy, config.report, detector);
            Ok((ranked, dets))
        })
        .collect::<Result<_, EvalError>>()?;

    let per_category: Vec<CategoryAp> = categories
        .par_iter()
        .map(|cat| {
            let node = truth
                .node(cat)
                .ok_or_else(|| TaxonomyError::UnknownCategory(cat.clone()))?;
            let mut gts = Vec::with_capacity(truths.len());
            for t in &truths {
                let mut g = Vec::new();
                for (leaf, b) in t {
                    let v = truth
                        .node(leaf)
                        .ok_or_else(|| TaxonomyError::UnknownCategory(leaf.clone()))?;
                    if truth.is_within(v, node) {
                        g.push(*b);
                    }
                }
                gts.push(g);
            }
            let dets: Vec<RankedBox> = per_image
                .iter()
                .enumerate()
                .flat_map(|(image, (_, ds))| {
                    ds.iter().filter(|d| &d.category == cat).map(move |d| RankedBox {
                        image,
                        bbox: d.bbox,
                        score: d.score,
                    })
                })
                .collect();
            let res = average_precision(&dets, &gts, config.iou_thresh);
            Ok(CategoryAp {
                category: cat.clone(),
                split: splits.get(cat).copied(),
                num_gt: gts.iter().map(Vec::len).sum(),
                ap: res.map(|r| r.ap),
            })
        })
        .collect::<Result<_, EvalError>>()?;

    let aps: BTreeMap<String, Option<f64>> = per_category
        .iter()
        .map(|c| (c.category.clone(), c.ap))
        .collect();
    let summary = mean_ap(&aps, splits);
    let ranked: Vec<Vec<Proposal>> = per_image.into_iter().map(|(r, _)| r).collect();
    let proposals = proposal_table(
        &ranked,
        &truths,
        splits,
        &config.proposal_counts,
        config.iou_thresh,
    )?;
    let mut metadata = BTreeMap::new();
    metadata.insert("iou_threshold".into(), config.iou_thresh.to_string());
    metadata.insert("ap_interpolation".into(), "all_point".into());
    metadata.insert("proposal_ranking".into(), "global_by_objectness".into());
    metadata.insert(
        "inference_proposals".into(),
        config.inference_proposals.to_string(),
    );
    metadata.insert("eval_images".into(), images.len().to_string());
    Ok(EvalReport {
        per_category,
        summary,
        proposals,
        metadata,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>, EvalError> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| EvalError::Format(format!("bad number `{s}`")))
}

fn split_name(s: Option<Split>) -> &'static str {
    match s {
        Some(Split::Box) => "box",
        Some(Split::Image) => "image",
        None => "none",
    }
}

pub const PER_CATEGORY_HEADER: &str = "category,split,num_gt,ap";
pub const SUMMARY_HEADER: &str = "mAP_all,mAP_box_level,mAP_image_level";
pub const PROPOSAL_HEADER: &str =
    "proposals,AP_all,AP_box_level,AP_image_level,AR_all,AR_box_level,AR_image_level";

impl EvalReport {
    pub fn per_category_csv(&self) -> String {
        let mut s = format!("{PER_CATEGORY_HEADER}\n");
        for c in &self.per_category {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                c.category,
                split_name(c.split),
                c.num_gt,
                fmt_opt(c.ap)
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let m = &self.summary;
        format!(
            "{SUMMARY_HEADER}\n{},{},{}\n",
            fmt_opt(m.all),
            fmt_opt(m.box_level),
            fmt_opt(m.image_level)
        )
    }

    pub fn proposal_csv(&self) -> String {
        let mut s = format!("{PROPOSAL_HEADER}\n");
        for r in &self.proposals {
            let cols: Vec<String> = r.ap.iter().chain(&r.ar).map(|v| fmt_opt(*v)).collect();
            let _ = writeln!(s, "{},{}", r.count, cols.join(","));
        }
        s
    }

    pub fn metadata_csv(&self) -> String {
        let mut s = String::from("key,value\n");
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    /// Writes `per_category_ap.csv`, `summary.csv`, `proposal_table.csv` and
    /// `metadata.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("per_category_ap.csv"), self.per_category_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        std::fs::write(dir.join("proposal_table.csv"), self.proposal_csv())?;
        std::fs::write(dir.join("metadata.csv"), self.metadata_csv())?;
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self, EvalError> {
        let dir = dir.as_ref();
        let load = |name: &str, header: &str| -> Result<Vec<Vec<String>>, EvalError> {
            let text = std::fs::read_to_string(dir.join(name))?;
            let mut lines = text.lines();
            if lines.next() != Some(header) {
                return Err(EvalError::Format(format!("{name}: unexpected header")));
            }
            Ok(lines
                .map(|l| l.split(',').map(str::to_string).collect())
                .collect())
        };
        let width = |row: &[String], n: usize, name: &str| {
            if row.len() == n {
                Ok(())
            } else {
                Err(EvalError::Format(format!("{name}: expected {n} columns")))
            }
        };

        let mut per_category = Vec::new();
        for row in load("per_category_ap.csv", PER_CATEGORY_HEADER)? {
            width(&row, 4, "per_category_ap.csv")?;
            let split = match row[1].as_str() {
                "box" => Some(Split::Box),
                "image" => Some(Split::Image),
                "none" => None,
                other => return Err(EvalError::Format(format!("bad split `{other}`"))),
            };
            per_category.push(CategoryAp {
                category: row[0].clone(),
                split,
                num_gt: row[2]
                    .parse()
                    .map_err(|_| EvalError::Format(format!("bad count `{}`", row[2])))?,
                ap: parse_opt(&row[3])?,
            });
        }
        let rows = load("summary.csv", SUMMARY_HEADER)?;
        let [row] = rows.as_slice() else {
            return Err(EvalError::Format("summary.csv: expected one row".into()));
        };
        width(row, 3, "summary.csv")?;
        let summary = MapSummary {
            all: parse_opt(&row[0])?,
            box_level: parse_opt(&row[1])?,
            image_level: parse_opt(&row[2])?,
        };
        let mut proposals = Vec::new();
        for row in load("proposal_table.csv", PROPOSAL_HEADER)? {
            width(&row, 7, "proposal_table.csv")?;
            let v = |i: usize| parse_opt(&row[i]);
            proposals.push(ProposalRow {
                count: row[0]
                    .parse()
                    .map_err(|_| EvalError::Format(format!("bad count `{}`", row[0])))?,
                ap: [v(1)?, v(2)?, v(3)?],
                ar: [v(4)?, v(5)?, v(6)?],
            });
        }
        let mut metadata = BTreeMap::new();
        for row in load("metadata.csv", "key,value")? {
            width(&row, 2, "metadata.csv")?;
            metadata.insert(row[0].clone(), row[1].clone());
        }
        Ok(Self {
            per_category,
            summary,
            proposals,
            metadata,
        })
    }
}
