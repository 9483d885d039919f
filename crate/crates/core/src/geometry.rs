//! Axis-aligned box arithmetic: IoU, anchors, anchor labelling, delta
//! encoding, NMS and horizontal flipping.
//!
//! Boxes use continuous corner coordinates. A pixel `(x, y)` belongs to a box
//! when its centre `(x + 0.5, y + 0.5)` lies in `[x1, x2) x [y1, y2)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Raster;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),
    #[error("anchor configuration is empty")]
    EmptyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite()) && x1 < x2 && y1 < y2;
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(GeometryError::InvalidBox(x1, y1, x2, y2))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clip to `[0, w] x [0, h]`; `None` when nothing is left.
    pub fn clip(&self, w: f64, h: f64) -> Option<Self> {
        Self::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
        .ok()
    }

    pub fn contained_in(&self, w: f64, h: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= w && self.y2 <= h
    }

    /// Half-open pixel column and row ranges covered by the box.
    pub fn pixel_span(&self) -> (std::ops::Range<i64>, std::ops::Range<i64>) {
        let cols = (self.x1 - 0.5).ceil() as i64..(self.x2 - 0.5).ceil() as i64;
        let rows = (self.y1 - 0.5).ceil() as i64..(self.y2 - 0.5).ceil() as i64;
        (cols, rows)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }
}

pub fn encode_delta(anchor: &BBox, gt: &BBox) -> BoxDelta {
    let (ax, ay) = anchor.center();
    let (gx, gy) = gt.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxDelta {
        tx: (gx - ax) / aw,
        ty: (gy - ay) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    }
}

/// Log-size deltas are clamped so an untrained regressor cannot blow boxes
/// up to infinity.
pub const MAX_LOG_SCALE: f64 = 4.0;

pub fn decode_delta(anchor: &BBox, d: &BoxDelta) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + d.tx * aw;
    let cy = ay + d.ty * ah;
    let w = aw * d.tw.min(MAX_LOG_SCALE).exp();
    let h = ah * d.th.min(MAX_LOG_SCALE).exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// One anchor per grid cell, scale and ratio (`ratio = width / height`),
/// centred on cell centres and clipped to the image. Order is row-major over
/// cells, then scales, then ratios.
pub fn generate_anchors(
    image_w: usize,
    image_h: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Result<Vec<BBox>, GeometryError> {
    if stride == 0 || scales.is_empty() || ratios.is_empty() {
        return Err(GeometryError::EmptyConfig);
    }
    let (gw, gh) = (image_w / stride, image_h / stride);
    if gw == 0 || gh == 0 {
        return Err(GeometryError::EmptyConfig);
    }
    let (w, h) = (image_w as f64, image_h as f64);
    let mut out = Vec::with_capacity(gw * gh * scales.len() * ratios.len());
    for gy in 0..gh {
        for gx in 0..gw {
            let cx = (gx as f64 + 0.5) * stride as f64;
            let cy = (gy as f64 + 0.5) * stride as f64;
            for &s in scales {
                for &r in ratios {
                    let aw = s * r.sqrt();
                    let ah = s / r.sqrt();
                    let b = BBox::from_center(cx, cy, aw, ah)?;
                    out.push(b.clip(w, h).ok_or(GeometryError::EmptyConfig)?);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorAssignment {
    Positive { matched_gt: usize, target: BoxDelta },
    Negative,
    Ignore,
}

impl AnchorAssignment {
    pub fn is_positive(&self) -> bool {
        matches!(self, Self::Positive { .. })
    }

    pub fn matched_gt(&self) -> Option<usize> {
        match self {
            Self::Positive { matched_gt, .. } => Some(*matched_gt),
            _ => None,
        }
    }

    pub fn target(&self) -> Option<BoxDelta> {
        match self {
            Self::Positive { target, .. } => Some(*target),
            _ => None,
        }
    }
}

/// Labels anchors against ground truth.
///
/// Positive when IoU reaches `pos_thresh` or the anchor is a best match for
/// some ground truth box it overlaps; negative when its best IoU is at most
/// `neg_thresh`; ignored otherwise.
pub fn assign_anchor_labels(
    anchors: &[BBox],
    gt_boxes: &[BBox],
    pos_thresh: f64,
    neg_thresh: f64,
) -> Vec<AnchorAssignment> {
    if gt_boxes.is_empty() {
        return vec![AnchorAssignment::Negative; anchors.len()];
    }
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt_boxes.iter().map(|g| iou(a, g)).collect())
        .collect();
    let gt_best: Vec<f64> = (0..gt_boxes.len())
        .map(|g| ious.iter().map(|row| row[g]).fold(0.0, f64::max))
        .collect();

    anchors
        .iter()
        .zip(&ious)
        .map(|(anchor, row)| {
            let (best_gt, best) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (g, v)| {
                    if v > acc.1 {
                        (g, v)
                    } else {
                        acc
                    }
                });
            let fallback = (0..gt_boxes.len())
                .filter(|&g| gt_best[g] > 0.0 && row[g] == gt_best[g])
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)));
            let matched = if best >= pos_thresh {
                Some(best_gt)
            } else {
                fallback
            };
            match matched {
                Some(g) => AnchorAssignment::Positive {
                    matched_gt: g,
                    target: encode_delta(anchor, &gt_boxes[g]),
                },
                None if best <= neg_thresh => AnchorAssignment::Negative,
                None => AnchorAssignment::Ignore,
            }
        })
        .collect()
}

/// Greedy non-maximum suppression. Returns indices into `scored` sorted by
/// descending score; equal scores keep input order.
pub fn nms(scored: &[(BBox, f64)], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].1.total_cmp(&scored[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let b = &scored[i].0;
        if kept.iter().all(|&k| iou(&scored[k].0, b) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

pub fn flip_box(b: &BBox, image_w: f64) -> BBox {
    BBox {
        x1: image_w - b.x2,
        y1: b.y1,
        x2: image_w - b.x1,
        y2: b.y2,
    }
}

pub fn horizontal_flip(raster: &Raster, boxes: &[BBox]) -> (Raster, Vec<BBox>) {
    let w = raster.width() as f64;
    (
        raster.flipped_horizontally(),
        boxes.iter().map(|b| flip_box(b, w)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(BBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        let parsed: Result<BBox, _> = serde_json::from_str("[3, 0, 1, 2]");
        assert!(parsed.is_err());
        let ok: BBox = serde_json::from_str("[0, 0, 1, 2]").unwrap();
        assert_eq!(serde_json::to_string(&ok).unwrap(), "[0.0,0.0,1.0,2.0]");
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert_eq!(iou(&a, &b(10.0, 0.0, 20.0, 10.0)), 0.0);
        let v = iou(&a, &b(5.0, 5.0, 15.0, 15.0));
        assert!((v - 25.0 / 175.0).abs() < 1e-15);
    }

    #[test]
    fn anchor_counts_and_clipping() {
        let a = generate_anchors(64, 64, 16, &[16.0], &[1.0]).unwrap();
        assert_eq!(a.len(), 16);
        assert!(a.iter().all(|b| b.width() == 16.0 && b.height() == 16.0));
        assert_eq!(a[0], b(0.0, 0.0, 16.0, 16.0));
        assert_eq!(a[1], b(16.0, 0.0, 32.0, 16.0));

        let a = generate_anchors(64, 64, 16, &[16.0, 32.0], &[1.0, 2.0]).unwrap();
        assert_eq!(a.len(), 64);
        assert!(a.iter().all(|b| b.x2 <= 64.0 && b.x1 >= 0.0));
        // last cell, scale 32, ratio 1 would span 40..72 before clipping
        assert_eq!(a[62], b(40.0, 40.0, 64.0, 64.0));

        assert_eq!(
            generate_anchors(64, 64, 16, &[], &[1.0]),
            Err(GeometryError::EmptyConfig)
        );
        assert_eq!(
            generate_anchors(64, 64, 128, &[16.0], &[1.0]),
            Err(GeometryError::EmptyConfig)
        );
    }

    #[test]
    fn assignment_examples() {
        let anchors = vec![b(0.0, 0.0, 10.0, 10.0), b(20.0, 20.0, 30.0, 30.0)];
        let labels = assign_anchor_labels(&anchors, &[], 0.7, 0.3);
        assert!(labels.iter().all(|l| *l == AnchorAssignment::Negative));

        let gt = b(0.0, 0.0, 10.0, 10.0);
        let labels = assign_anchor_labels(&anchors, &[gt], 0.7, 0.3);
        assert_eq!(
            labels[0],
            AnchorAssignment::Positive {
                matched_gt: 0,
                target: BoxDelta::default()
            }
        );
        assert_eq!(labels[1], AnchorAssignment::Negative);

        // IoUs against gt: 0.8, 0.5, 0.1
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let anchors = vec![
            b(0.0, 0.0, 10.0, 8.0),
            b(0.0, 0.0, 10.0, 5.0),
            b(0.0, 0.0, 10.0, 1.0),
        ];
        let got: Vec<_> = anchors.iter().map(|a| iou(a, &gt)).collect();
        assert!((got[0] - 0.8).abs() < 1e-12 && (got[1] - 0.5).abs() < 1e-12);
        let labels = assign_anchor_labels(&anchors, &[gt], 0.7, 0.3);
        assert!(labels[0].is_positive());
        assert_eq!(labels[1], AnchorAssignment::Ignore);
        assert_eq!(labels[2], AnchorAssignment::Negative);
    }

    #[test]
    fn argmax_fallback_gives_every_overlapped_gt_a_positive() {
        let gt = b(0.0, 0.0, 10.0, 10.0);
        let anchors = vec![b(0.0, 0.0, 10.0, 3.0), b(0.0, 0.0, 10.0, 2.0)];
        let labels = assign_anchor_labels(&anchors, &[gt], 0.7, 0.3);
        assert_eq!(labels[0].matched_gt(), Some(0));
        assert_eq!(labels[1], AnchorAssignment::Negative);
    }

    #[test]
    fn delta_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_delta(&a, &a), BoxDelta::default());
        let d = encode_delta(&a, &b(0.0, 0.0, 20.0, 20.0));
        assert!((d.tx - 0.5).abs() < 1e-15 && (d.ty - 0.5).abs() < 1e-15);
        assert!((d.tw - 2f64.ln()).abs() < 1e-15 && (d.th - 2f64.ln()).abs() < 1e-15);
        let g = b(3.0, 4.5, 17.0, 9.0);
        let back = decode_delta(&a, &encode_delta(&a, &g));
        for (x, y) in back.to_array().iter().zip(g.to_array()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[(a, 0.3)], 0.5), vec![0]);
        assert_eq!(nms(&[(a, 0.8), (a, 0.9)], 0.5), vec![1]);

        // A vs B: IoU 0.6; C disjoint
        let boxes = vec![
            (b(0.0, 0.0, 10.0, 10.0), 0.9),
            (b(0.0, 0.0, 10.0, 6.0), 0.8),
            (b(50.0, 50.0, 60.0, 60.0), 0.7),
        ];
        assert!((iou(&boxes[0].0, &boxes[1].0) - 0.6).abs() < 1e-12);
        assert_eq!(nms(&boxes, 0.5), vec![0, 2]);

        let ties = vec![(a, 0.5), (b(40.0, 0.0, 50.0, 10.0), 0.5)];
        assert_eq!(nms(&ties, 0.5), vec![0, 1]);
    }

    #[test]
    fn flip_examples() {
        let r = Raster::filled(64, 64, 3, 0.0);
        let centered = b(22.0, 10.0, 42.0, 30.0);
        let (_, out) = horizontal_flip(&r, &[centered]);
        assert_eq!(out[0], centered);
        let (_, out) = horizontal_flip(&r, &[b(0.0, 0.0, 10.0, 20.0)]);
        assert_eq!(out[0], b(54.0, 0.0, 64.0, 20.0));
        let boxes = [b(1.5, 2.0, 7.25, 9.0)];
        let (r1, b1) = horizontal_flip(&r, &boxes);
        let (r2, b2) = horizontal_flip(&r1, &b1);
        assert_eq!(r2, r);
        assert_eq!(b2, boxes.to_vec());
    }

    #[test]
    fn pixel_span_uses_pixel_centres() {
        let (cols, rows) = b(0.0, 0.0, 10.0, 10.0).pixel_span();
        assert_eq!((cols, rows), (0..10, 0..10));
        let (cols, _) = b(0.4, 0.0, 1.6, 1.0).pixel_span();
        assert_eq!(cols, 0..2);
        let (cols, _) = b(0.6, 0.0, 1.4, 1.0).pixel_span();
        assert!(cols.is_empty());
    }
}
