#![allow(dead_code)]

use csrfcn::detector::ModelParams;
use csrfcn::evaluator::RankedBox;
use csrfcn::geometry::{iou, BBox, BoxDelta};
use csrfcn::losses::{batch_loss_and_grads, ClassTarget, LossConfig, Sample};
use csrfcn::synthworld::WorldConfig;
use rand::Rng;

/// Random rooted tree over `n` nodes named `n0..`; node 0 is the root.
pub fn random_tree_edges<R: Rng>(n: usize, rng: &mut R) -> Vec<(String, String)> {
    (1..n)
        .map(|i| (format!("n{i}"), format!("n{}", rng.random_range(0..i))))
        .collect()
}

pub fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

/// Largest number of detections among `prefix` that can be matched to
/// distinct ground-truth boxes of their own image, by enumerating every
/// assignment.
fn best_assignment(prefix: &[RankedBox], gts: &[Vec<BBox>], used: &mut Vec<Vec<bool>>, thresh: f64) -> usize {
    let Some((d, rest)) = prefix.split_first() else {
        return 0;
    };
    let mut best = best_assignment(rest, gts, used, thresh);
    for g in 0..gts[d.image].len() {
        if !used[d.image][g] && iou(&d.bbox, &gts[d.image][g]) >= thresh {
            used[d.image][g] = true;
            best = best.max(1 + best_assignment(rest, gts, used, thresh));
            used[d.image][g] = false;
        }
    }
    best
}

/// AP from exhaustive matching: TP count of each ranked prefix is the best
/// achievable by any assignment of that prefix.
pub fn brute_force_ap(dets: &[RankedBox], gts: &[Vec<BBox>], thresh: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut ranked = dets.to_vec();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let tp: Vec<usize> = (1..=ranked.len())
        .map(|n| {
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            best_assignment(&ranked[..n], gts, &mut used, thresh)
        })
        .collect();
    let precision: Vec<f64> = tp
        .iter()
        .enumerate()
        .map(|(i, &t)| t as f64 / (i + 1) as f64)
        .collect();
    let mut ap = 0.0;
    let mut prev = 0;
    for n in 0..tp.len() {
        if tp[n] > prev {
            let envelope = precision[n..].iter().copied().fold(0.0, f64::max);
            ap += (tp[n] - prev) as f64 / num_gt as f64 * envelope;
            prev = tp[n];
        }
    }
    Some(ap)
}

/// A random evaluation instance with at most `max_dets` detections and
/// `max_gts` ground-truth boxes spread over one or two images. Boxes sit on a
/// coarse grid so overlaps and score ties are common.
pub fn random_ap_instance<R: Rng>(
    rng: &mut R,
    max_dets: usize,
    max_gts: usize,
) -> (Vec<RankedBox>, Vec<Vec<BBox>>) {
    let images = rng.random_range(1..=2);
    let mut gts = vec![Vec::new(); images];
    for _ in 0..rng.random_range(0..=max_gts) {
        let x = rng.random_range(0..6) as f64;
        let y = rng.random_range(0..6) as f64;
        let w = rng.random_range(2..6) as f64;
        let h = rng.random_range(2..6) as f64;
        gts[rng.random_range(0..images)].push(b(x, y, x + w, y + h));
    }
    let dets = (0..rng.random_range(0..=max_dets))
        .map(|_| {
            let image = rng.random_range(0..images);
            let bbox = match gts[image].len() {
                n if n > 0 && rng.random_bool(0.7) => {
                    let g = gts[image][rng.random_range(0..n)];
                    let dx = rng.random_range(-1..=1) as f64;
                    let dy = rng.random_range(-1..=1) as f64;
                    let dw = rng.random_range(0..=1) as f64;
                    b(g.x1 + dx, g.y1 + dy, g.x2 + dx + dw, g.y2 + dy)
                }
                _ => {
                    let x = rng.random_range(0..8) as f64;
                    let y = rng.random_range(0..8) as f64;
                    b(x, y, x + rng.random_range(1..5) as f64, y + rng.random_range(1..5) as f64)
                }
            };
            RankedBox {
                image,
                bbox,
                score: rng.random_range(1..=5) as f64 / 5.0,
            }
        })
        .collect();
    (dets, gts)
}

pub fn random_features<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_delta<R: Rng>(rng: &mut R) -> BoxDelta {
    BoxDelta {
        tx: rng.random_range(-1.5..1.5),
        ty: rng.random_range(-1.5..1.5),
        tw: rng.random_range(-1.5..1.5),
        th: rng.random_range(-1.5..1.5),
    }
}

pub fn random_params<R: Rng>(dim: usize, classes: usize, scale: f64, rng: &mut R) -> ModelParams {
    let mut p = ModelParams::zeros(dim, classes);
    for block in p.blocks_mut() {
        for w in block.weights_mut() {
            *w = rng.random_range(-scale..scale);
        }
    }
    p
}

/// Six samples covering every kind: one per kind plus a negative anchor.
pub fn mixed_batch<R: Rng>(dim: usize, classes: usize, rng: &mut R) -> Vec<Sample> {
    let mut f = || random_features(dim, rng);
    let (f0, f1, f2, f3, f4, f5) = (f(), f(), f(), f(), f(), f());
    vec![
        Sample::BoxRpn {
            features: f0,
            target: Some(random_delta(rng)),
        },
        Sample::BoxRpn {
            features: f1,
            target: None,
        },
        Sample::BoxReg {
            features: f2,
            target: random_delta(rng),
        },
        Sample::BoxObj {
            features: f3,
            object: rng.random_bool(0.5),
        },
        Sample::BoxCls {
            features: f4,
            class: ClassTarget::Leaf(rng.random_range(0..classes)),
        },
        Sample::ImageCls {
            features: f5,
            class: ClassTarget::Leaf(rng.random_range(0..classes)),
        },
    ]
}

/// Largest relative deviation between analytic and central-difference
/// gradients over every parameter, with the block it occurs in.
pub fn max_gradient_error(params: &ModelParams, batch: &[Sample], cfg: &LossConfig, eps: f64) -> (f64, usize) {
    let (_, grads) = batch_loss_and_grads(params, batch, cfg).unwrap();
    let mut worst = (0.0, 0);
    for (bi, gblock) in grads.blocks().iter().enumerate() {
        for wi in 0..gblock.weights().len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.blocks_mut()[bi].weights_mut()[wi] += delta;
                batch_loss_and_grads(&p, batch, cfg).unwrap().0.l_cross
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let analytic = gblock.weights()[wi];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            if rel > worst.0 {
                worst = (rel, bi);
            }
        }
    }
    worst
}

/// A small world that trains in a couple of seconds.
pub fn small_world(seed: u64) -> WorldConfig {
    WorldConfig {
        train_box_images: 24,
        train_image_images: 16,
        eval_images: 12,
        seed,
        ..WorldConfig::default()
    }
}
