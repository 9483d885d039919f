//! Desk-scale cross-supervised dataset: rendered scenes of hierarchically
//! organised shape categories, with box annotations for one category pool
//! and a single image-level label for the other.

mod manifest;
mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{load_dataset, save_dataset, MANIFEST_FILE};
pub use render::{render_image, Backdrop};

use crate::geometry::{iou, BBox};
use crate::raster::{Raster, RasterError};
use crate::seeding;
use crate::taxonomy::{Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("invalid world config: {0}")]
    ConfigInvalid(String),
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("manifest line {line}: {msg}")]
    FormatError { line: usize, msg: String },
    #[error("missing raster {path} for record {id}")]
    MissingRaster { id: String, path: PathBuf },
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error(transparent)]
    Raster(RasterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceSpec {
    pub shape: ShapeKind,
    pub color: [f32; 3],
    /// Uniform per-channel jitter applied per instance.
    pub color_jitter: f32,
    /// Side length range in pixels (geometric mean of width and height).
    pub size: (f64, f64),
    /// Width / height range.
    pub aspect: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// `(child, parent)` edges.
    pub taxonomy: Vec<(String, String)>,
    /// Appearance per leaf category.
    pub appearance: BTreeMap<String, AppearanceSpec>,
    pub box_level_categories: BTreeSet<String>,
    pub image_level_categories: BTreeSet<String>,
    pub train_box_images: usize,
    pub train_image_images: usize,
    pub eval_images: usize,
    pub objects_per_image: (usize, usize),
    pub raster_size: usize,
    pub background: [f32; 3],
    pub noise_std: f32,
    /// Probability that an extra object in an image-level image comes from
    /// an unrelated category.
    pub distractor_prob: f64,
    /// Placement retries reject objects overlapping earlier ones above this IoU.
    pub max_overlap: f64,
    pub seed: u64,
}

const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.30, 0.90]),
    ("yellow", [0.85, 0.80, 0.15]),
];

const SHAPES: [(&str, ShapeKind); 3] = [
    ("ellipse", ShapeKind::Ellipse),
    ("rectangle", ShapeKind::Rectangle),
    ("triangle", ShapeKind::Triangle),
];

impl Default for WorldConfig {
    /// Twelve leaves (three shapes by four colours) under three shape
    /// families. Six leaves are box-annotated and six image-labelled, laid
    /// out so every shape and every colour occurs in the box-level pool.
    fn default() -> Self {
        let mut taxonomy = Vec::new();
        let mut appearance = BTreeMap::new();
        for (shape, kind) in SHAPES {
            taxonomy.push((shape.to_string(), "shape".to_string()));
            for (color, rgb) in COLORS {
                let leaf = format!("{color}_{shape}");
                taxonomy.push((leaf.clone(), shape.to_string()));
                appearance.insert(
                    leaf,
                    AppearanceSpec {
                        shape: kind,
                        color: rgb,
                        color_jitter: 0.08,
                        size: (12.0, 26.0),
                        aspect: (0.67, 1.5),
                    },
                );
            }
        }
        let box_level = [
            "red_ellipse",
            "green_ellipse",
            "blue_rectangle",
            "yellow_rectangle",
            "red_triangle",
            "blue_triangle",
        ];
        let image_level = [
            "blue_ellipse",
            "yellow_ellipse",
            "red_rectangle",
            "green_rectangle",
            "green_triangle",
            "yellow_triangle",
        ];
        Self {
            taxonomy,
            appearance,
            box_level_categories: box_level.iter().map(|s| s.to_string()).collect(),
            image_level_categories: image_level.iter().map(|s| s.to_string()).collect(),
            train_box_images: 240,
            train_image_images: 240,
            eval_images: 120,
            objects_per_image: (1, 3),
            raster_size: 64,
            background: [0.12, 0.12, 0.12],
            noise_std: 0.05,
            distractor_prob: 0.2,
            max_overlap: 0.1,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn build_taxonomy(&self) -> Result<Taxonomy, WorldError> {
        Ok(Taxonomy::build(&self.taxonomy)?)
    }

    /// Every category box-annotated: the fully supervised reference world.
    pub fn fully_supervised(&self) -> Self {
        let mut out = self.clone();
        out.box_level_categories.extend(out.image_level_categories.iter().cloned());
        out.image_level_categories.clear();
        out.train_box_images += out.train_image_images;
        out.train_image_images = 0;
        out
    }

    pub fn validate(&self) -> Result<Taxonomy, WorldError> {
        let invalid = |m: String| Err(WorldError::ConfigInvalid(m));
        let taxonomy = self.build_taxonomy()?;
        if let Some(c) = self
            .box_level_categories
            .intersection(&self.image_level_categories)
            .next()
        {
            return invalid(format!("{c} is both box-level and image-level"));
        }
        for c in self
            .box_level_categories
            .iter()
            .chain(&self.image_level_categories)
        {
            if taxonomy.node(c).is_none() {
                return Err(WorldError::UnknownCategory(c.clone()));
            }
        }
        for leaf in taxonomy.leaf_names() {
            if !self.appearance.contains_key(leaf) {
                return invalid(format!("no appearance for leaf {leaf}"));
            }
        }
        for name in self.appearance.keys() {
            match taxonomy.node(name) {
                Some(v) if taxonomy.is_leaf(v) => {}
                _ => return invalid(format!("appearance for non-leaf {name}")),
            }
        }
        if self.raster_size < 32 {
            return invalid(format!("raster {} smaller than 32", self.raster_size));
        }
        let (lo, hi) = self.objects_per_image;
        if lo == 0 || lo > hi {
            return invalid(format!("objects per image range {lo}..={hi}"));
        }
        for (name, spec) in &self.appearance {
            let (smin, smax) = spec.size;
            let (amin, amax) = spec.aspect;
            let max_side = smax * amax.max(1.0 / amin).sqrt();
            if !(smin >= 2.0 && smin <= smax && amin > 0.0 && amin <= amax)
                || max_side > self.raster_size as f64
            {
                return invalid(format!("size/aspect range of {name} does not fit"));
            }
        }
        if (self.train_box_images > 0) != !self.box_level_categories.is_empty()
            || (self.train_image_images > 0) != !self.image_level_categories.is_empty()
        {
            return invalid("image counts disagree with category pools".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) || self.noise_std < 0.0 {
            return invalid("distractor probability or noise out of range".into());
        }
        Ok(taxonomy)
    }

    pub fn backdrop(&self) -> Backdrop {
        Backdrop {
            color: self.background,
            noise_std: self.noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Supervision {
    BoxLevel(Vec<Annotation>),
    ImageLevel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedImage {
    pub id: String,
    pub raster: Raster,
    pub supervision: Supervision,
}

impl AnnotatedImage {
    pub fn is_box_level(&self) -> bool {
        matches!(self.supervision, Supervision::BoxLevel(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Box,
    Image,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<AnnotatedImage>,
    /// Always box-level with leaf categories.
    pub eval: Vec<AnnotatedImage>,
    /// Full leaf-level boxes of image-level training images, for analysis
    /// only; never fed to training.
    pub hidden: BTreeMap<String, Vec<Annotation>>,
}

impl Dataset {
    pub fn box_level_train(&self) -> impl Iterator<Item = &AnnotatedImage> {
        self.train.iter().filter(|im| im.is_box_level())
    }

    pub fn image_level_train(&self) -> impl Iterator<Item = &AnnotatedImage> {
        self.train.iter().filter(|im| !im.is_box_level())
    }

    /// Supervision regime of each category, inferred from the training
    /// annotations. Leaves without a label of their own inherit from their
    /// nearest labelled ancestor.
    pub fn category_splits(&self, taxonomy: &Taxonomy) -> BTreeMap<String, Split> {
        let mut direct = BTreeMap::new();
        for im in &self.train {
            match &im.supervision {
                Supervision::BoxLevel(anns) => {
                    for a in anns {
                        direct.insert(a.category.clone(), Split::Box);
                    }
                }
                Supervision::ImageLevel(label) => {
                    direct.entry(label.clone()).or_insert(Split::Image);
                }
            }
        }
        let mut out = direct.clone();
        for &leaf in taxonomy.leaf_nodes() {
            let mut cur = Some(leaf);
            while let Some(v) = cur {
                if let Some(&s) = direct.get(taxonomy.name(v)) {
                    out.insert(taxonomy.name(leaf).to_string(), s);
                    break;
                }
                cur = taxonomy.parent(v);
            }
        }
        out
    }
}

fn random_leaf_within<R: Rng>(taxonomy: &Taxonomy, category: &str, rng: &mut R) -> String {
    let node = taxonomy.node(category).expect("validated category");
    let leaves = taxonomy.descendant_leaves(node);
    let leaf = *leaves.choose(rng).expect("nonempty subtree");
    taxonomy.leaf_name(leaf).to_string()
}

fn place<R: Rng>(
    spec: &AppearanceSpec,
    taken: &[BBox],
    config: &WorldConfig,
    rng: &mut R,
) -> Option<BBox> {
    let size = config.raster_size as f64;
    for _ in 0..50 {
        let s = rng.random_range(spec.size.0..=spec.size.1);
        let a = rng.random_range(spec.aspect.0..=spec.aspect.1);
        let w = (s * a.sqrt()).round().clamp(2.0, size);
        let h = (s / a.sqrt()).round().clamp(2.0, size);
        let x = rng.random_range(0..=(size - w) as usize) as f64;
        let y = rng.random_range(0..=(size - h) as usize) as f64;
        let b = BBox::new(x, y, x + w, y + h).ok()?;
        if taken.iter().all(|t| iou(t, &b) <= config.max_overlap) {
            return Some(b);
        }
    }
    None
}

/// Places and renders leaf-labelled objects; the first is always kept.
fn compose<R: Rng>(
    leaves: &[String],
    config: &WorldConfig,
    rng: &mut R,
) -> Result<(Raster, Vec<Annotation>), WorldError> {
    let mut scene: Vec<(String, BBox)> = Vec::new();
    for leaf in leaves {
        let spec = &config.appearance[leaf];
        let taken: Vec<BBox> = scene.iter().map(|(_, b)| *b).collect();
        if let Some(b) = place(spec, &taken, config, rng) {
            scene.push((leaf.clone(), b));
        } else if scene.is_empty() {
            return Err(WorldError::ConfigInvalid(format!("cannot place {leaf}")));
        }
    }
    let raster = render_image(
        &scene,
        &config.appearance,
        &config.backdrop(),
        config.raster_size,
        rng.random(),
    )?;
    let anns = scene
        .into_iter()
        .map(|(category, bbox)| Annotation { bbox, category })
        .collect();
    Ok((raster, anns))
}

fn object_count<R: Rng>(config: &WorldConfig, rng: &mut R) -> usize {
    rng.random_range(config.objects_per_image.0..=config.objects_per_image.1)
}

/// Generates train and eval splits. Each image draws from its own seed, so
/// the output does not depend on how work is scheduled.
pub fn generate_dataset(config: &WorldConfig) -> Result<Dataset, WorldError> {
    let taxonomy = config.validate()?;
    let box_pool: Vec<&String> = config.box_level_categories.iter().collect();
    let image_pool: Vec<&String> = config.image_level_categories.iter().collect();
    let all_leaves: Vec<String> = taxonomy.leaf_names().iter().map(|s| s.to_string()).collect();

    let box_images: Vec<AnnotatedImage> = (0..config.train_box_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::rng_for(config.seed, seeding::stream::TRAIN_BOX, i as u64);
            let n = object_count(config, &mut rng);
            let labels: Vec<String> = (0..n)
                .map(|_| (*box_pool.choose(&mut rng).expect("nonempty pool")).clone())
                .collect();
            let leaves: Vec<String> = labels
                .iter()
                .map(|c| random_leaf_within(&taxonomy, c, &mut rng))
                .collect();
            let (raster, mut anns) = compose(&leaves, config, &mut rng)?;
            // Annotate with the pool label, which may be an ancestor.
            for (a, label) in anns.iter_mut().zip(&labels) {
                a.category = label.clone();
            }
            Ok(AnnotatedImage {
                id: format!("train_box_{i:05}"),
                raster,
                supervision: Supervision::BoxLevel(anns),
            })
        })
        .collect::<Result<_, WorldError>>()?;

    let image_images: Vec<(AnnotatedImage, Vec<Annotation>)> = (0..config.train_image_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::rng_for(config.seed, seeding::stream::TRAIN_IMAGE, i as u64);
            let label = image_pool[i % image_pool.len()].clone();
            let label_node = taxonomy.node(&label).expect("validated");
            let others: Vec<&String> = all_leaves
                .iter()
                .filter(|l| !taxonomy.is_within(taxonomy.node(l).unwrap(), label_node))
                .collect();
            let n = object_count(config, &mut rng);
            let mut leaves = vec![random_leaf_within(&taxonomy, &label, &mut rng)];
            for _ in 1..n {
                let distract = !others.is_empty() && rng.random_bool(config.distractor_prob);
                leaves.push(if distract {
                    (*others.choose(&mut rng).unwrap()).clone()
                } else {
                    random_leaf_within(&taxonomy, &label, &mut rng)
                });
            }
            let (raster, anns) = compose(&leaves, config, &mut rng)?;
            let id = format!("train_img_{i:05}");
            Ok((
                AnnotatedImage {
                    id,
                    raster,
                    supervision: Supervision::ImageLevel(label),
                },
                anns,
            ))
        })
        .collect::<Result<_, WorldError>>()?;

    let eval: Vec<AnnotatedImage> = (0..config.eval_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeding::rng_for(config.seed, seeding::stream::EVAL, i as u64);
            let n = object_count(config, &mut rng);
            let leaves: Vec<String> = (0..n)
                .map(|_| all_leaves.choose(&mut rng).unwrap().clone())
                .collect();
            let (raster, anns) = compose(&leaves, config, &mut rng)?;
            Ok(AnnotatedImage {
                id: format!("eval_{i:05}"),
                raster,
                supervision: Supervision::BoxLevel(anns),
            })
        })
        .collect::<Result<_, WorldError>>()?;

    let mut hidden = BTreeMap::new();
    let mut train = box_images;
    for (im, anns) in image_images {
        hidden.insert(im.id.clone(), anns);
        train.push(im);
    }
    Ok(Dataset {
        train,
        eval,
        hidden,
    })
}
