use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{AppearanceSpec, ShapeKind, WorldError};
use crate::geometry::BBox;
use crate::raster::Raster;
use crate::seeding;

/// Scene-independent rendering settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backdrop {
    pub color: [f32; 3],
    pub noise_std: f32,
}

impl ShapeKind {
    /// Whether normalised box coordinates `(u, v)` in `[0, 1)` are inside.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let (du, dv) = (2.0 * u - 1.0, 2.0 * v - 1.0);
                du * du + dv * dv <= 1.0
            }
            ShapeKind::Triangle => (2.0 * u - 1.0).abs() <= v,
        }
    }
}

/// Draws `scene` over a noisy backdrop. Later objects occlude earlier ones.
///
/// Every instance gets its own colour jitter, then per-pixel Gaussian noise is
/// added to the whole raster and values are clamped to `[0, 1]`.
pub fn render_image(
    scene: &[(String, BBox)],
    appearance: &BTreeMap<String, AppearanceSpec>,
    backdrop: &Backdrop,
    size: usize,
    seed: u64,
) -> Result<Raster, WorldError> {
    let mut rng = seeding::rng_for(seed, seeding::stream::RENDER, 0);
    let mut raster = Raster::filled(size, size, 3, 0.0);
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                raster.set(y, x, c, backdrop.color[c]);
            }
        }
    }
    for (category, b) in scene {
        let spec = appearance
            .get(category)
            .ok_or_else(|| WorldError::UnknownCategory(category.clone()))?;
        let color: [f32; 3] = std::array::from_fn(|c| {
            let j = spec.color_jitter;
            let shift = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
            (spec.color[c] + shift).clamp(0.0, 1.0)
        });
        let (cols, rows) = b.pixel_span();
        for y in rows.start.max(0)..rows.end.min(size as i64) {
            let v = (y as f64 + 0.5 - b.y1) / b.height();
            for x in cols.start.max(0)..cols.end.min(size as i64) {
                let u = (x as f64 + 0.5 - b.x1) / b.width();
                if spec.shape.covers(u, v) {
                    for (c, &value) in color.iter().enumerate() {
                        raster.set(y as usize, x as usize, c, value);
                    }
                }
            }
        }
    }
    if backdrop.noise_std > 0.0 {
        let normal = Normal::new(0.0f32, backdrop.noise_std).expect("finite noise std");
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    let v = raster.get(y, x, c) + normal.sample(&mut rng);
                    raster.set(y, x, c, v.clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(raster)
}
