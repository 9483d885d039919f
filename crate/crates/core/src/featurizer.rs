//! Hand-crafted region descriptors standing in for a CNN backbone.
//!
//! Layout for a `g x g` grid (default `g = 4`, 25 values):
//!
//! | range          | content                                     |
//! |----------------|---------------------------------------------|
//! | `0..3`         | channel means, mapped to `2m - 1`           |
//! | `3..6`         | channel standard deviations, `2s`           |
//! | `6..6+g*g`     | row-major luminance grid, `2l - 1`          |
//! | `6+g*g`        | `ln(w / h) / ln 4`                          |
//! | `7+g*g`        | `2 sqrt(box area / image area) - 1`         |
//! | `8+g*g`        | edge density                                |
//!
//! Luminance is the channel mean. Edge density is the mean over the box
//! pixels of `(|dx| + |dy|) / 2`, where `dx` and `dy` are central
//! differences of luminance with neighbours clamped to the image, so
//! transitions on the box border count.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::raster::Raster;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("box {0:?} covers less than one pixel")]
    DegenerateBox([f64; 4]),
    #[error("feature grid must be at least 1, got {0}")]
    InvalidGrid(usize),
    #[error("expected a 3-channel raster, got {0} channels")]
    ChannelCount(usize),
}

pub type FeatureVector = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub grid: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl FeatureConfig {
    pub fn new(grid: usize) -> Result<Self, FeatureError> {
        if grid == 0 {
            return Err(FeatureError::InvalidGrid(grid));
        }
        Ok(Self { grid })
    }

    /// Inverse of `feature_dim`, used when reading checkpoints.
    pub fn from_dim(dim: usize) -> Option<Self> {
        let cells = dim.checked_sub(9)?;
        let g = (cells as f64).sqrt().round() as usize;
        (g >= 1 && g * g == cells).then_some(Self { grid: g })
    }
}

pub fn feature_dim(config: &FeatureConfig) -> usize {
    3 + 3 + config.grid * config.grid + 3
}

/// Summed-area table with a zero top row and left column.
struct Integral {
    w: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn build(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let stride = w + 1;
        let mut sums = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += value(y, x);
                sums[(y + 1) * stride + x + 1] = sums[y * stride + x + 1] + row;
            }
        }
        Self { w, sums }
    }

    /// Sum over rows `r0..r1` and columns `c0..c1`.
    #[inline]
    fn sum(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> f64 {
        let s = self.w + 1;
        self.sums[r1 * s + c1] - self.sums[r0 * s + c1] - self.sums[r1 * s + c0]
            + self.sums[r0 * s + c0]
    }
}

/// Precomputed tables for one raster; `features` is then cheap per box.
pub struct FeatureMaps {
    config: FeatureConfig,
    height: usize,
    width: usize,
    channel: [Integral; 3],
    channel_sq: [Integral; 3],
    // Channel sums above are taken relative to this offset so a constant
    // raster yields exactly zero variance.
    offset: [f64; 3],
    luminance: Integral,
    edges: Integral,
}

impl FeatureMaps {
    pub fn new(raster: &Raster, config: FeatureConfig) -> Result<Self, FeatureError> {
        if config.grid == 0 {
            return Err(FeatureError::InvalidGrid(0));
        }
        if raster.channels() != 3 {
            return Err(FeatureError::ChannelCount(raster.channels()));
        }
        let (h, w) = (raster.height(), raster.width());
        let offset = [0, 1, 2].map(|c| raster.get(0, 0, c) as f64);
        let channel = [0, 1, 2]
            .map(|c| Integral::build(h, w, |y, x| raster.get(y, x, c) as f64 - offset[c]));
        let channel_sq = [0, 1, 2].map(|c| {
            Integral::build(h, w, |y, x| {
                let v = raster.get(y, x, c) as f64 - offset[c];
                v * v
            })
        });
        let lum: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| raster.luminance(y, x))
            .collect();
        let luminance = Integral::build(h, w, |y, x| lum[y * w + x]);
        let at = |y: usize, x: usize| lum[y * w + x];
        let edges = Integral::build(h, w, |y, x| {
            let dx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let dy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            0.5 * (dx.abs() + dy.abs())
        });
        Ok(Self {
            config,
            height: h,
            width: w,
            channel,
            channel_sq,
            offset,
            luminance,
            edges,
        })
    }

    pub fn dim(&self) -> usize {
        feature_dim(&self.config)
    }

    fn span(&self, b: &BBox) -> Option<(usize, usize, usize, usize)> {
        let (cols, rows) = b.pixel_span();
        let c0 = cols.start.clamp(0, self.width as i64) as usize;
        let c1 = cols.end.clamp(0, self.width as i64) as usize;
        let r0 = rows.start.clamp(0, self.height as i64) as usize;
        let r1 = rows.end.clamp(0, self.height as i64) as usize;
        (c0 < c1 && r0 < r1).then_some((r0, r1, c0, c1))
    }

    pub fn features(&self, b: &BBox) -> Result<FeatureVector, FeatureError> {
        let (r0, r1, c0, c1) = self
            .span(b)
            .ok_or(FeatureError::DegenerateBox(b.to_array()))?;
        let n = ((r1 - r0) * (c1 - c0)) as f64;
        let g = self.config.grid;
        let mut out = Vec::with_capacity(self.dim());

        let mut means = [0.0; 3];
        for c in 0..3 {
            means[c] = self.channel[c].sum(r0, r1, c0, c1) / n;
            out.push(2.0 * (means[c] + self.offset[c]) - 1.0);
        }
        for c in 0..3 {
            let var = self.channel_sq[c].sum(r0, r1, c0, c1) / n - means[c] * means[c];
            out.push(2.0 * var.max(0.0).sqrt());
        }

        let (cw, ch) = (b.width() / g as f64, b.height() / g as f64);
        for gy in 0..g {
            for gx in 0..g {
                let cell = BBox {
                    x1: b.x1 + gx as f64 * cw,
                    y1: b.y1 + gy as f64 * ch,
                    x2: b.x1 + (gx + 1) as f64 * cw,
                    y2: b.y1 + (gy + 1) as f64 * ch,
                };
                let (cr0, cr1, cc0, cc1) = self.span(&cell).unwrap_or_else(|| {
                    // Cell narrower than a pixel: use the pixel under its centre.
                    let (cx, cy) = cell.center();
                    let x = (cx.floor().max(0.0) as usize).clamp(c0, c1 - 1);
                    let y = (cy.floor().max(0.0) as usize).clamp(r0, r1 - 1);
                    (y, y + 1, x, x + 1)
                });
                let cn = ((cr1 - cr0) * (cc1 - cc0)) as f64;
                out.push(2.0 * self.luminance.sum(cr0, cr1, cc0, cc1) / cn - 1.0);
            }
        }

        out.push((b.width() / b.height()).ln() / 4f64.ln());
        let image_area = (self.width * self.height) as f64;
        out.push(2.0 * (b.area() / image_area).sqrt() - 1.0);
        out.push(self.edges.sum(r0, r1, c0, c1) / n);
        Ok(out)
    }
}

/// Features of one region; prefer `FeatureMaps` when scoring many boxes.
pub fn region_features(
    raster: &Raster,
    b: &BBox,
    config: FeatureConfig,
) -> Result<FeatureVector, FeatureError> {
    FeatureMaps::new(raster, config)?.features(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn dims() {
        assert_eq!(feature_dim(&FeatureConfig::default()), 25);
        assert_eq!(feature_dim(&FeatureConfig::new(2).unwrap()), 13);
        assert_eq!(FeatureConfig::new(0), Err(FeatureError::InvalidGrid(0)));
        assert_eq!(FeatureConfig::from_dim(25), Some(FeatureConfig { grid: 4 }));
        assert_eq!(FeatureConfig::from_dim(24), None);
    }

    #[test]
    fn constant_raster_has_no_texture() {
        let r = Raster::filled(32, 32, 3, 0.3);
        let f = region_features(&r, &b(3.0, 5.0, 20.0, 11.0), FeatureConfig::default()).unwrap();
        assert_eq!(f.len(), 25);
        assert_eq!(&f[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(f[24], 0.0);
        for v in &f[6..22] {
            assert!((v - (2.0 * 0.3f32 as f64 - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn square_box_has_zero_log_aspect() {
        let r = Raster::filled(32, 32, 3, 0.3);
        let f = region_features(&r, &b(4.0, 4.0, 12.0, 12.0), FeatureConfig::default()).unwrap();
        assert_eq!(f[22], 0.0);
        let f = region_features(&r, &b(4.0, 4.0, 20.0, 8.0), FeatureConfig::default()).unwrap();
        assert!((f[22] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pure_and_deterministic() {
        let data: Vec<f32> = (0..32 * 32 * 3).map(|i| ((i * 7919) % 101) as f32 / 100.0).collect();
        let r = Raster::from_vec(32, 32, 3, data).unwrap();
        let bx = b(2.5, 3.0, 17.2, 29.0);
        let a = region_features(&r, &bx, FeatureConfig::default()).unwrap();
        let c = region_features(&r, &bx, FeatureConfig::default()).unwrap();
        assert_eq!(a, c);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        let r = Raster::filled(16, 16, 3, 0.0);
        let maps = FeatureMaps::new(&r, FeatureConfig::default()).unwrap();
        assert!(matches!(
            maps.features(&b(3.6, 3.0, 4.4, 9.0)),
            Err(FeatureError::DegenerateBox(_))
        ));
        assert!(matches!(
            maps.features(&b(20.0, 3.0, 30.0, 9.0)),
            Err(FeatureError::DegenerateBox(_))
        ));
        // tiny but covering a pixel centre is fine, even with a 4x4 grid
        assert!(maps.features(&b(3.4, 3.4, 4.6, 4.6)).is_ok());
    }

    #[test]
    fn edge_density_sees_object_borders() {
        let mut r = Raster::filled(32, 32, 3, 0.0);
        for y in 8..16 {
            for x in 8..16 {
                for c in 0..3 {
                    r.set(y, x, c, 1.0);
                }
            }
        }
        let maps = FeatureMaps::new(&r, FeatureConfig::default()).unwrap();
        let tight = maps.features(&b(8.0, 8.0, 16.0, 16.0)).unwrap();
        let inner = maps.features(&b(10.0, 10.0, 14.0, 14.0)).unwrap();
        assert!(tight[24] > 0.1);
        assert_eq!(inner[24], 0.0);
    }
}
