//! Float rasters and the `CSRF` binary container.
//!
//! File layout: magic `CSRF`, then `u32` height, width and channel count
//! (little-endian), then `h * w * c` little-endian `f32` values in row-major
//! order with channels interleaved.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const RASTER_MAGIC: &[u8; 4] = b"CSRF";

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("bad raster magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("raster dimensions {h}x{w}x{c} are not usable")]
    BadDimensions { h: u32, w: u32, c: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Option<Self> {
        (data.len() == height * width * channels).then_some(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Channel mean per pixel.
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        let px = self.pixel(y, x);
        px.iter().map(|&v| v as f64).sum::<f64>() / self.channels as f64
    }

    /// Mirror pixel columns.
    pub fn flipped_horizontally(&self) -> Self {
        let mut out = self.clone();
        let c = self.channels;
        for y in 0..self.height {
            for x in 0..self.width {
                let src = (y * self.width + (self.width - 1 - x)) * c;
                let dst = (y * self.width + x) * c;
                out.data[dst..dst + c].copy_from_slice(&self.data[src..src + c]);
            }
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(RASTER_MAGIC)?;
        for dim in [self.height, self.width, self.channels] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, RasterError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RASTER_MAGIC {
            return Err(RasterError::BadMagic(magic));
        }
        let mut dims = [0u32; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b);
        }
        let [h, w, c] = dims;
        let len = (h as usize)
            .checked_mul(w as usize)
            .and_then(|v| v.checked_mul(c as usize))
            .filter(|&n| n > 0 && n <= 1 << 28)
            .ok_or(RasterError::BadDimensions { h, w, c })?;
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self {
            height: h as usize,
            width: w as usize,
            channels: c as usize,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RasterError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(f))
    }
}
