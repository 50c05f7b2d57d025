//! Garment images: `[3, H, W]` pixels in `[-1, 1]` tagged with a domain and entity.

use std::path::Path;

use image::{imageops::FilterType, ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Upper,
    Lower,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::Upper => Domain::Lower,
            Domain::Lower => Domain::Upper,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::Upper => "upper",
            Domain::Lower => "lower",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
    size: usize,
    pub domain: Domain,
    pub entity_id: String,
}

/// 8-bit channel value to `[-1, 1]`.
pub fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// `[-1, 1]` back to the nearest 8-bit value.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

impl Image {
    pub fn new(size: usize, domain: Domain, entity_id: impl Into<String>, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != 3 * size * size {
            return Err(Error::DimensionMismatch { expected: 3 * size * size, actual: pixels.len() });
        }
        if let Some(bad) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Self { pixels, size, domain, entity_id: entity_id.into() })
    }

    /// Solid colour image, handy for tests.
    pub fn filled(size: usize, domain: Domain, entity_id: impl Into<String>, rgb: [f64; 3]) -> Self {
        let mut pixels = Vec::with_capacity(3 * size * size);
        for c in rgb {
            pixels.extend(std::iter::repeat_n(c, size * size));
        }
        Self { pixels, size, domain, entity_id: entity_id.into() }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Channel `c` value at row `y`, column `x`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.size + y) * self.size + x]
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let s = self.size;
        ImageBuffer::from_fn(s as u32, s as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([denormalize(self.at(0, y, x)), denormalize(self.at(1, y, x)), denormalize(self.at(2, y, x))])
        })
    }

    /// Builds an image from 8-bit RGB, resizing to `size` when needed.
    pub fn from_rgb8(img: &RgbImage, size: usize, domain: Domain, entity_id: impl Into<String>) -> Self {
        let resized;
        let src = if img.width() as usize == size && img.height() as usize == size {
            img
        } else {
            resized = image::imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
            &resized
        };
        let mut pixels = vec![0.0; 3 * size * size];
        for (x, y, p) in src.enumerate_pixels() {
            for c in 0..3 {
                pixels[(c * size + y as usize) * size + x as usize] = normalize(p.0[c]);
            }
        }
        Self { pixels, size, domain, entity_id: entity_id.into() }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn load_png(path: &Path, size: usize, domain: Domain, entity_id: impl Into<String>) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(Self::from_rgb8(&img.to_rgb8(), size, domain, entity_id))
    }

    /// Round-trips through 8-bit quantisation, as saving and reloading would.
    pub fn quantized(&self) -> Self {
        Self { pixels: self.pixels.iter().map(|&v| normalize(denormalize(v))).collect(), ..self.clone() }
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Stacks images into a `[N, 3, H, W]` batch.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let s = first.size;
    let mut data = Vec::with_capacity(images.len() * 3 * s * s);
    for img in images {
        if img.size != s {
            return Err(Error::ResolutionMismatch(s, img.size));
        }
        data.extend_from_slice(&img.pixels);
    }
    Ok(Tensor::new(vec![images.len(), 3, s, s], data))
}

/// Splits a `[N, 3, H, W]` batch into images, clamping into `[-1, 1]`.
pub fn images_from_tensor(t: &Tensor, domain: Domain, entity_prefix: &str) -> Vec<Image> {
    let s = t.shape()[2];
    (0..t.batch())
        .map(|i| Image {
            pixels: t.row(i).iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            size: s,
            domain,
            entity_id: format!("{entity_prefix}{i}"),
        })
        .collect()
}

/// Lays out rows of equally sized images on a white canvas with a 2-pixel gutter.
pub fn compose_grid(rows: &[Vec<&Image>]) -> Result<RgbImage> {
    let size = rows
        .iter()
        .flatten()
        .next()
        .map(|i| i.size)
        .ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gap = 2u32;
    let cell = size as u32 + gap;
    let mut canvas = RgbImage::from_pixel(cols as u32 * cell + gap, rows.len() as u32 * cell + gap, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.size != size {
                return Err(Error::ResolutionMismatch(size, img.size));
            }
            let tile = img.to_rgb8();
            image::imageops::replace(&mut canvas, &tile, (gap + c as u32 * cell) as i64, (gap + r as u32 * cell) as i64);
        }
    }
    Ok(canvas)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
}
