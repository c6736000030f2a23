use std::path::Path;

use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandStats {
    pub mean: f64,
    pub std: f64,
}

/// A multi-band raster stored channels-first, `(bands, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Statistics of the raw bands; `None` when the data is not normalized.
    norm_stats: Option<Vec<BandStats>>,
}

impl Scene {
    pub fn from_raw(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != bands * height * width {
            return Err(Error::shape("scene", "element count", bands * height * width, data.len()));
        }
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::Input(format!("empty scene {bands}x{height}x{width}")));
        }
        Ok(Self {
            bands,
            height,
            width,
            data,
            norm_stats: None,
        })
    }

    /// Per-band z-score using scene-wide statistics. Constant bands become
    /// all zeros.
    pub fn normalized(mut self) -> Self {
        if self.norm_stats.is_some() {
            return self;
        }
        let plane = self.height * self.width;
        let mut stats = Vec::with_capacity(self.bands);
        for band in self.data.chunks_mut(plane) {
            let n = band.len() as f64;
            let mean = band.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = band.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            for v in band.iter_mut() {
                *v = if std > 0.0 { ((*v as f64 - mean) / std) as f32 } else { 0.0 };
            }
            stats.push(BandStats { mean, std });
        }
        self.norm_stats = Some(stats);
        self
    }

    /// Raw band values recovered from a normalized scene.
    pub fn denormalize(&self) -> Vec<f32> {
        let Some(stats) = &self.norm_stats else {
            return self.data.clone();
        };
        let plane = self.height * self.width;
        self.data
            .chunks(plane)
            .zip(stats)
            .flat_map(|(band, s)| band.iter().map(move |&v| (v as f64 * s.std + s.mean) as f32))
            .collect()
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn norm_stats(&self) -> Option<&[BandStats]> {
        self.norm_stats.as_deref()
    }

    /// Copies windows at `offsets` (row, col) of size `patch` into one
    /// `(len, bands, ph, pw)` batch.
    pub fn gather(&self, offsets: &[(usize, usize)], patch: (usize, usize)) -> Result<Tensor<f32>> {
        let (ph, pw) = patch;
        let mut out = Tensor::zeros([offsets.len(), self.bands, ph, pw]);
        let plane = self.height * self.width;
        let sample_len = self.bands * ph * pw;
        for (i, &(r, c)) in offsets.iter().enumerate() {
            if r + ph > self.height || c + pw > self.width {
                return Err(Error::Input(format!(
                    "window {ph}x{pw} at ({r}, {c}) exceeds scene {}x{}",
                    self.height, self.width
                )));
            }
            let dst = &mut out.data_mut()[i * sample_len..(i + 1) * sample_len];
            for b in 0..self.bands {
                for row in 0..ph {
                    let src = b * plane + (r + row) * self.width + c;
                    let d = (b * ph + row) * pw;
                    dst[d..d + pw].copy_from_slice(&self.data[src..src + pw]);
                }
            }
        }
        Ok(out)
    }
}

/// Reads an 8/16-bit PNG or TIFF into a scene, optionally z-scoring each band.
pub fn load_scene(path: impl AsRef<Path>, normalize: bool) -> Result<Scene> {
    let path = path.as_ref();
    let img = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (bands, interleaved): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(i) => (1, i.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageLumaA8(i) => (2, i.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageRgb8(i) => (3, i.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageRgba8(i) => (4, i.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageLuma16(i) => (1, i.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageLumaA16(i) => (2, i.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageRgb16(i) => (3, i.into_raw().into_iter().map(f32::from).collect()),
        DynamicImage::ImageRgba16(i) => (4, i.into_raw().into_iter().map(f32::from).collect()),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("unsupported pixel layout {:?}; expected 8- or 16-bit integer bands", other.color()),
            })
        }
    };
    let plane = w * h;
    let mut data = vec![0.0f32; bands * plane];
    for (px, values) in interleaved.chunks(bands).enumerate() {
        for (b, &v) in values.iter().enumerate() {
            data[b * plane + px] = v;
        }
    }
    let scene = Scene::from_raw(bands, h, w, data)?;
    Ok(if normalize { scene.normalized() } else { scene })
}
