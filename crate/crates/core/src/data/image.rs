use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Canonical structure classes.
pub const CLASS_NAMES: [&str; 4] = ["background", "LV-endo", "LV-epi", "LA"];
pub const NUM_CLASSES: usize = 4;

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Per-pixel class ids in `0..NUM_CLASSES`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    #[serde(rename = "8")]
    Eight,
    #[serde(rename = "16")]
    Sixteen,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(&[height, width], &[data.len()]));
        }
        Ok(Self { height, width, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone()).expect("image shape")
    }

    /// Accepts `[1, 1, H, W]`; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [1, 1, h, w] => Self::new(*h, *w, t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect()),
            s => Err(Error::shape(&[1, 1, 0, 0], s)),
        }
    }

    /// Area-weighted resampling; exact box averaging for any scale factor.
    pub fn resize_area(&self, height: usize, width: usize) -> GrayImage {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let rows = area_weights(self.height, height);
        let cols = area_weights(self.width, width);
        let mut data = vec![0.0; height * width];
        for (oi, rw) in rows.iter().enumerate() {
            for (oj, cw) in cols.iter().enumerate() {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                for &(i, wi) in rw {
                    for &(j, wj) in cw {
                        acc += wi * wj * self.data[i * self.width + j];
                        wsum += wi * wj;
                    }
                }
                data[oi * width + oj] = acc / wsum;
            }
        }
        GrayImage { height, width, data }
    }

    pub fn load_png(path: &Path) -> Result<(Self, BitDepth)> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let depth = match img.color() {
            image::ColorType::L16 | image::ColorType::La16 | image::ColorType::Rgb16 | image::ColorType::Rgba16 => {
                BitDepth::Sixteen
            }
            _ => BitDepth::Eight,
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match depth {
            BitDepth::Sixteen => img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
            BitDepth::Eight => img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        };
        Ok((Self::new(h, w, data)?, depth))
    }

    pub fn save_png(&self, path: &Path, depth: BitDepth) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match depth {
            BitDepth::Eight => {
                let raw = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
                ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(w, h, raw)
                    .map(DynamicImage::ImageLuma8)
            }
            BitDepth::Sixteen => {
                let raw = self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
                ImageBuffer::<Luma<u16>, Vec<u16>>::from_raw(w, h, raw)
                    .map(DynamicImage::ImageLuma16)
            }
        };
        let img = res.ok_or_else(|| Error::shape(&[self.height, self.width], &[self.data.len()]))?;
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// For each output cell, the contributing input indices and overlap weights.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let mut v = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < n_in {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    v.push((i, overlap));
                }
                i += 1;
            }
            v
        })
        .collect()
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(&[height, width], &[data.len()]));
        }
        if let Some(bad) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Integrity(format!("label value {bad} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.width + j]
    }

    /// Nearest-neighbour resampling (pixel-centre sampling).
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            let si = (((i as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for j in 0..width {
                let sj = (((j as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                data.push(self.data[si * self.width + sj]);
            }
        }
        LabelMap { height, width, data }
    }

    /// One-hot `[1, NUM_CLASSES, H, W]` at the requested resolution.
    pub fn one_hot(&self, height: usize, width: usize) -> Tensor {
        let m = self.resize_nearest(height, width);
        let hw = height * width;
        let mut data = vec![0.0; NUM_CLASSES * hw];
        for (p, &c) in m.data.iter().enumerate() {
            data[c as usize * hw + p] = 1.0;
        }
        Tensor::new(&[1, NUM_CLASSES, height, width], data).expect("one-hot shape")
    }

    /// Reads a mask PNG and maps raw values onto canonical class ids.
    /// Accepted encodings: raw ids `0..=3`, or evenly scaled 8-bit values
    /// `{0, 85, 170, 255}`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw: Vec<u16> = img.to_luma16().into_raw().into_iter().map(|v| v / 257).collect();
        let max = raw.iter().copied().max().unwrap_or(0);
        let data: Option<Vec<u8>> = if max < NUM_CLASSES as u16 {
            Some(raw.iter().map(|&v| v as u8).collect())
        } else {
            raw.iter()
                .map(|&v| if v % 85 == 0 { Some((v / 85) as u8) } else { None })
                .collect()
        };
        let data = data.ok_or_else(|| Error::Image {
            path: path.to_path_buf(),
            message: "unrecognized label encoding".into(),
        })?;
        Self::new(h, w, data)
    }

    /// Writes raw class ids as 8-bit values.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .ok_or_else(|| Error::shape(&[self.height, self.width], &[self.data.len()]))?;
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
