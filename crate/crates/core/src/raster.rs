//! 8-bit RGB rasters and their conversion to network inputs.

use std::path::Path;

use aftermath_nn::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Row-major interleaved RGB image.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Contract(format!(
                "image buffer of {} bytes does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Self { height, width, data: rgb.iter().copied().cycle().take(height * width * 3).collect() }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        let total: u64 = self.data.iter().zip(&other.data).map(|(a, b)| a.abs_diff(*b) as u64).sum();
        total as f64 / self.data.len() as f64
    }

    pub fn mse(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        let total: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a as f64 - *b as f64) / 255.0;
                d * d
            })
            .sum();
        total / self.data.len() as f64
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        image::save_buffer(path, &self.data, self.width as u32, self.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::load(path, "file does not exist"));
        }
        let img = image::open(path).map_err(|e| Error::load(path, e.to_string()))?.into_rgb8();
        let (w, h) = img.dimensions();
        Self::new(h as usize, w as usize, img.into_raw())
    }

    /// Writes the image as CHW values scaled to [-1, 1] into `out`.
    pub fn write_chw<T: Scalar>(&self, out: &mut [T]) {
        let plane = self.height * self.width;
        debug_assert_eq!(out.len(), plane * 3);
        let scale = T::lit(2.0 / 255.0);
        for p in 0..plane {
            for c in 0..3 {
                out[c * plane + p] = T::lit(self.data[p * 3 + c] as f64) * scale - T::one();
            }
        }
    }

    /// Inverse of [`Image::write_chw`], clamping to the valid pixel range.
    pub fn from_chw<T: Scalar>(height: usize, width: usize, values: &[T]) -> Result<Self> {
        let plane = height * width;
        if values.len() != plane * 3 {
            return Err(Error::Contract(format!("expected {} values, got {}", plane * 3, values.len())));
        }
        let mut data = vec![0u8; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                let v = values[c * plane + p].to_f64().unwrap_or(0.0);
                let v = if v.is_finite() { v } else { 0.0 };
                data[p * 3 + c] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(Self { height, width, data })
    }
}

/// Stacks images into an `[N, 3, H, W]` tensor.
pub fn batch_tensor<T: Scalar>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Contract("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let per = 3 * h * w;
    let mut data = vec![T::zero(); per * images.len()];
    for (i, img) in images.iter().enumerate() {
        if img.height != h || img.width != w {
            return Err(Error::Contract("images in a batch must share one size".into()));
        }
        img.write_chw(&mut data[i * per..(i + 1) * per]);
    }
    Ok(Tensor::new([images.len(), 3, h, w], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_round_trip_is_exact() {
        let data: Vec<u8> = (0..4 * 5 * 3).map(|i| (i * 17 % 256) as u8).collect();
        let img = Image::new(4, 5, data).unwrap();
        let mut buf = vec![0f32; 60];
        img.write_chw(&mut buf);
        assert_eq!(Image::from_chw(4, 5, &buf).unwrap(), img);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new(2, 3, (0..18).map(|i| i as u8 * 9).collect()).unwrap();
        let path = dir.path().join("a/b.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::load_png(&path).unwrap(), img);
        assert!(Image::load_png(&dir.path().join("missing.png")).unwrap_err().to_string().contains("missing.png"));
    }
}
