//! Dense float images, channel-interleaved, row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels }
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for ImageShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn zeros_like(other: &Image) -> Self {
        Self::zeros(other.width, other.height, other.channels)
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{}", width * height * channels),
                got: format!("{}", data.len()),
            });
        }
        Ok(Self { width, height, channels, data })
    }

    /// Builds an image from a per-pixel closure returning `channels` values.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, channels, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = self.index(x, y, 0);
        &self.data[i..i + self.channels]
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape().to_string(),
                got: other.shape().to_string(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    /// Elementwise combination; shapes must agree.
    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        self.check_same_shape(other)?;
        Ok(Image {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            ..*self
        })
    }

    pub fn scale(&self, s: f64) -> Image {
        self.map(|v| v * s)
    }

    pub fn add_scaled(&mut self, other: &Image, s: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn rms_diff(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        let n = self.data.len().max(1) as f64;
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((s / n).sqrt())
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let n = self.width * self.height;
        if n == 0 {
            return 0.0;
        }
        self.data.iter().skip(c).step_by(self.channels).sum::<f64>() / n as f64
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Image {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bilinear lookup at continuous pixel coordinates (pixel centres at
    /// integer + 0.5), clamped to the border.
    pub fn sample_bilinear(&self, u: f64, v: f64, c: usize) -> f64 {
        let fx = (u - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (v - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = (fx.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (fy.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let a = self.get(x0, y0, c) * (1.0 - tx) + self.get(x1, y0, c) * tx;
        let b = self.get(x0, y1, c) * (1.0 - tx) + self.get(x1, y1, c) * tx;
        a * (1.0 - ty) + b * ty
    }

    /// Box-filter downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> Image {
        let w = (self.width / factor).max(1);
        let h = (self.height / factor).max(1);
        let inv = 1.0 / (factor * factor) as f64;
        Image::from_fn(w, h, self.channels, |x, y, c| {
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    let sx = (x * factor + dx).min(self.width - 1);
                    let sy = (y * factor + dy).min(self.height - 1);
                    s += self.get(sx, sy, c);
                }
            }
            s * inv
        })
    }

    /// Variance of the 4-neighbour Laplacian over interior pixels; a
    /// high-frequency energy measure.
    pub fn laplacian_variance(&self) -> f64 {
        if self.width < 3 || self.height < 3 {
            return 0.0;
        }
        let mut vals = Vec::new();
        for y in 1..self.height - 1 {
            for x in 1..self.width - 1 {
                for c in 0..self.channels {
                    let l = self.get(x - 1, y, c) + self.get(x + 1, y, c) + self.get(x, y - 1, c)
                        + self.get(x, y + 1, c)
                        - 4.0 * self.get(x, y, c);
                    vals.push(l);
                }
            }
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
    }

    /// Writes an 8-bit PNG (1 → grayscale, 3 → RGB), clamping to [0, 1].
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> =
            self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            4 => image::ExtendedColorType::Rgba8,
            c => return Err(Error::invalid(format!("cannot write {c}-channel PNG"))),
        };
        image::save_buffer_with_format(
            path.as_ref(),
            &bytes,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::format("png", e.to_string()))
    }

    /// Loads a PNG into [0, 1] floats with the requested channel count
    /// (1 or 3).
    pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<Image> {
        let img = image::open(path.as_ref()).map_err(|e| Error::format("png", e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = match channels {
            1 => img.to_luma8().into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
            3 => img.to_rgb8().into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
            c => return Err(Error::invalid(format!("cannot read {c}-channel PNG"))),
        };
        Image::from_vec(w, h, channels, data)
    }

    /// Maps a unit-vector normal map from [-1, 1] into [0, 1] (`n * 0.5 + 0.5`).
    pub fn encode_normals(&self) -> Image {
        self.map(|v| v * 0.5 + 0.5)
    }

    pub fn decode_normals(&self) -> Image {
        self.map(|v| v * 2.0 - 1.0)
    }

    /// Mean hue in degrees of an RGB image, as the circular mean of
    /// per-pixel hues weighted by chroma.
    pub fn mean_hue(&self) -> f64 {
        let (mut sx, mut sy) = (0.0, 0.0);
        for px in self.data.chunks(self.channels) {
            let (r, g, b) = (px[0], px[1], px[2]);
            let (h, chroma) = hue_chroma(r, g, b);
            let a = h.to_radians();
            sx += chroma * a.cos();
            sy += chroma * a.sin();
        }
        sy.atan2(sx).to_degrees().rem_euclid(360.0)
    }
}

/// Hue (degrees) and chroma of an RGB triple.
pub fn hue_chroma(r: f64, g: f64, b: f64) -> (f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    if c <= 0.0 {
        return (0.0, 0.0);
    }
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    (h * 60.0, c)
}

/// Signed smallest difference between two angles in degrees.
pub fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        360.0 - d
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 3, 3, |x, y, c| (x + y + c) as f64 / 10.0);
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path, 3).unwrap();
        assert!(img.rms_diff(&back).unwrap() < 1.0 / 255.0);
    }

    #[test]
    fn hue_of_pure_colors() {
        assert_eq!(hue_chroma(1.0, 0.0, 0.0).0, 0.0);
        assert!((hue_chroma(0.0, 1.0, 0.0).0 - 120.0).abs() < 1e-12);
        assert!((hue_chroma(0.0, 0.0, 1.0).0 - 240.0).abs() < 1e-12);
        assert_eq!(hue_distance(350.0, 10.0), 20.0);
    }

    #[test]
    fn bilinear_hits_pixel_centres() {
        let img = Image::from_fn(3, 3, 1, |x, y, _| (x * 3 + y) as f64);
        assert_eq!(img.sample_bilinear(1.5, 2.5, 0), img.get(1, 2, 0));
        assert_eq!(img.sample_bilinear(1.0, 1.5, 0), 0.5 * (img.get(0, 1, 0) + img.get(1, 1, 0)));
    }
}
