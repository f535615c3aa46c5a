//! Planar unit-interval images and the geometric helpers around them.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tensor};
use crate::error::{Error, Result};

/// An `H x W x C` image with intensities in `[0, 1]`, stored channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    /// Builds a plane from channel-major data, rejecting values outside `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid("image", "empty image"));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(
                "image",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    data.len()
                ),
            ));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("image", format!("value {bad} outside [0, 1]")));
        }
        Ok(ImagePlane {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a plane from interleaved (`H x W x C`) data.
    pub fn from_interleaved(height: usize, width: usize, channels: usize, data: &[f64]) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::invalid("image", "interleaved buffer has the wrong length"));
        }
        let mut planar = vec![0.0; data.len()];
        for (i, px) in data.chunks(channels.max(1)).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                planar[c * height * width + i] = v;
            }
        }
        Self::new(height, width, channels, planar)
    }

    pub fn filled(height: usize, width: usize, value: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * value.len());
        for &v in value {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self::new(height, width, value.len(), data)
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..n {
            for c in 0..self.channels {
                out.push(self.data[c * n + i]);
            }
        }
        out
    }

    /// `[1, C, H, W]` tensor view for the graph.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64(&[1, self.channels, self.height, self.width], &self.data)
            .expect("image dims are positive")
    }

    /// Inverse of [`ImagePlane::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let [1, c, h, w] = t.shape()[..] else {
            return Err(Error::invalid("image", format!("expected [1, C, H, W], got {:?}", t.shape())));
        };
        let mut data = Vec::with_capacity(t.len());
        for v in t.data() {
            let v = v.to_f64().unwrap_or(f64::NAN);
            if !v.is_finite() {
                return Err(Error::invalid("image", "non-finite value"));
            }
            data.push(v.clamp(0.0, 1.0));
        }
        Self::new(h, w, c, data)
    }

    /// Reflect-pads the bottom and right edges up to the next multiple of `multiple`.
    /// Returns the padded image and the original `(height, width)`.
    pub fn pad_to_multiple(&self, multiple: usize) -> Result<(ImagePlane, (usize, usize))> {
        if multiple == 0 {
            return Err(Error::invalid("pad_to_multiple", "multiple must be at least 1"));
        }
        let round = |n: usize| n.div_ceil(multiple) * multiple;
        let (h2, w2) = (round(self.height), round(self.width));
        let mut data = Vec::with_capacity(h2 * w2 * self.channels);
        for c in 0..self.channels {
            for y in 0..h2 {
                let sy = reflect(y, self.height);
                for x in 0..w2 {
                    data.push(self.get(c, sy, reflect(x, self.width)));
                }
            }
        }
        let padded = ImagePlane {
            height: h2,
            width: w2,
            channels: self.channels,
            data,
        };
        Ok((padded, (self.height, self.width)))
    }

    /// The top-left `height x width` region.
    pub fn crop(&self, height: usize, width: usize) -> Result<ImagePlane> {
        if height == 0 || width == 0 || height > self.height || width > self.width {
            return Err(Error::invalid(
                "crop",
                format!("{height}x{width} does not fit in {}x{}", self.height, self.width),
            ));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            for y in 0..height {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row..row + width]);
            }
        }
        Ok(ImagePlane {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Bilinear resampling with pixel-centre alignment. Resizing to the same
    /// dims returns an identical copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<ImagePlane> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("resize", "target dims must be positive"));
        }
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let axis = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
            let scale = src as f64 / out as f64;
            (0..out)
                .map(|i| {
                    let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                    let lo = pos.floor() as usize;
                    let hi = (lo + 1).min(src - 1);
                    (lo, hi, pos - lo as f64)
                })
                .collect()
        };
        let ys = axis(height, self.height);
        let xs = axis(width, self.width);
        let mut data = Vec::with_capacity(height * width * self.channels);
        for c in 0..self.channels {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
                    let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
                    data.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
                }
            }
        }
        Ok(ImagePlane {
            height,
            width,
            channels: self.channels,
            data,
        })
    }
}

/// Mirror index without repeating the edge sample (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Loads an 8-bit RGB or grayscale PNG/JPEG, mapping bytes `v` to `v / 255`.
/// Grayscale is expanded to three identical channels; alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::io(path, e))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            img.to_rgb8()
        }
        other => {
            return Err(Error::io(
                path,
                format!("unsupported pixel format {:?}, expected 8-bit RGB or grayscale", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data: Vec<f64> = rgb.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
    ImagePlane::from_interleaved(h, w, 3, &data)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Writes an 8-bit PNG: RGB for three channels, grayscale for one.
pub fn save_png8(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = (plane.width as u32, plane.height as u32);
    let px: Vec<u8> = plane.to_interleaved().into_iter().map(to_u8).collect();
    let res = match plane.channels {
        3 => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, px).map(|b| b.save(path)),
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, px).map(|b| b.save(path)),
        c => return Err(Error::invalid("save_png8", format!("unsupported channel count {c}"))),
    };
    res.expect("buffer length matches dims").map_err(|e| Error::io(path, e))
}

/// Writes a 16-bit grayscale PNG of a single-channel plane.
pub fn save_png16_gray(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if plane.channels != 1 {
        return Err(Error::invalid("save_png16_gray", "expected a single-channel plane"));
    }
    let px: Vec<u16> = plane.data.iter().map(|&v| to_u16(v)).collect();
    ImageBuffer::<Luma<u16>, _>::from_raw(plane.width as u32, plane.height as u32, px)
        .expect("buffer length matches dims")
        .save(path)
        .map_err(|e| Error::io(path, e))
}

/// Reads a grayscale PNG (8- or 16-bit) into a single-channel plane.
pub fn load_gray(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::io(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| f64::from(v) / 65535.0).collect(),
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        other => return Err(Error::io(path, format!("expected grayscale, got {:?}", other.color()))),
    };
    ImagePlane::new(h, w, 1, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImagePlane {
        let data = (0..h * w).map(|i| i as f64 / (h * w) as f64).collect();
        ImagePlane::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(ImagePlane::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImagePlane::new(1, 1, 1, vec![f64::NAN]).is_err());
        assert!(ImagePlane::new(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn aligned_pad_is_noop() {
        let img = ramp(64, 64);
        let (p, dims) = img.pad_to_multiple(16).unwrap();
        assert_eq!(dims, (64, 64));
        assert_eq!(p, img);
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let img = ramp(70, 65);
        let (p, (h, w)) = img.pad_to_multiple(16).unwrap();
        assert_eq!((p.height(), p.width()), (80, 80));
        assert_eq!(p.crop(h, w).unwrap(), img);
    }

    #[test]
    fn pad_mirrors_interior() {
        // ramp along x: value = x; reflect pad of width 5 to 8 gives 0 1 2 3 4 3 2 1
        let data: Vec<f64> = (0..5).map(|x| x as f64 / 10.0).collect();
        let img = ImagePlane::new(1, 5, 1, data).unwrap();
        let (p, _) = img.pad_to_multiple(8).unwrap();
        let expect: Vec<f64> = [0, 1, 2, 3, 4, 3, 2, 1].iter().map(|&x| x as f64 / 10.0).collect();
        assert_eq!(&p.data()[..8], &expect[..]);
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = ramp(9, 7);
        assert_eq!(img.resize_bilinear(9, 7).unwrap(), img);
        let up = img.resize_bilinear(18, 14).unwrap();
        assert_eq!((up.height(), up.width()), (18, 14));
    }

    #[test]
    fn interleaved_round_trip() {
        let inter: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let img = ImagePlane::from_interleaved(2, 2, 3, &inter).unwrap();
        assert_eq!(img.get(1, 0, 1), inter[4]);
        assert_eq!(img.to_interleaved(), inter);
    }
}
