use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};

/// A planar image: `data[c * height * width + y * width + x]`, values in `[0, 1]`
/// for anything loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Frame {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty frame {height}x{width}")));
        }
        if !matches!(channels, 1 | 2 | 3 | 6) {
            return Err(Error::Shape(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "frame data length {} != {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("frame pixel {v}")));
        }
        Ok(Frame {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Frame {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Luma in `[0, 1]` (0.299 R + 0.587 G + 0.114 B); single-channel frames pass through.
    pub fn luma(&self) -> Vec<f32> {
        match self.channels {
            3 => {
                let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
                r.iter()
                    .zip(g)
                    .zip(b)
                    .map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b)
                    .collect()
            }
            _ => self.plane(0).to_vec(),
        }
    }

    /// Max absolute pixel difference to another frame of the same shape.
    pub fn max_abs_diff(&self, other: &Frame) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * w * h];
        for (x, y, px) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * w * h + i] = f32::from(px.0[c]) / 255.0;
            }
        }
        Frame {
            height: h,
            width: w,
            channels: 3,
            data,
        }
    }

    /// Quantizes to 8-bit RGB. One- and two-channel frames are shown as gray /
    /// red-green respectively.
    pub fn to_rgb8(&self) -> RgbImage {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            let px = match self.channels {
                1 => {
                    let v = q(self.get(0, y, x));
                    [v, v, v]
                }
                2 => [q(self.get(0, y, x)), q(self.get(1, y, x)), 0],
                _ => [
                    q(self.get(0, y, x)),
                    q(self.get(1, y, x)),
                    q(self.get(2, y, x)),
                ],
            };
            Rgb(px)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(Frame::from_rgb8(&img.into_rgb8()))
    }

    /// Writes a PNG or binary PPM depending on the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_nan() {
        assert!(Frame::new(2, 2, 3, vec![0.0; 11]).is_err());
        assert!(Frame::new(2, 2, 4, vec![0.0; 16]).is_err());
        let mut d = vec![0.0; 12];
        d[3] = f32::NAN;
        assert!(Frame::new(2, 2, 3, d).is_err());
    }

    #[test]
    fn rgb8_maps_to_unit_interval() {
        let img = RgbImage::from_fn(3, 2, |x, y| Rgb([(x * 100) as u8, (y * 255) as u8, 51]));
        let f = Frame::from_rgb8(&img);
        assert_eq!(f.dims(), (2, 3, 3));
        assert_eq!(f.get(0, 0, 2), 200.0 / 255.0);
        assert_eq!(f.get(1, 1, 0), 1.0);
        assert_eq!(f.get(2, 0, 0), 0.2);
        assert_eq!(f.to_rgb8(), img);
    }
}
