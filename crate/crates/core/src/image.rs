//! Single-channel floating point rasters.

use crate::error::{Error, Result};

/// Row-major single-channel image. `pixel_pitch` is the physical size of a
/// pixel in meters (0 when unknown).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    width: usize,
    height: usize,
    data: Vec<f64>,
    pub pixel_pitch: f64,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
            pixel_pitch: 0.0,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Size(format!(
                "{} samples for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            pixel_pitch: 0.0,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
            pixel_pitch: 0.0,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Value at signed coordinates, `None` outside the raster.
    #[inline]
    pub fn get_checked(&self, x: isize, y: isize) -> Option<f64> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            None
        } else {
            Some(self.get(x as usize, y as usize))
        }
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

    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
            pixel_pitch: self.pixel_pitch,
        }
    }

    /// Copy of the image translated by an integer offset: `out(x, y) = self(x - dx, y - dy)`,
    /// zero where the source is outside.
    pub fn translated(&self, dx: isize, dy: isize) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get_checked(x as isize - dx, y as isize - dy)
                .unwrap_or(0.0)
        })
    }

    /// Separable Gaussian blur with edge clamping. `sigma <= 0` returns a copy.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.5 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let (w, h) = (self.width as isize, self.height as isize);
        let tmp = Self::from_fn(self.width, self.height, |x, y| {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xs = (x as isize + k as isize - radius).clamp(0, w - 1);
                acc += kv * self.get(xs as usize, y);
            }
            acc
        });
        Self::from_fn(self.width, self.height, |x, y| {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let ys = (y as isize + k as isize - radius).clamp(0, h - 1);
                acc += kv * tmp.get(x, ys as usize);
            }
            acc
        })
    }

    /// Horizontal box filter of the given length (pixels, may be fractional),
    /// centered on each pixel, edge clamped.
    pub fn horizontal_box_blur(&self, length: f64) -> Self {
        if length <= 1.0 {
            return self.clone();
        }
        let half = length / 2.0;
        let reach = half.ceil() as isize;
        let w = self.width as isize;
        Self::from_fn(self.width, self.height, |x, y| {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for k in -reach..=reach {
                // partial weight for the outermost samples
                let lo = (k as f64 - 0.5).max(-half);
                let hi = (k as f64 + 0.5).min(half);
                let wk = (hi - lo).max(0.0);
                if wk == 0.0 {
                    continue;
                }
                let xs = (x as isize + k).clamp(0, w - 1);
                acc += wk * self.get(xs as usize, y);
                wsum += wk;
            }
            acc / wsum
        })
    }
}
