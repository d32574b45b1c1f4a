//! Dense row-major image buffers used throughout the engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major `width × height` buffer of pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Three-channel image with values nominally in `[0, 1]`.
pub type RgbImage = Image<[f64; 3]>;

/// Single-channel map (depth, opacity, grayscale, edges, masks as f64).
pub type ScalarMap = Image<f64>;

/// Boolean per-pixel mask.
pub type Mask = Image<bool>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "buffer of {} pixels does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
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
        }
    }

    pub fn map<U: Clone>(&self, f: impl FnMut(&T) -> U) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> Image<T> {
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    /// Pixel access with coordinates clamped to the border (replicate padding).
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> &T {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.get(cx, cy)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn same_dims<U>(&self, other: &Image<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_dims<U>(&self, other: &Image<U>, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

impl ScalarMap {
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

impl RgbImage {
    /// Unweighted channel mean, same scale as the input.
    pub fn gray(&self) -> ScalarMap {
        self.map(|p| (p[0] + p[1] + p[2]) / 3.0)
    }

    pub fn clamped(&self) -> RgbImage {
        self.map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)])
    }

    /// Quantize to 8-bit RGB (round to nearest, clamped).
    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for (dst, src) in out.pixels_mut().zip(self.data.iter()) {
            *dst = image::Rgb([to_u8(src[0]), to_u8(src[1]), to_u8(src[2])]);
        }
        out
    }

    pub fn from_rgb8(img: &image::RgbImage) -> RgbImage {
        let data = img
            .pixels()
            .map(|p| {
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ]
            })
            .collect();
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }
}

#[inline]
pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 3×3 median filter with replicate borders.
pub fn median3x3(map: &ScalarMap) -> ScalarMap {
    let (w, h) = map.dims();
    Image::from_fn(w, h, |x, y| {
        let mut window = [0.0f64; 9];
        let mut n = 0;
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                window[n] = *map.get_clamped(x as isize + dx, y as isize + dy);
                n += 1;
            }
        }
        window.sort_by(|a, b| a.total_cmp(b));
        window[4]
    })
}

/// Per-channel 3×3 median filter with replicate borders.
pub fn median3x3_rgb(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dims();
    Image::from_fn(w, h, |x, y| {
        let mut out = [0.0; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let mut window = [0.0f64; 9];
            let mut n = 0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    window[n] = img.get_clamped(x as isize + dx, y as isize + dy)[c];
                    n += 1;
                }
            }
            window.sort_by(|a, b| a.total_cmp(b));
            *o = window[4];
        }
        out
    })
}
