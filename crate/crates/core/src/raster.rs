//! Dense float images in `(height, width, channels)` layout with values in [0, 1].

use ndarray::{Array2, Array3, Zip};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub data: Array3<f64>,
}

impl Image {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { data: Array3::from_elem((height, width, channels), value) }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    /// Flattens non-overlapping `patch`×`patch` tiles into rows, tiles in
    /// row-major grid order and each row laid out as `(dy, dx, channel)`.
    pub fn patches(&self, patch: usize) -> Result<Array2<f64>> {
        let (h, w, c) = self.data.dim();
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::IndivisibleImage { height: h, width: w, patch });
        }
        let (gh, gw) = (h / patch, w / patch);
        let mut out = Array2::zeros((gh * gw, patch * patch * c));
        for gy in 0..gh {
            for gx in 0..gw {
                let mut row = out.row_mut(gy * gw + gx);
                let mut j = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        for ch in 0..c {
                            row[j] = self.data[[gy * patch + dy, gx * patch + dx, ch]];
                            j += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Replicates or averages channels to reach `channels`.
    pub fn with_channels(&self, channels: usize) -> Image {
        let (h, w, c) = self.data.dim();
        if c == channels {
            return self.clone();
        }
        let mut out = Array3::zeros((h, w, channels));
        for y in 0..h {
            for x in 0..w {
                let mean = (0..c).map(|ch| self.data[[y, x, ch]]).sum::<f64>() / c as f64;
                for ch in 0..channels {
                    out[[y, x, ch]] = if c == 1 { self.data[[y, x, 0]] } else { mean };
                }
            }
        }
        Image::new(out)
    }

    /// Pixel-wise mean of two images of equal height and width. A single
    /// channel image is broadcast over the channels of the other.
    pub fn average(a: &Image, b: &Image) -> Result<Image> {
        if a.height() != b.height() || a.width() != b.width() {
            return Err(Error::Shape(format!(
                "cannot average {}x{} with {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            )));
        }
        let channels = a.channels().max(b.channels());
        let (a, b) = (a.with_channels(channels), b.with_channels(channels));
        let mut out = a.data.clone();
        Zip::from(&mut out).and(&b.data).for_each(|o, &v| *o = 0.5 * (*o + v));
        Ok(Image::new(out))
    }
}
