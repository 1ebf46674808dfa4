//! Dense row-major `H x W x C` images.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Raster<T> {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::default(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} raster",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, h: usize, w: usize, c: usize) -> usize {
        (h * self.width + w) * self.channels + c
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> T {
        self.data[self.idx(h, w, c)]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, c: usize, v: T) {
        let i = self.idx(h, w, c);
        self.data[i] = v;
    }

    pub fn pixel(&self, h: usize, w: usize) -> &[T] {
        let i = self.idx(h, w, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Copy of the `rows x cols` window starting at `(h0, w0)`.
    pub fn crop(&self, h0: usize, w0: usize, rows: usize, cols: usize) -> Result<Self> {
        if h0 + rows > self.height || w0 + cols > self.width {
            return Err(Error::Shape(format!(
                "crop {rows}x{cols} at ({h0},{w0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Self::new(rows, cols, self.channels);
        for r in 0..rows {
            let src = self.idx(h0 + r, w0, 0);
            let dst = out.idx(r, 0, 0);
            out.data[dst..dst + cols * self.channels]
                .copy_from_slice(&self.data[src..src + cols * self.channels]);
        }
        Ok(out)
    }
}

impl<T: Real> Raster<T> {
    /// Rec. 601 luma for 3-channel images; identity for 1-channel.
    pub fn to_gray(&self) -> Raster<T> {
        if self.channels == 1 {
            return self.clone();
        }
        let mut out = Raster::new(self.height, self.width, 1);
        let (r, g, b) = (T::c(0.299), T::c(0.587), T::c(0.114));
        for (o, px) in out.data.iter_mut().zip(self.data.chunks(self.channels)) {
            *o = if self.channels >= 3 {
                r * px[0] + g * px[1] + b * px[2]
            } else {
                px.iter().copied().sum::<T>() / T::c(px.len() as f64)
            };
        }
        out
    }

    pub fn cast<U: Real>(&self) -> Raster<U> {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| U::c(v.f64())).collect(),
        }
    }
}
