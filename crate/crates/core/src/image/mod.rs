//! Image tensors with explicit value-range semantics, plus resampling,
//! quantization and file IO.

mod io;
mod quantize;
mod resample;

pub use io::{
    decode_image_rgb8, encode_jpeg_to_vec, load_image_rgb8, load_png_rgb8, save_jpeg_rgb8,
    save_png_rgb8, save_png_rgb8_with_text,
};
pub use quantize::{dequantize, quantize_to_u8, quantize_value};
pub use resample::{bicubic_resize, resize_to, Factor};

use ndarray::Array3;

use crate::err::{Error, Result};
use crate::scalar::Scalar;

/// Value convention an [`Image`] adheres to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    /// Values in `[-1, 1]`, the model-facing convention.
    Unit,
    /// Values in `[0, 255]`, the storage and metric convention.
    EightBit,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (-1.0, 1.0),
            ValueRange::EightBit => (0.0, 255.0),
        }
    }
}

/// A channels-first image tensor `[c, h, w]` with 1 or 3 channels.
///
/// Construction validates that every value is finite and inside the declared
/// range; operations in this crate keep that invariant by clamping outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<S: Scalar> {
    data: Array3<S>,
    range: ValueRange,
}

impl<S: Scalar> Image<S> {
    pub fn new(data: Array3<S>, range: ValueRange) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(Error::invalid(format!("image must have 1 or 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid(format!("image must be non-empty, got {h}x{w}")));
        }
        let (lo, hi) = range.bounds();
        for &v in data.iter() {
            let v = v.as_f64();
            if !v.is_finite() || v < lo || v > hi {
                return Err(Error::invalid(format!(
                    "image value {v} outside declared range [{lo}, {hi}]"
                )));
            }
        }
        Ok(Image { data, range })
    }

    /// Builds from interleaved 8-bit RGB rows (`h * w * 3` bytes).
    pub fn from_rgb8(bytes: &[u8], h: usize, w: usize) -> Result<Self> {
        if bytes.len() != h * w * 3 {
            return Err(Error::invalid(format!(
                "rgb8 buffer has {} bytes, expected {}",
                bytes.len(),
                h * w * 3
            )));
        }
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            S::of(bytes[(y * w + x) * 3 + c] as f64)
        });
        Image::new(data, ValueRange::EightBit)
    }

    pub fn from_fn(
        c: usize,
        h: usize,
        w: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let data = Array3::from_shape_fn((c, h, w), |(ci, y, x)| S::of(f(ci, y, x)));
        Image::new(data, range)
    }

    pub fn constant(c: usize, h: usize, w: usize, range: ValueRange, v: f64) -> Result<Self> {
        Self::from_fn(c, h, w, range, |_, _, _| v)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> S {
        self.data[[c, y, x]]
    }

    pub fn data(&self) -> &Array3<S> {
        &self.data
    }

    pub fn into_data(self) -> Array3<S> {
        self.data
    }

    /// Interleaved RGB bytes; values are rounded and clamped to `0..=255`.
    /// Requires the eight-bit range.
    pub fn to_rgb8_bytes(&self) -> Result<Vec<u8>> {
        if self.range != ValueRange::EightBit {
            return Err(Error::invalid("to_rgb8_bytes requires an eight-bit image"));
        }
        if self.channels() != 3 {
            return Err(Error::invalid("to_rgb8_bytes requires 3 channels"));
        }
        let (_, h, w) = self.data.dim();
        let mut out = vec![0u8; h * w * 3];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = self.data[[c, y, x]].as_f64().round().clamp(0.0, 255.0);
                    out[(y * w + x) * 3 + c] = v as u8;
                }
            }
        }
        Ok(out)
    }

    /// Affine map onto `[-1, 1]`. Identity if already there.
    pub fn to_unit(&self) -> Image<S> {
        match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::EightBit => {
                let data = self.data.mapv(|v| {
                    let u = v.as_f64() / 255.0 * 2.0 - 1.0;
                    S::of(u.clamp(-1.0, 1.0))
                });
                Image { data, range: ValueRange::Unit }
            }
        }
    }

    /// Affine map onto `[0, 255]` without integer rounding.
    /// Identity if already there.
    pub fn to_eight_bit(&self) -> Image<S> {
        match self.range {
            ValueRange::EightBit => self.clone(),
            ValueRange::Unit => {
                let data = self.data.mapv(|v| {
                    let u = (v.as_f64() + 1.0) / 2.0 * 255.0;
                    S::of(u.clamp(0.0, 255.0))
                });
                Image { data, range: ValueRange::EightBit }
            }
        }
    }

    /// Re-instantiates at another scalar type through `f64`.
    pub fn cast<T: Scalar>(&self) -> Image<T> {
        let (lo, hi) = self.range.bounds();
        let data = self.data.mapv(|v| T::of(v.as_f64().clamp(lo, hi)));
        Image { data, range: self.range }
    }

    /// Internal constructor for code that has already clamped its values.
    pub(crate) fn from_clamped(data: Array3<S>, range: ValueRange) -> Image<S> {
        debug_assert!({
            let (lo, hi) = range.bounds();
            data.iter().all(|v| {
                let v = v.as_f64();
                v.is_finite() && v >= lo && v <= hi
            })
        });
        Image { data, range }
    }
}
