//! Uniform 8-bit quantization between the `[-1, 1]` and `[0, 255]` conventions.

use super::{Image, ValueRange};
use crate::err::{Error, Result};
use crate::scalar::Scalar;

/// Maps one `[-1, 1]` value to the integer 8-bit grid.
/// Ties round half away from zero, so `0.0` lands on `128`.
pub fn quantize_value(v: f64) -> f64 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round()
}

/// Quantizes a unit-range image to integer-valued eight-bit storage.
pub fn quantize_to_u8<S: Scalar>(img: &Image<S>) -> Result<Image<S>> {
    if img.range() != ValueRange::Unit {
        return Err(Error::invalid("quantize_to_u8 expects a unit-range image"));
    }
    let data = img.data().mapv(|v| S::of(quantize_value(v.as_f64())));
    Ok(Image::from_clamped(data, ValueRange::EightBit))
}

/// Inverse map of [`quantize_to_u8`] back onto `[-1, 1]`.
pub fn dequantize<S: Scalar>(img: &Image<S>) -> Result<Image<S>> {
    if img.range() != ValueRange::EightBit {
        return Err(Error::invalid("dequantize expects an eight-bit image"));
    }
    let data = img
        .data()
        .mapv(|v| S::of((v.as_f64().clamp(0.0, 255.0) / 255.0 * 2.0 - 1.0).clamp(-1.0, 1.0)));
    Ok(Image::from_clamped(data, ValueRange::Unit))
}
