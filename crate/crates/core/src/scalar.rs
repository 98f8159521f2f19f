//! Floating-point scalar abstraction.
//!
//! All tensor math in this crate is generic over [`Scalar`] so the same
//! model code can run in `f32` for speed and `f64` where tests need the
//! extra precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssign};

/// Element type for tensors, losses and parameters.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssign
    + ScalarOperand
    + Sum
    + Default
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Canonical dtype name, stored in checkpoint manifests.
    const DTYPE: &'static str;
    /// Size of one element in bytes when serialized little-endian.
    const BYTES: usize;

    /// Lossy conversion from `f64`.
    fn of(v: f64) -> Self;
    /// Widening conversion to `f64`.
    fn as_f64(self) -> f64;
    /// Append the little-endian byte representation to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Read one value from a little-endian byte slice of length `BYTES`.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(v: f64) {
        let s = S::of(v);
        let mut buf = Vec::new();
        s.write_le(&mut buf);
        assert_eq!(buf.len(), S::BYTES);
        assert_eq!(S::read_le(&buf), s);
    }

    #[test]
    fn le_roundtrip_both_widths() {
        for v in [0.0, -1.5, 3.25e7, f64::MIN_POSITIVE, -0.1] {
            roundtrip::<f32>(v);
            roundtrip::<f64>(v);
        }
    }

    #[test]
    fn dtype_names() {
        assert_eq!(f32::DTYPE, "f32");
        assert_eq!(f64::DTYPE, "f64");
    }
}
