//! Separable bicubic resampling (Catmull-Rom kernel, a = -0.5).
//!
//! Downscaling widens the kernel by the inverse scale so it acts as a proper
//! antialiasing filter. Borders use half-sample symmetric reflection and all
//! accumulation happens in `f64` regardless of the image's scalar type.

use ndarray::Array3;

use super::Image;
use crate::err::{Error, Result};
use crate::scalar::Scalar;

/// A positive rational resampling factor `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Factor {
    num: u32,
    den: u32,
}

impl Factor {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::invalid("resampling factor must be positive"));
        }
        Ok(Factor { num, den })
    }

    /// Integer upscale factor `n`.
    pub fn up(n: u32) -> Result<Self> {
        Factor::new(n, 1)
    }

    /// Integer downscale factor `1 / n`.
    pub fn down(n: u32) -> Result<Self> {
        Factor::new(1, n)
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Output length for an input of `len` samples: `floor(len * num / den)`.
    pub fn apply(self, len: usize) -> usize {
        len * self.num as usize / self.den as usize
    }
}

/// Catmull-Rom cubic kernel (a = -0.5), support `|x| < 2`.
pub(crate) fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Half-sample symmetric reflection of an index into `0..len`.
pub(crate) fn reflect_index(mut i: i64, len: usize) -> usize {
    let n = len as i64;
    debug_assert!(n > 0);
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Tap positions and normalized weights for one output coordinate.
pub(crate) fn axis_taps(out_idx: usize, in_len: usize, out_len: usize) -> (Vec<usize>, Vec<f64>) {
    let scale = out_len as f64 / in_len as f64;
    let filt_scale = scale.min(1.0);
    let support = 2.0 / filt_scale;
    let center = (out_idx as f64 + 0.5) / scale - 0.5;
    let lo = (center - support).ceil() as i64;
    let hi = (center + support).floor() as i64;
    let mut idx = Vec::with_capacity((hi - lo + 1) as usize);
    let mut wts = Vec::with_capacity((hi - lo + 1) as usize);
    let mut sum = 0.0;
    for i in lo..=hi {
        let w = cubic_kernel((i as f64 - center) * filt_scale);
        if w != 0.0 {
            idx.push(reflect_index(i, in_len));
            wts.push(w);
            sum += w;
        }
    }
    debug_assert!(sum > 0.0);
    for w in &mut wts {
        *w /= sum;
    }
    (idx, wts)
}

fn resample_rows(src: &Array3<f64>, out_h: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let mut out = Array3::<f64>::zeros((c, out_h, w));
    for oy in 0..out_h {
        let (idx, wts) = axis_taps(oy, h, out_h);
        for ci in 0..c {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, wt) in idx.iter().zip(&wts) {
                    acc += src[[ci, *i, x]] * wt;
                }
                out[[ci, oy, x]] = acc;
            }
        }
    }
    out
}

fn resample_cols(src: &Array3<f64>, out_w: usize) -> Array3<f64> {
    let (c, h, w) = src.dim();
    let mut out = Array3::<f64>::zeros((c, h, out_w));
    for ox in 0..out_w {
        let (idx, wts) = axis_taps(ox, w, out_w);
        for ci in 0..c {
            for y in 0..h {
                let mut acc = 0.0;
                for (i, wt) in idx.iter().zip(&wts) {
                    acc += src[[ci, y, *i]] * wt;
                }
                out[[ci, y, ox]] = acc;
            }
        }
    }
    out
}

/// Resamples to an explicit target size. Output range equals input range,
/// with values clamped back into it.
pub fn resize_to<S: Scalar>(img: &Image<S>, out_h: usize, out_w: usize) -> Result<Image<S>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resample target must be non-empty"));
    }
    let src = img.data().mapv(|v| v.as_f64());
    let mid = if out_h == img.height() { src } else { resample_rows(&src, out_h) };
    let full = if out_w == img.width() { mid } else { resample_cols(&mid, out_w) };
    let (lo, hi) = img.range().bounds();
    let data = full.mapv(|v| S::of(v.clamp(lo, hi)));
    Ok(Image::from_clamped(data, img.range()))
}

/// Scales both axes by `factor`; output size is `floor(dim * factor)` per axis.
pub fn bicubic_resize<S: Scalar>(img: &Image<S>, factor: Factor) -> Result<Image<S>> {
    let out_h = factor.apply(img.height());
    let out_w = factor.apply(img.width());
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "factor {}/{} collapses a {}x{} image",
            factor.num, factor.den, img.height(), img.width()
        )));
    }
    resize_to(img, out_h, out_w)
}
