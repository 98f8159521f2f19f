//! Full-reference quality metrics, computed in `f64` regardless of the
//! image scalar type.
//!
//! PSNR uses peak 255 over all channels. SSIM runs on the BT.601 luma
//! channel with an 11x11 Gaussian window (sigma 1.5) over valid window
//! placements only.

use ndarray::{Array2, Axis};

use crate::err::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

/// Reported in place of an unbounded PSNR (identical images).
pub const PSNR_CAP_DB: f64 = 99.0;

/// SSIM window size.
pub const SSIM_WINDOW: usize = 11;

/// SSIM Gaussian sigma.
pub const SSIM_SIGMA: f64 = 1.5;

const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

/// PSNR value plus whether the sentinel cap was applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    pub capped: bool,
}

fn check_same_geometry<S: Scalar>(a: &Image<S>, b: &Image<S>, what: &str) -> Result<()> {
    if a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::invalid(format!(
            "{what}: geometry mismatch {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn to_255<S: Scalar>(img: &Image<S>) -> ndarray::Array3<f64> {
    img.to_eight_bit().data().mapv(|v| v.as_f64())
}

/// Peak signal-to-noise ratio over all channels, peak 255. Images in the
/// unit range are mapped onto the eight-bit scale first. A zero-error pair
/// reports the [`PSNR_CAP_DB`] sentinel with `capped` set.
pub fn psnr<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<Psnr> {
    check_same_geometry(a, b, "psnr")?;
    let (av, bv) = (to_255(a), to_255(b));
    let mut acc = 0.0f64;
    for (x, y) in av.iter().zip(bv.iter()) {
        let d = x - y;
        acc += d * d;
    }
    let mse = acc / av.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP_DB, capped: true });
    }
    let db = 10.0 * (255.0 * 255.0 / mse).log10();
    if db >= PSNR_CAP_DB {
        Ok(Psnr { db: PSNR_CAP_DB, capped: true })
    } else {
        Ok(Psnr { db, capped: false })
    }
}

/// BT.601 luma on the 0..255 scale; single-channel images pass through.
pub fn luma_255<S: Scalar>(img: &Image<S>) -> Array2<f64> {
    let d = to_255(img);
    match img.channels() {
        1 => d.index_axis(Axis(0), 0).to_owned(),
        _ => {
            let r = d.index_axis(Axis(0), 0);
            let g = d.index_axis(Axis(0), 1);
            let b = d.index_axis(Axis(0), 2);
            let mut y = Array2::<f64>::zeros(r.raw_dim());
            ndarray::Zip::from(&mut y).and(&r).and(&g).and(&b).for_each(|yv, &rv, &gv, &bv| {
                *yv = 0.299 * rv + 0.587 * gv + 0.114 * bv;
            });
            y
        }
    }
}

/// Normalized 1-d Gaussian taps for the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, tap) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *tap = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *tap;
    }
    for tap in &mut k {
        *tap /= sum;
    }
    k
}

/// Separable valid-placement filtering with the SSIM kernel.
fn gauss_valid(src: &Array2<f64>) -> Array2<f64> {
    let k = ssim_kernel();
    let (h, w) = src.dim();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, tap) in k.iter().enumerate() {
                acc += src[[y, x + i]] * tap;
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, tap) in k.iter().enumerate() {
                acc += rows[[y + i, x]] * tap;
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Mean structural similarity on the luma channel, valid windows only.
/// Images must be at least 11x11.
pub fn ssim<S: Scalar>(a: &Image<S>, b: &Image<S>) -> Result<f64> {
    check_same_geometry(a, b, "ssim")?;
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    let x = luma_255(a);
    let y = luma_255(b);
    let mu_x = gauss_valid(&x);
    let mu_y = gauss_valid(&y);
    let xx = gauss_valid(&(&x * &x));
    let yy = gauss_valid(&(&y * &y));
    let xy = gauss_valid(&(&x * &y));

    let mut acc = 0.0;
    for ((((mx, my), sxx), syy), sxy) in
        mu_x.iter().zip(mu_y.iter()).zip(xx.iter()).zip(yy.iter()).zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
        acc += num / den;
    }
    Ok(acc / mu_x.len() as f64)
}

/// Bits per pixel of a stored file relative to the full-resolution image it
/// encodes.
pub fn bpp_of_file(path: &std::path::Path, hr_h: usize, hr_w: usize) -> Result<f64> {
    if hr_h == 0 || hr_w == 0 {
        return Err(Error::invalid("bpp needs a non-empty reference resolution"));
    }
    let bytes = std::fs::metadata(path)?.len();
    Ok(bytes as f64 * 8.0 / (hr_h as f64 * hr_w as f64))
}
