//! PNG and JPEG file IO for eight-bit RGB images.
//!
//! PNG is the lossless storage format and can carry text metadata chunks;
//! JPEG exists for the rate-distortion comparison harness.

use std::fs::File;
use std::io::{BufWriter, Cursor, Write};
use std::path::Path;

use super::Image;
use crate::err::{Error, Result};
use crate::scalar::Scalar;

fn png_err(e: png::EncodingError) -> Error {
    Error::format(format!("png encode: {e}"))
}

fn png_dec_err(e: png::DecodingError) -> Error {
    Error::format(format!("png decode: {e}"))
}

fn img_err(e: image::ImageError) -> Error {
    Error::format(format!("image codec: {e}"))
}

/// Writes an eight-bit RGB image as PNG with optional tEXt metadata chunks.
pub fn save_png_rgb8_with_text<S: Scalar>(
    path: &Path,
    img: &Image<S>,
    texts: &[(String, String)],
) -> Result<()> {
    let bytes = img.to_rgb8_bytes()?;
    let file = File::create(path)?;
    let w = BufWriter::new(file);
    let mut enc = png::Encoder::new(w, img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Best);
    for (k, v) in texts {
        enc.add_text_chunk(k.clone(), v.clone()).map_err(png_err)?;
    }
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

/// Writes an eight-bit RGB image as PNG.
pub fn save_png_rgb8<S: Scalar>(path: &Path, img: &Image<S>) -> Result<()> {
    save_png_rgb8_with_text(path, img, &[])
}

/// Loads an RGB8 PNG along with its tEXt metadata chunks.
pub fn load_png_rgb8<S: Scalar>(path: &Path) -> Result<(Image<S>, Vec<(String, String)>)> {
    let dec = png::Decoder::new(File::open(path)?);
    let mut reader = dec.read_info().map_err(png_dec_err)?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(png_dec_err)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(format!(
            "expected 8-bit RGB png, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let img = Image::from_rgb8(&buf[..h * w * 3], h, w)?;
    let texts = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    Ok((img, texts))
}

/// Encodes an eight-bit RGB image as JPEG at the given quality (1..=100).
pub fn encode_jpeg_to_vec<S: Scalar>(img: &Image<S>, quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("jpeg quality {quality} outside 1..=100")));
    }
    let bytes = img.to_rgb8_bytes()?;
    let mut out = Cursor::new(Vec::new());
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, quality);
    enc.encode(
        &bytes,
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(img_err)?;
    Ok(out.into_inner())
}

/// Writes an eight-bit RGB image as JPEG at the given quality.
pub fn save_jpeg_rgb8<S: Scalar>(path: &Path, img: &Image<S>, quality: u8) -> Result<()> {
    let data = encode_jpeg_to_vec(img, quality)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&data)?;
    Ok(())
}

/// Loads any PNG/JPEG file as an eight-bit RGB image.
pub fn load_image_rgb8<S: Scalar>(path: &Path) -> Result<Image<S>> {
    let dynamic = image::ImageReader::open(path)
        .map_err(|e| Error::format(format!("open {}: {e}", path.display())))?
        .decode()
        .map_err(img_err)?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Image::from_rgb8(rgb.as_raw(), h, w)
}

/// Decodes an in-memory JPEG/PNG buffer as an eight-bit RGB image.
pub fn decode_image_rgb8<S: Scalar>(data: &[u8]) -> Result<Image<S>> {
    let dynamic = image::load_from_memory(data).map_err(img_err)?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Image::from_rgb8(rgb.as_raw(), h, w)
}
