//! 8-bit grayscale/RGB PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Reads a PNG into `[0, 1]` intensities. Grayscale stays one channel,
/// colour becomes three; alpha is discarded.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (stride, colour) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(png_err(path, "unexpanded palette image")),
    };
    let bytes = &buf[..info.line_size * h];
    let img = ImageTensor::from_fn((colour, h, w), |c, y, x| {
        bytes[y * info.line_size + x * stride + c] as f32 / 255.0
    });
    Ok(img)
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.shape();
    let colour = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Usage(format!("cannot write a {c}-channel image as PNG"))),
    };
    let mut data = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data.push(quantize(img.get(ch, y, x)));
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(colour);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// A binary map rendered as black/white grayscale.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &[bool], height: usize, width: usize) -> Result<()> {
    let img = ImageTensor::from_fn((1, height, width), |_, y, x| {
        if mask[y * width + x] { 1.0 } else { 0.0 }
    });
    write_png(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_images_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for c in [1, 3] {
            let img = ImageTensor::from_fn((c, 5, 7), |ch, y, x| ((ch * 31 + y * 7 + x * 13) % 256) as f32 / 255.0);
            let p = dir.path().join(format!("img{c}.png"));
            write_png(&p, &img).unwrap();
            assert_eq!(read_png(&p).unwrap(), img);
        }
    }

    #[test]
    fn rejects_unsupported_channel_counts() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::zeros(2, 4, 4);
        assert!(write_png(dir.path().join("x.png"), &img).is_err());
    }
}
