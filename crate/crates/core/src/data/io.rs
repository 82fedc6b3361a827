//! PNG and PPM image files.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use super::raster::{BinaryMask, Image, Raster};
use crate::error::{Error, Result};
use crate::fsutil;

fn codec(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.into(),
            message: other.to_string(),
        },
    }
}

fn open(path: &Path) -> Result<DynamicImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    image::load_from_memory(&bytes).map_err(|e| codec(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads an 8-bit image as RGB with values scaled to [0, 1].
pub fn read_image(path: &Path) -> Result<Image> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Raster::new(w as usize, h as usize, 3, data)
}

/// Reads a mask; any nonzero luma value is foreground.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let gray = open(path)?.to_luma8();
    let (w, h) = gray.dimensions();
    let data = gray.into_raw().into_iter().map(|v| u8::from(v != 0)).collect();
    Raster::new(w as usize, h as usize, 1, data)
}

fn encode(path: &Path, img: DynamicImage) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") | Some("pgm") | Some("pnm") => ImageFormat::Pnm,
        _ => ImageFormat::Png,
    };
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, format).map_err(|e| codec(path, e))?;
    fsutil::write_atomic(path, &buf.into_inner())
}

/// Writes an RGB (or single-channel) image as 8-bit PNG, or PPM by extension.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let dynamic = match img.channels() {
        1 => {
            let data = img.data().iter().map(|&v| to_u8(v)).collect();
            DynamicImage::ImageLuma8(GrayImage::from_raw(w, h, data).expect("dims match"))
        }
        3 => {
            let data = img.data().iter().map(|&v| to_u8(v)).collect();
            DynamicImage::ImageRgb8(RgbImage::from_raw(w, h, data).expect("dims match"))
        }
        c => return Err(Error::Data(format!("cannot write a {c}-channel image"))),
    };
    encode(path, dynamic)
}

/// Writes a mask as grayscale with foreground at 255.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let data = mask.data().iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    let gray = GrayImage::from_raw(mask.width() as u32, mask.height() as u32, data)
        .ok_or_else(|| Error::Data("mask must have one channel".into()))?;
    encode(path, DynamicImage::ImageLuma8(gray))
}
