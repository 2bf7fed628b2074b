//! Lossless image and mask file I/O.
//!
//! Files are 8-bit per channel PNG. Loading divides by 255; saving rounds to
//! the nearest 8-bit level, so a reload is within `1/510` of the source.

use std::path::Path;

use image::{ImageFormat, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::image::{ImagePlane, RegionMask};
use crate::scalar::Scalar;

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) => {}
        other => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("unsupported format {other:?}; only lossless png is accepted"),
            })
        }
    }
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn ensure_lossless_target(path: &Path) -> Result<()> {
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        Ok(())
    } else {
        Err(Error::LossyFormat(path.to_path_buf()))
    }
}

/// Reads an RGB image (alpha, if any, is dropped).
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<ImagePlane<T>> {
    let path = path.as_ref();
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let scale = T::lit(255.0);
    ImagePlane::from_fn(h, w, |c, y, x| {
        T::lit(rgb.get_pixel(x as u32, y as u32)[c] as f64) / scale
    })
}

/// Quantizes a `[0, 1]` value to 8 bits, clamping stray values.
#[inline]
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let v = v.to_f64_lossy().clamp(0.0, 1.0);
    (v * 255.0).round() as u8
}

/// Writes `img` as an 8-bit PNG. Any other extension is rejected.
pub fn save_image<T: Scalar>(img: &ImagePlane<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_lossless_target(path)?;
    let (h, w) = img.dims();
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            quantize(img.get(0, y, x)),
            quantize(img.get(1, y, x)),
            quantize(img.get(2, y, x)),
        ])
    });
    out.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    })
}

/// Reads a mask image: any nonzero sample in a pixel marks it as attack region.
/// Loads every `.png` file in `dir`, in file-name order.
pub fn load_image_dir<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<ImagePlane<T>>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    paths.iter().map(load_image).collect()
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<RegionMask> {
    let path = path.as_ref();
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let flags = rgb.pixels().map(|p| p.0.iter().any(|&v| v != 0)).collect();
    RegionMask::from_bools(h, w, flags)
}

/// Writes a mask as a single-channel PNG (255 inside the region, 0 outside).
pub fn save_mask(mask: &RegionMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_lossless_target(path)?;
    let (h, w) = mask.dims();
    let out = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    out.save_with_format(path, ImageFormat::Png).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}
