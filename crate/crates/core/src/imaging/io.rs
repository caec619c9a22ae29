//! PNG/BMP decoding and the on-disk formats for masks and probability maps.
//!
//! - RGB images: 8-bit, three channels.
//! - Instance masks: single-channel PNG, 16-bit on write; 8- or 16-bit on
//!   read. Pixel value is the instance label, 0 is background.
//! - Probability maps: the ASCII line `PFM-like: W H\n` followed by `W*H`
//!   little-endian `f32` values in row-major order; or an 8-bit PNG holding
//!   `round(255 * p)`.

use std::path::Path;

use image::{ColorType, DynamicImage, ImageBuffer, Luma, Rgb};

use super::{GrayImage, RgbImage};
use crate::postproc::{InstanceMask, ProbabilityMap};
use crate::{Error, Result};

const PROB_MAGIC: &str = "PFM-like:";

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn bits_per_channel(c: ColorType) -> u16 {
    c.bits_per_pixel() / c.channel_count() as u16
}

pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = open(path)?;
    let color = img.color();
    let bits = bits_per_channel(color);
    if bits != 8 {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            detail: format!("{bits} bits per channel, expected 8"),
        });
    }
    if color.channel_count() != 3 {
        return Err(Error::UnsupportedChannels {
            path: path.to_path_buf(),
            detail: format!("{} channels, expected 3 (RGB)", color.channel_count()),
        });
    }
    let buf = img.into_rgb8();
    let (w, h) = buf.dimensions();
    RgbImage::new(w as usize, h as usize, buf.into_raw())
}

fn write_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            what: "image encoding",
            message: format!("{}: {other}", path.display()),
        },
    }
}

pub fn save_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Rgb<u8>, _> =
        ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
            .expect("buffer length checked by RgbImage");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| write_err(path, e))
}

pub fn load_instance_mask(path: impl AsRef<Path>) -> Result<InstanceMask> {
    let path = path.as_ref();
    let img = open(path)?;
    let color = img.color();
    if color.channel_count() != 1 {
        return Err(Error::UnsupportedChannels {
            path: path.to_path_buf(),
            detail: format!(
                "{} channels, instance masks are single-channel",
                color.channel_count()
            ),
        });
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let labels = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        _ => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                detail: format!("{} bits per channel, expected 8 or 16", bits_per_channel(color)),
            })
        }
    };
    InstanceMask::new(w, h, labels)
}

pub fn save_instance_mask(mask: &InstanceMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut raw = Vec::with_capacity(mask.labels().len());
    for &l in mask.labels() {
        raw.push(u16::try_from(l).map_err(|_| {
            Error::invalid(format!("label {l} does not fit a 16-bit mask"))
        })?);
    }
    let buf: ImageBuffer<Luma<u16>, _> =
        ImageBuffer::from_raw(mask.width() as u32, mask.height() as u32, raw)
            .expect("buffer length checked by InstanceMask");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| write_err(path, e))
}

fn save_unit_plane(w: usize, h: usize, data: &[f64], path: &Path) -> Result<()> {
    let raw: Vec<u8> = data
        .iter()
        .map(|&v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("plane length");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| write_err(path, e))
}

/// 8-bit PNG with value `round(255 * v)`.
pub fn save_gray_png(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    save_unit_plane(img.width(), img.height(), img.data(), path.as_ref())
}

/// 8-bit PNG with value `round(255 * p)`.
pub fn save_probability_png(map: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    save_unit_plane(map.width(), map.height(), map.data(), path.as_ref())
}

pub fn probability_map_to_bytes(map: &ProbabilityMap) -> Vec<u8> {
    let header = format!("{PROB_MAGIC} {} {}\n", map.width(), map.height());
    let mut out = Vec::with_capacity(header.len() + 4 * map.data().len());
    out.extend_from_slice(header.as_bytes());
    for &v in map.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn probability_map_from_bytes(bytes: &[u8]) -> Result<ProbabilityMap> {
    let bad = |message: String| Error::Format {
        what: "probability map",
        message,
    };
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| bad("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not ASCII".into()))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(PROB_MAGIC) {
        return Err(bad(format!("unexpected header `{header}`")));
    }
    let mut dim = |name: &str| -> Result<usize> {
        parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("missing or invalid {name} in `{header}`")))
    };
    let w = dim("width")?;
    let h = dim("height")?;
    let body = &bytes[nl + 1..];
    if body.len() != 4 * w * h {
        return Err(bad(format!(
            "expected {} payload bytes for {w}x{h}, found {}",
            4 * w * h,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    ProbabilityMap::new(w, h, data)
}

pub fn save_probability_map(map: &ProbabilityMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, probability_map_to_bytes(map)).map_err(|e| Error::io(path, e))
}

pub fn load_probability_map(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    probability_map_from_bytes(&bytes)
}
