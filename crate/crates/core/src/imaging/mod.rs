//! Raster types, channel extraction, geometric transforms and augmentation.

mod augment;
mod io;
mod resize;

pub use augment::{augment, Anchor, AugmentationRecipe};
pub use io::{
    load_image, load_instance_mask, load_probability_map, probability_map_from_bytes,
    probability_map_to_bytes, save_gray_png, save_image, save_instance_mask,
    save_probability_map, save_probability_png,
};
pub use resize::{canonical_size, resize, resize_gray, resize_mask, CanonicalSize, Interpolation};

use crate::postproc::InstanceMask;
use crate::{Error, Result};

/// 8-bit RGB raster, row-major `(R, G, B)` triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "RgbImage::new",
                format!("expected {} bytes, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn transform(&self, t: Transform) -> RgbImage {
        let (width, height, data) = t.apply(&self.data, self.width, self.height, 3);
        RgbImage {
            width,
            height,
            data,
        }
    }

    /// Copies the `w`×`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<RgbImage> {
        let data = crop_plane(&self.data, self.width, self.height, 3, x0, y0, w, h)?;
        RgbImage::new(w, h, data)
    }
}

/// Single-channel float raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::shape(
                "GrayImage::new",
                format!("expected {} values, got {}", width * height, data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "gray value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn transform(&self, t: Transform) -> GrayImage {
        let (width, height, data) = t.apply(&self.data, self.width, self.height, 1);
        GrayImage {
            width,
            height,
            data,
        }
    }
}

/// Per-pixel red byte divided by 255.
pub fn extract_red(img: &RgbImage) -> GrayImage {
    let data = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Luminance `0.299 R + 0.587 G + 0.114 B`, scaled to `[0, 1]`.
pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let data = img
        .pixels()
        .map(|[r, g, b]| {
            let y = (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) / 255.0;
            y.clamp(0.0, 1.0)
        })
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

pub const CHANNEL_RED: &str = "red";
pub const CHANNEL_HEMATOXYLIN: &str = "hematoxylin";
pub const CHANNEL_LBP: &str = "lbp_invariant";

/// Named float channels sharing one raster geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    width: usize,
    height: usize,
    channels: Vec<(String, Vec<f64>)>,
}

impl FeatureStack {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            channels: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, channel: GrayImage) -> Result<()> {
        if channel.width != self.width || channel.height != self.height {
            return Err(Error::shape(
                "FeatureStack::push",
                format!(
                    "channel `{name}` is {}x{}, stack is {}x{}",
                    channel.width, channel.height, self.width, self.height
                ),
            ));
        }
        if self.channels.iter().any(|(n, _)| n == name) {
            return Err(Error::invalid(format!("duplicate channel `{name}`")));
        }
        self.channels.push((name.to_string(), channel.data));
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.channels.iter().map(|(n, _)| n.as_str())
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }

    pub fn gray(&self, name: &str) -> Option<GrayImage> {
        self.channel(name).map(|d| GrayImage {
            width: self.width,
            height: self.height,
            data: d.to_vec(),
        })
    }
}

/// Pixel-exact geometric transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Rot180,
    Hflip,
    Vflip,
    /// Quarter turn counter-clockwise; swaps width and height.
    Rot90,
}

impl Transform {
    fn output_dims(self, w: usize, h: usize) -> (usize, usize) {
        match self {
            Transform::Rot90 => (h, w),
            _ => (w, h),
        }
    }

    /// Source coordinate feeding output pixel `(x, y)`.
    fn source(self, x: usize, y: usize, w: usize, h: usize) -> (usize, usize) {
        match self {
            Transform::Identity => (x, y),
            Transform::Rot180 => (w - 1 - x, h - 1 - y),
            Transform::Hflip => (w - 1 - x, y),
            Transform::Vflip => (x, h - 1 - y),
            // output is h wide and w tall
            Transform::Rot90 => (w - 1 - y, x),
        }
    }

    pub(crate) fn apply<T: Copy>(
        self,
        data: &[T],
        w: usize,
        h: usize,
        ch: usize,
    ) -> (usize, usize, Vec<T>) {
        let (ow, oh) = self.output_dims(w, h);
        let mut out = Vec::with_capacity(data.len());
        for y in 0..oh {
            for x in 0..ow {
                let (sx, sy) = self.source(x, y, w, h);
                let i = (sy * w + sx) * ch;
                out.extend_from_slice(&data[i..i + ch]);
            }
        }
        (ow, oh, out)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn crop_plane<T: Copy>(
    data: &[T],
    w: usize,
    h: usize,
    ch: usize,
    x0: usize,
    y0: usize,
    cw: usize,
    chh: usize,
) -> Result<Vec<T>> {
    if cw == 0 || chh == 0 || x0 + cw > w || y0 + chh > h {
        return Err(Error::invalid(format!(
            "crop {cw}x{chh}+{x0}+{y0} outside {w}x{h} raster"
        )));
    }
    let mut out = Vec::with_capacity(cw * chh * ch);
    for y in y0..y0 + chh {
        let start = (y * w + x0) * ch;
        out.extend_from_slice(&data[start..start + cw * ch]);
    }
    Ok(out)
}

impl InstanceMask {
    pub fn transform(&self, t: Transform) -> InstanceMask {
        let (w, h, labels) = t.apply(self.labels(), self.width(), self.height(), 1);
        InstanceMask::new(w, h, labels).expect("transform preserves geometry")
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<InstanceMask> {
        let labels = crop_plane(self.labels(), self.width(), self.height(), 1, x0, y0, w, h)?;
        InstanceMask::new(w, h, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(w: usize, h: usize) -> RgbImage {
        let data = (0..w * h * 3).map(|i| (i * 37 % 251) as u8).collect();
        RgbImage::new(w, h, data).unwrap()
    }

    #[test]
    fn red_channel_values() {
        let img = RgbImage::new(3, 1, vec![255, 0, 0, 0, 255, 255, 128, 7, 200]).unwrap();
        let red = extract_red(&img);
        assert_eq!(red.data()[0], 1.0);
        assert_eq!(red.data()[1], 0.0);
        assert!((red.data()[2] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn grayscale_weights() {
        let img = RgbImage::new(3, 1, vec![255, 255, 255, 0, 0, 0, 255, 0, 0]).unwrap();
        let g = to_grayscale(&img);
        assert!((g.data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(g.data()[1], 0.0);
        assert!((g.data()[2] - 0.299).abs() < 1e-12);
    }

    #[test]
    fn transforms_are_involutions() {
        let img = sample(5, 3);
        for t in [Transform::Rot180, Transform::Hflip, Transform::Vflip] {
            assert_eq!(img.transform(t).transform(t), img);
        }
        let r4 = (0..4).fold(img.clone(), |acc, _| acc.transform(Transform::Rot90));
        assert_eq!(r4, img);
        assert_eq!(img.transform(Transform::Rot90).width(), 3);
    }

    #[test]
    fn rot90_direction() {
        // 2x1 image [a b] turned counter-clockwise becomes a column [b; a]
        let img = RgbImage::new(2, 1, vec![1, 1, 1, 2, 2, 2]).unwrap();
        let r = img.transform(Transform::Rot90);
        assert_eq!((r.width(), r.height()), (1, 2));
        assert_eq!(r.pixel(0, 0), [2, 2, 2]);
        assert_eq!(r.pixel(0, 1), [1, 1, 1]);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(RgbImage::new(0, 2, vec![]).is_err());
        assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
        assert!(GrayImage::new(1, 1, vec![1.5]).is_err());
    }

    #[test]
    fn feature_stack_rejects_duplicates_and_mismatches() {
        let mut s = FeatureStack::new(2, 2);
        s.push("a", GrayImage::new(2, 2, vec![0.0; 4]).unwrap()).unwrap();
        assert!(s.push("a", GrayImage::new(2, 2, vec![0.0; 4]).unwrap()).is_err());
        assert!(s.push("b", GrayImage::new(1, 2, vec![0.0; 2]).unwrap()).is_err());
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn crop_window() {
        let img = sample(4, 4);
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(1, 2));
        assert_eq!(c.pixel(1, 1), img.pixel(2, 3));
        assert!(img.crop(3, 3, 2, 2).is_err());
    }
}
