use serde::{Deserialize, Serialize};

use super::{GrayImage, RgbImage};
use crate::postproc::InstanceMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// How input images are brought to a network-compatible size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CanonicalSize {
    /// Every image is resized to exactly this size.
    Fixed { width: usize, height: usize },
    /// Each dimension is rounded up to the next multiple of 64.
    Auto,
}

impl Default for CanonicalSize {
    fn default() -> Self {
        CanonicalSize::Fixed {
            width: 832,
            height: 576,
        }
    }
}

pub fn canonical_size(w: usize, h: usize, mode: CanonicalSize) -> (usize, usize) {
    match mode {
        CanonicalSize::Fixed { width, height } => (width, height),
        CanonicalSize::Auto => (w.max(1).div_ceil(64) * 64, h.max(1).div_ceil(64) * 64),
    }
}

fn check_target(w: usize, h: usize) -> Result<()> {
    if w == 0 || h == 0 {
        return Err(Error::invalid(format!(
            "resize target must be positive, got {w}x{h}"
        )));
    }
    Ok(())
}

/// Half-pixel-centred source coordinate of output index `i`.
fn bilinear_taps(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let scale = src as f64 / dst as f64;
    let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, s - i0 as f64)
}

fn nearest_tap(i: usize, src: usize, dst: usize) -> usize {
    let s = ((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
    s.min(src - 1)
}

pub(crate) fn bilinear_plane(
    data: &[f64],
    w: usize,
    h: usize,
    ch: usize,
    tw: usize,
    th: usize,
) -> Vec<f64> {
    let xs: Vec<_> = (0..tw).map(|x| bilinear_taps(x, w, tw)).collect();
    let mut out = Vec::with_capacity(tw * th * ch);
    for y in 0..th {
        let (y0, y1, fy) = bilinear_taps(y, h, th);
        for &(x0, x1, fx) in &xs {
            for c in 0..ch {
                let at = |xx: usize, yy: usize| data[(yy * w + xx) * ch + c];
                let top = at(x0, y0) + fx * (at(x1, y0) - at(x0, y0));
                let bottom = at(x0, y1) + fx * (at(x1, y1) - at(x0, y1));
                out.push(top + fy * (bottom - top));
            }
        }
    }
    out
}

pub(crate) fn nearest_plane<T: Copy>(
    data: &[T],
    w: usize,
    h: usize,
    ch: usize,
    tw: usize,
    th: usize,
) -> Vec<T> {
    let xs: Vec<_> = (0..tw).map(|x| nearest_tap(x, w, tw)).collect();
    let mut out = Vec::with_capacity(tw * th * ch);
    for y in 0..th {
        let sy = nearest_tap(y, h, th);
        for &sx in &xs {
            let i = (sy * w + sx) * ch;
            out.extend_from_slice(&data[i..i + ch]);
        }
    }
    out
}

pub fn resize(img: &RgbImage, target_w: usize, target_h: usize, mode: Interpolation) -> Result<RgbImage> {
    check_target(target_w, target_h)?;
    let (w, h) = (img.width(), img.height());
    let data = match mode {
        Interpolation::Nearest => nearest_plane(img.data(), w, h, 3, target_w, target_h),
        Interpolation::Bilinear => {
            let src: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
            bilinear_plane(&src, w, h, 3, target_w, target_h)
                .into_iter()
                .map(|v| v.round().clamp(0.0, 255.0) as u8)
                .collect()
        }
    };
    RgbImage::new(target_w, target_h, data)
}

pub fn resize_gray(img: &GrayImage, target_w: usize, target_h: usize, mode: Interpolation) -> Result<GrayImage> {
    check_target(target_w, target_h)?;
    let (w, h) = (img.width(), img.height());
    let data = match mode {
        Interpolation::Nearest => nearest_plane(img.data(), w, h, 1, target_w, target_h),
        Interpolation::Bilinear => bilinear_plane(img.data(), w, h, 1, target_w, target_h)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect(),
    };
    GrayImage::new(target_w, target_h, data)
}

/// Label masks are always resampled nearest-neighbour so no new labels appear.
pub fn resize_mask(mask: &InstanceMask, target_w: usize, target_h: usize) -> Result<InstanceMask> {
    check_target(target_w, target_h)?;
    let labels = nearest_plane(
        mask.labels(),
        mask.width(),
        mask.height(),
        1,
        target_w,
        target_h,
    );
    InstanceMask::new(target_w, target_h, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn canonical_modes() {
        assert_eq!(canonical_size(775, 522, CanonicalSize::default()), (832, 576));
        assert_eq!(canonical_size(1, 1, CanonicalSize::default()), (832, 576));
        assert_eq!(canonical_size(64, 128, CanonicalSize::Auto), (64, 128));
        assert_eq!(canonical_size(65, 63, CanonicalSize::Auto), (128, 64));
    }

    #[test]
    fn typical_size_resizes_to_canonical() {
        let img = RgbImage::filled(775, 522, [200, 100, 50]).unwrap();
        let (w, h) = canonical_size(img.width(), img.height(), CanonicalSize::default());
        let out = resize(&img, w, h, Interpolation::Bilinear).unwrap();
        assert_eq!((out.width(), out.height()), (832, 576));
        assert!(out.pixels().all(|p| p == [200, 100, 50]));
    }

    #[test]
    fn checkerboard_to_single_pixel_is_mid_gray() {
        let img = RgbImage::new(2, 2, vec![0, 0, 0, 255, 255, 255, 255, 255, 255, 0, 0, 0]).unwrap();
        let out = resize(&img, 1, 1, Interpolation::Bilinear).unwrap();
        // (0 + 255 + 255 + 0) / 4 = 127.5
        for v in out.pixel(0, 0) {
            assert!((127..=128).contains(&v));
        }
    }

    #[test]
    fn zero_target_is_rejected() {
        let img = RgbImage::filled(2, 2, [0, 0, 0]).unwrap();
        assert!(resize(&img, 0, 2, Interpolation::Nearest).is_err());
        assert!(resize(&img, 2, 0, Interpolation::Bilinear).is_err());
    }

    proptest! {
        #[test]
        fn resize_to_own_size_is_identity(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 7) >> 13) as u8).collect();
            let img = RgbImage::new(w, h, data).unwrap();
            prop_assert_eq!(&resize(&img, w, h, Interpolation::Bilinear).unwrap(), &img);
            prop_assert_eq!(&resize(&img, w, h, Interpolation::Nearest).unwrap(), &img);
        }

        #[test]
        fn nearest_double_then_half_round_trips(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (seed.wrapping_mul(i as u64 + 3) >> 17) as u8).collect();
            let img = RgbImage::new(w, h, data).unwrap();
            let up = resize(&img, 2 * w, 2 * h, Interpolation::Nearest).unwrap();
            prop_assert_eq!(&resize(&up, w, h, Interpolation::Nearest).unwrap(), &img);
        }
    }
}
