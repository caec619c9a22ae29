use serde::{Deserialize, Serialize};

use super::resize::{resize, resize_mask, Interpolation};
use super::{RgbImage, Transform};
use crate::postproc::InstanceMask;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Anchor {
    pub const ALL: [Anchor; 4] = [
        Anchor::TopLeft,
        Anchor::TopRight,
        Anchor::BottomLeft,
        Anchor::BottomRight,
    ];

    fn origin(self, w: usize, h: usize, cw: usize, ch: usize) -> (usize, usize) {
        match self {
            Anchor::TopLeft => (0, 0),
            Anchor::TopRight => (w - cw, 0),
            Anchor::BottomLeft => (0, h - ch),
            Anchor::BottomRight => (w - cw, h - ch),
        }
    }
}

/// Flip/rotate/crop schedule.
///
/// Output order: every base variant first, then for each base variant, each
/// crop anchor, each final transform. Crops are resized back to the input
/// size. With the defaults this gives `4 + 4 * 4 * 3 = 52` pairs per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecipe {
    pub base_transforms: Vec<Transform>,
    pub crop_fraction: f64,
    pub crop_anchors: Vec<Anchor>,
    pub final_transforms: Vec<Transform>,
}

impl Default for AugmentationRecipe {
    fn default() -> Self {
        Self {
            base_transforms: vec![
                Transform::Identity,
                Transform::Rot180,
                Transform::Hflip,
                Transform::Vflip,
            ],
            crop_fraction: 0.75,
            crop_anchors: Anchor::ALL.to_vec(),
            final_transforms: vec![Transform::Rot180, Transform::Hflip, Transform::Vflip],
        }
    }
}

impl AugmentationRecipe {
    pub fn identity_only() -> Self {
        Self {
            base_transforms: vec![Transform::Identity],
            crop_fraction: 0.75,
            crop_anchors: Vec::new(),
            final_transforms: Vec::new(),
        }
    }

    pub fn variants_per_image(&self) -> usize {
        self.base_transforms.len()
            * (1 + self.crop_anchors.len() * self.final_transforms.len())
    }
}

pub fn augment(
    img: &RgbImage,
    mask: &InstanceMask,
    recipe: &AugmentationRecipe,
) -> Result<Vec<(RgbImage, InstanceMask)>> {
    let (w, h) = (img.width(), img.height());
    if (mask.width(), mask.height()) != (w, h) {
        return Err(Error::shape(
            "augment",
            format!(
                "image is {w}x{h} but mask is {}x{}",
                mask.width(),
                mask.height()
            ),
        ));
    }
    if recipe
        .base_transforms
        .iter()
        .chain(&recipe.final_transforms)
        .any(|t| *t == Transform::Rot90 && w != h)
    {
        return Err(Error::invalid(
            "quarter turns are only allowed on square images",
        ));
    }
    if !(recipe.crop_fraction > 0.0 && recipe.crop_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "crop fraction {} outside (0, 1]",
            recipe.crop_fraction
        )));
    }
    let cw = ((w as f64 * recipe.crop_fraction).round() as usize).clamp(1, w);
    let ch = ((h as f64 * recipe.crop_fraction).round() as usize).clamp(1, h);

    let bases: Vec<_> = recipe
        .base_transforms
        .iter()
        .map(|&t| (img.transform(t), mask.transform(t)))
        .collect();

    let mut out = Vec::with_capacity(recipe.variants_per_image());
    out.extend(bases.iter().cloned());
    for (bimg, bmask) in &bases {
        for &anchor in &recipe.crop_anchors {
            let (x0, y0) = anchor.origin(w, h, cw, ch);
            let cimg = resize(&bimg.crop(x0, y0, cw, ch)?, w, h, Interpolation::Bilinear)?;
            let cmask = resize_mask(&bmask.crop(x0, y0, cw, ch)?, w, h)?;
            for &t in &recipe.final_transforms {
                out.push((cimg.transform(t), cmask.transform(t)));
            }
        }
    }
    Ok(out)
}
