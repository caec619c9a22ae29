//! Directory layout: each image `<stem>.png` (or `.bmp`) sits next to its
//! instance mask `<stem>_anno.png`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::imaging::{augment, load_image, load_instance_mask, save_image, save_instance_mask, AugmentationRecipe};
use crate::{Error, InstanceMask, Result, RgbImage};

pub const MASK_SUFFIX: &str = "_anno";
const EXTENSIONS: [&str; 2] = ["png", "bmp"];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub name: String,
    pub image: RgbImage,
    pub mask: InstanceMask,
}

fn has_image_ext(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files (not masks) in `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if path.is_file() && has_image_ext(&path) && !stem.ends_with(MASK_SUFFIX) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

/// The `_anno` file belonging to `image`; reports the PNG name when none exists.
pub fn mask_path_for(image: &Path) -> PathBuf {
    let dir = image.parent().unwrap_or(Path::new("."));
    let s = stem(image);
    EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{s}{MASK_SUFFIX}.{ext}")))
        .find(|p| p.is_file())
        .unwrap_or_else(|| dir.join(format!("{s}{MASK_SUFFIX}.png")))
}

fn load_pair(path: &Path) -> Result<LabeledImage> {
    let image = load_image(path)?;
    let mask = load_instance_mask(mask_path_for(path))?;
    if (mask.width(), mask.height()) != (image.width(), image.height()) {
        return Err(Error::shape(
            "dataset",
            format!(
                "{}: image is {}x{}, mask is {}x{}",
                path.display(),
                image.width(),
                image.height(),
                mask.width(),
                mask.height()
            ),
        ));
    }
    Ok(LabeledImage {
        name: stem(path),
        image,
        mask,
    })
}

/// Every image with its mask; a missing mask is an error.
pub fn load_dataset(dir: &Path) -> Result<Vec<LabeledImage>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no images found in {}", dir.display())));
    }
    paths.par_iter().map(|p| load_pair(p)).collect()
}

/// Images without masks, named by file stem.
pub fn load_unlabeled(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::invalid(format!("no images found in {}", dir.display())));
    }
    paths
        .par_iter()
        .map(|p| Ok((stem(p), load_image(p)?)))
        .collect()
}

pub fn save_dataset(items: &[LabeledImage], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    items.par_iter().try_for_each(|it| {
        save_image(&it.image, dir.join(format!("{}.png", it.name)))?;
        save_instance_mask(&it.mask, dir.join(format!("{}{MASK_SUFFIX}.png", it.name)))
    })
}

/// Expands each item with `recipe`; variant `k` of `name` becomes
/// `name_augKK`.
pub fn augment_items(items: &[LabeledImage], recipe: &AugmentationRecipe) -> Result<Vec<LabeledImage>> {
    let nested: Vec<Vec<LabeledImage>> = items
        .par_iter()
        .map(|it| {
            Ok(augment(&it.image, &it.mask, recipe)?
                .into_iter()
                .enumerate()
                .map(|(k, (image, mask))| LabeledImage {
                    name: format!("{}_aug{k:02}", it.name),
                    image,
                    mask,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(nested.into_iter().flatten().collect())
}
