//! Configuration, the synthetic dataset, preprocessing and the end-to-end
//! driver behind the command-line tool.

mod config;
mod dataset;
mod run;
mod synth;

pub use config::{
    annotated_default, DataConfig, PathsConfig, PipelineConfig, PostprocConfig, PreprocessConfig,
};
pub use dataset::{
    augment_items, list_images, load_dataset, load_unlabeled, mask_path_for, save_dataset,
    LabeledImage,
};
pub use run::{
    evaluate_dir, metrics_csv, predict_dir, prepare_samples, run_pipeline, segment_image,
    split_validation, train_model, RunSummary, Segmentation,
};
pub use synth::{synth_generate, synth_one, SynthSpec};

use crate::imaging::{
    canonical_size, extract_red, resize, to_grayscale, Interpolation, CHANNEL_HEMATOXYLIN,
    CHANNEL_LBP, CHANNEL_RED,
};
use crate::stain::hematoxylin_channel;
use crate::texture::lbp_feature_channel;
use crate::{Error, FeatureStack, Result, RgbImage};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "GLANDSEG_THREADS";

/// Sizes the global worker pool from `GLANDSEG_THREADS` (all cores when
/// unset). Returns the pool size.
pub fn configure_threads() -> Result<usize> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                return Err(Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got `{v}`"
                )))
            }
        },
        Err(_) => return Ok(rayon::current_num_threads()),
    };
    // a pool may already exist when called twice; keep the first one
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(rayon::current_num_threads())
}

/// Canonical resize followed by the red, Hematoxylin and invariant LBP
/// channels.
pub fn preprocess(img: &RgbImage, cfg: &PreprocessConfig) -> Result<FeatureStack> {
    let (w, h) = canonical_size(img.width(), img.height(), cfg.canonical_size);
    let resized = resize(img, w, h, Interpolation::Bilinear)?;
    let mut stack = FeatureStack::new(w, h);
    stack.push(CHANNEL_RED, extract_red(&resized))?;
    stack.push(CHANNEL_HEMATOXYLIN, hematoxylin_channel(&resized, &cfg.stain())?)?;
    stack.push(
        CHANNEL_LBP,
        lbp_feature_channel(&to_grayscale(&resized), cfg.lbp_points, cfg.lbp_radius)?,
    )?;
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::CanonicalSize;

    #[test]
    fn white_image_features() {
        let img = RgbImage::filled(8, 8, [255, 255, 255]).unwrap();
        let cfg = PreprocessConfig {
            canonical_size: CanonicalSize::Auto,
            ..PreprocessConfig::default()
        };
        let s = preprocess(&img, &cfg).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!((s.width(), s.height()), (64, 64));
        assert!(s.channel(CHANNEL_RED).unwrap().iter().all(|&v| v == 1.0));
        assert!(s.channel(CHANNEL_HEMATOXYLIN).unwrap().iter().all(|&v| v == 0.0));
        assert!(s.channel(CHANNEL_LBP).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn default_canonical_size() {
        let img = RgbImage::filled(775, 522, [200, 120, 180]).unwrap();
        let s = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert_eq!((s.width(), s.height()), (832, 576));
        assert_eq!(s.names().collect::<Vec<_>>(), vec![CHANNEL_RED, CHANNEL_HEMATOXYLIN, CHANNEL_LBP]);
    }

    #[test]
    fn singular_stain_matrix_is_numeric_error() {
        let cfg = PreprocessConfig {
            stain_matrix: [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
            ..PreprocessConfig::default()
        };
        let img = RgbImage::filled(4, 4, [10, 20, 30]).unwrap();
        assert_eq!(preprocess(&img, &cfg).unwrap_err().category().code(), 3);
    }
}
