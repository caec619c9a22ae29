//! TOML configuration for the whole pipeline.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::imaging::CanonicalSize;
use crate::model::{ModelConfig, TrainConfig};
use crate::postproc::DEFAULT_MIN_AREA_FRACTION;
use crate::stain::StainMatrix;
use crate::texture::{DEFAULT_POINTS, DEFAULT_RADIUS};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub canonical_size: CanonicalSize,
    pub lbp_points: usize,
    pub lbp_radius: f64,
    /// Rows are the H, E and DAB optical-density vectors.
    pub stain_matrix: [[f64; 3]; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            canonical_size: CanonicalSize::default(),
            lbp_points: DEFAULT_POINTS,
            lbp_radius: DEFAULT_RADIUS,
            stain_matrix: StainMatrix::default().rows,
        }
    }
}

impl PreprocessConfig {
    pub fn stain(&self) -> StainMatrix {
        StainMatrix {
            rows: self.stain_matrix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    pub min_area_frac: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            min_area_frac: DEFAULT_MIN_AREA_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Expand the training set with the 52-variant augmentation recipe.
    pub augment: bool,
    /// Share of the training images (taken from the end of the sorted list)
    /// held out for checkpoint selection when no validation directory is set.
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Use this checkpoint instead of training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub postproc: PostprocConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    /// Settings sized for 64×64 synthetic images: images keep their size,
    /// the default network and optimizer are used.
    pub fn toy() -> Self {
        Self {
            preprocess: PreprocessConfig {
                canonical_size: CanonicalSize::Auto,
                ..PreprocessConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.preprocess;
        if let CanonicalSize::Fixed { width, height } = p.canonical_size {
            if width == 0 || height == 0 {
                return Err(Error::Config(format!("canonical size {width}x{height} must be positive")));
            }
        }
        if !(1..=32).contains(&p.lbp_points) {
            return Err(Error::Config(format!("lbp_points must be in 1..=32, got {}", p.lbp_points)));
        }
        if !(p.lbp_radius.is_finite() && p.lbp_radius > 0.0) {
            return Err(Error::Config(format!("lbp_radius must be positive, got {}", p.lbp_radius)));
        }
        if p.stain_matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("stain_matrix entries must be finite".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        let f = self.postproc.min_area_frac;
        if !(0.0..1.0).contains(&f) {
            return Err(Error::Config(format!("min_area_frac must be in [0, 1), got {f}")));
        }
        let v = self.data.validation_fraction;
        if !(0.0..1.0).contains(&v) {
            return Err(Error::Config(format!("validation_fraction must be in [0, 1), got {v}")));
        }
        Ok(())
    }
}

fn list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

fn float(v: f64) -> String {
    toml::Value::Float(v).to_string()
}

/// The default configuration as commented TOML.
pub fn annotated_default() -> String {
    let c = PipelineConfig::default();
    let p = &c.preprocess;
    let (cw, ch) = match p.canonical_size {
        CanonicalSize::Fixed { width, height } => (width, height),
        CanonicalSize::Auto => unreachable!("default is fixed"),
    };
    let m = &p.stain_matrix;
    let row = |r: &[f64; 3]| format!("[{}, {}, {}]", float(r[0]), float(r[1]), float(r[2]));
    format!(
        r#"# glandseg configuration

[preprocess]
# Every input is resized to this size before feature extraction.
# Use {{ mode = "auto" }} to round each side up to a multiple of 64 instead.
canonical_size = {{ mode = "fixed", width = {cw}, height = {ch} }}
# Rotation-invariant LBP: sampling points on a circle of this radius.
lbp_points = {lbp_points}
lbp_radius = {lbp_radius}
# Optical-density vectors of Hematoxylin, Eosin and DAB (one row each).
stain_matrix = [{r0}, {r1}, {r2}]

[model]
# Red and Hematoxylin channels enter the encoder.
input_channels = {input_channels}
# One residual down-sampling stage per entry.
encoder_widths = [{widths}]
# Join the LBP channel with the last decoder features before the fine head.
lbp_injection = {lbp}
# The coarse head predicts at 1 / 2^stage of the input size.
coarse_head_stage = {stage}
seed = {mseed}

[train]
# Total loss is 2 * coarse loss + fine loss, each CE - exp(1 + soft Dice).
epochs = {epochs}
batch_size = {batch}
lr = {lr}
seed = {tseed}
# "adam" or "sgd".
optimizer = "adam"

[postproc]
# Objects smaller than this fraction of the image area are removed after
# Otsu thresholding, opening and hole filling.
min_area_frac = {maf}

[data]
# Expand training images with the 52-variant flip/crop recipe.
augment = {augment}
# Hold out this share of the training images to pick the best epoch.
validation_fraction = {vf}

[paths]
# train_dir = "data/train"
# val_dir = "data/val"
# test_dir = "data/test"
# output_dir = "out"
# checkpoint = "out/model.ckpt"
"#,
        lbp_points = p.lbp_points,
        lbp_radius = float(p.lbp_radius),
        r0 = row(&m[0]),
        r1 = row(&m[1]),
        r2 = row(&m[2]),
        input_channels = c.model.input_channels,
        widths = list(&c.model.encoder_widths),
        lbp = c.model.lbp_injection,
        stage = c.model.coarse_head_stage,
        mseed = c.model.seed,
        epochs = c.train.epochs,
        batch = c.train.batch_size,
        lr = float(c.train.lr),
        tseed = c.train.seed,
        maf = float(c.postproc.min_area_frac),
        augment = c.data.augment,
        vf = float(c.data.validation_fraction),
    )
}
