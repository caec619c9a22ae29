//! Optical density and colour deconvolution.
//!
//! Stain vectors are the rows of a 3×3 matrix `M` (Hematoxylin, Eosin, DAB)
//! over the RGB columns. Optical densities compose as the row vector
//! `od = c · M`, so concentrations are recovered with `c = od · M⁻¹`.

use serde::{Deserialize, Serialize};

use crate::imaging::{GrayImage, RgbImage};
use crate::{Error, Result};

/// White reference for 8-bit images.
pub const DEFAULT_INCIDENT: f64 = 255.0;

/// Intensities are floored at this value before taking the logarithm.
pub const INTENSITY_FLOOR: f64 = 1.0;

const SINGULAR_DET: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StainMatrix {
    pub rows: [[f64; 3]; 3],
}

impl Default for StainMatrix {
    /// Ruifrok–Johnston H/E/DAB vectors as published, not renormalized.
    fn default() -> Self {
        Self {
            rows: [
                [0.65, 0.70, 0.29],
                [0.07, 0.99, 0.11],
                [0.27, 0.57, 0.78],
            ],
        }
    }
}

impl StainMatrix {
    pub fn determinant(&self) -> f64 {
        let m = &self.rows;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// The colour deconvolution matrix `M⁻¹`.
    pub fn inverse(&self) -> Result<[[f64; 3]; 3]> {
        let det = self.determinant();
        if !(det.abs() > SINGULAR_DET) {
            return Err(Error::SingularMatrix { det });
        }
        let m = &self.rows;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        // adjugate / det
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        Ok(adj.map(|row| row.map(|v| v / det)))
    }

    /// Optical density produced by the concentration row vector `c`.
    pub fn compose_od(&self, c: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| (0..3).map(|i| c[i] * self.rows[i][j]).sum())
    }

    /// Transmitted intensity for concentrations `c` under Beer–Lambert.
    pub fn compose_intensity(&self, c: [f64; 3], incident: f64) -> [f64; 3] {
        self.compose_od(c).map(|od| incident * 10f64.powf(-od))
    }
}

/// Applies a precomputed `M⁻¹` to one optical density row vector.
pub fn unmix(inverse: &[[f64; 3]; 3], od: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|j| (0..3).map(|i| od[i] * inverse[i][j]).sum())
}

/// `-log10(max(I, 1) / incident)`, clamped at zero.
pub fn optical_density_of(intensity: f64, incident: f64) -> f64 {
    let od = -(intensity.max(INTENSITY_FLOOR) / incident).log10();
    od.max(0.0)
}

pub fn optical_density(rgb: [u8; 3], incident: f64) -> [f64; 3] {
    rgb.map(|v| optical_density_of(v as f64, incident))
}

/// Per-stain concentration rasters; raw values, may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    pub width: usize,
    pub height: usize,
    pub hematoxylin: Vec<f64>,
    pub eosin: Vec<f64>,
    pub dab: Vec<f64>,
}

pub fn deconvolve(img: &RgbImage, m: &StainMatrix) -> Result<ConcentrationMap> {
    let inv = m.inverse()?;
    let n = img.width() * img.height();
    let mut out = ConcentrationMap {
        width: img.width(),
        height: img.height(),
        hematoxylin: Vec::with_capacity(n),
        eosin: Vec::with_capacity(n),
        dab: Vec::with_capacity(n),
    };
    for px in img.pixels() {
        let [h, e, d] = unmix(&inv, optical_density(px, DEFAULT_INCIDENT));
        out.hematoxylin.push(h);
        out.eosin.push(e);
        out.dab.push(d);
    }
    Ok(out)
}

/// Clamps negatives to zero, then min–max scales to `[0, 1]`. A constant
/// input maps to all zeros.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let (lo, hi) = clamped
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return vec![0.0; clamped.len()];
    }
    clamped
        .iter()
        .map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
        .collect()
}

fn channel_image(conc: &ConcentrationMap, values: &[f64]) -> GrayImage {
    GrayImage::new(conc.width, conc.height, normalize_unit(values))
        .expect("normalized channel stays in range")
}

impl ConcentrationMap {
    pub fn hematoxylin_image(&self) -> GrayImage {
        channel_image(self, &self.hematoxylin)
    }

    pub fn eosin_image(&self) -> GrayImage {
        channel_image(self, &self.eosin)
    }

    pub fn dab_image(&self) -> GrayImage {
        channel_image(self, &self.dab)
    }
}

/// Normalized Hematoxylin concentration, the stain-specific network input.
pub fn hematoxylin_channel(img: &RgbImage, m: &StainMatrix) -> Result<GrayImage> {
    Ok(deconvolve(img, m)?.hematoxylin_image())
}
