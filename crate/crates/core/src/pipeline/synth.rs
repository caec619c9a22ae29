//! Synthetic H&E-like images of elliptical glands with exact instance masks.
//!
//! Each gland is an ellipse with a Hematoxylin-rich epithelial ring around a
//! pale lumen, placed on Eosin-stained stroma dotted with small nuclei. Colours are produced by
//! composing stain concentrations through the stain matrix, so colour
//! deconvolution recovers the ring in the Hematoxylin channel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::stain::{StainMatrix, DEFAULT_INCIDENT};
use crate::{Error, InstanceMask, Result, RgbImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of glands per image.
    pub gland_count: (usize, usize),
    /// Inclusive range of ellipse semi-axes in pixels.
    pub radius: (f64, f64),
    /// Lumen semi-axes as a fraction of the gland's.
    pub lumen_ratio: f64,
    /// Amplitude of uniform per-pixel concentration noise.
    pub noise: f64,
    /// Minimum pixel gap between glands.
    pub gap: usize,
    /// Expected stromal nuclei per pixel; nuclei are small Hematoxylin-dark
    /// discs outside the glands.
    pub nuclei_density: f64,
    /// Per-image stain strength is drawn from `1 ± stain_jitter`.
    pub stain_jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            gland_count: (1, 4),
            radius: (6.0, 12.0),
            lumen_ratio: 0.5,
            noise: 0.08,
            gap: 3,
            nuclei_density: 0.004,
            stain_jitter: 0.15,
            seed: 0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;
const LAYOUT_ATTEMPTS: usize = 50;

// (H, E, DAB) concentrations
const STROMA: [f64; 3] = [0.15, 0.55, 0.0];
const EPITHELIUM: [f64; 3] = [0.9, 0.3, 0.0];
const LUMEN: [f64; 3] = [0.05, 0.08, 0.0];
const NUCLEUS: [f64; 3] = [0.8, 0.35, 0.0];
const NUCLEUS_RADIUS: f64 = 1.3;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.gland_count;
        let (rlo, rhi) = self.radius;
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("synthetic image size must be positive"));
        }
        if lo > hi {
            return Err(Error::invalid(format!("gland count range {lo}..={hi} is empty")));
        }
        if !(rlo.is_finite() && rhi.is_finite() && rlo >= 1.0 && rlo <= rhi) {
            return Err(Error::invalid(format!("radius range {rlo}..={rhi} is invalid")));
        }
        if !(self.lumen_ratio >= 0.0 && self.lumen_ratio < 1.0) {
            return Err(Error::invalid(format!("lumen ratio {} outside [0, 1)", self.lumen_ratio)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise amplitude {} is invalid", self.noise)));
        }
        if !(0.0..=1.0).contains(&self.nuclei_density) {
            return Err(Error::invalid(format!("nuclei density {} outside [0, 1]", self.nuclei_density)));
        }
        if !(0.0..1.0).contains(&self.stain_jitter) {
            return Err(Error::invalid(format!("stain jitter {} outside [0, 1)", self.stain_jitter)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius of pixel `(x, y)`'s centre: `<= 1` inside.
    fn level(&self, x: usize, y: usize) -> f64 {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }
}

/// Tries to place `count` disjoint glands; `None` when a gland finds no room.
fn layout(spec: &SynthSpec, count: usize, rng: &mut ChaCha8Rng) -> Option<(Vec<u32>, Vec<Ellipse>)> {
    let (w, h) = (spec.width, spec.height);
    let mut labels = vec![0u32; w * h];
    let mut blocked = vec![false; w * h];
    let mut glands = Vec::with_capacity(count);
    let margin = 1.0;
    for label in 1..=count as u32 {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let a = rng.gen_range(spec.radius.0..=spec.radius.1);
            let b = rng.gen_range(spec.radius.0..=spec.radius.1);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let reach = a.max(b) + margin;
            if 2.0 * reach >= w as f64 || 2.0 * reach >= h as f64 {
                continue;
            }
            let e = Ellipse {
                cx: rng.gen_range(reach..w as f64 - reach),
                cy: rng.gen_range(reach..h as f64 - reach),
                a,
                b,
                cos: theta.cos(),
                sin: theta.sin(),
            };
            let (x0, x1) = ((e.cx - reach).floor().max(0.0) as usize, ((e.cx + reach).ceil() as usize).min(w));
            let (y0, y1) = ((e.cy - reach).floor().max(0.0) as usize, ((e.cy + reach).ceil() as usize).min(h));
            let pixels: Vec<usize> = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (x, y)))
                .filter(|&(x, y)| e.level(x, y) <= 1.0)
                .map(|(x, y)| y * w + x)
                .collect();
            if pixels.is_empty() || pixels.iter().any(|&i| blocked[i]) {
                continue;
            }
            for &i in &pixels {
                labels[i] = label;
            }
            let g = spec.gap as isize;
            for &i in &pixels {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                for yy in (y - g).max(0)..=(y + g).min(h as isize - 1) {
                    for xx in (x - g).max(0)..=(x + g).min(w as isize - 1) {
                        blocked[yy as usize * w + xx as usize] = true;
                    }
                }
            }
            glands.push(e);
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some((labels, glands))
}

fn render(spec: &SynthSpec, labels: &[u32], glands: &[Ellipse], rng: &mut ChaCha8Rng) -> Result<RgbImage> {
    let (w, h) = (spec.width, spec.height);
    let stain = StainMatrix::default();
    let strength = 1.0 + rng.gen_range(-spec.stain_jitter..=spec.stain_jitter);
    let mut nucleus = vec![false; w * h];
    let expected = spec.nuclei_density * (w * h) as f64;
    let nuclei = expected.floor() as usize + usize::from(rng.gen_bool(expected.fract()));
    for _ in 0..nuclei {
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let r = NUCLEUS_RADIUS;
        for y in (cy - r).floor().max(0.0) as usize..((cy + r).ceil() as usize).min(h) {
            for x in (cx - r).floor().max(0.0) as usize..((cx + r).ceil() as usize).min(w) {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r && labels[y * w + x] == 0 {
                    nucleus[y * w + x] = true;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            let base = if l == 0 {
                if nucleus[y * w + x] {
                    NUCLEUS
                } else {
                    STROMA
                }
            } else {
                let e = &glands[l as usize - 1];
                if e.level(x, y) <= spec.lumen_ratio * spec.lumen_ratio {
                    LUMEN
                } else {
                    EPITHELIUM
                }
            };
            let mut c = base;
            for v in c.iter_mut().take(2) {
                *v = (*v * strength + rng.gen_range(-1.0..=1.0) * spec.noise).max(0.0);
            }
            for v in stain.compose_intensity(c, DEFAULT_INCIDENT) {
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(w, h, data)
}

/// One image per index; image `i` depends only on `(spec, i)`.
pub fn synth_one(spec: &SynthSpec, index: usize) -> Result<(RgbImage, InstanceMask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    for _ in 0..LAYOUT_ATTEMPTS {
        let count = rng.gen_range(spec.gland_count.0..=spec.gland_count.1);
        if let Some((labels, glands)) = layout(spec, count, &mut rng) {
            let img = render(spec, &labels, &glands, &mut rng)?;
            return Ok((img, InstanceMask::new(spec.width, spec.height, labels)?));
        }
    }
    Err(Error::Infeasible(format!(
        "could not place {}..={} glands of radius {}..={} in {}x{} after {LAYOUT_ATTEMPTS} layouts",
        spec.gland_count.0, spec.gland_count.1, spec.radius.0, spec.radius.1, spec.width, spec.height
    )))
}

pub fn synth_generate(spec: &SynthSpec, count: usize) -> Result<Vec<(RgbImage, InstanceMask)>> {
    spec.validate()?;
    (0..count).map(|i| synth_one(spec, i)).collect()
}
