//! Local binary patterns on a circular neighbourhood.
//!
//! Neighbour `k` sits at angle `2πk/N`, counter-clockwise from the positive
//! x axis (image y grows downward). Off-grid samples are bilinearly
//! interpolated and borders are edge-replicated, so maps match the source
//! dimensions. Bit `k` is set when the neighbour is at least the centre.

use crate::imaging::GrayImage;
use crate::{Error, Result};

pub const DEFAULT_POINTS: usize = 8;
pub const DEFAULT_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LbpMap {
    pub width: usize,
    pub height: usize,
    pub n_points: usize,
    pub radius: f64,
    pub codes: Vec<u32>,
}

fn validate(n_points: usize, radius: f64) -> Result<()> {
    if !(4..=24).contains(&n_points) {
        return Err(Error::invalid(format!(
            "LBP needs 4..=24 sampling points, got {n_points}"
        )));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid(format!("LBP radius must be positive, got {radius}")));
    }
    Ok(())
}

fn snap(v: f64) -> f64 {
    if (v - v.round()).abs() < 1e-9 {
        v.round()
    } else {
        v
    }
}

/// Sampling offsets `(dx, dy)`, exactly closed under the symmetries the
/// point count allows (quarter turns when `N % 4 == 0`, half turns when even).
fn sample_offsets(n: usize, radius: f64) -> Vec<(f64, f64)> {
    let raw = |k: usize| {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        (snap(radius * theta.cos()), snap(-radius * theta.sin()))
    };
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(n);
    for k in 0..n {
        let o = if n.is_multiple_of(4) && k >= n / 4 {
            let (dx, dy) = out[k - n / 4];
            (dy, -dx)
        } else if n.is_multiple_of(2) && k >= n / 2 {
            let (dx, dy) = out[k - n / 2];
            (-dx, -dy)
        } else {
            raw(k)
        };
        out.push(o);
    }
    out
}

/// Per-axis interpolation taps: (near step, far step, near weight, far weight).
#[derive(Clone, Copy)]
struct AxisTaps {
    near: isize,
    far: isize,
    w_near: f64,
    w_far: f64,
}

impl AxisTaps {
    fn new(d: f64) -> Self {
        let a = d.abs();
        let i = a.floor();
        let f = a - i;
        let s: isize = if d < 0.0 { -1 } else { 1 };
        Self {
            near: s * i as isize,
            far: s * (i as isize + 1),
            w_near: 1.0 - f,
            w_far: f,
        }
    }
}

struct Sampler {
    taps: Vec<(AxisTaps, AxisTaps)>,
}

impl Sampler {
    fn new(n: usize, radius: f64) -> Self {
        let taps = sample_offsets(n, radius)
            .into_iter()
            .map(|(dx, dy)| (AxisTaps::new(dx), AxisTaps::new(dy)))
            .collect();
        Self { taps }
    }

    fn code(&self, img: &GrayImage, x: usize, y: usize) -> u32 {
        let (w, h) = (img.width() as isize, img.height() as isize);
        let center = img.get(x, y);
        let at = |dx: isize, dy: isize| {
            let xx = (x as isize + dx).clamp(0, w - 1) as usize;
            let yy = (y as isize + dy).clamp(0, h - 1) as usize;
            img.get(xx, yy) - center
        };
        let mut code = 0u32;
        for (k, (tx, ty)) in self.taps.iter().enumerate() {
            // Summed as (nn + ff) + (nf + fn) so mirrored and quarter-turned
            // neighbourhoods round identically; the difference form keeps
            // flat patches at exactly zero.
            let nn = tx.w_near * ty.w_near * at(tx.near, ty.near);
            let ff = tx.w_far * ty.w_far * at(tx.far, ty.far);
            let nf = tx.w_near * ty.w_far * at(tx.near, ty.far);
            let fnr = tx.w_far * ty.w_near * at(tx.far, ty.near);
            let diff = (nn + ff) + (nf + fnr);
            if diff >= 0.0 {
                code |= 1 << k;
            }
        }
        code
    }
}

pub fn lbp(img: &GrayImage, n_points: usize, radius: f64) -> Result<LbpMap> {
    validate(n_points, radius)?;
    let sampler = Sampler::new(n_points, radius);
    let mut codes = Vec::with_capacity(img.width() * img.height());
    for y in 0..img.height() {
        for x in 0..img.width() {
            codes.push(sampler.code(img, x, y));
        }
    }
    Ok(LbpMap {
        width: img.width(),
        height: img.height(),
        n_points,
        radius,
        codes,
    })
}

/// Circular right rotation of an `n_bits`-wide code.
pub fn ror(code: u32, shift: u32, n_bits: u32) -> Result<u32> {
    if n_bits == 0 || n_bits > 31 || code >= 1 << n_bits {
        return Err(Error::invalid(format!(
            "code {code} does not fit in {n_bits} bits"
        )));
    }
    Ok(ror_unchecked(code, shift % n_bits, n_bits))
}

fn ror_unchecked(code: u32, shift: u32, n_bits: u32) -> u32 {
    if shift == 0 {
        return code;
    }
    let mask = (1u32 << n_bits) - 1;
    ((code >> shift) | (code << (n_bits - shift))) & mask
}

/// Smallest value among all circular rotations of `code`.
pub fn min_rotation(code: u32, n_bits: u32) -> u32 {
    (0..n_bits)
        .map(|i| ror_unchecked(code, i, n_bits))
        .min()
        .unwrap_or(code)
}

pub fn lbp_invariant(img: &GrayImage, n_points: usize, radius: f64) -> Result<LbpMap> {
    let mut map = lbp(img, n_points, radius)?;
    for c in &mut map.codes {
        *c = min_rotation(*c, n_points as u32);
    }
    Ok(map)
}

/// Rotation-invariant codes scaled by `2^N - 1` into `[0, 1]`.
pub fn lbp_feature_channel(img: &GrayImage, n_points: usize, radius: f64) -> Result<GrayImage> {
    let map = lbp_invariant(img, n_points, radius)?;
    let scale = ((1u64 << n_points) - 1) as f64;
    let data = map.codes.iter().map(|&c| c as f64 / scale).collect();
    GrayImage::new(map.width, map.height, data)
}

impl LbpMap {
    /// Pixels whose whole sampling circle, including interpolation taps,
    /// stays inside the image.
    pub fn is_interior(&self, x: usize, y: usize) -> bool {
        let m = self.radius.ceil() as usize + 1;
        x >= m && y >= m && x + m < self.width && y + m < self.height
    }

    pub fn interior_codes(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_interior(x, y) {
                    out.push(self.codes[y * self.width + x]);
                }
            }
        }
        out
    }

    pub fn to_gray(&self) -> GrayImage {
        let scale = ((1u64 << self.n_points) - 1) as f64;
        let data = self.codes.iter().map(|&c| c as f64 / scale).collect();
        GrayImage::new(self.width, self.height, data).expect("codes fit in N bits")
    }
}
