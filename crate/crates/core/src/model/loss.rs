//! Pixel-wise cross-entropy, soft Dice and their combination, both as plain
//! functions and as graph nodes for training.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::{BinaryMask, Error, Result};

use super::DualOutput;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l1_coarse: f64,
    pub l2_fine: f64,
    pub total: f64,
    pub ce_fine: f64,
    pub dice_fine: f64,
}

impl LossReport {
    /// Component-wise mean.
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(LossReport {
            l1_coarse: sum(|r| r.l1_coarse),
            l2_fine: sum(|r| r.l2_fine),
            total: sum(|r| r.total),
            ce_fine: sum(|r| r.ce_fine),
            dice_fine: sum(|r| r.dice_fine),
        })
    }
}

fn check(op: &'static str, g: &[f64], p: &[f64]) -> Result<()> {
    if g.len() != p.len() || g.is_empty() {
        return Err(Error::shape(op, format!("target has {} values, prediction {}", g.len(), p.len())));
    }
    Ok(())
}

/// Mean over pixels of `-(g ln p + (1 - g) ln(1 - p))`.
pub fn cross_entropy(g: &[f64], p: &[f64]) -> Result<f64> {
    check("cross_entropy", g, p)?;
    let s: f64 = g
        .iter()
        .zip(p)
        .map(|(&g, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / g.len() as f64)
}

/// `(2 Σ g p + s) / (Σ g + Σ p + s)`.
pub fn soft_dice(g: &[f64], p: &[f64], s: f64) -> Result<f64> {
    check("soft_dice", g, p)?;
    let inter: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
    let sg: f64 = g.iter().sum();
    let sp: f64 = p.iter().sum();
    Ok((2.0 * inter + s) / (sg + sp + s))
}

/// `CE - exp(1 + D)`.
pub fn combined_loss(g: &[f64], p: &[f64]) -> Result<f64> {
    Ok(cross_entropy(g, p)? - (1.0 + soft_dice(g, p, DICE_SMOOTHING)?).exp())
}

/// Nearest-neighbour subsampling by an integer factor, sampling the pixel
/// nearest each output cell's centre.
pub fn downsample_target(target: &BinaryMask, factor: usize) -> Result<BinaryMask> {
    let (w, h) = (target.width(), target.height());
    if factor == 0 || w % factor != 0 || h % factor != 0 {
        return Err(Error::Indivisible {
            got: if factor != 0 && w % factor != 0 { w } else { h },
            divisor: factor,
            context: "coarse target",
        });
    }
    let (wo, ho) = (w / factor, h / factor);
    let mut bits = Vec::with_capacity(wo * ho);
    for y in 0..ho {
        for x in 0..wo {
            bits.push(target.get(x * factor + factor / 2, y * factor + factor / 2));
        }
    }
    BinaryMask::new(wo, ho, bits)
}

fn as_f64(m: &BinaryMask) -> Vec<f64> {
    m.bits().iter().map(|&b| f64::from(u8::from(b))).collect()
}

/// Coarse loss on the subsampled target, fine loss on the full target.
pub fn total_loss(target: &BinaryMask, out: &DualOutput) -> Result<LossReport> {
    if (target.width(), target.height()) != (out.fine.width(), out.fine.height()) {
        return Err(Error::shape(
            "total_loss",
            format!(
                "{}x{} target for a {}x{} prediction",
                target.width(),
                target.height(),
                out.fine.width(),
                out.fine.height()
            ),
        ));
    }
    if out.coarse.width() == 0 || !target.width().is_multiple_of(out.coarse.width()) {
        return Err(Error::shape("total_loss", "coarse map does not divide the target"));
    }
    let factor = target.width() / out.coarse.width();
    let small = downsample_target(target, factor)?;
    let gf = as_f64(target);
    let gc = as_f64(&small);
    let l1 = combined_loss(&gc, out.coarse.data())?;
    let l2 = combined_loss(&gf, out.fine.data())?;
    Ok(LossReport {
        l1_coarse: l1,
        l2_fine: l2,
        total: 2.0 * l1 + l2,
        ce_fine: cross_entropy(&gf, out.fine.data())?,
        dice_fine: soft_dice(&gf, out.fine.data(), DICE_SMOOTHING)?,
    })
}

/// Graph nodes of one combined loss term.
pub(crate) struct LossNodes {
    pub combined: NodeId,
    pub ce: NodeId,
    pub dice: NodeId,
}

/// `target` holds 0/1 values with the same shape as `p`'s value; Dice sums
/// run over the whole batch.
pub(crate) fn combined_loss_node(g: &mut Graph, p: NodeId, target: &Tensor) -> Result<LossNodes> {
    if g.value(p).shape() != target.shape() {
        return Err(Error::shape(
            "combined_loss",
            format!("{:?} vs {:?}", g.value(p).shape(), target.shape()),
        ));
    }
    let gt = g.constant(target.clone());
    let inv = g.constant(target.map(|v| 1.0 - v));
    let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let lp = g.ln(pc)?;
    let q = g.affine(pc, -1.0, 1.0)?;
    let lq = g.ln(q)?;
    let a = g.mul(gt, lp)?;
    let b = g.mul(inv, lq)?;
    let ll = g.add(a, b)?;
    let m = g.mean(ll)?;
    let ce = g.affine(m, -1.0, 0.0)?;

    let gp = g.mul(gt, p)?;
    let inter = g.sum(gp)?;
    let num = g.affine(inter, 2.0, DICE_SMOOTHING)?;
    let sp = g.sum(p)?;
    let sg: f64 = target.data().iter().sum();
    let den = g.affine(sp, 1.0, sg + DICE_SMOOTHING)?;
    let dice = g.div(num, den)?;
    let shifted = g.affine(dice, 1.0, 1.0)?;
    let e = g.exp(shifted)?;
    let combined = g.sub(ce, e)?;
    Ok(LossNodes { combined, ce, dice })
}

/// Graph nodes for `2 · L1 + L2` plus the report read off their values.
pub(crate) fn total_loss_node(
    g: &mut Graph,
    fine: NodeId,
    coarse: NodeId,
    fine_target: &Tensor,
    coarse_target: &Tensor,
) -> Result<(NodeId, LossReport)> {
    let l1 = combined_loss_node(g, coarse, coarse_target)?;
    let l2 = combined_loss_node(g, fine, fine_target)?;
    let scaled = g.affine(l1.combined, 2.0, 0.0)?;
    let total = g.add(scaled, l2.combined)?;
    let item = |g: &Graph, id: NodeId| g.value(id).data()[0];
    let report = LossReport {
        l1_coarse: item(g, l1.combined),
        l2_fine: item(g, l2.combined),
        total: item(g, total),
        ce_fine: item(g, l2.ce),
        dice_fine: item(g, l2.dice),
    };
    Ok((total, report))
}
