//! Layer table mirroring the forward pass, used for initialization and the
//! `describe-model` listing.

use super::{dec_name, decoder_mid, enc_name, encoder_in, stem_name, ModelConfig};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        bias: bool,
    },
    BatchNorm {
        ch: usize,
    },
    Relu,
    MaxPool2,
    Upsample2,
    Add,
    ConcatLbp,
    Sigmoid,
}

impl LayerKind {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv {
                in_ch,
                out_ch,
                k,
                bias,
                ..
            } => out_ch * in_ch * k * k + if bias { out_ch } else { 0 },
            LayerKind::BatchNorm { ch } => 2 * ch,
            _ => 0,
        }
    }

    fn label(&self) -> String {
        match *self {
            LayerKind::Conv {
                in_ch,
                out_ch,
                k,
                stride,
                bias,
            } => format!(
                "conv{k}x{k} {in_ch}->{out_ch} s{stride}{}",
                if bias { " +bias" } else { "" }
            ),
            LayerKind::BatchNorm { ch } => format!("batchnorm {ch}"),
            LayerKind::Relu => "relu".into(),
            LayerKind::MaxPool2 => "maxpool2".into(),
            LayerKind::Upsample2 => "upsample2".into(),
            LayerKind::Add => "add".into(),
            LayerKind::ConcatLbp => "concat lbp".into(),
            LayerKind::Sigmoid => "sigmoid".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRow {
    pub name: String,
    pub kind: LayerKind,
    /// Output `(channels, height, width)` for one image.
    pub output: (usize, usize, usize),
}

impl LayerRow {
    pub fn param_count(&self) -> usize {
        self.kind.param_count()
    }
}

struct Table {
    rows: Vec<LayerRow>,
    shape: (usize, usize, usize),
}

impl Table {
    fn push(&mut self, name: String, kind: LayerKind) {
        let (c, h, w) = self.shape;
        self.shape = match kind {
            LayerKind::Conv { out_ch, stride, .. } => (out_ch, h / stride, w / stride),
            LayerKind::MaxPool2 => (c, h / 2, w / 2),
            LayerKind::Upsample2 => (c, h * 2, w * 2),
            LayerKind::ConcatLbp => (c + 1, h, w),
            _ => (c, h, w),
        };
        self.rows.push(LayerRow {
            name,
            kind,
            output: self.shape,
        });
    }

    fn conv_bn(&mut self, name: &str, out_ch: usize, k: usize, relu: bool) {
        let in_ch = self.shape.0;
        self.push(
            format!("{name}.conv"),
            LayerKind::Conv {
                in_ch,
                out_ch,
                k,
                stride: 1,
                bias: false,
            },
        );
        self.push(format!("{name}.bn"), LayerKind::BatchNorm { ch: out_ch });
        if relu {
            self.push(name.to_string(), LayerKind::Relu);
        }
    }
}

/// Rows in forward order for an `h × w` input.
pub fn describe(cfg: &ModelConfig, h: usize, w: usize) -> Result<Vec<LayerRow>> {
    cfg.validate()?;
    cfg.check_extent(h, w)?;
    let widths = &cfg.encoder_widths;
    let mut t = Table {
        rows: Vec::new(),
        shape: (cfg.input_channels, h, w),
    };
    t.conv_bn(&stem_name(), widths[0], 3, true);
    let mut skips = vec![t.shape];
    for (i, &wi) in widths.iter().enumerate() {
        let name = enc_name(i);
        t.push(format!("{name}.pool"), LayerKind::MaxPool2);
        let pooled = t.shape;
        t.conv_bn(&format!("{name}.a"), wi, 3, true);
        t.conv_bn(&format!("{name}.b"), wi, 3, false);
        if encoder_in(cfg, i) != wi {
            let main = t.shape;
            t.shape = pooled;
            t.conv_bn(&format!("{name}.short"), wi, 1, false);
            t.shape = main;
        }
        t.push(format!("{name}.add"), LayerKind::Add);
        t.push(name.clone(), LayerKind::Relu);
        skips.push(t.shape);
    }
    let mut coarse_shape = (cfg.coarse_head_stage == cfg.depth()).then_some(t.shape);
    for j in (0..cfg.depth()).rev() {
        let name = dec_name(j);
        let out_ch = skips[j].0;
        t.conv_bn(&format!("{name}.reduce"), decoder_mid(t.shape.0), 1, true);
        t.push(format!("{name}.up"), LayerKind::Upsample2);
        t.conv_bn(&format!("{name}.mid"), t.shape.0, 3, true);
        t.conv_bn(&format!("{name}.expand"), out_ch, 1, true);
        t.push(format!("{name}.skip"), LayerKind::Add);
        if j == cfg.coarse_head_stage {
            coarse_shape = Some(t.shape);
        }
    }
    let fine_shape = t.shape;
    t.shape = coarse_shape.expect("stage validated");
    t.push(
        "coarse".into(),
        LayerKind::Conv {
            in_ch: t.shape.0,
            out_ch: 1,
            k: 1,
            stride: 1,
            bias: true,
        },
    );
    t.push("coarse.sigmoid".into(), LayerKind::Sigmoid);
    t.shape = fine_shape;
    if cfg.lbp_injection {
        t.push("fine.concat".into(), LayerKind::ConcatLbp);
    }
    t.push(
        "fine.conv".into(),
        LayerKind::Conv {
            in_ch: t.shape.0,
            out_ch: widths[0],
            k: 3,
            stride: 1,
            bias: true,
        },
    );
    t.push("fine.relu".into(), LayerKind::Relu);
    t.push(
        "fine.out".into(),
        LayerKind::Conv {
            in_ch: widths[0],
            out_ch: 1,
            k: 1,
            stride: 1,
            bias: true,
        },
    );
    t.push("fine.sigmoid".into(), LayerKind::Sigmoid);
    Ok(t.rows)
}

/// Plain-text table with one row per layer and a parameter total.
pub fn format_layer_table(rows: &[LayerRow]) -> String {
    let mut out = format!("{:<22} {:<28} {:>16} {:>10}\n", "layer", "op", "output", "params");
    for r in rows {
        let (c, h, w) = r.output;
        out.push_str(&format!(
            "{:<22} {:<28} {:>16} {:>10}\n",
            r.name,
            r.kind.label(),
            format!("{c}x{h}x{w}"),
            r.param_count()
        ));
    }
    let total: usize = rows.iter().map(LayerRow::param_count).sum();
    out.push_str(&format!("total parameters: {total}\n"));
    out
}
