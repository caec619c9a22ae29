//! The dual-output LinkNet segmentation network.
//!
//! Layout for widths `[w0, .., wD-1]`:
//!
//! - stem: 3×3 conv, BN, ReLU at full resolution (the first skip);
//! - encoder stage i: 2×2 max pool, then a residual block
//!   `relu(bn(conv3(relu(bn(conv3(p))))) + shortcut(p))` widening to `wi`;
//! - decoder stage j (from the bottom up): 1×1 reduce to a quarter of the
//!   channels, ×2 nearest upsampling, 3×3 conv, 1×1 expand, each followed by
//!   BN and ReLU, then the matching encoder output is added;
//! - coarse head: 1×1 conv and sigmoid on the decoder output at
//!   `1 / 2^coarse_head_stage` resolution;
//! - fine head: the last decoder output joined with the LBP channel, 3×3 conv,
//!   ReLU, 1×1 conv, sigmoid.

mod layers;
mod loss;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Kind, NodeId, NormMode, ParamStore, Tensor};
use crate::imaging::{CHANNEL_HEMATOXYLIN, CHANNEL_LBP, CHANNEL_RED};
use crate::{Error, FeatureStack, ProbabilityMap, Result};

pub use layers::{describe, format_layer_table, LayerKind, LayerRow};
pub use loss::{
    combined_loss, cross_entropy, downsample_target, soft_dice, total_loss, LossReport,
    DICE_SMOOTHING, PROB_CLAMP,
};
pub use train::{
    gradcheck, loss_csv, train, validation_loss, EpochRecord, GradCheckConfig, OptimizerKind, Sample,
    TrainConfig, TrainOutcome,
};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Feature channels fed to the encoder, in order.
pub const INPUT_CHANNELS: [&str; 2] = [CHANNEL_RED, CHANNEL_HEMATOXYLIN];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub encoder_widths: Vec<usize>,
    pub lbp_injection: bool,
    /// The coarse head sits at `1 / 2^coarse_head_stage` of the input size.
    pub coarse_head_stage: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: INPUT_CHANNELS.len(),
            encoder_widths: vec![16, 32, 64, 128],
            lbp_injection: true,
            coarse_head_stage: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Input extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.depth()
    }

    pub fn coarse_factor(&self) -> usize {
        1 << self.coarse_head_stage
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(Error::Config(format!(
                "encoder_widths must be non-empty and positive, got {:?}",
                self.encoder_widths
            )));
        }
        if self.depth() > 16 {
            return Err(Error::Config(format!("encoder depth {} is too large", self.depth())));
        }
        if self.coarse_head_stage == 0 || self.coarse_head_stage > self.depth() {
            return Err(Error::Config(format!(
                "coarse_head_stage must be in 1..={}, got {}",
                self.depth(),
                self.coarse_head_stage
            )));
        }
        Ok(())
    }

    pub(crate) fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        for got in [h, w] {
            if got == 0 || got % self.divisor() != 0 {
                return Err(Error::Indivisible {
                    got,
                    divisor: self.divisor(),
                    context: "model input extent",
                });
            }
        }
        Ok(())
    }

    fn to_meta(&self, store: &mut ParamStore) {
        store.set_meta("input_channels", self.input_channels);
        let widths: Vec<String> = self.encoder_widths.iter().map(|w| w.to_string()).collect();
        store.set_meta("encoder_widths", widths.join(","));
        store.set_meta("lbp_injection", self.lbp_injection);
        store.set_meta("coarse_head_stage", self.coarse_head_stage);
        store.set_meta("seed", self.seed);
    }

    fn from_meta(store: &ParamStore) -> Result<Self> {
        fn field<T: std::str::FromStr>(store: &ParamStore, key: &str) -> Result<T> {
            store
                .meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format {
                    what: "checkpoint",
                    message: format!("missing or malformed meta `{key}`"),
                })
        }
        let widths = store.meta("encoder_widths").unwrap_or("");
        let encoder_widths = widths
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format {
                what: "checkpoint",
                message: format!("malformed encoder_widths `{widths}`"),
            })?;
        let cfg = Self {
            input_channels: field(store, "input_channels")?,
            encoder_widths,
            lbp_injection: field(store, "lbp_injection")?,
            coarse_head_stage: field(store, "coarse_head_stage")?,
            seed: field(store, "seed")?,
        };
        cfg.validate().map_err(|e| Error::Format {
            what: "checkpoint",
            message: e.to_string(),
        })?;
        Ok(cfg)
    }
}

/// Network output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOutput {
    pub fine: ProbabilityMap,
    pub coarse: ProbabilityMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    /// Running statistics in normalization layers.
    Eval,
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub fine: NodeId,
    pub coarse: NodeId,
    /// Normalization layers by parameter prefix, for running-stat updates.
    pub norms: Vec<(String, NodeId)>,
    /// Input arity of the fine head's first convolution.
    pub fine_in_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkNet {
    cfg: ModelConfig,
    params: ParamStore,
}

impl LinkNet {
    /// Fresh network with seeded fan-in initialization.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        for row in describe(&cfg, cfg.divisor(), cfg.divisor())? {
            match row.kind {
                LayerKind::Conv {
                    in_ch,
                    out_ch,
                    k,
                    bias,
                    ..
                } => {
                    let fan_in = (in_ch * k * k) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    let n = out_ch * in_ch * k * k;
                    let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    params.insert(&format!("{}.w", row.name), Kind::Param, Tensor::new(vec![out_ch, in_ch, k, k], w)?);
                    if bias {
                        params.insert(&format!("{}.b", row.name), Kind::Param, Tensor::zeros(&[out_ch]));
                    }
                }
                LayerKind::BatchNorm { ch } => {
                    params.insert(&format!("{}.gamma", row.name), Kind::Param, Tensor::full(&[ch], 1.0));
                    params.insert(&format!("{}.beta", row.name), Kind::Param, Tensor::zeros(&[ch]));
                    params.insert(&format!("{}.running_mean", row.name), Kind::Buffer, Tensor::zeros(&[ch]));
                    params.insert(&format!("{}.running_var", row.name), Kind::Buffer, Tensor::full(&[ch], 1.0));
                }
                _ => {}
            }
        }
        cfg.to_meta(&mut params);
        Ok(Self { cfg, params })
    }

    /// Rebuilds a network from checkpoint tensors and metadata.
    pub fn from_params(params: ParamStore) -> Result<Self> {
        let cfg = ModelConfig::from_meta(&params)?;
        let reference = LinkNet::new(cfg.clone())?;
        for name in reference.params.names() {
            let want = reference.params.get(name)?;
            let got = params.get(name)?;
            if want.shape() != got.shape() || reference.params.kind(name) != params.kind(name) {
                return Err(Error::Format {
                    what: "checkpoint",
                    message: format!("tensor `{name}` has shape {:?}, expected {:?}", got.shape(), want.shape()),
                });
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Format {
                what: "checkpoint",
                message: format!("{} tensors, expected {}", params.len(), reference.params.len()),
            });
        }
        Ok(Self { cfg, params })
    }

    pub(crate) fn from_parts(cfg: ModelConfig, params: ParamStore) -> Self {
        Self { cfg, params }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_params(ParamStore::load(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn forward(&self, g: &mut Graph, x: &Tensor, lbp: Option<&Tensor>, mode: Mode) -> Result<Forward> {
        forward(&self.cfg, &self.params, g, x, lbp, mode)
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// buffers.
    pub fn update_running_stats(&mut self, g: &Graph, fwd: &Forward) {
        for (prefix, id) in &fwd.norms {
            let Some((mean, var)) = g.batch_stats(*id) else { continue };
            for (key, stat) in [("running_mean", mean), ("running_var", var)] {
                if let Some(t) = self.params.get_mut(&format!("{prefix}.{key}")) {
                    for (r, &b) in t.data_mut().iter_mut().zip(stat) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
    }

    /// Eval-mode probability maps for a batch of stacks.
    pub fn predict_batch(&self, stacks: &[&FeatureStack]) -> Result<Vec<DualOutput>> {
        if stacks.is_empty() {
            return Ok(Vec::new());
        }
        let (x, lbp) = batch_inputs(&self.cfg, stacks)?;
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, &x, lbp.as_ref(), Mode::Eval)?;
        let fine = split_maps(g.value(fwd.fine))?;
        let coarse = split_maps(g.value(fwd.coarse))?;
        Ok(fine
            .into_iter()
            .zip(coarse)
            .map(|(fine, coarse)| DualOutput { fine, coarse })
            .collect())
    }

    pub fn predict(&self, stack: &FeatureStack) -> Result<DualOutput> {
        Ok(self.predict_batch(&[stack])?.remove(0))
    }
}

fn split_maps(t: &Tensor) -> Result<Vec<ProbabilityMap>> {
    let (n, _, h, w) = t.dims4("output")?;
    (0..n)
        .map(|i| ProbabilityMap::new(w, h, t.data()[i * h * w..(i + 1) * h * w].to_vec()))
        .collect()
}

/// Packs stacks into `(N, C, H, W)` encoder input and optional `(N, 1, H, W)`
/// LBP tensors.
pub fn batch_inputs(cfg: &ModelConfig, stacks: &[&FeatureStack]) -> Result<(Tensor, Option<Tensor>)> {
    let first = stacks.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (w, h) = (first.width(), first.height());
    cfg.check_extent(h, w)?;
    if cfg.input_channels > INPUT_CHANNELS.len() {
        return Err(Error::Config(format!(
            "input_channels {} exceeds the {} available feature channels",
            cfg.input_channels,
            INPUT_CHANNELS.len()
        )));
    }
    let names = &INPUT_CHANNELS[..cfg.input_channels];
    let mut x = Vec::with_capacity(stacks.len() * names.len() * w * h);
    let mut lbp = Vec::new();
    for s in stacks {
        if (s.width(), s.height()) != (w, h) {
            return Err(Error::shape(
                "batch_inputs",
                format!("{}x{} stack in a {w}x{h} batch", s.width(), s.height()),
            ));
        }
        for name in names {
            let ch = s
                .channel(name)
                .ok_or_else(|| Error::invalid(format!("feature stack lacks `{name}` channel")))?;
            x.extend_from_slice(ch);
        }
        if cfg.lbp_injection {
            let ch = s
                .channel(CHANNEL_LBP)
                .ok_or_else(|| Error::invalid(format!("feature stack lacks `{CHANNEL_LBP}` channel")))?;
            lbp.extend_from_slice(ch);
        }
    }
    let n = stacks.len();
    let x = Tensor::new(vec![n, names.len(), h, w], x)?;
    let lbp = if cfg.lbp_injection {
        Some(Tensor::new(vec![n, 1, h, w], lbp)?)
    } else {
        None
    };
    Ok((x, lbp))
}

struct Builder<'a> {
    g: &'a mut Graph,
    params: &'a ParamStore,
    mode: Mode,
    norms: Vec<(String, NodeId)>,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, x: NodeId, stride: usize, pad: usize, bias: bool) -> Result<NodeId> {
        let w = self.g.param(&format!("{name}.w"), self.params.get(&format!("{name}.w"))?.clone());
        let b = if bias {
            let key = format!("{name}.b");
            Some(self.g.param(&key, self.params.get(&key)?.clone()))
        } else {
            None
        };
        self.g.conv2d(x, w, b, stride, pad)
    }

    fn bn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.g.param(&format!("{name}.gamma"), self.params.get(&format!("{name}.gamma"))?.clone());
        let beta = self.g.param(&format!("{name}.beta"), self.params.get(&format!("{name}.beta"))?.clone());
        let y = match self.mode {
            Mode::Train => self.g.batch_norm(x, gamma, beta, BN_EPS, NormMode::Train)?,
            Mode::Eval => {
                let mean = self.params.get(&format!("{name}.running_mean"))?.data();
                let var = self.params.get(&format!("{name}.running_var"))?.data();
                self.g.batch_norm(x, gamma, beta, BN_EPS, NormMode::Eval { mean, var })?
            }
        };
        self.norms.push((name.to_string(), y));
        Ok(y)
    }

    /// conv (no bias) → BN → optional ReLU.
    fn conv_bn(&mut self, name: &str, x: NodeId, k: usize, relu: bool) -> Result<NodeId> {
        let c = self.conv(&format!("{name}.conv"), x, 1, k / 2, false)?;
        let y = self.bn(&format!("{name}.bn"), c)?;
        if relu {
            self.g.relu(y)
        } else {
            Ok(y)
        }
    }
}

pub(crate) fn stem_name() -> String {
    "stem".into()
}

pub(crate) fn enc_name(i: usize) -> String {
    format!("enc{i}")
}

pub(crate) fn dec_name(j: usize) -> String {
    format!("dec{j}")
}

pub(crate) fn decoder_mid(in_ch: usize) -> usize {
    (in_ch / 4).max(1)
}

/// Channel count entering encoder stage `i` (the stem output for stage 0).
pub(crate) fn encoder_in(cfg: &ModelConfig, i: usize) -> usize {
    if i == 0 {
        cfg.encoder_widths[0]
    } else {
        cfg.encoder_widths[i - 1]
    }
}

pub fn forward(
    cfg: &ModelConfig,
    params: &ParamStore,
    g: &mut Graph,
    x: &Tensor,
    lbp: Option<&Tensor>,
    mode: Mode,
) -> Result<Forward> {
    cfg.validate()?;
    let (n, c, h, w) = x.dims4("model input")?;
    if c != cfg.input_channels {
        return Err(Error::shape(
            "model input",
            format!("{c} channels, model expects {}", cfg.input_channels),
        ));
    }
    cfg.check_extent(h, w)?;
    let lbp = match (cfg.lbp_injection, lbp) {
        (true, Some(t)) => {
            if t.shape() != [n, 1, h, w] {
                return Err(Error::shape(
                    "lbp input",
                    format!("{:?}, expected {:?}", t.shape(), [n, 1, h, w]),
                ));
            }
            Some(t)
        }
        (true, None) => return Err(Error::invalid("model expects an LBP channel")),
        (false, _) => None,
    };

    let mut b = Builder {
        g,
        params,
        mode,
        norms: Vec::new(),
    };
    let input = b.g.constant(x.clone());
    let stem = b.conv_bn(&stem_name(), input, 3, true)?;

    let depth = cfg.depth();
    let mut skips = vec![stem];
    let mut cur = stem;
    for i in 0..depth {
        let name = enc_name(i);
        let p = b.g.maxpool2(cur)?;
        let a = b.conv_bn(&format!("{name}.a"), p, 3, true)?;
        let m = b.conv_bn(&format!("{name}.b"), a, 3, false)?;
        let s = if encoder_in(cfg, i) == cfg.encoder_widths[i] {
            p
        } else {
            b.conv_bn(&format!("{name}.short"), p, 1, false)?
        };
        let sum = b.g.add(m, s)?;
        cur = b.g.relu(sum)?;
        skips.push(cur);
    }

    // skips[k] sits at 1 / 2^k resolution
    let mut coarse_feature = (cfg.coarse_head_stage == depth).then_some(cur);
    for j in (0..depth).rev() {
        let name = dec_name(j);
        let r = b.conv_bn(&format!("{name}.reduce"), cur, 1, true)?;
        let u = b.g.upsample2(r)?;
        let m = b.conv_bn(&format!("{name}.mid"), u, 3, true)?;
        let e = b.conv_bn(&format!("{name}.expand"), m, 1, true)?;
        cur = b.g.add(e, skips[j])?;
        if j == cfg.coarse_head_stage {
            coarse_feature = Some(cur);
        }
    }
    let coarse_feature = coarse_feature.expect("stage validated");
    let cl = b.conv("coarse", coarse_feature, 1, 0, true)?;
    let coarse = b.g.sigmoid(cl)?;

    let (fine_in, fine_in_channels) = match lbp {
        Some(t) => {
            let l = b.g.constant(t.clone());
            (b.g.concat_channels(cur, l)?, cfg.encoder_widths[0] + 1)
        }
        None => (cur, cfg.encoder_widths[0]),
    };
    let f1 = b.conv("fine.conv", fine_in, 1, 1, true)?;
    let f1 = b.g.relu(f1)?;
    let f2 = b.conv("fine.out", f1, 1, 0, true)?;
    let fine = b.g.sigmoid(f2)?;
    Ok(Forward {
        fine,
        coarse,
        norms: b.norms,
        fine_in_channels,
    })
}

#[cfg(test)]
mod tests;
