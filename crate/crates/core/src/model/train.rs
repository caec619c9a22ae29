//! Mini-batch training, validation and the finite-difference self-check.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::total_loss_node;
use super::{batch_inputs, downsample_target, LinkNet, LossReport, Mode, ModelConfig};
use crate::autodiff::{
    check_gradients, Adam, GradCheckReport, Graph, Optimizer, Sgd, Tensor,
};
use crate::imaging::{CHANNEL_HEMATOXYLIN, CHANNEL_LBP, CHANNEL_RED};
use crate::{BinaryMask, Error, FeatureStack, GrayImage, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 2,
            lr: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// One training example: features plus the binary gland target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stack: FeatureStack,
    pub target: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's mini-batches, measured before each update.
    pub train: LossReport,
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation total (training
    /// total when there is no validation set).
    pub best: LinkNet,
    pub best_epoch: usize,
    pub last: LinkNet,
    pub history: Vec<EpochRecord>,
}

struct Batch {
    x: Tensor,
    lbp: Option<Tensor>,
    fine: Tensor,
    coarse: Tensor,
}

fn make_batch(cfg: &ModelConfig, samples: &[&Sample]) -> Result<Batch> {
    let stacks: Vec<&FeatureStack> = samples.iter().map(|s| &s.stack).collect();
    let (x, lbp) = batch_inputs(cfg, &stacks)?;
    let (n, _, h, w) = x.dims4("batch")?;
    let factor = cfg.coarse_factor();
    let mut fine = Vec::with_capacity(n * h * w);
    let mut coarse = Vec::with_capacity(n * h * w / (factor * factor));
    for s in samples {
        if (s.target.width(), s.target.height()) != (w, h) {
            return Err(Error::shape(
                "train",
                format!("{}x{} target for a {w}x{h} stack", s.target.width(), s.target.height()),
            ));
        }
        fine.extend(s.target.bits().iter().map(|&b| f64::from(u8::from(b))));
        let small = downsample_target(&s.target, factor)?;
        coarse.extend(small.bits().iter().map(|&b| f64::from(u8::from(b))));
    }
    Ok(Batch {
        x,
        lbp,
        fine: Tensor::new(vec![n, 1, h, w], fine)?,
        coarse: Tensor::new(vec![n, 1, h / factor, w / factor], coarse)?,
    })
}

/// Forward pass plus loss; `Graph` keeps the tape for a later backward.
fn batch_loss(
    model: &LinkNet,
    g: &mut Graph,
    batch: &Batch,
    mode: Mode,
) -> Result<(super::Forward, crate::autodiff::NodeId, LossReport)> {
    let fwd = model.forward(g, &batch.x, batch.lbp.as_ref(), mode)?;
    let (loss, report) = total_loss_node(g, fwd.fine, fwd.coarse, &batch.fine, &batch.coarse)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("training loss {report:?}")));
    }
    Ok((fwd, loss, report))
}

/// Mean eval-mode total loss over `samples`.
pub fn validation_loss(model: &LinkNet, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut totals = Vec::new();
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = make_batch(model.config(), chunk)?;
        let mut g = Graph::new();
        let (_, _, report) = batch_loss(model, &mut g, &batch, Mode::Eval)?;
        totals.push(report.total);
    }
    if totals.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    Ok(totals.iter().sum::<f64>() / totals.len() as f64)
}

pub fn train(model: LinkNet, train_set: &[Sample], val_set: &[Sample], tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt: Box<dyn Optimizer> = match tc.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(tc.lr)),
        OptimizerKind::Sgd => Box::new(Sgd { lr: tc.lr }),
    };
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_score = f64::INFINITY;
    let mut history = Vec::with_capacity(tc.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(tc.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = make_batch(model.config(), &samples)?;
            let mut g = Graph::new();
            let (fwd, loss, report) = batch_loss(&model, &mut g, &batch, Mode::Train)
                .map_err(|e| diagnose(e, epoch))?;
            let grads = g.backward(loss)?;
            if grads.iter().any(|(_, t)| !t.is_finite()) {
                return Err(Error::NonFinite(format!("gradient in epoch {epoch}")));
            }
            model.update_running_stats(&g, &fwd);
            opt.step(model.params_mut(), &grads);
            reports.push(report);
        }
        let train_report = LossReport::mean(&reports).expect("at least one batch");
        let val_total = if val_set.is_empty() {
            None
        } else {
            Some(validation_loss(&model, val_set, tc.batch_size)?)
        };
        let score = val_total.unwrap_or(train_report.total);
        if score < best_score {
            best_score = score;
            best = model.clone();
            best_epoch = epoch;
        }
        log::info!(
            "epoch {epoch}: l1 {:.5} l2 {:.5} total {:.5} fine dice {:.4}{}",
            train_report.l1_coarse,
            train_report.l2_fine,
            train_report.total,
            train_report.dice_fine,
            val_total.map_or(String::new(), |v| format!(" val {v:.5}"))
        );
        history.push(EpochRecord {
            epoch,
            train: train_report,
            val_total,
        });
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

fn diagnose(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}: {m}")),
        other => other,
    }
}

/// `epoch,l1,l2,total,val_total` with one row per epoch.
pub fn loss_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,l1,l2,total,val_total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch,
            r.train.l1_coarse,
            r.train.l2_fine,
            r.train.total,
            r.val_total.map_or(String::new(), |v| v.to_string())
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub size: usize,
    pub widths: Vec<usize>,
    pub batch: usize,
    pub samples: usize,
    pub h: f64,
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            size: 16,
            widths: vec![4, 6, 8],
            batch: 2,
            samples: 128,
            h: 1e-5,
            floor: 1e-6,
            seed: 7,
        }
    }
}

fn random_stack(rng: &mut ChaCha8Rng, size: usize) -> Result<FeatureStack> {
    let mut s = FeatureStack::new(size, size);
    for name in [CHANNEL_RED, CHANNEL_HEMATOXYLIN, CHANNEL_LBP] {
        let data = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        s.push(name, GrayImage::new(size, size, data)?)?;
    }
    Ok(s)
}

/// Train-mode total loss of a small network on random data, differentiated
/// by backward and by central differences at randomly chosen parameters.
pub fn gradcheck(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let cfg = ModelConfig {
        encoder_widths: gc.widths.clone(),
        seed: gc.seed,
        ..ModelConfig::default()
    };
    let model = LinkNet::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let mut samples = Vec::new();
    for _ in 0..gc.batch {
        let stack = random_stack(&mut rng, gc.size)?;
        // a filled disc keeps both loss terms away from their degenerate ends
        let c = gc.size as f64 / 2.0 + rng.gen_range(-2.0..2.0);
        let r = gc.size as f64 / 4.0;
        let bits = (0..gc.size * gc.size)
            .map(|i| {
                let (x, y) = ((i % gc.size) as f64 + 0.5, (i / gc.size) as f64 + 0.5);
                (x - c).powi(2) + (y - c).powi(2) < r * r
            })
            .collect();
        samples.push(Sample {
            stack,
            target: BinaryMask::new(gc.size, gc.size, bits)?,
        });
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = make_batch(&cfg, &refs)?;
    let mut g = Graph::new();
    let (_, loss, _) = batch_loss(&model, &mut g, &batch, Mode::Train)?;
    let grads = g.backward(loss)?;

    let all = crate::autodiff::all_coordinates(model.params());
    let picked = index::sample(&mut rng, all.len(), gc.samples.min(all.len()));
    let coords: Vec<(String, usize)> = picked.iter().map(|i| all[i].clone()).collect();
    check_gradients(model.params(), &grads, &coords, gc.h, gc.floor, |params| {
        let probe = LinkNet::from_parts(cfg.clone(), params.clone());
        let mut g = Graph::new();
        let (_, loss, _) = batch_loss(&probe, &mut g, &batch, Mode::Train)?;
        Ok(g.value(loss).data()[0])
    })
}
