//! Train → predict → post-process → evaluate, with per-image work spread
//! over the worker pool and results kept in input order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::dataset::{augment_items, list_images, load_dataset, load_unlabeled, LabeledImage};
use super::{preprocess, PipelineConfig, PreprocessConfig};
use crate::imaging::{
    load_instance_mask, resize_gray, resize_mask, save_instance_mask, save_probability_map,
    save_probability_png, AugmentationRecipe, Interpolation,
};
use crate::metrics::{corpus_mean, evaluate, InstancePair, MetricsReport};
use crate::model::{loss_csv, train, LinkNet, Sample, TrainOutcome};
use crate::postproc::{binarize, extract_instances, morph_cleanup, otsu_threshold};
use crate::{Error, GrayImage, InstanceMask, ProbabilityMap, Result, RgbImage};

/// Features at canonical size with the mask resized to match.
pub fn prepare_samples(items: &[LabeledImage], cfg: &PreprocessConfig) -> Result<Vec<Sample>> {
    items
        .par_iter()
        .map(|it| {
            let stack = preprocess(&it.image, cfg)?;
            let mask = resize_mask(&it.mask, stack.width(), stack.height())?;
            Ok(Sample {
                stack,
                target: mask.foreground(),
            })
        })
        .collect()
}

/// Moves the last `ceil(fraction · n)` items to a validation list, always
/// leaving at least one training item.
pub fn split_validation(mut items: Vec<LabeledImage>, fraction: f64) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let n = items.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let val = items.split_off(n - k);
    (items, val)
}

pub fn train_model(cfg: &PipelineConfig, train_items: &[LabeledImage], val_items: &[LabeledImage]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let expanded;
    let train_items = if cfg.data.augment {
        expanded = augment_items(train_items, &AugmentationRecipe::default())?;
        &expanded[..]
    } else {
        train_items
    };
    let train_set = prepare_samples(train_items, &cfg.preprocess)?;
    let val_set = prepare_samples(val_items, &cfg.preprocess)?;
    log::info!(
        "training on {} images ({} for validation)",
        train_set.len(),
        val_set.len()
    );
    train(LinkNet::new(cfg.model.clone())?, &train_set, &val_set, &cfg.train)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub name: String,
    /// Fine probability map at the original image size.
    pub probability: ProbabilityMap,
    pub coarse: ProbabilityMap,
    pub threshold: f64,
    pub instances: InstanceMask,
}

/// Preprocess, predict, resize the fine map back to the image size, then
/// Otsu, cleanup and labelling.
pub fn segment_image(model: &LinkNet, name: &str, img: &RgbImage, cfg: &PipelineConfig) -> Result<Segmentation> {
    let stack = preprocess(img, &cfg.preprocess).map_err(|e| e.in_stage("preprocess"))?;
    let out = model.predict(&stack).map_err(|e| e.in_stage("predict"))?;
    let probability = if (out.fine.width(), out.fine.height()) == (img.width(), img.height()) {
        out.fine
    } else {
        let g = GrayImage::new(out.fine.width(), out.fine.height(), out.fine.data().to_vec())?;
        let r = resize_gray(&g, img.width(), img.height(), Interpolation::Bilinear)?;
        ProbabilityMap::new(r.width(), r.height(), r.into_data())?
    };
    let threshold = otsu_threshold(&probability);
    let clean = morph_cleanup(&binarize(&probability, threshold), cfg.postproc.min_area_frac);
    Ok(Segmentation {
        name: name.to_string(),
        probability,
        coarse: out.coarse,
        threshold,
        instances: extract_instances(&clean),
    })
}

fn write_segmentation(seg: &Segmentation, dir: &Path) -> Result<()> {
    save_probability_map(&seg.probability, dir.join(format!("{}_prob.pfm", seg.name)))?;
    save_probability_png(&seg.probability, dir.join(format!("{}_prob.png", seg.name)))?;
    save_instance_mask(&seg.instances, dir.join(format!("{}_mask.png", seg.name)))
}

fn segment_all(model: &LinkNet, images: &[(String, &RgbImage)], cfg: &PipelineConfig, out: Option<&Path>) -> Result<Vec<Segmentation>> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    images
        .par_iter()
        .map(|(name, img)| {
            let seg = segment_image(model, name, img, cfg)?;
            if let Some(dir) = out {
                write_segmentation(&seg, dir).map_err(|e| e.in_stage("write"))?;
            }
            Ok(seg)
        })
        .collect()
}

/// Segments every image in `input` and writes `<stem>_prob.pfm`,
/// `<stem>_prob.png` and `<stem>_mask.png` to `out`.
pub fn predict_dir(model: &LinkNet, input: &Path, out: &Path, cfg: &PipelineConfig) -> Result<Vec<Segmentation>> {
    let images = load_unlabeled(input)?;
    let refs: Vec<(String, &RgbImage)> = images.iter().map(|(n, i)| (n.clone(), i)).collect();
    segment_all(model, &refs, cfg, Some(out))
}

/// Scores `<stem>_mask.png` in `pred_dir` against `<stem>_anno` in `gt_dir`
/// for every image in `gt_dir`.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<(String, MetricsReport)>> {
    let images = list_images(gt_dir)?;
    if images.is_empty() {
        return Err(Error::invalid(format!("no images found in {}", gt_dir.display())));
    }
    images
        .par_iter()
        .map(|p| {
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let gt = load_instance_mask(super::mask_path_for(p))?;
            let pred = load_instance_mask(pred_dir.join(format!("{name}_mask.png")))?;
            Ok((name, evaluate(&InstancePair::new(pred, gt)?)))
        })
        .collect()
}

fn csv_row(name: &str, r: &MetricsReport) -> String {
    format!(
        "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
        r.object_dice, r.object_hausdorff, r.f1, r.precision, r.recall, r.tp, r.fp, r.fn_
    )
}

/// One row per image plus a `mean` row (scores averaged, counts summed).
pub fn metrics_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from("image,object_dice,object_hausdorff,f1,precision,recall,tp,fp,fn\n");
    for (name, r) in rows {
        out.push_str(&csv_row(name, r));
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(mean) = corpus_mean(&reports) {
        out.push_str(&csv_row("mean", &mean));
    }
    out
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub reports: Vec<(String, MetricsReport)>,
    pub mean: MetricsReport,
    /// Epoch of the kept checkpoint when the run trained a model.
    pub best_epoch: Option<usize>,
    pub output_dir: PathBuf,
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("paths.{key} is required")))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains (unless a checkpoint is configured), segments the test set and
/// scores it. Writes `model.ckpt`, `loss.csv`, `predictions/` and
/// `metrics.csv` under the output directory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = require(&cfg.paths.output_dir, "output_dir")?.clone();
    let test_dir = require(&cfg.paths.test_dir, "test_dir")?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let (model, best_epoch) = match &cfg.paths.checkpoint {
        Some(ck) => (LinkNet::load(ck).map_err(|e| e.in_stage("load checkpoint"))?, None),
        None => {
            let train_dir = require(&cfg.paths.train_dir, "train_dir")?;
            let outcome = (|| {
                let items = load_dataset(train_dir)?;
                let (train_items, val_items) = match &cfg.paths.val_dir {
                    Some(v) => (items, load_dataset(v)?),
                    None => split_validation(items, cfg.data.validation_fraction),
                };
                train_model(cfg, &train_items, &val_items)
            })()
            .map_err(|e| e.in_stage("train"))?;
            let mut best = outcome.best;
            // predictions come from exactly what the checkpoint file holds
            best.params_mut().quantize();
            best.save(&out.join("model.ckpt"))?;
            write(&out.join("loss.csv"), &loss_csv(&outcome.history))?;
            (best, Some(outcome.best_epoch))
        }
    };

    let test = load_dataset(test_dir).map_err(|e| e.in_stage("load test set"))?;
    let refs: Vec<(String, &RgbImage)> = test.iter().map(|t| (t.name.clone(), &t.image)).collect();
    let segs = segment_all(&model, &refs, cfg, Some(&out.join("predictions")))?;
    let reports = test
        .par_iter()
        .zip(&segs)
        .map(|(t, s)| Ok((t.name.clone(), evaluate(&InstancePair::new(s.instances.clone(), t.mask.clone())?))))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("eval"))?;
    write(&out.join("metrics.csv"), &metrics_csv(&reports))?;
    let mean = corpus_mean(&reports.iter().map(|(_, r)| *r).collect::<Vec<_>>()).expect("non-empty test set");
    Ok(RunSummary {
        reports,
        mean,
        best_epoch,
        output_dir: out,
    })
}

