//! Acceptance criteria A1–A9. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use glandseg::imaging::{augment, AugmentationRecipe, Transform};
use glandseg::metrics::{detection_f1, object_dice, object_hausdorff, InstancePair};
use glandseg::model::{
    combined_loss, cross_entropy, gradcheck, total_loss, DualOutput, GradCheckConfig,
};
use glandseg::pipeline::{
    run_pipeline, save_dataset, synth_generate, LabeledImage, PipelineConfig, RunSummary,
    SynthSpec,
};
use glandseg::postproc::otsu_threshold;
use glandseg::stain::{optical_density_of, unmix, StainMatrix, DEFAULT_INCIDENT};
use glandseg::texture::lbp_invariant;
use glandseg::{BinaryMask, GrayImage, InstanceMask, ProbabilityMap, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn a1_stain_round_trip() -> Outcome {
    let m = StainMatrix::default();
    let inv = m.inverse().expect("default matrix is invertible");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let intensity = m.compose_intensity(c, DEFAULT_INCIDENT);
        let od = intensity.map(|i| optical_density_of(i, DEFAULT_INCIDENT));
        let back = unmix(&inv, od);
        for k in 0..3 {
            worst = worst.max((back[k] - c[k]).abs());
        }
    }
    outcome(worst < 1e-6, format!("1000 triples, max component error {worst:.3e}"))
}

fn sorted_codes(img: &GrayImage) -> Vec<u32> {
    let mut v = lbp_invariant(img, 8, 1.0).unwrap().interior_codes();
    v.sort_unstable();
    v
}

fn a2_lbp_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut failures = 0;
    for i in 0..50 {
        // coarse levels make equal-neighbour ties common
        let levels = if i % 2 == 0 { 256 } else { 6 };
        let data = (0..64 * 64)
            .map(|_| rng.gen_range(0..levels) as f64 / (levels - 1) as f64)
            .collect();
        let img = GrayImage::new(64, 64, data).unwrap();
        let base = sorted_codes(&img);
        for t in [Transform::Rot180, Transform::Rot90] {
            if sorted_codes(&img.transform(t)) != base {
                failures += 1;
            }
        }
    }
    outcome(failures == 0, format!("50 images x {{rot180, rot90}}, {failures} multiset mismatches"))
}

fn a3_gradient_check() -> Outcome {
    match gradcheck(&GradCheckConfig::default()) {
        Ok(report) => {
            let worst = report.worst().cloned();
            let max = report.max_rel_error();
            outcome(
                report.len() >= 100 && max < 1e-3,
                format!(
                    "{} parameters, max relative error {max:.3e} (worst: {})",
                    report.len(),
                    worst.map_or("-".into(), |w| format!("{}[{}]", w.name, w.index))
                ),
            )
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

fn a4_loss_identities() -> Outcome {
    let e2 = std::f64::consts::E.powi(2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let bits: Vec<bool> = (0..256).map(|_| rng.gen_bool(0.4)).collect();
        let target = BinaryMask::new(16, 16, bits).unwrap();
        let out = DualOutput {
            fine: ProbabilityMap::new(16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
            coarse: ProbabilityMap::new(4, 4, (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
        };
        let r = total_loss(&target, &out).unwrap();
        worst_sum = worst_sum.max((r.total - (2.0 * r.l1_coarse + r.l2_fine)).abs());
    }
    let g = vec![1.0; 64];
    let perfect = combined_loss(&g, &g).unwrap();
    let ce = cross_entropy(&g, &[0.5; 64]).unwrap();
    let ok = worst_sum <= 1e-9 && (perfect + e2).abs() <= 1e-6 && (ce - std::f64::consts::LN_2).abs() <= 1e-9;
    outcome(
        ok,
        format!(
            "|total - 2 L1 - L2| <= {worst_sum:.1e}, perfect loss {perfect:.9}, CE(1, 0.5) {ce:.12}"
        ),
    )
}

fn labeled(spec: &SynthSpec, n: usize, prefix: &str) -> Vec<LabeledImage> {
    synth_generate(spec, n)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, (image, mask))| LabeledImage {
            name: format!("{prefix}_{i:03}"),
            image,
            mask,
        })
        .collect()
}

const A5_EPOCHS: usize = 10;

/// 200 training and 100 test images of 64×64, toy configuration.
fn toy_run(root: &Path) -> glandseg::Result<RunSummary> {
    let train = labeled(&SynthSpec { seed: 101, ..SynthSpec::default() }, 200, "train");
    let test = labeled(&SynthSpec { seed: 202, ..SynthSpec::default() }, 100, "test");
    save_dataset(&train, &root.join("train"))?;
    save_dataset(&test, &root.join("test"))?;
    let mut cfg = PipelineConfig::toy();
    cfg.train.epochs = A5_EPOCHS;
    cfg.train.seed = 5;
    cfg.model.seed = 5;
    cfg.paths.train_dir = Some(root.join("train"));
    cfg.paths.test_dir = Some(root.join("test"));
    cfg.paths.output_dir = Some(root.join("out"));
    run_pipeline(&cfg)
}

fn a5_end_to_end(summary: &glandseg::Result<RunSummary>, elapsed: Duration) -> Outcome {
    match summary {
        Ok(s) => {
            let m = &s.mean;
            let ok = s.reports.len() == 100
                && m.object_dice > 0.8
                && m.f1 > 0.8
                && m.object_hausdorff < 10.0
                && elapsed < Duration::from_secs(20 * 60);
            outcome(
                ok,
                format!(
                    "{} test images, {A5_EPOCHS} epochs: object Dice {:.4}, F1 {:.4}, object Hausdorff {:.3} px",
                    s.reports.len(),
                    m.object_dice,
                    m.f1,
                    m.object_hausdorff
                ),
            )
        }
        Err(e) => outcome(false, format!("error: {e}")),
    }
}

// ---- brute-force metric oracles ----

fn objects(m: &InstanceMask) -> BTreeMap<u32, BTreeSet<(usize, usize)>> {
    let mut out: BTreeMap<u32, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            let l = m.get(x, y);
            if l != 0 {
                out.entry(l).or_default().insert((x, y));
            }
        }
    }
    out
}

type Obj = BTreeSet<(usize, usize)>;
type Objs = BTreeMap<u32, Obj>;

/// Max overlap; ties to the smaller object, then the lower label.
fn best_match(obj: &BTreeSet<(usize, usize)>, others: &Objs) -> Option<u32> {
    let mut best: Option<(usize, usize, u32)> = None;
    for (&l, o) in others {
        let ov = obj.intersection(o).count();
        if ov == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((bov, barea, _)) => ov > bov || (ov == bov && o.len() < barea),
        };
        if better {
            best = Some((ov, o.len(), l));
        }
    }
    best.map(|(_, _, l)| l)
}

fn brute_dice(a: &BTreeSet<(usize, usize)>, b: &BTreeSet<(usize, usize)>) -> f64 {
    2.0 * a.intersection(b).count() as f64 / (a.len() + b.len()) as f64
}

fn brute_hausdorff(a: &BTreeSet<(usize, usize)>, b: &BTreeSet<(usize, usize)>) -> f64 {
    let directed = |p: &BTreeSet<(usize, usize)>, q: &BTreeSet<(usize, usize)>| {
        p.iter()
            .map(|&(x, y)| {
                q.iter()
                    .map(|&(u, v)| ((x as f64 - u as f64).powi(2) + (y as f64 - v as f64).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

fn weighted_sum(
    side: &Objs,
    other: &Objs,
    score: &dyn Fn(&Obj, Option<&Obj>) -> f64,
) -> f64 {
    let total: usize = side.values().map(BTreeSet::len).sum();
    side.values()
        .map(|o| {
            let m = best_match(o, other).map(|l| &other[&l]);
            o.len() as f64 / total as f64 * score(o, m)
        })
        .sum()
}

fn oracle(pred: &InstanceMask, gt: &InstanceMask) -> (f64, f64, f64) {
    let (p, g) = (objects(pred), objects(gt));
    if p.is_empty() && g.is_empty() {
        return (1.0, 0.0, 1.0);
    }
    let diag = ((pred.width().pow(2) + pred.height().pow(2)) as f64).sqrt();
    let dice = |a: &BTreeSet<_>, b: Option<&BTreeSet<_>>| b.map_or(0.0, |b| brute_dice(a, b));
    let haus = |a: &BTreeSet<_>, b: Option<&BTreeSet<_>>| b.map_or(diag, |b| brute_hausdorff(a, b));
    let od = 0.5 * (weighted_sum(&p, &g, &dice) + weighted_sum(&g, &p, &dice));
    let oh = 0.5 * (weighted_sum(&p, &g, &haus) + weighted_sum(&g, &p, &haus));

    // detection: prediction i is a hit when it holds > half of its best GT
    // object; hits are granted in descending overlap while the GT is free
    let mut cands: Vec<(usize, u32, Option<u32>)> = p
        .iter()
        .map(|(&l, o)| {
            let m = best_match(o, &g);
            (m.map_or(0, |j| o.intersection(&g[&j]).count()), l, m)
        })
        .collect();
    cands.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut claimed = BTreeSet::new();
    let mut tp = 0usize;
    for (ov, _, m) in cands {
        if let Some(j) = m {
            if 2 * ov > g[&j].len() && claimed.insert(j) {
                tp += 1;
            }
        }
    }
    let precision = if p.is_empty() { 0.0 } else { tp as f64 / p.len() as f64 };
    let recall = if g.is_empty() { 0.0 } else { tp as f64 / g.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (od, oh, f1)
}

fn random_instances(rng: &mut ChaCha8Rng, w: usize, h: usize) -> InstanceMask {
    let max_label = rng.gen_range(0..=5u32);
    let labels = (0..w * h)
        .map(|_| if rng.gen_bool(0.45) { 0 } else { rng.gen_range(0..=max_label) })
        .collect();
    InstanceMask::new(w, h, labels).unwrap()
}

fn a6_metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (w, h) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let pred = random_instances(&mut rng, w, h);
        // half the pairs perturb the prediction to get realistic overlaps
        let gt = if rng.gen_bool(0.5) {
            random_instances(&mut rng, w, h)
        } else {
            let labels = pred
                .labels()
                .iter()
                .map(|&l| if rng.gen_bool(0.2) { rng.gen_range(0..=3) } else { l })
                .collect();
            InstanceMask::new(w, h, labels).unwrap()
        };
        let (od, oh, f1) = oracle(&pred, &gt);
        let pair = InstancePair::new(pred, gt).unwrap();
        worst = worst
            .max((object_dice(&pair) - od).abs())
            .max((object_hausdorff(&pair) - oh).abs())
            .max((detection_f1(&pair).f1 - f1).abs());
    }
    outcome(worst <= 1e-9, format!("1000 random pairs up to 8x8, max deviation {worst:.3e}"))
}

/// Exhaustive Otsu with exact rational comparisons of
/// `(s0 n - s n0)^2 / (n0 n1)`, proportional to the between-class variance.
fn otsu_oracle(p: &ProbabilityMap) -> f64 {
    let bins: Vec<u128> = p
        .data()
        .iter()
        .map(|&v| ((v * 256.0).floor() as u128).min(255))
        .collect();
    let n = bins.len() as u128;
    let s: u128 = bins.iter().sum();
    let mut best: Option<(usize, u128, u128)> = None;
    for k in 0..255usize {
        let n0 = bins.iter().filter(|&&b| b <= k as u128).count() as u128;
        let s0: u128 = bins.iter().filter(|&&b| b <= k as u128).sum();
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (s0 * n).abs_diff(s * n0);
        let (num, den) = (d * d, n0 * n1);
        if num == 0 {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    best.map_or(0.5, |(k, _, _)| (k + 1) as f64 / 256.0)
}

fn a7_otsu() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for i in 0..500 {
        let (w, h) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let data: Vec<f64> = match i % 3 {
            0 => (0..w * h).map(|_| rng.gen_range(0.0..=1.0)).collect(),
            1 => {
                // few distinct levels, including exact bin edges
                let levels: Vec<f64> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(0..=256) as f64 / 256.0).collect();
                (0..w * h).map(|_| levels[rng.gen_range(0..levels.len())]).collect()
            }
            _ => (0..w * h)
                .map(|_| {
                    let c: f64 = if rng.gen_bool(0.6) { 0.2 } else { 0.75 };
                    (c + rng.gen_range(-0.15..0.15)).clamp(0.0, 1.0)
                })
                .collect(),
        };
        let map = ProbabilityMap::new(w, h, data).unwrap();
        if otsu_threshold(&map) != otsu_oracle(&map) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("500 random maps, {mismatches} mismatches"))
}

fn a8_augmentation_count() -> Outcome {
    let recipe = AugmentationRecipe::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut total = 0;
    let mut per_image_ok = true;
    for _ in 0..85 {
        let data = (0..12 * 8 * 3).map(|_| rng.gen()).collect();
        let img = RgbImage::new(12, 8, data).unwrap();
        let mask = InstanceMask::new(12, 8, (0..96).map(|_| rng.gen_range(0..3)).collect()).unwrap();
        let n = augment(&img, &mask, &recipe).unwrap().len();
        per_image_ok &= n == 52;
        total += n;
    }
    outcome(
        per_image_ok && total == 4420 && recipe.variants_per_image() == 52,
        format!("52 variants per image, 85 images -> {total}"),
    )
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn a9_determinism(first: &Path, second: &Path) -> Outcome {
    let (a, b) = (read_tree(first), read_tree(second));
    let differing: Vec<&String> = a
        .keys()
        .chain(b.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    let has = |suffix: &str| a.keys().any(|k| k.ends_with(suffix));
    let complete = has("model.ckpt") && has("metrics.csv") && has("loss.csv") && has("_mask.png");
    outcome(
        differing.is_empty() && complete,
        format!("{} output files compared, {} differ", a.len(), differing.len()),
    )
}

fn report(id: &str, title: &str, o: &Outcome, t: Duration) -> bool {
    println!(
        "{id} {} {title}: {} [{:.2} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        t.as_secs_f64()
    );
    o.pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn main() {
    // libtest passes flags such as --nocapture or a name filter; this
    // harness always runs every criterion
    let mut all = true;
    let (o, t) = timed(a1_stain_round_trip);
    all &= report("A1", "stain round trip", &o, t);
    let (o, t) = timed(a2_lbp_invariance);
    all &= report("A2", "LBP rotation invariance", &o, t);
    let (o, t) = timed(a3_gradient_check);
    all &= report("A3", "gradient check", &o, t);
    let (o, t) = timed(a4_loss_identities);
    all &= report("A4", "loss identities", &o, t);

    let tmp = tempfile::tempdir().expect("temp dir");
    let (first, second) = (tmp.path().join("run1"), tmp.path().join("run2"));
    let (summary, t5) = timed(|| toy_run(&first));
    all &= report("A5", "end-to-end toy run", &a5_end_to_end(&summary, t5), t5);

    let (o, t) = timed(a6_metrics_oracle);
    all &= report("A6", "metrics oracle equivalence", &o, t);
    let (o, t) = timed(a7_otsu);
    all &= report("A7", "Otsu exactness", &o, t);
    let (o, t) = timed(a8_augmentation_count);
    all &= report("A8", "augmentation count", &o, t);

    let (o, t) = timed(|| match toy_run(&second) {
        Ok(_) => a9_determinism(&first, &second),
        Err(e) => outcome(false, format!("second run failed: {e}")),
    });
    all &= report("A9", "determinism", &o, t);

    if !all {
        std::process::exit(1);
    }
}
