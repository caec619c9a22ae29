use super::*;
use crate::autodiff::{Graph, Tensor};
use crate::imaging::{CHANNEL_HEMATOXYLIN, CHANNEL_LBP, CHANNEL_RED};
use crate::{BinaryMask, GrayImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{E, LN_2};

fn stack(size: usize, seed: u64) -> FeatureStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = FeatureStack::new(size, size);
    for name in [CHANNEL_RED, CHANNEL_HEMATOXYLIN, CHANNEL_LBP] {
        let d = (0..size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        s.push(name, GrayImage::new(size, size, d).unwrap()).unwrap();
    }
    s
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        encoder_widths: vec![4, 8, 8],
        ..ModelConfig::default()
    }
}

/// Layer-by-layer count written out independently of the layer table.
fn expected_params(cin: usize, widths: &[usize], lbp: bool, stage: usize) -> usize {
    let conv = |i: usize, o: usize, k: usize| i * o * k * k;
    let bn = |c: usize| 2 * c;
    let w0 = widths[0];
    let mut total = conv(cin, w0, 3) + bn(w0);
    let mut prev = w0;
    for &w in widths {
        total += conv(prev, w, 3) + bn(w) + conv(w, w, 3) + bn(w);
        if prev != w {
            total += conv(prev, w, 1) + bn(w);
        }
        prev = w;
    }
    for j in (0..widths.len()).rev() {
        let cin = widths[j];
        let cout = if j == 0 { w0 } else { widths[j - 1] };
        let mid = (cin / 4).max(1);
        total += conv(cin, mid, 1) + bn(mid) + conv(mid, mid, 3) + bn(mid) + conv(mid, cout, 1) + bn(cout);
    }
    // the coarse head reads the decoder output at its stage
    total += conv(widths[stage - 1], 1, 1) + 1;
    total += conv(w0 + usize::from(lbp), w0, 3) + w0;
    total += conv(w0, 1, 1) + 1;
    total
}

#[test]
fn default_parameter_count_matches_hand_count() {
    let net = LinkNet::new(ModelConfig::default()).unwrap();
    assert_eq!(expected_params(2, &[16, 32, 64, 128], true, 2), 330_834);
    assert_eq!(net.param_count(), 330_834);
    let rows = describe(net.config(), 64, 64).unwrap();
    assert_eq!(rows.iter().map(LayerRow::param_count).sum::<usize>(), 330_834);
    let table = format_layer_table(&rows);
    assert!(table.ends_with("total parameters: 330834\n"));

    for (widths, lbp, stage) in [(vec![4, 6, 8], true, 1), (vec![8], false, 1), (vec![3, 3, 5, 7, 9], true, 4), (vec![4, 6, 8], false, 3)] {
        let cfg = ModelConfig {
            encoder_widths: widths.clone(),
            lbp_injection: lbp,
            coarse_head_stage: stage,
            ..ModelConfig::default()
        };
        assert_eq!(LinkNet::new(cfg).unwrap().param_count(), expected_params(2, &widths, lbp, stage));
    }
}

#[test]
fn output_shapes_for_default_config() {
    let net = LinkNet::new(ModelConfig::default()).unwrap();
    let out = net.predict(&stack(64, 1)).unwrap();
    assert_eq!((out.fine.width(), out.fine.height()), (64, 64));
    assert_eq!((out.coarse.width(), out.coarse.height()), (16, 16));
    assert!(out.fine.data().iter().chain(out.coarse.data()).all(|p| (0.0..=1.0).contains(p)));
    let rows = describe(net.config(), 64, 64).unwrap();
    assert_eq!(rows.iter().find(|r| r.name == "coarse").unwrap().output, (1, 16, 16));
    assert_eq!(rows.last().unwrap().output, (1, 64, 64));
}

#[test]
fn indivisible_input_is_rejected() {
    let net = LinkNet::new(small_cfg()).unwrap();
    assert!(matches!(net.predict(&stack(20, 0)), Err(Error::Indivisible { divisor: 8, .. })));
    assert!(describe(net.config(), 20, 16).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        ModelConfig { encoder_widths: vec![], ..ModelConfig::default() },
        ModelConfig { encoder_widths: vec![4, 0], ..ModelConfig::default() },
        ModelConfig { coarse_head_stage: 0, ..ModelConfig::default() },
        ModelConfig { coarse_head_stage: 5, ..ModelConfig::default() },
        ModelConfig { input_channels: 0, ..ModelConfig::default() },
    ] {
        assert!(matches!(LinkNet::new(cfg), Err(Error::Config(_))));
    }
    let cfg = ModelConfig { input_channels: 3, ..small_cfg() };
    let net = LinkNet::new(cfg).unwrap();
    assert!(net.predict(&stack(16, 0)).is_err());
}

#[test]
fn lbp_switch_only_touches_fine_head() {
    let on = LinkNet::new(small_cfg()).unwrap();
    let off = LinkNet::new(ModelConfig { lbp_injection: false, ..small_cfg() }).unwrap();
    let s = stack(16, 3);
    let (x, lbp) = batch_inputs(on.config(), &[&s]).unwrap();
    let mut g1 = Graph::new();
    let f1 = on.forward(&mut g1, &x, lbp.as_ref(), Mode::Eval).unwrap();
    let mut g2 = Graph::new();
    let f2 = off.forward(&mut g2, &x, None, Mode::Eval).unwrap();
    assert_eq!(f1.fine_in_channels, f2.fine_in_channels + 1);
    assert_eq!(g1.value(f1.coarse), g2.value(f2.coarse));
    for name in on.params().names().filter(|n| !n.starts_with("fine.")) {
        assert_eq!(on.params().get(name).unwrap(), off.params().get(name).unwrap(), "{name}");
    }
    assert_eq!(on.params().get("fine.conv.w").unwrap().shape(), &[4, 5, 3, 3]);
    assert_eq!(off.params().get("fine.conv.w").unwrap().shape(), &[4, 4, 3, 3]);
    // the LBP channel is required when injection is on
    let mut g = Graph::new();
    assert!(on.forward(&mut g, &x, None, Mode::Eval).is_err());
}

#[test]
fn eval_mode_is_batch_independent() {
    let net = LinkNet::new(small_cfg()).unwrap();
    let s = stack(16, 5);
    let outs = net.predict_batch(&[&s, &s]).unwrap();
    for (a, b) in outs[0].fine.data().iter().zip(outs[1].fine.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let single = net.predict(&s).unwrap();
    assert_eq!(single, outs[0]);
}

#[test]
fn checkpoint_round_trip_rebuilds_model() {
    let net = LinkNet::new(small_cfg()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    net.save(&path).unwrap();
    let back = LinkNet::load(&path).unwrap();
    assert_eq!(back.config(), net.config());
    let mut q = net.params().clone();
    q.quantize();
    assert_eq!(back.params(), &q);

    let mut broken = net.params().clone();
    broken.insert("stem.conv.w", crate::autodiff::Kind::Param, Tensor::zeros(&[1]));
    assert!(LinkNet::from_params(broken).is_err());
}

#[test]
fn loss_examples() {
    let ones = vec![1.0; 16];
    let zeros = vec![0.0; 16];
    let half = vec![0.5; 16];
    assert!(cross_entropy(&ones, &ones).unwrap() < 1e-6);
    assert!((cross_entropy(&ones, &half).unwrap() - LN_2).abs() < 1e-12);
    assert!((cross_entropy(&zeros, &half).unwrap() - LN_2).abs() < 1e-12);
    assert!((soft_dice(&ones, &ones, DICE_SMOOTHING).unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(soft_dice(&zeros, &zeros, DICE_SMOOTHING).unwrap(), 1.0);
    let g: Vec<f64> = (0..16).map(|i| f64::from(u8::from(i < 8))).collect();
    let p: Vec<f64> = g.iter().map(|v| v / 2.0).collect();
    assert!((soft_dice(&g, &p, DICE_SMOOTHING).unwrap() - 2.0 / 3.0).abs() < 1e-6);
    assert!((combined_loss(&ones, &ones).unwrap() + E * E).abs() < 1e-6);
    assert!(cross_entropy(&ones, &half[..3]).is_err());
    assert!(soft_dice(&[], &[], 1.0).is_err());
    // a huge background dominates the Dice denominator so D is close to 0
    let mut g = vec![0.0; 100_000];
    g[0] = 1.0;
    let p = vec![0.5; 100_000];
    let l = combined_loss(&g, &p).unwrap();
    assert!((l - (LN_2 - E)).abs() < 1e-4, "{l}");
}

#[test]
fn combined_loss_decreases_with_dice_at_fixed_ce() {
    // swapping which pixels are right keeps CE but changes Dice
    let g = vec![1.0, 1.0, 0.0, 0.0];
    let p1 = vec![0.9, 0.9, 0.2, 0.2];
    let p2 = vec![0.8, 0.8, 0.1, 0.1];
    let (c1, c2) = (cross_entropy(&g, &p1).unwrap(), cross_entropy(&g, &p2).unwrap());
    let (d1, d2) = (soft_dice(&g, &p1, DICE_SMOOTHING).unwrap(), soft_dice(&g, &p2, DICE_SMOOTHING).unwrap());
    assert!((c1 - c2).abs() < 1e-12);
    assert!(d1 != d2);
    let (l1, l2) = (combined_loss(&g, &p1).unwrap(), combined_loss(&g, &p2).unwrap());
    assert_eq!(d1 > d2, l1 < l2);
    assert!(l1 >= c1 - E * E && l2 >= c2 - E * E);
}

fn disc_target(size: usize, r: f64) -> BinaryMask {
    let c = size as f64 / 2.0;
    let bits = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            (x - c).powi(2) + (y - c).powi(2) < r * r
        })
        .collect();
    BinaryMask::new(size, size, bits).unwrap()
}

#[test]
fn total_loss_report_identities() {
    let t = disc_target(16, 5.0);
    let perfect = DualOutput {
        fine: ProbabilityMap::new(16, 16, t.bits().iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap(),
        coarse: {
            let small = downsample_target(&t, 4).unwrap();
            ProbabilityMap::new(4, 4, small.bits().iter().map(|&b| f64::from(u8::from(b))).collect()).unwrap()
        },
    };
    let r = total_loss(&t, &perfect).unwrap();
    assert!((r.total + 3.0 * E * E).abs() < 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let out = DualOutput {
            fine: ProbabilityMap::new(16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
            coarse: ProbabilityMap::new(4, 4, (0..16).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap(),
        };
        let r = total_loss(&t, &out).unwrap();
        assert!((r.total - (2.0 * r.l1_coarse + r.l2_fine)).abs() < 1e-9);
    }
    assert!(total_loss(&disc_target(8, 2.0), &perfect).is_err());
}

#[test]
fn graph_loss_matches_plain_functions() {
    let net = LinkNet::new(small_cfg()).unwrap();
    let s = stack(16, 9);
    let t = disc_target(16, 5.0);
    let sample = Sample { stack: s.clone(), target: t.clone() };
    let out = net.predict(&s).unwrap();
    let plain = total_loss(&t, &out).unwrap();
    let graph = validation_loss(&net, &[sample], 1).unwrap();
    assert!((plain.total - graph).abs() < 1e-12, "{} vs {graph}", plain.total);
}

#[test]
fn downsample_target_picks_cell_centres() {
    let m = BinaryMask::new(4, 2, vec![false, false, true, false, false, true, false, false]).unwrap();
    let d = downsample_target(&m, 2).unwrap();
    assert_eq!(d.bits(), &[true, false]);
    assert!(downsample_target(&m, 3).is_err());
}

fn toy_samples(n: usize, size: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let t = disc_target(size, size as f64 / 4.0 + i as f64);
            let mut s = FeatureStack::new(size, size);
            let signal: Vec<f64> = t.bits().iter().map(|&b| if b { 0.8 } else { 0.2 }).collect();
            s.push(CHANNEL_RED, GrayImage::new(size, size, signal.iter().map(|v| 1.0 - v).collect()).unwrap()).unwrap();
            s.push(CHANNEL_HEMATOXYLIN, GrayImage::new(size, size, signal).unwrap()).unwrap();
            s.push(CHANNEL_LBP, GrayImage::new(size, size, vec![0.5; size * size]).unwrap()).unwrap();
            Sample { stack: s, target: t }
        })
        .collect()
}

#[test]
fn zero_epochs_returns_initial_model() {
    let net = LinkNet::new(small_cfg()).unwrap();
    let tc = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let out = train(net.clone(), &toy_samples(2, 16), &[], &tc).unwrap();
    assert_eq!(out.best, net);
    assert_eq!(out.best_epoch, 0);
    assert!(out.history.is_empty());
    assert!(train(net, &[], &[], &tc).is_err());
}

#[test]
fn single_sample_is_memorized() {
    let net = LinkNet::new(small_cfg()).unwrap();
    let data = toy_samples(1, 16);
    let tc = TrainConfig { epochs: 50, batch_size: 1, lr: 1e-2, ..TrainConfig::default() };
    let out = train(net, &data, &[], &tc).unwrap();
    let totals: Vec<f64> = out.history.iter().map(|r| r.train.total).collect();
    for w in totals[..10].windows(2) {
        assert!(w[1] < w[0], "{totals:?}");
    }
    assert!(out.history.last().unwrap().train.dice_fine > 0.95, "{:?}", out.history.last());
    let csv = loss_csv(&out.history);
    assert!(csv.starts_with("epoch,l1,l2,total,val_total\n1,"));
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn training_is_deterministic_and_tracks_validation() {
    let data = toy_samples(4, 16);
    let tc = TrainConfig { epochs: 3, batch_size: 3, lr: 5e-3, seed: 11, ..TrainConfig::default() };
    let a = train(LinkNet::new(small_cfg()).unwrap(), &data[..3], &data[3..], &tc).unwrap();
    let b = train(LinkNet::new(small_cfg()).unwrap(), &data[..3], &data[3..], &tc).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.best.params().to_bytes(), b.best.params().to_bytes());
    let best = a.history.iter().map(|r| r.val_total.unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(a.history[a.best_epoch - 1].val_total, Some(best));
    // running statistics moved away from their initial values
    assert_ne!(a.last.params().get("stem.bn.running_var").unwrap().data(), &[1.0; 4]);
}

#[test]
fn full_model_gradient_check() {
    let report = gradcheck(&GradCheckConfig::default()).unwrap();
    assert!(report.len() >= 100);
    assert!(report.max_rel_error() < 1e-3, "{:?}", report.worst());
}
