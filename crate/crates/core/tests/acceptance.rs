//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N … PASS/FAIL` line before asserting. Tests share a global
//! lock so wall-clock measurements are not distorted by concurrent work.

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rare_unet::data::{
    self, generate_phantom, upsample_image, LabelVolume, PhantomSpec, Sample,
};
use rare_unet::eval::{self, EvalProtocol};
use rare_unet::losses::{
    consistency_loss, cross_entropy, dice_score, seg_loss, soft_dice_loss, total_loss,
    LossWeights,
};
use rare_unet::model::{flop_count, Model, ModelConfig, NormKind};
use rare_unet::ops::{self, ConvSpec, NormMode};
use rare_unet::optim::AdamWConfig;
use rare_unet::routing::{select_entry_depth, PrepareMode};
use rare_unet::suites;
use rare_unet::trainer::{self, load_checkpoint, TrainHyper, TrainMode};
use rare_unet::Tensor;

fn lock() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    LOCK.get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, what: &str, pass: bool, detail: &str) -> bool {
    println!(
        "criterion {n} ({what}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    pass
}

/// Deterministic phantom corpus: `count` volumes from consecutive seeds,
/// split 80/20 into train and held-out tests.
fn corpus(count: u64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let spec = PhantomSpec::hippocampus_like();
    let seeds: Vec<u64> = (seed..seed + count).collect();
    let (train, test) = data::split_dataset(&seeds, 0.8, seed).unwrap();
    let gen = |ss: &[u64]| -> Vec<Sample> {
        ss.iter().map(|&s| generate_phantom(s, &spec).unwrap()).collect()
    };
    (gen(&train), gen(&test))
}

// ---------------------------------------------------------------------------
// 1. gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let _g = lock();
    let t0 = Instant::now();
    let reports = suites::run_scope("all").unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|(_, pass, _)| !pass)
        .map(|(n, _, _)| n.as_str())
        .collect();
    let pass = failed.is_empty() && secs < 120.0;
    let ok = verdict(
        1,
        "gradient suite",
        pass,
        &format!("{} suites, {} failures, {:.1}s (< 120s)", reports.len(), failed.len(), secs),
    );
    assert!(ok, "failing suites: {failed:?}, runtime {secs:.1}s");
}

// ---------------------------------------------------------------------------
// 2. oracle equivalence
// ---------------------------------------------------------------------------

fn conv_oracle(x: &[f32], xs: [usize; 5], w: &[f32], b: &[f32], spec: &ConvSpec) -> Vec<f32> {
    let [n_b, cin, d, h, wd] = xs;
    let (od, oh, ow) = (
        spec.out_extent(0, d).unwrap(),
        spec.out_extent(1, h).unwrap(),
        spec.out_extent(2, wd).unwrap(),
    );
    let mut y = vec![0.0f32; n_b * spec.out_channels * od * oh * ow];
    let mut yi = 0usize;
    for n in 0..n_b {
        for co in 0..spec.out_channels {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co] as f64;
                        for ci in 0..cin {
                            for kz in 0..spec.kernel[0] {
                                for ky in 0..spec.kernel[1] {
                                    for kx in 0..spec.kernel[2] {
                                        let iz = (oz * spec.stride[0] + kz) as isize
                                            - spec.pad[0] as isize;
                                        let iy = (oy * spec.stride[1] + ky) as isize
                                            - spec.pad[1] as isize;
                                        let ix = (ox * spec.stride[2] + kx) as isize
                                            - spec.pad[2] as isize;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= d as isize
                                            || iy >= h as isize
                                            || ix >= wd as isize
                                        {
                                            continue;
                                        }
                                        let xv = x[(((n * cin + ci) * d + iz as usize) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize];
                                        let wv = w[(((co * cin + ci) * spec.kernel[0] + kz)
                                            * spec.kernel[1]
                                            + ky)
                                            * spec.kernel[2]
                                            + kx];
                                        acc += (xv * wv) as f64;
                                    }
                                }
                            }
                        }
                        y[yi] = acc as f32;
                        yi += 1;
                    }
                }
            }
        }
    }
    y
}

/// Independent trilinear oracle: per-output-voxel weight accumulation over
/// all eight corner samples under cell-center alignment.
fn trilinear_oracle(v: &[f32], c: usize, s: [usize; 3], t: [usize; 3]) -> Vec<f32> {
    let corners = |o: usize, oe: usize, ie: usize| -> [(usize, f64); 2] {
        let pos = (o as f64 + 0.5) * (ie as f64 / oe as f64) - 0.5;
        // clamp-to-edge: the fraction is taken relative to the clamped
        // lower sample, so out-of-range positions collapse onto the border
        let i0 = pos.floor().max(0.0) as usize;
        let i1 = (i0 + 1).min(ie - 1);
        let frac = (pos - i0 as f64).clamp(0.0, 1.0);
        [(i0, 1.0 - frac), (i1, frac)]
    };
    let mut out = vec![0.0f32; c * t[0] * t[1] * t[2]];
    let mut oi = 0usize;
    for ch in 0..c {
        for oz in 0..t[0] {
            for oy in 0..t[1] {
                for ox in 0..t[2] {
                    let mut acc = 0.0f64;
                    for (iz, wz) in corners(oz, t[0], s[0]) {
                        for (iy, wy) in corners(oy, t[1], s[1]) {
                            for (ix, wx) in corners(ox, t[2], s[2]) {
                                acc += wz
                                    * wy
                                    * wx
                                    * v[((ch * s[0] + iz) * s[1] + iy) * s[2] + ix] as f64;
                            }
                        }
                    }
                    out[oi] = acc as f32;
                    oi += 1;
                }
            }
        }
    }
    out
}

#[test]
fn criterion_2_oracle_equivalence() {
    let _g = lock();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);

    // conv3d vs the nested-loop oracle on 20 seeded shapes
    let mut conv_worst = 0.0f32;
    for _ in 0..20 {
        let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let k = rng.gen_range(1..=3usize);
        let stride = rng.gen_range(1..=2usize);
        let pad = rng.gen_range(0..=1usize).min(k - 1);
        let ext = |r: &mut ChaCha8Rng| r.gen_range(k.max(2)..=7usize);
        let (d, h, w) = (ext(&mut rng), ext(&mut rng), ext(&mut rng));
        let spec = ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: [k; 3],
            stride: [stride; 3],
            pad: [pad; 3],
        };
        let xs = [n, cin, d, h, w];
        let xn: usize = xs.iter().product();
        let xv: Vec<f32> = (0..xn).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wn = cout * cin * k * k * k;
        let wv: Vec<f32> = (0..wn).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f32> = (0..cout).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let x = Tensor::from_vec(xv.clone(), &xs).unwrap();
        let wt = Tensor::from_vec(wv.clone(), &spec.weight_shape()).unwrap();
        let bt = Tensor::from_vec(bv.clone(), &[cout]).unwrap();
        let y = ops::conv3d(&x, &wt, Some(&bt), &spec).unwrap();
        let oracle = conv_oracle(&xv, xs, &wv, &bv, &spec);
        for (a, b) in y.to_vec().iter().zip(&oracle) {
            conv_worst = conv_worst.max((a - b).abs());
        }
    }
    let conv_ok = conv_worst <= 1e-5;

    // hard DSC vs brute-force voxel counting, exact
    let mut dsc_ok = true;
    for _ in 0..10 {
        let n = 4 * 5 * 6;
        let p: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3u8)).collect();
        let g: Vec<u8> = (0..n).map(|_| rng.gen_range(0..3u8)).collect();
        let pv = LabelVolume::new(vec![4, 5, 6], p.clone()).unwrap();
        let gv = LabelVolume::new(vec![4, 5, 6], g.clone()).unwrap();
        let got = dice_score(&pv, &gv, 3).unwrap();
        for cls in 1..3u8 {
            let inter = p.iter().zip(&g).filter(|(a, b)| **a == cls && **b == cls).count();
            let denom = p.iter().filter(|&&v| v == cls).count()
                + g.iter().filter(|&&v| v == cls).count();
            let want =
                if denom == 0 { 1.0 } else { 2.0 * inter as f32 / denom as f32 };
            if got[cls as usize - 1] != want {
                dsc_ok = false;
            }
        }
    }

    // trilinear / nearest resampling vs direct-weight oracles
    let mut tri_worst = 0.0f32;
    for &(s, t) in &[([4usize, 6, 4], [8usize, 12, 8]), ([8, 8, 8], [5, 7, 3])] {
        let c = 2usize;
        let v: Vec<f32> =
            (0..c * s[0] * s[1] * s[2]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = upsample_image(&v, c, s, t).unwrap();
        let want = trilinear_oracle(&v, c, s, t);
        for (a, b) in got.iter().zip(&want) {
            tri_worst = tri_worst.max((a - b).abs());
        }
    }
    let mut near_ok = true;
    for factor in [2usize, 4] {
        let shape = [8usize, 8, 8];
        let labels: Vec<u8> = (0..512).map(|_| rng.gen_range(0..4u8)).collect();
        let lv = LabelVolume::new(shape.to_vec(), labels.clone()).unwrap();
        let got = data::downsample_labels(&lv, factor).unwrap();
        let oe = 8 / factor;
        for oz in 0..oe {
            for oy in 0..oe {
                for ox in 0..oe {
                    // nearest sample under cell-center alignment:
                    // floor((o + 0.5) * factor)
                    let src = |o: usize| ((o as f64 + 0.5) * factor as f64).floor() as usize;
                    let want = labels[(src(oz) * 8 + src(oy)) * 8 + src(ox)];
                    if got.data[(oz * oe + oy) * oe + ox] != want {
                        near_ok = false;
                    }
                }
            }
        }
    }
    let tri_ok = tri_worst <= 1e-6;

    let pass = conv_ok && dsc_ok && tri_ok && near_ok;
    let ok = verdict(
        2,
        "oracle equivalence",
        pass,
        &format!(
            "conv worst abs {conv_worst:.2e} (<=1e-5), DSC exact: {dsc_ok}, \
             trilinear worst abs {tri_worst:.2e} (<=1e-6), nearest exact: {near_ok}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 3. architecture shape / pruning contract
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_shapes_and_pruning() {
    let _g = lock();
    let cfg = ModelConfig {
        depth: 4,
        base_channels: 8,
        num_classes: 3,
        in_channels: 1,
        full_shape: [32, 64, 32],
        norm: NormKind::Instance,
        msb_enabled: true,
    };
    let model = Model::build(&cfg, 5).unwrap();
    let mut shapes_ok = true;
    let mut prune_ok = true;
    let mut detail = String::new();

    for d in 0..4usize {
        let s = cfg.shape_at(d);
        let x = Tensor::full(&[1, 1, s[0], s[1], s[2]], 0.25);
        model.reset_touches();
        let logits = if d == 0 {
            model.forward_full(&x, NormMode::Eval).unwrap().logits
        } else {
            model.forward_scale(&x, d, NormMode::Eval).unwrap().logits
        };
        if logits.shape() != vec![1, 3, s[0], s[1], s[2]] {
            shapes_ok = false;
        }
        let touched = model.touches();
        for k in 0..4usize {
            let shallow = k < d
                && (touched.contains(&format!("enc{k}"))
                    || touched.contains(&format!("dec{k}"))
                    || touched.contains(&format!("up{k}")));
            let foreign_head = k != d && touched.contains(&format!("head{k}"));
            if shallow || foreign_head {
                prune_ok = false;
                detail.push_str(&format!(" d={d} touched foreign {k};"));
            }
        }
    }
    let pass = shapes_ok && prune_ok;
    let ok = verdict(
        3,
        "shape/pruning contract",
        pass,
        &format!("logits at full/2^d for d=0..3: {shapes_ok}; pruning: {prune_ok}{detail}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 4. consistency-loss semantics and hand-combined total
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_consistency_semantics() {
    let _g = lock();
    let cfg = ModelConfig {
        depth: 3,
        base_channels: 2,
        num_classes: 3,
        in_channels: 1,
        full_shape: [8, 8, 8],
        norm: NormKind::Instance,
        msb_enabled: true,
    };
    let model = Model::build(&cfg, 9).unwrap();
    let x = Tensor::full(&[1, 1, 8, 8, 8], 0.3);
    let full = model.forward_full(&x, NormMode::Train).unwrap();
    let xd = Tensor::from_vec(
        data::downsample_image(&x.to_vec(), 1, [8, 8, 8], 2).unwrap(),
        &[1, 1, 4, 4, 4],
    )
    .unwrap();
    let scale = model.forward_scale(&xd, 1, NormMode::Train).unwrap();

    let target = full.enc_feats[0].detach();
    let con = consistency_loss(&scale.f_msb, &target).unwrap();
    con.backward().unwrap();
    let groups = model.named_param_groups();
    let grad_on = |name: &str| -> bool {
        groups
            .iter()
            .filter(|(n, _)| n == name)
            .flat_map(|(_, ps)| ps)
            .any(|p| p.grad().map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false))
    };
    let msb_grad = grad_on("msb1");
    let enc_grad = grad_on("enc0") || grad_on("enc1");
    // gradient must flow into the MSB branch and must not reach the encoder
    let semantics_ok = msb_grad && !enc_grad;

    // hand-combined α/λ total on real losses
    let w = LossWeights::default(); // alpha 0.5, lambda 1.0
    let labels = LabelVolume::new(
        vec![1, 8, 8, 8],
        (0..512u32).map(|i| (i % 3) as u8).collect(),
    )
    .unwrap();
    let labels_d = LabelVolume::new(
        vec![1, 4, 4, 4],
        (0..64u32).map(|i| (i % 3) as u8).collect(),
    )
    .unwrap();
    let seg0 = seg_loss(&full.logits, &labels, &w).unwrap();
    let seg1 = seg_loss(&scale.logits, &labels_d, &w).unwrap();
    let ce = cross_entropy(&full.logits, &labels).unwrap().item();
    let dice = soft_dice_loss(&full.logits, &labels, w.dice_epsilon).unwrap().item();
    let alpha_err = (seg0.item() - (0.5 * ce + 0.5 * dice)).abs();
    let total = total_loss(&[seg0.clone(), seg1.clone()], &[con.clone()], &w).unwrap();
    let hand = 0.5 * (seg0.item() + seg1.item()) + 1.0 * con.item();
    let total_err = (total.item() - hand).abs();
    let combo_ok = alpha_err <= 1e-6 && total_err <= 1e-6;

    let pass = semantics_ok && combo_ok;
    let ok = verdict(
        4,
        "consistency-loss semantics",
        pass,
        &format!(
            "grad on MSB: {msb_grad}, grad on encoder: {enc_grad}; \
             alpha combo err {alpha_err:.2e}, total err {total_err:.2e} (<=1e-6)"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 5. desk-scale training reproduction
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_training_reproduction() {
    let _g = lock();
    let (train_set, test_set) = corpus(64, 42);
    let dir = tempfile::tempdir().unwrap();

    let cfg = ModelConfig {
        depth: 4,
        base_channels: 8,
        num_classes: 3,
        in_channels: 1,
        full_shape: [32, 64, 32],
        norm: NormKind::Instance,
        msb_enabled: true,
    };
    let hyper = TrainHyper {
        optimizer: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() },
        epochs: 5,
        mode: TrainMode::Rare,
        seed: 7,
        ..TrainHyper::default()
    };
    let t0 = Instant::now();
    let model = Model::build(&cfg, 11).unwrap();
    let rare_dir = dir.path().join("rare");
    let report = trainer::train(&model, &hyper, &train_set, &rare_dir).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();
    let budget_ok = train_secs <= 20.0 * 60.0 && report.epochs_run <= 30;

    let best = load_checkpoint(&rare_dir.join("best.ckpt"), None).unwrap();
    let rare_eval =
        eval::evaluate(&best.model, &test_set, &[1, 2, 4, 8], EvalProtocol::Routed, "rare")
            .unwrap();
    let means: Vec<f32> = rare_eval.per_scale.iter().map(|m| m.mean as f32).collect();
    let full_dsc = means[0];
    let spread = means.iter().cloned().fold(f32::MIN, f32::max)
        - means.iter().cloned().fold(f32::MAX, f32::min);
    let rare_eighth = means[3];

    // plain UNet baseline with Pad handling, same backbone seed
    let unet_cfg = ModelConfig { msb_enabled: false, ..cfg };
    let unet_hyper = TrainHyper {
        optimizer: AdamWConfig { lr: 3e-3, ..AdamWConfig::default() },
        epochs: 3,
        mode: TrainMode::Unet,
        seed: 7,
        ..TrainHyper::default()
    };
    let unet = Model::build(&unet_cfg, 11).unwrap();
    let unet_dir = dir.path().join("unet");
    trainer::train(&unet, &unet_hyper, &train_set, &unet_dir).unwrap();
    let unet_best = load_checkpoint(&unet_dir.join("best.ckpt"), None).unwrap();
    let unet_eval = eval::evaluate(
        &unet_best.model,
        &test_set,
        &[8],
        EvalProtocol::Restored(PrepareMode::Pad),
        "unet-pad",
    )
    .unwrap();
    let unet_eighth = unet_eval.per_scale[0].mean as f32;

    let pass = budget_ok
        && full_dsc >= 0.85
        && spread <= 0.15
        && rare_eighth >= 0.5
        && unet_eighth <= 0.2;
    let ok = verdict(
        5,
        "desk-scale training reproduction",
        pass,
        &format!(
            "{} epochs in {:.0}s (<=1200s); full-res DSC {:.3} (>=0.85), spread {:.3} (<=0.15), \
             1/8: rare {:.3} (>=0.5) vs unet-pad {:.3} (<=0.2)",
            report.epochs_run, train_secs, full_dsc, spread, rare_eighth, unet_eighth
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 6. efficiency: analytic MAC ratio and measured speedup
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_efficiency() {
    let _g = lock();
    let cfg = ModelConfig::default();
    let ratio =
        flop_count(&cfg, 1, 1).unwrap() as f64 / flop_count(&cfg, 0, 1).unwrap() as f64;
    let ratio_ok = ratio <= 0.35;

    let model = Model::build(&cfg, 3).unwrap();
    let rows = eval::bench(&model, &[1, 2], 10, 99).unwrap();
    let speedup = rows[1].speedup;
    let speed_ok = speedup >= 2.0;

    let pass = ratio_ok && speed_ok;
    let ok = verdict(
        6,
        "efficiency",
        pass,
        &format!(
            "analytic MAC ratio(entry 1 / entry 0) = {ratio:.3} (<=0.35: {ratio_ok}); \
             measured 1/2-scale forward speedup {speedup:.2}x over 10 runs (>=2.0: {speed_ok})"
        ),
    );
    assert!(
        ok,
        "MAC ratio {ratio:.3} vs 0.35, speedup {speedup:.2} vs 2.0 — the ratio bound \
         is unattainable under a channel-doubling schedule (depth-1 work is ~4x per voxel \
         at 1/8 the voxels for every shared level); the assertion is kept as written"
    );
}

// ---------------------------------------------------------------------------
// 7. routing table
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_routing_table() {
    let _g = lock();
    let full = [32usize, 64, 32];
    let cases: [([usize; 3], usize); 14] = [
        // exact levels
        ([32, 64, 32], 0),
        ([16, 32, 16], 1),
        ([8, 16, 8], 2),
        ([4, 8, 4], 3),
        // near-levels
        ([30, 60, 30], 0),
        ([20, 40, 20], 1),
        ([14, 30, 14], 1),
        ([9, 18, 9], 2),
        ([5, 10, 5], 3),
        // half-way and tie handling (round toward finer resolution)
        ([23, 45, 23], 0),
        ([12, 23, 12], 1),
        // clamped extremes
        ([1, 2, 1], 3),
        ([64, 128, 64], 0),
        ([256, 512, 256], 0),
    ];
    let mut failures = Vec::new();
    for (input, want) in cases {
        let got = select_entry_depth(input, full, 3).unwrap().entry_depth;
        if got != want {
            failures.push(format!("{input:?} -> {got} (want {want})"));
        }
    }
    let pass = failures.is_empty();
    let ok = verdict(
        7,
        "routing table",
        pass,
        &format!("{} fixed cases, {} failures {failures:?}", cases.len(), failures.len()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 8. determinism & persistence
// ---------------------------------------------------------------------------

/// Drop the trailing wall-clock column, the only time-dependent field.
fn strip_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head).unwrap_or(l))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn criterion_8_determinism_persistence() {
    let _g = lock();
    let (train_set, _) = corpus(8, 100);
    let cfg = ModelConfig {
        depth: 3,
        base_channels: 2,
        num_classes: 3,
        in_channels: 1,
        full_shape: [32, 64, 32],
        norm: NormKind::Instance,
        msb_enabled: true,
    };
    let hyper = TrainHyper { epochs: 1, seed: 21, ..TrainHyper::default() };
    let dir = tempfile::tempdir().unwrap();

    let mut csvs = Vec::new();
    for run in 0..2 {
        let model = Model::build(&cfg, 13).unwrap();
        let report = trainer::train(&model, &hyper, &train_set, &dir.path().join(format!("r{run}"))).unwrap();
        csvs.push(report.metrics_csv);
    }
    let csv_ok = strip_wall(&csvs[0]) == strip_wall(&csvs[1]);

    // checkpoint roundtrip: load, re-save, compare bytes
    let ckpt_path = dir.path().join("r0").join("last.ckpt");
    let original = std::fs::read(&ckpt_path).unwrap();
    let loaded = load_checkpoint(&ckpt_path, Some((&cfg, TrainMode::Rare))).unwrap();
    let opt = rare_unet::optim::AdamW::restore(
        loaded.model.parameters(),
        AdamWConfig::default(),
        loaded.opt_m.clone(),
        loaded.opt_v.clone(),
        loaded.step,
    )
    .unwrap();
    let resaved_path = dir.path().join("resaved.ckpt");
    trainer::save_checkpoint(&resaved_path, &loaded.model, loaded.mode, &opt).unwrap();
    let resaved = std::fs::read(&resaved_path).unwrap();
    let ckpt_ok = original == resaved;

    // .vvol roundtrip: save, load, save again, compare bytes
    let sample = generate_phantom(5, &PhantomSpec::hippocampus_like()).unwrap();
    let v1 = dir.path().join("a.vvol");
    let v2 = dir.path().join("b.vvol");
    data::save_volume(&v1, &sample).unwrap();
    let back = data::load_volume(&v1).unwrap();
    data::save_volume(&v2, &back).unwrap();
    let vvol_ok = std::fs::read(&v1).unwrap() == std::fs::read(&v2).unwrap()
        && back.image == sample.image
        && back.labels.data == sample.labels.data;

    let pass = csv_ok && ckpt_ok && vvol_ok;
    let ok = verdict(
        8,
        "determinism & persistence",
        pass,
        &format!(
            "same-seed CSVs identical up to wall clock: {csv_ok}; \
             checkpoint re-save bit-exact: {ckpt_ok}; .vvol roundtrip bit-exact: {vvol_ok}"
        ),
    );
    assert!(ok);
}
