//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vistrack::attention::{self, AttentionParams};
use vistrack::datagen::{gen_dataset, Layout, SynthConfig};
use vistrack::eval::{evaluate, identity_accuracy, EvalConfig};
use vistrack::pipeline::{run_video, ModelParams, PipelineConfig};
use vistrack::sampling::{sample_support, SamplingMode};
use vistrack::selftest::{self, CheckKind, SelftestOptions};
use vistrack::tracker::AssociationMode;
use vistrack::train::{correlation_samples, localization_error, train, train_correlation_head, TrainConfig};
use vistrack::video::{InstanceTrack, TrackEntry, Video};
use vistrack::{Mask, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), 1.0, &mut rng)
}

// 1. Temporal attention against a literal per-position loop.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (c, h, w) = (4, 3, 3);
    let p = AttentionParams::<f64>::random(c, 4, 1001).unwrap();
    let f_c = rand_t(&[c, h, w], 1002);
    let sup = [rand_t(&[c, h, w], 1003), rand_t(&[c, h, w], 1004)];
    let emb = attention::embed_support(&sup, &p).unwrap();
    let fast = attention::temporal_attention(&f_c, &emb, &p).unwrap();

    let conv = |x: &Tensor<f64>, l: &vistrack::OpParams<f64>, o: usize, y: usize, xx: usize| {
        (0..l.in_channels()).fold(l.bias.at(&[o]), |s, i| s + l.weight.at(&[o, i]) * x.at(&[i, y, xx]))
    };
    let d = c / 4;
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for s in &sup {
        for y in 0..h {
            for x in 0..w {
                keys.push((0..d).map(|i| conv(s, &p.key_proj_support, i, y, x).max(0.0)).collect::<Vec<_>>());
                values.push((0..d).map(|i| conv(s, &p.value_proj_support, i, y, x).max(0.0)).collect::<Vec<_>>());
            }
        }
    }
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let q: Vec<f64> = (0..d).map(|i| conv(&f_c, &p.key_proj_current, i, y, x).max(0.0)).collect();
            let e: Vec<f64> = keys.iter().map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>().exp()).collect();
            let z: f64 = e.iter().sum();
            let mut agg = vec![0.0; d];
            for (v, a) in values.iter().zip(&e) {
                for i in 0..d {
                    agg[i] += a / z * v[i];
                }
            }
            for o in 0..c {
                let mut s = p.output_transform.bias.at(&[o]);
                for i in 0..d {
                    s += p.output_transform.weight.at(&[o, i]) * agg[i].max(0.0);
                }
                worst = worst.max((s - fast.at(&[o, y, x])).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= 1e-10 && elapsed < Duration::from_secs(1),
        format!("max abs diff {worst:.3e} (tol 1e-10), {elapsed:.2?} (limit 1s)"),
    )
}

// 2. Central-difference gradient suite.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let opts = SelftestOptions {
        eps: 1e-5,
        tolerance: 1e-5,
        ..SelftestOptions::default()
    };
    let results = selftest::run(&opts).unwrap();
    let elapsed = start.elapsed();
    let grads: Vec<_> = results.iter().filter(|r| r.kind == CheckKind::Gradient).collect();
    let required = [
        "conv1x1",
        "softmax_axis",
        "depthwise_xcorr",
        "roi_align",
        "temporal_attention",
        "channel_attention",
        "match_score",
        "correlation_loss",
    ];
    let missing: Vec<&str> = required
        .iter()
        .copied()
        .filter(|n| !grads.iter().any(|r| r.name.starts_with(n)))
        .collect();
    let worst = grads.iter().map(|r| r.error).fold(0.0, f64::max);
    let failed: Vec<String> = grads.iter().filter(|r| r.error >= 1e-5).map(|r| r.name.to_string()).collect();
    outcome(
        missing.is_empty() && failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} gradient checks, max rel err {worst:.3e} (tol 1e-5), failed {failed:?}, missing {missing:?}, {elapsed:.2?} (limit 60s)",
            grads.len()
        ),
    )
}

// 3. Zero-initialised block is the identity; support order does not matter.
fn criterion_3() -> Outcome {
    let c = 16;
    let p0 = AttentionParams::<f64>::new(c, 4, 2001).unwrap();
    let f_c = rand_t(&[c, 5, 4], 2002);
    let sup: Vec<Tensor<f64>> = (0..3).map(|i| rand_t(&[c, 5, 4], 2003 + i)).collect();
    let ident = attention::dual_attention(&f_c, &sup, &p0).unwrap().max_abs_diff(&f_c);

    let p = AttentionParams::<f64>::random(c, 4, 2010).unwrap();
    let a = attention::temporal_attention(&f_c, &attention::embed_support(&sup, &p).unwrap(), &p).unwrap();
    let mut perm_worst = 0.0f64;
    for order in [[2, 0, 1], [1, 2, 0], [2, 1, 0]] {
        let s: Vec<Tensor<f64>> = order.iter().map(|&i| sup[i].clone()).collect();
        let b = attention::temporal_attention(&f_c, &attention::embed_support(&s, &p).unwrap(), &p).unwrap();
        perm_worst = perm_worst.max(a.max_abs_diff(&b));
    }
    outcome(
        ident == 0.0 && perm_worst < 1e-12,
        format!("identity max diff {ident:e} (must be 0), permutation max diff {perm_worst:.3e} (tol 1e-12)"),
    )
}

fn row_mask(width: usize, cols: std::ops::Range<usize>) -> Mask {
    Mask::from_fn(1, width, |_, c| cols.contains(&c))
}

/// `frames[i]` is the column range in frame `i`, `None` when absent.
fn track(video: u64, identity: u64, category: usize, score: f64, frames: &[Option<std::ops::Range<usize>>]) -> InstanceTrack {
    let entries = frames
        .iter()
        .enumerate()
        .filter_map(|(f, r)| {
            let m = row_mask(40, r.clone()?);
            Some(TrackEntry {
                frame: f,
                bbox: m.tight_bbox().unwrap(),
                mask: m,
                score,
            })
        })
        .collect();
    InstanceTrack {
        video_id: video,
        identity,
        category,
        score,
        entries,
    }
}

// 4. Evaluation against values worked out by hand.
fn criterion_4() -> Outcome {
    // Two frames of a 1x40 strip per video. Column ranges give every
    // spatio-temporal IoU as a ratio of pixel counts.
    let gts = vec![
        track(1, 1, 0, 1.0, &[Some(0..20), Some(0..20)]),   // A
        track(1, 2, 1, 1.0, &[Some(20..40), Some(20..40)]), // B
        track(2, 1, 0, 1.0, &[Some(0..20), Some(0..20)]),   // C
        track(3, 1, 1, 1.0, &[Some(0..20), Some(0..20)]),   // D
        track(3, 2, 0, 1.0, &[None, Some(25..35)]),         // E
    ];
    let preds = vec![
        track(1, 11, 0, 0.90, &[Some(0..17), Some(0..16)]),  // vs A: 33/40
        track(1, 12, 1, 0.60, &[Some(20..40), Some(20..23)]), // vs B: 23/40
        track(2, 13, 0, 0.70, &[Some(10..30), Some(10..30)]), // vs C: 20/60
        track(2, 14, 0, 0.95, &[Some(0..20), Some(0..17)]),  // vs C: 37/40
        track(3, 15, 1, 0.80, &[Some(0..20), Some(0..20)]),  // vs D: 1
        track(3, 16, 1, 0.85, &[Some(30..40), None]),        // vs D: 0
    ];
    let cfg = EvalConfig::default();
    let r = evaluate(&preds, &gts, &cfg).unwrap();

    // Category 0, three ground truths, ranking p14, p11, p13.
    //   t <= 0.80 (7 thresholds): TP TP FP, recall reaches 2/3 at precision 1,
    //     so recall levels 0.00..0.66 score 1 -> 67/101.
    //   t in {0.85, 0.90}: TP FP FP -> levels 0.00..0.33 -> 34/101.
    //   t = 0.95: nothing matches -> 0.
    // Category 1, two ground truths, ranking p16, p15, p12.
    //   t in {0.50, 0.55}: FP TP TP, interpolated precision 2/3 at every level.
    //   t >= 0.60 (8 thresholds): FP TP FP -> levels 0.00..0.50 at 1/2 -> 25.5/101.
    let cat0 = [67.0, 67.0, 67.0, 67.0, 67.0, 67.0, 67.0, 34.0, 34.0, 0.0].map(|x| x / 101.0);
    let cat1 = [2.0 / 3.0, 2.0 / 3.0].into_iter().chain([25.5 / 101.0; 8]).collect::<Vec<_>>();
    let ap = (cat0.iter().sum::<f64>() + cat1.iter().sum::<f64>()) / 20.0;
    let ap50 = (cat0[0] + cat1[0]) / 2.0;
    let ap75 = (cat0[5] + cat1[5]) / 2.0;
    // Recall keeping the single best prediction of each video (p11, p14, p16):
    //   cat 0: p11 and p14 hit at t <= 0.80 (2/3), p14 alone at 0.85, 0.90 (1/3).
    //   cat 1: p12 is cut by the budget and p16 misses, so nothing.
    let ar1 = ((7.0 * 2.0 / 3.0 + 2.0 / 3.0) / 10.0 + 0.0) / 2.0;
    // Ten per video keeps everything: p12 hits B at t <= 0.55 and p15 finds D everywhere.
    let ar10 = ((7.0 * 2.0 / 3.0 + 2.0 / 3.0) / 10.0 + (2.0 * 1.0 + 8.0 * 0.5) / 10.0) / 2.0;

    let mut errs = vec![
        (r.mean_ap - ap).abs(),
        (r.ap50.unwrap() - ap50).abs(),
        (r.ap75.unwrap() - ap75).abs(),
        (r.ar(1).unwrap() - ar1).abs(),
        (r.ar(10).unwrap() - ar10).abs(),
    ];
    for (row, want) in r.ap_per_category_per_threshold.iter().zip([&cat0[..], &cat1[..]]) {
        errs.extend(row.iter().zip(want).map(|(a, b)| (a - b).abs()));
    }
    let worst = errs.iter().copied().fold(0.0, f64::max);

    let perfect = evaluate(&gts, &gts, &cfg).unwrap();
    // Ten covers every instance of every video, so perfect predictions
    // recover everything; one per video cannot for videos 1 and 3.
    let exact = perfect.mean_ap == 1.0 && perfect.ar(10) == Some(1.0);
    outcome(
        worst <= 1e-12 && exact,
        format!(
            "AP {:.6} AP50 {:.6} AP75 {:.6} AR1 {:.6} AR10 {:.6}, max diff to hand values {worst:.3e} (tol 1e-12); pred==gt AP {} AR1 {} AR10 {}",
            r.mean_ap,
            r.ap50.unwrap(),
            r.ap75.unwrap(),
            r.ar(1).unwrap(),
            r.ar(10).unwrap(),
            perfect.mean_ap,
            perfect.ar(1).unwrap(),
            perfect.ar(10).unwrap()
        ),
    )
}

// 5. Learning the refine convs of the correlation branch.
fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut cfg = PipelineConfig::default();
    cfg.tracker.sigma_factor = 0.25;
    let base = SynthConfig {
        frames_per_video: 8,
        height: 96,
        width: 96,
        ..SynthConfig::default()
    };
    let train_set = gen_dataset(&SynthConfig {
        num_videos: 20,
        seed: 501,
        ..base.clone()
    })
    .unwrap();
    let held_out = gen_dataset(&SynthConfig {
        num_videos: 5,
        seed: 502,
        ..base
    })
    .unwrap();
    let params = ModelParams::<f64>::new(&cfg, 0).unwrap();
    let samples = correlation_samples(&train_set, &params, &cfg, 1, 0).unwrap();
    let held = correlation_samples(&held_out, &params, &cfg, 1, 1).unwrap();
    let mut tracker = params.tracker.clone();
    let report = train_correlation_head(&mut tracker, &samples, 500, 8, 3.0, 0).unwrap();
    let drop = 1.0 - report.last / report.initial;
    let near = held
        .iter()
        .filter(|s| localization_error(&tracker, s).unwrap() <= 2.0)
        .count();
    let frac = near as f64 / held.len() as f64;
    let elapsed = start.elapsed();
    outcome(
        drop >= 0.9 && frac >= 0.9 && elapsed < Duration::from_secs(600),
        format!(
            "loss {:.4} -> {:.4} (drop {:.1}%, need >= 90%), argmax within 2 cells on {near}/{} held-out ({:.1}%, need >= 90%), {elapsed:.1?} (limit 600s)",
            report.initial,
            report.last,
            100.0 * drop,
            held.len(),
            100.0 * frac
        ),
    )
}

fn id_accuracy(videos: &[Video], cfg: &PipelineConfig, params: &ModelParams<f64>) -> f64 {
    let pairs: Vec<Vec<(u64, u64)>> = videos
        .iter()
        .map(|v| {
            run_video(&v.frames, Some(&v.annotation), cfg, params)
                .unwrap()
                .detections
                .iter()
                .flatten()
                .map(|d| (d.identity, d.source_identity.expect("oracle proposals carry identity")))
                .collect()
        })
        .collect();
    identity_accuracy(&pairs)
}

fn trained(cfg: &PipelineConfig, videos: &[Video], steps: usize) -> ModelParams<f64> {
    let mut params = ModelParams::<f64>::new(cfg, 0).unwrap();
    train(
        &mut params,
        videos,
        cfg,
        &TrainConfig {
            steps,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    params
}

// 6. Identity accuracy on crossing objects and the ablation direction.
fn criterion_6() -> Outcome {
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    let crossing = SynthConfig {
        layout: Layout::Crossing,
        objects_per_video: 3,
        speed_range: (5.0, 8.0),
        ..SynthConfig::default()
    };
    let tr = gen_dataset(&SynthConfig {
        num_videos: 20,
        seed: 601,
        ..crossing.clone()
    })
    .unwrap();
    let te = gen_dataset(&SynthConfig {
        num_videos: 5,
        seed: 602,
        ..crossing
    })
    .unwrap();
    let params = trained(&cfg, &tr, 600);
    let acc = id_accuracy(&te, &cfg, &params);
    let mut hung = cfg.clone();
    hung.tracker.association = AssociationMode::Hungarian;
    let acc_hung = id_accuracy(&te, &hung, &params);

    let identical = SynthConfig {
        objects_per_video: 6,
        identical_appearance: true,
        ..SynthConfig::default()
    };
    let tr6 = gen_dataset(&SynthConfig {
        num_videos: 20,
        seed: 611,
        ..identical.clone()
    })
    .unwrap();
    let te6 = gen_dataset(&SynthConfig {
        num_videos: 5,
        seed: 612,
        ..identical
    })
    .unwrap();
    let mut ablated = cfg.clone();
    ablated.enable_object_attention = false;
    ablated.enable_correlation_map = false;
    let full6 = id_accuracy(&te6, &cfg, &trained(&cfg, &tr6, 600));
    let abl6 = id_accuracy(&te6, &ablated, &trained(&ablated, &tr6, 600));
    let elapsed = start.elapsed();
    outcome(
        acc >= 0.95 && abl6 < full6,
        format!(
            "crossing identity accuracy {acc:.4} (need >= 0.95; hungarian {acc_hung:.4}); six identical objects full {full6:.4} vs ablated {abl6:.4} (need strict decrease), {elapsed:.1?}"
        ),
    )
}

// 7. Support-frame sampling.
fn criterion_7() -> Outcome {
    let uniform = |len, cur, t| sample_support(len, cur, t, SamplingMode::Uniform, 0).unwrap();
    let cases: [((usize, usize, usize), Vec<usize>); 6] = [
        ((5, 2, 2), vec![0, 4]),
        ((1, 0, 2), vec![0, 0]),
        // 0, 3, 6, 9 with 3 taken by the current frame; 2 and 4 tie, lower wins.
        ((10, 3, 4), vec![0, 2, 6, 9]),
        ((7, 3, 3), vec![0, 2, 6]),
        // 0, 1, 3, 4 with 0 current; its free neighbours are 2 away on the right.
        ((5, 0, 4), vec![1, 2, 3, 4]),
        // Fewer other frames than requested: positions repeat.
        ((3, 1, 4), vec![0, 0, 2, 2]),
    ];
    let bad_cases: Vec<_> = cases
        .iter()
        .filter(|((l, c, t), want)| &uniform(*l, *c, *t) != want)
        .map(|(k, _)| *k)
        .collect();

    let (len, cur, t, draws) = (30usize, 7usize, 4usize, 10_000u64);
    let reproducible = (0..50).all(|s| {
        sample_support(len, cur, t, SamplingMode::Random, s).unwrap()
            == sample_support(len, cur, t, SamplingMode::Random, s).unwrap()
    });
    let mut counts = vec![0u64; len];
    let mut distinct = true;
    for seed in 0..draws {
        let s = sample_support(len, cur, t, SamplingMode::Random, seed).unwrap();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        distinct &= u.len() == t;
        for i in s {
            counts[i] += 1;
        }
    }
    let p = t as f64 / (len - 1) as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let worst_z = (0..len)
        .filter(|&i| i != cur)
        .map(|i| (counts[i] as f64 - mean).abs() / sigma)
        .fold(0.0, f64::max);
    let covered = (0..len).filter(|&i| i != cur).all(|i| counts[i] > 0);
    outcome(
        bad_cases.is_empty() && reproducible && distinct && covered && counts[cur] == 0 && worst_z <= 3.0,
        format!(
            "uniform mismatches {bad_cases:?}; random reproducible {reproducible}, distinct {distinct}, current drawn {} times, max |z| {worst_z:.2} over {} eligible indices (limit 3)",
            counts[cur],
            len - 1
        ),
    )
}

fn vistrack(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vistrack"))
        .args(args)
        .env_remove("VISTRACK_SEED")
        .output()
        .expect("spawn vistrack")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

// 8. Two identical run + eval invocations give identical files.
fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = vistrack(&["gen", "--out", p(&data), "--videos", "3", "--frames", "6", "--size", "64x64", "--seed", "8"]);
    if !gen.status.success() {
        return outcome(false, format!("gen failed: {}", String::from_utf8_lossy(&gen.stderr)));
    }
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let gt = data.join("annotations.json");
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let pred = dir.path().join(format!("{run}.json"));
        let res = dir.path().join(format!("{run}.eval.json"));
        let r = vistrack(&[
            "run", "--data", p(&data), "--config", p(&cfg), "--out", p(&pred), "--train", "20", "--seed", "8",
        ]);
        let e = vistrack(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&res)]);
        if !r.status.success() || !e.status.success() {
            return outcome(
                false,
                format!(
                    "run/eval failed: {}{}",
                    String::from_utf8_lossy(&r.stderr),
                    String::from_utf8_lossy(&e.stderr)
                ),
            );
        }
        files.push((std::fs::read(&pred).unwrap(), std::fs::read(&res).unwrap()));
    }
    let same_pred = files[0].0 == files[1].0;
    let same_res = files[0].1 == files[1].1;
    outcome(
        same_pred && same_res,
        format!(
            "predictions identical {same_pred} ({} bytes), results identical {same_res} ({} bytes)",
            files[0].0.len(),
            files[0].1.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("temporal attention loop oracle", criterion_1),
        ("gradient suite", criterion_2),
        ("identity and permutation invariants", criterion_3),
        ("evaluation oracle", criterion_4),
        ("correlation learning", criterion_5),
        ("end-to-end tracking", criterion_6),
        ("support sampling", criterion_7),
        ("determinism", criterion_8),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let o = f();
        println!("criterion {n} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {failed} failed");
    if failed > 0 {
        std::process::exit(1);
    }
}
