use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vistrack::attention::{self, AttentionParams};
use vistrack::datagen::{gen_dataset, SynthConfig};
use vistrack::detector::{extract_features, jitter_box, BackboneParams};
use vistrack::eval::{evaluate, st_iou, EvalConfig};
use vistrack::ops;
use vistrack::pipeline::{run_video, ModelParams, PipelineConfig};
use vistrack::tracker::{self, assign_from_scores, AssociationMode, DetectionCue};
use vistrack::video::{Frame, InstanceTrack, TrackEntry};
use vistrack::{BBox, Mask, Tensor};

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), 1.0, &mut rng)
}

fn track(id: u64, category: usize, score: f64, cells: &[(usize, usize, usize)]) -> InstanceTrack {
    let mut entries: Vec<TrackEntry> = Vec::new();
    for &(frame, r, c) in cells {
        let mask = Mask::from_fn(6, 6, |y, x| y >= r && y < r + 2 && x >= c && x < c + 2);
        let bbox = mask.tight_bbox().unwrap();
        entries.push(TrackEntry {
            frame,
            bbox,
            mask,
            score,
        });
    }
    InstanceTrack {
        video_id: 1,
        identity: id,
        category,
        score,
        entries,
    }
}

fn cells() -> impl Strategy<Value = Vec<(usize, usize, usize)>> {
    (0usize..2, 1usize..4).prop_flat_map(|(start, len)| {
        proptest::collection::vec((0usize..5, 0usize..5), len).prop_map(move |pos| {
            pos.iter()
                .enumerate()
                .map(|(i, &(r, c))| (start + i, r, c))
                .collect()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv1x1_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = rand_t(&[3, 2, 4], seed);
        let y = rand_t(&[3, 2, 4], seed + 1);
        let w = rand_t(&[5, 3], seed + 2);
        let zero = Tensor::zeros([5]);
        let lhs = ops::conv1x1(&x.scale(a).add(&y.scale(b)).unwrap(), &w, &zero).unwrap();
        let rhs = ops::conv1x1(&x, &w, &zero).unwrap().scale(a)
            .add(&ops::conv1x1(&y, &w, &zero).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn unpadded_xcorr_at_origin_is_overlap_sum(seed in 0u64..1000, h in 1usize..4, w in 1usize..4, eh in 0usize..3, ew in 0usize..3) {
        let t = rand_t(&[2, h, w], seed);
        let s = rand_t(&[2, h + eh, w + ew], seed + 1);
        let out = ops::depthwise_xcorr(&t, &s, false).unwrap();
        for c in 0..2 {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += t.at(&[c, y, x]) * s.at(&[c, y, x]);
                }
            }
            prop_assert!((out.at(&[c, 0, 0]) - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn temporal_attention_ignores_support_order(seed in 0u64..1000, t in 2usize..5) {
        let p = AttentionParams::<f64>::random(8, 4, seed).unwrap();
        let fc = rand_t(&[8, 3, 3], seed + 1);
        let sup: Vec<Tensor<f64>> = (0..t).map(|i| rand_t(&[8, 3, 3], seed + 10 + i as u64)).collect();
        let mut rev = sup.clone();
        rev.reverse();
        rev.rotate_left(1);
        let a = attention::temporal_attention(&fc, &attention::embed_support(&sup, &p).unwrap(), &p).unwrap();
        let b = attention::temporal_attention(&fc, &attention::embed_support(&rev, &p).unwrap(), &p).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zero_initialised_dual_attention_is_identity(seed in 0u64..1000, h in 1usize..5, w in 1usize..5) {
        let p = AttentionParams::<f64>::new(8, 4, seed).unwrap();
        let fc = rand_t(&[8, h, w], seed + 1);
        let sup = [rand_t(&[8, h, w], seed + 2), rand_t(&[8, h, w], seed + 3)];
        let out = attention::dual_attention(&fc, &sup, &p).unwrap();
        prop_assert_eq!(out.max_abs_diff(&fc), 0.0);
    }

    #[test]
    fn jitter_moves_corners_by_at_most_its_fraction(seed in any::<u64>(), j in 0.0f64..0.3, w in 1.0f64..30.0, h in 1.0f64..30.0) {
        let b = BBox::new(10.0, 12.0, w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = jitter_box(&b, j, &mut rng);
        let bound = j * w.max(h) + 1e-9;
        prop_assert!((k.x - b.x).abs() <= bound && (k.y - b.y).abs() <= bound);
        prop_assert!((k.x1() - b.x1()).abs() <= bound && (k.y1() - b.y1()).abs() <= bound);
    }

    #[test]
    fn constant_frames_give_constant_features(v in 0.0f64..1.0, seed in 0u64..100) {
        let f = Frame::new(Tensor::full([3, 16, 12], v), 0, 0).unwrap();
        let p = BackboneParams::<f64>::new(4, 8, seed).unwrap();
        let x = extract_features(&f, &p).unwrap();
        for c in 0..8 {
            let first = x.at(&[c, 0, 0]);
            for y in 0..4 {
                for xx in 0..3 {
                    prop_assert_eq!(x.at(&[c, y, xx]), first);
                }
            }
        }
    }

    #[test]
    fn pair_correlation_is_symmetric(seed in 0u64..1000) {
        let a = rand_t(&[4, 3, 3], seed);
        let b = rand_t(&[4, 3, 3], seed + 1);
        let ab = tracker::pair_correlation_raw(&a, &b).unwrap();
        let ba = tracker::pair_correlation_raw(&b, &a).unwrap();
        prop_assert!(ab.max_abs_diff(&ba) < 1e-12);
    }

    #[test]
    fn raw_correlation_peaks_at_exact_crop(seed in 0u64..1000, y0 in 0usize..6, x0 in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frame = Tensor::<f64>::uniform([1, 9, 9], 1.0, &mut rng).map(|v| v.abs() + 0.1);
        let crop = Tensor::from_fn([1, 3, 3], |i| frame.at(&[0, y0 + i / 3, x0 + i % 3]));
        let x = ops::depthwise_xcorr(&crop, &frame, false).unwrap();
        let norm = |y: usize, xx: usize| -> f64 {
            (0..9).map(|i| frame.at(&[0, y + i / 3, xx + i % 3]).powi(2)).sum::<f64>().sqrt()
        };
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for y in 0..7 {
            for xx in 0..7 {
                let v = x.at(&[0, y, xx]) / norm(y, xx);
                if v > best_v {
                    best_v = v;
                    best = (y, xx);
                }
            }
        }
        prop_assert_eq!(best, (y0, x0));
    }

    #[test]
    fn gaussian_target_in_unit_range_and_monotone(cx in 1.0f64..11.0, cy in 1.0f64..11.0, w in 1.0f64..6.0, h in 1.0f64..6.0, sf in 0.1f64..1.0) {
        let b = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h);
        let t = tracker::gaussian_target::<f64>(&b, 12, 12, sf).unwrap();
        let (sx, sy) = (sf * w, sf * h);
        for (i, &v) in t.data().iter().enumerate() {
            let (y, x) = ((i / 12) as f64 + 0.5, (i % 12) as f64 + 0.5);
            let expo = -((x - cx).powi(2) / (2.0 * sx * sx) + (y - cy).powi(2) / (2.0 * sy * sy));
            prop_assert!((0.0..=1.0).contains(&v));
            if expo > -700.0 {
                prop_assert!(v > 0.0);
            }
        }
        let col = ((cx - 0.5).round().clamp(0.0, 11.0)) as usize;
        let row = ((cy - 0.5).round().clamp(0.0, 11.0)) as usize;
        for x in col..11 {
            prop_assert!(t.at(&[0, row, x + 1]) <= t.at(&[0, row, x]));
        }
        for x in (1..=col).rev() {
            prop_assert!(t.at(&[0, row, x - 1]) <= t.at(&[0, row, x]));
        }
    }

    #[test]
    fn association_is_one_to_one(q in 0usize..5, p in 0usize..6, vals in proptest::collection::vec(-3.0f64..3.0, 30), greedy in any::<bool>()) {
        let scores: Vec<Vec<f64>> = (0..q).map(|i| (0..p).map(|j| vals[i * 6 + j]).collect()).collect();
        let dets: Vec<DetectionCue> = (0..p).map(|j| DetectionCue { bbox: BBox::new(j as f64, 0.0, 1.0, 1.0), confidence: 1.0 - 0.1 * j as f64, category: 0 }).collect();
        let mode = if greedy { AssociationMode::Greedy } else { AssociationMode::Hungarian };
        let a = assign_from_scores(&scores, &dets, 0.0, mode);
        prop_assert_eq!(a.len(), p);
        let mut used = vec![false; q];
        for x in &a {
            if let tracker::Assignment::Existing(i) = *x {
                prop_assert!(!used[i]);
                used[i] = true;
            }
        }
        if q == 0 {
            prop_assert!(a.iter().all(|x| *x == tracker::Assignment::New));
        }
    }

    #[test]
    fn greedy_and_hungarian_agree_on_dominant_diagonals(n in 1usize..5, seed in any::<u64>(), noise in proptest::collection::vec(-1.0f64..1.0, 25)) {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if perm[i] == j { 10.0 } else { noise[i * 5 + j] }).collect())
            .collect();
        let dets: Vec<DetectionCue> = (0..n).map(|j| DetectionCue { bbox: BBox::new(0.0, 0.0, 1.0, 1.0), confidence: 0.5 + 0.1 * j as f64, category: 0 }).collect();
        let g = assign_from_scores(&scores, &dets, 0.0, AssociationMode::Greedy);
        let h = assign_from_scores(&scores, &dets, 0.0, AssociationMode::Hungarian);
        prop_assert_eq!(g, h);
    }

    #[test]
    fn st_iou_is_bounded_symmetric_and_reflexive(a in cells(), b in cells()) {
        let ta = track(1, 0, 1.0, &a);
        let tb = track(2, 0, 1.0, &b);
        let v = st_iou(&ta, &tb);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, st_iou(&tb, &ta));
        prop_assert_eq!(st_iou(&ta, &ta), 1.0);
        prop_assert_eq!(v == 1.0, ta.entries.iter().map(|e| (e.frame, &e.mask)).eq(tb.entries.iter().map(|e| (e.frame, &e.mask))));
    }

    #[test]
    fn ap_depends_on_score_ranks_only(gts in proptest::collection::vec(cells(), 1..4), preds in proptest::collection::vec((cells(), 0.01f64..1.0), 0..5)) {
        let g: Vec<InstanceTrack> = gts.iter().enumerate().map(|(i, c)| track(i as u64 + 1, 0, 1.0, c)).collect();
        let p: Vec<InstanceTrack> = preds.iter().enumerate().map(|(i, (c, s))| track(i as u64 + 1, 0, *s, c)).collect();
        let q: Vec<InstanceTrack> = p.iter().map(|t| InstanceTrack { score: t.score.powi(3) * 5.0 - 2.0, ..t.clone() }).collect();
        let cfg = EvalConfig::default();
        let a = evaluate(&p, &g, &cfg).unwrap();
        let b = evaluate(&q, &g, &cfg).unwrap();
        prop_assert_eq!(a.mean_ap, b.mean_ap);
        prop_assert_eq!(a.ar_per_budget, b.ar_per_budget);
        let per_t = &a.ap_per_category_per_threshold[0];
        prop_assert!(per_t.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn duplicates_never_raise_ap(gts in proptest::collection::vec(cells(), 1..4), preds in proptest::collection::vec((cells(), 0.01f64..1.0), 1..4), which in 0usize..4) {
        let g: Vec<InstanceTrack> = gts.iter().enumerate().map(|(i, c)| track(i as u64 + 1, 0, 1.0, c)).collect();
        let mut p: Vec<InstanceTrack> = preds.iter().enumerate().map(|(i, (c, s))| track(i as u64 + 1, 0, *s, c)).collect();
        let cfg = EvalConfig::default();
        let before = evaluate(&p, &g, &cfg).unwrap().mean_ap;
        let mut dup = p[which % p.len()].clone();
        dup.identity = 99;
        p.push(dup);
        let after = evaluate(&p, &g, &cfg).unwrap().mean_ap;
        prop_assert!(after <= before + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn generated_videos_are_consistent(seed in any::<u64>(), occl in any::<bool>()) {
        let cfg = SynthConfig { num_videos: 2, frames_per_video: 5, objects_per_video: 3, allow_occlusion: occl, seed, ..SynthConfig::default() };
        let a = gen_dataset(&cfg).unwrap();
        prop_assert_eq!(&a, &gen_dataset(&cfg).unwrap());
        for v in &a {
            let mut ids: Vec<u64> = v.annotation.tracks.iter().map(|t| t.identity).collect();
            let n = ids.len();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
            for t in &v.annotation.tracks {
                for e in &t.entries {
                    prop_assert_eq!(Some(e.bbox), e.mask.tight_bbox());
                }
            }
        }
    }

    #[test]
    fn pipeline_identities_are_unique_and_never_reused(seed in 0u64..1000, horizon in 1usize..4) {
        let cfg = PipelineConfig {
            memory_horizon: Some(horizon),
            seed,
            detector: vistrack::detector::DetectorConfig { channels: 8, ..Default::default() },
            tracker: vistrack::tracker::TrackerConfig { width: 8, ..Default::default() },
            ..PipelineConfig::default()
        };
        let videos = gen_dataset(&SynthConfig { num_videos: 1, frames_per_video: 6, height: 48, width: 48, size_range: (8.0, 12.0), objects_per_video: 3, seed, ..SynthConfig::default() }).unwrap();
        let params = ModelParams::<f64>::new(&cfg, seed).unwrap();
        let r = run_video(&videos[0].frames, Some(&videos[0].annotation), &cfg, &params).unwrap();
        let mut last_seen: std::collections::HashMap<u64, usize> = Default::default();
        for (t, dets) in r.detections.iter().enumerate() {
            let mut ids: Vec<u64> = dets.iter().map(|d| d.identity).collect();
            ids.sort_unstable();
            let n = ids.len();
            ids.dedup();
            prop_assert_eq!(ids.len(), n);
            for id in ids {
                if let Some(&prev) = last_seen.get(&id) {
                    prop_assert!(t - prev <= horizon + 1, "identity {} came back after retirement", id);
                }
                last_seen.insert(id, t);
            }
        }
        prop_assert_eq!(r, run_video(&videos[0].frames, Some(&videos[0].annotation), &cfg, &params).unwrap());
    }
}
