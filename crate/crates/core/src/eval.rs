//! Video instance segmentation metrics: spatio-temporal IoU, track matching,
//! threshold-averaged AP and budgeted AR.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::hungarian::max_profit_assignment;
use crate::video::InstanceTrack;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub ar_budgets: Vec<usize>,
    /// Categories to evaluate; `None` takes every category present in the ground truth.
    pub categories: Option<Vec<usize>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: default_thresholds(),
            ar_budgets: vec![1, 10],
            categories: None,
        }
    }
}

/// 0.50, 0.55, ..., 0.95.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.iou_thresholds.is_empty(), "eval_config", "no IoU thresholds");
        ensure!(
            self.iou_thresholds.iter().all(|&t| t > 0.0 && t <= 1.0),
            "eval_config",
            "IoU thresholds must lie in (0,1]"
        );
        ensure!(
            self.iou_thresholds.windows(2).all(|w| w[0] < w[1]),
            "eval_config",
            "IoU thresholds must be strictly increasing"
        );
        ensure!(self.ar_budgets.iter().all(|&k| k > 0), "eval_config", "AR budgets must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Evaluated categories (those with ground truth).
    pub categories: Vec<usize>,
    pub iou_thresholds: Vec<f64>,
    /// `[category][threshold]`
    pub ap_per_category_per_threshold: Vec<Vec<f64>>,
    pub mean_ap: f64,
    /// `None` when 0.5 is not among the thresholds.
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    /// `(budget, AR)`
    pub ar_per_budget: Vec<(usize, f64)>,
}

impl EvalResult {
    pub fn ar(&self, budget: usize) -> Option<f64> {
        self.ar_per_budget.iter().find(|(k, _)| *k == budget).map(|p| p.1)
    }
}

/// Intersection over union summed over every frame either track covers.
pub fn st_iou(a: &InstanceTrack, b: &InstanceTrack) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    let (mut i, mut j) = (0, 0);
    let (ea, eb) = (&a.entries, &b.entries);
    while i < ea.len() || j < eb.len() {
        let fa = ea.get(i).map(|e| e.frame);
        let fb = eb.get(j).map(|e| e.frame);
        match (fa, fb) {
            (Some(x), Some(y)) if x == y => {
                let (n, u) = ea[i].mask.overlap(&eb[j].mask);
                inter += n;
                union += u;
                i += 1;
                j += 1;
            }
            (Some(x), Some(y)) if x < y => {
                union += ea[i].mask.area();
                i += 1;
            }
            (Some(_), None) => {
                union += ea[i].mask.area();
                i += 1;
            }
            _ => {
                union += eb[j].mask.area();
                j += 1;
            }
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy one-to-one matching within one video. `preds` must be in
/// descending score order; each takes the unmatched gt of `category` with
/// the highest IoU at or above `threshold` (lowest index on ties).
/// Returns the matched gt index per prediction; other-category predictions
/// stay unmatched.
pub fn match_tracks(preds: &[&InstanceTrack], gts: &[&InstanceTrack], threshold: f64, category: usize) -> Vec<Option<usize>> {
    let ious: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| st_iou(p, g)).collect())
        .collect();
    match_with_ious(preds, gts, &ious, threshold, category)
}

fn match_with_ious(
    preds: &[&InstanceTrack],
    gts: &[&InstanceTrack],
    ious: &[Vec<f64>],
    threshold: f64,
    category: usize,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.category != category {
                return None;
            }
            let mut best: Option<usize> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] || g.category != category || ious[i][j] < threshold {
                    continue;
                }
                if best.is_none_or(|b| ious[i][j] > ious[i][b]) {
                    best = Some(j);
                }
            }
            if let Some(j) = best {
                taken[j] = true;
            }
            best
        })
        .collect()
}

/// 101-point interpolated AP from score-ranked TP flags.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

struct VideoGroup<'a> {
    preds: Vec<&'a InstanceTrack>,
    gts: Vec<&'a InstanceTrack>,
    ious: Vec<Vec<f64>>,
}

fn group<'a>(preds: &'a [InstanceTrack], gts: &'a [InstanceTrack]) -> Vec<VideoGroup<'a>> {
    let mut order: Vec<u64> = Vec::new();
    let mut map: HashMap<u64, (Vec<&InstanceTrack>, Vec<&InstanceTrack>)> = HashMap::new();
    for t in gts.iter().chain(preds) {
        map.entry(t.video_id).or_insert_with(|| {
            order.push(t.video_id);
            (Vec::new(), Vec::new())
        });
    }
    for p in preds {
        map.get_mut(&p.video_id).expect("video").0.push(p);
    }
    for g in gts {
        map.get_mut(&g.video_id).expect("video").1.push(g);
    }
    order.sort_unstable();
    order
        .into_iter()
        .map(|v| {
            let (mut ps, gs) = map.remove(&v).expect("video");
            ps.sort_by(|a, b| b.score.total_cmp(&a.score));
            let ious = ps.iter().map(|p| gs.iter().map(|g| st_iou(p, g)).collect()).collect();
            VideoGroup { preds: ps, gts: gs, ious }
        })
        .collect()
}

fn categories_of(gts: &[InstanceTrack], config: &EvalConfig) -> Vec<usize> {
    let present: BTreeSet<usize> = gts.iter().map(|g| g.category).collect();
    match &config.categories {
        Some(c) => c.iter().copied().filter(|x| present.contains(x)).collect::<BTreeSet<_>>().into_iter().collect(),
        None => present.into_iter().collect(),
    }
}

/// Per-category, per-threshold AP and the summary fields.
pub fn evaluate(preds: &[InstanceTrack], gts: &[InstanceTrack], config: &EvalConfig) -> Result<EvalResult> {
    config.validate()?;
    if gts.is_empty() {
        return Err(Error::Data("empty benchmark: no ground-truth instances".into()));
    }
    let cats = categories_of(gts, config);
    if cats.is_empty() {
        return Err(Error::Data("empty benchmark: no ground truth in the selected categories".into()));
    }
    let groups = group(preds, gts);
    let thr = &config.iou_thresholds;

    let mut ap = vec![vec![0.0; thr.len()]; cats.len()];
    for (ci, &c) in cats.iter().enumerate() {
        let num_gt = gts.iter().filter(|g| g.category == c).count();
        for (ti, &t) in thr.iter().enumerate() {
            let mut scored: Vec<(f64, usize, bool)> = Vec::new();
            for g in &groups {
                let m = match_with_ious(&g.preds, &g.gts, &g.ious, t, c);
                for (p, hit) in g.preds.iter().zip(m) {
                    if p.category == c {
                        scored.push((p.score, scored.len(), hit.is_some()));
                    }
                }
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let tp: Vec<bool> = scored.iter().map(|s| s.2).collect();
            ap[ci][ti] = interpolated_ap(&tp, num_gt);
        }
    }
    let per_threshold: Vec<f64> = (0..thr.len())
        .map(|ti| ap.iter().map(|row| row[ti]).sum::<f64>() / cats.len() as f64)
        .collect();
    let mean_ap = per_threshold.iter().sum::<f64>() / thr.len() as f64;
    let at = |x: f64| thr.iter().position(|&t| (t - x).abs() < 1e-9).map(|i| per_threshold[i]);
    let ar_per_budget = config
        .ar_budgets
        .iter()
        .map(|&k| (k, recall_at(&groups, &cats, gts, thr, k)))
        .collect();
    Ok(EvalResult {
        categories: cats,
        iou_thresholds: thr.clone(),
        ap50: at(0.5),
        ap75: at(0.75),
        ap_per_category_per_threshold: ap,
        mean_ap,
        ar_per_budget,
    })
}

/// Recall keeping the `budget` highest-scored predictions of each video,
/// whatever their category.
fn recall_at(groups: &[VideoGroup], cats: &[usize], gts: &[InstanceTrack], thr: &[f64], budget: usize) -> f64 {
    let mut total = 0.0;
    for &c in cats {
        let num_gt = gts.iter().filter(|g| g.category == c).count();
        for &t in thr {
            let mut hits = 0usize;
            for g in groups {
                let idx: Vec<usize> = (0..g.preds.len().min(budget)).filter(|&i| g.preds[i].category == c).collect();
                let preds: Vec<&InstanceTrack> = idx.iter().map(|&i| g.preds[i]).collect();
                let ious: Vec<Vec<f64>> = idx.iter().map(|&i| g.ious[i].clone()).collect();
                hits += match_with_ious(&preds, &g.gts, &ious, t, c).iter().flatten().count();
            }
            total += hits as f64 / num_gt as f64;
        }
    }
    total / (cats.len() * thr.len()) as f64
}

/// Average precision only.
pub fn average_precision(preds: &[InstanceTrack], gts: &[InstanceTrack], config: &EvalConfig) -> Result<EvalResult> {
    evaluate(
        preds,
        gts,
        &EvalConfig {
            ar_budgets: Vec::new(),
            ..config.clone()
        },
    )
}

/// `(budget, AR)` for every configured budget.
pub fn average_recall(preds: &[InstanceTrack], gts: &[InstanceTrack], config: &EvalConfig) -> Result<Vec<(usize, f64)>> {
    Ok(evaluate(preds, gts, config)?.ar_per_budget)
}

/// Fraction of detection-frames whose predicted identity agrees with the
/// best one-to-one mapping of predicted to ground-truth identities. Input is
/// one list of `(predicted, ground truth)` pairs per video.
pub fn identity_accuracy(videos: &[Vec<(u64, u64)>]) -> f64 {
    let (mut correct, mut total) = (0usize, 0usize);
    for pairs in videos {
        total += pairs.len();
        let preds: Vec<u64> = pairs.iter().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect();
        let gts: Vec<u64> = pairs.iter().map(|p| p.1).collect::<BTreeSet<_>>().into_iter().collect();
        if preds.is_empty() {
            continue;
        }
        let mut counts = vec![vec![0.0; gts.len()]; preds.len()];
        for &(p, g) in pairs {
            let i = preds.binary_search(&p).expect("pred id");
            let j = gts.binary_search(&g).expect("gt id");
            counts[i][j] += 1.0;
        }
        correct += max_profit_assignment(&counts)
            .into_iter()
            .map(|(i, j)| counts[i][j] as usize)
            .sum::<usize>();
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Mask};
    use crate::video::TrackEntry;

    fn rect(x0: usize, y0: usize, w: usize, h: usize) -> Mask {
        Mask::from_fn(8, 8, |r, c| r >= y0 && r < y0 + h && c >= x0 && c < x0 + w)
    }

    fn track(video: u64, id: u64, cat: usize, score: f64, frames: &[(usize, Mask)]) -> InstanceTrack {
        InstanceTrack {
            video_id: video,
            identity: id,
            category: cat,
            score,
            entries: frames
                .iter()
                .map(|(f, m)| TrackEntry {
                    frame: *f,
                    bbox: m.tight_bbox().unwrap_or(BBox::new(0.0, 0.0, 1.0, 1.0)),
                    mask: m.clone(),
                    score,
                })
                .collect(),
        }
    }

    #[test]
    fn st_iou_examples() {
        let a = track(1, 1, 0, 1.0, &[(1, rect(0, 0, 2, 2)), (2, rect(0, 0, 2, 2))]);
        let b = track(1, 2, 0, 1.0, &[(2, rect(1, 0, 2, 2))]);
        assert_eq!(st_iou(&a, &b), 2.0 / 10.0);
        assert_eq!(st_iou(&a, &a), 1.0);
        let c = track(1, 3, 0, 1.0, &[(1, rect(5, 5, 2, 2))]);
        assert_eq!(st_iou(&a, &c), 0.0);
        let e = track(1, 4, 0, 1.0, &[]);
        assert_eq!(st_iou(&e, &e), 0.0);
    }

    #[test]
    fn one_to_one_matching() {
        let g = track(1, 1, 0, 1.0, &[(0, rect(0, 0, 3, 3))]);
        let p1 = track(1, 1, 0, 0.9, &[(0, rect(0, 0, 3, 3))]);
        let p2 = track(1, 2, 0, 0.8, &[(0, rect(0, 0, 3, 3))]);
        assert_eq!(match_tracks(&[&p1, &p2], &[&g], 0.5, 0), vec![Some(0), None]);
    }

    #[test]
    fn interpolation_by_hand() {
        // TP, FP, TP with 3 gts: recall 1/3,1/3,2/3; precision 1,1/2,2/3 -> envelope 1,2/3,2/3.
        // r in [0,1/3] (34 points) -> 1; (1/3,2/3] (33 points) -> 2/3; rest -> 0.
        let ap = interpolated_ap(&[true, false, true], 3);
        assert!((ap - (34.0 + 33.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
        assert_eq!(interpolated_ap(&[], 2), 0.0);
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![
            track(1, 1, 0, 1.0, &[(0, rect(0, 0, 3, 3))]),
            track(2, 1, 1, 1.0, &[(0, rect(2, 2, 3, 3))]),
        ];
        let r = evaluate(&gts, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.mean_ap, 1.0);
        assert_eq!(r.ar(1), Some(1.0));
        let r = evaluate(&[], &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.mean_ap, 0.0);
        assert!(evaluate(&gts, &[], &EvalConfig::default()).is_err());
    }

    #[test]
    fn budget_one_halves_recall() {
        let gts = vec![
            track(1, 1, 0, 1.0, &[(0, rect(0, 0, 3, 3))]),
            track(1, 2, 0, 1.0, &[(0, rect(4, 4, 3, 3))]),
        ];
        let preds = vec![gts[0].clone()];
        let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.ar(1), Some(0.5));
        assert_eq!(r.ar(10), Some(0.5));
    }

    #[test]
    fn budget_counts_predictions_of_every_category() {
        let gts = vec![
            track(1, 1, 0, 1.0, &[(0, rect(0, 0, 3, 3))]),
            track(1, 2, 1, 1.0, &[(0, rect(4, 4, 3, 3))]),
        ];
        let mut preds = gts.clone();
        preds[1].score = 0.5;
        let r = evaluate(&preds, &gts, &EvalConfig::default()).unwrap();
        // Category 1 loses its only prediction to the budget.
        assert_eq!(r.ar(1), Some(0.5));
        assert_eq!(r.ar(10), Some(1.0));
    }

    #[test]
    fn identity_accuracy_uses_best_mapping() {
        let v = vec![(7, 1), (7, 1), (8, 1), (9, 2)];
        assert_eq!(identity_accuracy(&[v]), 0.75);
        assert_eq!(identity_accuracy(&[]), 0.0);
    }

    #[test]
    fn bad_thresholds_rejected() {
        let c = EvalConfig {
            iou_thresholds: vec![0.7, 0.5],
            ..EvalConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
