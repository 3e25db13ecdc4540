//! Correlation tracking head and multi-cue identity association.
//!
//! A detection is compared with each live track in two ways: a depth-wise
//! correlation of the two ROI volumes (pair vector), and a correlation of
//! the track's ROI over the whole frame, refined to a likelihood map and
//! pooled inside the detection box (map vector). The summed vectors go
//! through a two-layer score head to give a match logit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::BBox;
use crate::graph::{Graph, Var};
use crate::hungarian::max_profit_assignment;
use crate::ops;
use crate::params::{Bound, OpParams, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

pub const DEFAULT_WIDTH: usize = 256;

/// Source of the map-side similarity vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapPooling {
    /// Pool the refined multi-channel correlation features.
    #[default]
    RefinedFeatures,
    /// Pool the one-channel likelihood map and repeat it over the width.
    LikelihoodMap,
}

/// Loss between a likelihood map and its gaussian target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationLossKind {
    /// MSE after a logistic squash of the logits.
    SquashedMse,
    /// MSE directly on the logits.
    LogitMse,
    /// Binary cross-entropy of the logits against the soft target.
    #[default]
    Bce,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssociationMode {
    #[default]
    Greedy,
    Hungarian,
}

/// Weights of the detection-confidence, box-IoU and category cues.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CueWeights {
    pub det: f64,
    pub iou: f64,
    pub cat: f64,
}

impl Default for CueWeights {
    fn default() -> Self {
        Self {
            det: 1.0,
            iou: 1.0,
            cat: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Channel width of the refine, pair and score layers.
    pub width: usize,
    pub new_identity_threshold: f64,
    pub cue_weights: CueWeights,
    pub sigma_factor: f64,
    pub map_pooling: MapPooling,
    pub loss: CorrelationLossKind,
    /// Grid used when pooling the map inside a detection box.
    pub pool_size: usize,
    pub samples_per_bin: usize,
    pub association: AssociationMode,
    /// Initial bias of the final score layer.
    pub score_bias_init: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            width: DEFAULT_WIDTH,
            new_identity_threshold: 0.0,
            cue_weights: CueWeights::default(),
            sigma_factor: 0.25,
            map_pooling: MapPooling::default(),
            loss: CorrelationLossKind::default(),
            pool_size: 3,
            samples_per_bin: 2,
            association: AssociationMode::default(),
            score_bias_init: -1.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.width > 0, "tracker_config", "width must be positive");
        ensure!(self.sigma_factor > 0.0, "tracker_config", "sigma_factor must be positive");
        ensure!(self.pool_size > 0 && self.samples_per_bin > 0, "tracker_config", "pool grid must be positive");
        let w = self.cue_weights;
        ensure!(
            w.det.is_finite() && w.iou.is_finite() && w.cat.is_finite() && self.new_identity_threshold.is_finite(),
            "tracker_config",
            "cue weights and threshold must be finite"
        );
        Ok(())
    }
}

/// Learned layers of the tracking head plus its hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackerParams<T> {
    /// C -> width
    pub refine_conv_1: OpParams<T>,
    /// width -> 1
    pub refine_conv_2: OpParams<T>,
    /// C -> width
    pub pair_proj: OpParams<T>,
    /// width -> width
    pub score_conv_1: OpParams<T>,
    /// width -> 1
    pub score_conv_2: OpParams<T>,
    pub config: TrackerConfig,
}

impl<T: Scalar> TrackerParams<T> {
    pub fn new(channels: usize, config: TrackerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        ensure!(channels > 0, "tracker_params", "channel count must be positive");
        let w = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut score_conv_2 = OpParams::zeros(1, w);
        score_conv_2.bias = Tensor::full([1], T::lit(config.score_bias_init));
        Ok(Self {
            refine_conv_1: OpParams::fan_in(w, channels, &mut rng),
            refine_conv_2: OpParams::fan_in(1, w, &mut rng),
            pair_proj: OpParams::fan_in(w, channels, &mut rng),
            score_conv_1: OpParams::fan_in(w, w, &mut rng),
            score_conv_2,
            config,
        })
    }

    pub fn channels(&self) -> usize {
        self.pair_proj.in_channels()
    }

    pub fn width(&self) -> usize {
        self.pair_proj.out_channels()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> TrackerVars {
        TrackerVars(self.bind_all(g, trainable).try_into().expect("five tracker layers"))
    }
}

impl<T: Scalar> ParamSet<T> for TrackerParams<T> {
    fn layers(&self) -> Vec<&OpParams<T>> {
        vec![
            &self.refine_conv_1,
            &self.refine_conv_2,
            &self.pair_proj,
            &self.score_conv_1,
            &self.score_conv_2,
        ]
    }

    fn layers_mut(&mut self) -> Vec<&mut OpParams<T>> {
        vec![
            &mut self.refine_conv_1,
            &mut self.refine_conv_2,
            &mut self.pair_proj,
            &mut self.score_conv_1,
            &mut self.score_conv_2,
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrackerVars(pub [Bound; 5]);

/// Per-identity memory kept between frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackState<T> {
    pub identity: u64,
    /// `[C, h, w]`
    pub reference_roi: Tensor<T>,
    pub last_box: BBox,
    pub category_votes: Vec<usize>,
    pub last_score: f64,
    pub last_frame: usize,
}

impl<T> TrackState<T> {
    /// Most voted category; ties go to the lower index. `None` without votes.
    pub fn mode_category(&self) -> Option<usize> {
        let (mut best, mut count) = (None, 0);
        for (c, &v) in self.category_votes.iter().enumerate() {
            if v > count {
                best = Some(c);
                count = v;
            }
        }
        best
    }
}

/// Refined correlation features and the one-channel likelihood logits.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationOutput<T> {
    /// `[width, H, W]`
    pub refined_features: Tensor<T>,
    /// `[1, H, W]`
    pub likelihood_map: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct CorrelationVars {
    pub refined_features: Var,
    pub likelihood_map: Var,
}

pub mod graph_ops {
    //! Differentiable forms of the tracking head.

    use super::*;

    /// Zero-offset depth-wise correlation of two equal-size ROIs, `[C,1,1]`, divided by `h*w`.
    pub fn pair_correlation<T: Scalar>(g: &mut Graph<T>, det: Var, reference: Var) -> Result<Var> {
        let s = g.shape(det).to_vec();
        ensure!(
            s.len() == 3 && g.shape(reference) == s.as_slice(),
            "pairwise_similarity",
            "roi shapes differ: {:?} vs {:?}",
            s,
            g.shape(reference)
        );
        let x = g.depthwise_xcorr(reference, det, false)?;
        Ok(g.scale(x, T::lit(1.0 / (s[1] * s[2]) as f64)))
    }

    /// Pair vector `[width,1,1]`.
    pub fn pair_vector<T: Scalar>(g: &mut Graph<T>, det: Var, reference: Var, p: &TrackerVars) -> Result<Var> {
        let x = pair_correlation(g, det, reference)?;
        p.0[2].conv(g, x)
    }

    /// Template-over-frame correlation, refined.
    pub fn correlation_map<T: Scalar>(
        g: &mut Graph<T>,
        reference: Var,
        frame: Var,
        p: &TrackerVars,
    ) -> Result<CorrelationVars> {
        let s = g.shape(reference).to_vec();
        ensure!(s.len() == 3, "correlation_map", "reference must be [C,h,w], got {:?}", s);
        let x = g.depthwise_xcorr(reference, frame, true)?;
        let x = g.scale(x, T::lit(1.0 / (s[1] * s[2]) as f64));
        refine_volume(g, x, p)
    }

    /// Refine convs applied to a scaled correlation volume `[C,H,W]`.
    pub fn refine_volume<T: Scalar>(g: &mut Graph<T>, volume: Var, p: &TrackerVars) -> Result<CorrelationVars> {
        let r = p.0[0].conv(g, volume)?;
        let r = g.relu(r);
        let m = p.0[1].conv(g, r)?;
        Ok(CorrelationVars {
            refined_features: r,
            likelihood_map: m,
        })
    }

    /// Map vector `[width,1,1]` pooled inside `det_box` (feature coordinates).
    pub fn map_vector<T: Scalar>(
        g: &mut Graph<T>,
        corr: CorrelationVars,
        det_box: &BBox,
        config: &TrackerConfig,
    ) -> Result<Var> {
        let (k, spb) = (config.pool_size, config.samples_per_bin);
        match config.map_pooling {
            MapPooling::RefinedFeatures => {
                let r = g.roi_align(corr.refined_features, det_box, k, k, spb)?;
                g.mean_spatial(r)
            }
            MapPooling::LikelihoodMap => {
                let width = g.shape(corr.refined_features)[0];
                let r = g.roi_align(corr.likelihood_map, det_box, k, k, spb)?;
                let m = g.mean_spatial(r)?;
                let ones = g.constant(Tensor::ones([width, 1]));
                let zero = g.constant(Tensor::zeros([width]));
                g.conv1x1(m, ones, zero)
            }
        }
    }

    /// Scalar logit `[1]` from the summed vectors.
    pub fn match_score<T: Scalar>(g: &mut Graph<T>, v_pair: Var, v_map: Option<Var>, p: &TrackerVars) -> Result<Var> {
        let v = match v_map {
            Some(m) => g.add(v_pair, m)?,
            None => v_pair,
        };
        let width = g.shape(v).iter().product::<usize>();
        let v = g.reshape(v, [width, 1, 1])?;
        let h = p.0[3].conv(g, v)?;
        let h = g.relu(h);
        let s = p.0[4].conv(g, h)?;
        g.reshape(s, [1])
    }

    pub fn correlation_loss<T: Scalar>(
        g: &mut Graph<T>,
        likelihood_map: Var,
        target: Var,
        kind: CorrelationLossKind,
    ) -> Result<Var> {
        ensure!(
            g.shape(likelihood_map) == g.shape(target),
            "correlation_loss",
            "map {:?} and target {:?} differ",
            g.shape(likelihood_map),
            g.shape(target)
        );
        match kind {
            CorrelationLossKind::SquashedMse => {
                let s = g.sigmoid(likelihood_map);
                g.mse(s, target)
            }
            CorrelationLossKind::LogitMse => g.mse(likelihood_map, target),
            CorrelationLossKind::Bce => g.bce_with_logits(likelihood_map, target),
        }
    }
}

fn check_rois<T: Scalar>(rois: &Tensor<T>, what: &str) -> Result<()> {
    expect_rank(rois, 4, "pairwise_similarity", what)?;
    Ok(())
}

/// Raw pre-projection pair correlation `Σ_{y,x} a[c,y,x] b[c,y,x]` per channel.
pub fn pair_correlation_raw<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(a.shape() == b.shape(), "pairwise_similarity", "roi shapes differ: {:?} vs {:?}", a.shape(), b.shape());
    let x = ops::depthwise_xcorr(b, a, false)?;
    let c = x.dim(0);
    x.reshape([c])
}

/// `[Q, P, width]` similarity vectors between every reference and detection ROI.
pub fn pairwise_similarity<T: Scalar>(
    det_rois: &Tensor<T>,
    ref_rois: &Tensor<T>,
    params: &TrackerParams<T>,
) -> Result<Tensor<T>> {
    check_rois(det_rois, "det_rois")?;
    check_rois(ref_rois, "ref_rois")?;
    ensure!(
        det_rois.shape()[1..] == ref_rois.shape()[1..],
        "pairwise_similarity",
        "det rois {:?} and ref rois {:?} differ in C,h,w",
        det_rois.shape(),
        ref_rois.shape()
    );
    ensure!(
        det_rois.dim(1) == params.channels(),
        "pairwise_similarity",
        "rois have C={} but the head expects C={}",
        det_rois.dim(1),
        params.channels()
    );
    let (p, q, w) = (det_rois.dim(0), ref_rois.dim(0), params.width());
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let dets = (0..p)
        .map(|i| Ok(g.constant(det_rois.index_axis0(i)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(q * p * w);
    for j in 0..q {
        let r = g.constant(ref_rois.index_axis0(j)?);
        for &d in &dets {
            let v = graph_ops::pair_vector(&mut g, d, r, &vars)?;
            out.extend_from_slice(g.value(v).data());
        }
    }
    Tensor::new([q, p, w], out)
}

pub fn correlation_map<T: Scalar>(
    ref_roi: &Tensor<T>,
    frame_features: &Tensor<T>,
    params: &TrackerParams<T>,
) -> Result<CorrelationOutput<T>> {
    expect_rank(ref_roi, 3, "correlation_map", "reference roi")?;
    expect_rank(frame_features, 3, "correlation_map", "frame features")?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let r = g.constant(ref_roi.clone());
    let f = g.constant(frame_features.clone());
    let c = graph_ops::correlation_map(&mut g, r, f, &vars)?;
    Ok(CorrelationOutput {
        refined_features: g.value(c.refined_features).clone(),
        likelihood_map: g.value(c.likelihood_map).clone(),
    })
}

/// Pseudo likelihood target on an `H x W` grid whose cell `(y,x)` has its
/// center at `(x+0.5, y+0.5)`. `bbox` is in the same grid coordinates.
pub fn gaussian_target<T: Scalar>(bbox: &BBox, height: usize, width: usize, sigma_factor: f64) -> Result<Tensor<T>> {
    ensure!(bbox.is_valid(), "gaussian_target", "degenerate box {:?}", bbox);
    ensure!(sigma_factor > 0.0, "gaussian_target", "sigma_factor must be positive, got {}", sigma_factor);
    let (cx, cy) = bbox.center();
    ensure!(
        (0.0..width as f64).contains(&cx) && (0.0..height as f64).contains(&cy),
        "gaussian_target",
        "box center ({}, {}) outside the {}x{} grid",
        cx,
        cy,
        height,
        width
    );
    let (sx, sy) = (sigma_factor * bbox.w, sigma_factor * bbox.h);
    Ok(Tensor::from_fn([1, height, width], |i| {
        let (y, x) = ((i / width) as f64 + 0.5, (i % width) as f64 + 0.5);
        T::lit((-((x - cx).powi(2) / (2.0 * sx * sx) + (y - cy).powi(2) / (2.0 * sy * sy))).exp())
    }))
}

/// Mean of the refined features (or likelihood map) inside `det_box`, `[width]`.
pub fn map_similarity<T: Scalar>(
    corr: &CorrelationOutput<T>,
    det_box: &BBox,
    config: &TrackerConfig,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let c = CorrelationVars {
        refined_features: g.constant(corr.refined_features.clone()),
        likelihood_map: g.constant(corr.likelihood_map.clone()),
    };
    let v = graph_ops::map_vector(&mut g, c, det_box, config)?;
    let n = g.value(v).numel();
    g.value(v).clone().reshape([n])
}

pub fn match_score<T: Scalar>(v_pair: &Tensor<T>, v_map: &Tensor<T>, params: &TrackerParams<T>) -> Result<T> {
    let w = params.width();
    ensure!(
        v_pair.shape() == [w] && v_map.shape() == [w],
        "match_score",
        "vectors must have length {}, got {:?} and {:?}",
        w,
        v_pair.shape(),
        v_map.shape()
    );
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let a = g.constant(v_pair.clone());
    let b = g.constant(v_map.clone());
    let s = graph_ops::match_score(&mut g, a, Some(b), &vars)?;
    g.value(s).item()
}

pub fn correlation_loss<T: Scalar>(
    likelihood_map: &Tensor<T>,
    target: &Tensor<T>,
    kind: CorrelationLossKind,
) -> Result<T> {
    let mut g = Graph::new();
    let m = g.constant(likelihood_map.clone());
    let t = g.constant(target.clone());
    let l = graph_ops::correlation_loss(&mut g, m, t, kind)?;
    g.value(l).item()
}

/// Outcome for one detection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    /// Index into the track list.
    Existing(usize),
    New,
}

/// What association needs to know about a detection.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionCue {
    pub bbox: BBox,
    pub confidence: f64,
    pub category: usize,
}

/// Combined score `S[q][p]` of match logits and the three cues.
pub fn combined_scores<T: Scalar>(
    match_logits: &Tensor<T>,
    detections: &[DetectionCue],
    tracks: &[TrackState<T>],
    config: &TrackerConfig,
) -> Result<Vec<Vec<f64>>> {
    let (q, p) = (tracks.len(), detections.len());
    ensure!(
        match_logits.shape() == [q, p],
        "associate",
        "match logits {:?} do not match {} tracks x {} detections",
        match_logits.shape(),
        q,
        p
    );
    let w = config.cue_weights;
    Ok(tracks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mode = t.mode_category();
            detections
                .iter()
                .enumerate()
                .map(|(j, d)| {
                    let same = (mode == Some(d.category)) as u8 as f64;
                    match_logits.at(&[i, j]).to_f64_lossy()
                        + w.det * d.confidence.ln()
                        + w.iou * t.last_box.iou(&d.bbox)
                        + w.cat * same
                })
                .collect()
        })
        .collect())
}

/// Assigns each detection to an existing track or a new identity.
pub fn associate<T: Scalar>(
    match_logits: &Tensor<T>,
    detections: &[DetectionCue],
    tracks: &[TrackState<T>],
    config: &TrackerConfig,
    mode: AssociationMode,
) -> Result<Vec<Assignment>> {
    let s = combined_scores(match_logits, detections, tracks, config)?;
    Ok(assign_from_scores(&s, detections, config.new_identity_threshold, mode))
}

/// Association on a precomputed `[Q][P]` score matrix.
pub fn assign_from_scores(
    scores: &[Vec<f64>],
    detections: &[DetectionCue],
    threshold: f64,
    mode: AssociationMode,
) -> Vec<Assignment> {
    let p = detections.len();
    let q = scores.len();
    let mut out = vec![Assignment::New; p];
    if q == 0 || p == 0 {
        return out;
    }
    match mode {
        AssociationMode::Greedy => {
            let mut order: Vec<usize> = (0..p).collect();
            order.sort_by(|&a, &b| {
                detections[b]
                    .confidence
                    .total_cmp(&detections[a].confidence)
                    .then(a.cmp(&b))
            });
            let mut taken = vec![false; q];
            for j in order {
                let best = (0..q)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| scores[a][j].total_cmp(&scores[b][j]).then(b.cmp(&a)));
                if let Some(i) = best {
                    if scores[i][j] >= threshold {
                        taken[i] = true;
                        out[j] = Assignment::Existing(i);
                    }
                }
            }
        }
        AssociationMode::Hungarian => {
            let profit: Vec<Vec<f64>> = scores
                .iter()
                .map(|r| r.iter().map(|&v| (v - threshold).max(0.0)).collect())
                .collect();
            for (i, j) in max_profit_assignment(&profit) {
                if scores[i][j] >= threshold {
                    out[j] = Assignment::Existing(i);
                }
            }
        }
    }
    out
}
