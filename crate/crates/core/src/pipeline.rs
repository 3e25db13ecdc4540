//! Online per-video inference: feature aggregation, proposals, heads,
//! tracking and identity memory.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{graph_ops as attn, AttentionParams, AttentionVars, SupportVars};
use crate::detector::{
    extract_features, heads_graph, paste_mask, propose, BackboneParams, DetectorConfig, HeadParams, HeadVars,
    ProposalMode,
};
use crate::error::{ensure, Result};
use crate::geometry::{BBox, Mask};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::{Bound, OpParams, ParamSet};
use crate::sampling::{frame_seed, sample_support, sample_support_causal, SamplingMode};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tracker::{
    assign_from_scores, combined_scores, graph_ops as trk, Assignment, CorrelationVars, DetectionCue, TrackState,
    TrackerConfig, TrackerParams, TrackerVars,
};
use crate::video::{Frame, FrameObject, InstanceTrack, TrackEntry, Video, VideoAnnotation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Support frames per training sample.
    pub t_train: usize,
    /// Support frames per frame at inference.
    pub t_test: usize,
    /// Sampling used at inference.
    pub sampling_mode: SamplingMode,
    /// Sampling used during training.
    pub train_sampling_mode: SamplingMode,
    pub seed: u64,
    pub proposal_mode: ProposalMode,
    /// Oracle jitter as a fraction of box size.
    pub jitter: f64,
    pub enable_frame_attention: bool,
    pub enable_object_attention: bool,
    pub enable_correlation_map: bool,
    /// Frames a track may go unseen before it is retired; `null` keeps it forever.
    pub memory_horizon: Option<usize>,
    /// Restrict supports to frames at or before the current one.
    pub strict_causal: bool,
    /// Weight of the old reference ROI when a track is matched (0 replaces it).
    pub reference_momentum: f64,
    /// Use the mask supplied by the proposal source instead of the mask head.
    pub use_proposal_masks: bool,
    /// Use the category supplied by the proposal source instead of the classifier.
    pub use_proposal_categories: bool,
    pub attention_reduction: usize,
    pub detector: DetectorConfig,
    pub tracker: TrackerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_train: 2,
            t_test: 4,
            sampling_mode: SamplingMode::Uniform,
            train_sampling_mode: SamplingMode::Uniform,
            seed: 0,
            proposal_mode: ProposalMode::Oracle,
            jitter: 0.0,
            enable_frame_attention: true,
            enable_object_attention: true,
            enable_correlation_map: true,
            memory_horizon: Some(10),
            strict_causal: false,
            reference_momentum: 0.0,
            use_proposal_masks: true,
            use_proposal_categories: true,
            attention_reduction: crate::attention::DEFAULT_REDUCTION,
            detector: DetectorConfig::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.memory_horizon != Some(0),
            "pipeline_config",
            "memory_horizon must be at least 1"
        );
        ensure!(self.jitter >= 0.0, "pipeline_config", "jitter must be nonnegative");
        ensure!(
            (0.0..1.0).contains(&self.reference_momentum),
            "pipeline_config",
            "reference_momentum must lie in [0,1)"
        );
        self.detector.validate()?;
        self.tracker.validate()
    }
}

/// Every parameter of the model. The backbone stays fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub backbone: BackboneParams<T>,
    pub frame_attention: AttentionParams<T>,
    pub object_attention: AttentionParams<T>,
    pub heads: HeadParams<T>,
    pub tracker: TrackerParams<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn new(config: &PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = &config.detector;
        let c = d.channels;
        Ok(Self {
            backbone: BackboneParams::new(d.stride, c, seed)?,
            frame_attention: AttentionParams::new(c, config.attention_reduction, seed.wrapping_add(1))?,
            object_attention: AttentionParams::new(c, config.attention_reduction, seed.wrapping_add(2))?,
            heads: HeadParams::new(c, d.num_categories, seed.wrapping_add(3)),
            tracker: TrackerParams::new(c, config.tracker.clone(), seed.wrapping_add(4))?,
        })
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        ModelVars {
            frame: self.frame_attention.bind(g, trainable),
            object: self.object_attention.bind(g, trainable),
            heads: self.heads.bind(g, trainable),
            tracker: self.tracker.bind(g, trainable),
        }
    }
}

impl<T: Scalar> ParamSet<T> for ModelParams<T> {
    fn layers(&self) -> Vec<&OpParams<T>> {
        let mut v = self.frame_attention.layers();
        v.extend(self.object_attention.layers());
        v.extend(self.heads.layers());
        v.extend(self.tracker.layers());
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut OpParams<T>> {
        let mut v = self.frame_attention.layers_mut();
        v.extend(self.object_attention.layers_mut());
        v.extend(self.heads.layers_mut());
        v.extend(self.tracker.layers_mut());
        v
    }
}

/// Graph handles of the trainable [`ModelParams`].
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub frame: AttentionVars,
    pub object: AttentionVars,
    pub heads: HeadVars,
    pub tracker: TrackerVars,
}

impl ModelVars {
    /// Bindings in [`ParamSet::layers`] order.
    pub fn bounds(&self) -> Vec<Bound> {
        let mut v = self.frame.0.to_vec();
        v.extend(self.object.0);
        v.extend(self.heads.0);
        v.extend(self.tracker.0);
        v
    }
}

/// Aggregated current-frame features and the object-level support embedding.
#[derive(Clone, Copy, Debug)]
pub struct FrameContext {
    pub features: Var,
    pub object_support: Option<SupportVars>,
}

/// Frame-level aggregation; an empty support list falls back to the frame itself.
pub fn frame_context<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    current: &Tensor<T>,
    supports: &[Tensor<T>],
    config: &PipelineConfig,
) -> Result<FrameContext> {
    let fc = g.constant(current.clone());
    let sup: Vec<Var> = if supports.is_empty() {
        vec![fc]
    } else {
        supports.iter().map(|s| g.constant(s.clone())).collect()
    };
    let features = if config.enable_frame_attention {
        let s = attn::embed_support(g, &sup, &vars.frame)?;
        attn::dual_attention(g, fc, s, &vars.frame)?
    } else {
        fc
    };
    let object_support = if config.enable_object_attention {
        Some(attn::embed_support(g, &sup, &vars.object)?)
    } else {
        None
    };
    Ok(FrameContext {
        features,
        object_support,
    })
}

/// ROI features for `boxes` (frame coordinates) from the aggregated map.
pub fn roi_vars<T: Scalar>(g: &mut Graph<T>, ctx: &FrameContext, boxes: &[BBox], config: &PipelineConfig) -> Result<Vec<Var>> {
    let d = &config.detector;
    let inv = 1.0 / d.stride as f64;
    boxes
        .iter()
        .map(|b| g.roi_align(ctx.features, &b.scaled(inv), d.roi_size, d.roi_size, d.samples_per_bin))
        .collect()
}

/// Object-level aggregation of each ROI (identity when disabled).
pub fn refine_rois<T: Scalar>(g: &mut Graph<T>, vars: &ModelVars, ctx: &FrameContext, rois: &[Var]) -> Result<Vec<Var>> {
    match ctx.object_support {
        Some(s) => attn::object_dual_attention(g, rois, s, &vars.object),
        None => Ok(rois.to_vec()),
    }
}

/// Match logits `[q][p]` (each a one-element var) and the per-reference correlation outputs.
pub fn match_logit_vars<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ModelVars,
    ctx: &FrameContext,
    det_rois: &[Var],
    det_boxes: &[BBox],
    ref_rois: &[Var],
    config: &PipelineConfig,
) -> Result<(Vec<Vec<Var>>, Vec<Option<CorrelationVars>>)> {
    let inv = 1.0 / config.detector.stride as f64;
    let mut logits = Vec::with_capacity(ref_rois.len());
    let mut corrs = Vec::with_capacity(ref_rois.len());
    for &r in ref_rois {
        let corr = if config.enable_correlation_map {
            Some(trk::correlation_map(g, r, ctx.features, &vars.tracker)?)
        } else {
            None
        };
        let mut row = Vec::with_capacity(det_rois.len());
        for (&d, b) in det_rois.iter().zip(det_boxes) {
            let vp = trk::pair_vector(g, d, r, &vars.tracker)?;
            let vm = match corr {
                Some(c) => Some(trk::map_vector(g, c, &b.scaled(inv), &config.tracker)?),
                None => None,
            };
            row.push(trk::match_score(g, vp, vm, &vars.tracker)?);
        }
        logits.push(row);
        corrs.push(corr);
    }
    Ok((logits, corrs))
}

/// Backbone features keyed by frame index, computed once per video.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache<T> {
    map: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn get(&mut self, frame: &Frame, backbone: &BackboneParams<T>) -> Result<Tensor<T>> {
        if let Some(t) = self.map.get(&frame.index) {
            return Ok(t.clone());
        }
        let f = extract_features(frame, backbone)?;
        self.map.insert(frame.index, f.clone());
        Ok(f)
    }
}

/// Live identity memory of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoState<T> {
    pub tracks: Vec<TrackState<T>>,
    pub next_identity: u64,
    /// Identities retired so far, in retirement order.
    pub retired: Vec<u64>,
}

impl<T> Default for VideoState<T> {
    fn default() -> Self {
        Self {
            tracks: Vec::new(),
            next_identity: 1,
            retired: Vec::new(),
        }
    }
}

/// One output detection of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDetection {
    pub frame: usize,
    pub identity: u64,
    pub bbox: BBox,
    pub mask: Mask,
    pub category: usize,
    pub confidence: f64,
    /// Logistic of the match logit of the track it joined; 1 for a new identity.
    pub match_probability: f64,
    /// Ground-truth identity behind an oracle proposal.
    pub source_identity: Option<u64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Ground-truth identity whose mask overlaps `mask` with IoU at least 0.5.
fn best_overlap(mask: &Mask, objs: &[FrameObject]) -> Option<u64> {
    objs.iter()
        .filter(|o| o.mask.height() == mask.height() && o.mask.width() == mask.width())
        .map(|o| {
            let (inter, union) = mask.overlap(&o.mask);
            (o.identity, if union == 0 { 0.0 } else { inter as f64 / union as f64 })
        })
        .filter(|&(_, iou)| iou >= 0.5)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(id, _)| id)
}

/// Runs the full model on one frame and updates the identity memory.
#[allow(clippy::too_many_arguments)]
pub fn process_frame<T: Scalar>(
    state: &mut VideoState<T>,
    frame: &Frame,
    supports: &[&Frame],
    gt: Option<&[FrameObject]>,
    config: &PipelineConfig,
    params: &ModelParams<T>,
    cache: &mut FeatureCache<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FrameDetection>> {
    let t = frame.index;
    if let Some(h) = config.memory_horizon {
        let (keep, gone): (Vec<_>, Vec<_>) = state
            .tracks
            .drain(..)
            .partition(|tr| t.saturating_sub(tr.last_frame) <= h);
        state.tracks = keep;
        state.retired.extend(gone.iter().map(|tr| tr.identity));
    }

    let feats = cache.get(frame, &params.backbone)?;
    let sup_feats = supports
        .iter()
        .map(|s| cache.get(s, &params.backbone))
        .collect::<Result<Vec<_>>>()?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let ctx = frame_context(&mut g, &vars, &feats, &sup_feats, config)?;
    let proposals = propose(
        frame,
        g.value(ctx.features),
        config.proposal_mode,
        gt,
        config.jitter,
        &config.detector,
        rng,
    )?;
    if proposals.is_empty() {
        return Ok(Vec::new());
    }
    let raw: Vec<Var> = proposals.iter().map(|p| g.constant(p.roi_features.clone())).collect();
    let rois = refine_rois(&mut g, &vars, &ctx, &raw)?;

    let (h, w) = (frame.height(), frame.width());
    let mut cues = Vec::with_capacity(proposals.len());
    let mut masks = Vec::with_capacity(proposals.len());
    for (p, &roi) in proposals.iter().zip(&rois) {
        let out = heads_graph(&mut g, roi, &vars.heads, config.detector.mask_size)?;
        let probs: Vec<f64> = ops::softmax_axis(g.value(out.class_logits), 0)?
            .data()
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        let category = match (config.use_proposal_categories, p.source_category) {
            (true, Some(c)) => c,
            _ => argmax(&probs),
        };
        let mask = match (&p.source_mask, config.use_proposal_masks) {
            (Some(m), true) => m.clone(),
            _ => paste_mask(g.value(out.mask_logits), &p.bbox, h, w),
        };
        cues.push(DetectionCue {
            bbox: p.bbox,
            confidence: p.detection_confidence,
            category,
        });
        masks.push(mask);
    }

    let refs: Vec<Var> = state.tracks.iter().map(|tr| g.constant(tr.reference_roi.clone())).collect();
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let (logit_vars, _) = match_logit_vars(&mut g, &vars, &ctx, &rois, &boxes, &refs, config)?;
    let (q, np) = (refs.len(), proposals.len());
    let logits = Tensor::from_fn([q, np], |i| g.value(logit_vars[i / np][i % np]).data()[0]);
    let scores = combined_scores(&logits, &cues, &state.tracks, &config.tracker)?;
    let assignment = assign_from_scores(&scores, &cues, config.tracker.new_identity_threshold, config.tracker.association);

    let k = config.detector.num_categories;
    let mut out = Vec::with_capacity(np);
    for (j, a) in assignment.iter().enumerate() {
        let roi = g.value(rois[j]).clone();
        let cue = &cues[j];
        let (identity, prob) = match *a {
            Assignment::Existing(i) => {
                let tr = &mut state.tracks[i];
                let m = T::lit(config.reference_momentum);
                tr.reference_roi = tr.reference_roi.scale(m).add(&roi.scale(T::one() - m))?;
                tr.last_box = cue.bbox;
                tr.category_votes[cue.category.min(k - 1)] += 1;
                tr.last_score = cue.confidence;
                tr.last_frame = t;
                (tr.identity, sigmoid(logits.at(&[i, j]).to_f64_lossy()))
            }
            Assignment::New => {
                let id = state.next_identity;
                state.next_identity += 1;
                let mut votes = vec![0; k];
                votes[cue.category.min(k - 1)] = 1;
                state.tracks.push(TrackState {
                    identity: id,
                    reference_roi: roi,
                    last_box: cue.bbox,
                    category_votes: votes,
                    last_score: cue.confidence,
                    last_frame: t,
                });
                (id, 1.0)
            }
        };
        out.push(FrameDetection {
            frame: t,
            identity,
            bbox: cue.bbox,
            mask: masks[j].clone(),
            category: cue.category,
            confidence: cue.confidence,
            match_probability: prob,
            source_identity: proposals[j]
                .source_identity
                .or_else(|| gt.and_then(|objs| best_overlap(&masks[j], objs))),
        });
    }
    Ok(out)
}

/// Support frame indices for frame `t` at inference.
pub fn inference_supports(len: usize, t: usize, video_id: u64, config: &PipelineConfig) -> Result<Vec<usize>> {
    let seed = frame_seed(config.seed, video_id, t);
    if config.strict_causal {
        sample_support_causal(t, config.t_test, config.sampling_mode, seed)
    } else {
        sample_support(len, t, config.t_test, config.sampling_mode, seed)
    }
}

/// Per-frame detections and the assembled tracks of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoResult {
    pub video_id: u64,
    pub detections: Vec<Vec<FrameDetection>>,
    pub tracks: Vec<InstanceTrack>,
}

/// Processes every frame in order. `frames[i].index` must equal `i`.
pub fn run_video<T: Scalar>(
    frames: &[Frame],
    gt: Option<&VideoAnnotation>,
    config: &PipelineConfig,
    params: &ModelParams<T>,
) -> Result<VideoResult> {
    ensure!(!frames.is_empty(), "run_video", "video has no frames");
    ensure!(
        frames.iter().enumerate().all(|(i, f)| f.index == i),
        "run_video",
        "frame indices must be 0..n in order"
    );
    config.validate()?;
    let video_id = frames[0].video_id;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(video_id);
    let mut state = VideoState::default();
    let mut cache = FeatureCache::new();
    let mut detections = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let sup_idx = inference_supports(frames.len(), t, video_id, config)?;
        let sups: Vec<&Frame> = sup_idx.iter().map(|&i| &frames[i]).collect();
        let objs = gt.map(|a| a.frame_objects(t));
        let dets = process_frame(
            &mut state,
            frame,
            &sups,
            objs.as_deref(),
            config,
            params,
            &mut cache,
            &mut rng,
        )?;
        detections.push(dets);
    }
    let tracks = assemble_tracks(video_id, &detections, config.detector.num_categories);
    Ok(VideoResult {
        video_id,
        detections,
        tracks,
    })
}

/// Groups detections by identity. Category is the majority vote (lowest index
/// on ties); score is the mean of confidence times match probability.
pub fn assemble_tracks(video_id: u64, detections: &[Vec<FrameDetection>], num_categories: usize) -> Vec<InstanceTrack> {
    let mut by_id: Vec<(u64, Vec<&FrameDetection>)> = Vec::new();
    for d in detections.iter().flatten() {
        match by_id.iter_mut().find(|(id, _)| *id == d.identity) {
            Some((_, v)) => v.push(d),
            None => by_id.push((d.identity, vec![d])),
        }
    }
    by_id.sort_by_key(|(id, _)| *id);
    by_id
        .into_iter()
        .map(|(identity, ds)| {
            let mut votes = vec![0usize; num_categories.max(1)];
            let last = votes.len() - 1;
            for d in &ds {
                votes[d.category.min(last)] += 1;
            }
            let category = (0..votes.len()).fold(0, |b, c| if votes[c] > votes[b] { c } else { b });
            let score = ds.iter().map(|d| d.confidence * d.match_probability).sum::<f64>() / ds.len() as f64;
            InstanceTrack {
                video_id,
                identity,
                category,
                score,
                entries: ds
                    .iter()
                    .map(|d| TrackEntry {
                        frame: d.frame,
                        bbox: d.bbox,
                        mask: d.mask.clone(),
                        score: d.confidence,
                    })
                    .collect(),
            }
        })
        .collect()
}

/// Runs every video, in parallel when `jobs > 1`. Output order follows input order.
pub fn run_dataset<T: Scalar>(
    videos: &[Video],
    with_gt: bool,
    config: &PipelineConfig,
    params: &ModelParams<T>,
    jobs: usize,
) -> Result<Vec<VideoResult>> {
    use rayon::prelude::*;
    let run = |v: &Video| run_video(&v.frames, with_gt.then_some(&v.annotation), config, params);
    if jobs <= 1 {
        videos.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| crate::error::Error::Data(format!("thread pool: {e}")))?;
        pool.install(|| videos.par_iter().map(run).collect())
    }
}
