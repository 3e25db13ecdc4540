//! Plain SGD training: the joint detection/tracking loss and a
//! correlation-head-only trainer on precomputed correlation volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detector::{box_deltas, extract_features, heads_graph, jitter_box, mask_target};
use crate::error::{ensure, Error, Result};
use crate::geometry::BBox;
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::ParamSet;
use crate::pipeline::{frame_context, match_logit_vars, refine_rois, roi_vars, ModelParams, PipelineConfig};
use crate::sampling::sample_support;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tracker::{gaussian_target, graph_ops as trk, CorrelationLossKind, TrackerParams};
use crate::video::{FrameObject, Video};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub classification: f64,
    #[serde(rename = "box")]
    pub box_regression: f64,
    pub mask: f64,
    pub correlation: f64,
    pub association: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            classification: 1.0,
            box_regression: 1.0,
            mask: 1.0,
            correlation: 1.0,
            association: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// Jitter applied to ground-truth boxes to form training proposals.
    pub jitter: f64,
    /// Largest distance between the current and the reference frame.
    pub max_frame_gap: usize,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            lr: 1e-2,
            seed: 0,
            jitter: 0.05,
            max_frame_gap: 3,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), "train_config", "lr must be positive");
        ensure!(self.jitter >= 0.0, "train_config", "jitter must be nonnegative");
        ensure!(self.max_frame_gap >= 1, "train_config", "max_frame_gap must be at least 1");
        Ok(())
    }
}

/// Loss terms of one step (weighted total included).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub classification: f64,
    pub box_regression: f64,
    pub mask: f64,
    pub correlation: f64,
    pub association: f64,
    pub total: f64,
}

fn checked<T: Scalar>(g: &Graph<T>, v: Var, term: &str) -> Result<f64> {
    let x = g.value(v).data()[0].to_f64_lossy();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Numerical {
            term: term.to_string(),
            value: x,
        })
    }
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let s = g.add_all(terms)?;
    Ok(Some(g.scale(s, T::lit(1.0 / terms.len() as f64))))
}

/// Backbone features of every frame of every video.
pub fn precompute_features<T: Scalar>(videos: &[Video], params: &ModelParams<T>) -> Result<Vec<Vec<Tensor<T>>>> {
    use rayon::prelude::*;
    videos
        .par_iter()
        .map(|v| v.frames.iter().map(|f| extract_features(f, &params.backbone)).collect())
        .collect()
}

fn pick_reference<R: Rng>(len: usize, t: usize, max_gap: usize, rng: &mut R) -> usize {
    if len == 1 {
        return t;
    }
    let lo = t.saturating_sub(max_gap);
    let hi = (t + max_gap).min(len - 1);
    loop {
        let r = rng.gen_range(lo..=hi);
        if r != t {
            return r;
        }
    }
}

/// One training sample: current and reference frame of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: usize,
    pub current: usize,
    pub reference: usize,
    pub current_supports: Vec<usize>,
    pub reference_supports: Vec<usize>,
}

/// Draws a sample whose current frame has at least one object.
pub fn draw_sample<R: Rng>(videos: &[Video], pcfg: &PipelineConfig, tcfg: &TrainConfig, rng: &mut R) -> Result<Sample> {
    ensure!(!videos.is_empty(), "train", "no training videos");
    for _ in 0..1000 {
        let v = rng.gen_range(0..videos.len());
        let len = videos[v].frames.len();
        if len == 0 {
            continue;
        }
        let t = rng.gen_range(0..len);
        if videos[v].annotation.frame_objects(t).is_empty() {
            continue;
        }
        let r = pick_reference(len, t, tcfg.max_frame_gap, rng);
        let cs = sample_support(len, t, pcfg.t_train, pcfg.train_sampling_mode, rng.gen())?;
        let rs = sample_support(len, r, pcfg.t_train, pcfg.train_sampling_mode, rng.gen())?;
        return Ok(Sample {
            video: v,
            current: t,
            reference: r,
            current_supports: cs,
            reference_supports: rs,
        });
    }
    Err(Error::Data("training videos contain no annotated objects".into()))
}

/// Joint loss of one sample and its gradient step.
pub fn train_step<T: Scalar, R: Rng>(
    params: &mut ModelParams<T>,
    videos: &[Video],
    features: &[Vec<Tensor<T>>],
    sample: &Sample,
    pcfg: &PipelineConfig,
    tcfg: &TrainConfig,
    rng: &mut R,
) -> Result<LossTerms> {
    let feats = &features[sample.video];
    let ann = &videos[sample.video].annotation;
    let cur: Vec<FrameObject> = ann.frame_objects(sample.current);
    let refs: Vec<FrameObject> = ann.frame_objects(sample.reference);
    let d = &pcfg.detector;
    let inv = 1.0 / d.stride as f64;
    let (fh, fw) = (feats[sample.current].dim(1), feats[sample.current].dim(2));

    let mut g = Graph::new();
    let vars = params.bind(&mut g, true);
    let sup = |idx: &[usize]| idx.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>();
    let ctx_c = frame_context(&mut g, &vars, &feats[sample.current], &sup(&sample.current_supports), pcfg)?;
    let ctx_r = frame_context(&mut g, &vars, &feats[sample.reference], &sup(&sample.reference_supports), pcfg)?;

    let boxes_c: Vec<BBox> = cur.iter().map(|o| jitter_box(&o.bbox, tcfg.jitter, rng)).collect();
    let boxes_r: Vec<BBox> = refs.iter().map(|o| jitter_box(&o.bbox, tcfg.jitter, rng)).collect();
    let raw_c = roi_vars(&mut g, &ctx_c, &boxes_c, pcfg)?;
    let rois_c = refine_rois(&mut g, &vars, &ctx_c, &raw_c)?;
    let raw_r = roi_vars(&mut g, &ctx_r, &boxes_r, pcfg)?;
    let rois_r = refine_rois(&mut g, &vars, &ctx_r, &raw_r)?;

    let k = d.num_categories;
    let (mut cls, mut bx, mut msk) = (Vec::new(), Vec::new(), Vec::new());
    for ((o, b), &roi) in cur.iter().zip(&boxes_c).zip(&rois_c) {
        let out = heads_graph(&mut g, roi, &vars.heads, d.mask_size)?;
        let ls = g.log_softmax(out.class_logits, 0)?;
        let lp = g.pick(ls, o.category.min(k - 1))?;
        cls.push(g.scale(lp, -T::one()));
        let dt = box_deltas(b, &o.bbox);
        let target = g.constant(Tensor::new([4], dt.iter().map(|&x| T::lit(x)).collect())?);
        bx.push(g.mse(out.box_deltas, target)?);
        let mt = g.constant(mask_target(&o.mask, b, d.mask_size).cast());
        msk.push(g.bce_with_logits(out.mask_logits, mt)?);
    }

    let (logits, corrs) = match_logit_vars(&mut g, &vars, &ctx_c, &rois_c, &boxes_c, &rois_r, pcfg)?;
    let mut assoc_logits = Vec::new();
    let mut assoc_targets = Vec::new();
    for (q, row) in logits.iter().enumerate() {
        for (p, &l) in row.iter().enumerate() {
            assoc_logits.push(l);
            assoc_targets.push(if refs[q].identity == cur[p].identity { T::one() } else { T::zero() });
        }
    }
    let mut corr = Vec::new();
    for (q, c) in corrs.iter().enumerate() {
        let (Some(c), Some(o)) = (c, cur.iter().find(|o| o.identity == refs[q].identity)) else {
            continue;
        };
        let b = o.bbox.scaled(inv);
        let (cx, cy) = b.center();
        if !(0.0..fw as f64).contains(&cx) || !(0.0..fh as f64).contains(&cy) {
            continue;
        }
        let target = g.constant(gaussian_target(&b, fh, fw, pcfg.tracker.sigma_factor)?);
        corr.push(trk::correlation_loss(&mut g, c.likelihood_map, target, pcfg.tracker.loss)?);
    }

    let w = tcfg.loss_weights;
    let mut terms = LossTerms::default();
    let mut weighted = Vec::new();
    let named: [(&str, Option<Var>, f64); 4] = [
        ("classification", mean_of(&mut g, &cls)?, w.classification),
        ("box", mean_of(&mut g, &bx)?, w.box_regression),
        ("mask", mean_of(&mut g, &msk)?, w.mask),
        ("correlation", mean_of(&mut g, &corr)?, w.correlation),
    ];
    for (name, v, weight) in named {
        if let Some(v) = v {
            let x = checked(&g, v, name)?;
            match name {
                "classification" => terms.classification = x,
                "box" => terms.box_regression = x,
                "mask" => terms.mask = x,
                _ => terms.correlation = x,
            }
            weighted.push(g.scale(v, T::lit(weight)));
        }
    }
    if !assoc_logits.is_empty() {
        let n = assoc_logits.len();
        let l = g.stack(&assoc_logits)?;
        let l = g.reshape(l, [n])?;
        let t = g.constant(Tensor::new([n], assoc_targets)?);
        let a = g.bce_with_logits(l, t)?;
        terms.association = checked(&g, a, "association")?;
        weighted.push(g.scale(a, T::lit(w.association)));
    }
    let total = g.add_all(&weighted)?;
    terms.total = checked(&g, total, "total")?;
    let grads = g.backward(total)?;
    params.sgd_step(&vars.bounds(), &grads, T::lit(tcfg.lr));
    if !params.is_finite() {
        return Err(Error::Numerical {
            term: "parameters".into(),
            value: f64::NAN,
        });
    }
    Ok(terms)
}

/// Runs `tcfg.steps` SGD steps; returns the per-step loss terms.
pub fn train<T: Scalar>(
    params: &mut ModelParams<T>,
    videos: &[Video],
    pcfg: &PipelineConfig,
    tcfg: &TrainConfig,
) -> Result<Vec<LossTerms>> {
    pcfg.validate()?;
    tcfg.validate()?;
    if tcfg.steps == 0 {
        return Ok(Vec::new());
    }
    let features = precompute_features(videos, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut history = Vec::with_capacity(tcfg.steps);
    for _ in 0..tcfg.steps {
        let s = draw_sample(videos, pcfg, tcfg, &mut rng)?;
        history.push(train_step(params, videos, &features, &s, pcfg, tcfg, &mut rng)?);
    }
    Ok(history)
}

/// A scaled correlation volume with its gaussian target.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationSample<T> {
    /// `[C,H,W]`
    pub volume: Tensor<T>,
    /// `[1,H,W]`
    pub target: Tensor<T>,
    /// Object center on the feature grid.
    pub center: (f64, f64),
}

/// Correlation volumes between an object's ROI in one frame and the full
/// feature map of a frame up to `max_gap` frames away, for every object
/// visible in both.
pub fn correlation_samples<T: Scalar>(
    videos: &[Video],
    params: &ModelParams<T>,
    pcfg: &PipelineConfig,
    max_gap: usize,
    seed: u64,
) -> Result<Vec<CorrelationSample<T>>> {
    let features = precompute_features(videos, params)?;
    let d = &pcfg.detector;
    let inv = 1.0 / d.stride as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (v, feats) in videos.iter().zip(&features) {
        let len = v.frames.len();
        for t in 0..len {
            let r = pick_reference(len, t, max_gap.max(1), &mut rng);
            let refs = v.annotation.frame_objects(r);
            let cur = v.annotation.frame_objects(t);
            let (fh, fw) = (feats[t].dim(1), feats[t].dim(2));
            for o in &cur {
                let Some(ro) = refs.iter().find(|x| x.identity == o.identity) else {
                    continue;
                };
                let roi = ops::roi_align(&feats[r], &ro.bbox.scaled(inv), d.roi_size, d.roi_size, d.samples_per_bin)?;
                let x = ops::depthwise_xcorr(&roi, &feats[t], true)?;
                let volume = x.scale(T::lit(1.0 / (d.roi_size * d.roi_size) as f64));
                let b = o.bbox.scaled(inv);
                out.push(CorrelationSample {
                    volume,
                    target: gaussian_target(&b, fh, fw, pcfg.tracker.sigma_factor)?,
                    center: b.center(),
                });
            }
        }
    }
    Ok(out)
}

fn correlation_batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    params: &TrackerParams<T>,
    batch: &[&CorrelationSample<T>],
    kind: CorrelationLossKind,
) -> Result<(Var, Vec<crate::params::Bound>)> {
    let vars = params.bind(g, true);
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        let x = g.constant(s.volume.clone());
        let c = trk::refine_volume(g, x, &vars)?;
        let t = g.constant(s.target.clone());
        losses.push(trk::correlation_loss(g, c.likelihood_map, t, kind)?);
    }
    let loss = mean_of(g, &losses)?.ok_or_else(|| Error::contract("train_correlation", "empty batch"))?;
    Ok((loss, vars.0.to_vec()))
}

/// Mean correlation loss of `samples` under `params`.
pub fn correlation_loss_on<T: Scalar>(params: &TrackerParams<T>, samples: &[CorrelationSample<T>]) -> Result<f64> {
    let mut g = Graph::new();
    let batch: Vec<&CorrelationSample<T>> = samples.iter().collect();
    let (loss, _) = correlation_batch_loss(&mut g, params, &batch, params.config.loss)?;
    checked(&g, loss, "correlation")
}

/// Loss trajectory of [`train_correlation_head`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTrainReport {
    /// Mean loss over all samples before training.
    pub initial: f64,
    /// Mean loss over all samples after training.
    pub last: f64,
    /// Mini-batch loss of every step.
    pub batch_losses: Vec<f64>,
}

/// SGD on the refine convs only.
pub fn train_correlation_head<T: Scalar>(
    params: &mut TrackerParams<T>,
    samples: &[CorrelationSample<T>],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<CorrelationTrainReport> {
    ensure!(!samples.is_empty(), "train_correlation", "no samples");
    ensure!(batch_size > 0, "train_correlation", "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = correlation_loss_on(params, samples)?;
    let mut batch_losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<&CorrelationSample<T>> = (0..batch_size)
            .map(|_| &samples[rng.gen_range(0..samples.len())])
            .collect();
        let mut g = Graph::new();
        let (loss, bounds) = correlation_batch_loss(&mut g, params, &batch, params.config.loss)?;
        batch_losses.push(checked(&g, loss, "correlation")?);
        let grads = g.backward(loss)?;
        let layers = params.layers_mut();
        for (i, p) in layers.into_iter().enumerate().take(2) {
            p.sgd(&bounds[i], &grads, T::lit(lr));
        }
    }
    Ok(CorrelationTrainReport {
        initial,
        last: correlation_loss_on(params, samples)?,
        batch_losses,
    })
}

/// Distance on the feature grid between the likelihood-map argmax cell
/// center and the object center.
pub fn localization_error<T: Scalar>(params: &TrackerParams<T>, sample: &CorrelationSample<T>) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(sample.volume.clone());
    let c = trk::refine_volume(&mut g, x, &vars)?;
    let m = g.value(c.likelihood_map);
    let w = m.dim(2);
    let i = m.argmax().unwrap_or(0);
    let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
    Ok(((x - sample.center.0).powi(2) + (y - sample.center.1).powi(2)).sqrt())
}
