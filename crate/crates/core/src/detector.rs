//! Small fixed backbone, two proposal sources and light prediction heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{BBox, Mask};
use crate::graph::{Graph, Var};
use crate::ops;
use crate::params::{Bound, OpParams, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};
use crate::video::{Frame, FrameObject};

/// Where proposals come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalMode {
    /// Jittered ground-truth boxes.
    Oracle,
    /// Connected components of bright pixels.
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub stride: usize,
    pub channels: usize,
    pub roi_size: usize,
    pub mask_size: usize,
    pub samples_per_bin: usize,
    pub num_categories: usize,
    /// Luminance threshold of the blob detector.
    pub blob_threshold: f64,
    /// Components smaller than this many pixels are ignored.
    pub min_blob_area: usize,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            channels: 32,
            roi_size: 7,
            mask_size: 14,
            samples_per_bin: 2,
            num_categories: 3,
            blob_threshold: 0.2,
            min_blob_area: 4,
            nms_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.stride > 0, "detector_config", "stride must be positive");
        ensure!(self.channels > 0, "detector_config", "channels must be positive");
        ensure!(self.roi_size > 0, "detector_config", "roi_size must be positive");
        ensure!(
            self.mask_size > 0 && self.mask_size.is_multiple_of(self.roi_size),
            "detector_config",
            "mask_size {} must be a positive multiple of roi_size {}",
            self.mask_size,
            self.roi_size
        );
        ensure!(self.samples_per_bin > 0, "detector_config", "samples_per_bin must be positive");
        ensure!(self.num_categories > 0, "detector_config", "num_categories must be positive");
        Ok(())
    }
}

/// Patch embedding (stride x stride, non-overlapping) followed by a pointwise mix.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub stride: usize,
    /// `3*s*s -> C`
    pub embed: OpParams<T>,
    /// `C -> C`
    pub mix: OpParams<T>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn new(stride: usize, channels: usize, seed: u64) -> Result<Self> {
        ensure!(stride > 0 && channels > 0, "backbone", "stride and channels must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cin = 3 * stride * stride;
        let mut embed = OpParams::fan_in(channels, cin, &mut rng);
        // Bias shifted so the embedding responds to pixels centered at 0.5.
        for c in 0..channels {
            let sum = (0..cin).fold(T::zero(), |a, k| a + embed.weight.at(&[c, k]));
            embed.bias.data_mut()[c] -= T::lit(0.5) * sum;
        }
        Ok(Self {
            stride,
            embed,
            mix: OpParams::fan_in(channels, channels, &mut rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.mix.out_channels()
    }
}

fn space_to_depth<T: Scalar>(pixels: &Tensor<f64>, s: usize) -> Tensor<T> {
    let (c, h, w) = (pixels.dim(0), pixels.dim(1) / s, pixels.dim(2) / s);
    let mut out = Tensor::zeros([c * s * s, h, w]);
    let data = out.data_mut();
    for ch in 0..c {
        for dy in 0..s {
            for dx in 0..s {
                let oc = (ch * s + dy) * s + dx;
                for y in 0..h {
                    for x in 0..w {
                        data[(oc * h + y) * w + x] = T::lit(pixels.at(&[ch, y * s + dy, x * s + dx]));
                    }
                }
            }
        }
    }
    out
}

/// `[3,Hi,Wi]` pixels -> `[C, Hi/s, Wi/s]` features (trailing rows/cols dropped).
pub fn extract_features<T: Scalar>(frame: &Frame, params: &BackboneParams<T>) -> Result<Tensor<T>> {
    let s = params.stride;
    ensure!(
        frame.height() >= s && frame.width() >= s,
        "extract_features",
        "frame {}x{} smaller than stride {}",
        frame.height(),
        frame.width(),
        s
    );
    let x = space_to_depth::<T>(&frame.pixels, s);
    let h = ops::relu(&ops::conv1x1(&x, &params.embed.weight, &params.embed.bias)?);
    let mut f = ops::conv1x1(&h, &params.mix.weight, &params.mix.bias)?;
    standardize_channels(&mut f);
    Ok(f)
}

/// Zero mean and unit variance per channel over the spatial extent.
/// Constant channels become zero.
pub fn standardize_channels<T: Scalar>(x: &mut Tensor<T>) {
    let c = x.dim(0);
    let hw = x.numel() / c.max(1);
    let n = T::lit(hw as f64);
    for ch in x.data_mut().chunks_mut(hw) {
        let mean = ch.iter().copied().sum::<T>() / n;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let sd = var.sqrt();
        for v in ch.iter_mut() {
            *v = if sd > T::lit(1e-6) { (*v - mean) / sd } else { T::zero() };
        }
    }
}

/// A candidate object in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectProposal<T> {
    /// Frame (pixel) coordinates.
    pub bbox: BBox,
    /// `[C, roi, roi]`
    pub roi_features: Tensor<T>,
    /// Sums to 1.
    pub category_scores: Vec<f64>,
    /// `[mask, mask]` over the box.
    pub mask_logits: Tensor<T>,
    pub detection_confidence: f64,
    /// Pixel mask supplied by the proposal source (ground truth or component).
    pub source_mask: Option<Mask>,
    /// Category supplied by the proposal source, if any.
    pub source_category: Option<usize>,
    /// Ground-truth identity behind an oracle proposal.
    pub source_identity: Option<u64>,
}

/// Moves each corner by up to `jitter * max(w, h)`; keeps `b` if the result degenerates.
pub fn jitter_box<R: Rng + ?Sized>(b: &BBox, jitter: f64, rng: &mut R) -> BBox {
    if jitter <= 0.0 {
        return *b;
    }
    let r = jitter * b.w.max(b.h);
    let mut d = || rng.gen_range(-r..=r);
    let (x0, y0, x1, y1) = (b.x + d(), b.y + d(), b.x1() + d(), b.y1() + d());
    if x1 > x0 && y1 > y0 {
        BBox::from_corners(x0, y0, x1, y1)
    } else {
        *b
    }
}

fn rec601(p: &Tensor<f64>, y: usize, x: usize) -> f64 {
    0.299 * p.at(&[0, y, x]) + 0.587 * p.at(&[1, y, x]) + 0.114 * p.at(&[2, y, x])
}

/// 4-connected components of pixels brighter than `threshold`.
pub fn bright_components(frame: &Frame, threshold: f64) -> Vec<Mask> {
    let (h, w) = (frame.height(), frame.width());
    let fg = Mask::from_fn(h, w, |y, x| rec601(&frame.pixels, y, x) > threshold);
    let mut label = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !fg.data()[start] || label[start] {
            continue;
        }
        let mut m = Mask::empty(h, w);
        label[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            m.set(y, x, true);
            let mut visit = |j: usize| {
                if fg.data()[j] && !label[j] {
                    label[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        out.push(m);
    }
    out
}

/// Greedy NMS; returns kept indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// Proposals for one frame. `rng` drives oracle jitter only.
pub fn propose<T: Scalar, R: Rng + ?Sized>(
    frame: &Frame,
    features: &Tensor<T>,
    mode: ProposalMode,
    gt: Option<&[FrameObject]>,
    jitter: f64,
    config: &DetectorConfig,
    rng: &mut R,
) -> Result<Vec<ObjectProposal<T>>> {
    expect_rank(features, 3, "propose", "features")?;
    let k = config.num_categories;
    let uniform = vec![1.0 / k as f64; k];
    let mut raw: Vec<(BBox, f64, Option<Mask>, Option<usize>, Option<u64>)> = Vec::new();
    match mode {
        ProposalMode::Oracle => {
            let gt = gt.ok_or_else(|| Error::contract("propose", "oracle mode requires ground truth"))?;
            for o in gt {
                raw.push((
                    jitter_box(&o.bbox, jitter, rng),
                    1.0,
                    Some(o.mask.clone()),
                    Some(o.category),
                    Some(o.identity),
                ));
            }
        }
        ProposalMode::Blob => {
            let comps: Vec<(BBox, f64, Mask)> = bright_components(frame, config.blob_threshold)
                .into_iter()
                .filter(|m| m.area() >= config.min_blob_area)
                .filter_map(|m| {
                    let b = m.tight_bbox()?;
                    let fill = m.area() as f64 / b.area();
                    Some((b, fill, m))
                })
                .collect();
            let boxes: Vec<BBox> = comps.iter().map(|c| c.0).collect();
            let scores: Vec<f64> = comps.iter().map(|c| c.1).collect();
            for i in nms(&boxes, &scores, config.nms_iou) {
                raw.push((comps[i].0, comps[i].1, Some(comps[i].2.clone()), None, None));
            }
        }
    }
    let inv = 1.0 / config.stride as f64;
    raw.into_iter()
        .map(|(bbox, conf, mask, cat, identity)| {
            let roi = ops::roi_align(features, &bbox.scaled(inv), config.roi_size, config.roi_size, config.samples_per_bin)?;
            Ok(ObjectProposal {
                bbox,
                roi_features: roi,
                category_scores: match cat {
                    Some(c) if c < k => one_hot(c, k),
                    _ => uniform.clone(),
                },
                mask_logits: Tensor::zeros([config.mask_size, config.mask_size]),
                detection_confidence: conf,
                source_mask: mask,
                source_category: cat,
                source_identity: identity,
            })
        })
        .collect()
}

fn one_hot(c: usize, k: usize) -> Vec<f64> {
    (0..k).map(|i| if i == c { 1.0 } else { 0.0 }).collect()
}

/// Classifier, box regressor and mask head on ROI features.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// `C -> K` on the spatially pooled ROI.
    pub classifier: OpParams<T>,
    /// `C -> 4` on the spatially pooled ROI.
    pub box_regressor: OpParams<T>,
    /// `C -> 1` per pixel of the upsampled ROI.
    pub mask_head: OpParams<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn new(channels: usize, num_categories: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            classifier: OpParams::fan_in(num_categories, channels, &mut rng),
            box_regressor: OpParams::zeros(4, channels),
            mask_head: OpParams::fan_in(1, channels, &mut rng),
        }
    }

    pub fn num_categories(&self) -> usize {
        self.classifier.out_channels()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> HeadVars {
        HeadVars(self.bind_all(g, trainable).try_into().expect("three head layers"))
    }
}

impl<T: Scalar> ParamSet<T> for HeadParams<T> {
    fn layers(&self) -> Vec<&OpParams<T>> {
        vec![&self.classifier, &self.box_regressor, &self.mask_head]
    }

    fn layers_mut(&mut self) -> Vec<&mut OpParams<T>> {
        vec![&mut self.classifier, &mut self.box_regressor, &mut self.mask_head]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars(pub [Bound; 3]);

/// Graph outputs of the heads for one ROI.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutVars {
    /// `[K]` raw class logits.
    pub class_logits: Var,
    /// `[4]`
    pub box_deltas: Var,
    /// `[m, m]`
    pub mask_logits: Var,
}

/// Heads on one `[C,h,w]` ROI.
pub fn heads_graph<T: Scalar>(g: &mut Graph<T>, roi: Var, p: &HeadVars, mask_size: usize) -> Result<HeadOutVars> {
    let s = g.shape(roi).to_vec();
    ensure!(s.len() == 3, "predict_heads", "roi must be [C,h,w], got {:?}", s);
    ensure!(
        s[1] == s[2] && s[1] > 0 && mask_size.is_multiple_of(s[1]),
        "predict_heads",
        "mask size {} is not a multiple of roi size {:?}",
        mask_size,
        s
    );
    let pooled = g.mean_spatial(roi)?;
    let cls = p.0[0].conv(g, pooled)?;
    let k = g.shape(cls)[0];
    let cls = g.reshape(cls, [k])?;
    let bx = p.0[1].conv(g, pooled)?;
    let bx = g.reshape(bx, [4])?;
    let up = g.upsample_nearest(roi, mask_size / s[1])?;
    let m = p.0[2].conv(g, up)?;
    let m = g.reshape(m, [mask_size, mask_size])?;
    Ok(HeadOutVars {
        class_logits: cls,
        box_deltas: bx,
        mask_logits: m,
    })
}

/// Batched head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    /// `[P, K]` softmax probabilities.
    pub category_scores: Tensor<T>,
    /// `[P, 4]`
    pub box_deltas: Tensor<T>,
    /// `[P, m, m]`
    pub mask_logits: Tensor<T>,
}

pub fn predict_heads<T: Scalar>(
    proposal_features: &Tensor<T>,
    params: &HeadParams<T>,
    mask_size: usize,
) -> Result<HeadOutput<T>> {
    let s = expect_rank(proposal_features, 4, "predict_heads", "proposal features")?.to_vec();
    let k = params.num_categories();
    ensure!(
        s[1] == params.classifier.in_channels(),
        "predict_heads",
        "features have C={} but heads expect C={}",
        s[1],
        params.classifier.in_channels()
    );
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let (mut cls, mut bx, mut ms) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..s[0] {
        let roi = g.constant(proposal_features.index_axis0(i)?);
        let out = heads_graph(&mut g, roi, &vars, mask_size)?;
        cls.extend_from_slice(ops::softmax_axis(g.value(out.class_logits), 0)?.data());
        bx.extend_from_slice(g.value(out.box_deltas).data());
        ms.extend_from_slice(g.value(out.mask_logits).data());
    }
    Ok(HeadOutput {
        category_scores: Tensor::new([s[0], k], cls)?,
        box_deltas: Tensor::new([s[0], 4], bx)?,
        mask_logits: Tensor::new([s[0], mask_size, mask_size], ms)?,
    })
}

/// Regression targets `(dx, dy, dw, dh)` taking `from` onto `to`.
pub fn box_deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [(tx - fx) / from.w, (ty - fy) / from.h, (to.w / from.w).ln(), (to.h / from.h).ln()]
}

pub fn apply_box_deltas(b: &BBox, d: [f64; 4]) -> BBox {
    let (cx, cy) = b.center();
    let (cx, cy) = (cx + d[0] * b.w, cy + d[1] * b.h);
    let (w, h) = (b.w * d[2].exp(), b.h * d[3].exp());
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, w, h)
}

/// Thresholds `mask_logits [m,m]` at 0 and pastes them into `bbox` on an `h x w` grid.
pub fn paste_mask<T: Scalar>(mask_logits: &Tensor<T>, bbox: &BBox, height: usize, width: usize) -> Mask {
    let m = mask_logits.dim(0);
    Mask::from_fn(height, width, |r, c| {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        if x < bbox.x || x >= bbox.x1() || y < bbox.y || y >= bbox.y1() {
            return false;
        }
        let i = (((y - bbox.y) / bbox.h * m as f64) as usize).min(m - 1);
        let j = (((x - bbox.x) / bbox.w * m as f64) as usize).min(m - 1);
        mask_logits.at(&[i, j]) > T::zero()
    })
}

/// Resamples a pixel mask onto the `[m,m]` grid over `bbox` (nearest, pixel centers).
pub fn mask_target(mask: &Mask, bbox: &BBox, m: usize) -> Tensor<f64> {
    Tensor::from_fn([m, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        let y = bbox.y + (i as f64 + 0.5) * bbox.h / m as f64;
        let x = bbox.x + (j as f64 + 0.5) * bbox.w / m as f64;
        let (r, c) = (y.floor(), x.floor());
        if r < 0.0 || c < 0.0 || r as usize >= mask.height() || c as usize >= mask.width() {
            0.0
        } else if mask.get(r as usize, c as usize) {
            1.0
        } else {
            0.0
        }
    })
}
