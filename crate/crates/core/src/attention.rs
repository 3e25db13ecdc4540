//! Temporal attention, global-context channel attention and their residual
//! fusion, at frame level and per object proposal.
//!
//! Each operation exists twice: a graph form taking [`AttentionVars`] (used
//! for training and gradient checks) and a plain tensor form taking
//! [`AttentionParams`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, OpParams, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

/// Default bottleneck ratio of the channel branch.
pub const DEFAULT_REDUCTION: usize = 4;

/// Learned layers of one dual-attention block over `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    /// C -> C/4
    pub key_proj_current: OpParams<T>,
    /// C -> C/4
    pub key_proj_support: OpParams<T>,
    /// C -> C/4
    pub value_proj_support: OpParams<T>,
    /// C/4 -> C
    pub output_transform: OpParams<T>,
    /// C -> 1
    pub channel_attn_proj: OpParams<T>,
    /// C -> C/r
    pub channel_transform_1: OpParams<T>,
    /// C/r -> C
    pub channel_transform_2: OpParams<T>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Fan-in initialised projections and zeroed output transforms, so the
    /// block starts as the identity.
    pub fn new(channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        check_channels(channels, reduction)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m) = (channels / 4, channels / reduction);
        Ok(Self {
            key_proj_current: OpParams::fan_in(d, channels, &mut rng),
            key_proj_support: OpParams::fan_in(d, channels, &mut rng),
            value_proj_support: OpParams::fan_in(d, channels, &mut rng),
            output_transform: OpParams::zeros(channels, d),
            channel_attn_proj: OpParams::fan_in(1, channels, &mut rng),
            channel_transform_1: OpParams::fan_in(m, channels, &mut rng),
            channel_transform_2: OpParams::zeros(channels, m),
        })
    }

    pub fn cast<U: Scalar>(&self) -> AttentionParams<U> {
        AttentionParams {
            key_proj_current: self.key_proj_current.cast(),
            key_proj_support: self.key_proj_support.cast(),
            value_proj_support: self.value_proj_support.cast(),
            output_transform: self.output_transform.cast(),
            channel_attn_proj: self.channel_attn_proj.cast(),
            channel_transform_1: self.channel_transform_1.cast(),
            channel_transform_2: self.channel_transform_2.cast(),
        }
    }

    /// Every layer fan-in initialised, including the output transforms.
    pub fn random(channels: usize, reduction: usize, seed: u64) -> Result<Self> {
        let mut p = Self::new(channels, reduction, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (d, m) = (channels / 4, channels / reduction);
        p.output_transform = OpParams::fan_in(channels, d, &mut rng);
        p.channel_transform_2 = OpParams::fan_in(channels, m, &mut rng);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.key_proj_current.in_channels()
    }

    pub fn key_dim(&self) -> usize {
        self.key_proj_current.out_channels()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> AttentionVars {
        let b = self.bind_all(g, trainable);
        AttentionVars(b.try_into().expect("seven attention layers"))
    }
}

fn check_channels(channels: usize, reduction: usize) -> Result<()> {
    ensure!(
        channels > 0 && channels.is_multiple_of(4),
        "attention",
        "C={} must be a positive multiple of 4",
        channels
    );
    ensure!(
        reduction > 0 && channels.is_multiple_of(reduction),
        "attention",
        "C={} not divisible by r={}",
        channels,
        reduction
    );
    Ok(())
}

impl<T: Scalar> ParamSet<T> for AttentionParams<T> {
    fn layers(&self) -> Vec<&OpParams<T>> {
        vec![
            &self.key_proj_current,
            &self.key_proj_support,
            &self.value_proj_support,
            &self.output_transform,
            &self.channel_attn_proj,
            &self.channel_transform_1,
            &self.channel_transform_2,
        ]
    }

    fn layers_mut(&mut self) -> Vec<&mut OpParams<T>> {
        vec![
            &mut self.key_proj_current,
            &mut self.key_proj_support,
            &mut self.value_proj_support,
            &mut self.output_transform,
            &mut self.channel_attn_proj,
            &mut self.channel_transform_1,
            &mut self.channel_transform_2,
        ]
    }
}

/// [`AttentionParams`] placed on a graph, in layer order.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars(pub [Bound; 7]);

impl AttentionVars {
    fn key_current(&self) -> Bound {
        self.0[0]
    }
    fn key_support(&self) -> Bound {
        self.0[1]
    }
    fn value_support(&self) -> Bound {
        self.0[2]
    }
    fn output(&self) -> Bound {
        self.0[3]
    }
    fn ctx_proj(&self) -> Bound {
        self.0[4]
    }
    fn ctx_1(&self) -> Bound {
        self.0[5]
    }
    fn ctx_2(&self) -> Bound {
        self.0[6]
    }

    pub fn as_slice(&self) -> &[Bound] {
        &self.0
    }
}

/// Stacked support keys and values, `[T, C/4, H, W]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportEmbedding<T> {
    pub keys: Tensor<T>,
    pub values: Tensor<T>,
}

impl<T: Scalar> SupportEmbedding<T> {
    /// `N_p = T * H * W`.
    pub fn num_positions(&self) -> usize {
        let s = self.keys.shape();
        s[0] * s[2] * s[3]
    }
}

/// Graph handles of a support embedding.
#[derive(Clone, Copy, Debug)]
pub struct SupportVars {
    pub keys: Var,
    pub values: Var,
}

pub mod graph_ops {
    //! Differentiable forms of the attention operations.

    use super::*;

    pub fn embed_current<T: Scalar>(g: &mut Graph<T>, f_c: Var, p: &AttentionVars) -> Result<Var> {
        let k = p.key_current().conv(g, f_c)?;
        Ok(g.relu(k))
    }

    pub fn embed_support<T: Scalar>(
        g: &mut Graph<T>,
        frames: &[Var],
        p: &AttentionVars,
    ) -> Result<SupportVars> {
        ensure!(!frames.is_empty(), "embed_support", "support frame list is empty");
        let mut keys = Vec::with_capacity(frames.len());
        let mut values = Vec::with_capacity(frames.len());
        for &f in frames {
            let k = p.key_support().conv(g, f)?;
            keys.push(g.relu(k));
            let v = p.value_support().conv(g, f)?;
            values.push(g.relu(v));
        }
        Ok(SupportVars {
            keys: g.stack(&keys)?,
            values: g.stack(&values)?,
        })
    }

    /// `[T,d,H,W]` -> `[d, T*H*W]`.
    fn flatten_support<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let p = g.permute(x, &[1, 0, 2, 3])?;
        g.reshape(p, [s[1], s[0] * s[2] * s[3]])
    }

    /// Cross-attention from every position of `f_c` to every support position,
    /// followed by `F(x) = W ReLU(x) + b`. Returns the branch output only.
    pub fn temporal_attention<T: Scalar>(
        g: &mut Graph<T>,
        f_c: Var,
        support: SupportVars,
        p: &AttentionVars,
    ) -> Result<Var> {
        let s = g.shape(f_c).to_vec();
        ensure!(s.len() == 3, "temporal_attention", "current features must be [C,H,W], got {:?}", s);
        let ks = g.shape(support.keys).to_vec();
        ensure!(
            ks.len() == 4 && ks[0] * ks[2] * ks[3] > 0,
            "temporal_attention",
            "support embedding {:?} has no positions",
            ks
        );
        ensure!(
            g.shape(support.values) == ks.as_slice(),
            "temporal_attention",
            "keys {:?} and values {:?} differ",
            ks,
            g.shape(support.values)
        );
        let (h, w) = (s[1], s[2]);
        let kc = embed_current(g, f_c, p)?;
        let d = g.shape(kc)[0];
        ensure!(ks[1] == d, "temporal_attention", "support key dim {} != current key dim {}", ks[1], d);
        let kc = g.reshape(kc, [d, h * w])?;
        let kf = flatten_support(g, support.keys)?;
        let kf_t = g.transpose(kf)?;
        let x = g.matmul(kf_t, kc)?;
        let a = g.softmax(x, 0)?;
        let vf = flatten_support(g, support.values)?;
        let agg = g.matmul(vf, a)?;
        let agg = g.reshape(agg, [d, h, w])?;
        let act = g.relu(agg);
        p.output().conv(g, act)
    }

    /// Global-context block: one softmax-normalised spatial map pools every
    /// channel, the pooled vector goes through a ReLU bottleneck and is
    /// broadcast back over space.
    pub fn channel_attention<T: Scalar>(g: &mut Graph<T>, f_c: Var, p: &AttentionVars) -> Result<Var> {
        let s = g.shape(f_c).to_vec();
        ensure!(s.len() == 3, "channel_attention", "features must be [C,H,W], got {:?}", s);
        let (c, h, w) = (s[0], s[1], s[2]);
        ensure!(h * w > 0, "channel_attention", "empty spatial extent {}x{}", h, w);
        let logits = p.ctx_proj().conv(g, f_c)?;
        let logits = g.reshape(logits, [h * w, 1])?;
        let a = g.softmax(logits, 0)?;
        let flat = g.reshape(f_c, [c, h * w])?;
        let z = g.matmul(flat, a)?;
        let z = g.reshape(z, [c, 1, 1])?;
        let t = p.ctx_1().conv(g, z)?;
        let t = g.relu(t);
        let t = p.ctx_2().conv(g, t)?;
        g.tile_spatial(t, h, w)
    }

    /// `temporal + channel + f_c`.
    pub fn dual_attention<T: Scalar>(
        g: &mut Graph<T>,
        f_c: Var,
        support: SupportVars,
        p: &AttentionVars,
    ) -> Result<Var> {
        let ta = temporal_attention(g, f_c, support, p)?;
        let ca = channel_attention(g, f_c, p)?;
        g.add_all(&[ta, ca, f_c])
    }

    /// Dual attention on each `[C,h,w]` proposal against one shared support embedding.
    pub fn object_dual_attention<T: Scalar>(
        g: &mut Graph<T>,
        proposals: &[Var],
        support: SupportVars,
        p: &AttentionVars,
    ) -> Result<Vec<Var>> {
        proposals
            .iter()
            .map(|&r| dual_attention(g, r, support, p))
            .collect()
    }
}

fn eval<T: Scalar, R>(
    params: &AttentionParams<T>,
    f: impl FnOnce(&mut Graph<T>, &AttentionVars) -> Result<R>,
) -> Result<(Graph<T>, R)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let r = f(&mut g, &vars)?;
    Ok((g, r))
}

fn check_input<T: Scalar>(x: &Tensor<T>, params: &AttentionParams<T>, op: &'static str) -> Result<()> {
    let s = expect_rank(x, 3, op, "features")?;
    ensure!(
        s[0] == params.channels(),
        op,
        "input has C={} but the block expects C={}",
        s[0],
        params.channels()
    );
    Ok(())
}

/// `ReLU(conv1x1(f_c))` -> `[C/4,H,W]`.
pub fn embed_current<T: Scalar>(f_c: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    check_input(f_c, params, "embed_current")?;
    let (g, v) = eval(params, |g, p| {
        let x = g.constant(f_c.clone());
        graph_ops::embed_current(g, x, p)
    })?;
    Ok(g.value(v).clone())
}

pub fn embed_support<T: Scalar>(
    frames: &[Tensor<T>],
    params: &AttentionParams<T>,
) -> Result<SupportEmbedding<T>> {
    ensure!(!frames.is_empty(), "embed_support", "support frame list is empty");
    for f in frames {
        check_input(f, params, "embed_support")?;
        ensure!(
            f.shape() == frames[0].shape(),
            "embed_support",
            "support frames differ in shape: {:?} vs {:?}",
            f.shape(),
            frames[0].shape()
        );
    }
    let (g, s) = eval(params, |g, p| {
        let xs: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
        graph_ops::embed_support(g, &xs, p)
    })?;
    Ok(SupportEmbedding {
        keys: g.value(s.keys).clone(),
        values: g.value(s.values).clone(),
    })
}

fn support_vars<T: Scalar>(g: &mut Graph<T>, s: &SupportEmbedding<T>) -> SupportVars {
    SupportVars {
        keys: g.constant(s.keys.clone()),
        values: g.constant(s.values.clone()),
    }
}

pub fn temporal_attention<T: Scalar>(
    f_c: &Tensor<T>,
    support: &SupportEmbedding<T>,
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    check_input(f_c, params, "temporal_attention")?;
    let (g, v) = eval(params, |g, p| {
        let x = g.constant(f_c.clone());
        let s = support_vars(g, support);
        graph_ops::temporal_attention(g, x, s, p)
    })?;
    Ok(g.value(v).clone())
}

pub fn channel_attention<T: Scalar>(f_c: &Tensor<T>, params: &AttentionParams<T>) -> Result<Tensor<T>> {
    check_input(f_c, params, "channel_attention")?;
    let (g, v) = eval(params, |g, p| {
        let x = g.constant(f_c.clone());
        graph_ops::channel_attention(g, x, p)
    })?;
    Ok(g.value(v).clone())
}

pub fn dual_attention<T: Scalar>(
    f_c: &Tensor<T>,
    supports: &[Tensor<T>],
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    let emb = embed_support(supports, params)?;
    check_input(f_c, params, "dual_attention")?;
    let (g, v) = eval(params, |g, p| {
        let x = g.constant(f_c.clone());
        let s = support_vars(g, &emb);
        graph_ops::dual_attention(g, x, s, p)
    })?;
    Ok(g.value(v).clone())
}

/// Applies [`dual_attention`] to every `[C,h,w]` slice of `proposals [P,C,h,w]`.
pub fn object_dual_attention<T: Scalar>(
    proposals: &Tensor<T>,
    supports: &[Tensor<T>],
    params: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    let s = expect_rank(proposals, 4, "object_dual_attention", "proposals")?;
    ensure!(
        s[1] == params.channels(),
        "object_dual_attention",
        "proposal C={} does not match support/block C={}",
        s[1],
        params.channels()
    );
    if s[0] == 0 {
        return Ok(proposals.clone());
    }
    let emb = embed_support(supports, params)?;
    let (g, outs) = eval(params, |g, p| {
        let sv = support_vars(g, &emb);
        let rois = (0..s[0])
            .map(|i| Ok(g.constant(proposals.index_axis0(i)?)))
            .collect::<Result<Vec<_>>>()?;
        graph_ops::object_dual_attention(g, &rois, sv, p)
    })?;
    let parts: Vec<Tensor<T>> = outs.iter().map(|&v| g.value(v).clone()).collect();
    Tensor::stack(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::ops;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape.to_vec(), 1.0, &mut rng)
    }

    /// Literal loop evaluation of the temporal attention formula.
    fn temporal_oracle(f_c: &Tensor<f64>, supports: &[Tensor<f64>], p: &AttentionParams<f64>) -> Tensor<f64> {
        let (c, h, w) = (f_c.dim(0), f_c.dim(1), f_c.dim(2));
        let d = c / 4;
        let proj = |x: &Tensor<f64>, l: &OpParams<f64>, k: usize, y: usize, xx: usize| {
            let mut acc = l.bias.data()[k];
            for ci in 0..x.dim(0) {
                acc += l.weight.at(&[k, ci]) * x.at(&[ci, y, xx]);
            }
            acc.max(0.0)
        };
        let mut out = Tensor::zeros([c, h, w]);
        for y in 0..h {
            for x in 0..w {
                let qc: Vec<f64> = (0..d).map(|k| proj(f_c, &p.key_proj_current, k, y, x)).collect();
                let mut logits = Vec::new();
                let mut vals = Vec::new();
                for s in supports {
                    for sy in 0..s.dim(1) {
                        for sx in 0..s.dim(2) {
                            let ks: f64 = (0..d).map(|k| proj(s, &p.key_proj_support, k, sy, sx) * qc[k]).sum();
                            logits.push(ks);
                            vals.push((0..d).map(|k| proj(s, &p.value_proj_support, k, sy, sx)).collect::<Vec<_>>());
                        }
                    }
                }
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                let mut agg = vec![0.0; d];
                for (l, v) in logits.iter().zip(&vals) {
                    for k in 0..d {
                        agg[k] += l.exp() / z * v[k];
                    }
                }
                for o in 0..c {
                    let mut acc = p.output_transform.bias.data()[o];
                    for k in 0..d {
                        acc += p.output_transform.weight.at(&[o, k]) * agg[k].max(0.0);
                    }
                    out.set(&[o, y, x], acc);
                }
            }
        }
        out
    }

    #[test]
    fn embed_current_shapes_and_zero_case() {
        let p = AttentionParams::<f64>::new(8, 4, 1).unwrap();
        let x = rand_t(&[8, 4, 4], 2);
        assert_eq!(embed_current(&x, &p).unwrap().shape(), &[2, 4, 4]);
        let mut z = p.clone();
        z.key_proj_current = OpParams::zeros(2, 8);
        assert!(embed_current(&x, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_current_matches_op_composition() {
        let p = AttentionParams::<f64>::new(8, 4, 3).unwrap();
        let x = rand_t(&[8, 3, 5], 4);
        let oracle = ops::relu(&ops::conv1x1(&x, &p.key_proj_current.weight, &p.key_proj_current.bias).unwrap());
        assert!(embed_current(&x, &p).unwrap().max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn embed_support_stacks_frames() {
        let p = AttentionParams::<f64>::new(8, 4, 5).unwrap();
        let a = rand_t(&[8, 3, 3], 6);
        let e = embed_support(std::slice::from_ref(&a), &p).unwrap();
        assert_eq!(e.keys.shape(), &[1, 2, 3, 3]);
        assert_eq!(e.num_positions(), 9);
        let e2 = embed_support(&[a.clone(), a.clone()], &p).unwrap();
        assert_eq!(e2.keys.index_axis0(0).unwrap(), e2.keys.index_axis0(1).unwrap());
        assert!(embed_support::<f64>(&[], &p).is_err());
    }

    #[test]
    fn embed_support_matches_per_frame_oracle() {
        let p = AttentionParams::<f64>::new(8, 4, 7).unwrap();
        let frames = [rand_t(&[8, 2, 3], 8), rand_t(&[8, 2, 3], 9)];
        let e = embed_support(&frames, &p).unwrap();
        for (t, f) in frames.iter().enumerate() {
            let k = ops::relu(&ops::conv1x1(f, &p.key_proj_support.weight, &p.key_proj_support.bias).unwrap());
            let v = ops::relu(&ops::conv1x1(f, &p.value_proj_support.weight, &p.value_proj_support.bias).unwrap());
            assert!(e.keys.index_axis0(t).unwrap().max_abs_diff(&k) < 1e-12);
            assert!(e.values.index_axis0(t).unwrap().max_abs_diff(&v) < 1e-12);
        }
    }

    #[test]
    fn temporal_attention_matches_loop_oracle() {
        let p = AttentionParams::<f64>::random(4, 4, 11).unwrap();
        let fc = rand_t(&[4, 3, 3], 12);
        let sup = [rand_t(&[4, 3, 3], 13), rand_t(&[4, 3, 3], 14)];
        let emb = embed_support(&sup, &p).unwrap();
        let got = temporal_attention(&fc, &emb, &p).unwrap();
        assert!(got.max_abs_diff(&temporal_oracle(&fc, &sup, &p)) < 1e-10);
    }

    #[test]
    fn temporal_attention_zero_values_give_zero() {
        let mut p = AttentionParams::<f64>::random(4, 4, 15).unwrap();
        p.value_proj_support = OpParams::zeros(1, 4);
        p.output_transform.bias = Tensor::zeros([4]);
        let fc = rand_t(&[4, 3, 3], 16);
        let emb = embed_support(&[rand_t(&[4, 3, 3], 17)], &p).unwrap();
        assert!(temporal_attention(&fc, &emb, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_keys_average_values() {
        let mut p = AttentionParams::<f64>::random(4, 4, 18).unwrap();
        p.key_proj_support.weight = Tensor::zeros([1, 4]);
        let fc = rand_t(&[4, 2, 2], 19);
        let sup = [rand_t(&[4, 2, 2], 20), rand_t(&[4, 2, 2], 21)];
        let emb = embed_support(&sup, &p).unwrap();
        let mean_v = emb.values.mean();
        let expect = ops::conv1x1(
            &Tensor::full([1, 2, 2], mean_v.max(0.0)),
            &p.output_transform.weight,
            &p.output_transform.bias,
        )
        .unwrap();
        assert!(temporal_attention(&fc, &emb, &p).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn channel_attention_context_of_constant_input() {
        let mut p = AttentionParams::<f64>::random(4, 4, 22).unwrap();
        // identity-like transform to read the context vector back
        p.channel_transform_1 = OpParams::new(Tensor::from_fn([1, 4], |i| [1.0, 0.0, 0.0, 0.0][i]), Tensor::zeros([1])).unwrap();
        p.channel_transform_2 = OpParams::new(Tensor::from_fn([4, 1], |i| [1.0, 0.0, 0.0, 0.0][i]), Tensor::zeros([4])).unwrap();
        let x = Tensor::from_fn([4, 3, 3], |i| [0.7, 0.1, 0.2, 0.3][i / 9]);
        let out = channel_attention(&x, &p).unwrap();
        for y in 0..3 {
            for xx in 0..3 {
                assert!((out.at(&[0, y, xx]) - 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_attention_zeroed_transform() {
        let p = AttentionParams::<f64>::new(4, 4, 23).unwrap();
        let x = rand_t(&[4, 3, 3], 24);
        assert!(channel_attention(&x, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_attention_matches_loop_oracle() {
        let p = AttentionParams::<f64>::random(4, 4, 25).unwrap();
        let x = rand_t(&[4, 3, 3], 26);
        let logits: Vec<f64> = (0..9)
            .map(|j| {
                p.channel_attn_proj.bias.data()[0]
                    + (0..4).map(|c| p.channel_attn_proj.weight.at(&[0, c]) * x.data()[c * 9 + j]).sum::<f64>()
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let ctx: Vec<f64> = (0..4)
            .map(|c| (0..9).map(|j| x.data()[c * 9 + j] * logits[j].exp() / z).sum())
            .collect();
        let t1 = p.channel_transform_1.bias.data()[0]
            + (0..4).map(|c| p.channel_transform_1.weight.at(&[0, c]) * ctx[c]).sum::<f64>();
        let out = channel_attention(&x, &p).unwrap();
        for c in 0..4 {
            let v = p.channel_transform_2.bias.data()[c] + p.channel_transform_2.weight.at(&[c, 0]) * t1.max(0.0);
            for j in 0..9 {
                assert!((out.data()[c * 9 + j] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_initialised_block_is_identity() {
        let p = AttentionParams::<f64>::new(8, 4, 27).unwrap();
        let x = rand_t(&[8, 4, 4], 28);
        let out = dual_attention(&x, &[rand_t(&[8, 4, 4], 29)], &p).unwrap();
        assert_eq!(out.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn dual_attention_is_branch_sum() {
        let p = AttentionParams::<f64>::random(8, 4, 30).unwrap();
        let x = rand_t(&[8, 3, 3], 31);
        let sup = [rand_t(&[8, 3, 3], 32), rand_t(&[8, 3, 3], 33)];
        let emb = embed_support(&sup, &p).unwrap();
        let expect = temporal_attention(&x, &emb, &p)
            .unwrap()
            .add(&channel_attention(&x, &p).unwrap())
            .unwrap()
            .add(&x)
            .unwrap();
        assert!(dual_attention(&x, &sup, &p).unwrap().max_abs_diff(&expect) < 1e-12);

        let mut q = p.clone();
        q.output_transform = OpParams::zeros(8, 2);
        let expect = channel_attention(&x, &q).unwrap().add(&x).unwrap();
        assert!(dual_attention(&x, &sup, &q).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn object_attention_is_per_proposal() {
        let p = AttentionParams::<f64>::random(8, 4, 34).unwrap();
        let rois = rand_t(&[3, 8, 2, 2], 35);
        let sup = [rand_t(&[8, 5, 5], 36)];
        let out = object_dual_attention(&rois, &sup, &p).unwrap();
        assert_eq!(out.shape(), rois.shape());
        for i in 0..3 {
            let single = dual_attention(&rois.index_axis0(i).unwrap(), &sup, &p).unwrap();
            assert!(out.index_axis0(i).unwrap().max_abs_diff(&single) < 1e-12);
        }
        let empty = Tensor::<f64>::zeros([0, 8, 2, 2]);
        assert_eq!(object_dual_attention(&empty, &sup, &p).unwrap().shape(), &[0, 8, 2, 2]);
        assert!(object_dual_attention(&rand_t(&[1, 4, 2, 2], 37), &sup, &p).is_err());
    }

    #[test]
    fn rejects_bad_channel_counts() {
        assert!(AttentionParams::<f64>::new(6, 2, 0).is_err());
        assert!(AttentionParams::<f64>::new(8, 3, 0).is_err());
    }

    #[test]
    fn gradients_pass_check() {
        let p = AttentionParams::<f64>::random(4, 4, 38).unwrap();
        let fc = rand_t(&[4, 2, 3], 39);
        let s0 = rand_t(&[4, 2, 3], 40);
        let s1 = rand_t(&[4, 2, 3], 41);
        let mut inputs = vec![fc, s0, s1];
        for l in p.layers() {
            inputs.push(l.weight.clone());
            inputs.push(l.bias.clone());
        }
        let err = grad_check(
            |g, v| {
                let b: Vec<Bound> = (0..7)
                    .map(|i| Bound {
                        weight: v[3 + 2 * i],
                        bias: v[4 + 2 * i],
                    })
                    .collect();
                let vars = AttentionVars(b.try_into().unwrap());
                let s = graph_ops::embed_support(g, &v[1..3], &vars)?;
                let out = graph_ops::dual_attention(g, v[0], s, &vars)?;
                let sq = g.mul(out, out)?;
                Ok(g.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
