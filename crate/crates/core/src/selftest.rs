//! Gradient-check suites and oracle equivalences run by the `selftest` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionParams, AttentionVars};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::gradcheck::grad_check_with_tamper;
use crate::graph::{Graph, Var};
use crate::hungarian::max_profit_assignment;
use crate::ops;
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;
use crate::tracker::{graph_ops as trk, CorrelationLossKind, TrackerVars};

pub const MODULES: [&str; 4] = ["tensor-core", "attention", "tracker", "viseval"];

#[derive(Clone, Debug)]
pub struct SelftestOptions {
    pub eps: f64,
    /// Largest accepted relative gradient error.
    pub tolerance: f64,
    /// Restricts the run to one entry of [`MODULES`].
    pub module: Option<String>,
    /// Scales every analytic gradient by 1.1 before comparison.
    pub corrupt_backward: bool,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-5,
            module: None,
            corrupt_backward: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Gradient,
    Oracle,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub module: &'static str,
    pub name: &'static str,
    pub kind: CheckKind,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error < self.tolerance
    }
}

const ORACLE_TOLERANCE: f64 = 1e-10;

type Loss = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

struct GradSuite {
    module: &'static str,
    name: &'static str,
    inputs: fn() -> Vec<Tensor<f64>>,
    loss: Loss,
}

struct OracleSuite {
    module: &'static str,
    name: &'static str,
    run: fn() -> Result<f64>,
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(shape.to_vec(), 1.0, &mut rng)
}

fn sum_sq(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let s = g.mul(x, x)?;
    Ok(g.sum(s))
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct gradient.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_t(g.shape(x), seed));
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn attention_inputs() -> Vec<Tensor<f64>> {
    let p = AttentionParams::<f64>::random(8, 4, 101).unwrap();
    let mut v = vec![rand_t(&[8, 2, 3], 102), rand_t(&[8, 2, 3], 103), rand_t(&[8, 2, 3], 104)];
    for l in p.layers() {
        v.push(l.weight.clone());
        v.push(l.bias.clone());
    }
    v
}

fn attention_vars(v: &[Var], first: usize) -> AttentionVars {
    let b: Vec<Bound> = (0..7)
        .map(|i| Bound {
            weight: v[first + 2 * i],
            bias: v[first + 2 * i + 1],
        })
        .collect();
    AttentionVars(b.try_into().expect("seven layers"))
}

fn score_inputs() -> Vec<Tensor<f64>> {
    let w = 6;
    vec![
        rand_t(&[w, 1, 1], 111),
        rand_t(&[w, 1, 1], 112),
        rand_t(&[w, w], 113),
        rand_t(&[w], 114),
        rand_t(&[1, w], 115),
        rand_t(&[1], 116),
    ]
}

fn correlation_inputs() -> Vec<Tensor<f64>> {
    vec![rand_t(&[1, 4, 5], 121).scale(3.0), rand_t(&[1, 4, 5], 122).map(|x| 0.5 + 0.5 * x)]
}

fn correlation_with(g: &mut Graph<f64>, v: &[Var], kind: CorrelationLossKind) -> Result<Var> {
    trk::correlation_loss(g, v[0], v[1], kind)
}

fn grad_suites() -> Vec<GradSuite> {
    vec![
        GradSuite {
            module: "tensor-core",
            name: "conv1x1",
            inputs: || vec![rand_t(&[3, 2, 4], 1), rand_t(&[5, 3], 2), rand_t(&[5], 3)],
            loss: |g, v| {
                let y = g.conv1x1(v[0], v[1], v[2])?;
                weighted_sum(g, y, 4)
            },
        },
        GradSuite {
            module: "tensor-core",
            name: "softmax_axis",
            inputs: || vec![rand_t(&[3, 4], 5).scale(2.0)],
            loss: |g, v| {
                let a = g.softmax(v[0], 0)?;
                let b = g.softmax(v[0], 1)?;
                let x = weighted_sum(g, a, 6)?;
                let y = weighted_sum(g, b, 7)?;
                g.add(x, y)
            },
        },
        GradSuite {
            module: "tensor-core",
            name: "depthwise_xcorr",
            inputs: || vec![rand_t(&[2, 3, 2], 8), rand_t(&[2, 5, 4], 9)],
            loss: |g, v| {
                let a = g.depthwise_xcorr(v[0], v[1], true)?;
                let b = g.depthwise_xcorr(v[0], v[1], false)?;
                let x = weighted_sum(g, a, 10)?;
                let y = weighted_sum(g, b, 11)?;
                g.add(x, y)
            },
        },
        GradSuite {
            module: "tensor-core",
            name: "roi_align",
            inputs: || vec![rand_t(&[2, 6, 7], 12)],
            loss: |g, v| {
                let r = g.roi_align(v[0], &BBox::new(0.7, 1.3, 4.1, 3.6), 3, 2, 2)?;
                weighted_sum(g, r, 13)
            },
        },
        GradSuite {
            module: "attention",
            name: "temporal_attention",
            inputs: attention_inputs,
            loss: |g, v| {
                let p = attention_vars(v, 3);
                let s = attention::graph_ops::embed_support(g, &v[1..3], &p)?;
                let y = attention::graph_ops::temporal_attention(g, v[0], s, &p)?;
                sum_sq(g, y)
            },
        },
        GradSuite {
            module: "attention",
            name: "channel_attention",
            inputs: attention_inputs,
            loss: |g, v| {
                let p = attention_vars(v, 3);
                let y = attention::graph_ops::channel_attention(g, v[0], &p)?;
                sum_sq(g, y)
            },
        },
        GradSuite {
            module: "attention",
            name: "dual_attention",
            inputs: attention_inputs,
            loss: |g, v| {
                let p = attention_vars(v, 3);
                let s = attention::graph_ops::embed_support(g, &v[1..3], &p)?;
                let y = attention::graph_ops::dual_attention(g, v[0], s, &p)?;
                sum_sq(g, y)
            },
        },
        GradSuite {
            module: "tracker",
            name: "match_score",
            inputs: score_inputs,
            loss: |g, v| {
                let s3 = Bound { weight: v[2], bias: v[3] };
                let s4 = Bound { weight: v[4], bias: v[5] };
                let p = TrackerVars([s3, s3, s3, s3, s4]);
                let s = trk::match_score(g, v[0], Some(v[1]), &p)?;
                sum_sq(g, s)
            },
        },
        GradSuite {
            module: "tracker",
            name: "correlation_loss_squashed_mse",
            inputs: correlation_inputs,
            loss: |g, v| correlation_with(g, v, CorrelationLossKind::SquashedMse),
        },
        GradSuite {
            module: "tracker",
            name: "correlation_loss_logit_mse",
            inputs: correlation_inputs,
            loss: |g, v| correlation_with(g, v, CorrelationLossKind::LogitMse),
        },
        GradSuite {
            module: "tracker",
            name: "correlation_loss_bce",
            inputs: correlation_inputs,
            loss: |g, v| correlation_with(g, v, CorrelationLossKind::Bce),
        },
        GradSuite {
            module: "tracker",
            name: "pair_correlation",
            inputs: || vec![rand_t(&[3, 2, 2], 131), rand_t(&[3, 2, 2], 132)],
            loss: |g, v| {
                let x = trk::pair_correlation(g, v[0], v[1])?;
                weighted_sum(g, x, 133)
            },
        },
    ]
}

/// Literal per-position transcription of the temporal attention branch.
fn temporal_attention_loop() -> Result<f64> {
    let p = AttentionParams::<f64>::random(8, 4, 201)?;
    let f_c = rand_t(&[8, 3, 3], 202);
    let sup = [rand_t(&[8, 3, 3], 203), rand_t(&[8, 3, 3], 204)];
    let emb = attention::embed_support(&sup, &p)?;
    let fast = attention::temporal_attention(&f_c, &emb, &p)?;

    let conv = |x: &Tensor<f64>, l: &crate::params::OpParams<f64>, i: usize, y: usize, xx: usize| {
        let mut s = l.bias.at(&[i]);
        for c in 0..l.in_channels() {
            s += l.weight.at(&[i, c]) * x.at(&[c, y, xx]);
        }
        s
    };
    let d = p.key_dim();
    let (h, w) = (3, 3);
    let mut positions = Vec::new();
    for s in &sup {
        for y in 0..h {
            for x in 0..w {
                let k: Vec<f64> = (0..d).map(|i| conv(s, &p.key_proj_support, i, y, x).max(0.0)).collect();
                let v: Vec<f64> = (0..d).map(|i| conv(s, &p.value_proj_support, i, y, x).max(0.0)).collect();
                positions.push((k, v));
            }
        }
    }
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let q: Vec<f64> = (0..d).map(|i| conv(&f_c, &p.key_proj_current, i, y, x).max(0.0)).collect();
            let logits: Vec<f64> = positions
                .iter()
                .map(|(k, _)| k.iter().zip(&q).map(|(a, b)| a * b).sum())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let agg: Vec<f64> = (0..d)
                .map(|i| positions.iter().zip(&e).map(|((_, v), a)| v[i] * a / z).sum::<f64>().max(0.0))
                .collect();
            let out = &p.output_transform;
            for c in 0..8 {
                let mut s = out.bias.at(&[c]);
                for (i, a) in agg.iter().enumerate() {
                    s += out.weight.at(&[c, i]) * a;
                }
                worst = worst.max((s - fast.at(&[c, y, x])).abs());
            }
        }
    }
    Ok(worst)
}

/// Sliding-window loop over an explicitly zero-padded search volume.
fn xcorr_loop() -> Result<f64> {
    let t = rand_t(&[2, 3, 4], 211);
    let s = rand_t(&[2, 5, 6], 212);
    let fast = ops::depthwise_xcorr(&t, &s, true)?;
    let (pt, pl) = (1isize, 2isize);
    let mut worst = 0.0f64;
    for c in 0..2 {
        for y in 0..5isize {
            for x in 0..6isize {
                let mut acc = 0.0;
                for u in 0..3isize {
                    for v in 0..4isize {
                        let (sy, sx) = (y + u - pt, x + v - pl);
                        if (0..5).contains(&sy) && (0..6).contains(&sx) {
                            acc += t.at(&[c, u as usize, v as usize]) * s.at(&[c, sy as usize, sx as usize]);
                        }
                    }
                }
                worst = worst.max((acc - fast.at(&[c, y as usize, x as usize])).abs());
            }
        }
    }
    Ok(worst)
}

/// Hungarian max-profit assignment against every permutation of a 5x5 matrix.
fn hungarian_bruteforce() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(221);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..5).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
            .collect();
        let got: f64 = max_profit_assignment(&m).iter().map(|&(i, j)| m[i][j]).sum();
        let mut perm: Vec<usize> = (0..5).collect();
        let mut best = f64::NEG_INFINITY;
        permutations(&mut perm, 0, &mut |p| {
            best = best.max(p.iter().enumerate().map(|(i, &j)| m[i][j]).sum());
        });
        worst = worst.max((best - got).abs());
    }
    Ok(worst)
}

fn permutations(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permutations(p, k + 1, f);
        p.swap(k, i);
    }
}

/// Perfect predictions score AP = AR = 1 on a two-video set.
fn eval_identity() -> Result<f64> {
    use crate::datagen::{gen_dataset, SynthConfig};
    use crate::eval::{evaluate, EvalConfig};
    let videos = gen_dataset(&SynthConfig {
        num_videos: 2,
        frames_per_video: 3,
        height: 32,
        width: 32,
        objects_per_video: 2,
        size_range: (6.0, 9.0),
        seed: 231,
        ..SynthConfig::default()
    })?;
    let gt: Vec<_> = videos.iter().flat_map(|v| v.annotation.tracks.clone()).collect();
    let r = evaluate(&gt, &gt, &EvalConfig::default())?;
    let ar = r.ar(10).unwrap_or(0.0);
    Ok((1.0 - r.mean_ap).abs().max((1.0 - ar).abs()))
}

fn oracle_suites() -> Vec<OracleSuite> {
    vec![
        OracleSuite {
            module: "tensor-core",
            name: "depthwise_xcorr_loop",
            run: xcorr_loop,
        },
        OracleSuite {
            module: "attention",
            name: "temporal_attention_loop",
            run: temporal_attention_loop,
        },
        OracleSuite {
            module: "tracker",
            name: "hungarian_bruteforce",
            run: hungarian_bruteforce,
        },
        OracleSuite {
            module: "viseval",
            name: "perfect_predictions",
            run: eval_identity,
        },
    ]
}

/// Runs every suite selected by `opts.module`.
pub fn run(opts: &SelftestOptions) -> Result<Vec<CheckResult>> {
    if let Some(m) = &opts.module {
        if !MODULES.contains(&m.as_str()) {
            return Err(Error::contract(
                "selftest",
                format!("unknown module {m:?}; expected one of {}", MODULES.join(", ")),
            ));
        }
    }
    let selected = |module: &str| opts.module.as_deref().is_none_or(|m| m == module);
    let factor = if opts.corrupt_backward { 1.1 } else { 1.0 };
    let mut out = Vec::new();
    for s in grad_suites().into_iter().filter(|s| selected(s.module)) {
        let rep = grad_check_with_tamper(s.loss, &(s.inputs)(), opts.eps, |_, t| t.scale(factor))?;
        out.push(CheckResult {
            module: s.module,
            name: s.name,
            kind: CheckKind::Gradient,
            error: rep.max_relative_error(),
            tolerance: opts.tolerance,
        });
    }
    for s in oracle_suites().into_iter().filter(|s| selected(s.module)) {
        out.push(CheckResult {
            module: s.module,
            name: s.name,
            kind: CheckKind::Oracle,
            error: (s.run)()?,
            tolerance: ORACLE_TOLERANCE,
        });
    }
    Ok(out)
}
