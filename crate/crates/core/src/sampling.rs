//! Support-frame selection.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Uniform,
    Random,
}

/// Picks `t` support frames for frame `current` of a `video_len`-frame video.
///
/// Uniform mode spreads `t` positions over `[0, video_len-1]` (endpoints
/// included) and moves any position that collides with the current frame
/// or an earlier pick to its nearest free neighbour, lower index first.
/// Random mode draws `t` distinct frames other than `current`. When fewer
/// than `t` other frames exist they are repeated cyclically; a one-frame
/// video supports itself. The result is sorted.
pub fn sample_support(video_len: usize, current: usize, t: usize, mode: SamplingMode, seed: u64) -> Result<Vec<usize>> {
    ensure!(
        current < video_len,
        "sample_support",
        "current frame {} outside a {}-frame video",
        current,
        video_len
    );
    if t == 0 {
        return Ok(Vec::new());
    }
    let eligible: Vec<usize> = (0..video_len).filter(|&i| i != current).collect();
    if eligible.is_empty() {
        return Ok(vec![current; t]);
    }
    let mut out = if eligible.len() < t {
        eligible.iter().cycle().take(t).copied().collect()
    } else {
        match mode {
            SamplingMode::Uniform => uniform_positions(video_len, current, t),
            SamplingMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                index::sample(&mut rng, eligible.len(), t)
                    .into_iter()
                    .map(|i| eligible[i])
                    .collect()
            }
        }
    };
    out.sort_unstable();
    Ok(out)
}

fn uniform_positions(video_len: usize, current: usize, t: usize) -> Vec<usize> {
    let last = (video_len - 1) as f64;
    let mut used = vec![false; video_len];
    used[current] = true;
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let target = if t == 1 {
            (0.5 * last).round() as usize
        } else {
            (i as f64 * last / (t - 1) as f64).round() as usize
        };
        let pick = (0..video_len)
            .flat_map(|d| [target.checked_sub(d), Some(target + d)])
            .flatten()
            .find(|&j| j < video_len && !used[j])
            .expect("a free frame exists when video_len > t");
        used[pick] = true;
        out.push(pick);
    }
    out
}

/// Support frames restricted to indices `<= current`.
pub fn sample_support_causal(current: usize, t: usize, mode: SamplingMode, seed: u64) -> Result<Vec<usize>> {
    sample_support(current + 1, current, t, mode, seed)
}

/// Seed for frame `frame` of video `video` derived from a run seed.
pub fn frame_seed(seed: u64, video: u64, frame: usize) -> u64 {
    let mut z = seed ^ video.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (frame as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
