//! Mask and box overlays for visual inspection.

use crate::error::{ensure, Result};
use crate::geometry::{BBox, Mask};
use crate::tensor::Tensor;

/// One instance to draw.
#[derive(Clone, Debug)]
pub struct Overlay<'a> {
    pub identity: u64,
    pub mask: &'a Mask,
    pub bbox: BBox,
}

/// Stable, saturated color for an identity.
pub fn identity_color(identity: u64) -> [f64; 3] {
    let hue = (identity as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    match hue as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Blends each mask into `pixels [3,H,W]` with weight `alpha` and draws the
/// box outline in the identity color.
pub fn draw_overlays(pixels: &Tensor<f64>, overlays: &[Overlay], alpha: f64) -> Result<Tensor<f64>> {
    ensure!(
        pixels.shape().len() == 3 && pixels.dim(0) == 3,
        "draw_overlays",
        "expected [3,H,W] pixels, got {:?}",
        pixels.shape()
    );
    ensure!((0.0..=1.0).contains(&alpha), "draw_overlays", "alpha {} outside [0,1]", alpha);
    let (h, w) = (pixels.dim(1), pixels.dim(2));
    let mut out = pixels.clone();
    for o in overlays {
        ensure!(
            o.mask.height() == h && o.mask.width() == w,
            "draw_overlays",
            "mask {}x{} does not match frame {}x{}",
            o.mask.height(),
            o.mask.width(),
            h,
            w
        );
        let color = identity_color(o.identity);
        let data = out.data_mut();
        for r in 0..h {
            for c in 0..w {
                if o.mask.get(r, c) {
                    for (k, &col) in color.iter().enumerate() {
                        let v = &mut data[(k * h + r) * w + c];
                        *v = (1.0 - alpha) * *v + alpha * col;
                    }
                }
            }
        }
        if !o.bbox.is_valid() {
            continue;
        }
        let clamp = |v: f64, hi: usize| (v.floor().max(0.0) as usize).min(hi - 1);
        let (c0, c1) = (clamp(o.bbox.x, w), clamp(o.bbox.x1() - 1e-9, w));
        let (r0, r1) = (clamp(o.bbox.y, h), clamp(o.bbox.y1() - 1e-9, h));
        let mut put = |r: usize, c: usize| {
            for (k, &col) in color.iter().enumerate() {
                data[(k * h + r) * w + c] = col;
            }
        };
        for c in c0..=c1 {
            put(r0, c);
            put(r1, c);
        }
        for r in r0..=r1 {
            put(r, c0);
            put(r, c1);
        }
    }
    Ok(out)
}
