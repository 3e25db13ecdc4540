//! Bilinear ROI pooling onto a fixed grid.
//!
//! Box coordinates are continuous in the feature map's own frame: feature
//! pixel `(y, x)` has its center at `(x + 0.5, y + 0.5)`. Each output bin
//! averages `samples_per_bin²` bilinear samples taken at regular sub-bin
//! offsets. A sample further than one pixel outside the map reads zero;
//! a sample within half a pixel of the border is clamped onto the border
//! pixel, which keeps constant fields constant for any box inside the map.

use crate::error::{ensure, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;
use crate::tensor::{expect_rank, Tensor};

/// Precomputed `(output cell, input cell, weight)` taps shared by all channels.
#[derive(Clone, Debug)]
pub struct RoiAlignPlan {
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl RoiAlignPlan {
    pub fn new(
        height: usize,
        width: usize,
        bbox: &BBox,
        out_h: usize,
        out_w: usize,
        samples_per_bin: usize,
    ) -> Result<Self> {
        ensure!(out_h > 0 && out_w > 0, "roi_align", "output grid {}x{} is empty", out_h, out_w);
        ensure!(samples_per_bin > 0, "roi_align", "samples_per_bin must be positive");
        ensure!(bbox.is_valid(), "roi_align", "degenerate box {:?}", bbox);
        let bin_h = bbox.h / out_h as f64;
        let bin_w = bbox.w / out_w as f64;
        let n = samples_per_bin as f64;
        let norm = 1.0 / (n * n);
        let mut taps = Vec::new();
        for i in 0..out_h {
            for j in 0..out_w {
                let cell = i * out_w + j;
                for sy in 0..samples_per_bin {
                    let y = bbox.y + i as f64 * bin_h + (sy as f64 + 0.5) * bin_h / n;
                    for sx in 0..samples_per_bin {
                        let x = bbox.x + j as f64 * bin_w + (sx as f64 + 0.5) * bin_w / n;
                        bilinear_taps(height, width, y - 0.5, x - 0.5, |idx, wgt| {
                            taps.push((cell, idx, wgt * norm))
                        });
                    }
                }
            }
        }
        Ok(Self {
            height,
            width,
            out_h,
            out_w,
            taps,
        })
    }

    pub fn apply<T: Scalar>(&self, features: &Tensor<T>) -> Tensor<T> {
        let c = features.dim(0);
        let (hw, ohw) = (self.height * self.width, self.out_h * self.out_w);
        let src = features.data();
        let mut out = vec![T::zero(); c * ohw];
        for ch in 0..c {
            let (s, o) = (&src[ch * hw..(ch + 1) * hw], &mut out[ch * ohw..(ch + 1) * ohw]);
            for &(cell, idx, w) in &self.taps {
                o[cell] += T::lit(w) * s[idx];
            }
        }
        Tensor::new([c, self.out_h, self.out_w], out).expect("roi_align output")
    }

    pub fn apply_backward<T: Scalar>(&self, grad: &Tensor<T>) -> Tensor<T> {
        let c = grad.dim(0);
        let (hw, ohw) = (self.height * self.width, self.out_h * self.out_w);
        let g = grad.data();
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            let (gc, o) = (&g[ch * ohw..(ch + 1) * ohw], &mut out[ch * hw..(ch + 1) * hw]);
            for &(cell, idx, w) in &self.taps {
                o[idx] += T::lit(w) * gc[cell];
            }
        }
        Tensor::new([c, self.height, self.width], out).expect("roi_align grad")
    }
}

/// Emits `(flat index, weight)` pairs for a bilinear read at index coordinates `(y, x)`.
fn bilinear_taps(height: usize, width: usize, y: f64, x: f64, mut emit: impl FnMut(usize, f64)) {
    let (hf, wf) = (height as f64, width as f64);
    if y < -1.0 || y > hf || x < -1.0 || x > wf {
        return;
    }
    let (y, x) = (y.max(0.0), x.max(0.0));
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1);
    let (mut ly, mut lx) = (y - y0 as f64, x - x0 as f64);
    if y0 >= height - 1 {
        y0 = height - 1;
        y1 = y0;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= width - 1 {
        x0 = width - 1;
        x1 = x0;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    emit(y0 * width + x0, hy * hx);
    emit(y0 * width + x1, hy * lx);
    emit(y1 * width + x0, ly * hx);
    emit(y1 * width + x1, ly * lx);
}

/// Pools `features [C,H,W]` inside `bbox` onto a `[C,out_h,out_w]` grid.
pub fn roi_align<T: Scalar>(
    features: &Tensor<T>,
    bbox: &BBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
) -> Result<Tensor<T>> {
    let s = expect_rank(features, 3, "roi_align", "features")?;
    ensure!(s[1] > 0 && s[2] > 0, "roi_align", "empty feature map {:?}", s);
    let plan = RoiAlignPlan::new(s[1], s[2], bbox, out_h, out_w, samples_per_bin)?;
    Ok(plan.apply(features))
}

/// Gradient w.r.t. the feature map for a fixed box.
pub fn roi_align_backward<T: Scalar>(
    feature_shape: &[usize],
    bbox: &BBox,
    out_h: usize,
    out_w: usize,
    samples_per_bin: usize,
    grad: &Tensor<T>,
) -> Tensor<T> {
    let plan = RoiAlignPlan::new(feature_shape[1], feature_shape[2], bbox, out_h, out_w, samples_per_bin)
        .expect("roi_align grad plan");
    plan.apply_backward(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pixel_map_identity() {
        let f = Tensor::<f64>::full([1, 1, 1], 7.0);
        let out = roi_align(&f, &BBox::new(0.0, 0.0, 1.0, 1.0), 1, 1, 1).unwrap();
        assert_eq!(out.data(), &[7.0]);
    }

    #[test]
    fn center_sample_averages_corners() {
        let f = Tensor::<f64>::new([1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let out = roi_align(&f, &BBox::new(0.0, 0.0, 2.0, 2.0), 1, 1, 1).unwrap();
        assert!((out.data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn far_outside_reads_zero() {
        let f = Tensor::<f64>::full([1, 4, 4], 3.0);
        let out = roi_align(&f, &BBox::new(10.0, 10.0, 2.0, 2.0), 2, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_empty_grid_and_degenerate_box() {
        let f = Tensor::<f64>::zeros([1, 4, 4]);
        assert!(roi_align(&f, &BBox::new(0.0, 0.0, 1.0, 1.0), 0, 2, 2).is_err());
        assert!(roi_align(&f, &BBox::new(0.0, 0.0, 0.0, 1.0), 2, 2, 2).is_err());
    }

    #[test]
    fn matches_explicit_bilinear_interior() {
        // Interior box, so no clamping: compare with a direct bilinear formula.
        let f = Tensor::<f64>::from_fn([1, 5, 5], |i| ((i * 7) % 11) as f64);
        let b = BBox::new(1.2, 0.9, 2.4, 2.6);
        let out = roi_align(&f, &b, 2, 2, 2).unwrap();
        let bil = |y: f64, x: f64| {
            let (y0, x0) = (y.floor(), x.floor());
            let (ly, lx) = (y - y0, x - x0);
            let g = |yy: f64, xx: f64| f.at(&[0, yy as usize, xx as usize]);
            (1.0 - ly) * (1.0 - lx) * g(y0, x0)
                + (1.0 - ly) * lx * g(y0, x0 + 1.0)
                + ly * (1.0 - lx) * g(y0 + 1.0, x0)
                + ly * lx * g(y0 + 1.0, x0 + 1.0)
        };
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for sy in 0..2 {
                    for sx in 0..2 {
                        let y = b.y + (i as f64 + (sy as f64 + 0.5) / 2.0) * b.h / 2.0;
                        let x = b.x + (j as f64 + (sx as f64 + 0.5) / 2.0) * b.w / 2.0;
                        acc += bil(y - 0.5, x - 0.5);
                    }
                }
                assert!((out.at(&[0, i, j]) - acc / 4.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn constant_field_is_preserved(v in -5.0f64..5.0, x in 0.0f64..7.0, y in 0.0f64..7.0,
                                       w in 0.05f64..1.0, h in 0.05f64..1.0, spb in 1usize..4) {
            // any box inside the 8x8 map extent
            let bw = w * (8.0 - x);
            let bh = h * (8.0 - y);
            let f = Tensor::<f64>::full([2, 8, 8], v);
            let out = roi_align(&f, &BBox::new(x, y, bw, bh), 3, 2, spb).unwrap();
            for &o in out.data() {
                prop_assert!((o - v).abs() < 1e-12);
            }
        }
    }
}
