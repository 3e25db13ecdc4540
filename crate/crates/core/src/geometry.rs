//! Boxes, binary masks and run-length encoding.
//!
//! Coordinates are continuous: pixel `(row, col)` covers `[col, col+1) x [row, row+1)`
//! and has its center at `(col + 0.5, row + 0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Axis-aligned box `(x, y, w, h)` in continuous coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn x1(&self) -> f64 {
        self.x + self.w
    }

    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + 0.5 * self.w, self.y + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x.is_finite()
            && self.y.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    /// Multiplies every coordinate by `k` (e.g. `1/stride` to go to feature space).
    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k, self.w * k, self.h * k)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x.max(other.x)).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Row-major binary mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            "mask",
            "{}x{} mask needs {} values, got {}",
            height,
            width,
            height * width,
            data.len()
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// `(|a ∩ b|, |a ∪ b|)`; masks must share a grid.
    pub fn overlap(&self, other: &Self) -> (usize, usize) {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "mask grids differ"
        );
        self.data
            .iter()
            .zip(&other.data)
            .fold((0, 0), |(i, u), (&a, &b)| {
                (i + (a && b) as usize, u + (a || b) as usize)
            })
    }

    /// Tight pixel-aligned box around the set pixels.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
        let mut any = false;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    any = true;
                    r0 = r0.min(r);
                    c0 = c0.min(c);
                    r1 = r1.max(r);
                    c1 = c1.max(c);
                }
            }
        }
        any.then(|| BBox::from_corners(c0 as f64, r0 as f64, (c1 + 1) as f64, (r1 + 1) as f64))
    }

    /// Uncompressed row-major run lengths, starting with a (possibly empty) run of zeros.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.data {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        counts
    }

    pub fn from_rle(height: usize, width: usize, counts: &[u32]) -> Result<Self> {
        let total: u64 = counts.iter().map(|&c| c as u64).sum();
        ensure!(
            total == (height * width) as u64,
            "rle",
            "run lengths sum to {} but the mask has {} pixels",
            total,
            height * width
        );
        let mut data = Vec::with_capacity(height * width);
        let mut value = false;
        for &c in counts {
            data.extend(std::iter::repeat_n(value, c as usize));
            value = !value;
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }
}
