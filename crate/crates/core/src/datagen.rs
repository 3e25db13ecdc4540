//! Seeded synthetic videos of moving shapes and affine pseudo-videos from a still.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::{BBox, Mask};
use crate::tensor::Tensor;
use crate::video::{Frame, FrameObject, Video, VideoAnnotation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disc, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Disc => "disc",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether point `(x, y)` lies inside the shape of side `s` centred at `(cx, cy)`.
    fn contains(self, cx: f64, cy: f64, s: f64, x: f64, y: f64) -> bool {
        let (dx, dy, r) = (x - cx, y - cy, 0.5 * s);
        match self {
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Triangle => {
                let t = (dy + r) / s;
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Random positions and headings.
    #[default]
    Random,
    /// Objects travel straight through the frame center, each reaching it
    /// at its own time between a quarter and three quarters of the video.
    Crossing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub objects_per_video: usize,
    pub categories: Vec<Shape>,
    /// Object side length range in pixels.
    pub size_range: (f64, f64),
    /// Speed range in pixels per frame.
    pub speed_range: (f64, f64),
    /// Per-frame uniform velocity perturbation in pixels.
    pub motion_noise: f64,
    pub allow_occlusion: bool,
    pub layout: Layout,
    /// Same shape, size and color for every object.
    pub identical_appearance: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_videos: 4,
            frames_per_video: 8,
            height: 96,
            width: 96,
            objects_per_video: 2,
            categories: Shape::ALL.to_vec(),
            size_range: (12.0, 20.0),
            speed_range: (1.0, 3.0),
            motion_noise: 0.3,
            allow_occlusion: true,
            layout: Layout::Random,
            identical_appearance: false,
            seed: 0,
        }
    }
}

const BACKGROUND: f64 = 0.05;
const MAX_PLACEMENT_TRIES: usize = 200;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.num_videos > 0 && self.frames_per_video > 0 && self.height > 0 && self.width > 0,
            "synth_config",
            "all extents must be positive"
        );
        ensure!(!self.categories.is_empty(), "synth_config", "category list is empty");
        let (lo, hi) = self.size_range;
        ensure!(lo > 0.0 && lo <= hi, "synth_config", "invalid size range {:?}", self.size_range);
        ensure!(
            hi < self.height.min(self.width) as f64,
            "gen_synthetic_video",
            "objects up to {} px do not fit a {}x{} frame",
            hi,
            self.height,
            self.width
        );
        ensure!(
            self.speed_range.0 >= 0.0 && self.speed_range.0 <= self.speed_range.1,
            "synth_config",
            "invalid speed range {:?}",
            self.speed_range
        );
        ensure!(self.motion_noise >= 0.0, "synth_config", "motion_noise must be nonnegative");
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Sprite {
    shape: Shape,
    category: usize,
    size: f64,
    color: [f64; 3],
    /// Centre per frame.
    path: Vec<(f64, f64)>,
}

fn bright_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    loop {
        let c = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        if lum > 0.45 && c.iter().cloned().fold(0.0, f64::max) > 0.7 {
            return c;
        }
    }
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = vel.abs();
    }
    if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -vel.abs();
    }
    *pos = pos.clamp(lo, hi);
}

fn sample_sprites<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<Sprite> {
    let (h, w, n, t) = (cfg.height as f64, cfg.width as f64, cfg.objects_per_video, cfg.frames_per_video);
    let shared = (
        rng.gen_range(0..cfg.categories.len()),
        rng.gen_range(cfg.size_range.0..=cfg.size_range.1),
        bright_color(rng),
    );
    let ring_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    (0..n)
        .map(|k| {
            let (cat, size, color) = if cfg.identical_appearance {
                shared
            } else {
                (
                    rng.gen_range(0..cfg.categories.len()),
                    rng.gen_range(cfg.size_range.0..=cfg.size_range.1),
                    bright_color(rng),
                )
            };
            let r = 0.5 * size;
            let (mut x, mut y, mut vx, mut vy);
            match cfg.layout {
                Layout::Random => {
                    x = rng.gen_range(r..=w - r);
                    y = rng.gen_range(r..=h - r);
                    let speed = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    vx = speed * a.cos();
                    vy = speed * a.sin();
                }
                Layout::Crossing => {
                    let a = ring_phase + std::f64::consts::TAU * k as f64 / n as f64 + rng.gen_range(-0.2..0.2);
                    let span = (t.max(2) - 1) as f64;
                    let speed = rng.gen_range(cfg.speed_range.0..=cfg.speed_range.1);
                    let arrival = rng.gen_range(0.25..=0.75) * span;
                    vx = speed * a.cos();
                    vy = speed * a.sin();
                    x = 0.5 * w - vx * arrival;
                    y = 0.5 * h - vy * arrival;
                }
            }
            let mut path = Vec::with_capacity(t);
            for f in 0..t {
                if f > 0 {
                    vx += rng.gen_range(-1.0..=1.0) * cfg.motion_noise;
                    vy += rng.gen_range(-1.0..=1.0) * cfg.motion_noise;
                    x += vx;
                    y += vy;
                    reflect(&mut x, &mut vx, r, w - r);
                    reflect(&mut y, &mut vy, r, h - r);
                }
                path.push((x, y));
            }
            Sprite {
                shape: cfg.categories[cat],
                category: cat,
                size,
                color,
                path,
            }
        })
        .collect()
}

fn footprint(s: &Sprite, f: usize, h: usize, w: usize) -> Mask {
    let (cx, cy) = s.path[f];
    Mask::from_fn(h, w, |r, c| s.shape.contains(cx, cy, s.size, c as f64 + 0.5, r as f64 + 0.5))
}

fn any_overlap(sprites: &[Sprite], frames: usize, h: usize, w: usize) -> bool {
    (0..frames).any(|f| {
        let fp: Vec<Mask> = sprites.iter().map(|s| footprint(s, f, h, w)).collect();
        (0..fp.len()).any(|i| (i + 1..fp.len()).any(|j| fp[i].overlap(&fp[j]).0 > 0))
    })
}

/// Generates video `index` of the dataset described by `cfg`.
pub fn gen_synthetic_video(cfg: &SynthConfig, index: usize) -> Result<Video> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (h, w, t) = (cfg.height, cfg.width, cfg.frames_per_video);
    let mut sprites = sample_sprites(cfg, &mut rng);
    if !cfg.allow_occlusion {
        let mut tries = 1;
        while any_overlap(&sprites, t, h, w) {
            ensure!(
                tries < MAX_PLACEMENT_TRIES,
                "gen_synthetic_video",
                "could not place {} non-overlapping objects in {} tries",
                cfg.objects_per_video,
                MAX_PLACEMENT_TRIES
            );
            sprites = sample_sprites(cfg, &mut rng);
            tries += 1;
        }
    }
    let texture: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-0.03..=0.03)).collect();
    let video_id = index as u64 + 1;
    let mut frames = Vec::with_capacity(t);
    let mut objects = Vec::with_capacity(t);
    for f in 0..t {
        let mut owner: Vec<Option<usize>> = vec![None; h * w];
        for (k, s) in sprites.iter().enumerate() {
            let fp = footprint(s, f, h, w);
            for (i, &b) in fp.data().iter().enumerate() {
                if b {
                    owner[i] = Some(k);
                }
            }
        }
        let mut px = Tensor::zeros([3, h, w]);
        let data = px.data_mut();
        for i in 0..h * w {
            for c in 0..3 {
                data[c * h * w + i] = match owner[i] {
                    Some(k) => sprites[k].color[c],
                    None => BACKGROUND + texture[i],
                };
            }
        }
        frames.push(Frame::new(px, f, video_id)?);
        let mut objs = Vec::new();
        for (k, s) in sprites.iter().enumerate() {
            let mask = Mask::new(h, w, owner.iter().map(|&o| o == Some(k)).collect())?;
            if let Some(bbox) = mask.tight_bbox() {
                objs.push(FrameObject {
                    identity: k as u64 + 1,
                    category: s.category,
                    bbox,
                    mask,
                });
            }
        }
        objects.push(objs);
    }
    Ok(Video {
        frames,
        annotation: VideoAnnotation::from_frames(video_id, h, w, &objects),
    })
}

/// All videos of the dataset, generated in parallel.
pub fn gen_dataset(cfg: &SynthConfig) -> Result<Vec<Video>> {
    use rayon::prelude::*;
    (0..cfg.num_videos)
        .into_par_iter()
        .map(|i| gen_synthetic_video(cfg, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineAugConfig {
    pub frames: usize,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum absolute translation as a fraction of width/height.
    pub translation: f64,
    /// Maximum absolute horizontal shear factor.
    pub shear: f64,
    pub seed: u64,
}

impl Default for AffineAugConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            rotation_deg: 15.0,
            translation: 0.1,
            shear: 0.1,
            seed: 0,
        }
    }
}

/// `p' = A (p - c) + c + t` with `c` the image center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    /// Rotation (degrees) after horizontal shear, then translation in pixels.
    pub fn new(rotation_deg: f64, shear: f64, tx: f64, ty: f64) -> Self {
        let (s, c) = rotation_deg.to_radians().sin_cos();
        Self {
            a: [[c, c * shear - s], [s, s * shear + c]],
            t: [tx, ty],
        }
    }

    fn inverse_point(&self, x: f64, y: f64, cx: f64, cy: f64) -> (f64, f64) {
        let [[a, b], [c, d]] = self.a;
        let det = a * d - b * c;
        let (u, v) = (x - cx - self.t[0], y - cy - self.t[1]);
        ((d * u - b * v) / det + cx, (-c * u + a * v) / det + cy)
    }
}

fn bilinear_channel(src: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (xf, yf) = (x - 0.5, y - 0.5);
    let (x0, y0) = (xf.floor(), yf.floor());
    let (lx, ly) = (xf - x0, yf - y0);
    let get = |yy: f64, xx: f64| {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            src[yy as usize * w + xx as usize]
        }
    };
    (1.0 - ly) * ((1.0 - lx) * get(y0, x0) + lx * get(y0, x0 + 1.0)) + ly * ((1.0 - lx) * get(y0 + 1.0, x0) + lx * get(y0 + 1.0, x0 + 1.0))
}

/// Warps a frame and its objects; objects whose mask leaves the frame are dropped.
pub fn apply_affine(frame: &Frame, objects: &[FrameObject], map: &AffineMap, index: usize) -> Result<(Frame, Vec<FrameObject>)> {
    let (h, w) = (frame.height(), frame.width());
    let (cx, cy) = (0.5 * w as f64, 0.5 * h as f64);
    let src: Vec<(f64, f64)> = (0..h * w)
        .map(|i| map.inverse_point((i % w) as f64 + 0.5, (i / w) as f64 + 0.5, cx, cy))
        .collect();
    let mut px = Tensor::zeros([3, h, w]);
    for c in 0..3 {
        let plane = &frame.pixels.data()[c * h * w..(c + 1) * h * w];
        for (i, &(x, y)) in src.iter().enumerate() {
            px.data_mut()[c * h * w + i] = bilinear_channel(plane, h, w, x, y).clamp(0.0, 1.0);
        }
    }
    let nearest = |m: &Mask, i: usize| {
        let (x, y) = src[i];
        x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h && m.get(y as usize, x as usize)
    };
    let objs = objects
        .iter()
        .filter_map(|o| {
            let m = Mask::new(h, w, (0..h * w).map(|i| nearest(&o.mask, i)).collect()).ok()?;
            let bbox = m.tight_bbox()?;
            Some(FrameObject {
                identity: o.identity,
                category: o.category,
                bbox,
                mask: m,
            })
        })
        .collect();
    Ok((Frame::new(px, index, frame.video_id)?, objs))
}

/// Builds a pseudo-video of `cfg.frames` independently warped copies of a still.
pub fn augment_still(image: &Frame, objects: &[FrameObject], cfg: &AffineAugConfig) -> Result<Video> {
    ensure!(cfg.frames > 0, "augment_still", "frame count must be positive");
    ensure!(
        cfg.rotation_deg >= 0.0 && cfg.translation >= 0.0 && cfg.shear >= 0.0,
        "augment_still",
        "ranges must be nonnegative"
    );
    for o in objects {
        if o.mask.height() != image.height() || o.mask.width() != image.width() {
            return Err(Error::Data(format!("mask of instance {} does not match the image size", o.identity)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sym = |rng: &mut ChaCha8Rng, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
    let (h, w) = (image.height(), image.width());
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut objs = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let map = AffineMap::new(
            sym(&mut rng, cfg.rotation_deg),
            sym(&mut rng, cfg.shear),
            sym(&mut rng, cfg.translation) * w as f64,
            sym(&mut rng, cfg.translation) * h as f64,
        );
        let (f, o) = apply_affine(image, objects, &map, t)?;
        frames.push(f);
        objs.push(o);
    }
    Ok(Video {
        frames,
        annotation: VideoAnnotation::from_frames(image.video_id, h, w, &objs),
    })
}

/// Boxes in `objects` recomputed from their masks.
pub fn boxes_from_masks(objects: &[FrameObject]) -> Vec<Option<BBox>> {
    objects.iter().map(|o| o.mask.tight_bbox()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_videos: 2,
            frames_per_video: 6,
            height: 48,
            width: 48,
            objects_per_video: 3,
            size_range: (8.0, 12.0),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_synthetic_video(&small(), 1).unwrap();
        let b = gen_synthetic_video(&small(), 1).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic_video(&small(), 0).unwrap();
        assert_ne!(a.frames[0], c.frames[0]);
    }

    #[test]
    fn boxes_are_tight_and_categories_persist() {
        let v = gen_synthetic_video(&small(), 0).unwrap();
        for t in 0..6 {
            for o in v.annotation.frame_objects(t) {
                assert_eq!(o.mask.tight_bbox(), Some(o.bbox));
            }
        }
        for tr in &v.annotation.tracks {
            assert!(tr.validate().is_ok());
        }
    }

    #[test]
    fn rejects_oversized_objects() {
        let cfg = SynthConfig {
            size_range: (10.0, 60.0),
            ..small()
        };
        assert!(gen_synthetic_video(&cfg, 0).is_err());
    }

    #[test]
    fn no_occlusion_means_disjoint_masks() {
        let cfg = SynthConfig {
            allow_occlusion: false,
            ..small()
        };
        let v = gen_synthetic_video(&cfg, 0).unwrap();
        for t in 0..6 {
            let objs = v.annotation.frame_objects(t);
            assert_eq!(objs.len(), 3);
        }
    }

    #[test]
    fn zero_ranges_copy_the_still() {
        let v = gen_synthetic_video(&small(), 0).unwrap();
        let objs = v.annotation.frame_objects(0);
        let cfg = AffineAugConfig {
            frames: 3,
            rotation_deg: 0.0,
            translation: 0.0,
            shear: 0.0,
            seed: 1,
        };
        let p = augment_still(&v.frames[0], &objs, &cfg).unwrap();
        for t in 0..3 {
            assert!(p.frames[t].pixels.max_abs_diff(&v.frames[0].pixels) < 1e-12);
            assert_eq!(p.annotation.frame_objects(t), objs);
        }
    }

    #[test]
    fn integer_translation_shifts_boxes() {
        let v = gen_synthetic_video(&small(), 1).unwrap();
        let objs = v.annotation.frame_objects(0);
        let (_, moved) = apply_affine(&v.frames[0], &objs, &AffineMap::new(0.0, 0.0, 5.0, 0.0), 0).unwrap();
        for (a, b) in objs.iter().zip(&moved) {
            if a.bbox.x1() + 5.0 <= 48.0 {
                assert_eq!(b.bbox.x, a.bbox.x + 5.0);
                assert_eq!(b.bbox.y, a.bbox.y);
            }
        }
    }

    #[test]
    fn rotated_masks_have_tight_boxes() {
        let v = gen_synthetic_video(&small(), 0).unwrap();
        let objs = v.annotation.frame_objects(0);
        let (_, rot) = apply_affine(&v.frames[0], &objs, &AffineMap::new(15.0, 0.0, 0.0, 0.0), 0).unwrap();
        assert!(!rot.is_empty());
        for o in &rot {
            assert_eq!(o.mask.tight_bbox(), Some(o.bbox));
        }
    }
}
