//! Frames, per-frame ground truth and per-identity instance tracks.

use crate::error::{ensure, Result};
use crate::geometry::{BBox, Mask};
use crate::tensor::Tensor;

/// One RGB frame with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// `[3, H, W]`
    pub pixels: Tensor<f64>,
    pub index: usize,
    pub video_id: u64,
}

impl Frame {
    pub fn new(pixels: Tensor<f64>, index: usize, video_id: u64) -> Result<Self> {
        ensure!(
            pixels.rank() == 3 && pixels.dim(0) == 3,
            "frame",
            "pixels must be [3,H,W], got {:?}",
            pixels.shape()
        );
        ensure!(
            pixels.data().iter().all(|v| (0.0..=1.0).contains(v)),
            "frame",
            "pixel values must lie in [0,1]"
        );
        Ok(Self {
            pixels,
            index,
            video_id,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim(1)
    }

    pub fn width(&self) -> usize {
        self.pixels.dim(2)
    }
}

/// Ground truth for one object in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameObject {
    pub identity: u64,
    /// Zero-based category index.
    pub category: usize,
    pub bbox: BBox,
    pub mask: Mask,
}

/// One frame of an [`InstanceTrack`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrackEntry {
    pub frame: usize,
    pub bbox: BBox,
    pub mask: Mask,
    pub score: f64,
}

/// A persistent instance across a video, ground truth or predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTrack {
    pub video_id: u64,
    pub identity: u64,
    /// Zero-based category index.
    pub category: usize,
    /// Track-level confidence; 1 for ground truth.
    pub score: f64,
    /// Strictly increasing in `frame`.
    pub entries: Vec<TrackEntry>,
}

impl InstanceTrack {
    pub fn entry(&self, frame: usize) -> Option<&TrackEntry> {
        self.entries
            .binary_search_by_key(&frame, |e| e.frame)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.entries.windows(2).all(|w| w[0].frame < w[1].frame),
            "instance_track",
            "track {} of video {} has frames out of order or repeated",
            self.identity,
            self.video_id
        );
        Ok(())
    }
}

/// All instances of one video together with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoAnnotation {
    pub video_id: u64,
    pub height: usize,
    pub width: usize,
    pub num_frames: usize,
    pub tracks: Vec<InstanceTrack>,
}

impl VideoAnnotation {
    /// Objects visible in `frame`, ordered by identity.
    pub fn frame_objects(&self, frame: usize) -> Vec<FrameObject> {
        let mut out: Vec<FrameObject> = self
            .tracks
            .iter()
            .filter_map(|t| {
                t.entry(frame).map(|e| FrameObject {
                    identity: t.identity,
                    category: t.category,
                    bbox: e.bbox,
                    mask: e.mask.clone(),
                })
            })
            .collect();
        out.sort_by_key(|o| o.identity);
        out
    }

    /// Builds tracks from per-frame object lists (frame index = list position).
    pub fn from_frames(video_id: u64, height: usize, width: usize, frames: &[Vec<FrameObject>]) -> Self {
        let mut tracks: Vec<InstanceTrack> = Vec::new();
        for (t, objs) in frames.iter().enumerate() {
            for o in objs {
                let entry = TrackEntry {
                    frame: t,
                    bbox: o.bbox,
                    mask: o.mask.clone(),
                    score: 1.0,
                };
                match tracks.iter_mut().find(|tr| tr.identity == o.identity) {
                    Some(tr) => tr.entries.push(entry),
                    None => tracks.push(InstanceTrack {
                        video_id,
                        identity: o.identity,
                        category: o.category,
                        score: 1.0,
                        entries: vec![entry],
                    }),
                }
            }
        }
        tracks.sort_by_key(|t| t.identity);
        Self {
            video_id,
            height,
            width,
            num_frames: frames.len(),
            tracks,
        }
    }
}

/// Frames and ground truth of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub frames: Vec<Frame>,
    pub annotation: VideoAnnotation,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_rejects_out_of_range_pixels() {
        assert!(Frame::new(Tensor::full([3, 2, 2], 1.5), 0, 0).is_err());
        assert!(Frame::new(Tensor::full([1, 2, 2], 0.5), 0, 0).is_err());
        assert!(Frame::new(Tensor::full([3, 2, 2], 0.5), 0, 0).is_ok());
    }

    #[test]
    fn from_frames_groups_by_identity() {
        let m = Mask::from_fn(4, 4, |r, c| r < 2 && c < 2);
        let obj = |id| FrameObject {
            identity: id,
            category: 1,
            bbox: BBox::new(0.0, 0.0, 2.0, 2.0),
            mask: m.clone(),
        };
        let ann = VideoAnnotation::from_frames(3, 4, 4, &[vec![obj(1), obj(2)], vec![obj(2)]]);
        assert_eq!(ann.tracks.len(), 2);
        assert_eq!(ann.tracks[1].entries.len(), 2);
        assert_eq!(ann.frame_objects(1).len(), 1);
        assert!(ann.tracks.iter().all(|t| t.validate().is_ok()));
    }
}
