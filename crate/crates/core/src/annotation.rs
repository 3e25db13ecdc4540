//! On-disk dataset layout and the JSON annotation/prediction format.
//!
//! A dataset directory holds `annotations.json` and one binary PPM per frame
//! at `frames/VVVV/NNNN.ppm`. Categories are 1-based on disk; masks are
//! row-major run-length counts starting with a run of zeros.

use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::datagen::Shape;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::tensor::Tensor;
use crate::video::{Frame, InstanceTrack, TrackEntry, Video, VideoAnnotation};

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryRecord {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryRecord {
    pub frame: usize,
    /// `[x, y, w, h]`
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub counts: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub video_id: u64,
    pub identity: u64,
    /// 1-based.
    pub category: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub entries: Vec<EntryRecord>,
}

/// Ground truth or predictions for a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub videos: Vec<VideoRecord>,
    #[serde(default)]
    pub categories: Vec<CategoryRecord>,
    pub instances: Vec<InstanceRecord>,
}

fn default_categories() -> Vec<CategoryRecord> {
    Shape::ALL
        .iter()
        .enumerate()
        .map(|(i, s)| CategoryRecord {
            id: i + 1,
            name: s.name().to_string(),
        })
        .collect()
}

fn instance_record(t: &InstanceTrack, with_scores: bool) -> InstanceRecord {
    InstanceRecord {
        video_id: t.video_id,
        identity: t.identity,
        category: t.category + 1,
        score: with_scores.then_some(t.score),
        entries: t
            .entries
            .iter()
            .map(|e| EntryRecord {
                frame: e.frame,
                bbox: e.bbox.to_array(),
                counts: e.mask.to_rle(),
                score: with_scores.then_some(e.score),
            })
            .collect(),
    }
}

impl AnnotationFile {
    /// Ground-truth document (no scores).
    pub fn from_annotations(videos: &[VideoAnnotation]) -> Self {
        Self {
            videos: videos.iter().map(video_record).collect(),
            categories: default_categories(),
            instances: videos
                .iter()
                .flat_map(|v| v.tracks.iter().map(|t| instance_record(t, false)))
                .collect(),
        }
    }

    /// Prediction document over the given video geometry.
    pub fn from_predictions(videos: &[VideoRecord], tracks: &[InstanceTrack]) -> Self {
        Self {
            videos: videos.to_vec(),
            categories: default_categories(),
            instances: tracks.iter().map(|t| instance_record(t, true)).collect(),
        }
    }

    /// Checks geometry and decodes every instance into per-video annotations
    /// in `videos` order. Missing scores read as 1.
    pub fn to_annotations(&self) -> Result<Vec<VideoAnnotation>> {
        let mut out: Vec<VideoAnnotation> = self
            .videos
            .iter()
            .map(|v| VideoAnnotation {
                video_id: v.id,
                height: v.height,
                width: v.width,
                num_frames: v.frames,
                tracks: Vec::new(),
            })
            .collect();
        for (k, v) in self.videos.iter().enumerate() {
            if self.videos[..k].iter().any(|u| u.id == v.id) {
                return Err(Error::Data(format!("duplicate video id {}", v.id)));
            }
        }
        for inst in &self.instances {
            let va = out
                .iter_mut()
                .find(|v| v.video_id == inst.video_id)
                .ok_or_else(|| Error::Data(format!("instance {} refers to unknown video {}", inst.identity, inst.video_id)))?;
            if inst.category == 0 {
                return Err(Error::Data(format!("instance {}: categories are 1-based", inst.identity)));
            }
            if va.tracks.iter().any(|t| t.identity == inst.identity) {
                return Err(Error::Data(format!(
                    "duplicate identity {} in video {}",
                    inst.identity, inst.video_id
                )));
            }
            let mut entries = Vec::with_capacity(inst.entries.len());
            for e in &inst.entries {
                if e.frame >= va.num_frames {
                    return Err(Error::Data(format!(
                        "instance {} of video {}: frame {} out of bounds",
                        inst.identity, inst.video_id, e.frame
                    )));
                }
                let mask = Mask::from_rle(va.height, va.width, &e.counts)
                    .map_err(|err| Error::Data(format!("instance {} frame {}: {err}", inst.identity, e.frame)))?;
                entries.push(TrackEntry {
                    frame: e.frame,
                    bbox: BBox::from_array(e.bbox),
                    mask,
                    score: e.score.unwrap_or(1.0),
                });
            }
            let track = InstanceTrack {
                video_id: inst.video_id,
                identity: inst.identity,
                category: inst.category - 1,
                score: inst.score.unwrap_or(1.0),
                entries,
            };
            track
                .validate()
                .map_err(|err| Error::Data(format!("instance {}: {err}", inst.identity)))?;
            va.tracks.push(track);
        }
        for v in &mut out {
            v.tracks.sort_by_key(|t| t.identity);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

pub fn video_record(v: &VideoAnnotation) -> VideoRecord {
    VideoRecord {
        id: v.video_id,
        height: v.height,
        width: v.width,
        frames: v.num_frames,
    }
}

pub fn frame_path(root: &Path, video_id: u64, frame: usize) -> PathBuf {
    root.join("frames").join(format!("{video_id:04}")).join(format!("{frame:04}.ppm"))
}

/// Quantises `[3,H,W]` pixels to 8 bits and writes a binary PPM.
pub fn write_ppm(path: &Path, pixels: &Tensor<f64>) -> Result<()> {
    let (h, w) = (pixels.dim(1), pixels.dim(2));
    let mut buf = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((pixels.at(&[c, y, x]).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&buf, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads any PNM image as `[3,H,W]` pixels in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn([3, h, w], |i| {
        let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Writes frames and ground truth under `root`.
pub fn write_dataset(root: &Path, videos: &[Video]) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for v in videos {
        for f in &v.frames {
            write_ppm(&frame_path(root, v.annotation.video_id, f.index), &f.pixels)?;
        }
    }
    let anns: Vec<VideoAnnotation> = videos.iter().map(|v| v.annotation.clone()).collect();
    AnnotationFile::from_annotations(&anns).write(&root.join(ANNOTATION_FILE))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<Vec<Video>> {
    let anns = AnnotationFile::read(&root.join(ANNOTATION_FILE))?.to_annotations()?;
    anns.into_iter()
        .map(|a| {
            let frames = (0..a.num_frames)
                .map(|t| {
                    let path = frame_path(root, a.video_id, t);
                    let px = read_ppm(&path)?;
                    if px.dim(1) != a.height || px.dim(2) != a.width {
                        return Err(Error::Data(format!(
                            "{}: size {}x{} differs from annotated {}x{}",
                            path.display(),
                            px.dim(1),
                            px.dim(2),
                            a.height,
                            a.width
                        )));
                    }
                    Frame::new(px, t, a.video_id)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Video { frames, annotation: a })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, SynthConfig};

    fn small() -> Vec<Video> {
        gen_dataset(&SynthConfig {
            num_videos: 2,
            frames_per_video: 3,
            height: 32,
            width: 32,
            size_range: (6.0, 9.0),
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn json_round_trip() {
        let anns: Vec<VideoAnnotation> = small().into_iter().map(|v| v.annotation).collect();
        let f = AnnotationFile::from_annotations(&anns);
        let back = AnnotationFile::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_annotations().unwrap(), anns);
    }

    #[test]
    fn bad_rle_and_frames_are_rejected() {
        let anns: Vec<VideoAnnotation> = small().into_iter().map(|v| v.annotation).collect();
        let mut f = AnnotationFile::from_annotations(&anns);
        f.instances[0].entries[0].counts.push(3);
        assert!(f.to_annotations().is_err());
        let mut f = AnnotationFile::from_annotations(&anns);
        f.instances[0].entries[0].frame = 99;
        assert!(f.to_annotations().is_err());
        assert!(AnnotationFile::from_json(r#"{"videos":[],"instances":[],"extra":1}"#).is_err());
    }

    #[test]
    fn dataset_round_trip_quantises_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let vids = small();
        write_dataset(dir.path(), &vids).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in vids.iter().zip(&back) {
            assert_eq!(a.annotation, b.annotation);
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                assert!(fa.pixels.max_abs_diff(&fb.pixels) <= 0.5 / 255.0 + 1e-12);
            }
        }
    }
}
