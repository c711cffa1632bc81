//! On-disk dataset layout:
//!
//! ```text
//! <root>/videos/<video_id>/frame_00000.png   8-bit RGB
//! <root>/annotations.json
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use super::rle;
use super::scenario::ShapeKind;
use super::{Frame, InstanceTrack, VideoSample};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct VideoRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct CategoryRecord {
    pub id: usize,
    pub name: String,
}

/// RLE mask as stored on disk; `size` is `[height, width]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RleRecord {
    pub counts: Vec<u64>,
    pub size: [usize; 2],
}

impl RleRecord {
    pub fn encode(mask: &BinaryMask) -> Self {
        Self {
            counts: rle::encode(mask),
            size: [mask.height(), mask.width()],
        }
    }

    pub fn decode(&self) -> Result<BinaryMask, String> {
        rle::decode(&self.counts, self.size[0], self.size[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct AnnotationRecord {
    pub video_id: String,
    pub track_id: usize,
    pub category_id: usize,
    pub segmentations: Vec<Option<RleRecord>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct AnnotationsFile {
    pub videos: Vec<VideoRecord>,
    pub categories: Vec<CategoryRecord>,
    pub annotations: Vec<AnnotationRecord>,
}

/// Summary of a written dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub video_ids: Vec<String>,
    pub num_annotations: usize,
    pub num_frames: usize,
}

pub(crate) fn default_categories() -> Vec<CategoryRecord> {
    ShapeKind::ALL
        .iter()
        .map(|k| CategoryRecord {
            id: k.category_id(),
            name: k.name().to_string(),
        })
        .collect()
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:05}.png")
}

pub fn encode_png(frame: &Frame, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let encoder = PngEncoder::new_with_quality(BufWriter::new(file), CompressionType::Default, FilterType::Adaptive);
    encoder
        .write_image(
            frame.rgb(),
            frame.width() as u32,
            frame.height() as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub fn write_dataset(samples: &[VideoSample], directory: &Path) -> Result<DatasetManifest> {
    let videos_dir = directory.join("videos");
    fs::create_dir_all(&videos_dir).map_err(|e| Error::io(&videos_dir, e))?;
    let mut file = AnnotationsFile {
        videos: Vec::with_capacity(samples.len()),
        categories: default_categories(),
        annotations: Vec::new(),
    };
    let mut num_frames = 0;
    for s in samples {
        let vdir = videos_dir.join(&s.video_id);
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        for (t, f) in s.frames.iter().enumerate() {
            encode_png(f, &vdir.join(frame_file_name(t)))?;
        }
        num_frames += s.frames.len();
        file.videos.push(VideoRecord {
            id: s.video_id.clone(),
            width: s.width,
            height: s.height,
            length: s.frames.len(),
        });
        for tr in &s.tracks {
            file.annotations.push(AnnotationRecord {
                video_id: s.video_id.clone(),
                track_id: tr.track_id,
                category_id: tr.category_id,
                segmentations: tr.masks.iter().map(|m| m.as_ref().map(RleRecord::encode)).collect(),
            });
        }
    }
    let path = directory.join(ANNOTATIONS_FILE);
    let json = serde_json::to_string(&file).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(DatasetManifest {
        root: directory.to_path_buf(),
        video_ids: file.videos.iter().map(|v| v.id.clone()).collect(),
        num_annotations: file.annotations.len(),
        num_frames,
    })
}

pub fn load_dataset(directory: &Path) -> Result<Vec<VideoSample>> {
    let path = directory.join(ANNOTATIONS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: AnnotationsFile = serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;

    let mut samples: Vec<VideoSample> = Vec::with_capacity(file.videos.len());
    for v in &file.videos {
        let mut frames = Vec::with_capacity(v.length);
        for t in 0..v.length {
            let fpath = directory.join("videos").join(&v.id).join(frame_file_name(t));
            if !fpath.is_file() {
                return Err(Error::MissingFrame {
                    video_id: v.id.clone(),
                    frame: t,
                });
            }
            let img = image::open(&fpath)
                .map_err(|source| Error::Image {
                    path: fpath.clone(),
                    source,
                })?
                .to_rgb8();
            if (img.height() as usize, img.width() as usize) != (v.height, v.width) {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, expected {}x{}",
                    fpath.display(),
                    img.height(),
                    img.width(),
                    v.height,
                    v.width
                )));
            }
            frames.push(Frame::new(v.height, v.width, img.into_raw()));
        }
        samples.push(VideoSample {
            video_id: v.id.clone(),
            height: v.height,
            width: v.width,
            frames,
            tracks: Vec::new(),
        });
    }

    for (k, a) in file.annotations.iter().enumerate() {
        let name = format!("#{k} (video {}, track {})", a.video_id, a.track_id);
        let Some(sample) = samples.iter_mut().find(|s| s.video_id == a.video_id) else {
            return Err(Error::UnknownVideo {
                annotation: name,
                video_id: a.video_id.clone(),
            });
        };
        if a.segmentations.len() != sample.frames.len() {
            return Err(Error::Annotation {
                annotation: name,
                message: format!(
                    "{} segmentations for a {}-frame video",
                    a.segmentations.len(),
                    sample.frames.len()
                ),
            });
        }
        let mut masks = Vec::with_capacity(a.segmentations.len());
        for seg in &a.segmentations {
            let mask = match seg {
                None => None,
                Some(r) => {
                    if r.size != [sample.height, sample.width] {
                        return Err(Error::Annotation {
                            annotation: name,
                            message: format!("mask size {:?} differs from video", r.size),
                        });
                    }
                    let m = r.decode().map_err(|message| Error::Annotation {
                        annotation: name.clone(),
                        message,
                    })?;
                    Some(m)
                }
            };
            masks.push(mask);
        }
        sample.tracks.push(InstanceTrack::new(a.track_id, a.category_id, masks));
    }
    Ok(samples)
}
