//! Real-video ingestion: pre-extracted frame directories plus box annotations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, GenericImageView};

use super::{AnnotatedClip, ClipTensor, InMemoryDataset, MaskVolume};
use crate::error::{Error, Result};

/// How frames are turned into clips.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadConfig {
    pub frames: usize,
    /// Output frames are `size × size`.
    pub size: usize,
    /// 3 for RGB, 1 for luma.
    pub channels: usize,
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            frames: 16,
            size: 128,
            channels: 3,
        }
    }
}

/// Half-open pixel box `[x_min, x_max) × [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxPx {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

fn is_frame_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn list_frames(frame_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(frame_dir).map_err(|e| Error::io(frame_dir, e))? {
        let path = entry.map_err(|e| Error::io(frame_dir, e))?.path();
        if path.is_file() && is_frame_file(&path) {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::FrameLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads `config.frames` consecutive frames starting at `start_frame`
/// (lexicographic file order), resized bilinearly to `size × size`, with
/// pixel value `p ∈ [0, 255]` mapped to `p / 127.5 - 1`.
pub fn load_clip(frame_dir: &Path, start_frame: usize, config: &LoadConfig) -> Result<ClipTensor> {
    let frames = list_frames(frame_dir)?;
    load_from_list(&frames, start_frame, config)
}

fn load_from_list(frames: &[PathBuf], start_frame: usize, config: &LoadConfig) -> Result<ClipTensor> {
    if start_frame + config.frames > frames.len() {
        return Err(Error::Range(format!(
            "need frames [{start_frame}, {}) but only {} available",
            start_frame + config.frames,
            frames.len()
        )));
    }
    if config.channels != 1 && config.channels != 3 {
        return Err(Error::Validation(format!(
            "channels must be 1 or 3, got {}",
            config.channels
        )));
    }
    let size = config.size as u32;
    let mut values = Vec::with_capacity(config.frames * config.size * config.size * config.channels);
    for path in &frames[start_frame..start_frame + config.frames] {
        let img = decode(path)?;
        // to_rgb32f maps 0..=255 onto 0.0..=1.0, so 2v - 1 == p / 127.5 - 1.
        let rgb = imageops::resize(&img.to_rgb32f(), size, size, FilterType::Triangle);
        for px in rgb.pixels() {
            let [r, g, b] = px.0;
            if config.channels == 3 {
                values.extend([r, g, b].map(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0)));
            } else {
                let luma = 0.299 * r + 0.587 * g + 0.114 * b;
                values.push((2.0 * luma - 1.0).clamp(-1.0, 1.0));
            }
        }
    }
    ClipTensor::new([config.frames, config.size, config.size, config.channels], values)
}

/// Parses `frame_idx x_min y_min x_max y_max` lines; `#` starts a comment.
/// Several lines for one frame form a union.
pub fn parse_annotations(text: &str) -> Result<BTreeMap<usize, Vec<BoxPx>>> {
    let mut out: BTreeMap<usize, Vec<BoxPx>> = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<usize> = line
            .split_whitespace()
            .map(|f| f.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Validation(format!("annotation line {}: {e}", lineno + 1)))?;
        let [frame, x_min, y_min, x_max, y_max] = fields[..] else {
            return Err(Error::Validation(format!(
                "annotation line {}: expected 5 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        };
        out.entry(frame).or_default().push(BoxPx {
            x_min,
            y_min,
            x_max,
            y_max,
        });
    }
    Ok(out)
}

/// Maps a box from a `from = (width, height)` frame to a `to` frame,
/// rounding outward so the scaled box still covers the object.
pub fn scale_box(b: BoxPx, from: (usize, usize), to: (usize, usize)) -> BoxPx {
    let sx = to.0 as f64 / from.0 as f64;
    let sy = to.1 as f64 / from.1 as f64;
    BoxPx {
        x_min: ((b.x_min as f64 * sx).floor() as usize).min(to.0),
        y_min: ((b.y_min as f64 * sy).floor() as usize).min(to.1),
        x_max: ((b.x_max as f64 * sx).ceil() as usize).min(to.0),
        y_max: ((b.y_max as f64 * sy).ceil() as usize).min(to.1),
    }
}

/// One entry per frame; a pixel is foreground iff it lies in that frame's union of boxes.
pub fn rasterize_mask(boxes: &[Vec<BoxPx>], t: usize, h: usize, w: usize) -> Result<MaskVolume> {
    if boxes.len() != t {
        return Err(Error::Validation(format!(
            "{} box lists for {t} frames",
            boxes.len()
        )));
    }
    let mut values = vec![0u8; t * h * w];
    for (frame, list) in boxes.iter().enumerate() {
        for b in list {
            if b.x_min >= b.x_max || b.y_min >= b.y_max || b.x_max > w || b.y_max > h {
                return Err(Error::Validation(format!(
                    "frame {frame}: box {b:?} is inverted or outside {w}x{h}"
                )));
            }
            for y in b.y_min..b.y_max {
                let row = (frame * h + y) * w;
                values[row + b.x_min..row + b.x_max].fill(1);
            }
        }
    }
    MaskVolume::new([t, h, w], values)
}

/// Reads a root directory with one subdirectory per video. Each video
/// directory holds numbered frames, an optional `boxes.txt` annotation file,
/// and an optional `label.txt` holding a class index. Videos are cut into
/// non-overlapping clips; a tail shorter than a clip is dropped.
pub fn load_video_dataset(root: &Path, config: &LoadConfig, num_classes: Option<usize>) -> Result<InMemoryDataset> {
    let mut videos: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    videos.sort();
    let mut items = Vec::new();
    for video in videos {
        let id = video
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let frames = list_frames(&video)?;
        if frames.len() < config.frames {
            continue;
        }
        let boxes_path = video.join("boxes.txt");
        let annotations = if boxes_path.exists() {
            let text = fs::read_to_string(&boxes_path).map_err(|e| Error::io(&boxes_path, e))?;
            Some(parse_annotations(&text)?)
        } else {
            None
        };
        let label_path = video.join("label.txt");
        let label = if label_path.exists() {
            let text = fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;
            Some(text.trim().parse::<usize>().map_err(|e| {
                Error::Validation(format!("{}: {e}", label_path.display()))
            })?)
        } else {
            None
        };
        let native = decode(&frames[0])?.dimensions();
        let native = (native.0 as usize, native.1 as usize);
        for clip_idx in 0..frames.len() / config.frames {
            let start = clip_idx * config.frames;
            let clip = load_from_list(&frames, start, config)?;
            let mask = match &annotations {
                Some(ann) => {
                    let per_frame: Vec<Vec<BoxPx>> = (start..start + config.frames)
                        .map(|f| {
                            ann.get(&f)
                                .map(|list| {
                                    list.iter()
                                        .map(|&b| scale_box(b, native, (config.size, config.size)))
                                        .collect()
                                })
                                .unwrap_or_default()
                        })
                        .collect();
                    Some(rasterize_mask(&per_frame, config.frames, config.size, config.size)?)
                }
                None => None,
            };
            items.push(AnnotatedClip::new(clip, mask, label, id.clone())?);
        }
    }
    InMemoryDataset::new(items, num_classes)
}
