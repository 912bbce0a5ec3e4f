use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vidfuse_tape::Tensor;

use super::{FlowField, VideoClip};
use crate::error::{Error, Result};
use crate::posekit::{Keypoint, Pose, NUM_KEYPOINTS};

const FLOW_MAGIC: &[u8; 4] = b"SFLO";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub has_masks: bool,
    pub has_flows: bool,
    pub has_background: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub clips: Vec<ManifestEntry>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Writes a `[3, H, W]` tensor in `[-1, 1]` as 8-bit RGB.
pub fn write_rgb_png(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    let (c, h, w) = frame.dims3();
    if c != 3 {
        return Err(Error::Argument(format!("expected 3 channels, got {c}")));
    }
    let d = frame.data();
    let mut bytes = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        for ch in 0..3 {
            bytes.push(to_u8(d[ch * h * w + i]));
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

/// Writes a `[1, H, W]` tensor in `[0, 1]` as 8-bit grayscale.
pub fn write_mask_png(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let (_, h, w) = mask.dims3();
    let bytes: Vec<u8> = mask.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png(path, w, h, png::ColorType::Grayscale, &bytes)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Decodes to `(height, width, channels, bytes)` with 8-bit samples.
fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.height as usize, info.width as usize, channels, buf))
}

pub fn read_rgb_png(path: &Path) -> Result<Tensor<f32>> {
    let (h, w, c, buf) = read_png(path)?;
    if c < 3 {
        return Err(Error::format(path, format!("expected an RGB image, found {c} channels")));
    }
    let mut data = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = buf[i * c + ch] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::new([3, h, w], data))
}

pub fn read_mask_png(path: &Path) -> Result<Tensor<f32>> {
    let (h, w, c, buf) = read_png(path)?;
    let data = (0..h * w).map(|i| buf[i * c] as f32 / 255.0).collect();
    Ok(Tensor::new([1, h, w], data))
}

/// `SFLO`, width and height as little-endian u32, then row-major
/// interleaved `(dx, dy)` float32 pairs.
pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    let (h, w) = flow.dims();
    let d = flow.displacement.data();
    let mut bytes = Vec::with_capacity(12 + 8 * h * w);
    bytes.extend_from_slice(FLOW_MAGIC);
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    for i in 0..h * w {
        bytes.extend_from_slice(&d[i].to_le_bytes());
        bytes.extend_from_slice(&d[h * w + i].to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(Error::format(path, "missing SFLO header"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(4), word(8));
    if bytes.len() != 12 + 8 * h * w {
        return Err(Error::format(path, format!("expected {} payload bytes for {w}x{h}", 8 * h * w)));
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let mut data = vec![0f32; 2 * h * w];
    for i in 0..h * w {
        data[i] = f(12 + 8 * i);
        data[h * w + i] = f(16 + 8 * i);
    }
    Ok(FlowField { displacement: Tensor::new([2, h, w], data) })
}

fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let rows: Vec<Vec<[f64; 3]>> = poses
        .iter()
        .map(|p| p.keypoints.iter().map(|k| [k.x as f64, k.y as f64, if k.visible { 1.0 } else { 0.0 }]).collect())
        .collect();
    let text = serde_json::to_string(&rows).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<Vec<[f64; 3]>> = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    rows.into_iter()
        .enumerate()
        .map(|(t, row)| {
            if row.len() != NUM_KEYPOINTS {
                return Err(Error::format(path, format!("frame {t} has {} keypoints, expected {NUM_KEYPOINTS}", row.len())));
            }
            let mut k = [Keypoint::hidden(); NUM_KEYPOINTS];
            for (slot, [x, y, v]) in k.iter_mut().zip(row) {
                *slot = Keypoint { x: x as f32, y: y as f32, visible: v != 0.0 };
            }
            Ok(Pose::new(k))
        })
        .collect()
}

fn frame_name(t: usize, ext: &str) -> String {
    format!("{t:05}.{ext}")
}

fn write_clip(dir: &Path, clip: &VideoClip) -> Result<ManifestEntry> {
    clip.validate()?;
    let (h, w) = clip.dims();
    let frames = dir.join("frames");
    create_dir(&frames)?;
    for (t, f) in clip.frames.iter().enumerate() {
        write_rgb_png(&frames.join(frame_name(t, "png")), f)?;
    }
    write_poses(&dir.join("poses.json"), &clip.poses)?;
    if let Some(masks) = &clip.gt_masks {
        let d = dir.join("masks");
        create_dir(&d)?;
        for (t, m) in masks.iter().enumerate() {
            write_mask_png(&d.join(frame_name(t, "png")), m)?;
        }
    }
    if let Some(flows) = &clip.gt_flows {
        let d = dir.join("flows");
        create_dir(&d)?;
        for (t, f) in flows.iter().enumerate() {
            write_flow(&d.join(frame_name(t, "flo")), f)?;
        }
    }
    if let Some(bg) = &clip.background {
        write_rgb_png(&dir.join("background.png"), bg)?;
    }
    Ok(ManifestEntry {
        clip_id: clip.clip_id.clone(),
        num_frames: clip.len(),
        height: h,
        width: w,
        has_masks: clip.gt_masks.is_some(),
        has_flows: clip.gt_flows.is_some(),
        has_background: clip.background.is_some(),
    })
}

/// Writes clips under `root` and returns the manifest, which is saved last.
pub fn export_dataset(clips: &[VideoClip], root: &Path) -> Result<Manifest> {
    create_dir(root)?;
    let mut entries = Vec::with_capacity(clips.len());
    for clip in clips {
        if entries.iter().any(|e: &ManifestEntry| e.clip_id == clip.clip_id) {
            return Err(Error::Argument(format!("duplicate clip id {}", clip.clip_id)));
        }
        entries.push(write_clip(&root.join(&clip.clip_id), clip)?);
    }
    let manifest = Manifest { version: MANIFEST_VERSION, clips: entries };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

pub fn load_clip(root: &Path, entry: &ManifestEntry) -> Result<VideoClip> {
    let dir: PathBuf = root.join(&entry.clip_id);
    let n = entry.num_frames;
    let frames = (0..n).map(|t| read_rgb_png(&dir.join("frames").join(frame_name(t, "png")))).collect::<Result<Vec<_>>>()?;
    let poses = read_poses(&dir.join("poses.json"))?;
    let gt_masks = if entry.has_masks {
        Some((0..n).map(|t| read_mask_png(&dir.join("masks").join(frame_name(t, "png")))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let gt_flows = if entry.has_flows {
        Some((0..n.saturating_sub(1)).map(|t| read_flow(&dir.join("flows").join(frame_name(t, "flo")))).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let background = if entry.has_background { Some(read_rgb_png(&dir.join("background.png"))?) } else { None };
    let clip = VideoClip { clip_id: entry.clip_id.clone(), frames, poses, gt_masks, gt_flows, flow_valid: None, background };
    clip.validate().map_err(|e| Error::format(&dir, e.to_string()))?;
    if clip.dims() != (entry.height, entry.width) {
        return Err(Error::format(&dir, "frame size disagrees with manifest"));
    }
    Ok(clip)
}

pub fn load_dataset(root: &Path) -> Result<Vec<VideoClip>> {
    let manifest = read_manifest(root)?;
    manifest.clips.iter().map(|e| load_clip(root, e)).collect()
}
