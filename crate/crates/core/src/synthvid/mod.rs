//! Deterministic articulated-figure videos with exact keypoints, masks and
//! optical flow.

mod figure;
mod io;
mod texture;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidfuse_tape::Tensor;

use crate::error::{Error, Result};
use crate::posekit::Pose;

pub use figure::{JointTrack, MotionProgram, PartGeometry, Rigid, DRAW_ORDER};
pub use io::{export_dataset, load_clip, load_dataset, read_manifest, read_flow, read_mask_png, read_rgb_png, write_flow, write_mask_png, write_rgb_png, Manifest, ManifestEntry};
pub use texture::Texture;

/// Per-part RGB colors in `[0, 1]`, indexed like the body-part layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette(pub [[f32; 3]; 10]);

impl Palette {
    /// Brightest channel of every color is at least this, so a figure drawn on
    /// black is nonzero wherever it has coverage.
    pub const MIN_BRIGHTNESS: f32 = 0.2;

    pub fn random(rng: &mut impl Rng) -> Palette {
        let mut pick = || {
            let mut c = [rng.random_range(0.05f32..1.0), rng.random_range(0.05f32..1.0), rng.random_range(0.05f32..1.0)];
            let m = c.iter().copied().fold(0.0, f32::max);
            if m < 0.45 {
                let scale = 0.45 / m;
                c.iter_mut().for_each(|v| *v = (*v * scale).min(1.0));
            }
            c
        };
        let (skin, shirt, sleeve, pants) = (pick(), pick(), pick(), pick());
        Palette([skin, shirt, shirt, sleeve, shirt, sleeve, pants, pants, pants, pants])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub palette: Palette,
    pub background: Texture,
    pub motion: MotionProgram,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if h < 32 || w < 32 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!("resolution {h}x{w} must be at least 32x32 and divisible by 4")));
        }
        if self.num_frames == 0 {
            return Err(Error::Config("num_frames must be positive".into()));
        }
        for (i, c) in self.palette.0.iter().enumerate() {
            let ok = c.iter().all(|v| (0.0..=1.0).contains(v)) && c.iter().copied().fold(0.0, f32::max) >= Palette::MIN_BRIGHTNESS;
            if !ok {
                return Err(Error::Config(format!("palette color {i} {c:?} must lie in [0,1] and not be black")));
            }
        }
        self.background.validate()?;
        self.motion.validate()
    }

    /// A randomized walking figure that stays inside the frame for
    /// `num_frames` frames.
    pub fn random(seed: u64, num_frames: usize, height: usize, width: usize) -> Result<SceneSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let palette = Palette::random(&mut rng);
        let background = Texture::random(&mut rng);
        for attempt in 0..64 {
            // later attempts slow the walk down until it fits
            let speed = 1.0 / (1.0 + attempt as f64 * 0.25);
            let motion = MotionProgram::random(&mut rng, num_frames, height, width, speed);
            let spec = SceneSpec {
                seed,
                num_frames,
                height,
                width,
                palette: palette.clone(),
                background: background.clone(),
                motion,
            };
            spec.validate()?;
            if spec.first_off_frame().is_none() {
                return Ok(spec);
            }
        }
        Err(Error::Generation { frame: 0, reason: "could not sample an in-frame motion program".into() })
    }

    /// Same figure and motion over a different background.
    pub fn with_background(&self, background: Texture) -> SceneSpec {
        SceneSpec { background, ..self.clone() }
    }

    fn scale(&self) -> f64 {
        self.height.min(self.width) as f64 / 64.0
    }

    pub fn geometry(&self, t: usize) -> [PartGeometry; 10] {
        self.motion.geometry(t as f64, self.scale())
    }

    pub fn pose_at(&self, t: usize) -> Pose {
        self.motion.pose(t as f64, self.scale())
    }

    fn first_off_frame(&self) -> Option<(usize, String)> {
        (0..self.num_frames).find_map(|t| {
            figure::off_frame(&self.geometry(t), self.height, self.width).map(|why| (t, why))
        })
    }

    /// Figure composited over black with `[0, 1]` colors, `[3, H, W]`.
    pub fn render_figure_only(&self, t: usize) -> Tensor<f32> {
        let raster = rasterize(&self.geometry(t), self.height, self.width);
        let (h, w) = (self.height, self.width);
        let mut out = vec![0f32; 3 * h * w];
        for i in 0..h * w {
            let mut c = [0f32; 3];
            for (slot, &p) in DRAW_ORDER.iter().enumerate() {
                let a = raster.alpha[slot][i];
                if a > 0.0 {
                    for ch in 0..3 {
                        c[ch] = c[ch] * (1.0 - a) + self.palette.0[p][ch] * a;
                    }
                }
            }
            for ch in 0..3 {
                out[ch * h * w + i] = c[ch];
            }
        }
        Tensor::new([3, h, w], out)
    }

    /// The static background in `[-1, 1]`, quantized like the frames.
    pub fn render_background(&self) -> Tensor<f32> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let c = self.background.sample(x as f64, y as f64, h, w);
                for ch in 0..3 {
                    out[(ch * h + y) * w + x] = quantize(c[ch]);
                }
            }
        }
        Tensor::new([3, h, w], out)
    }
}

/// Maps `[0, 1]` to the nearest 8-bit level expressed in `[-1, 1]`.
fn quantize(v: f32) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 255.0).round();
    q / 127.5 - 1.0
}

/// Per-pixel `(dx, dy)` displacement from frame t to frame t+1, `[2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub displacement: Tensor<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { displacement: Tensor::zeros([2, h, w]) }
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.displacement.dims3();
        (h, w)
    }

    pub fn is_zero(&self) -> bool {
        self.displacement.data().iter().all(|&v| v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub clip_id: String,
    /// `[3, H, W]` in `[-1, 1]`.
    pub frames: Vec<Tensor<f32>>,
    pub poses: Vec<Pose>,
    /// `[1, H, W]` in `{0, 1}`.
    pub gt_masks: Option<Vec<Tensor<f32>>>,
    pub gt_flows: Option<Vec<FlowField>>,
    /// `[1, H, W]` in `{0, 1}`: pixels of frame t whose flow target is
    /// unoccluded and uniformly colored in frame t+1.
    pub flow_valid: Option<Vec<Tensor<f32>>>,
    /// Figure-free background, `[3, H, W]`.
    pub background: Option<Tensor<f32>>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.frames[0].dims3();
        (h, w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(format!("clip {}: {msg}", self.clip_id)));
        if self.frames.is_empty() {
            return bad("no frames".into());
        }
        let (h, w) = self.dims();
        for (t, f) in self.frames.iter().enumerate() {
            if f.shape() != [3, h, w] {
                return bad(format!("frame {t} has shape {:?}", f.shape()));
            }
            if !f.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
                return bad(format!("frame {t} has values outside [-1, 1]"));
            }
        }
        if self.poses.len() != self.frames.len() {
            return bad(format!("{} poses for {} frames", self.poses.len(), self.frames.len()));
        }
        if let Some(m) = &self.gt_masks {
            if m.len() != self.frames.len() || m.iter().any(|m| m.shape() != [1, h, w]) {
                return bad("mask count or shape mismatch".into());
            }
        }
        if let Some(f) = &self.gt_flows {
            let diag = ((h * h + w * w) as f32).sqrt();
            if f.len() + 1 != self.frames.len() {
                return bad(format!("{} flows for {} frames", f.len(), self.frames.len()));
            }
            for (t, fl) in f.iter().enumerate() {
                if fl.displacement.shape() != [2, h, w] || !fl.displacement.data().iter().all(|v| v.is_finite() && v.abs() <= diag) {
                    return bad(format!("flow {t} has bad shape or values"));
                }
            }
        }
        Ok(())
    }

    /// Clip restricted to frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> VideoClip {
        let end = start + len;
        VideoClip {
            clip_id: self.clip_id.clone(),
            frames: self.frames[start..end].to_vec(),
            poses: self.poses[start..end].to_vec(),
            gt_masks: self.gt_masks.as_ref().map(|m| m[start..end].to_vec()),
            gt_flows: self.gt_flows.as_ref().map(|f| f[start..end.saturating_sub(1).max(start)].to_vec()),
            flow_valid: self.flow_valid.as_ref().map(|f| f[start..end.saturating_sub(1).max(start)].to_vec()),
            background: self.background.clone(),
        }
    }
}

struct Raster {
    /// Coverage per draw slot.
    alpha: Vec<Vec<f32>>,
}

impl Raster {
    /// Topmost covering draw slot and whether it fully covers the pixel.
    fn top(&self, i: usize) -> Option<(usize, bool)> {
        (0..self.alpha.len()).rev().find(|&s| self.alpha[s][i] > 0.0).map(|s| (s, self.alpha[s][i] >= 1.0))
    }
}

fn rasterize(geom: &[PartGeometry; 10], h: usize, w: usize) -> Raster {
    let alpha = DRAW_ORDER
        .iter()
        .map(|&p| {
            let g = &geom[p];
            let (x0, x1, y0, y1) = g.bounds(h, w);
            let mut plane = vec![0f32; h * w];
            for y in y0..y1 {
                for x in x0..x1 {
                    plane[y * w + x] = g.coverage(x as f64, y as f64) as f32;
                }
            }
            plane
        })
        .collect();
    Raster { alpha }
}

/// Renders a clip from its scene description.
pub fn generate_clip(spec: &SceneSpec) -> Result<VideoClip> {
    spec.validate()?;
    if let Some((frame, reason)) = spec.first_off_frame() {
        return Err(Error::Generation { frame, reason });
    }
    let (h, w, n) = (spec.height, spec.width, spec.num_frames);
    let background = spec.render_background();
    let bg01: Vec<[f32; 3]> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            spec.background.sample(x as f64, y as f64, h, w)
        })
        .collect();

    let geoms: Vec<_> = (0..n).map(|t| spec.geometry(t)).collect();
    let rasters: Vec<_> = geoms.iter().map(|g| rasterize(g, h, w)).collect();

    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for r in &rasters {
        let mut frame = vec![0f32; 3 * h * w];
        let mut mask = vec![0f32; h * w];
        for i in 0..h * w {
            let mut c = bg01[i];
            for (slot, &p) in DRAW_ORDER.iter().enumerate() {
                let a = r.alpha[slot][i];
                if a > 0.0 {
                    mask[i] = 1.0;
                    for ch in 0..3 {
                        c[ch] = c[ch] * (1.0 - a) + spec.palette.0[p][ch] * a;
                    }
                }
            }
            for ch in 0..3 {
                frame[ch * h * w + i] = quantize(c[ch]);
            }
        }
        frames.push(Tensor::new([3, h, w], frame));
        masks.push(Tensor::new([1, h, w], mask));
    }

    let mut flows = Vec::with_capacity(n.saturating_sub(1));
    let mut valid = Vec::with_capacity(n.saturating_sub(1));
    for t in 0..n.saturating_sub(1) {
        let (now, next) = (&rasters[t], &rasters[t + 1]);
        let mut flow = vec![0f32; 2 * h * w];
        let mut ok = vec![0f32; h * w];
        for i in 0..h * w {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            match now.top(i) {
                None => {
                    if next.top(i).is_none() {
                        ok[i] = 1.0;
                    }
                }
                Some((slot, full)) => {
                    let part = DRAW_ORDER[slot];
                    let a = geoms[t][part].frame;
                    let b = geoms[t + 1][part].frame;
                    let (lx, ly) = a.to_local(x, y);
                    let (nx, ny) = b.to_world(lx, ly);
                    // difference of two placements so identical frames give exact zeros
                    let (px, py) = a.to_world(lx, ly);
                    flow[i] = (nx - px) as f32;
                    flow[h * w + i] = (ny - py) as f32;
                    if full && fully_owned(next, slot, nx, ny, h, w) {
                        ok[i] = 1.0;
                    }
                }
            }
        }
        flows.push(FlowField { displacement: Tensor::new([2, h, w], flow) });
        valid.push(Tensor::new([1, h, w], ok));
    }

    Ok(VideoClip {
        clip_id: format!("clip_{:016x}", spec.seed),
        frames,
        poses: (0..n).map(|t| spec.pose_at(t)).collect(),
        gt_masks: Some(masks),
        gt_flows: Some(flows),
        flow_valid: Some(valid),
        background: Some(background),
    })
}

/// All four bilinear neighbours of `(x, y)` are inside the frame and fully
/// covered by draw slot `slot` as the topmost layer.
fn fully_owned(r: &Raster, slot: usize, x: f64, y: f64, h: usize, w: usize) -> bool {
    let (x0, y0) = (x.floor(), y.floor());
    if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 >= w as f64 || y0 + 1.0 >= h as f64 {
        return false;
    }
    let (x0, y0) = (x0 as usize, y0 as usize);
    [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)]
        .iter()
        .all(|&(cx, cy)| r.top(cy * w + cx) == Some((slot, true)))
}

/// `count` random clips with seeds fanned out from `seed`.
pub fn generate_dataset(seed: u64, count: usize, num_frames: usize, height: usize, width: usize) -> Result<Vec<VideoClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let spec = SceneSpec::random(rng.random(), num_frames, height, width)?;
            let mut clip = generate_clip(&spec)?;
            clip.clip_id = format!("clip_{i:03}");
            Ok(clip)
        })
        .collect()
}
