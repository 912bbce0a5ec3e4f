//! Patch discriminators: one spatial, conditioned on the target pose, and
//! one temporal per window length, conditioned on optical flow.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidfuse_tape::{Binding, Float, ParamStore, Tape, Tensor, Var};

use crate::error::{ensure_arg, Error, Result};
use crate::nn::{Conv2d, ResBlock};
use crate::posekit::{PoseHeatmap, NUM_KEYPOINTS};
use crate::synthvid::{read_flow, FlowField, VideoClip};

/// Default temporal window lengths.
pub const DEFAULT_RANGES: [usize; 3] = [3, 5, 7];
/// Total spatial reduction of the trunk.
pub const PATCH_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscConfig {
    /// Widths of the three block pairs; every pair ends with a stride-2 block.
    pub widths: [usize; 3],
    pub temporal_ranges: Vec<usize>,
}

impl Default for DiscConfig {
    fn default() -> Self {
        DiscConfig { widths: [32, 64, 128], temporal_ranges: DEFAULT_RANGES.to_vec() }
    }
}

impl DiscConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        let mut seen = self.temporal_ranges.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.temporal_ranges.len() || seen.iter().any(|&n| n < 2) {
            return Err(Error::Config(format!("temporal ranges must be distinct and at least 2, got {:?}", self.temporal_ranges)));
        }
        Ok(())
    }
}

/// Real/fake scores on the receptive-field grid, `[1, H/8, W/8]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchScoreMap {
    pub scores: Tensor<f32>,
}

/// Six residual blocks, stride 2 at blocks 2, 4 and 6, then a 1x1 score head.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTrunk {
    pub in_channels: usize,
    pub blocks: Vec<ResBlock>,
    pub head: Conv2d,
}

impl PatchTrunk {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, cin: usize, widths: [usize; 3]) -> Self {
        let mut blocks = Vec::with_capacity(6);
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(ResBlock::new(store, rng, &format!("block{}", 2 * i), c, w, 1));
            blocks.push(ResBlock::new(store, rng, &format!("block{}", 2 * i + 1), w, w, 2));
            c = w;
        }
        let head = Conv2d::new(store, rng, "head", c, 1, 1, 1);
        PatchTrunk { in_channels: cin, blocks, head }
    }

    /// `[B, cin, H, W]` to raw scores `[B, 1, H/8, W/8]`.
    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(p, h);
        }
        self.head.forward(p, h)
    }
}

fn check_resolution(h: usize, w: usize) -> Result<()> {
    ensure_arg!(
        h % PATCH_STRIDE == 0 && w % PATCH_STRIDE == 0 && h > 0 && w > 0,
        "discriminator input {h}x{w} must be a positive multiple of {PATCH_STRIDE}"
    );
    Ok(())
}

/// Frame plus target pose heatmap.
pub struct SpatialDisc {
    pub params: ParamStore<f32>,
    pub trunk: PatchTrunk,
}

impl SpatialDisc {
    pub const IN_CHANNELS: usize = 3 + NUM_KEYPOINTS;

    pub fn new(config: &DiscConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = PatchTrunk::new(&mut params, &mut rng, Self::IN_CHANNELS, config.widths);
        Ok(SpatialDisc { params, trunk })
    }

    /// `frames [B, 3, H, W]`, `pose [B, M, H, W]`.
    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, frames: Var<'t, T>, pose: Var<'t, T>) -> Var<'t, T> {
        self.trunk.forward(p, Var::concat(&[frames, pose], 1))
    }

    pub fn score(&self, frame: &Tensor<f32>, pose: &PoseHeatmap) -> Result<PatchScoreMap> {
        let (c, h, w) = frame.dims3();
        ensure_arg!(c == 3, "frame must have 3 channels, got {c}");
        ensure_arg!(pose.channels.shape() == [NUM_KEYPOINTS, h, w], "pose heatmap {:?} does not match frame {h}x{w}", pose.channels.shape());
        check_resolution(h, w)?;
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let s = self.forward(&p, tape.constant(frame.clone().unsqueeze0()), tape.constant(pose.channels.clone().unsqueeze0()));
        Ok(PatchScoreMap { scores: s.value().index0(0) })
    }
}

/// `n` consecutive frames and the `n - 1` flows between them.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalWindow {
    pub frames: Vec<Tensor<f32>>,
    pub flows: Vec<FlowField>,
    pub range_n: usize,
}

impl TemporalWindow {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.frames.len() == self.range_n, "window of range {} holds {} frames", self.range_n, self.frames.len());
        ensure_arg!(self.flows.len() + 1 == self.range_n, "window of range {} holds {} flows", self.range_n, self.flows.len());
        Ok(())
    }
}

/// Input channels of a window of length `n`.
pub fn temporal_channels(n: usize) -> usize {
    3 * n + 2 * (n - 1)
}

/// Flows as `[2, H, W]` in normalized units: `dx * 2/W`, `dy * 2/H`.
pub fn normalized_flow(flow: &FlowField) -> Tensor<f32> {
    let (h, w) = flow.dims();
    let (sx, sy) = (2.0 / w as f32, 2.0 / h as f32);
    let plane = h * w;
    Tensor::from_fn([2, h, w], |i| flow.displacement.data()[i] * if i < plane { sx } else { sy })
}

/// Every window `[t - n + 1, t]` for `t` in `n-1..L`, as start indices; empty when `n > L`.
pub fn enumerate_windows(clip_len: usize, n: usize) -> Vec<std::ops::Range<usize>> {
    if n == 0 || n > clip_len {
        return Vec::new();
    }
    (n - 1..clip_len).map(|t| t + 1 - n..t + 1).collect()
}

/// Flow channels for every window of length `n` over a clip, `[windows, 2(n-1), H, W]`.
pub fn window_flows(flows: &[FlowField], n: usize) -> Tensor<f32> {
    let normalized: Vec<Tensor<f32>> = flows.iter().map(normalized_flow).collect();
    let per: Vec<Tensor<f32>> = enumerate_windows(flows.len() + 1, n)
        .into_iter()
        .map(|r| Tensor::concat(&normalized[r.start..r.end - 1].iter().collect::<Vec<_>>(), 0))
        .collect();
    Tensor::stack(&per.iter().collect::<Vec<_>>())
}

/// Packs `[L, 3, H, W]` frames into `[windows, 3n, H, W]` window stacks.
pub fn window_frames<'t, T: Float>(frames: Var<'t, T>, n: usize) -> Var<'t, T> {
    let s = frames.shape();
    let (l, h, w) = (s[0], s[2], s[3]);
    let windows: Vec<Var<'t, T>> = enumerate_windows(l, n).into_iter().map(|r| frames.narrow(0, r.start, n).reshape([1, 3 * n, h, w])).collect();
    Var::concat(&windows, 0)
}

pub struct TemporalDisc {
    pub range_n: usize,
    pub params: ParamStore<f32>,
    pub trunk: PatchTrunk,
}

impl TemporalDisc {
    pub fn new(range_n: usize, widths: [usize; 3], seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = PatchTrunk::new(&mut params, &mut rng, temporal_channels(range_n), widths);
        TemporalDisc { range_n, params, trunk }
    }

    /// `frames [B, 3n, H, W]`, `flows [B, 2(n-1), H, W]`.
    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, frames: Var<'t, T>, flows: Var<'t, T>) -> Var<'t, T> {
        self.trunk.forward(p, Var::concat(&[frames, flows], 1))
    }

    pub fn score(&self, window: &TemporalWindow) -> Result<PatchScoreMap> {
        window.validate()?;
        if window.range_n != self.range_n {
            return Err(Error::Config(format!("window of range {} given to the range-{} discriminator", window.range_n, self.range_n)));
        }
        let (_, h, w) = window.frames[0].dims3();
        check_resolution(h, w)?;
        for f in &window.frames {
            ensure_arg!(f.shape() == [3, h, w], "window frame {:?}, expected [3, {h}, {w}]", f.shape());
        }
        for f in &window.flows {
            ensure_arg!(f.dims() == (h, w), "window flow {:?} does not match {h}x{w}", f.dims());
        }
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let frames = Tensor::concat(&window.frames.iter().collect::<Vec<_>>(), 0).reshape([1, 3 * self.range_n, h, w]);
        let flows = window_flows(&window.flows, self.range_n);
        let s = self.forward(&p, tape.constant(frames), tape.constant(flows));
        Ok(PatchScoreMap { scores: s.value().index0(0) })
    }
}

/// One temporal discriminator per configured range, each with its own parameters.
pub struct TemporalDiscs {
    pub discs: Vec<TemporalDisc>,
}

impl TemporalDiscs {
    pub fn new(config: &DiscConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let discs = config
            .temporal_ranges
            .iter()
            .enumerate()
            .map(|(i, &n)| TemporalDisc::new(n, config.widths, seed.wrapping_add(1 + i as u64)))
            .collect();
        Ok(TemporalDiscs { discs })
    }

    pub fn get(&self, n: usize) -> Result<&TemporalDisc> {
        self.discs
            .iter()
            .find(|d| d.range_n == n)
            .ok_or_else(|| Error::Config(format!("no temporal discriminator configured for range {n}")))
    }

    pub fn ranges(&self) -> Vec<usize> {
        self.discs.iter().map(|d| d.range_n).collect()
    }
}

pub type FlowEstimator = Arc<dyn Fn(&VideoClip) -> Result<Vec<FlowField>> + Send + Sync>;

/// Source of the target-video flows conditioning the temporal discriminators.
#[derive(Clone)]
pub enum FlowProvider {
    GroundTruth,
    /// Directory holding `00000.flo`, `00001.flo`, ... for the clip.
    File(PathBuf),
    Estimator(FlowEstimator),
}

impl fmt::Debug for FlowProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FlowProvider::GroundTruth => f.write_str("GroundTruth"),
            FlowProvider::File(p) => f.debug_tuple("File").field(p).finish(),
            FlowProvider::Estimator(_) => f.write_str("Estimator(..)"),
        }
    }
}

/// The `L - 1` flows of a clip.
pub fn flows_for(clip: &VideoClip, provider: &FlowProvider) -> Result<Vec<FlowField>> {
    let flows = match provider {
        FlowProvider::GroundTruth => clip.gt_flows.clone().ok_or_else(|| Error::MissingAnnotation(format!("clip {} has no ground-truth flows", clip.clip_id)))?,
        FlowProvider::File(dir) => (0..clip.len().saturating_sub(1)).map(|t| read_flow(&dir.join(format!("{t:05}.flo")))).collect::<Result<_>>()?,
        FlowProvider::Estimator(f) => f(clip)?,
    };
    ensure_arg!(flows.len() + 1 == clip.len(), "{} flows for a clip of {} frames", flows.len(), clip.len());
    Ok(flows)
}
