//! Single-frame two-branch pose-transfer network. Its final-layer inputs
//! serve as per-source-frame features for multi-frame fusion.

use std::any::Any;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidfuse_tape::{BilinearTaps, Binding, Float, ParamStore, Tape, Tensor, Var};

use crate::error::{ensure_arg, Error, Result};
use crate::nn::{lrelu, Conv2d, UNet};
use crate::posekit::{self, Affine, BodyPartLayout, Pose, NUM_KEYPOINTS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Feature width `C` of both branches.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Down/up-sampling stages per branch.
    pub levels: usize,
    pub heatmap_sigma: f32,
    /// Falloff of the soft part masks, in pixels.
    pub mask_radius: f32,
    /// Dilation of the source-figure hole given to the background branch.
    pub hole_margin: f32,
}

impl BaselineConfig {
    /// Defaults for a resolution, with pixel sizes tied to a 64x64 frame.
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        let s = height.min(width) as f32 / 64.0;
        BaselineConfig {
            channels,
            height,
            width,
            levels: 3,
            heatmap_sigma: posekit::DEFAULT_SIGMA * s,
            mask_radius: 4.0 * s,
            hole_margin: 7.0 * s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let step = 1usize << self.levels;
        if self.channels == 0 || self.levels == 0 {
            return Err(Error::Config("baseline channels and levels must be positive".into()));
        }
        if self.height % step != 0 || self.width % step != 0 || self.height < step || self.width < step {
            return Err(Error::Config(format!(
                "resolution {}x{} must be divisible by {step} for {} levels",
                self.height, self.width, self.levels
            )));
        }
        if !(self.heatmap_sigma > 0.0 && self.mask_radius > 0.0 && self.hole_margin >= 0.0) {
            return Err(Error::Config("baseline pixel radii must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the network needs from one (source pose, target pose) pair.
#[derive(Clone, Debug)]
pub struct PoseContext {
    pub src_heat: Tensor<f32>,
    pub tgt_heat: Tensor<f32>,
    /// Soft source-side part masks `[parts, H, W]`.
    pub part_masks: Tensor<f32>,
    pub affines: Vec<Affine>,
    /// Sampling taps of `affines`, one plane per part.
    pub taps: Arc<BilinearTaps<f32>>,
    /// Part masks moved into the target pose.
    pub warped_masks: Tensor<f32>,
    /// Binary dilated source-figure region `[1, H, W]`.
    pub hole: Tensor<f32>,
}

impl PoseContext {
    pub fn new(src: &Pose, tgt: &Pose, config: &BaselineConfig, layout: &BodyPartLayout) -> Result<Self> {
        let (h, w) = (config.height, config.width);
        src.validate(h, w)?;
        tgt.validate(h, w)?;
        let src_heat = posekit::render_heatmap(src, h, w, config.heatmap_sigma)?.channels;
        let tgt_heat = posekit::render_heatmap(tgt, h, w, config.heatmap_sigma)?.channels;
        let part_masks = posekit::part_masks(src, layout, h, w, config.mask_radius);
        let affines = layout
            .parts
            .iter()
            .map(|p| match posekit::estimate_part_affine(src, tgt, &p.name, layout) {
                Ok(a) => a.matrix,
                // a part without enough keypoints has an all-zero mask anyway
                Err(Error::DegeneratePart { .. }) => Affine::IDENTITY,
                Err(e) => panic!("unexpected affine failure: {e}"),
            })
            .collect::<Vec<_>>();
        let taps = Arc::new(posekit::affine_taps::<f32>(&affines, h, w));
        let warped_masks = taps.apply(&part_masks.clone().reshape([layout.len(), 1, h, w])).reshape([layout.len(), h, w]);
        let hole = posekit::figure_region(src, layout, h, w, config.hole_margin);
        Ok(PoseContext { src_heat, tgt_heat, part_masks, affines, taps, warped_masks, hole })
    }
}

/// Batched part-warp taps; reuses the cached single-precision taps.
fn batch_taps<T: Float>(ctx: &[&PoseContext], h: usize, w: usize) -> Arc<BilinearTaps<T>> {
    let cached: Option<Vec<&BilinearTaps<T>>> = ctx.iter().map(|c| (c.taps.as_ref() as &dyn Any).downcast_ref()).collect();
    match cached {
        Some(parts) if parts.len() == 1 => ctx[0].taps.clone() as Arc<dyn Any + Send + Sync>,
        Some(parts) => Arc::new(BilinearTaps::concat(&parts)) as Arc<dyn Any + Send + Sync>,
        None => {
            let affines: Vec<Affine> = ctx.iter().flat_map(|x| x.affines.iter().copied()).collect();
            Arc::new(posekit::affine_taps::<T>(&affines, h, w)) as Arc<dyn Any + Send + Sync>
        }
    }
    .downcast()
    .expect("tap precision")
}

fn stack_const<'t, T: Float>(tape: &'t Tape<T>, parts: Vec<&Tensor<f32>>) -> Var<'t, T> {
    tape.constant(Tensor::stack(&parts).cast())
}

/// Per-source-frame branch activations feeding the prediction heads.
#[derive(Clone, Debug, PartialEq)]
pub struct PreliminaryFeatures {
    pub fg: Tensor<f32>,
    pub bg: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutput {
    pub frame: Tensor<f32>,
    pub fg: Tensor<f32>,
    pub bg: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub features: PreliminaryFeatures,
}

/// Batched forward results, all `[N, ., H, W]`.
pub struct BaselineVars<'t, T: Float> {
    pub frame: Var<'t, T>,
    pub fg: Var<'t, T>,
    pub bg: Var<'t, T>,
    pub mask: Var<'t, T>,
    pub feat_fg: Var<'t, T>,
    pub feat_bg: Var<'t, T>,
}

pub struct Baseline {
    pub config: BaselineConfig,
    pub layout: BodyPartLayout,
    pub params: ParamStore<f32>,
    fg_encoder: [Conv2d; 2],
    fg_unet: UNet,
    fg_head: Conv2d,
    bg_unet: UNet,
    bg_head: Conv2d,
}

/// `[N, 4, H, W]` head output to `(fg, mask)`.
pub fn split_fg_head<'t, T: Float>(raw: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
    let t = raw.tanh();
    let fg = t.narrow(1, 0, 3);
    let mask = t.narrow(1, 3, 1).add_scalar(1.0).scale(0.5);
    (fg, mask)
}

/// `O = fg * m + bg * (1 - m)`, broadcasting the mask over channels.
pub fn compose<'t, T: Float>(fg: Var<'t, T>, bg: Var<'t, T>, mask: Var<'t, T>) -> Var<'t, T> {
    fg * mask + bg * mask.one_minus()
}

impl Baseline {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = BodyPartLayout::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.channels;
        let parts = layout.len();
        let fg_encoder = [
            Conv2d::new(&mut params, &mut rng, "fg.enc0", 3 + NUM_KEYPOINTS, c, 3, 1),
            Conv2d::new(&mut params, &mut rng, "fg.enc1", c, c, 3, 1),
        ];
        let fg_unet = UNet::new(&mut params, &mut rng, "fg.unet", c + parts + NUM_KEYPOINTS, c, config.levels);
        let fg_head = Conv2d::scaled(&mut params, &mut rng, "fg.head", c, 4, 3, 0.5);
        let bg_unet = UNet::new(&mut params, &mut rng, "bg.unet", 3 + 1 + 2 * NUM_KEYPOINTS, c, config.levels);
        let bg_head = Conv2d::scaled(&mut params, &mut rng, "bg.head", c, 3, 3, 0.5);
        Ok(Baseline { config, layout, params, fg_encoder, fg_unet, fg_head, bg_unet, bg_head })
    }

    /// Make the parameters read-only for the rest of the run.
    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn context(&self, src: &Pose, tgt: &Pose) -> Result<PoseContext> {
        PoseContext::new(src, tgt, &self.config, &self.layout)
    }

    pub fn fg_head(&self) -> &Conv2d {
        &self.fg_head
    }

    pub fn bg_head(&self) -> &Conv2d {
        &self.bg_head
    }

    /// Foreground branch: `(features, raw 4-channel head output)`.
    pub fn fg_branch<'t, T: Float>(&self, p: &Binding<'t, '_, T>, frames: Var<'t, T>, ctx: &[&PoseContext]) -> (Var<'t, T>, Var<'t, T>) {
        let tape = p.tape();
        let (n, c, h, w) = (ctx.len(), self.config.channels, self.config.height, self.config.width);
        let parts = self.layout.len();
        let src_heat = stack_const(tape, ctx.iter().map(|x| &x.src_heat).collect());
        let x = Var::concat(&[frames, src_heat], 1);
        let f = lrelu(self.fg_encoder[1].forward(p, lrelu(self.fg_encoder[0].forward(p, x))));

        let masks = stack_const(tape, ctx.iter().map(|x| &x.part_masks).collect()).reshape([n, parts, 1, h, w]);
        let masked = (f.reshape([n, 1, c, h, w]) * masks).reshape([n * parts, c, h, w]);
        let moved = masked.sample(batch_taps(ctx, h, w)).reshape([n, parts, c, h, w]).sum_axis(1).reshape([n, c, h, w]);

        let warped_masks = stack_const(tape, ctx.iter().map(|x| &x.warped_masks).collect());
        let tgt_heat = stack_const(tape, ctx.iter().map(|x| &x.tgt_heat).collect());
        let feat = self.fg_unet.forward(p, Var::concat(&[moved, warped_masks, tgt_heat], 1));
        let raw = self.fg_head.forward(p, feat);
        (feat, raw)
    }

    /// Background branch: `(features, raw 3-channel head output)`.
    pub fn bg_branch<'t, T: Float>(&self, p: &Binding<'t, '_, T>, frames: Var<'t, T>, ctx: &[&PoseContext]) -> (Var<'t, T>, Var<'t, T>) {
        let tape = p.tape();
        let hole = stack_const(tape, ctx.iter().map(|x| &x.hole).collect());
        let src_heat = stack_const(tape, ctx.iter().map(|x| &x.src_heat).collect());
        let tgt_heat = stack_const(tape, ctx.iter().map(|x| &x.tgt_heat).collect());
        let x = Var::concat(&[frames * hole.one_minus(), hole, src_heat, tgt_heat], 1);
        let feat = self.bg_unet.forward(p, x);
        let raw = self.bg_head.forward(p, feat);
        (feat, raw)
    }

    /// Batched forward over `N` source frames `[N, 3, H, W]`.
    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, frames: Var<'t, T>, ctx: &[&PoseContext]) -> BaselineVars<'t, T> {
        let (feat_fg, raw_fg) = self.fg_branch(p, frames, ctx);
        let (feat_bg, raw_bg) = self.bg_branch(p, frames, ctx);
        let (fg, mask) = split_fg_head(raw_fg);
        let bg = raw_bg.tanh();
        BaselineVars { frame: compose(fg, bg, mask), fg, bg, mask, feat_fg, feat_bg }
    }

    fn check_inputs(&self, frames: &[&Tensor<f32>]) -> Result<()> {
        let want = [3, self.config.height, self.config.width];
        for f in frames {
            ensure_arg!(f.shape() == want, "source frame shape {:?}, expected {:?}", f.shape(), want);
            if !f.all_finite() {
                return Err(Error::NonFinite { what: "source frame".into() });
            }
        }
        if self.params.iter().any(|(_, _, v)| !v.all_finite()) {
            return Err(Error::NonFinite { what: "baseline parameters".into() });
        }
        Ok(())
    }

    /// Inference for one source frame.
    pub fn run(&self, src_frame: &Tensor<f32>, src_pose: &Pose, tgt_pose: &Pose) -> Result<BaselineOutput> {
        self.check_inputs(&[src_frame])?;
        let ctx = self.context(src_pose, tgt_pose)?;
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let out = self.forward(&p, tape.constant(src_frame.clone().unsqueeze0()), &[&ctx]);
        let take = |v: Var<'_, f32>| v.value().index0(0);
        Ok(BaselineOutput {
            frame: take(out.frame),
            fg: take(out.fg),
            bg: take(out.bg),
            mask: take(out.mask),
            features: PreliminaryFeatures { fg: take(out.feat_fg), bg: take(out.feat_bg) },
        })
    }
}

/// Per-source features for one target pose. The baseline is only read.
pub fn extract_preliminary(baseline: &Baseline, src_frames: &[Tensor<f32>], src_poses: &[Pose], tgt_pose: &Pose) -> Result<Vec<PreliminaryFeatures>> {
    let fg = extract_branch(baseline, src_frames, src_poses, tgt_pose, Branch::Foreground)?;
    let bg = extract_branch(baseline, src_frames, src_poses, tgt_pose, Branch::Background)?;
    Ok(fg.into_iter().zip(bg).map(|(fg, bg)| PreliminaryFeatures { fg, bg }).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Foreground,
    Background,
}

/// Features of a single branch, `[C, H, W]` per source frame.
pub fn extract_branch(baseline: &Baseline, src_frames: &[Tensor<f32>], src_poses: &[Pose], tgt_pose: &Pose, branch: Branch) -> Result<Vec<Tensor<f32>>> {
    ensure_arg!(!src_frames.is_empty(), "at least one source frame is required");
    ensure_arg!(
        src_frames.len() == src_poses.len(),
        "{} source frames but {} source poses",
        src_frames.len(),
        src_poses.len()
    );
    baseline.check_inputs(&src_frames.iter().collect::<Vec<_>>())?;
    let ctx = src_poses.iter().map(|s| baseline.context(s, tgt_pose)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PoseContext> = ctx.iter().collect();
    let tape = Tape::new();
    let p = baseline.params.bind_const(&tape);
    let frames = tape.constant(Tensor::stack(&src_frames.iter().collect::<Vec<_>>()));
    let feat = match branch {
        Branch::Foreground => baseline.fg_branch(&p, frames, &refs).0,
        Branch::Background => baseline.bg_branch(&p, frames, &refs).0,
    };
    let v = feat.value();
    Ok((0..src_frames.len()).map(|k| v.index0(k)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthvid::{generate_clip, SceneSpec};
    use vidfuse_tape::gradcheck::{central_difference_at, relative_error};

    fn clip(h: usize, seed: u64) -> crate::synthvid::VideoClip {
        generate_clip(&SceneSpec::random(seed, 6, h, h).unwrap()).unwrap()
    }

    #[test]
    fn untrained_outputs_in_range() {
        let c = clip(64, 1);
        let net = Baseline::new(BaselineConfig::new(8, 64, 64), 3).unwrap();
        let out = net.run(&c.frames[0], &c.poses[0], &c.poses[3]).unwrap();
        assert!(out.frame.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(out.mask.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.features.fg.shape(), &[8, 64, 64]);
        assert_eq!(out.features.bg.shape(), &[8, 64, 64]);
        assert!(out.features.fg.all_finite() && out.features.bg.all_finite());
    }

    #[test]
    fn rejects_bad_shapes_and_parameters() {
        let c = clip(64, 2);
        let mut net = Baseline::new(BaselineConfig::new(4, 32, 32), 0).unwrap();
        assert!(matches!(net.run(&c.frames[0], &c.poses[0], &c.poses[1]), Err(Error::Argument(_))));
        let small = clip(32, 2);
        let id = net.params.find("bg.head.bias").unwrap();
        net.params.set(id, Tensor::full([3], f32::NAN));
        assert!(matches!(net.run(&small.frames[0], &small.poses[0], &small.poses[1]), Err(Error::NonFinite { .. })));
        assert!(matches!(Baseline::new(BaselineConfig::new(4, 36, 36), 0), Err(Error::Config(_))));
    }

    #[test]
    fn extract_matches_forward_and_is_per_frame() {
        let c = clip(32, 4);
        let net = Baseline::new(BaselineConfig::new(4, 32, 32), 5).unwrap();
        let single = extract_preliminary(&net, &c.frames[..1], &c.poses[..1], &c.poses[5]).unwrap();
        let direct = net.run(&c.frames[0], &c.poses[0], &c.poses[5]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0], direct.features);

        let four = extract_preliminary(&net, &c.frames[..4], &c.poses[..4], &c.poses[5]).unwrap();
        assert_eq!(four.len(), 4);
        let perm = [2usize, 0, 3, 1];
        let frames: Vec<_> = perm.iter().map(|&i| c.frames[i].clone()).collect();
        let poses: Vec<_> = perm.iter().map(|&i| c.poses[i]).collect();
        let permuted = extract_preliminary(&net, &frames, &poses, &c.poses[5]).unwrap();
        for (slot, &i) in perm.iter().enumerate() {
            assert!(permuted[slot].fg.max_abs_diff(&four[i].fg) < 1e-5);
            assert!(permuted[slot].bg.max_abs_diff(&four[i].bg) < 1e-5);
        }
    }

    #[test]
    fn frame_gradient_matches_finite_differences() {
        // 16x16 figures are below the generator's minimum size; scale a 32x32 pose down.
        let c = clip(32, 6);
        let half = |p: &Pose| {
            let mut q = *p;
            for k in q.keypoints.iter_mut() {
                k.x *= 0.5;
                k.y *= 0.5;
            }
            q
        };
        let (src, tgt) = (half(&c.poses[0]), half(&c.poses[3]));
        let net = Baseline::new(BaselineConfig::new(3, 16, 16), 7).unwrap();
        let params = net.params.cast::<f64>();
        let ctx = net.context(&src, &tgt).unwrap();
        let frame: Vec<f64> = (0..3 * 256).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 0.9).collect();
        let weights: Vec<f64> = (0..3 * 256).map(|i| ((i * 13 % 17) as f64 - 8.0) / 8.0).collect();
        let loss = |x: &[f64]| {
            let tape = Tape::new();
            let p = params.bind_const(&tape);
            let fr = tape.variable(Tensor::new([1, 3, 16, 16], x.to_vec()));
            let out = net.forward(&p, fr, &[&ctx]).frame;
            let l = (out * tape.constant(Tensor::new([1, 3, 16, 16], weights.clone()))).sum();
            let g = tape.backward(l);
            (l.item(), g.get(fr).unwrap().data().to_vec())
        };
        let (_, analytic) = loss(&frame);
        let coords: Vec<usize> = (0..3 * 256).step_by(7).collect();
        let numeric = central_difference_at(|x| loss(x).0, &frame, &coords, 1e-5);
        let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
        let err = relative_error(&picked, &numeric);
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn frozen_baseline_binds_constants() {
        let mut net = Baseline::new(BaselineConfig::new(2, 32, 32), 0).unwrap();
        net.freeze();
        let tape = Tape::<f32>::new();
        let p = net.params.bind(&tape);
        assert!(!p.is_trainable());
    }
}
