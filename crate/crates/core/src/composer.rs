//! The full generator: frozen baseline features, fusion per branch,
//! prediction heads and composition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidfuse_tape::{Binding, Float, ParamStore, Tape, Tensor, Var};

use crate::basenet::{self, Baseline, Branch};
use crate::error::{ensure_arg, Error, Result};
use crate::fusion::{AttentionMap, FusionConfig, FusionNet, Strategy};
use crate::nn::{copy_prefixed, Conv2d};
use crate::posekit::{self, Pose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub strategy: Strategy,
    pub k: usize,
}

/// Baseline features and pose heatmaps feeding one branch of one target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchInputs {
    /// `[K, C, H, W]`.
    pub features: Tensor<f32>,
    /// `[K, M, H, W]`.
    pub src_heat: Tensor<f32>,
}

/// Everything downstream of the frozen baseline for one target frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInputs {
    pub fg: BranchInputs,
    pub bg: BranchInputs,
    /// `[M, H, W]`.
    pub tgt_heat: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeOutput {
    pub fg: Tensor<f32>,
    pub bg: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub frame: Tensor<f32>,
    pub fg_attention: Option<AttentionMap>,
    pub bg_attention: Option<AttentionMap>,
}

/// Batched generator results, `[B, ., H, W]`.
pub struct GeneratorVars<'t, T: Float> {
    pub frame: Var<'t, T>,
    pub fg: Var<'t, T>,
    pub bg: Var<'t, T>,
    pub mask: Var<'t, T>,
    pub fg_attention: Option<Var<'t, T>>,
    pub bg_attention: Option<Var<'t, T>>,
}

/// Trainable part of the generator; the baseline stays frozen beside it.
pub struct Generator {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    pub fg_fusion: FusionNet,
    pub bg_fusion: FusionNet,
    pub fg_head: Conv2d,
    pub bg_head: Conv2d,
}

pub struct MotionTransferModel {
    pub baseline: Baseline,
    pub generator: Generator,
}

impl Generator {
    /// New fusion modules; heads start as copies of the baseline heads.
    pub fn new(baseline: &Baseline, config: ModelConfig, seed: u64) -> Result<Self> {
        let c = baseline.config.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let fg_fusion = FusionNet::new(&mut params, &mut rng, "fusion.fg", FusionConfig::new(config.strategy, config.k, c))?;
        let bg_fusion = FusionNet::new(&mut params, &mut rng, "fusion.bg", FusionConfig::new(config.strategy, config.k, c))?;
        let fg_head = Conv2d::zeros(&mut params, "head.fg", c, 4, 3);
        let bg_head = Conv2d::zeros(&mut params, "head.bg", c, 3, 3);
        copy_prefixed(&baseline.params, "fg.head.", &mut params, "head.fg.");
        copy_prefixed(&baseline.params, "bg.head.", &mut params, "head.bg.");
        Ok(Generator { config, params, fg_fusion, bg_fusion, fg_head, bg_head })
    }

    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, inputs: &[&FrameInputs]) -> GeneratorVars<'t, T> {
        let tape = p.tape();
        let stack = |pick: &dyn Fn(&FrameInputs) -> &Tensor<f32>| {
            tape.constant(Tensor::stack(&inputs.iter().map(|x| pick(x)).collect::<Vec<_>>()).cast::<T>())
        };
        let tgt = stack(&|x| &x.tgt_heat);
        let fg = self.fg_fusion.forward(p, stack(&|x| &x.fg.features), stack(&|x| &x.fg.src_heat), tgt);
        let bg = self.bg_fusion.forward(p, stack(&|x| &x.bg.features), stack(&|x| &x.bg.src_heat), tgt);
        self.heads(p, fg.fused, bg.fused, fg.attention, bg.attention)
    }

    pub fn heads<'t, T: Float>(
        &self,
        p: &Binding<'t, '_, T>,
        fused_fg: Var<'t, T>,
        fused_bg: Var<'t, T>,
        fg_attention: Option<Var<'t, T>>,
        bg_attention: Option<Var<'t, T>>,
    ) -> GeneratorVars<'t, T> {
        let (fg, mask) = basenet::split_fg_head(self.fg_head.forward(p, fused_fg));
        let bg = self.bg_head.forward(p, fused_bg).tanh();
        GeneratorVars { frame: basenet::compose(fg, bg, mask), fg, bg, mask, fg_attention, bg_attention }
    }

    /// Foreground head on a fused `[C, H, W]` map: `(fg [3,H,W], mask [1,H,W])`.
    pub fn predict_foreground(&self, fused_fg: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_fused(fused_fg)?;
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let (fg, mask) = basenet::split_fg_head(self.fg_head.forward(&p, tape.constant(fused_fg.clone().unsqueeze0())));
        Ok((fg.value().index0(0), mask.value().index0(0)))
    }

    /// Background head on a fused `[C, H, W]` map.
    pub fn predict_background(&self, fused_bg: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_fused(fused_bg)?;
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        Ok(self.bg_head.forward(&p, tape.constant(fused_bg.clone().unsqueeze0())).tanh().value().index0(0))
    }

    fn check_fused(&self, x: &Tensor<f32>) -> Result<()> {
        let c = self.fg_fusion.config.channels;
        ensure_arg!(x.rank() == 3 && x.shape()[0] == c, "fused features {:?}, expected [{c}, H, W]", x.shape());
        if !x.all_finite() {
            return Err(Error::NonFinite { what: "fused features".into() });
        }
        Ok(())
    }

    /// Inference on prepared inputs for one target frame.
    pub fn run(&self, inputs: &FrameInputs) -> Result<CompositeOutput> {
        let k = self.config.k;
        for b in [&inputs.fg, &inputs.bg] {
            ensure_arg!(b.features.shape()[0] == k, "model expects K={k} source frames, got {}", b.features.shape()[0]);
        }
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let out = self.forward(&p, &[inputs]);
        let take = |v: Var<'_, f32>| v.value().index0(0);
        let att = |v: Option<Var<'_, f32>>| v.map(|a| AttentionMap { weights: take(a) });
        Ok(CompositeOutput {
            fg: take(out.fg),
            bg: take(out.bg),
            mask: take(out.mask),
            frame: take(out.frame),
            fg_attention: att(out.fg_attention),
            bg_attention: att(out.bg_attention),
        })
    }
}

/// `fg * mask + bg * (1 - mask)`, the mask broadcast over color channels.
pub fn composite(fg: &Tensor<f32>, bg: &Tensor<f32>, mask: &Tensor<f32>) -> Result<Tensor<f32>> {
    ensure_arg!(fg.shape() == bg.shape(), "fg {:?} and bg {:?} differ in shape", fg.shape(), bg.shape());
    ensure_arg!(
        fg.rank() == 3 && mask.rank() == 3 && mask.shape()[0] == 1 && mask.shape()[1..] == fg.shape()[1..],
        "mask {:?} does not match frame {:?}",
        mask.shape(),
        fg.shape()
    );
    ensure_arg!(mask.data().iter().all(|m| (0.0..=1.0).contains(m)), "mask values must lie in [0, 1]");
    let tape = Tape::<f32>::new();
    Ok(basenet::compose(tape.constant(fg.clone()), tape.constant(bg.clone()), tape.constant(mask.clone())).value().as_ref().clone())
}

/// Baseline features of one branch for `K` source frames.
pub fn branch_inputs(baseline: &Baseline, frames: &[Tensor<f32>], poses: &[Pose], tgt_pose: &Pose, branch: Branch) -> Result<BranchInputs> {
    let feats = basenet::extract_branch(baseline, frames, poses, tgt_pose, branch)?;
    let (h, w, sigma) = (baseline.config.height, baseline.config.width, baseline.config.heatmap_sigma);
    let heats = poses.iter().map(|p| Ok(posekit::render_heatmap(p, h, w, sigma)?.channels)).collect::<Result<Vec<_>>>()?;
    Ok(BranchInputs {
        features: Tensor::stack(&feats.iter().collect::<Vec<_>>()),
        src_heat: Tensor::stack(&heats.iter().collect::<Vec<_>>()),
    })
}

impl MotionTransferModel {
    pub fn new(baseline: Baseline, config: ModelConfig, seed: u64) -> Result<Self> {
        let generator = Generator::new(&baseline, config, seed)?;
        Ok(MotionTransferModel { baseline, generator })
    }

    fn tgt_heat(&self, tgt_pose: &Pose) -> Result<Tensor<f32>> {
        let c = &self.baseline.config;
        Ok(posekit::render_heatmap(tgt_pose, c.height, c.width, c.heatmap_sigma)?.channels)
    }

    /// Foreground and background both driven by the source frames.
    pub fn frame_inputs(&self, src_frames: &[Tensor<f32>], src_poses: &[Pose], tgt_pose: &Pose) -> Result<FrameInputs> {
        self.substitution_inputs(src_frames, src_poses, tgt_pose, src_frames, src_poses)
    }

    /// Foreground from the source frames, background from another video.
    pub fn substitution_inputs(
        &self,
        src_frames: &[Tensor<f32>],
        src_poses: &[Pose],
        tgt_pose: &Pose,
        bg_frames: &[Tensor<f32>],
        bg_poses: &[Pose],
    ) -> Result<FrameInputs> {
        let k = self.generator.config.k;
        ensure_arg!(src_frames.len() == k, "model expects K={k} source frames, got {}", src_frames.len());
        ensure_arg!(bg_frames.len() == k, "model expects K={k} background frames, got {}", bg_frames.len());
        Ok(FrameInputs {
            fg: branch_inputs(&self.baseline, src_frames, src_poses, tgt_pose, Branch::Foreground)?,
            bg: branch_inputs(&self.baseline, bg_frames, bg_poses, tgt_pose, Branch::Background)?,
            tgt_heat: self.tgt_heat(tgt_pose)?,
        })
    }

    pub fn transfer_frame(&self, src_frames: &[Tensor<f32>], src_poses: &[Pose], tgt_pose: &Pose) -> Result<CompositeOutput> {
        self.generator.run(&self.frame_inputs(src_frames, src_poses, tgt_pose)?)
    }

    pub fn substitute_background(
        &self,
        src_frames: &[Tensor<f32>],
        src_poses: &[Pose],
        tgt_pose: &Pose,
        bg_frames: &[Tensor<f32>],
        bg_poses: &[Pose],
    ) -> Result<CompositeOutput> {
        self.generator.run(&self.substitution_inputs(src_frames, src_poses, tgt_pose, bg_frames, bg_poses)?)
    }

    /// Heads applied to the unfused features of a single source frame.
    pub fn single_source(&self, src_frame: &Tensor<f32>, src_pose: &Pose, tgt_pose: &Pose) -> Result<CompositeOutput> {
        let feats = basenet::extract_preliminary(&self.baseline, std::slice::from_ref(src_frame), std::slice::from_ref(src_pose), tgt_pose)?;
        let (fg, mask) = self.generator.predict_foreground(&feats[0].fg)?;
        let bg = self.generator.predict_background(&feats[0].bg)?;
        let frame = composite(&fg, &bg, &mask)?;
        Ok(CompositeOutput { fg, bg, mask, frame, fg_attention: None, bg_attention: None })
    }
}
