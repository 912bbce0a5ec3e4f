//! Multi-frame feature fusion: per-pixel attention over K source frames,
//! plus the pooling and self-attention variants.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use vidfuse_tape::{Binding, Float, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{ensure_arg, Error, Result};
use crate::nn::{lrelu, Conv2d, ResBlock};
use crate::posekit::{PoseHeatmap, NUM_KEYPOINTS};

/// Token budget per self-attention call; larger grids are pooled first.
pub const MAX_ATTENTION_TOKENS: usize = 1024;
pub const RESIDUAL_BLOCKS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Avg,
    Max,
    Rb6,
    Sa3dRb6,
    Rb6Sa2d,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [Strategy::Avg, Strategy::Max, Strategy::Rb6, Strategy::Sa3dRb6, Strategy::Rb6Sa2d];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Avg => "avg",
            Strategy::Max => "max",
            Strategy::Rb6 => "rb6",
            Strategy::Sa3dRb6 => "sa3d_rb6",
            Strategy::Rb6Sa2d => "rb6_sa2d",
        }
    }

    /// Whether the strategy produces an attention map.
    pub fn has_attention(self) -> bool {
        !matches!(self, Strategy::Avg | Strategy::Max)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?}; expected one of avg, max, rb6, sa3d_rb6, rb6_sa2d")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub channels: usize,
}

impl FusionConfig {
    pub fn new(strategy: Strategy, k: usize, channels: usize) -> Self {
        FusionConfig { strategy, k, channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.channels == 0 {
            return Err(Error::Config(format!("fusion needs K >= 1 and channels >= 1, got K={} C={}", self.k, self.channels)));
        }
        Ok(())
    }
}

/// Per-pixel weights `[K, H, W]`, nonnegative and summing to one over K.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub weights: Tensor<f32>,
}

impl AttentionMap {
    pub const TOLERANCE: f32 = 1e-5;

    pub fn new(weights: Tensor<f32>) -> Result<Self> {
        let map = AttentionMap { weights };
        map.validate()?;
        Ok(map)
    }

    pub fn uniform(k: usize, h: usize, w: usize) -> Self {
        AttentionMap { weights: Tensor::full([k, h, w], 1.0 / k as f32) }
    }

    pub fn k(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Largest `|sum_k A[k, h, w] - 1|`.
    pub fn normalization_error(&self) -> f32 {
        let (k, h, w) = self.weights.dims3();
        let d = self.weights.data();
        (0..h * w).map(|i| ((0..k).map(|j| d[j * h * w + i] as f64).sum::<f64>() - 1.0).abs() as f32).fold(0.0, f32::max)
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.weights.rank() == 3, "attention must be [K, H, W], got {:?}", self.weights.shape());
        ensure_arg!(self.weights.data().iter().all(|&v| v >= 0.0), "attention weights must be nonnegative");
        let err = self.normalization_error();
        ensure_arg!(err <= Self::TOLERANCE, "attention weights do not sum to one (error {err})");
        Ok(())
    }
}

/// `sum_k features[k] * attention[k]`, broadcasting each weight plane over channels.
pub fn combine(features: &[Tensor<f32>], attention: &AttentionMap) -> Result<Tensor<f32>> {
    attention.validate()?;
    ensure_arg!(!features.is_empty(), "combine needs at least one feature map");
    ensure_arg!(features.len() == attention.k(), "{} feature maps but attention over K={}", features.len(), attention.k());
    let shape = features[0].shape().to_vec();
    ensure_arg!(shape.len() == 3, "features must be [C, H, W], got {shape:?}");
    for f in features {
        ensure_arg!(f.shape() == shape.as_slice(), "feature shapes differ: {:?} vs {shape:?}", f.shape());
    }
    ensure_arg!(attention.weights.shape()[1..] == shape[1..], "attention {:?} does not match features {shape:?}", attention.weights.shape());
    let tape = Tape::<f32>::new();
    let feats = tape.constant(Tensor::stack(&features.iter().collect::<Vec<_>>()).unsqueeze0());
    let att = tape.constant(attention.weights.clone().unsqueeze0());
    Ok(combine_var(feats, att).value().index0(0))
}

/// Batched `combine`: `[B, K, C, H, W]` features, `[B, K, H, W]` weights.
pub fn combine_var<'t, T: Float>(features: Var<'t, T>, attention: Var<'t, T>) -> Var<'t, T> {
    let s = features.shape();
    let (b, k, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let weighted = features * attention.reshape([b, k, 1, h, w]);
    weighted.sum_axis(1).reshape([b, c, h, w])
}

/// Pixel-local attention: 1x1 entry, residual blocks, zero-initialized logit head.
#[derive(Clone, Debug, PartialEq)]
pub struct Rb6 {
    pub entry: Conv2d,
    pub blocks: Vec<ResBlock>,
    pub head: Conv2d,
}

impl Rb6 {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, cin: usize, width: usize, k: usize) -> Self {
        let entry = Conv2d::new(store, rng, &format!("{name}.entry"), cin, width, 1, 1);
        let blocks = (0..RESIDUAL_BLOCKS).map(|i| ResBlock::new(store, rng, &format!("{name}.block{i}"), width, width, 1)).collect();
        // zero logits: training starts from the plain average
        let head = Conv2d::zeros(store, &format!("{name}.head"), width, k, 3);
        Rb6 { entry, blocks, head }
    }

    /// `[B, cin, H, W]` to softmax weights `[B, K, H, W]`.
    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = lrelu(self.entry.forward(p, x));
        for b in &self.blocks {
            h = b.forward(p, h);
        }
        self.head.forward(p, h).softmax(1)
    }
}

/// Dot-product self-attention over a token grid with a gated residual.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub gamma: ParamId,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        let qk = (dim / 8).max(1);
        SelfAttention {
            query: Conv2d::new(store, rng, &format!("{name}.query"), dim, qk, 1, 1),
            key: Conv2d::new(store, rng, &format!("{name}.key"), dim, qk, 1, 1),
            value: Conv2d::new(store, rng, &format!("{name}.value"), dim, dim, 1, 1),
            gamma: store.add(format!("{name}.gamma"), Tensor::zeros([1])),
        }
    }

    /// `x + gamma * attend(x)` over grids `[B, D, G, H, W]`, where all
    /// `G x H x W` positions of a grid attend to each other. Grids above the
    /// token budget are pooled for the attention and upsampled back.
    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let s = x.shape();
        let (b, d, g, mut h, mut w) = (s[0], s[1], s[2], s[3], s[4]);
        let mut pooled = 0;
        let mut grid = x.reshape([b, d, g * h, w]);
        while g * h * w > MAX_ATTENTION_TOKENS && h % 2 == 0 && w % 2 == 0 {
            // pool each plane separately so rows of different planes never mix
            grid = grid.reshape([b * d * g, 1, h, w]).avgpool2x();
            h /= 2;
            w /= 2;
            grid = grid.reshape([b, d, g * h, w]);
            pooled += 1;
        }
        let n = g * h * w;
        let q = self.query.forward(p, grid);
        let qk = q.shape()[1];
        let q = q.reshape([b, qk, n]);
        let k = self.key.forward(p, grid).reshape([b, qk, n]);
        let v = self.value.forward(p, grid).reshape([b, d, n]);
        let attn = q.matmul(k, true, false).scale(1.0 / (qk as f64).sqrt()).softmax(2);
        let mut out = v.matmul(attn, false, true);
        for _ in 0..pooled {
            out = out.reshape([b * d * g, 1, h, w]).upsample2x();
            h *= 2;
            w *= 2;
        }
        x + out.reshape([b, d, g, h, w]) * p.var(self.gamma)
    }
}

/// A fusion module with its own parameters, batched over target frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet {
    pub config: FusionConfig,
    pub rb6: Option<Rb6>,
    pub sa3d: Option<SelfAttention>,
    pub sa2d: Option<SelfAttention>,
}

/// Results of a batched fusion forward.
pub struct FusedVars<'t, T: Float> {
    /// `[B, C, H, W]`.
    pub fused: Var<'t, T>,
    /// `[B, K, H, W]` for attention strategies.
    pub attention: Option<Var<'t, T>>,
    /// The combine-step output; differs from `fused` only for `rb6_sa2d`.
    pub combined: Var<'t, T>,
}

impl FusionNet {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let (k, c, m) = (config.k, config.channels, NUM_KEYPOINTS);
        let token = c + 2 * m;
        let rb6_in = match config.strategy {
            Strategy::Sa3dRb6 => k * token,
            _ => k * (c + m) + m,
        };
        let rb6 = config.strategy.has_attention().then(|| Rb6::new(store, rng, &format!("{name}.rb6"), rb6_in, 2 * c, k));
        let sa3d = (config.strategy == Strategy::Sa3dRb6).then(|| SelfAttention::new(store, rng, &format!("{name}.sa3d"), token));
        let sa2d = (config.strategy == Strategy::Rb6Sa2d).then(|| SelfAttention::new(store, rng, &format!("{name}.sa2d"), c));
        Ok(FusionNet { config, rb6, sa3d, sa2d })
    }

    /// `features [B, K, C, H, W]`, `src_heat [B, K, M, H, W]`, `tgt_heat [B, M, H, W]`.
    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, features: Var<'t, T>, src_heat: Var<'t, T>, tgt_heat: Var<'t, T>) -> FusedVars<'t, T> {
        let s = features.shape();
        let (b, k, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let m = NUM_KEYPOINTS;
        assert_eq!(k, self.config.k, "fusion built for K={}", self.config.k);
        assert_eq!(c, self.config.channels, "fusion built for C={}", self.config.channels);
        match self.config.strategy {
            Strategy::Avg => {
                let fused = features.mean_axis(1).reshape([b, c, h, w]);
                FusedVars { fused, attention: None, combined: fused }
            }
            Strategy::Max => {
                let fused = features.max_axis(1).reshape([b, c, h, w]);
                FusedVars { fused, attention: None, combined: fused }
            }
            Strategy::Rb6 | Strategy::Rb6Sa2d => {
                let x = Var::concat(&[features.reshape([b, k * c, h, w]), src_heat.reshape([b, k * m, h, w]), tgt_heat], 1);
                let attention = self.rb6.as_ref().unwrap().forward(p, x);
                let combined = combine_var(features, attention);
                let fused = match &self.sa2d {
                    Some(sa) => sa.forward(p, combined.reshape([b, c, 1, h, w])).reshape([b, c, h, w]),
                    None => combined,
                };
                FusedVars { fused, attention: Some(attention), combined }
            }
            Strategy::Sa3dRb6 => {
                let sa = self.sa3d.as_ref().unwrap();
                let tgt = tgt_heat.reshape([b, 1, m, h, w]);
                let tgt = Var::concat(&vec![tgt; k], 1);
                let tokens = Var::concat(&[features, src_heat, tgt], 2); // [B, K, C+2M, H, W]
                let d = c + 2 * m;
                let refined = sa.forward(p, tokens.permute(&[0, 2, 1, 3, 4])).permute(&[0, 2, 1, 3, 4]);
                let attention = self.rb6.as_ref().unwrap().forward(p, refined.reshape([b, k * d, h, w]));
                let combined = combine_var(refined.narrow(2, 0, c), attention);
                FusedVars { fused: combined, attention: Some(attention), combined }
            }
        }
    }
}

/// Fuse one target frame's K feature maps.
pub fn fuse(
    features: &[Tensor<f32>],
    src_poses: &[PoseHeatmap],
    tgt_pose: &PoseHeatmap,
    net: &FusionNet,
    params: &ParamStore<f32>,
) -> Result<(Tensor<f32>, Option<AttentionMap>)> {
    let k = net.config.k;
    ensure_arg!(features.len() == k, "fusion configured for K={k} but got {} feature maps", features.len());
    ensure_arg!(src_poses.len() == k, "fusion configured for K={k} but got {} source poses", src_poses.len());
    let shape = features[0].shape().to_vec();
    ensure_arg!(shape.len() == 3 && shape[0] == net.config.channels, "features {shape:?} do not have {} channels", net.config.channels);
    let heat_shape = [NUM_KEYPOINTS, shape[1], shape[2]];
    for f in features {
        ensure_arg!(f.shape() == shape.as_slice(), "feature shapes differ: {:?} vs {shape:?}", f.shape());
    }
    for hm in src_poses.iter().chain([tgt_pose]) {
        ensure_arg!(hm.channels.shape() == heat_shape, "pose heatmap {:?}, expected {heat_shape:?}", hm.channels.shape());
    }
    let tape = Tape::new();
    let p = params.bind_const(&tape);
    let feats = tape.constant(Tensor::stack(&features.iter().collect::<Vec<_>>()).unsqueeze0());
    let src = tape.constant(Tensor::stack(&src_poses.iter().map(|x| &x.channels).collect::<Vec<_>>()).unsqueeze0());
    let tgt = tape.constant(tgt_pose.channels.clone().unsqueeze0());
    let out = net.forward(&p, feats, src, tgt);
    let fused = out.fused.value().index0(0);
    let attention = out.attention.map(|a| AttentionMap { weights: a.value().index0(0) });
    Ok((fused, attention))
}
