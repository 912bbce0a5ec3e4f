//! Frame PSNR and a Fréchet video distance over a fixed random 3D-conv feature map.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use vidfuse_tape::Tensor;

use crate::error::{ensure_arg, Error, Result};
use crate::synthvid::{write_rgb_png, VideoClip};
use crate::trainer::TrainedModel;

pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(1 / mse)` on frames remapped from `[-1, 1]` to `[0, 1]`.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    ensure_arg!(a.shape() == b.shape(), "psnr of frames with shapes {:?} and {:?}", a.shape(), b.shape());
    ensure_arg!(a.len() > 0, "psnr of empty frames");
    let se: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (0.5 * (x as f64 - y as f64)).powi(2)).sum();
    let mse = se / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

struct Conv3d {
    cin: usize,
    cout: usize,
    /// `[cout, cin, 3, 3, 3]`.
    weight: Vec<f32>,
    bias: Vec<f32>,
    stride_t: usize,
    stride_s: usize,
}

impl Conv3d {
    fn random(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride_t: usize, stride_s: usize) -> Self {
        let std = (2.0 / (cin * 27) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let weight = (0..cout * cin * 27).map(|_| normal.sample(rng) as f32).collect();
        Conv3d { cin, cout, weight, bias: vec![0.0; cout], stride_t, stride_s }
    }

    /// `x [cin, t, h, w]`, zero padding 1, followed by ReLU.
    fn forward(&self, x: &[f32], dims: (usize, usize, usize)) -> (Vec<f32>, (usize, usize, usize)) {
        let (t, h, w) = dims;
        let out = |n: usize, s: usize| (n + 2 - 3) / s + 1;
        let (to, ho, wo) = (out(t, self.stride_t), out(h, self.stride_s), out(w, self.stride_s));
        let mut y = vec![0.0f32; self.cout * to * ho * wo];
        let plane = t * h * w;
        for co in 0..self.cout {
            for ot in 0..to {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = self.bias[co];
                        for ci in 0..self.cin {
                            let wbase = (co * self.cin + ci) * 27;
                            for dt in 0..3 {
                                let it = (ot * self.stride_t + dt) as isize - 1;
                                if it < 0 || it >= t as isize {
                                    continue;
                                }
                                for dy in 0..3 {
                                    let iy = (oy * self.stride_s + dy) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let row = ci * plane + (it as usize * h + iy as usize) * w;
                                    for dx in 0..3 {
                                        let ix = (ox * self.stride_s + dx) as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += self.weight[wbase + (dt * 3 + dy) * 3 + dx] * x[row + ix as usize];
                                    }
                                }
                            }
                        }
                        y[((co * to + ot) * ho + oy) * wo + ox] = acc.max(0.0);
                    }
                }
            }
        }
        (y, (to, ho, wo))
    }
}

/// Frozen three-layer 3D-conv stack with global average pooling.
pub struct VideoFeatureExtractor {
    pub seed: u64,
    /// Frames taken from the temporal center of every clip.
    pub frames: usize,
    layers: Vec<Conv3d>,
}

impl VideoFeatureExtractor {
    pub const DEFAULT_SEED: u64 = 0x00f1_d5ee;
    pub const DEFAULT_DIM: usize = 64;
    pub const DEFAULT_FRAMES: usize = 8;

    pub fn new(seed: u64, dim: usize, frames: usize) -> Result<Self> {
        if dim == 0 || frames == 0 {
            return Err(Error::Config("video feature dimension and frame count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Conv3d::random(&mut rng, 3, 16, 1, 2),
            Conv3d::random(&mut rng, 16, 32, 2, 2),
            Conv3d::random(&mut rng, 32, dim, 2, 2),
        ];
        Ok(VideoFeatureExtractor { seed, frames, layers })
    }

    pub fn dim(&self) -> usize {
        self.layers.last().unwrap().cout
    }

    /// Feature vector of the centered `frames`-long window of a clip.
    pub fn features(&self, clip: &[Tensor<f32>]) -> Result<Vec<f64>> {
        let t = self.frames;
        ensure_arg!(clip.len() >= t, "video features need at least {t} frames, got {}", clip.len());
        let (c, h, w) = clip[0].dims3();
        ensure_arg!(c == 3, "video frames must have 3 channels, got {c}");
        for f in clip {
            ensure_arg!(f.shape() == [3, h, w], "video frames differ in shape: {:?} vs [3, {h}, {w}]", f.shape());
        }
        let start = (clip.len() - t) / 2;
        let mut x = vec![0.0f32; 3 * t * h * w];
        for (i, f) in clip[start..start + t].iter().enumerate() {
            for ch in 0..3 {
                let dst = (ch * t + i) * h * w;
                x[dst..dst + h * w].copy_from_slice(&f.data()[ch * h * w..(ch + 1) * h * w]);
            }
        }
        let mut dims = (t, h, w);
        for layer in &self.layers {
            (x, dims) = layer.forward(&x, dims);
        }
        let n = dims.0 * dims.1 * dims.2;
        Ok(x.chunks(n).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / n as f64).collect())
    }
}

impl Default for VideoFeatureExtractor {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED, Self::DEFAULT_DIM, Self::DEFAULT_FRAMES).unwrap()
    }
}

/// Gaussian fit of a feature population.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl GaussianStats {
    /// Sample mean and unbiased covariance of at least two vectors.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        ensure_arg!(features.len() >= 2, "covariance needs at least 2 feature vectors, got {}", features.len());
        let d = features[0].len();
        ensure_arg!(features.iter().all(|f| f.len() == d), "feature vectors differ in length");
        let n = features.len() as f64;
        let mut mu = DVector::zeros(d);
        for f in features {
            mu += DVector::from_column_slice(f);
        }
        mu /= n;
        let mut sigma = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mu;
            sigma += &c * c.transpose();
        }
        sigma /= n - 1.0;
        Ok(GaussianStats { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

pub fn video_stats(clips: &[&[Tensor<f32>]], extractor: &VideoFeatureExtractor) -> Result<GaussianStats> {
    ensure_arg!(clips.len() >= 2, "video statistics need at least 2 clips, got {}", clips.len());
    let feats = clips.iter().map(|c| extractor.features(c)).collect::<Result<Vec<_>>>()?;
    GaussianStats::from_features(&feats)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The trace of the
/// product root is taken from the symmetric `S_a^(1/2) S_b S_a^(1/2)`.
pub fn vfid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    ensure_arg!(a.dim() == b.dim(), "feature dimensions differ: {} vs {}", a.dim(), b.dim());
    ensure_arg!(a.sigma.shape() == (a.dim(), a.dim()) && b.sigma.shape() == (b.dim(), b.dim()), "covariance shape does not match the mean");
    let root = psd_sqrt(&a.sigma);
    let inner = &root * &b.sigma * &root;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let dist = (&a.mu - &b.mu).norm_squared() + a.sigma.trace() + b.sigma.trace() - 2.0 * cross;
    Ok(dist.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    SameVideo,
    CrossVideo,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same_video" | "same-video" => Ok(EvalMode::SameVideo),
            "cross_video" | "cross-video" => Ok(EvalMode::CrossVideo),
            _ => Err(Error::Config(format!("unknown evaluation mode `{s}` (same_video or cross_video)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub mode: EvalMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr_per_clip: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vfid: Option<f64>,
    pub extractor_seed: u64,
    pub checkpoint_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// JSON schema of `report.json`.
pub const REPORT_SCHEMA: &str = include_str!("../schema/report.schema.json");

/// Held-out reconstruction quality of a predictor over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SameVideoScores {
    pub psnr_per_clip: Vec<f64>,
    /// Mean over all evaluated frames.
    pub psnr_mean: f64,
    /// Absent with fewer than two clips.
    pub vfid: Option<f64>,
    pub generated: Vec<Vec<Tensor<f32>>>,
}

/// Scores the prediction of every frame in `frames[c]` of clip `c`;
/// `predict(c, t)` returns the generated frame `t` of clip `c`.
pub fn same_video_scores(
    dataset: &[VideoClip],
    frames: &[Vec<usize>],
    extractor: &VideoFeatureExtractor,
    mut predict: impl FnMut(usize, usize) -> Result<Tensor<f32>>,
) -> Result<SameVideoScores> {
    ensure_arg!(frames.len() == dataset.len(), "{} frame lists for {} clips", frames.len(), dataset.len());
    let mut per_clip = Vec::new();
    let mut generated = Vec::new();
    let mut real = Vec::new();
    let (mut sum, mut count) = (0.0, 0usize);
    for (c, (clip, ts)) in dataset.iter().zip(frames).enumerate() {
        if ts.is_empty() {
            continue;
        }
        let mut gen = Vec::with_capacity(ts.len());
        let mut clip_sum = 0.0;
        for &t in ts {
            let g = predict(c, t)?;
            let p = psnr(&g, &clip.frames[t])?;
            clip_sum += p;
            gen.push(g);
        }
        sum += clip_sum;
        count += ts.len();
        per_clip.push(clip_sum / ts.len() as f64);
        real.push(ts.iter().map(|&t| clip.frames[t].clone()).collect::<Vec<_>>());
        generated.push(gen);
    }
    ensure_arg!(count > 0, "no frames to evaluate");
    let vfid = if generated.len() >= 2 && generated.iter().all(|g| g.len() >= extractor.frames) {
        let g: Vec<&[Tensor<f32>]> = generated.iter().map(Vec::as_slice).collect();
        let r: Vec<&[Tensor<f32>]> = real.iter().map(Vec::as_slice).collect();
        Some(vfid(&video_stats(&g, extractor)?, &video_stats(&r, extractor)?)?)
    } else {
        None
    };
    Ok(SameVideoScores { psnr_per_clip: per_clip, psnr_mean: sum / count as f64, vfid, generated })
}

/// Checkpoint under a run directory: `best`, then `latest`, then the baseline.
pub fn find_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    if run_dir.is_file() {
        return Ok(run_dir.to_path_buf());
    }
    for name in ["best.safetensors", "latest.safetensors", "baseline.safetensors"] {
        let p = run_dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Checkpoint { path: run_dir.to_path_buf(), reason: "no trained checkpoint in the run directory".into() })
}

/// Evaluates the checkpoint of `run_dir` and writes `report.json` into `out_dir`.
///
/// Same-video mode scores the held-out tail of every clip against ground
/// truth. Cross-video mode has no pixel ground truth: it drives each clip
/// with the next clip's poses and only dumps the frames.
pub fn evaluate(run_dir: &Path, dataset: &[VideoClip], mode: EvalMode, extractor: &VideoFeatureExtractor, out_dir: &Path) -> Result<Report> {
    let path = find_checkpoint(run_dir)?;
    let model = TrainedModel::load(&path)?;
    let checkpoint_id = model.checkpoint_id.clone();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report = match mode {
        EvalMode::SameVideo => {
            let targets: Vec<Vec<usize>> = dataset.iter().map(|c| model.holdout_frames(c)).collect();
            let sources = dataset.iter().map(|c| model.sources_for(c)).collect::<Result<Vec<_>>>()?;
            let scores = same_video_scores(dataset, &targets, extractor, |c, t| model.predict(&dataset[c], &sources[c], &dataset[c], t))?;
            Report {
                mode,
                psnr_mean: Some(scores.psnr_mean),
                psnr_per_clip: Some(scores.psnr_per_clip),
                note: scores.vfid.is_none().then(|| "vfid needs at least two clips with enough held-out frames".to_string()),
                vfid: scores.vfid,
                extractor_seed: extractor.seed,
                checkpoint_id,
            }
        }
        EvalMode::CrossVideo => {
            ensure_arg!(dataset.len() >= 2, "cross-video evaluation needs at least 2 clips");
            for (c, clip) in dataset.iter().enumerate() {
                let driver = &dataset[(c + 1) % dataset.len()];
                let sources = model.sources_for(clip)?;
                let dir = out_dir.join("cross_video").join(&clip.clip_id);
                for t in 0..driver.len() {
                    let frame = model.predict(clip, &sources, driver, t)?;
                    write_rgb_png(&dir.join(format!("{t:05}.png")), &frame)?;
                }
            }
            Report {
                mode,
                psnr_mean: None,
                psnr_per_clip: None,
                vfid: None,
                extractor_seed: extractor.seed,
                checkpoint_id,
                note: Some("cross-video transfers have no ground truth; frames are written under cross_video/ for inspection".into()),
            }
        }
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let file = out_dir.join("report.json");
    std::fs::write(&file, json).map_err(|e| Error::io(&file, e))?;
    Ok(report)
}
