//! Baseline pretraining and alternating adversarial training of the full model.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidfuse_tape::{Adam, AdamConfig, Binding, ParamStore, Tape, Tensor, Var};

use crate::adversaries::{flows_for, DiscConfig, FlowProvider, SpatialDisc, TemporalDiscs};
use crate::basenet::{Baseline, BaselineConfig, PoseContext};
use crate::checkpoint::{self, Checkpoint};
use crate::composer::{FrameInputs, ModelConfig, MotionTransferModel};
use crate::error::{ensure_arg, Error, Result};
use crate::fusion::Strategy;
use crate::metrics::{self, VideoFeatureExtractor};
use crate::objectives::{self, LossWeights, PerceptualExtractor, WindowFlows};
use crate::synthvid::{FlowField, VideoClip};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Source frames per target frame.
    pub k: usize,
    /// Consecutive target frames per burst.
    pub l: usize,
    /// Bursts per full-model iteration.
    pub batch: usize,
    /// (source, target) pairs per pretraining iteration.
    pub pretrain_batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    /// Hundreds of thousands at full resolution.
    pub iters_pretrain: usize,
    /// Tens of thousands at full resolution.
    pub iters_full: usize,
    pub temporal_ranges: Vec<usize>,
    pub disc_widths: [usize; 3],
    pub weights: LossWeights,
    pub height: usize,
    pub width: usize,
    /// Baseline feature width `C`.
    pub channels: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub validate_every: usize,
    /// Trailing frames of every clip kept out of training for validation.
    pub holdout: usize,
    /// Verify parameter hashes around every update.
    pub check_alternation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            l: 8,
            batch: 2,
            pretrain_batch: 2,
            lr: 1e-4,
            betas: (0.5, 0.999),
            iters_pretrain: 2000,
            iters_full: 1000,
            temporal_ranges: crate::adversaries::DEFAULT_RANGES.to_vec(),
            disc_widths: [32, 64, 128],
            weights: LossWeights::default(),
            height: 64,
            width: 64,
            channels: 16,
            strategy: Strategy::Rb6Sa2d,
            seed: 0,
            checkpoint_every: 100,
            validate_every: 100,
            holdout: 8,
            check_alternation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 || self.l == 0 || self.batch == 0 || self.pretrain_batch == 0 {
            return bad("k, l, batch and pretrain_batch must be positive".into());
        }
        if let Some(&n) = self.temporal_ranges.iter().max() {
            if n > self.l {
                return bad(format!("burst length L={} is shorter than temporal range {n}", self.l));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("Adam betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.checkpoint_every == 0 || self.validate_every == 0 {
            return bad("checkpoint_every and validate_every must be positive".into());
        }
        self.weights.validate()?;
        self.disc_config().validate()?;
        self.baseline_config().validate()
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        BaselineConfig::new(self.channels, self.height, self.width)
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig { widths: self.disc_widths, temporal_ranges: self.temporal_ranges.clone() }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig { strategy: self.strategy, k: self.k }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.betas.0, beta2: self.betas.1, ..AdamConfig::default() }
    }

    /// Seed of one subsystem, fanned out from the root seed.
    pub fn sub_seed(&self, tag: &str) -> u64 {
        fnv1a(self.seed.to_le_bytes().iter().chain(tag.as_bytes()))
    }

    /// Frames of a clip available to training.
    pub fn train_len(&self, clip: &VideoClip) -> usize {
        clip.len().saturating_sub(self.holdout)
    }

    /// The held-out tail of a clip.
    pub fn holdout_frames(&self, clip: &VideoClip) -> Vec<usize> {
        (self.train_len(clip)..clip.len()).collect()
    }
}

fn fnv1a<'a>(bytes: impl IntoIterator<Item = &'a u8>) -> u64 {
    bytes.into_iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws the fixed source frames of a clip with `train_len` usable frames.
/// A target window position is drawn first so at least one disjoint window
/// always remains.
pub fn draw_sources(config: &TrainConfig, clip_id: &str, train_len: usize) -> Option<Vec<usize>> {
    let (k, l) = (config.k, config.l);
    if train_len < k + l {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(config.sub_seed("sources").to_le_bytes().iter().chain(clip_id.as_bytes())));
    let start = rng.random_range(0..=train_len - l);
    let free: Vec<usize> = (0..train_len).filter(|t| !(start..start + l).contains(t)).collect();
    let mut picked: Vec<usize> = index::sample(&mut rng, free.len(), k).into_iter().map(|i| free[i]).collect();
    picked.sort_unstable();
    Some(picked)
}

/// Window starts of length `l` inside `train_len` frames that avoid `sources`.
pub fn disjoint_starts(train_len: usize, l: usize, sources: &[usize]) -> Vec<usize> {
    if train_len < l {
        return Vec::new();
    }
    (0..=train_len - l).filter(|&s| sources.iter().all(|&t| t < s || t >= s + l)).collect()
}

/// A clip's fixed sources and the target windows compatible with them.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipPlan {
    pub clip: usize,
    pub sources: Vec<usize>,
    pub starts: Vec<usize>,
}

/// One burst: `K` source indices and `L` consecutive target indices of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleItem {
    pub clip: usize,
    pub sources: Vec<usize>,
    pub target_start: usize,
    pub len: usize,
}

impl SampleItem {
    pub fn targets(&self) -> std::ops::Range<usize> {
        self.target_start..self.target_start + self.len
    }

    /// The `L - 1` flows between consecutive targets.
    pub fn flows<'a>(&self, flows: &'a [FlowField]) -> &'a [FlowField] {
        &flows[self.target_start..self.target_start + self.len - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub items: Vec<SampleItem>,
}

/// Batch sampler with per-clip source sets fixed for the whole run.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pub plans: Vec<ClipPlan>,
    batch: usize,
    l: usize,
}

impl BatchSampler {
    /// Clips too short for `K + L` training frames are skipped with a warning.
    pub fn new(dataset: &[VideoClip], config: &TrainConfig) -> Result<Self> {
        let mut plans = Vec::new();
        for (c, clip) in dataset.iter().enumerate() {
            let n = config.train_len(clip);
            match draw_sources(config, &clip.clip_id, n) {
                Some(sources) => {
                    let starts = disjoint_starts(n, config.l, &sources);
                    plans.push(ClipPlan { clip: c, sources, starts });
                }
                None => log::warn!(
                    "skipping clip {}: {n} training frames, need K + L = {}",
                    clip.clip_id,
                    config.k + config.l
                ),
            }
        }
        if plans.is_empty() {
            return Err(Error::Argument(format!("no clip has the K + L = {} training frames a burst needs", config.k + config.l)));
        }
        Ok(BatchSampler { plans, batch: config.batch, l: config.l })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> SampleBatch {
        let items = (0..self.batch)
            .map(|_| {
                let plan = &self.plans[rng.random_range(0..self.plans.len())];
                let start = plan.starts[rng.random_range(0..plan.starts.len())];
                SampleItem { clip: plan.clip, sources: plan.sources.clone(), target_start: start, len: self.l }
            })
            .collect();
        SampleBatch { items }
    }

    pub fn sources(&self, clip: usize) -> Option<&[usize]> {
        self.plans.iter().find(|p| p.clip == clip).map(|p| p.sources.as_slice())
    }
}

pub const LOG_COLUMNS: [&str; 8] = ["iter", "l_mse", "l_vgg", "l_gi_d", "l_gi_g", "l_gv_d", "l_gv_g", "total"];

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iter: usize,
    pub l_mse: f64,
    pub l_vgg: f64,
    pub l_gi_d: f64,
    pub l_gi_g: f64,
    pub l_gv_d: f64,
    pub l_gv_g: f64,
    pub total: f64,
}

impl LossRow {
    pub fn values(&self) -> [f64; 7] {
        [self.l_mse, self.l_vgg, self.l_gi_d, self.l_gi_g, self.l_gv_d, self.l_gv_g, self.total]
    }

    fn csv(&self) -> String {
        let mut s = self.iter.to_string();
        for v in self.values() {
            write!(s, ",{v}").unwrap();
        }
        s
    }

    fn parse(line: &str) -> Option<LossRow> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != LOG_COLUMNS.len() {
            return None;
        }
        let v: Vec<f64> = f[1..].iter().map(|x| x.parse().ok()).collect::<Option<_>>()?;
        Some(LossRow { iter: f[0].parse().ok()?, l_mse: v[0], l_vgg: v[1], l_gi_d: v[2], l_gi_g: v[3], l_gv_d: v[4], l_gv_g: v[5], total: v[6] })
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_COLUMNS.join(",").as_str()) {
        return Err(Error::format(path, "unexpected loss log header"));
    }
    lines.map(|l| LossRow::parse(l).ok_or_else(|| Error::format(path, format!("bad loss log row `{l}`")))).collect()
}

fn write_loss_log(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut s = LOG_COLUMNS.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub iter: usize,
    pub psnr: f64,
    pub vfid: Option<f64>,
}

fn write_validation_log(path: &Path, rows: &[ValidationRow]) -> Result<()> {
    let mut s = String::from("iter,psnr,vfid\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.iter, r.psnr, r.vfid.map_or(String::new(), |v| v.to_string())).unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Run-level knobs that are not part of the model configuration.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub flows: FlowProvider,
    /// Weights of the perceptual feature stack; pinned random weights otherwise.
    pub perceptual: Option<PathBuf>,
    pub extractor_seed: u64,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        TrainOptions {
            out_dir: out_dir.into(),
            resume: None,
            flows: FlowProvider::GroundTruth,
            perceptual: None,
            extractor_seed: VideoFeatureExtractor::DEFAULT_SEED,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Final checkpoint.
    pub latest: PathBuf,
    /// Best validation snapshot; equals `latest` for pretraining.
    pub best: PathBuf,
    pub log: Vec<LossRow>,
    pub validation: Vec<ValidationRow>,
}

pub const BASELINE_FILE: &str = "baseline.safetensors";
pub const LATEST_FILE: &str = "latest.safetensors";
pub const BEST_FILE: &str = "best.safetensors";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const VALIDATION_LOG: &str = "validation.csv";

fn divergence(iteration: usize, what: &str, last_good: &Path) -> Error {
    let last = if last_good.is_file() { last_good.display().to_string() } else { "none".to_string() };
    Error::Divergence { iteration, loss: what.to_string(), last_good: last }
}

fn finite(v: f64, iteration: usize, what: &str, last_good: &Path) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(divergence(iteration, what, last_good))
    }
}

fn optimizer_stores(opt: &Adam<f32>, like: &ParamStore<f32>) -> (ParamStore<f32>, ParamStore<f32>) {
    let (_, m, v) = opt.state();
    let (mut ms, mut vs) = (ParamStore::new(), ParamStore::new());
    for (((_, name, _), m), v) in like.iter().zip(m).zip(v) {
        ms.add(name, m.clone());
        vs.add(name, v.clone());
    }
    (ms, vs)
}

fn restore_optimizer(ck: &Checkpoint, name: &str, like: &ParamStore<f32>, opt: &mut Adam<f32>) -> Result<()> {
    let steps: u64 = ck.meta(&format!("opt.{name}.steps"))?.parse().map_err(|_| Error::Checkpoint { path: ck.path.clone(), reason: format!("bad step count for {name}") })?;
    let zeros = || {
        let mut s = ParamStore::new();
        for (_, n, t) in like.iter() {
            s.add(n, Tensor::zeros(t.shape().to_vec()));
        }
        s
    };
    let (mut m, mut v) = (zeros(), zeros());
    ck.restore_into(&format!("opt.{name}.m."), &mut m)?;
    ck.restore_into(&format!("opt.{name}.v."), &mut v)?;
    let take = |s: ParamStore<f32>| s.iter().map(|(_, _, t)| t.clone()).collect();
    opt.restore(steps, take(m), take(v));
    Ok(())
}

/// Named parameter store with its optimizer, for checkpointing.
struct Slot<'a> {
    name: String,
    params: &'a ParamStore<f32>,
    opt: Option<&'a Adam<f32>>,
}

fn save_slots(path: &Path, slots: &[Slot<'_>], mut meta: BTreeMap<String, String>) -> Result<()> {
    let mut owned = Vec::new();
    for s in slots {
        if let Some(opt) = s.opt {
            meta.insert(format!("opt.{}.steps", s.name), opt.steps_taken().to_string());
            let (m, v) = optimizer_stores(opt, s.params);
            owned.push((format!("opt.{}.m.", s.name), m));
            owned.push((format!("opt.{}.v.", s.name), v));
        }
    }
    let prefixes: Vec<String> = slots.iter().map(|s| format!("{}.", s.name)).collect();
    let mut stores: Vec<(&str, &ParamStore<f32>)> = slots.iter().zip(&prefixes).map(|(s, p)| (p.as_str(), s.params)).collect();
    stores.extend(owned.iter().map(|(p, s)| (p.as_str(), s)));
    checkpoint::save(path, &stores, &meta)
}

fn base_meta(config: &TrainConfig, kind: &str, iteration: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("kind".to_string(), kind.to_string()),
        ("config".to_string(), serde_json::to_string(config).expect("config serializes")),
        ("iteration".to_string(), iteration.to_string()),
    ])
}

fn parse_meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    ck.meta(key)?.parse().map_err(|_| Error::Checkpoint { path: ck.path.clone(), reason: format!("metadata `{key}` is malformed") })
}

fn config_of(ck: &Checkpoint) -> Result<TrainConfig> {
    serde_json::from_str(ck.meta("config")?).map_err(|e| Error::Checkpoint { path: ck.path.clone(), reason: format!("bad config: {e}") })
}

fn load_perceptual(opts: &TrainOptions) -> Result<PerceptualExtractor> {
    match &opts.perceptual {
        Some(p) => PerceptualExtractor::load(p),
        None => Ok(PerceptualExtractor::random(PerceptualExtractor::DEFAULT_SEED)),
    }
}

fn fingerprints(stores: &[&ParamStore<f32>]) -> Vec<u64> {
    stores.iter().map(|s| s.fingerprint()).collect()
}

fn init_log(opts: &TrainOptions, resumed_at: Option<usize>) -> Result<Vec<LossRow>> {
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let path = opts.out_dir.join(LOSS_LOG);
    match resumed_at {
        Some(it) if path.is_file() => Ok(read_loss_log(&path)?.into_iter().filter(|r| r.iter <= it).collect()),
        _ => Ok(Vec::new()),
    }
}

fn stack<'t>(tape: &'t Tape<f32>, parts: &[&Tensor<f32>]) -> Var<'t, f32> {
    tape.constant(Tensor::stack(parts))
}

/// Pretrains the single-frame baseline on `L_MSE + lambda_gi * L_GAN,I` over
/// random (source, target) pairs from the training part of every clip.
pub fn pretrain_baseline(config: &TrainConfig, dataset: &[VideoClip], opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    ensure_arg!(!dataset.is_empty(), "pretraining needs a nonempty dataset");
    let usable: Vec<usize> = (0..dataset.len()).filter(|&c| config.train_len(&dataset[c]) >= 2).collect();
    ensure_arg!(!usable.is_empty(), "no clip has two training frames");
    let mut baseline = Baseline::new(config.baseline_config(), config.sub_seed("baseline"))?;
    let mut disc = SpatialDisc::new(&config.disc_config(), config.sub_seed("disc_i"))?;
    let mut opt_b = Adam::new(config.adam(), &baseline.params);
    let mut opt_d = Adam::new(config.adam(), &disc.params);
    let ck_path = opts.out_dir.join(BASELINE_FILE);

    let mut start = 0;
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        if ck.meta("kind")? != "baseline" {
            return Err(Error::Checkpoint { path: path.clone(), reason: "not a baseline checkpoint".into() });
        }
        ck.restore_into("baseline.", &mut baseline.params)?;
        ck.restore_into("disc_i.", &mut disc.params)?;
        restore_optimizer(&ck, "baseline", &baseline.params, &mut opt_b)?;
        restore_optimizer(&ck, "disc_i", &disc.params, &mut opt_d)?;
        start = parse_meta(&ck, "iteration")?;
    }
    let mut log = init_log(opts, opts.resume.as_ref().map(|_| start))?;
    let save = |baseline: &Baseline, disc: &SpatialDisc, opt_b: &Adam<f32>, opt_d: &Adam<f32>, it: usize| {
        let slots = [
            Slot { name: "baseline".into(), params: &baseline.params, opt: Some(opt_b) },
            Slot { name: "disc_i".into(), params: &disc.params, opt: Some(opt_d) },
        ];
        let mut meta = base_meta(config, "baseline", it);
        meta.insert("baseline_config".into(), serde_json::to_string(&baseline.config).unwrap());
        save_slots(&ck_path, &slots, meta)
    };
    let seed = config.sub_seed("pretrain");
    let lambda_gi = config.weights.lambda_gi;

    for it in start + 1..=config.iters_pretrain {
        let mut rng = stream_rng(seed, it as u64);
        let mut pairs = Vec::with_capacity(config.pretrain_batch);
        for _ in 0..config.pretrain_batch {
            let c = usable[rng.random_range(0..usable.len())];
            let n = config.train_len(&dataset[c]);
            let s = rng.random_range(0..n);
            let t = (s + rng.random_range(1..n)) % n;
            pairs.push((c, s, t));
        }
        let ctx = pairs.iter().map(|&(c, s, t)| baseline.context(&dataset[c].poses[s], &dataset[c].poses[t])).collect::<Result<Vec<PoseContext>>>()?;
        let refs: Vec<&PoseContext> = ctx.iter().collect();
        let src: Vec<&Tensor<f32>> = pairs.iter().map(|&(c, s, _)| &dataset[c].frames[s]).collect();
        let tgt: Vec<&Tensor<f32>> = pairs.iter().map(|&(c, _, t)| &dataset[c].frames[t]).collect();
        let heat: Vec<&Tensor<f32>> = ctx.iter().map(|x| &x.tgt_heat).collect();
        let guard = config.check_alternation.then(|| fingerprints(&[&baseline.params]));

        let tape = Tape::new();
        let bp = baseline.params.bind(&tape);
        let out = baseline.forward(&bp, stack(&tape, &src), &refs);
        let fake = out.frame.value().as_ref().clone();

        let d_loss = {
            let dt = Tape::new();
            let dp = disc.params.bind(&dt);
            let loss = objectives::spatial_d_loss(&disc, &dp, stack(&dt, &tgt), dt.constant(fake), stack(&dt, &heat));
            let v = finite(loss.item() as f64, it, "l_gi_d", &ck_path)?;
            let g = dp.grads(&dt.backward(loss));
            drop(dp);
            opt_d.step(&mut disc.params, &g).expect("discriminator is trainable");
            v
        };
        if let Some(before) = &guard {
            assert_eq!(&fingerprints(&[&baseline.params]), before, "baseline changed during the discriminator step");
        }
        let guard = config.check_alternation.then(|| fingerprints(&[&disc.params]));
        let dp = disc.params.bind_const(&tape);
        let mse = objectives::mse(out.frame, stack(&tape, &tgt));
        let gi = objectives::spatial_g_loss(&disc, &dp, out.frame, stack(&tape, &heat));
        let (total, parts) = objectives::total_generator_var(mse, None, Some(gi), None, &LossWeights { lambda_gi, ..LossWeights::ZERO })
            .map_err(|_| divergence(it, "l_mse + l_gi_g", &ck_path))?;
        let total_v = finite(total.item() as f64, it, "total", &ck_path)?;
        let g = bp.grads(&tape.backward(total));
        drop((bp, dp));
        opt_b.step(&mut baseline.params, &g).expect("baseline is trainable while pretraining");
        if let Some(before) = &guard {
            assert_eq!(&fingerprints(&[&disc.params]), before, "discriminator changed during the baseline step");
        }
        log.push(LossRow { iter: it, l_mse: parts.mse, l_vgg: 0.0, l_gi_d: d_loss, l_gi_g: parts.gi, l_gv_d: 0.0, l_gv_g: 0.0, total: total_v });
        if it % config.checkpoint_every == 0 || it == config.iters_pretrain {
            save(&baseline, &disc, &opt_b, &opt_d, it)?;
            write_loss_log(&opts.out_dir.join(LOSS_LOG), &log)?;
        }
        if it % 50 == 0 {
            log::info!("pretrain {it}/{}: mse {:.4} gan_i d {:.4} g {:.4}", config.iters_pretrain, parts.mse, d_loss, parts.gi);
        }
    }
    if !ck_path.is_file() {
        save(&baseline, &disc, &opt_b, &opt_d, start)?;
    }
    write_loss_log(&opts.out_dir.join(LOSS_LOG), &log)?;
    Ok(TrainOutcome { latest: ck_path.clone(), best: ck_path, log, validation: Vec::new() })
}

/// Frozen baseline restored from a baseline or full checkpoint.
pub fn load_baseline(path: &Path) -> Result<Baseline> {
    let ck = Checkpoint::load(path)?;
    let config: BaselineConfig = match ck.metadata.get("baseline_config") {
        Some(s) => serde_json::from_str(s).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: format!("bad baseline config: {e}") })?,
        None => config_of(&ck)?.baseline_config(),
    };
    let mut baseline = Baseline::new(config, 0)?;
    ck.restore_into("baseline.", &mut baseline.params)?;
    baseline.freeze();
    Ok(baseline)
}

/// Baseline features of every source set per (clip, target frame), built on
/// first use. The baseline is frozen and sources are fixed, so they never change.
struct InputCache {
    map: HashMap<(usize, usize), FrameInputs>,
}

impl InputCache {
    fn ensure(&mut self, model: &MotionTransferModel, clip: &VideoClip, c: usize, sources: &[usize], t: usize) -> Result<()> {
        if !self.map.contains_key(&(c, t)) {
            let frames: Vec<Tensor<f32>> = sources.iter().map(|&s| clip.frames[s].clone()).collect();
            let poses: Vec<_> = sources.iter().map(|&s| clip.poses[s].clone()).collect();
            self.map.insert((c, t), model.frame_inputs(&frames, &poses, &clip.poses[t])?);
        }
        Ok(())
    }

    fn get(&self, c: usize, t: usize) -> &FrameInputs {
        &self.map[&(c, t)]
    }
}

struct FullState {
    model: MotionTransferModel,
    disc_i: SpatialDisc,
    disc_v: TemporalDiscs,
    opt_g: Adam<f32>,
    opt_i: Adam<f32>,
    opt_v: Vec<Adam<f32>>,
}

impl FullState {
    fn new(config: &TrainConfig, baseline: Baseline) -> Result<Self> {
        let model = MotionTransferModel::new(baseline, config.model_config(), config.sub_seed("generator"))?;
        let disc_i = SpatialDisc::new(&config.disc_config(), config.sub_seed("disc_i"))?;
        let disc_v = TemporalDiscs::new(&config.disc_config(), config.sub_seed("disc_v"))?;
        let opt_g = Adam::new(config.adam(), &model.generator.params);
        let opt_i = Adam::new(config.adam(), &disc_i.params);
        let opt_v = disc_v.discs.iter().map(|d| Adam::new(config.adam(), &d.params)).collect();
        Ok(FullState { model, disc_i, disc_v, opt_g, opt_i, opt_v })
    }

    fn slots(&self) -> Vec<Slot<'_>> {
        let mut s = vec![
            Slot { name: "baseline".into(), params: &self.model.baseline.params, opt: None },
            Slot { name: "generator".into(), params: &self.model.generator.params, opt: Some(&self.opt_g) },
            Slot { name: "disc_i".into(), params: &self.disc_i.params, opt: Some(&self.opt_i) },
        ];
        for (d, o) in self.disc_v.discs.iter().zip(&self.opt_v) {
            s.push(Slot { name: format!("disc_v{}", d.range_n), params: &d.params, opt: Some(o) });
        }
        s
    }

    fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_into("generator.", &mut self.model.generator.params)?;
        ck.restore_into("disc_i.", &mut self.disc_i.params)?;
        restore_optimizer(ck, "generator", &self.model.generator.params, &mut self.opt_g)?;
        restore_optimizer(ck, "disc_i", &self.disc_i.params, &mut self.opt_i)?;
        for (d, o) in self.disc_v.discs.iter_mut().zip(&mut self.opt_v) {
            let name = format!("disc_v{}", d.range_n);
            ck.restore_into(&format!("{name}."), &mut d.params)?;
            restore_optimizer(ck, &name, &d.params, o)?;
        }
        Ok(())
    }

    /// Number of discriminator parameters, spatial plus temporal.
    fn disc_numel(&self) -> (usize, usize) {
        (self.disc_i.params.numel(), self.disc_v.discs.iter().map(|d| d.params.numel()).sum())
    }

    fn disc_stores(&self) -> Vec<&ParamStore<f32>> {
        std::iter::once(&self.disc_i.params).chain(self.disc_v.discs.iter().map(|d| &d.params)).collect()
    }
}

/// Parameter counts `(generator, spatial discriminator, temporal discriminators)`
/// of the model a configuration builds on top of `baseline`.
pub fn parameter_counts(config: &TrainConfig, baseline: Baseline) -> Result<(usize, usize, usize)> {
    config.validate()?;
    let state = FullState::new(config, baseline)?;
    let (i, v) = state.disc_numel();
    Ok((state.model.generator.params.numel(), i, v))
}

/// Alternating training of fusion and heads against `D_I` and every `D_V^n`,
/// on top of the frozen baseline in `baseline_ckpt`.
pub fn train_full(config: &TrainConfig, dataset: &[VideoClip], baseline_ckpt: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let baseline = load_baseline(baseline_ckpt)?;
    ensure_arg!(
        baseline.config.channels == config.channels && baseline.config.height == config.height && baseline.config.width == config.width,
        "baseline checkpoint is {}x{} with C={}, the configuration asks for {}x{} with C={}",
        baseline.config.height,
        baseline.config.width,
        baseline.config.channels,
        config.height,
        config.width,
        config.channels
    );
    let sampler = BatchSampler::new(dataset, config)?;
    let flows: HashMap<usize, Vec<FlowField>> =
        sampler.plans.iter().map(|p| Ok((p.clip, flows_for(&dataset[p.clip], &opts.flows)?))).collect::<Result<_>>()?;
    let perceptual = load_perceptual(opts)?;
    let extractor = VideoFeatureExtractor::new(opts.extractor_seed, VideoFeatureExtractor::DEFAULT_DIM, VideoFeatureExtractor::DEFAULT_FRAMES)?;
    let mut state = FullState::new(config, baseline)?;
    let latest = opts.out_dir.join(LATEST_FILE);
    let best = opts.out_dir.join(BEST_FILE);

    let mut start = 0;
    let mut best_psnr = f64::NEG_INFINITY;
    let mut validation = Vec::new();
    if let Some(path) = &opts.resume {
        let ck = Checkpoint::load(path)?;
        if ck.meta("kind")? != "full" {
            return Err(Error::Checkpoint { path: path.clone(), reason: "not a full-model checkpoint".into() });
        }
        state.restore(&ck)?;
        start = parse_meta(&ck, "iteration")?;
        if let Some(b) = ck.metadata.get("best_psnr") {
            best_psnr = b.parse().unwrap_or(f64::NEG_INFINITY);
        }
    }
    let mut log = init_log(opts, opts.resume.as_ref().map(|_| start))?;
    let sources_meta: BTreeMap<&str, &[usize]> = sampler.plans.iter().map(|p| (dataset[p.clip].clip_id.as_str(), p.sources.as_slice())).collect();
    let meta_for = |it: usize, val: Option<f64>, best_psnr: f64| {
        let mut m = base_meta(config, "full", it);
        m.insert("sources".into(), serde_json::to_string(&sources_meta).unwrap());
        m.insert("baseline_config".into(), serde_json::to_string(&config.baseline_config()).unwrap());
        if let Some(v) = val {
            m.insert("val_psnr".into(), v.to_string());
        }
        if best_psnr.is_finite() {
            m.insert("best_psnr".into(), best_psnr.to_string());
        }
        m
    };

    let baseline_hash = state.model.baseline.params.fingerprint();
    let mut cache = InputCache { map: HashMap::new() };
    let holdout_targets: Vec<Vec<usize>> =
        dataset.iter().enumerate().map(|(c, clip)| if sampler.sources(c).is_some() { config.holdout_frames(clip) } else { Vec::new() }).collect();
    let validate_now = |state: &FullState, cache: &mut InputCache, it: usize| -> Result<Option<ValidationRow>> {
        if holdout_targets.iter().all(Vec::is_empty) {
            return Ok(None);
        }
        for (c, ts) in holdout_targets.iter().enumerate() {
            for &t in ts {
                cache.ensure(&state.model, &dataset[c], c, sampler.sources(c).unwrap(), t)?;
            }
        }
        let scores = metrics::same_video_scores(dataset, &holdout_targets, &extractor, |c, t| Ok(state.model.generator.run(cache.get(c, t))?.frame))?;
        Ok(Some(ValidationRow { iter: it, psnr: scores.psnr_mean, vfid: scores.vfid }))
    };

    let seed = config.sub_seed("full");
    let (l, w) = (config.l, config.weights);
    for it in start + 1..=config.iters_full {
        let mut rng = stream_rng(seed, it as u64);
        let batch = sampler.sample(&mut rng);
        for item in &batch.items {
            for t in item.targets() {
                cache.ensure(&state.model, &dataset[item.clip], item.clip, &item.sources, t)?;
            }
        }
        let inputs: Vec<&FrameInputs> = batch.items.iter().flat_map(|i| i.targets().map(move |t| (i.clip, t))).map(|(c, t)| cache.get(c, t)).collect();
        let real: Vec<&Tensor<f32>> = batch.items.iter().flat_map(|i| i.targets().map(move |t| &dataset[i.clip].frames[t])).collect();
        let heat: Vec<&Tensor<f32>> = inputs.iter().map(|x| &x.tgt_heat).collect();
        let item_flows: Vec<&[FlowField]> = batch.items.iter().map(|i| i.flows(&flows[&i.clip])).collect();

        let tape = Tape::new();
        let gp = state.model.generator.params.bind(&tape);
        let out = state.model.generator.forward(&gp, &inputs);
        let fake = out.frame.value().as_ref().clone();

        // discriminators, with the generated burst as a constant
        let g_guard = config.check_alternation.then(|| fingerprints(&[&state.model.generator.params]));
        let (gi_d, gv_d) = {
            let dt = Tape::new();
            let pi = state.disc_i.params.bind(&dt);
            let pv: Vec<Binding<'_, '_, f32>> = state.disc_v.discs.iter().map(|d| d.params.bind(&dt)).collect();
            let (real_v, fake_v) = (stack(&dt, &real), dt.constant(fake));
            let li = objectives::spatial_d_loss(&state.disc_i, &pi, real_v, fake_v, stack(&dt, &heat));
            let mut lv: Option<Var<'_, f32>> = None;
            for (b, fl) in item_flows.iter().enumerate() {
                let wf = WindowFlows::new(&dt, fl, &config.temporal_ranges);
                let terms = objectives::temporal_d_loss(&state.disc_v, &pv, real_v.narrow(0, b * l, l), fake_v.narrow(0, b * l, l), &wf)?;
                if let Some(t) = terms.loss {
                    lv = Some(lv.map_or(t, |a| a + t));
                }
            }
            let gi_d = finite(li.item() as f64, it, "l_gi_d", &latest)?;
            let gv_d = finite(lv.map_or(0.0, |v| v.item() as f64), it, "l_gv_d", &latest)?;
            let grads = dt.backward(lv.map_or(li, |v| li + v));
            let gi = pi.grads(&grads);
            let gv: Vec<_> = pv.iter().map(|p| p.grads(&grads)).collect();
            drop((pi, pv));
            state.opt_i.step(&mut state.disc_i.params, &gi).expect("discriminator is trainable");
            for ((d, o), g) in state.disc_v.discs.iter_mut().zip(&mut state.opt_v).zip(&gv) {
                o.step(&mut d.params, g).expect("discriminator is trainable");
            }
            (gi_d, gv_d)
        };
        if let Some(before) = &g_guard {
            assert_eq!(&fingerprints(&[&state.model.generator.params]), before, "generator changed during the discriminator step");
        }

        // generator, against the updated discriminators
        let d_guard = config.check_alternation.then(|| fingerprints(&state.disc_stores()));
        let pi = state.disc_i.params.bind_const(&tape);
        let pv: Vec<Binding<'_, '_, f32>> = state.disc_v.discs.iter().map(|d| d.params.bind_const(&tape)).collect();
        let pe = perceptual.params.bind_const(&tape);
        let real_g = stack(&tape, &real);
        let mse = objectives::mse(out.frame, real_g);
        let vgg = (w.lambda_vgg != 0.0).then(|| objectives::perceptual(&perceptual, &pe, out.frame, real_g));
        let gi = objectives::spatial_g_loss(&state.disc_i, &pi, out.frame, stack(&tape, &heat));
        let mut gv: Option<Var<'_, f32>> = None;
        for (b, fl) in item_flows.iter().enumerate() {
            let wf = WindowFlows::new(&tape, fl, &config.temporal_ranges);
            if let Some(t) = objectives::temporal_g_loss(&state.disc_v, &pv, out.frame.narrow(0, b * l, l), &wf)?.loss {
                gv = Some(gv.map_or(t, |a| a + t));
            }
        }
        let (total, parts) = objectives::total_generator_var(mse, vgg, Some(gi), gv, &w).map_err(|e| match e {
            Error::NonFinite { what } => divergence(it, &what, &latest),
            other => other,
        })?;
        let total_v = finite(total.item() as f64, it, "total", &latest)?;
        let grads = gp.grads(&tape.backward(total));
        drop((gp, pi, pv, pe));
        state.opt_g.step(&mut state.model.generator.params, &grads).expect("generator is trainable");
        if let Some(before) = &d_guard {
            assert_eq!(&fingerprints(&state.disc_stores()), before, "discriminators changed during the generator step");
            assert_eq!(state.model.baseline.params.fingerprint(), baseline_hash, "baseline changed during full training");
        }
        log.push(LossRow { iter: it, l_mse: parts.mse, l_vgg: parts.vgg, l_gi_d: gi_d, l_gi_g: parts.gi, l_gv_d: gv_d, l_gv_g: parts.gv, total: total_v });
        if it % 25 == 0 {
            log::info!("full {it}/{}: mse {:.4} vgg {:.4} total {:.4}", config.iters_full, parts.mse, parts.vgg, total_v);
        }

        let last = it == config.iters_full;
        let mut val = None;
        if it % config.validate_every == 0 || last {
            if let Some(row) = validate_now(&state, &mut cache, it)? {
                log::info!("validation {it}: psnr {:.3} vfid {:?}", row.psnr, row.vfid);
                val = Some(row.psnr);
                if row.psnr > best_psnr {
                    best_psnr = row.psnr;
                    save_slots(&best, &state.slots(), meta_for(it, val, best_psnr))?;
                }
                validation.push(row);
            }
        }
        if it % config.checkpoint_every == 0 || last {
            save_slots(&latest, &state.slots(), meta_for(it, val, best_psnr))?;
            write_loss_log(&opts.out_dir.join(LOSS_LOG), &log)?;
            write_validation_log(&opts.out_dir.join(VALIDATION_LOG), &validation)?;
        }
    }
    assert_eq!(state.model.baseline.params.fingerprint(), baseline_hash, "baseline changed during full training");
    if !latest.is_file() {
        save_slots(&latest, &state.slots(), meta_for(start, None, best_psnr))?;
    }
    if !best.is_file() {
        std::fs::copy(&latest, &best).map_err(|e| Error::io(&best, e))?;
    }
    write_loss_log(&opts.out_dir.join(LOSS_LOG), &log)?;
    Ok(TrainOutcome { latest, best, log, validation })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Baseline,
    Full,
}

pub enum Network {
    Baseline(Baseline),
    Full(MotionTransferModel),
}

/// A checkpoint ready for inference.
pub struct TrainedModel {
    pub kind: ModelKind,
    pub config: TrainConfig,
    pub network: Network,
    pub sources: BTreeMap<String, Vec<usize>>,
    pub iteration: usize,
    /// `kind@iteration:parameter-hash`.
    pub checkpoint_id: String,
}

impl TrainedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config = config_of(&ck)?;
        let iteration: usize = parse_meta(&ck, "iteration")?;
        let baseline = load_baseline(path)?;
        let mut hash = baseline.params.fingerprint();
        let (kind, network) = match ck.meta("kind")? {
            "baseline" => (ModelKind::Baseline, Network::Baseline(baseline)),
            "full" => {
                let mut model = MotionTransferModel::new(baseline, config.model_config(), 0)?;
                ck.restore_into("generator.", &mut model.generator.params)?;
                model.generator.params.freeze();
                hash ^= model.generator.params.fingerprint().rotate_left(17);
                (ModelKind::Full, Network::Full(model))
            }
            other => return Err(Error::Checkpoint { path: path.to_path_buf(), reason: format!("unknown checkpoint kind `{other}`") }),
        };
        let sources = match ck.metadata.get("sources") {
            Some(s) => serde_json::from_str(s).map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: format!("bad source table: {e}") })?,
            None => BTreeMap::new(),
        };
        let checkpoint_id = format!("{}@{iteration}:{hash:016x}", ck.meta("kind")?);
        Ok(TrainedModel { kind, config, network, sources, iteration, checkpoint_id })
    }

    pub fn baseline(&self) -> &Baseline {
        match &self.network {
            Network::Baseline(b) => b,
            Network::Full(m) => &m.baseline,
        }
    }

    pub fn holdout_frames(&self, clip: &VideoClip) -> Vec<usize> {
        self.config.holdout_frames(clip)
    }

    /// The clip's training sources: the recorded ones, else drawn by the training rule.
    pub fn sources_for(&self, clip: &VideoClip) -> Result<Vec<usize>> {
        if let Some(s) = self.sources.get(&clip.clip_id) {
            return Ok(s.clone());
        }
        let n = self.config.train_len(clip);
        draw_sources(&self.config, &clip.clip_id, n)
            .ok_or_else(|| Error::Argument(format!("clip {} has {n} training frames, fewer than K + L = {}", clip.clip_id, self.config.k + self.config.l)))
    }

    /// Frame `t` of `driver`'s motion rendered with the appearance of `source` at `sources`.
    pub fn predict(&self, source: &VideoClip, sources: &[usize], driver: &VideoClip, t: usize) -> Result<Tensor<f32>> {
        ensure_arg!(t < driver.len(), "target frame {t} of a {}-frame clip", driver.len());
        ensure_arg!(!sources.is_empty() && sources.iter().all(|&s| s < source.len()), "source indices {sources:?} out of range");
        let frames: Vec<Tensor<f32>> = sources.iter().map(|&s| source.frames[s].clone()).collect();
        let poses: Vec<_> = sources.iter().map(|&s| source.poses[s].clone()).collect();
        match &self.network {
            Network::Baseline(b) => Ok(b.run(&frames[0], &poses[0], &driver.poses[t])?.frame),
            Network::Full(m) => Ok(m.transfer_frame(&frames, &poses, &driver.poses[t])?.frame),
        }
    }
}

/// The full model of a checkpoint written by [`train_full`].
pub fn load_full_model(path: &Path) -> Result<MotionTransferModel> {
    match TrainedModel::load(path)?.network {
        Network::Full(m) => Ok(m),
        Network::Baseline(_) => Err(Error::Checkpoint { path: path.to_path_buf(), reason: "a baseline checkpoint has no fusion model".into() }),
    }
}

/// Baseline features of one clip, reused by callers that run the generator repeatedly.
pub fn generator_inputs(model: &MotionTransferModel, clip: &VideoClip, sources: &[usize], targets: &[usize]) -> Result<Vec<FrameInputs>> {
    let frames: Vec<Tensor<f32>> = sources.iter().map(|&s| clip.frames[s].clone()).collect();
    let poses: Vec<_> = sources.iter().map(|&s| clip.poses[s].clone()).collect();
    targets.iter().map(|&t| model.frame_inputs(&frames, &poses, &clip.poses[t])).collect()
}
