use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use vidfuse::adversaries::FlowProvider;
use vidfuse::composer::CompositeOutput;
use vidfuse::metrics::{self, EvalMode, VideoFeatureExtractor};
use vidfuse::synthvid::{self, VideoClip};
use vidfuse::trainer::{self, Network, TrainOptions, TrainedModel};
use vidfuse_tape::{ParamStore, Tensor};

use crate::config::{self, RunConfig};
use crate::manifest::RunManifest;
use crate::{BgSubstituteArgs, Cli, Command, EvaluateArgs, TrainBaselineArgs, TrainFullArgs, TransferArgs};

pub fn run(cli: &Cli) -> Result<()> {
    let defaults = match cli.command {
        Command::Demo => RunConfig::demo(),
        _ => RunConfig::default(),
    };
    let cfg = config::resolve(defaults, cli.config.as_deref(), &cli.sets, cli.seed)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::SynthData => {
            prepare(out, cli.force, false)?;
            RunManifest::new("synth-data", &cfg, None)?.write(out)?;
            synth(&cfg, out)
        }
        Command::TrainBaseline(a) => {
            prepare(out, cli.force, a.resume.is_some())?;
            RunManifest::new("train-baseline", &cfg, Some(&a.data))?.write(out)?;
            train_baseline(&cfg, a, out)
        }
        Command::TrainFull(a) => {
            prepare(out, cli.force, a.resume.is_some())?;
            RunManifest::new("train-full", &cfg, Some(&a.data))?.write(out)?;
            train_full(&cfg, a, out)
        }
        Command::Transfer(a) => {
            prepare(out, cli.force, false)?;
            RunManifest::new("transfer", &cfg, Some(&a.data))?.write(out)?;
            transfer(a, out)
        }
        Command::BgSubstitute(a) => {
            prepare(out, cli.force, false)?;
            RunManifest::new("bg-substitute", &cfg, Some(&a.data))?.write(out)?;
            bg_substitute(a, out)
        }
        Command::Evaluate(a) => {
            prepare(out, cli.force, false)?;
            RunManifest::new("evaluate", &cfg, Some(&a.data))?.write(out)?;
            evaluate(&cfg, a, out)
        }
        Command::Demo => demo(&cfg, out, cli.force),
    }
}

/// Creates `dir`, refusing a non-empty one unless forced or resuming.
fn prepare(dir: &Path, force: bool, resume: bool) -> Result<()> {
    if dir.exists() {
        let busy = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if busy && !force && !resume {
            bail!("output directory {} is not empty; pass --force to overwrite", dir.display());
        }
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let d = &cfg.data;
    let clips = synthvid::generate_dataset(cfg.train.sub_seed("data"), d.clips, d.frames, d.height, d.width)?;
    synthvid::export_dataset(&clips, out)?;
    log::info!("wrote {} clips of {} frames to {}", clips.len(), d.frames, out.display());
    Ok(())
}

fn load_data(cfg: &RunConfig, dir: &Path) -> Result<Vec<VideoClip>> {
    let clips = synthvid::load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    for c in &clips {
        if c.dims() != (cfg.train.height, cfg.train.width) {
            bail!(
                "clip {} is {}x{} but the configuration trains at {}x{} (set train.height and train.width)",
                c.clip_id,
                c.dims().0,
                c.dims().1,
                cfg.train.height,
                cfg.train.width
            );
        }
    }
    Ok(clips)
}

fn train_baseline(cfg: &RunConfig, a: &TrainBaselineArgs, out: &Path) -> Result<()> {
    let data = load_data(cfg, &a.data)?;
    let opts = TrainOptions { resume: a.resume.clone(), ..TrainOptions::new(out) };
    let done = trainer::pretrain_baseline(&cfg.train, &data, &opts)?;
    log::info!("baseline checkpoint: {}", done.latest.display());
    Ok(())
}

fn flow_dir_provider(dir: PathBuf) -> FlowProvider {
    FlowProvider::Estimator(Arc::new(move |clip: &VideoClip| {
        vidfuse::adversaries::flows_for(clip, &FlowProvider::File(dir.join(&clip.clip_id)))
    }))
}

fn train_full(cfg: &RunConfig, a: &TrainFullArgs, out: &Path) -> Result<()> {
    let data = load_data(cfg, &a.data)?;
    let baseline = if a.baseline.is_dir() { a.baseline.join(trainer::BASELINE_FILE) } else { a.baseline.clone() };
    let opts = TrainOptions {
        resume: a.resume.clone(),
        flows: a.flows.clone().map_or(FlowProvider::GroundTruth, flow_dir_provider),
        perceptual: a.perceptual.clone(),
        extractor_seed: cfg.eval.extractor_seed,
        ..TrainOptions::new(out)
    };
    let done = trainer::train_full(&cfg.train, &data, &baseline, &opts)?;
    if let Some(v) = done.validation.iter().map(|v| v.psnr).reduce(f64::max) {
        log::info!("best validation psnr {v:.3} dB");
    }
    log::info!("latest: {}, best: {}", done.latest.display(), done.best.display());
    Ok(())
}

fn pick<'a>(data: &'a [VideoClip], id: Option<&str>, fallback: usize) -> Result<&'a VideoClip> {
    match id {
        Some(id) => data.iter().find(|c| c.clip_id == id).with_context(|| format!("no clip `{id}` in the dataset")),
        None => data.get(fallback.min(data.len().saturating_sub(1))).context("the dataset is empty"),
    }
}

fn frames_at(clip: &VideoClip, idx: &[usize]) -> (Vec<Tensor<f32>>, Vec<vidfuse::posekit::Pose>) {
    (idx.iter().map(|&i| clip.frames[i].clone()).collect(), idx.iter().map(|&i| clip.poses[i].clone()).collect())
}

/// One output frame, optionally with the background branch driven by another clip.
fn render(model: &TrainedModel, src: (&VideoClip, &[usize]), driver: &VideoClip, t: usize, bg: Option<(&VideoClip, &[usize])>) -> Result<CompositeOutput> {
    let (frames, poses) = frames_at(src.0, src.1);
    let tgt = &driver.poses[t];
    Ok(match (&model.network, bg) {
        (Network::Full(m), None) => m.transfer_frame(&frames, &poses, tgt)?,
        (Network::Full(m), Some((clip, idx))) => {
            let (bf, bp) = frames_at(clip, idx);
            m.substitute_background(&frames, &poses, tgt, &bf, &bp)?
        }
        (Network::Baseline(b), None) => {
            let o = b.run(&frames[0], &poses[0], tgt)?;
            CompositeOutput { fg: o.fg, bg: o.bg, mask: o.mask, frame: o.frame, fg_attention: None, bg_attention: None }
        }
        (Network::Baseline(_), Some(_)) => bail!("background substitution needs a full-model checkpoint"),
    })
}

fn check_sources(clip: &VideoClip, idx: &[usize], k: usize) -> Result<()> {
    if idx.len() != k {
        bail!("the model fuses K={k} source frames, {} given", idx.len());
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= clip.len()) {
        bail!("source frame {bad} is outside clip {} ({} frames)", clip.clip_id, clip.len());
    }
    Ok(())
}

/// Frames as PNG and, when asked, raw tensors of every stage.
struct Dumper {
    out: PathBuf,
    tensors: ParamStore<f32>,
    intermediates: bool,
    attention: bool,
}

impl Dumper {
    fn put(&mut self, t: usize, o: &CompositeOutput) -> Result<()> {
        synthvid::write_rgb_png(&self.out.join("frames").join(format!("{t:05}.png")), &o.frame)?;
        if self.intermediates {
            let dir = self.out.join("intermediates");
            synthvid::write_rgb_png(&dir.join(format!("fg_{t:05}.png")), &o.fg)?;
            synthvid::write_rgb_png(&dir.join(format!("bg_{t:05}.png")), &o.bg)?;
            synthvid::write_mask_png(&dir.join(format!("mask_{t:05}.png")), &o.mask)?;
            for (name, v) in [("frame", &o.frame), ("fg", &o.fg), ("bg", &o.bg), ("mask", &o.mask)] {
                self.tensors.add(format!("{name}.{t:05}"), v.clone());
            }
        }
        if self.attention {
            for (branch, att) in [("fg", &o.fg_attention), ("bg", &o.bg_attention)] {
                let Some(att) = att else { continue };
                let (k, h, w) = att.weights.dims3();
                for i in 0..k {
                    let plane = att.weights.narrow(0, i, 1).reshape([1, h, w]);
                    synthvid::write_mask_png(&self.out.join("attention").join(format!("{branch}_{t:05}_k{i}.png")), &plane)?;
                }
                self.tensors.add(format!("{branch}_attention.{t:05}"), att.weights.clone());
            }
        }
        Ok(())
    }

    fn finish(self, meta: BTreeMap<String, String>) -> Result<()> {
        if !self.tensors.is_empty() {
            vidfuse::checkpoint::save(&self.out.join("tensors.safetensors"), &[("", &self.tensors)], &meta)?;
        }
        Ok(())
    }
}

fn transfer(a: &TransferArgs, out: &Path) -> Result<()> {
    let model = TrainedModel::load(&metrics::find_checkpoint(&a.checkpoint)?)?;
    let data = synthvid::load_dataset(&a.data)?;
    let src = pick(&data, a.source_clip.as_deref(), 0)?;
    let driver = match &a.target_clip {
        Some(_) => pick(&data, a.target_clip.as_deref(), 0)?,
        None => src,
    };
    let sources = match &a.sources {
        Some(s) => s.clone(),
        None => model.sources_for(src)?,
    };
    match model.network {
        Network::Full(_) => check_sources(src, &sources, model.config.k)?,
        Network::Baseline(_) => check_sources(src, &sources[..sources.len().min(1)], 1)?,
    }
    let mut dump = Dumper { out: out.to_path_buf(), tensors: ParamStore::new(), intermediates: a.dump_intermediates, attention: a.dump_attention };
    for t in 0..driver.len() {
        dump.put(t, &render(&model, (src, &sources), driver, t, None)?)?;
    }
    log::info!("{} frames of {} in the motion of {} written to {}", driver.len(), src.clip_id, driver.clip_id, out.display());
    dump.finish(BTreeMap::from([("checkpoint_id".to_string(), model.checkpoint_id.clone()), ("sources".to_string(), format!("{sources:?}"))]))
}

fn bg_substitute(a: &BgSubstituteArgs, out: &Path) -> Result<()> {
    let model = TrainedModel::load(&metrics::find_checkpoint(&a.checkpoint)?)?;
    let data = synthvid::load_dataset(&a.data)?;
    let src = pick(&data, a.source_clip.as_deref(), 0)?;
    let driver = match &a.target_clip {
        Some(_) => pick(&data, a.target_clip.as_deref(), 0)?,
        None => src,
    };
    let bg = pick(&data, Some(&a.background_clip), 0)?;
    let sources = model.sources_for(src)?;
    let bg_sources = model.sources_for(bg)?;
    let mut dump = Dumper { out: out.to_path_buf(), tensors: ParamStore::new(), intermediates: a.dump_intermediates, attention: false };
    for t in 0..driver.len() {
        let o = render(&model, (src, &sources), driver, t, Some((bg, &bg_sources)))?;
        synthvid::write_mask_png(&out.join("masks").join(format!("{t:05}.png")), &o.mask)?;
        dump.put(t, &o)?;
    }
    log::info!("background of {} under {} written to {}", bg.clip_id, src.clip_id, out.display());
    dump.finish(BTreeMap::from([("checkpoint_id".to_string(), model.checkpoint_id.clone())]))
}

fn evaluate(cfg: &RunConfig, a: &EvaluateArgs, out: &Path) -> Result<()> {
    let mode: EvalMode = a.mode.parse()?;
    let data = synthvid::load_dataset(&a.data)?;
    let extractor = VideoFeatureExtractor::new(cfg.eval.extractor_seed, VideoFeatureExtractor::DEFAULT_DIM, VideoFeatureExtractor::DEFAULT_FRAMES)?;
    let report = metrics::evaluate(&a.run, &data, mode, &extractor, out)?;
    match (report.psnr_mean, report.vfid) {
        (Some(p), Some(v)) => log::info!("psnr {p:.3} dB, vfid {v:.5}"),
        (Some(p), None) => log::info!("psnr {p:.3} dB"),
        _ => log::info!("cross-video frames written under {}", out.display()),
    }
    Ok(())
}

fn demo(cfg: &RunConfig, out: &Path, force: bool) -> Result<()> {
    prepare(out, force, false)?;
    RunManifest::new("demo", cfg, None)?.write(out)?;
    let stage = |name: &str, data: Option<&Path>| -> Result<PathBuf> {
        let dir = out.join(name);
        prepare(&dir, true, false)?;
        RunManifest::new(&format!("demo/{name}"), cfg, data)?.write(&dir)?;
        Ok(dir)
    };
    let data_dir = stage("data", None)?;
    synth(cfg, &data_dir)?;
    let base_dir = stage("baseline", Some(&data_dir))?;
    train_baseline(cfg, &TrainBaselineArgs { data: data_dir.clone(), resume: None }, &base_dir)?;
    let full_dir = stage("full", Some(&data_dir))?;
    let full_args = TrainFullArgs { data: data_dir.clone(), baseline: base_dir.clone(), resume: None, flows: None, perceptual: None };
    train_full(cfg, &full_args, &full_dir)?;
    let transfer_dir = stage("transfer", Some(&data_dir))?;
    let data = synthvid::load_dataset(&data_dir)?;
    let transfer_args = TransferArgs {
        checkpoint: full_dir.clone(),
        data: data_dir.clone(),
        source_clip: data.first().map(|c| c.clip_id.clone()),
        target_clip: data.get(1).map(|c| c.clip_id.clone()),
        sources: None,
        dump_attention: true,
        dump_intermediates: true,
    };
    transfer(&transfer_args, &transfer_dir)?;
    let eval_dir = stage("eval", Some(&data_dir))?;
    evaluate(cfg, &EvaluateArgs { run: full_dir, data: data_dir, mode: "same_video".into() }, &eval_dir)?;
    log::info!("demo finished; report at {}", eval_dir.join("report.json").display());
    Ok(())
}
