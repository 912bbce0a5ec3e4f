//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Run with `cargo test --test acceptance`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidfuse::adversaries::{enumerate_windows, window_frames, DiscConfig, SpatialDisc, TemporalDiscs};
use vidfuse::basenet::{Baseline, BaselineConfig};
use vidfuse::checkpoint::load_params;
use vidfuse::composer::{composite, ModelConfig, MotionTransferModel};
use vidfuse::fusion::{combine, fuse, AttentionMap, FusionConfig, FusionNet, Strategy};
use vidfuse::metrics::{evaluate, vfid, EvalMode, GaussianStats, VideoFeatureExtractor};
use vidfuse::objectives::{self, lsgan_d, lsgan_g, mse, perceptual, LossWeights, PerceptualExtractor, WindowFlows};
use vidfuse::posekit::{figure_region, Pose, PoseHeatmap, NUM_KEYPOINTS};
use vidfuse::synthvid::{generate_clip, generate_dataset, FlowField, SceneSpec, VideoClip};
use vidfuse::trainer::{load_baseline, load_full_model, pretrain_baseline, read_loss_log, train_full, TrainConfig, TrainOptions};
use vidfuse_tape::gradcheck::{central_difference_at, relative_error};
use vidfuse_tape::{ParamStore, Tape, Tensor, Var};

type Check = anyhow::Result<(bool, String)>;

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

fn noise(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn random_attention(rng: &mut ChaCha8Rng, k: usize, h: usize, w: usize) -> AttentionMap {
    let logits: Vec<f64> = (0..k * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut out = vec![0f32; k * h * w];
    for i in 0..h * w {
        let z: f64 = (0..k).map(|j| logits[j * h * w + i].exp()).sum();
        for j in 0..k {
            out[j * h * w + i] = (logits[j * h * w + i].exp() / z) as f32;
        }
    }
    AttentionMap::new(Tensor::new([k, h, w], out)).unwrap()
}

fn heat(rng: &mut ChaCha8Rng, h: usize, w: usize) -> PoseHeatmap {
    PoseHeatmap { channels: noise(rng, &[NUM_KEYPOINTS, h, w], 0.0, 1.0), sigma: 1.0 }
}

// ---------------------------------------------------------------- 1

fn fusion_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (4, 4);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let k = rng.random_range(1..=4);
        let c = rng.random_range(1..=4);
        let feats: Vec<_> = (0..k).map(|_| noise(&mut rng, &[c, h, w], -2.0, 2.0)).collect();
        let att = random_attention(&mut rng, k, h, w);
        let out = combine(&feats, &att)?;
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut want = 0.0f64;
                    for (j, f) in feats.iter().enumerate() {
                        want += f.data()[(ci * h + y) * w + x] as f64 * att.weights.data()[(j * h + y) * w + x] as f64;
                    }
                    worst = worst.max((out.data()[(ci * h + y) * w + x] as f64 - want).abs());
                }
            }
        }
    }
    Ok((worst < 1e-6, format!("max |combine - oracle| = {worst:.2e} over 200 instances")))
}

// ---------------------------------------------------------------- 2

/// A fusion net with every parameter redrawn, so attention logits are far from uniform.
fn scrambled_net(strategy: Strategy, k: usize, c: usize, rng: &mut ChaCha8Rng) -> (FusionNet, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let net = FusionNet::new(&mut store, rng, "f", FusionConfig::new(strategy, k, c)).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let t = noise(rng, &shape, -0.8, 0.8);
        store.set(id, t);
    }
    (net, store)
}

fn attention_normalization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f32;
    let mut negative = false;
    for s in [Strategy::Rb6, Strategy::Sa3dRb6, Strategy::Rb6Sa2d] {
        for _ in 0..100 {
            let k = rng.random_range(1..=4);
            let c = rng.random_range(1..=4);
            let hw = [8, 12, 16][rng.random_range(0..3)];
            let (net, store) = scrambled_net(s, k, c, &mut rng);
            let feats: Vec<_> = (0..k).map(|_| noise(&mut rng, &[c, hw, hw], -2.0, 2.0)).collect();
            let heats: Vec<_> = (0..k).map(|_| heat(&mut rng, hw, hw)).collect();
            let (_, att) = fuse(&feats, &heats, &heat(&mut rng, hw, hw), &net, &store)?;
            let att = att.ok_or_else(|| anyhow::anyhow!("{s} returned no attention"))?;
            worst = worst.max(att.normalization_error());
            negative |= att.weights.data().iter().any(|&v| v < 0.0);
        }
    }
    Ok((worst < 1e-5 && !negative, format!("max |sum_k A - 1| = {worst:.2e} over 3 variants x 100 forwards")))
}

// ---------------------------------------------------------------- demo runs (3, 9, 10)

fn vidfuse(args: &[&str]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_vidfuse")).args(args).env("RUST_LOG", "warn").output()?;
    anyhow::ensure!(out.status.success(), "vidfuse {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn demo_run(i: usize) -> anyhow::Result<PathBuf> {
    let dir = scratch().join(format!("demo{i}"));
    if !dir.join("eval/report.json").exists() {
        vidfuse(&["demo", "--seed", "7", "--force", "--out", dir.to_str().unwrap()])?;
    }
    Ok(dir)
}

fn tensors(path: &Path) -> anyhow::Result<ParamStore<f32>> {
    Ok(load_params(path)?.0)
}

fn named<'a>(store: &'a ParamStore<f32>, name: &str) -> anyhow::Result<&'a Tensor<f32>> {
    let id = store.find(name).ok_or_else(|| anyhow::anyhow!("no tensor {name}"))?;
    Ok(store.get(id))
}

fn bits_equal(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------- 3

fn composition_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut exact = true;
    for _ in 0..50 {
        let fg = noise(&mut rng, &[3, 8, 8], -1.0, 1.0);
        let bg = noise(&mut rng, &[3, 8, 8], -1.0, 1.0);
        exact &= bits_equal(&composite(&fg, &bg, &Tensor::ones([1, 8, 8]))?, &fg);
        exact &= bits_equal(&composite(&fg, &bg, &Tensor::zeros([1, 8, 8]))?, &bg);
        let m = Tensor::from_fn([1, 8, 8], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let out = composite(&fg, &bg, &m)?;
        for c in 0..3 {
            for i in 0..64 {
                let want = if m.data()[i] == 1.0 { fg.data()[c * 64 + i] } else { bg.data()[c * 64 + i] };
                exact &= out.data()[c * 64 + i].to_bits() == want.to_bits();
            }
        }
    }

    let dump = tensors(&demo_run(1)?.join("transfer/tensors.safetensors"))?;
    let mut frames = 0;
    let mut recomposed = true;
    while let Some(id) = dump.find(&format!("frame.{frames:05}")) {
        let t = format!("{frames:05}");
        let again = composite(named(&dump, &format!("fg.{t}"))?, named(&dump, &format!("bg.{t}"))?, named(&dump, &format!("mask.{t}"))?)?;
        recomposed &= bits_equal(&again, dump.get(id));
        frames += 1;
    }
    Ok((
        exact && recomposed && frames > 0,
        format!("binary-mask identities exact: {exact}; {frames} dumped frames recomposed bit-exactly: {recomposed}"),
    ))
}

// ---------------------------------------------------------------- 4

/// Relative error of the analytic gradient of `f` w.r.t. the input at a subset of coordinates.
fn input_gradient(x0: &[f64], shape: &[usize], step: usize, f: impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>) -> f64 {
    let eval = |x: &[f64]| {
        let tape = Tape::new();
        let v = tape.variable(Tensor::new(shape.to_vec(), x.to_vec()));
        let l = f(&tape, v);
        let g = tape.backward(l);
        (l.item(), g.get(v).unwrap().data().to_vec())
    };
    let (_, analytic) = eval(x0);
    let coords: Vec<usize> = (0..x0.len()).step_by(step).collect();
    let numeric = central_difference_at(|x| eval(x).0, x0, &coords, 1e-5);
    relative_error(&coords.iter().map(|&i| analytic[i]).collect::<Vec<_>>(), &numeric)
}

fn shrink(p: &Pose) -> Pose {
    let mut q = *p;
    for k in q.keypoints.iter_mut() {
        k.x *= 0.5;
        k.y *= 0.5;
    }
    q
}

/// End-to-end generator objective w.r.t. the generator parameters at 16x16.
fn generator_gradient() -> anyhow::Result<f64> {
    let clip = generate_clip(&SceneSpec::random(21, 8, 32, 32)?)?;
    let poses: Vec<Pose> = clip.poses.iter().map(shrink).collect();
    let small = |f: &Tensor<f32>| Tensor::from_fn([3, 16, 16], |i| {
        let (c, y, x) = (i / 256, i / 16 % 16, i % 16);
        f.data()[(c * 32 + 2 * y) * 32 + 2 * x]
    });
    let frames: Vec<Tensor<f32>> = clip.frames.iter().map(small).collect();
    let mut baseline = Baseline::new(BaselineConfig::new(3, 16, 16), 22)?;
    baseline.freeze();
    let model = MotionTransferModel::new(baseline, ModelConfig { strategy: Strategy::Rb6, k: 2 }, 23)?;
    let sources = [0usize, 5];
    let targets = [1usize, 2, 3];
    let src_f: Vec<_> = sources.iter().map(|&i| frames[i].clone()).collect();
    let src_p: Vec<_> = sources.iter().map(|&i| poses[i]).collect();
    let inputs = targets.iter().map(|&t| model.frame_inputs(&src_f, &src_p, &poses[t])).collect::<vidfuse::Result<Vec<_>>>()?;
    let refs: Vec<_> = inputs.iter().collect();
    let real = Tensor::stack(&targets.iter().map(|&t| &frames[t]).collect::<Vec<_>>()).cast::<f64>();
    let tgt_heat = Tensor::stack(&inputs.iter().map(|x| &x.tgt_heat).collect::<Vec<_>>()).cast::<f64>();

    let ex = PerceptualExtractor::random(PerceptualExtractor::DEFAULT_SEED);
    let exp = ex.params.cast::<f64>();
    let di = SpatialDisc::new(&DiscConfig { widths: [4, 4, 4], temporal_ranges: vec![] }, 24)?;
    let dip = di.params.cast::<f64>();
    let dv = TemporalDiscs::new(&DiscConfig { widths: [4, 4, 4], temporal_ranges: vec![3] }, 25)?;
    let dvp: Vec<_> = dv.discs.iter().map(|d| d.params.cast::<f64>()).collect();
    let flows = vec![FlowField::zeros(16, 16); targets.len() - 1];
    let weights = LossWeights::default();

    let mut params = model.generator.params.cast::<f64>();
    // move the zero-initialized attention logits off their symmetric start
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let ids: Vec<_> = params.iter().filter(|(_, n, _)| n.contains("head.weight") && n.starts_with("fusion")).map(|(id, _, _)| id).collect();
    for id in ids {
        let shape = params.get(id).shape().to_vec();
        params.set(id, Tensor::from_fn(shape, |_| rng.random_range(-0.3..0.3)));
    }

    let loss = |store: &ParamStore<f64>, grads: bool| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = model.generator.forward(&p, &refs);
        let target = tape.constant(real.clone());
        let vgg = perceptual(&ex, &exp.bind_const(&tape), out.frame, target);
        let gi = objectives::spatial_g_loss(&di, &dip.bind_const(&tape), out.frame, tape.constant(tgt_heat.clone()));
        let binds: Vec<_> = dvp.iter().map(|s| s.bind_const(&tape)).collect();
        let gv = objectives::temporal_g_loss(&dv, &binds, out.frame, &WindowFlows::new(&tape, &flows, &[3])).unwrap().loss;
        let (total, _) = objectives::total_generator_var(mse(out.frame, target), Some(vgg), Some(gi), gv, &weights).unwrap();
        if !grads {
            return (total.item(), Vec::new());
        }
        let g = tape.backward(total);
        (total.item(), p.grads(&g).flatten(store))
    };
    let (_, analytic) = loss(&params, true);
    let layout: Vec<(vidfuse_tape::ParamId, usize)> = params.iter().flat_map(|(id, _, t)| (0..t.len()).map(move |o| (id, o))).collect();
    let coords: Vec<usize> = (0..layout.len()).step_by((layout.len() / 150).max(1)).collect();
    let flat0: Vec<f64> = coords.iter().map(|&i| params.get(layout[i].0).data()[layout[i].1]).collect();
    let numeric = central_difference_at(
        |x| {
            let mut s = params.clone();
            for (j, &i) in coords.iter().enumerate() {
                let (id, o) = layout[i];
                if x[j] != flat0[j] {
                    let mut t = s.get(id).clone();
                    t.data_mut()[o] = x[j];
                    s.set(id, t);
                }
            }
            loss(&s, false).0
        },
        &flat0,
        &(0..coords.len()).collect::<Vec<_>>(),
        1e-5,
    );
    Ok(relative_error(&coords.iter().map(|&i| analytic[i]).collect::<Vec<_>>(), &numeric))
}

fn fusion_gradient(strategy: Strategy) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (k, c, h, w) = (2, 2, 16, 16);
    let mut store = ParamStore::new();
    let net = FusionNet::new(&mut store, &mut rng, "f", FusionConfig::new(strategy, k, c)).unwrap();
    let ids: Vec<_> = store.iter().filter(|(_, n, _)| n.ends_with("head.weight") || n.ends_with("gamma")).map(|(id, _, _)| id).collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::from_fn(shape, |_| rng.random_range(-0.5f32..0.5)));
    }
    let params = store.cast::<f64>();
    let x0: Vec<f64> = (0..k * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let src = Tensor::<f64>::from_fn([1, k, NUM_KEYPOINTS, h, w], |_| rng.random_range(0.0..1.0));
    let tgt = Tensor::<f64>::from_fn([1, NUM_KEYPOINTS, h, w], |_| rng.random_range(0.0..1.0));
    let wts = Tensor::<f64>::from_fn([1, c, h, w], |_| rng.random_range(-1.0..1.0));
    input_gradient(&x0, &[1, k, c, h, w], 1, |t, x| {
        let out = net.forward(&params.bind_const(t), x, t.constant(src.clone()), t.constant(tgt.clone())).fused;
        (out.sqr() * t.constant(wts.clone())).sum()
    })
}

fn gradient_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut cases: Vec<(String, f64)> = Vec::new();
    for s in [Strategy::Rb6, Strategy::Sa3dRb6, Strategy::Rb6Sa2d] {
        cases.push((format!("fusion {s}"), fusion_gradient(s)));
    }

    let mut b = Baseline::new(BaselineConfig::new(4, 16, 16), 33)?;
    b.freeze();
    let m = MotionTransferModel::new(b, ModelConfig { strategy: Strategy::Rb6, k: 2 }, 34)?;
    let gp = m.generator.params.cast::<f64>();
    let x0: Vec<f64> = (0..4 * 256).map(|_| rng.random_range(-0.8..0.8)).collect();
    let wts = Tensor::<f64>::from_fn([1, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
    cases.push((
        "composer heads".into(),
        input_gradient(&x0, &[1, 4, 16, 16], 2, |t, x| {
            let out = m.generator.heads(&gp.bind_const(t), x, x.scale(0.5), None, None);
            (out.frame * t.constant(wts.clone())).sum() + out.mask.sqr().sum()
        }),
    ));

    let shape = [2, 3, 16, 16];
    let x0: Vec<f64> = (0..2 * 3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target = Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    cases.push(("L_MSE".into(), input_gradient(&x0, &shape, 3, |t, x| mse(x, t.constant(target.clone())))));
    let ex = PerceptualExtractor::random(PerceptualExtractor::DEFAULT_SEED);
    let exp = ex.params.cast::<f64>();
    cases.push(("L_VGG".into(), input_gradient(&x0, &shape, 3, |t, x| perceptual(&ex, &exp.bind_const(t), x, t.constant(target.clone())))));

    let d = SpatialDisc::new(&DiscConfig { widths: [4, 4, 4], temporal_ranges: vec![] }, 35)?;
    let dp = d.params.cast::<f64>();
    let pose = Tensor::<f64>::from_fn([2, NUM_KEYPOINTS, 16, 16], |_| rng.random_range(0.0..1.0));
    cases.push((
        "LSGAN spatial D".into(),
        input_gradient(&x0, &shape, 3, |t, x| objectives::spatial_d_loss(&d, &dp.bind_const(t), x, t.constant(target.clone()), t.constant(pose.clone()))),
    ));
    cases.push(("LSGAN spatial G".into(), input_gradient(&x0, &shape, 3, |t, x| objectives::spatial_g_loss(&d, &dp.bind_const(t), x, t.constant(pose.clone())))));
    let scores = [1, 1, 2, 2];
    let s0: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
    let real = Tensor::<f64>::from_fn(scores, |_| rng.random_range(-2.0..2.0));
    cases.push(("LSGAN D closed form".into(), input_gradient(&s0, &scores, 1, |t, x| lsgan_d(t.constant(real.clone()), x))));
    cases.push(("LSGAN G closed form".into(), input_gradient(&s0, &scores, 1, |_, x| lsgan_g(x))));

    let dv = TemporalDiscs::new(&DiscConfig { widths: [4, 4, 4], temporal_ranges: vec![3] }, 36)?;
    let dvp: Vec<_> = dv.discs.iter().map(|d| d.params.cast::<f64>()).collect();
    let clip_shape = [4, 3, 16, 16];
    let c0: Vec<f64> = (0..4 * 3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let flows: Vec<FlowField> = (0..3).map(|_| FlowField { displacement: noise(&mut rng, &[2, 16, 16], -2.0, 2.0) }).collect();
    let real_clip = Tensor::<f64>::from_fn(clip_shape, |_| rng.random_range(-1.0..1.0));
    cases.push((
        "LSGAN temporal D".into(),
        input_gradient(&c0, &clip_shape, 5, |t, x| {
            let binds: Vec<_> = dvp.iter().map(|s| s.bind_const(t)).collect();
            objectives::temporal_d_loss(&dv, &binds, t.constant(real_clip.clone()), x, &WindowFlows::new(t, &flows, &[3])).unwrap().loss.unwrap()
        }),
    ));
    cases.push((
        "LSGAN temporal G".into(),
        input_gradient(&c0, &clip_shape, 5, |t, x| {
            let binds: Vec<_> = dvp.iter().map(|s| s.bind_const(t)).collect();
            objectives::temporal_g_loss(&dv, &binds, x, &WindowFlows::new(t, &flows, &[3])).unwrap().loss.unwrap()
        }),
    ));
    cases.push(("generator total loss (params)".into(), generator_gradient()?));

    let worst = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail = cases.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Ok((worst < 1e-3 && cases.iter().all(|c| c.1.is_finite()), format!("max relative error {worst:.2e} [{detail}]")))
}

// ---------------------------------------------------------------- 5

fn window_law() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let ranges: Vec<usize> = (2..=16).collect();
    let ds = TemporalDiscs::new(&DiscConfig { widths: [1, 1, 1], temporal_ranges: ranges }, 42)?;
    let frames: Vec<Tensor<f32>> = (0..16).map(|_| noise(&mut rng, &[3, 8, 8], -1.0, 1.0)).collect();
    let flows = vec![FlowField::zeros(8, 8); 15];
    let mut bad = Vec::new();
    let mut pairs = 0;
    for l in 1..=16 {
        let tape = Tape::<f32>::new();
        let clip = tape.constant(Tensor::stack(&frames[..l].iter().collect::<Vec<_>>()));
        for n in 1..=l {
            pairs += 1;
            let stacked = window_frames(clip, n).shape()[0];
            let terms = if n >= 2 {
                objectives::loss_gan_temporal(&ds, &frames[..l], &frames[..l], &flows[..l - 1], &[n])?.2
            } else {
                stacked
            };
            if enumerate_windows(l, n).len() != l - n + 1 || stacked != l - n + 1 || terms != l - n + 1 {
                bad.push((l, n));
            }
        }
    }
    Ok((bad.is_empty(), format!("{pairs} (L, n) pairs checked, {} violations {bad:?}", bad.len())))
}

// ---------------------------------------------------------------- 6

/// Same-video PSNR and VFID of a checkpoint on the held-out tail of every clip.
fn held_out_scores(ckpt: &Path, data: &[VideoClip], out: &Path) -> anyhow::Result<(f64, f64)> {
    let report = evaluate(ckpt, data, EvalMode::SameVideo, &VideoFeatureExtractor::default(), out)?;
    Ok((report.psnr_mean.unwrap_or(f64::NAN), report.vfid.unwrap_or(f64::NAN)))
}

const C6_PRETRAIN: usize = 1500;
const C6_FULL: usize = 300;

fn multi_vs_single() -> Check {
    let root = scratch().join("c6");
    let data = generate_dataset(0, 2, 28, 64, 64)?;
    let cfg = TrainConfig {
        strategy: Strategy::Rb6,
        k: 4,
        l: 8,
        batch: 1,
        pretrain_batch: 2,
        channels: 8,
        disc_widths: [8, 16, 32],
        iters_pretrain: C6_PRETRAIN,
        iters_full: C6_FULL,
        checkpoint_every: 100,
        validate_every: 100,
        holdout: 8,
        ..TrainConfig::default()
    };
    let pre = pretrain_baseline(&cfg, &data, &TrainOptions::new(root.join("pre")))?;
    // the single-frame model gets the same number of extra iterations
    let cont = root.join("single");
    std::fs::create_dir_all(&cont)?;
    std::fs::copy(&pre.latest, cont.join("start.safetensors"))?;
    let opts = TrainOptions { resume: Some(cont.join("start.safetensors")), ..TrainOptions::new(&cont) };
    let single = pretrain_baseline(&TrainConfig { iters_pretrain: C6_PRETRAIN + C6_FULL, ..cfg.clone() }, &data, &opts)?;
    let full = train_full(&cfg, &data, &pre.latest, &TrainOptions::new(root.join("full")))?;

    let (ps, vs) = held_out_scores(&single.latest, &data, &root.join("eval_single"))?;
    let (pf, vf) = held_out_scores(&full.latest, &data, &root.join("eval_full"))?;
    Ok((
        pf - ps >= 1.0 && vf < vs,
        format!("PSNR full {pf:.2} dB vs single {ps:.2} dB (gain {:.2}, need >= 1); VFID full {vf:.4} vs single {vs:.4}; {C6_PRETRAIN} pretrain + {C6_FULL} matched iterations", pf - ps),
    ))
}

// ---------------------------------------------------------------- 7

/// A figure walking across most of the frame, so early and late frames
/// uncover each other's background.
fn crossing_clip(seed: u64, n: usize, size: usize) -> anyhow::Result<VideoClip> {
    let dir = if seed % 2 == 0 { 1.0 } else { -1.0 };
    let travel = size as f64 * 0.45;
    // random limbs can leave the frame at the ends of the traverse; redraw until they fit
    let mut clip = (0..100)
        .find_map(|j| {
            let mut spec = SceneSpec::random(seed * 1000 + j, n, size, size).ok()?;
            spec.motion.root_velocity = (dir * travel / (n - 1) as f64, 0.0);
            spec.motion.root_start.0 = size as f64 / 2.0 - dir * travel / 2.0;
            generate_clip(&spec).ok()
        })
        .ok_or_else(|| anyhow::anyhow!("no crossing clip fits for seed {seed}"))?;
    clip.clip_id = format!("x{seed}");
    Ok(clip)
}

/// Sum of absolute differences over the selected pixels, and their count over all channels.
fn masked_abs(a: &Tensor<f32>, b: &Tensor<f32>, sel: &[bool]) -> (f64, usize) {
    let plane = sel.len();
    let (mut acc, mut n) = (0.0f64, 0usize);
    for c in 0..3 {
        for (i, _) in sel.iter().enumerate().filter(|(_, &s)| s) {
            acc += (a.data()[c * plane + i] - b.data()[c * plane + i]).abs() as f64;
            n += 1;
        }
    }
    (acc, n)
}

const C7_CLIPS: u64 = 60;
const C7_PRETRAIN: usize = 12_000;
const C7_FULL: usize = 600;
const C7_EVAL_SEEDS: std::ops::RangeInclusive<u64> = 7..=12;

fn occlusion_recovery() -> Check {
    let (n, size) = (20, 32);
    let root = scratch().join("c7");
    let data = (0..C7_CLIPS).map(|i| crossing_clip(100 + i, n, size)).collect::<anyhow::Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        k: 2,
        l: 8,
        batch: 1,
        pretrain_batch: 2,
        channels: 8,
        disc_widths: [8, 16, 32],
        height: size,
        width: size,
        holdout: 4,
        lr: 5e-4,
        iters_pretrain: C7_PRETRAIN,
        iters_full: C7_FULL,
        checkpoint_every: 100_000,
        validate_every: 100_000,
        ..TrainConfig::default()
    };
    let pre = pretrain_baseline(&cfg, &data, &TrainOptions::new(root.join("pre")))?;
    let full = train_full(&cfg, &data, &pre.latest, &TrainOptions::new(root.join("full")))?;
    let model = load_full_model(&full.latest)?;
    let base = load_baseline(&pre.latest)?;

    // unseen clips: source 1 at the start, source 2 at the end, target in the middle;
    // [full patch, full open, baseline patch, baseline open] as (sum, count)
    let mut pool = [(0.0f64, 0usize); 4];
    for seed in C7_EVAL_SEEDS {
        let clip = crossing_clip(seed, n, size)?;
        let (s1, s2, t) = (0, n - 1, (n - 1) / 2);
        let region = |i: usize| figure_region(&clip.poses[i], &base.layout, size, size, base.config.hole_margin);
        let (r1, r2, rt) = (region(s1), region(s2), region(t));
        let occluder = &clip.gt_masks.as_ref().expect("synthetic clips carry masks")[s1];
        let plate = clip.background.as_ref().expect("synthetic clips carry a background plate");
        let px = size * size;
        let patch: Vec<bool> = (0..px).map(|i| occluder.data()[i] > 0.5 && r2.data()[i] == 0.0 && rt.data()[i] == 0.0).collect();
        let open: Vec<bool> = (0..px).map(|i| r1.data()[i] == 0.0 && r2.data()[i] == 0.0 && rt.data()[i] == 0.0).collect();

        let fo = model.transfer_frame(&[clip.frames[s1].clone(), clip.frames[s2].clone()], &[clip.poses[s1], clip.poses[s2]], &clip.poses[t])?;
        let bo = base.run(&clip.frames[s1], &clip.poses[s1], &clip.poses[t])?;
        for (slot, (bg, sel)) in pool.iter_mut().zip([(&fo.bg, &patch), (&fo.bg, &open), (&bo.bg, &patch), (&bo.bg, &open)]) {
            let (a, c) = masked_abs(bg, plate, sel);
            slot.0 += a;
            slot.1 += c;
        }
    }
    let [fp, fq, bp, bq] = pool.map(|(a, c)| a / c.max(1) as f64);
    let n_patch = pool[0].1 / 3;
    Ok((
        n_patch > 0 && fp < 2.0 * fq && bp >= 2.0 * bq,
        format!(
            "{n_patch} occluded px over {} clips; K=2 bg MAE patch {fp:.4} vs open {fq:.4} (ratio {:.2}, need < 2); K=1 patch {bp:.4} vs open {bq:.4} (ratio {:.2}, need >= 2)",
            C7_EVAL_SEEDS.count(),
            fp / fq,
            bp / bq
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn stats(mu: Vec<f64>, sigma: DMatrix<f64>) -> GaussianStats {
    GaussianStats { mu: DVector::from_vec(mu), sigma }
}

fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.05
}

/// `tr sqrt(A B)` by the Denman-Beavers iteration on the product.
fn denman_beavers_trace(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let mut y = a * b;
    let mut z = DMatrix::identity(y.nrows(), y.ncols());
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        y = (&y + zi) * 0.5;
        z = (&z + yi) * 0.5;
    }
    y.trace()
}

fn vfid_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut self_dist = 0.0f64;
    for _ in 0..20 {
        let s = stats((0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), random_psd(&mut rng, 4));
        self_dist = self_dist.max(vfid(&s, &s)?.abs());
    }
    let one_a = vfid(&stats(vec![0.0], DMatrix::from_element(1, 1, 1.0)), &stats(vec![1.0], DMatrix::from_element(1, 1, 1.0)))?;
    let one_b = vfid(&stats(vec![2.0], DMatrix::from_element(1, 1, 4.0)), &stats(vec![2.0], DMatrix::from_element(1, 1, 1.0)))?;
    let mut oracle = 0.0f64;
    for _ in 0..20 {
        let (sa, sb) = (random_psd(&mut rng, 4), random_psd(&mut rng, 4));
        let (ma, mb): (Vec<f64>, Vec<f64>) = ((0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), (0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let diff: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
        let want = diff + sa.trace() + sb.trace() - 2.0 * denman_beavers_trace(&sa, &sb);
        let got = vfid(&stats(ma, sa), &stats(mb, sb))?;
        oracle = oracle.max((got - want).abs());
    }
    Ok((
        self_dist < 1e-6 && one_a == 1.0 && one_b == 1.0 && oracle < 1e-5,
        format!("max vfid(A,A) {self_dist:.1e}; 1-D cases {one_a} and {one_b}; max |vfid - Denman-Beavers| {oracle:.1e} on 20 pairs"),
    ))
}

// ---------------------------------------------------------------- 9

fn determinism() -> Check {
    let (a, b) = (demo_run(1)?, demo_run(2)?);
    let mut worst = 0.0f64;
    let mut rows = 0;
    let mut aligned = true;
    for log in ["baseline/loss_log.csv", "full/loss_log.csv"] {
        let (x, y) = (read_loss_log(&a.join(log))?, read_loss_log(&b.join(log))?);
        aligned &= x.len() == y.len() && !x.is_empty();
        for (r, s) in x.iter().zip(&y) {
            aligned &= r.iter == s.iter;
            for (u, v) in r.values().iter().zip(s.values()) {
                worst = worst.max((u - v).abs());
            }
            rows += 1;
        }
    }
    let report = |d: &Path| -> anyhow::Result<serde_json::Value> {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval/report.json"))?)?;
        v.as_object_mut().unwrap().retain(|k, _| ["psnr_mean", "psnr_per_clip", "vfid", "checkpoint_id"].contains(&k.as_str()));
        Ok(v)
    };
    let (ra, rb) = (report(&a)?, report(&b)?);
    Ok((
        aligned && worst <= 1e-6 && ra == rb,
        format!("{rows} loss rows, max difference {worst:.1e}; report metrics identical: {}", ra == rb),
    ))
}

// ---------------------------------------------------------------- 10

fn background_substitution() -> Check {
    let demo = demo_run(1)?;
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(demo.join("data/manifest.json"))?)?;
    let ids: Vec<String> = manifest["clips"].as_array().unwrap().iter().map(|c| c["clip_id"].as_str().unwrap().to_string()).collect();
    let run = |bg: &str| -> anyhow::Result<ParamStore<f32>> {
        let out = scratch().join(format!("bgsub_{bg}"));
        vidfuse(&[
            "bg-substitute",
            "--force",
            "--checkpoint",
            demo.join("full").to_str().unwrap(),
            "--data",
            demo.join("data").to_str().unwrap(),
            "--source-clip",
            &ids[0],
            "--target-clip",
            &ids[1],
            "--background-clip",
            bg,
            "--dump-intermediates",
            "--out",
            out.to_str().unwrap(),
        ])?;
        tensors(&out.join("tensors.safetensors"))
    };
    let own = run(&ids[0])?;
    let other = run(&ids[1])?;
    let transfer = tensors(&demo.join("transfer/tensors.safetensors"))?;
    let (mut masks_same, mut degenerate, mut bg_differs, mut frames) = (true, true, false, 0);
    while own.find(&format!("frame.{frames:05}")).is_some() {
        let t = format!("{frames:05}");
        masks_same &= bits_equal(named(&own, &format!("mask.{t}"))?, named(&other, &format!("mask.{t}"))?);
        for part in ["frame", "fg", "bg", "mask"] {
            degenerate &= bits_equal(named(&own, &format!("{part}.{t}"))?, named(&transfer, &format!("{part}.{t}"))?);
        }
        bg_differs |= !bits_equal(named(&own, &format!("bg.{t}"))?, named(&other, &format!("bg.{t}"))?);
        frames += 1;
    }
    Ok((
        frames > 0 && masks_same && degenerate && bg_differs,
        format!("{frames} frames; masks identical across backgrounds: {masks_same}; self-substitution equals transfer: {degenerate}; backgrounds differ: {bg_differs}"),
    ))
}

// ----------------------------------------------------------------

fn main() {
    // `cargo test` passes harness flags; a name filter selects criteria by number.
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Option<u64>, fn() -> Check); 10] = [
        (1, "fusion oracle", Some(5), fusion_oracle),
        (2, "attention normalization", Some(30), attention_normalization),
        (3, "composition identities", None, composition_identities),
        (4, "gradient suite", Some(120), gradient_suite),
        (5, "window-count law", Some(1), window_law),
        (6, "multi-frame beats single-frame", Some(1800), multi_vs_single),
        (7, "occlusion recovery", None, occlusion_recovery),
        (8, "vfid correctness", None, vfid_checks),
        (9, "demo determinism", None, determinism),
        (10, "background substitution dataflow", None, background_substitution),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok((ok, detail)) => (ok, detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let in_time = limit.is_none_or(|s| took <= Duration::from_secs(s));
        let budget = limit.map_or(String::new(), |s| format!(" / {s} s"));
        let pass = ok && in_time;
        println!("criterion {id:>2} {name}: {} ({detail}; {:.1} s{budget})", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
        failed += usize::from(!pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
