//! Training losses: content (MSE, perceptual), least-squares adversarial
//! terms for both discriminator kinds, and the weighted generator total.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidfuse_tape::init::he_normal;
use vidfuse_tape::{Binding, Float, ParamStore, Tape, Tensor, Var};

use crate::adversaries::{enumerate_windows, window_flows, window_frames, SpatialDisc, TemporalDiscs};
use crate::error::{ensure_arg, Error, Result};
use crate::nn::Conv2d;
use crate::posekit::PoseHeatmap;
use crate::synthvid::FlowField;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_vgg: f64,
    pub lambda_gi: f64,
    pub lambda_gv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_vgg: 0.2, lambda_gi: 0.2, lambda_gv: 0.1 }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights { lambda_vgg: 0.0, lambda_gi: 0.0, lambda_gv: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_vgg", self.lambda_vgg), ("lambda_gi", self.lambda_gi), ("lambda_gv", self.lambda_gv)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite nonnegative weight, got {v}")));
            }
        }
        Ok(())
    }
}

/// `sum_t mean((o_t - i_t)^2)` over a batch `[L, ., H, W]`.
pub fn mse<'t, T: Float>(generated: Var<'t, T>, target: Var<'t, T>) -> Var<'t, T> {
    let l = generated.shape()[0] as f64;
    (generated - target).sqr().mean().scale(l)
}

fn check_sequences(generated: &[Tensor<f32>], target: &[Tensor<f32>]) -> Result<()> {
    ensure_arg!(generated.len() == target.len(), "{} generated frames but {} targets", generated.len(), target.len());
    ensure_arg!(!generated.is_empty(), "loss over an empty sequence");
    let shape = generated[0].shape();
    for f in generated.iter().chain(target) {
        ensure_arg!(f.shape() == shape, "frame shapes differ: {:?} vs {:?}", f.shape(), shape);
    }
    Ok(())
}

fn stacked<'t>(tape: &'t Tape<f32>, frames: &[Tensor<f32>]) -> Var<'t, f32> {
    tape.constant(Tensor::stack(&frames.iter().collect::<Vec<_>>()))
}

pub fn loss_mse(generated: &[Tensor<f32>], target: &[Tensor<f32>]) -> Result<f64> {
    check_sequences(generated, target)?;
    let tape = Tape::new();
    Ok(mse(stacked(&tape, generated), stacked(&tape, target)).item().as_f64())
}

/// Fixed four-level feature stack; levels sit at full, 1/2, 1/4 and 1/8 resolution.
pub struct PerceptualExtractor {
    pub params: ParamStore<f32>,
    pub convs: Vec<Conv2d>,
}

impl PerceptualExtractor {
    pub const WIDTHS: [usize; 4] = [16, 32, 64, 64];
    pub const DEFAULT_SEED: u64 = 0x5eed_f00d;

    /// Random He-initialized weights from a pinned seed.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &w) in Self::WIDTHS.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let weight = params.add(format!("{name}.weight"), he_normal(&mut rng, [w, cin, 3, 3], 1.0));
            let bias = params.add(format!("{name}.bias"), Tensor::zeros([w]));
            convs.push(Conv2d { weight, bias, stride: 1, pad: 1 });
            cin = w;
        }
        params.freeze();
        PerceptualExtractor { params, convs }
    }

    /// External weights with the same names and shapes as [`Self::random`].
    pub fn from_params(mut store: ParamStore<f32>) -> Result<Self> {
        let reference = Self::random(0);
        for (_, name, value) in reference.params.iter() {
            let id = store.find(name).ok_or_else(|| Error::Config(format!("perceptual weights lack {name}")))?;
            if store.get(id).shape() != value.shape() {
                return Err(Error::Config(format!("perceptual weight {name} has shape {:?}, expected {:?}", store.get(id).shape(), value.shape())));
            }
        }
        ensure_arg!(store.len() == reference.params.len(), "perceptual weights carry {} tensors, expected {}", store.len(), reference.params.len());
        store.freeze();
        let convs = reference
            .convs
            .iter()
            .map(|c| Conv2d { weight: store.find(reference.params.name(c.weight)).unwrap(), bias: store.find(reference.params.name(c.bias)).unwrap(), ..*c })
            .collect();
        Ok(PerceptualExtractor { params: store, convs })
    }

    /// Loads weights from a safetensors file.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_params(crate::checkpoint::load_params(path)?.0)
    }

    /// Level activations for `[B, 3, H, W]` frames.
    pub fn features<'t, T: Float>(&self, p: &Binding<'t, '_, T>, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let mut out = Vec::with_capacity(self.convs.len());
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            if i > 0 {
                h = h.avgpool2x();
            }
            h = c.forward(p, h).relu();
            out.push(h);
        }
        out
    }
}

/// `sum_t sum_levels mean|phi(o_t) - phi(i_t)|`.
pub fn perceptual<'t, T: Float>(extractor: &PerceptualExtractor, p: &Binding<'t, '_, T>, generated: Var<'t, T>, target: Var<'t, T>) -> Var<'t, T> {
    let l = generated.shape()[0] as f64;
    let a = extractor.features(p, generated);
    let b = extractor.features(p, target);
    let mut total = None;
    for (x, y) in a.into_iter().zip(b) {
        let term = (x - y).abs().mean();
        total = Some(match total {
            None => term,
            Some(t) => t + term,
        });
    }
    total.unwrap().scale(l)
}

pub fn loss_perceptual(generated: &[Tensor<f32>], target: &[Tensor<f32>], extractor: &PerceptualExtractor) -> Result<f64> {
    check_sequences(generated, target)?;
    let (_, h, w) = generated[0].dims3();
    ensure_arg!(h % 8 == 0 && w % 8 == 0, "perceptual loss needs a resolution divisible by 8, got {h}x{w}");
    let tape = Tape::new();
    let p = extractor.params.bind_const(&tape);
    Ok(perceptual(extractor, &p, stacked(&tape, generated), stacked(&tape, target)).item().as_f64())
}

/// Per-sample mean squared distance to `target`, summed over the batch.
fn lsq<'t, T: Float>(scores: Var<'t, T>, target: f64) -> Var<'t, T> {
    let b = scores.shape()[0] as f64;
    scores.add_scalar(-target).sqr().mean().scale(b)
}

/// Discriminator side: real toward 1, fake toward 0.
pub fn lsgan_d<'t, T: Float>(real: Var<'t, T>, fake: Var<'t, T>) -> Var<'t, T> {
    lsq(real, 1.0) + lsq(fake, 0.0)
}

/// Generator side: fake toward 1.
pub fn lsgan_g<'t, T: Float>(fake: Var<'t, T>) -> Var<'t, T> {
    lsq(fake, 1.0)
}

/// Spatial adversarial terms summed over the batch `[L, 3, H, W]`.
/// Read `fake` through [`Var::detach`] for the discriminator update.
pub fn spatial_d_loss<'t, T: Float>(d: &SpatialDisc, p: &Binding<'t, '_, T>, real: Var<'t, T>, fake: Var<'t, T>, pose: Var<'t, T>) -> Var<'t, T> {
    lsgan_d(d.forward(p, real, pose), d.forward(p, fake, pose))
}

pub fn spatial_g_loss<'t, T: Float>(d: &SpatialDisc, p: &Binding<'t, '_, T>, fake: Var<'t, T>, pose: Var<'t, T>) -> Var<'t, T> {
    lsgan_g(d.forward(p, fake, pose))
}

/// `(d_loss, g_loss)` for a single frame.
pub fn loss_gan_spatial(disc: &SpatialDisc, real: &Tensor<f32>, fake: &Tensor<f32>, pose: &PoseHeatmap) -> Result<(f64, f64)> {
    ensure_arg!(real.shape() == fake.shape(), "real {:?} and fake {:?} differ", real.shape(), fake.shape());
    let (_, h, w) = real.dims3();
    ensure_arg!(pose.channels.shape()[1..] == [h, w], "pose heatmap {:?} does not match {h}x{w}", pose.channels.shape());
    let tape = Tape::new();
    let p = disc.params.bind_const(&tape);
    let (r, f) = (tape.constant(real.clone().unsqueeze0()), tape.constant(fake.clone().unsqueeze0()));
    let pose = tape.constant(pose.channels.clone().unsqueeze0());
    Ok((spatial_d_loss(disc, &p, r, f, pose).item().as_f64(), spatial_g_loss(disc, &p, f, pose).item().as_f64()))
}

/// Temporal terms for one clip and their window count.
pub struct TemporalTerms<'t, T: Float> {
    pub loss: Option<Var<'t, T>>,
    pub windows: usize,
}

/// Flow-conditioned windows of the target clip, one batch per range.
pub struct WindowFlows<'t, T: Float> {
    pub per_range: Vec<(usize, Var<'t, T>)>,
}

impl<'t, T: Float> WindowFlows<'t, T> {
    /// Flow stacks for every range that fits in a clip of `flows.len() + 1` frames.
    pub fn new(tape: &'t Tape<T>, flows: &[FlowField], ranges: &[usize]) -> Self {
        let l = flows.len() + 1;
        let per_range = ranges.iter().filter(|&&n| n <= l).map(|&n| (n, tape.constant(window_flows(flows, n).cast::<T>()))).collect();
        WindowFlows { per_range }
    }
}

fn sum_terms<'t, T: Float>(terms: Vec<Var<'t, T>>) -> Option<Var<'t, T>> {
    terms.into_iter().reduce(|a, b| a + b)
}

/// `sum_n sum_t` discriminator terms; real and fake windows share the target flows.
pub fn temporal_d_loss<'t, T: Float>(
    ds: &TemporalDiscs,
    binds: &[Binding<'t, '_, T>],
    real: Var<'t, T>,
    fake: Var<'t, T>,
    flows: &WindowFlows<'t, T>,
) -> Result<TemporalTerms<'t, T>> {
    let mut terms = Vec::new();
    let mut windows = 0;
    for (n, fl) in &flows.per_range {
        let i = ds.discs.iter().position(|d| d.range_n == *n).ok_or_else(|| Error::Config(format!("no temporal discriminator for range {n}")))?;
        let d = &ds.discs[i];
        windows += enumerate_windows(real.shape()[0], *n).len();
        terms.push(lsgan_d(d.forward(&binds[i], window_frames(real, *n), *fl), d.forward(&binds[i], window_frames(fake, *n), *fl)));
    }
    Ok(TemporalTerms { loss: sum_terms(terms), windows })
}

pub fn temporal_g_loss<'t, T: Float>(ds: &TemporalDiscs, binds: &[Binding<'t, '_, T>], fake: Var<'t, T>, flows: &WindowFlows<'t, T>) -> Result<TemporalTerms<'t, T>> {
    let mut terms = Vec::new();
    let mut windows = 0;
    for (n, fl) in &flows.per_range {
        let i = ds.discs.iter().position(|d| d.range_n == *n).ok_or_else(|| Error::Config(format!("no temporal discriminator for range {n}")))?;
        windows += enumerate_windows(fake.shape()[0], *n).len();
        terms.push(lsgan_g(ds.discs[i].forward(&binds[i], window_frames(fake, *n), *fl)));
    }
    Ok(TemporalTerms { loss: sum_terms(terms), windows })
}

/// Temporal `(d_loss, g_loss, window terms)` for whole clips; `ranges` selects discriminators.
pub fn loss_gan_temporal(
    ds: &TemporalDiscs,
    real: &[Tensor<f32>],
    fake: &[Tensor<f32>],
    flows: &[FlowField],
    ranges: &[usize],
) -> Result<(f64, f64, usize)> {
    check_sequences(fake, real)?;
    ensure_arg!(flows.len() + 1 == real.len(), "{} flows for {} frames", flows.len(), real.len());
    for n in ranges {
        ds.get(*n)?;
    }
    let tape = Tape::new();
    let binds: Vec<_> = ds.discs.iter().map(|d| d.params.bind_const(&tape)).collect();
    let wf = WindowFlows::new(&tape, flows, ranges);
    let (r, f) = (stacked(&tape, real), stacked(&tape, fake));
    let d = temporal_d_loss(ds, &binds, r, f, &wf)?;
    let g = temporal_g_loss(ds, &binds, f, &wf)?;
    let value = |t: &TemporalTerms<'_, f32>| t.loss.map_or(0.0, |v| v.item().as_f64());
    Ok((value(&d), value(&g), d.windows))
}

/// Generator-side loss parts for one burst.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mse: f64,
    pub vgg: f64,
    pub gi: f64,
    pub gv: f64,
}

impl LossParts {
    fn check(&self) -> Result<()> {
        for (what, v) in [("l_mse", self.mse), ("l_vgg", self.vgg), ("l_gi", self.gi), ("l_gv", self.gv)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { what: format!("loss part {what} = {v}") });
            }
        }
        Ok(())
    }
}

/// `mse + lambda_vgg * vgg + lambda_gi * gi + lambda_gv * gv`.
pub fn total_generator_loss(parts: &LossParts, weights: &LossWeights) -> Result<f64> {
    parts.check()?;
    Ok(parts.mse + weights.lambda_vgg * parts.vgg + weights.lambda_gi * parts.gi + weights.lambda_gv * parts.gv)
}

/// Differentiable counterpart of [`total_generator_loss`]; missing parts count as zero.
pub fn total_generator_var<'t, T: Float>(
    mse: Var<'t, T>,
    vgg: Option<Var<'t, T>>,
    gi: Option<Var<'t, T>>,
    gv: Option<Var<'t, T>>,
    weights: &LossWeights,
) -> Result<(Var<'t, T>, LossParts)> {
    let val = |v: Option<Var<'t, T>>| v.map_or(0.0, |v| v.item().as_f64());
    let parts = LossParts { mse: mse.item().as_f64(), vgg: val(vgg), gi: val(gi), gv: val(gv) };
    parts.check()?;
    let mut total = mse;
    for (v, w) in [(vgg, weights.lambda_vgg), (gi, weights.lambda_gi), (gv, weights.lambda_gv)] {
        if let Some(v) = v {
            if w != 0.0 {
                total = total + v.scale(w);
            }
        }
    }
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversaries::DiscConfig;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};
    use rand::Rng;
    use vidfuse_tape::gradcheck::{central_difference_at, relative_error};

    fn frames(rng: &mut ChaCha8Rng, l: usize, h: usize) -> Vec<Tensor<f32>> {
        (0..l).map(|_| Tensor::from_fn([3, h, h], |_| rng.random_range(-1.0f32..1.0))).collect()
    }

    #[test]
    fn mse_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = frames(&mut rng, 2, 8);
        assert_eq!(loss_mse(&a, &a).unwrap(), 0.0);
        let b: Vec<_> = a.iter().map(|f| f.map(|v| v + 0.1)).collect();
        assert!((loss_mse(&b, &a).unwrap() - 0.02).abs() < 1e-6);
        assert_eq!(loss_mse(&a, &b).unwrap(), loss_mse(&b, &a).unwrap());
        assert!(matches!(loss_mse(&a, &b[..1]), Err(Error::Argument(_))));
    }

    #[test]
    fn perceptual_matches_scalar_reduction() {
        let ex = PerceptualExtractor::random(PerceptualExtractor::DEFAULT_SEED);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (frames(&mut rng, 1, 16), frames(&mut rng, 1, 16));
        assert_eq!(loss_perceptual(&a, &a, &ex).unwrap(), 0.0);
        let tape = Tape::new();
        let p = ex.params.bind_const(&tape);
        let fa = ex.features(&p, tape.constant(a[0].clone().unsqueeze0()));
        let fb = ex.features(&p, tape.constant(b[0].clone().unsqueeze0()));
        let mut want = 0.0f64;
        for (x, y) in fa.iter().zip(&fb) {
            let (x, y) = (x.value(), y.value());
            let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum();
            want += s / x.len() as f64;
        }
        let got = loss_perceptual(&a, &b, &ex).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert_eq!(fa.iter().map(|f| f.shape()[2]).collect::<Vec<_>>(), vec![16, 8, 4, 2]);
    }

    #[test]
    fn perceptual_is_positive_on_different_regions() {
        let ex = PerceptualExtractor::random(PerceptualExtractor::DEFAULT_SEED);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let a = frames(&mut rng, 1, 16);
            let mut b = a.clone();
            let (y0, x0) = (rng.random_range(0..12), rng.random_range(0..12));
            b[0] = Tensor::from_fn([3, 16, 16], |i| {
                let (y, x) = (i / 16 % 16, i % 16);
                let v = a[0].data()[i];
                if (y0..y0 + 4).contains(&y) && (x0..x0 + 4).contains(&x) { -v } else { v }
            });
            assert!(loss_perceptual(&b, &a, &ex).unwrap() > 0.0);
        }
    }

    #[test]
    fn extractor_loads_external_weights() {
        let ex = PerceptualExtractor::random(3);
        let copy = PerceptualExtractor::from_params(ex.params.clone()).unwrap();
        assert_eq!(copy.params.fingerprint(), ex.params.fingerprint());
        let mut short = ParamStore::new();
        short.add("conv1.weight", Tensor::<f32>::zeros([16, 3, 3, 3]));
        assert!(matches!(PerceptualExtractor::from_params(short), Err(Error::Config(_))));
    }

    /// A spatial discriminator whose head outputs a constant.
    fn constant_disc(value: f32) -> SpatialDisc {
        let mut d = SpatialDisc::new(&DiscConfig { widths: [2, 2, 2], temporal_ranges: vec![] }, 0).unwrap();
        let (w, b) = (d.trunk.head.weight, d.trunk.head.bias);
        let shape = d.params.get(w).shape().to_vec();
        d.params.set(w, Tensor::zeros(shape));
        d.params.set(b, Tensor::full([1], value));
        d
    }

    #[test]
    fn lsgan_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = frames(&mut rng, 2, 16);
        let pose = PoseHeatmap { channels: Tensor::zeros([crate::posekit::NUM_KEYPOINTS, 16, 16]), sigma: 1.0 };
        let (d, g) = loss_gan_spatial(&constant_disc(0.5), &f[0], &f[1], &pose).unwrap();
        assert!((d - 0.5).abs() < 1e-12 && (g - 0.25).abs() < 1e-12);
        let tape = Tape::<f64>::new();
        let ones = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let zeros = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        assert_eq!(lsgan_d(ones, zeros).item(), 0.0);
        assert_eq!(lsgan_g(ones).item(), 0.0);
    }

    #[test]
    fn temporal_window_terms() {
        let cfg = DiscConfig { widths: [2, 2, 2], temporal_ranges: vec![3, 5, 7] };
        let mut ds = TemporalDiscs::new(&cfg, 0).unwrap();
        for d in ds.discs.iter_mut() {
            let (w, b) = (d.trunk.head.weight, d.trunk.head.bias);
            let shape = d.params.get(w).shape().to_vec();
            d.params.set(w, Tensor::zeros(shape));
            d.params.set(b, Tensor::full([1], 0.5));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let real = frames(&mut rng, 8, 16);
        let flows = vec![FlowField::zeros(16, 16); 7];
        let (d, g, n) = loss_gan_temporal(&ds, &real, &real, &flows, &[3, 5, 7]).unwrap();
        assert_eq!(n, 12);
        assert!((d / n as f64 - 0.5).abs() < 1e-9);
        assert!((g / n as f64 - 0.25).abs() < 1e-9);
        assert_eq!(loss_gan_temporal(&ds, &real, &real, &flows, &[]).unwrap(), (0.0, 0.0, 0));
        assert!(matches!(loss_gan_temporal(&ds, &real, &real, &flows, &[4]), Err(Error::Config(_))));
        let short = &real[..4];
        assert_eq!(loss_gan_temporal(&ds, short, short, &flows[..3], &[3, 5, 7]).unwrap().2, 2);
    }

    #[test]
    fn total_loss_arithmetic() {
        let ones = LossParts { mse: 1.0, vgg: 1.0, gi: 1.0, gv: 1.0 };
        assert!((total_generator_loss(&ones, &LossWeights::default()).unwrap() - 1.5).abs() < 1e-12);
        let p = LossParts { mse: 0.3, vgg: 2.0, gi: 5.0, gv: 7.0 };
        assert_eq!(total_generator_loss(&p, &LossWeights::ZERO).unwrap(), 0.3);
        let bad = LossParts { vgg: f64::NAN, ..p };
        match total_generator_loss(&bad, &LossWeights::default()) {
            Err(Error::NonFinite { what }) => assert!(what.contains("l_vgg")),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn extractor_is_frozen() {
        let ex = PerceptualExtractor::random(PerceptualExtractor::DEFAULT_SEED);
        let tape = Tape::<f32>::new();
        assert!(!ex.params.bind(&tape).is_trainable());
    }

    fn check_grad(f: impl for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Var<'t, f64>, x0: &[f64], shape: &[usize]) -> f64 {
        let eval = |x: &[f64]| {
            let tape = Tape::new();
            let v = tape.variable(Tensor::new(shape.to_vec(), x.to_vec()));
            let l = f(&tape, v);
            let g = tape.backward(l);
            (l.item(), g.get(v).unwrap().data().to_vec())
        };
        let (_, analytic) = eval(x0);
        let coords: Vec<usize> = (0..x0.len()).step_by(5).collect();
        let numeric = central_difference_at(|x| eval(x).0, x0, &coords, 1e-5);
        relative_error(&coords.iter().map(|&i| analytic[i]).collect::<Vec<_>>(), &numeric)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = [2, 3, 16, 16];
        let x0: Vec<f64> = (0..2 * 3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let err = check_grad(|t, x| mse(x, t.constant(target.clone())), &x0, &shape);
        assert!(err < 1e-3, "mse {err}");

        let ex = PerceptualExtractor::random(PerceptualExtractor::DEFAULT_SEED);
        let exp = ex.params.cast::<f64>();
        let err = check_grad(|t, x| perceptual(&ex, &exp.bind_const(t), x, t.constant(target.clone())), &x0, &shape);
        assert!(err < 1e-3, "perceptual {err}");

        let d = SpatialDisc::new(&DiscConfig { widths: [4, 4, 4], temporal_ranges: vec![] }, 1).unwrap();
        let dp = d.params.cast::<f64>();
        let pose = Tensor::<f64>::from_fn([2, crate::posekit::NUM_KEYPOINTS, 16, 16], |_| rng.random_range(0.0..1.0));
        let err = check_grad(|t, x| spatial_g_loss(&d, &dp.bind_const(t), x, t.constant(pose.clone())), &x0, &shape);
        assert!(err < 1e-3, "spatial g {err}");
        let err = check_grad(|t, x| spatial_d_loss(&d, &dp.bind_const(t), x, t.constant(target.clone()), t.constant(pose.clone())), &x0, &shape);
        assert!(err < 1e-3, "spatial d {err}");
    }

    #[test]
    fn g_loss_gradient_is_nonzero() {
        let d = SpatialDisc::new(&DiscConfig { widths: [4, 4, 4], temporal_ranges: vec![] }, 2).unwrap();
        let tape = Tape::<f32>::new();
        let p = d.params.bind_const(&tape);
        let fake = tape.variable(Tensor::from_fn([1, 3, 16, 16], |i| (i as f32 * 0.1).sin()));
        let pose = tape.constant(Tensor::zeros([1, crate::posekit::NUM_KEYPOINTS, 16, 16]));
        let g = tape.backward(spatial_g_loss(&d, &p, fake, pose));
        assert!(g.get(fake).unwrap().data().iter().any(|v| v.abs() > 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn losses_are_nonnegative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (frames(&mut rng, 2, 8), frames(&mut rng, 2, 8));
            prop_assert!(loss_mse(&a, &b).unwrap() >= 0.0);
            let tape = Tape::<f64>::new();
            let s = |rng: &mut ChaCha8Rng| tape.constant(Tensor::from_fn([2, 1, 2, 2], |_| rng.random_range(-3.0..3.0)));
            let (r, f) = (s(&mut rng), s(&mut rng));
            prop_assert!(lsgan_d(r, f).item() >= 0.0 && lsgan_g(f).item() >= 0.0);
        }

        #[test]
        fn total_is_linear(m in 0.0f64..10.0, v in 0.0f64..10.0, i in 0.0f64..10.0, t in 0.0f64..10.0) {
            let w = LossWeights::default();
            let p = LossParts { mse: m, vgg: v, gi: i, gv: t };
            let d = LossParts { mse: 2.0 * m, vgg: 2.0 * v, gi: 2.0 * i, gv: 2.0 * t };
            let (a, b) = (total_generator_loss(&p, &w).unwrap(), total_generator_loss(&d, &w).unwrap());
            prop_assert!((b - 2.0 * a).abs() < 1e-9 * (1.0 + a));
        }
    }
}
