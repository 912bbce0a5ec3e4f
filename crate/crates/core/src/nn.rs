//! Small layer library over the tape: parameter handles plus generic forwards.

use rand::Rng;
use vidfuse_tape::init::he_normal;
use vidfuse_tape::{Binding, Float, ParamId, ParamStore, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

pub fn lrelu<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    x.leaky_relu(LEAKY_SLOPE)
}

/// He gain for a leaky ReLU with [`LEAKY_SLOPE`].
fn leaky_gain() -> f64 {
    (1.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Square `k x k` convolution with "same" padding, He-initialized.
    pub fn new(store: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let w = he_normal(rng, [cout, cin, k, k], leaky_gain());
        Self::with_weight(store, name, w, stride)
    }

    /// Weights scaled by `gain` relative to He initialization.
    pub fn scaled(store: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Self {
        let w = he_normal(rng, [cout, cin, k, k], leaky_gain() * gain);
        Self::with_weight(store, name, w, 1)
    }

    pub fn zeros(store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::with_weight(store, name, Tensor::zeros([cout, cin, k, k]), 1)
    }

    fn with_weight(store: &mut ParamStore<f32>, name: &str, w: Tensor<f32>, stride: usize) -> Self {
        let (cout, k) = (w.shape()[0], w.shape()[2]);
        Conv2d {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([cout])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(p.var(self.weight), Some(p.var(self.bias)), self.stride, self.pad)
    }

    pub fn out_channels(&self, store: &ParamStore<f32>) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Two 3x3 convolutions with a skip connection; the first convolution may
/// downsample, in which case the skip is a strided 1x1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride);
        // residual branch starts small so deep stacks begin near identity
        let conv2 = Conv2d::scaled(store, rng, &format!("{name}.conv2"), cout, cout, 3, 0.5);
        let skip = (cin != cout || stride != 1).then(|| Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, stride));
        ResBlock { conv1, conv2, skip }
    }

    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let h = self.conv2.forward(p, lrelu(self.conv1.forward(p, x)));
        let s = match &self.skip {
            Some(c) => c.forward(p, x),
            None => x,
        };
        lrelu(h + s)
    }
}

/// Encoder-decoder with `levels` 2x downsamplings and skip concatenations.
/// Widths are `c` at full resolution and `2c` below.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub stem: Conv2d,
    pub down: Vec<Conv2d>,
    pub up: Vec<Conv2d>,
    /// Final full-resolution convolution; its activations are the features.
    pub feature: Conv2d,
}

impl UNet {
    pub fn new(store: &mut ParamStore<f32>, rng: &mut impl Rng, name: &str, cin: usize, c: usize, levels: usize) -> Self {
        let width = |l: usize| if l == 0 { c } else { 2 * c };
        let stem = Conv2d::new(store, rng, &format!("{name}.stem"), cin, c, 3, 1);
        let down = (1..=levels)
            .map(|l| Conv2d::new(store, rng, &format!("{name}.down{l}"), width(l - 1), width(l), 3, 1))
            .collect();
        let up = (0..levels)
            .rev()
            .map(|l| Conv2d::new(store, rng, &format!("{name}.up{l}"), width(l + 1) + width(l), width(l), 3, 1))
            .collect();
        let feature = Conv2d::new(store, rng, &format!("{name}.feature"), c, c, 3, 1);
        UNet { stem, down, up, feature }
    }

    pub fn levels(&self) -> usize {
        self.down.len()
    }

    pub fn forward<'t, T: Float>(&self, p: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let mut skips = vec![lrelu(self.stem.forward(p, x))];
        for conv in &self.down {
            let prev = *skips.last().unwrap();
            skips.push(lrelu(conv.forward(p, prev.avgpool2x())));
        }
        let mut h = skips.pop().unwrap();
        for conv in &self.up {
            let skip = skips.pop().unwrap();
            h = lrelu(conv.forward(p, Var::concat(&[h.upsample2x(), skip], 1)));
        }
        lrelu(self.feature.forward(p, h))
    }
}

/// Copies every parameter of `src` whose name starts with `from` into the
/// parameter of `dst` with the prefix replaced by `to`.
pub fn copy_prefixed(src: &ParamStore<f32>, from: &str, dst: &mut ParamStore<f32>, to: &str) -> usize {
    let mut n = 0;
    for (_, name, value) in src.iter() {
        if let Some(rest) = name.strip_prefix(from) {
            let target = format!("{to}{rest}");
            let id = dst.find(&target).unwrap_or_else(|| panic!("no parameter {target} to copy into"));
            dst.set(id, value.clone());
            n += 1;
        }
    }
    n
}
