//! Forward and backward kernels on raw tensors. The tape composes these.

use crate::float::{gemm, MatRef};
use crate::tensor::{numel, split_axis};
use crate::{Float, Tensor};

// ---------------------------------------------------------------------------
// broadcasting

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// Strides of `shape` viewed as `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 && out[i + offset] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visit every element of `out_shape` with the matching offsets into two
/// strided operands. Adjacent axes are merged where both operands allow it.
fn for_each_pair(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(out_shape.len());
    for i in 0..out_shape.len() {
        if out_shape[i] == 1 {
            continue;
        }
        if let Some(last) = dims.last_mut() {
            let (size, la, lb) = *last;
            // merge previous (outer) axis `last` with this (inner) axis when contiguous
            if la == sa[i] * out_shape[i] && lb == sb[i] * out_shape[i] {
                *last = (size * out_shape[i], sa[i], sb[i]);
                continue;
            }
        }
        dims.push((out_shape[i], sa[i], sb[i]));
    }
    if dims.is_empty() {
        f(0, 0, 0);
        return;
    }
    let (inner, ia, ib) = *dims.last().unwrap();
    let outer_dims = &dims[..dims.len() - 1];
    let mut counter = vec![0usize; outer_dims.len()];
    let mut out_idx = 0;
    let (mut oa, mut ob) = (0usize, 0usize);
    loop {
        for j in 0..inner {
            f(out_idx, oa + j * ia, ob + j * ib);
            out_idx += 1;
        }
        // advance the outer counter
        let mut d = outer_dims.len();
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            counter[d] += 1;
            oa += outer_dims[d].1;
            ob += outer_dims[d].2;
            if counter[d] < outer_dims[d].0 {
                break;
            }
            oa -= outer_dims[d].1 * outer_dims[d].0;
            ob -= outer_dims[d].2 * outer_dims[d].0;
            counter[d] = 0;
        }
    }
}

pub fn binary<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_pair(&out_shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
    Tensor::new(out_shape, out)
}

/// Sum `g` down to `shape` (inverse of broadcasting).
pub fn reduce_to_shape<T: Float>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let sr = broadcast_strides(shape, g.shape());
    let zeros = vec![0; g.rank()];
    let mut out = vec![T::zero(); numel(shape)];
    let gd = g.data();
    for_each_pair(g.shape(), &sr, &zeros, |o, ir, _| out[ir] += gd[o]);
    Tensor::new(shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let (n, cin, h, wd) = match *x {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("conv2d input must be rank 4, got {x:?}"),
        };
        let (cout, wcin, kh, kw) = match *w {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => panic!("conv2d weight must be rank 4, got {w:?}"),
        };
        assert_eq!(cin, wcin, "conv2d channel mismatch: input {x:?}, weight {w:?}");
        assert!(stride >= 1, "conv2d stride must be positive");
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        ConvGeom { n, cin, h, w: wd, cout, kh, kw, stride, pad, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn is_same3x3(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1 && self.pad == 1
    }
}

/// Below this many input channels im2col beats the shifted-window GEMMs.
const SHIFT_MIN_CHANNELS: usize = 16;

/// Copies `c` planes of `h x w` into the interior of zero-bordered
/// `(h + 2) x (w + 2)` planes.
fn pad1<T: Float>(x: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let (hp, wp) = (h + 2, w + 2);
    for ch in 0..c {
        for y in 0..h {
            out[(ch * hp + y + 1) * wp + 1..][..w].copy_from_slice(&x[(ch * h + y) * w..][..w]);
        }
    }
}

/// 3x3 "same" convolution as nine accumulated GEMMs over shifted views of a
/// padded input. Outputs land on a grid of row length `w + 2`; the two
/// trailing columns of each row are discarded.
fn conv3x3_shifted<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[0];
    let (hp, wp) = (h + 2, wd + 2);
    let wide_len = (h - 1) * wp + wd;
    let mut xp = vec![T::zero(); cin * hp * wp];
    let mut wide = vec![T::zero(); cout * wide_len];
    let mut out = vec![T::zero(); n * cout * h * wd];
    for s in 0..n {
        pad1(&x.data()[s * cin * h * wd..(s + 1) * cin * h * wd], cin, h, wd, &mut xp);
        let mut beta = T::zero();
        if let Some(b) = b {
            for (co, &bv) in b.data().iter().enumerate() {
                wide[co * wide_len..(co + 1) * wide_len].fill(bv);
            }
            beta = T::one();
        }
        for ki in 0..3 {
            for kj in 0..3 {
                let a = MatRef { data: &w.data()[ki * 3 + kj..], rows: cout, cols: cin, rs: cin * 9, cs: 9 };
                let bm = MatRef { data: &xp[ki * wp + kj..], rows: cin, cols: wide_len, rs: hp * wp, cs: 1 };
                gemm(T::one(), a, bm, beta, &mut wide);
                beta = T::one();
            }
        }
        let os = &mut out[s * cout * h * wd..(s + 1) * cout * h * wd];
        for co in 0..cout {
            for y in 0..h {
                os[(co * h + y) * wd..][..wd].copy_from_slice(&wide[co * wide_len + y * wp..][..wd]);
            }
        }
    }
    Tensor::new([n, cout, h, wd], out)
}

/// Weight gradient of a 3x3 "same" convolution via shifted views.
fn conv3x3_shifted_dw<T: Float>(x: &Tensor<T>, dy: &Tensor<T>, cout: usize) -> Vec<T> {
    let (n, cin, h, wd) = x.dims4();
    let (hp, wp) = (h + 2, wd + 2);
    let wide_len = (h - 1) * wp + wd;
    let mut xp = vec![T::zero(); cin * hp * wp];
    let mut dyw = vec![T::zero(); cout * wide_len];
    let mut taps = vec![T::zero(); 9 * cout * cin];
    for s in 0..n {
        pad1(&x.data()[s * cin * h * wd..(s + 1) * cin * h * wd], cin, h, wd, &mut xp);
        let dys = &dy.data()[s * cout * h * wd..(s + 1) * cout * h * wd];
        // gradient on the wide grid, zero in the discarded columns
        for co in 0..cout {
            for y in 0..h {
                dyw[co * wide_len + y * wp..][..wd].copy_from_slice(&dys[(co * h + y) * wd..][..wd]);
            }
        }
        let a = MatRef::row_major(&dyw, cout, wide_len);
        for k in 0..9 {
            let (ki, kj) = (k / 3, k % 3);
            let bm = MatRef { data: &xp[ki * wp + kj..], rows: cin, cols: wide_len, rs: hp * wp, cs: 1 };
            gemm(T::one(), a, bm.t(), T::one(), &mut taps[k * cout * cin..(k + 1) * cout * cin]);
        }
    }
    let mut dw = vec![T::zero(); cout * cin * 9];
    for k in 0..9 {
        for co in 0..cout {
            for ci in 0..cin {
                dw[(co * cin + ci) * 9 + k] = taps[(k * cout + co) * cin + ci];
            }
        }
    }
    dw
}

/// `[cout, cin, 3, 3]` to the spatially flipped `[cin, cout, 3, 3]`.
fn flip_transpose3x3<T: Float>(w: &Tensor<T>) -> Tensor<T> {
    let (cout, cin) = (w.shape()[0], w.shape()[1]);
    Tensor::from_fn([cin, cout, 3, 3], |i| {
        let k = i % 9;
        let co = (i / 9) % cout;
        let ci = i / (9 * cout);
        w.data()[(co * cin + ci) * 9 + 8 - k]
    })
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + kj - pad < w
                        let lo = g.pad.saturating_sub(kj).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo).max(lo);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = lo + kj - g.pad;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let lo = g.pad.saturating_sub(kj).min(g.wo);
                        let hi = (g.w + g.pad).saturating_sub(kj).min(g.wo).max(lo);
                        if hi > lo {
                            let s0 = lo + kj - g.pad;
                            for (d, &v) in drow[s0..s0 + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            drow[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    if let Some(b) = b {
        assert_eq!(b.shape(), [g.cout], "conv2d bias shape");
    }
    if g.is_same3x3() && g.cin >= SHIFT_MIN_CHANNELS {
        return conv3x3_shifted(x, w, b);
    }
    let plane = g.ho * g.wo;
    let in_plane = g.cin * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); g.col_rows() * plane] };
    let wm = MatRef::row_major(w.data(), g.cout, g.col_rows());
    for n in 0..g.n {
        let xn = &x.data()[n * in_plane..(n + 1) * in_plane];
        let on = &mut out[n * g.cout * plane..(n + 1) * g.cout * plane];
        let beta = if let Some(b) = b {
            for (co, &bv) in b.data().iter().enumerate() {
                on[co * plane..(co + 1) * plane].fill(bv);
            }
            T::one()
        } else {
            T::zero()
        };
        let cm = if g.is_pointwise() {
            MatRef::row_major(xn, g.cin, plane)
        } else {
            im2col(xn, &g, &mut cols);
            MatRef::row_major(&cols, g.col_rows(), plane)
        };
        gemm(T::one(), wm, cm, beta, on);
    }
    Tensor::new([g.n, g.cout, g.ho, g.wo], out)
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
    let plane = g.ho * g.wo;
    let in_plane = g.cin * g.h * g.w;
    let rows = g.col_rows();
    let (mut need_dx, mut need_dw, need_db) = need;
    let mut shifted_dx = None;
    let mut shifted_dw = None;
    if g.is_same3x3() {
        if need_dx && g.cout >= SHIFT_MIN_CHANNELS {
            shifted_dx = Some(conv3x3_shifted(dy, &flip_transpose3x3(w), None));
            need_dx = false;
        }
        if need_dw && g.cin >= SHIFT_MIN_CHANNELS {
            shifted_dw = Some(Tensor::new(w.shape().to_vec(), conv3x3_shifted_dw(x, dy, g.cout)));
            need_dw = false;
        }
    }
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); w.len()]);
    let mut db = need_db.then(|| vec![T::zero(); g.cout]);
    let mut cols = if g.is_pointwise() || !need_dw { Vec::new() } else { vec![T::zero(); rows * plane] };
    let mut dcols = if need_dx && !g.is_pointwise() { vec![T::zero(); rows * plane] } else { Vec::new() };
    let wm = MatRef::row_major(w.data(), g.cout, rows);
    for n in 0..g.n {
        let dyn_ = &dy.data()[n * g.cout * plane..(n + 1) * g.cout * plane];
        let dym = MatRef::row_major(dyn_, g.cout, plane);
        if let Some(db) = db.as_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dyn_[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
            }
        }
        let xn = &x.data()[n * in_plane..(n + 1) * in_plane];
        if let Some(dw) = dw.as_mut() {
            let cm = if g.is_pointwise() {
                MatRef::row_major(xn, g.cin, plane)
            } else {
                im2col(xn, &g, &mut cols);
                MatRef::row_major(&cols, rows, plane)
            };
            // dW += dY * cols^T
            gemm(T::one(), dym, cm.t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_plane..(n + 1) * in_plane];
            if g.is_pointwise() {
                gemm(T::one(), wm.t(), dym, T::one(), dxn);
            } else {
                gemm(T::one(), wm.t(), dym, T::zero(), &mut dcols);
                col2im(&dcols, &g, dxn);
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).or(shifted_dx),
        dw: dw.map(|d| Tensor::new(w.shape().to_vec(), d)).or(shifted_dw),
        db: db.map(|d| Tensor::new([g.cout], d)),
    }
}

// ---------------------------------------------------------------------------
// resampling

pub fn upsample2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xo in 0..wo {
                dst[y * wo + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub fn upsample2x_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    let (n, c, ho, wo) = dy.dims4();
    let (h, w) = (ho / 2, wo / 2);
    let mut out = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let src = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                dst[(y / 2) * w + xo / 2] += src[y * wo + xo];
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

pub fn avgpool2x<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2x needs even spatial dims, got {h}x{w}");
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for xo in 0..wo {
                let i = 2 * y * w + 2 * xo;
                dst[y * wo + xo] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub fn avgpool2x_backward<T: Float>(dy: &Tensor<T>) -> Tensor<T> {
    upsample2x(dy).map(|v| v * T::of(0.25))
}

/// Precomputed bilinear taps: for each sampled point, four (plane index, weight)
/// pairs; out-of-range neighbours are dropped (they read as zero).
#[derive(Clone, Debug)]
pub struct BilinearTaps<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    taps: Vec<[(u32, T); 4]>,
}

const NO_TAP: u32 = u32::MAX;

impl<T: Float> BilinearTaps<T> {
    /// `coords[(n * ho + y) * wo + x]` is the `(x, y)` input location read by
    /// output pixel `(y, x)` of sample `n`.
    pub fn new(n: usize, h: usize, w: usize, ho: usize, wo: usize, coords: &[(T, T)]) -> Self {
        assert_eq!(coords.len(), n * ho * wo, "bilinear coordinate count");
        let taps = coords
            .iter()
            .map(|&(sx, sy)| {
                let mut t = [(NO_TAP, T::zero()); 4];
                if !(sx.is_finite() && sy.is_finite()) {
                    return t;
                }
                let x0 = sx.floor();
                let y0 = sy.floor();
                let fx = sx - x0;
                let fy = sy - y0;
                let (x0, y0) = (x0.as_f64() as i64, y0.as_f64() as i64);
                let corners = [
                    (x0, y0, (T::one() - fx) * (T::one() - fy)),
                    (x0 + 1, y0, fx * (T::one() - fy)),
                    (x0, y0 + 1, (T::one() - fx) * fy),
                    (x0 + 1, y0 + 1, fx * fy),
                ];
                for (slot, &(cx, cy, wgt)) in t.iter_mut().zip(&corners) {
                    if cx >= 0 && cy >= 0 && (cx as usize) < w && (cy as usize) < h && wgt != T::zero() {
                        *slot = ((cy as usize * w + cx as usize) as u32, wgt);
                    }
                }
                t
            })
            .collect();
        BilinearTaps { n, h, w, ho, wo, taps }
    }

    /// Taps for the concatenation of the parts' batches.
    pub fn concat(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty(), "concat of zero tap sets");
        let p0 = parts[0];
        let mut taps = Vec::with_capacity(parts.iter().map(|p| p.taps.len()).sum());
        for p in parts {
            assert_eq!((p.h, p.w, p.ho, p.wo), (p0.h, p0.w, p0.ho, p0.wo), "tap sets for different shapes");
            taps.extend_from_slice(&p.taps);
        }
        BilinearTaps { n: parts.iter().map(|p| p.n).sum(), h: p0.h, w: p0.w, ho: p0.ho, wo: p0.wo, taps }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = x.dims4();
        assert_eq!((n, h, w), (self.n, self.h, self.w), "bilinear taps built for another shape");
        let (pin, pout) = (h * w, self.ho * self.wo);
        let mut out = vec![T::zero(); n * c * pout];
        for s in 0..n {
            let taps = &self.taps[s * pout..(s + 1) * pout];
            for ch in 0..c {
                let src = &x.data()[(s * c + ch) * pin..(s * c + ch + 1) * pin];
                let dst = &mut out[(s * c + ch) * pout..(s * c + ch + 1) * pout];
                for (d, tp) in dst.iter_mut().zip(taps) {
                    let mut acc = T::zero();
                    for &(i, wgt) in tp {
                        if i != NO_TAP {
                            acc += src[i as usize] * wgt;
                        }
                    }
                    *d = acc;
                }
            }
        }
        Tensor::new([n, c, self.ho, self.wo], out)
    }

    pub fn apply_backward(&self, dy: &Tensor<T>) -> Tensor<T> {
        let (n, c, _, _) = dy.dims4();
        let (pin, pout) = (self.h * self.w, self.ho * self.wo);
        let mut dx = vec![T::zero(); n * c * pin];
        for s in 0..n {
            let taps = &self.taps[s * pout..(s + 1) * pout];
            for ch in 0..c {
                let src = &dy.data()[(s * c + ch) * pout..(s * c + ch + 1) * pout];
                let dst = &mut dx[(s * c + ch) * pin..(s * c + ch + 1) * pin];
                for (&g, tp) in src.iter().zip(taps) {
                    for &(i, wgt) in tp {
                        if i != NO_TAP {
                            dst[i as usize] += g * wgt;
                        }
                    }
                }
            }
        }
        Tensor::new([n, c, self.h, self.w], dx)
    }
}

// ---------------------------------------------------------------------------
// reductions along an axis

pub fn sum_axis<T: Float>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..dim {
            let src = &x.data()[(o * dim + k) * inner..(o * dim + k + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}

/// Broadcast a keep-dim reduction gradient back along `axis`.
pub fn expand_axis<T: Float>(g: &Tensor<T>, axis: usize, dim: usize) -> Tensor<T> {
    let (outer, one, inner) = split_axis(g.shape(), axis);
    assert_eq!(one, 1, "expand_axis expects a size-1 axis");
    let mut out = Vec::with_capacity(outer * dim * inner);
    for o in 0..outer {
        let src = &g.data()[o * inner..(o + 1) * inner];
        for _ in 0..dim {
            out.extend_from_slice(src);
        }
    }
    let mut shape = g.shape().to_vec();
    shape[axis] = dim;
    Tensor::new(shape, out)
}

pub fn max_axis<T: Float>(x: &Tensor<T>, axis: usize) -> (Tensor<T>, Vec<u32>) {
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let mut out = vec![T::neg_infinity(); outer * inner];
    let mut arg = vec![0u32; outer * inner];
    for o in 0..outer {
        for k in 0..dim {
            let src = &x.data()[(o * dim + k) * inner..(o * dim + k + 1) * inner];
            for (i, &s) in src.iter().enumerate() {
                if s > out[o * inner + i] {
                    out[o * inner + i] = s;
                    arg[o * inner + i] = k as u32;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    (Tensor::new(shape, out), arg)
}

pub fn max_axis_backward<T: Float>(g: &Tensor<T>, arg: &[u32], in_shape: &[usize], axis: usize) -> Tensor<T> {
    let (outer, dim, inner) = split_axis(in_shape, axis);
    let mut dx = vec![T::zero(); outer * dim * inner];
    for o in 0..outer {
        for i in 0..inner {
            let k = arg[o * inner + i] as usize;
            dx[(o * dim + k) * inner + i] = g.data()[o * inner + i];
        }
    }
    Tensor::new(in_shape.to_vec(), dx)
}

pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * dim + k) * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..dim {
                m = m.max(xd[idx(k)]);
            }
            let mut s = T::zero();
            for k in 0..dim {
                let e = (xd[idx(k)] - m).exp();
                out[idx(k)] = e;
                s += e;
            }
            for k in 0..dim {
                out[idx(k)] /= s;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn softmax_backward<T: Float>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, dim, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), dy.data());
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * dim + k) * inner + i;
            let mut dot = T::zero();
            for k in 0..dim {
                dot += yd[idx(k)] * gd[idx(k)];
            }
            for k in 0..dim {
                dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), dx)
}

// ---------------------------------------------------------------------------
// layout

pub fn permute<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let rank = x.rank();
    assert_eq!(perm.len(), rank, "permutation rank");
    let mut seen = vec![false; rank];
    for &p in perm {
        assert!(p < rank && !seen[p], "invalid permutation {perm:?}");
        seen[p] = true;
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    let mut out = vec![T::zero(); x.len()];
    let xd = x.data();
    for_each_pair(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = xd[i]);
    Tensor::new(out_shape, out)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// batched matmul

/// Batched `op(a) * op(b)` over rank-3 tensors, where `op` optionally
/// transposes the trailing two axes.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    let (ba, ar, ac) = rank3(a);
    let (bb, br, bc) = rank3(b);
    assert_eq!(ba, bb, "matmul batch mismatch");
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul inner mismatch: {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![T::zero(); ba * m * n];
    for i in 0..ba {
        let am = MatRef::row_major(&a.data()[i * ar * ac..(i + 1) * ar * ac], ar, ac);
        let bm = MatRef::row_major(&b.data()[i * br * bc..(i + 1) * br * bc], br, bc);
        let am = if ta { am.t() } else { am };
        let bm = if tb { bm.t() } else { bm };
        gemm(T::one(), am, bm, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
    }
    Tensor::new([ba, m, n], out)
}

fn rank3<T: Float>(t: &Tensor<T>) -> (usize, usize, usize) {
    match t.shape()[..] {
        [b, r, c] => (b, r, c),
        _ => panic!("matmul expects rank-3 tensors, got {:?}", t.shape()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let g = ConvGeom::new(x.shape(), w.shape(), stride, pad);
        Tensor::from_fn([g.n, g.cout, g.ho, g.wo], |idx| {
            let ox = idx % g.wo;
            let oy = (idx / g.wo) % g.ho;
            let co = (idx / (g.wo * g.ho)) % g.cout;
            let n = idx / (g.wo * g.ho * g.cout);
            let mut acc = 0.0;
            for ci in 0..g.cin {
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            acc += x.data()[((n * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize]
                                * w.data()[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::from_fn([2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        let w = Tensor::from_fn([4, 3, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
        for &(s, p) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let got = conv2d_forward(&x, &w, None, s, p);
            let want = naive_conv(&x, &w, s, p);
            assert!(got.max_abs_diff(&want) < 1e-12, "stride {s} pad {p}");
        }
    }

    #[test]
    fn shifted_conv_paths_match_im2col() {
        // wide enough channel counts to take the shifted-window paths
        let x = Tensor::from_fn([2, 17, 6, 5], |i| ((i * 37 % 11) as f64 - 5.0) * 0.1);
        let w = Tensor::from_fn([18, 17, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) * 0.2);
        let b = Tensor::from_fn([18], |i| i as f64 * 0.1);
        let got = conv2d_forward(&x, &w, Some(&b), 1, 1);
        let mut want = naive_conv(&x, &w, 1, 1);
        for (i, v) in want.data_mut().iter_mut().enumerate() {
            *v += b.data()[(i / 30) % 18];
        }
        assert!(got.max_abs_diff(&want) < 1e-12);

        // adjoint checks: <dy, conv(x)> is linear in x and in w
        let dy = Tensor::from_fn([2, 18, 6, 5], |i| ((i * 29 % 13) as f64 - 6.0) * 0.05);
        let grads = conv2d_backward(&x, &w, &dy, 1, 1, (true, true, false));
        let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
        let y = naive_conv(&x, &w, 1, 1);
        let dx = grads.dx.unwrap();
        let dw = grads.dw.unwrap();
        assert!((dot(&dx, &x) - dot(&dy, &y)).abs() < 1e-9);
        assert!((dot(&dw, &w) - dot(&dy, &y)).abs() < 1e-9);
        // and agree elementwise with a finite difference probe
        let mut xp = x.clone();
        xp.data_mut()[40] += 1e-6;
        let fd = (dot(&dy, &naive_conv(&xp, &w, 1, 1)) - dot(&dy, &y)) / 1e-6;
        assert!((fd - dx.data()[40]).abs() < 1e-6);
        let mut wp = w.clone();
        wp.data_mut()[100] += 1e-6;
        let fd = (dot(&dy, &naive_conv(&x, &wp, 1, 1)) - dot(&dy, &y)) / 1e-6;
        assert!((fd - dw.data()[100]).abs() < 1e-6);
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let a = Tensor::from_fn([2, 3, 1, 4], |i| i as f64);
        let b = Tensor::from_fn([3, 5, 1], |i| i as f64 * 0.5);
        let c = binary(&a, &b, |x, y| x + y);
        assert_eq!(c.shape(), &[2, 3, 5, 4]);
        assert_eq!(c.data()[((1 * 3 + 2) * 5 + 4) * 4 + 3], a.data()[(1 * 3 + 2) * 4 + 3] + b.data()[2 * 5 + 4]);
        let r = reduce_to_shape(&Tensor::<f64>::ones(c.shape().to_vec()), b.shape());
        assert!(r.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::from_fn([2, 3, 4], |i| i as f32);
        let p = permute(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[(3 * 2 + 1) * 3 + 2], x.data()[(1 * 3 + 2) * 4 + 3]);
        assert_eq!(permute(&p, &inverse_permutation(&[2, 0, 1])), x);
    }
}
