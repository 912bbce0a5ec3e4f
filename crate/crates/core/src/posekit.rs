//! Pose representation, keypoint heatmaps and per-part affine geometry.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vidfuse_tape::{BilinearTaps, Float, Tensor, Var};

use crate::error::{ensure_arg, Error, Result};

/// Number of keypoints per pose.
pub const NUM_KEYPOINTS: usize = 14;

/// Keypoint order shared by poses, heatmaps and the figure generator.
pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "head",
    "neck",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_hip",
    "l_knee",
    "l_ankle",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f32, y: f32) -> Self {
        Keypoint { x, y, visible: true }
    }

    pub fn hidden() -> Self {
        Keypoint { x: 0.0, y: 0.0, visible: false }
    }
}

/// Keypoints in pixel coordinates; pixel `(col, row)` has its center at
/// `(x, y) = (col, row)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
}

impl Pose {
    pub fn new(keypoints: [Keypoint; NUM_KEYPOINTS]) -> Self {
        Pose { keypoints }
    }

    pub fn from_points(points: &[(f32, f32); NUM_KEYPOINTS]) -> Self {
        let mut keypoints = [Keypoint::hidden(); NUM_KEYPOINTS];
        for (k, &(x, y)) in keypoints.iter_mut().zip(points) {
            *k = Keypoint::new(x, y);
        }
        Pose { keypoints }
    }

    /// Visible keypoints must lie inside `[0, w) x [0, h)`.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        for (i, k) in self.keypoints.iter().enumerate() {
            if !k.visible {
                continue;
            }
            ensure_arg!(
                k.x.is_finite() && k.y.is_finite() && k.x >= 0.0 && k.y >= 0.0 && k.x < w as f32 && k.y < h as f32,
                "keypoint {} ({}) at ({}, {}) outside {}x{} frame",
                i,
                KEYPOINT_NAMES[i],
                k.x,
                k.y,
                w,
                h
            );
        }
        Ok(())
    }

    pub fn translated(&self, dx: f32, dy: f32) -> Pose {
        let mut out = *self;
        for k in out.keypoints.iter_mut() {
            k.x += dx;
            k.y += dy;
        }
        out
    }
}

/// `[14, H, W]` Gaussian keypoint rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseHeatmap {
    pub channels: Tensor<f32>,
    pub sigma: f32,
}

/// Default heatmap width at 64x64; scaled with resolution by callers.
pub const DEFAULT_SIGMA: f32 = 3.0;

/// Heatmap sigma for a frame height, keeping the 64x64 ratio.
pub fn sigma_for(h: usize) -> f32 {
    DEFAULT_SIGMA * h as f32 / 64.0
}

pub fn render_heatmap(pose: &Pose, h: usize, w: usize, sigma: f32) -> Result<PoseHeatmap> {
    ensure_arg!(sigma.is_finite() && sigma > 0.0, "heatmap sigma must be positive, got {sigma}");
    let mut data = vec![0f32; NUM_KEYPOINTS * h * w];
    let inv = 1.0 / (2.0 * sigma as f64 * sigma as f64);
    for (k, kp) in pose.keypoints.iter().enumerate() {
        if !kp.visible {
            continue;
        }
        let plane = &mut data[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            let dy = y as f64 - kp.y as f64;
            for x in 0..w {
                let dx = x as f64 - kp.x as f64;
                plane[y * w + x] = (-(dx * dx + dy * dy) * inv).exp() as f32;
            }
        }
    }
    Ok(PoseHeatmap { channels: Tensor::new([NUM_KEYPOINTS, h, w], data), sigma })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPart {
    pub name: String,
    pub keypoints: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPartLayout {
    pub parts: Vec<BodyPart>,
}

impl Default for BodyPartLayout {
    /// Head, torso, four arm segments and four leg segments.
    fn default() -> Self {
        let spec: [(&str, &[usize]); 10] = [
            ("head", &[0, 1]),
            ("torso", &[1, 2, 5, 8, 11]),
            ("r_upper_arm", &[2, 3]),
            ("r_lower_arm", &[3, 4]),
            ("l_upper_arm", &[5, 6]),
            ("l_lower_arm", &[6, 7]),
            ("r_thigh", &[8, 9]),
            ("r_shin", &[9, 10]),
            ("l_thigh", &[11, 12]),
            ("l_shin", &[12, 13]),
        ];
        BodyPartLayout {
            parts: spec
                .iter()
                .map(|(n, k)| BodyPart { name: n.to_string(), keypoints: k.to_vec() })
                .collect(),
        }
    }
}

impl BodyPartLayout {
    pub fn validate(&self) -> Result<()> {
        for p in &self.parts {
            ensure_arg!(p.keypoints.len() >= 2, "part {} has fewer than 2 keypoints", p.name);
            ensure_arg!(
                p.keypoints.iter().all(|&k| k < NUM_KEYPOINTS),
                "part {} references a keypoint index >= {}",
                p.name,
                NUM_KEYPOINTS
            );
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn part(&self, name: &str) -> Result<&BodyPart> {
        self.parts
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Argument(format!("unknown body part `{name}`")))
    }
}

/// 2x3 affine map `p -> M [p; 1]` in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn translation(dx: f64, dy: f64) -> Self {
        Affine([[1.0, 0.0, dx], [0.0, 1.0, dy]])
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    /// Inverse map; `None` when the linear part is singular.
    pub fn inverse(&self) -> Option<Affine> {
        let d = self.det();
        if !d.is_finite() || d.abs() < 1e-12 {
            return None;
        }
        let [[a, b, tx], [c, e, ty]] = self.0;
        let (ia, ib, ic, ie) = (e / d, -b / d, -c / d, a / d);
        Some(Affine([[ia, ib, -(ia * tx + ib * ty)], [ic, ie, -(ic * tx + ie * ty)]]))
    }

    /// Sum of squared residuals mapping `src` points onto `dst` points.
    pub fn residual(&self, src: &[(f64, f64)], dst: &[(f64, f64)]) -> f64 {
        src.iter()
            .zip(dst)
            .map(|(&(x, y), &(u, v))| {
                let (px, py) = self.apply(x, y);
                (px - u).powi(2) + (py - v).powi(2)
            })
            .sum()
    }
}

/// An estimated part transform; `similarity_fallback` is set when the part's
/// keypoints could not support a full affine fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartAffine {
    pub matrix: Affine,
    pub similarity_fallback: bool,
}

/// Least-squares affine taking `part`'s source keypoints onto its destination
/// keypoints. Two-point parts (and collinear configurations) get a
/// similarity transform.
pub fn estimate_part_affine(src: &Pose, dst: &Pose, part: &str, layout: &BodyPartLayout) -> Result<PartAffine> {
    let part = layout.part(part)?;
    let (a, b): (Vec<_>, Vec<_>) = part
        .keypoints
        .iter()
        .filter(|&&k| src.keypoints[k].visible && dst.keypoints[k].visible)
        .map(|&k| {
            let (s, d) = (src.keypoints[k], dst.keypoints[k]);
            ((s.x as f64, s.y as f64), (d.x as f64, d.y as f64))
        })
        .unzip();
    if a.len() < 2 {
        return Err(Error::DegeneratePart {
            part: part.name.clone(),
            reason: format!("{} keypoints visible in both poses, need at least 2", a.len()),
        });
    }
    if a.len() >= 3 {
        if let Some(m) = least_squares_affine(&a, &b) {
            return Ok(PartAffine { matrix: m, similarity_fallback: false });
        }
    }
    let matrix = least_squares_similarity(&a, &b).ok_or_else(|| Error::DegeneratePart {
        part: part.name.clone(),
        reason: "source keypoints coincide".into(),
    })?;
    Ok(PartAffine { matrix, similarity_fallback: a.len() >= 3 })
}

fn centroid(p: &[(f64, f64)]) -> (f64, f64) {
    let n = p.len() as f64;
    let (sx, sy) = p.iter().fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x, ay + y));
    (sx / n, sy / n)
}

/// Full affine fit, or `None` when the source points are (near) collinear.
fn least_squares_affine(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Affine> {
    // Center to condition the normal equations.
    let (cx, cy) = centroid(src);
    let (du, dv) = centroid(dst);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let (mut xu, mut yu, mut xv, mut yv) = (0.0, 0.0, 0.0, 0.0);
    for (&(x, y), &(u, v)) in src.iter().zip(dst) {
        let (x, y, u, v) = (x - cx, y - cy, u - du, v - dv);
        sxx += x * x;
        sxy += x * y;
        syy += y * y;
        xu += x * u;
        yu += y * u;
        xv += x * v;
        yv += y * v;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = (sxx + syy).max(1e-12);
    // smallest/largest eigenvalue ratio of the scatter matrix ~ det / trace^2
    if det / (scale * scale) < 1e-6 {
        return None;
    }
    let solve = |bx: f64, by: f64| ((syy * bx - sxy * by) / det, (sxx * by - sxy * bx) / det);
    let (a, b) = solve(xu, yu);
    let (c, d) = solve(xv, yv);
    Some(Affine([[a, b, du - a * cx - b * cy], [c, d, dv - c * cx - d * cy]]))
}

/// Rotation + uniform scale + translation least-squares fit.
fn least_squares_similarity(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Option<Affine> {
    let (cx, cy) = centroid(src);
    let (du, dv) = centroid(dst);
    let (mut re, mut im, mut norm) = (0.0, 0.0, 0.0);
    for (&(x, y), &(u, v)) in src.iter().zip(dst) {
        let (x, y, u, v) = (x - cx, y - cy, u - du, v - dv);
        // conj(x + iy) * (u + iv)
        re += x * u + y * v;
        im += x * v - y * u;
        norm += x * x + y * y;
    }
    if norm < 1e-12 {
        return None;
    }
    let (a, b) = (re / norm, im / norm);
    Some(Affine([[a, -b, du - a * cx + b * cy], [b, a, dv - b * cx - a * cy]]))
}

/// Sampling taps for warping `n` planes of `h x w` by per-sample affines:
/// output pixel `p` reads input location `A^-1 p`.
pub fn affine_taps<T: Float>(affines: &[Affine], h: usize, w: usize) -> BilinearTaps<T> {
    let mut coords = Vec::with_capacity(affines.len() * h * w);
    for a in affines {
        match a.inverse() {
            Some(inv) if a.is_finite() => {
                for y in 0..h {
                    for x in 0..w {
                        let (sx, sy) = inv.apply(x as f64, y as f64);
                        coords.push((T::of(sx), T::of(sy)));
                    }
                }
            }
            _ => coords.extend(std::iter::repeat_n((T::nan(), T::nan()), h * w)),
        }
    }
    BilinearTaps::new(affines.len(), h, w, h, w, &coords)
}

/// Bilinear inverse warp of a `[C, H, W]` feature map; out-of-range samples
/// read as zero.
pub fn warp_by_affine(feature: &Tensor<f32>, affine: &Affine) -> Tensor<f32> {
    let (c, h, w) = feature.dims3();
    let taps = affine_taps::<f32>(&[*affine], h, w);
    taps.apply(&feature.clone().reshape([1, c, h, w])).reshape([c, h, w])
}

/// Differentiable warp of `[N, C, H, W]` with one affine per sample.
pub fn warp_by_affine_var<'t, T: Float>(x: Var<'t, T>, affines: &[Affine]) -> Var<'t, T> {
    let shape = x.shape();
    assert_eq!(shape[0], affines.len(), "one affine per batch sample");
    x.sample(Arc::new(affine_taps(affines, shape[2], shape[3])))
}

/// Distance from `(x, y)` to the convex hull of `pts` (zero inside).
fn hull_distance(hull: &[(f64, f64)], x: f64, y: f64) -> f64 {
    let seg = |a: (f64, f64), b: (f64, f64)| {
        let (vx, vy) = (b.0 - a.0, b.1 - a.1);
        let len2 = vx * vx + vy * vy;
        let t = if len2 > 0.0 { (((x - a.0) * vx + (y - a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        ((x - a.0 - t * vx).powi(2) + (y - a.1 - t * vy).powi(2)).sqrt()
    };
    match hull.len() {
        0 => f64::INFINITY,
        1 => seg(hull[0], hull[0]),
        2 => seg(hull[0], hull[1]),
        n => {
            // counter-clockwise hull: inside iff left of every edge
            let inside = (0..n).all(|i| {
                let (a, b) = (hull[i], hull[(i + 1) % n]);
                (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
            });
            if inside {
                0.0
            } else {
                (0..n).map(|i| seg(hull[i], hull[(i + 1) % n])).fold(f64::INFINITY, f64::min)
            }
        }
    }
}

fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        // collinear input: keep the two extremes as a segment
        return vec![pts[0], pts[pts.len() - 1]];
    }
    lower
}

fn part_hull(pose: &Pose, part: &BodyPart) -> Vec<(f64, f64)> {
    convex_hull(
        part.keypoints
            .iter()
            .map(|&k| pose.keypoints[k])
            .filter(|k| k.visible)
            .map(|k| (k.x as f64, k.y as f64))
            .collect(),
    )
}

/// Soft per-part masks `[parts, H, W]`: `exp(-d^2 / 2r^2)` of the distance to
/// each part's keypoint hull.
pub fn part_masks(pose: &Pose, layout: &BodyPartLayout, h: usize, w: usize, radius: f32) -> Tensor<f32> {
    let inv = 1.0 / (2.0 * (radius as f64).powi(2));
    let mut data = vec![0f32; layout.len() * h * w];
    for (p, part) in layout.parts.iter().enumerate() {
        let hull = part_hull(pose, part);
        let plane = &mut data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let d = hull_distance(&hull, x as f64, y as f64);
                plane[y * w + x] = (-(d * d) * inv).exp() as f32;
            }
        }
    }
    Tensor::new([layout.len(), h, w], data)
}

/// Binary `[1, H, W]` region within `margin` pixels of any part hull.
pub fn figure_region(pose: &Pose, layout: &BodyPartLayout, h: usize, w: usize, margin: f32) -> Tensor<f32> {
    let hulls: Vec<_> = layout.parts.iter().map(|p| part_hull(pose, p)).collect();
    Tensor::from_fn([1, h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let near = hulls.iter().any(|hull| hull_distance(hull, x, y) <= margin as f64);
        if near {
            1.0
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_pose() -> Pose {
        let mut pts = [(0f32, 0f32); NUM_KEYPOINTS];
        for (i, p) in pts.iter_mut().enumerate() {
            *p = (10.0 + 3.0 * i as f32, 8.0 + 2.5 * (i % 5) as f32 + i as f32);
        }
        Pose::from_points(&pts)
    }

    #[test]
    fn heatmap_center_and_one_pixel_offset() {
        let mut pose = Pose::new([Keypoint::hidden(); NUM_KEYPOINTS]);
        pose.keypoints[3] = Keypoint::new(8.0, 8.0);
        let hm = render_heatmap(&pose, 17, 17, 1.0).unwrap();
        let ch = hm.channels.narrow(0, 3, 1);
        assert_eq!(ch.data()[8 * 17 + 8], 1.0);
        let expected = (-0.5f64).exp() as f32; // 0.6065...
        assert!((ch.data()[8 * 17 + 9] - expected).abs() < 1e-6);
        assert!((expected - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn heatmap_visibility_rules() {
        let none = Pose::new([Keypoint::hidden(); NUM_KEYPOINTS]);
        assert!(render_heatmap(&none, 8, 8, 2.0).unwrap().channels.data().iter().all(|&v| v == 0.0));

        let mut two = none;
        two.keypoints[0] = Keypoint::new(1.0, 2.0);
        two.keypoints[9] = Keypoint::new(5.0, 5.0);
        let hm = render_heatmap(&two, 8, 8, 2.0).unwrap();
        let nonzero = (0..NUM_KEYPOINTS).filter(|&k| hm.channels.narrow(0, k, 1).max_value() > 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn heatmap_rejects_bad_sigma() {
        assert!(matches!(render_heatmap(&test_pose(), 8, 8, 0.0), Err(Error::Argument(_))));
        assert!(matches!(render_heatmap(&test_pose(), 8, 8, -1.0), Err(Error::Argument(_))));
    }

    proptest! {
        #[test]
        fn heatmap_range_and_argmax(x in 0.0f32..31.99, y in 0.0f32..23.99, sigma in 0.3f32..6.0) {
            let mut pose = Pose::new([Keypoint::hidden(); NUM_KEYPOINTS]);
            pose.keypoints[5] = Keypoint::new(x, y);
            let hm = render_heatmap(&pose, 24, 32, sigma).unwrap();
            prop_assert!(hm.channels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let ch = hm.channels.narrow(0, 5, 1);
            let (arg, _) = ch.data().iter().enumerate().fold((0, -1.0f32), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            // nearest in-frame grid point; ties may go either way
            let (ax, ay) = ((arg % 32) as f32, (arg / 32) as f32);
            let (nx, ny) = (x.round().min(31.0), y.round().min(23.0));
            prop_assert!((ax - x).abs() <= (nx - x).abs() + 1e-4 && (ay - y).abs() <= (ny - y).abs() + 1e-4);
        }

        #[test]
        fn self_affine_is_identity(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = [(0f32, 0f32); NUM_KEYPOINTS];
            for p in pts.iter_mut() {
                *p = (rng.random_range(2.0..60.0), rng.random_range(2.0..60.0));
            }
            let pose = Pose::from_points(&pts);
            let layout = BodyPartLayout::default();
            for part in &layout.parts {
                let a = estimate_part_affine(&pose, &pose, &part.name, &layout).unwrap();
                for (r, row) in a.matrix.0.iter().enumerate() {
                    for (c, &v) in row.iter().enumerate() {
                        let want = if r == c { 1.0 } else { 0.0 };
                        prop_assert!((v - want).abs() < 1e-6, "part {} entry {r},{c} = {v}", part.name);
                    }
                }
            }
        }
    }

    #[test]
    fn affine_of_translated_pose() {
        let layout = BodyPartLayout::default();
        let src = test_pose();
        let dst = src.translated(5.0, -3.0);
        for part in ["torso", "r_shin", "head"] {
            let a = estimate_part_affine(&src, &dst, part, &layout).unwrap().matrix;
            let want = [[1.0, 0.0, 5.0], [0.0, 1.0, -3.0]];
            for r in 0..2 {
                for c in 0..3 {
                    assert!((a.0[r][c] - want[r][c]).abs() < 1e-5, "{part}: {:?}", a);
                }
            }
        }
    }

    #[test]
    fn affine_is_least_squares_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layout = BodyPartLayout {
            parts: vec![BodyPart { name: "tri".into(), keypoints: vec![0, 1, 2, 3] }],
        };
        for _ in 0..5 {
            let mut pts_s = [(0f32, 0f32); NUM_KEYPOINTS];
            let mut pts_d = [(0f32, 0f32); NUM_KEYPOINTS];
            for i in 0..NUM_KEYPOINTS {
                pts_s[i] = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
                pts_d[i] = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
            }
            let (src, dst) = (Pose::from_points(&pts_s), Pose::from_points(&pts_d));
            let est = estimate_part_affine(&src, &dst, "tri", &layout).unwrap();
            assert!(!est.similarity_fallback);
            let a: Vec<_> = (0..4).map(|i| (pts_s[i].0 as f64, pts_s[i].1 as f64)).collect();
            let b: Vec<_> = (0..4).map(|i| (pts_d[i].0 as f64, pts_d[i].1 as f64)).collect();
            let best = est.matrix.residual(&a, &b);
            // random search around the estimate and over a wide range
            for j in 0..1000 {
                let spread = if j % 2 == 0 { 0.05 } else { 2.0 };
                let mut m = est.matrix.0;
                for row in m.iter_mut() {
                    for v in row.iter_mut() {
                        *v += rng.random_range(-spread..spread);
                    }
                }
                assert!(Affine(m).residual(&a, &b) >= best - 1e-9);
            }
        }
    }

    #[test]
    fn collinear_parts_fall_back_to_similarity() {
        let layout = BodyPartLayout {
            parts: vec![BodyPart { name: "line".into(), keypoints: vec![0, 1, 2] }],
        };
        let mut pts = [(0f32, 0f32); NUM_KEYPOINTS];
        pts[0] = (0.0, 0.0);
        pts[1] = (1.0, 1.0);
        pts[2] = (3.0, 3.0);
        let src = Pose::from_points(&pts);
        let dst = src.translated(2.0, 0.0);
        let est = estimate_part_affine(&src, &dst, "line", &layout).unwrap();
        assert!(est.similarity_fallback);
        assert!((est.matrix.0[0][2] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_part_errors() {
        let layout = BodyPartLayout::default();
        let src = test_pose();
        let mut dst = src;
        dst.keypoints[2].visible = false;
        assert!(matches!(
            estimate_part_affine(&src, &dst, "r_upper_arm", &layout),
            Err(Error::DegeneratePart { .. })
        ));
    }

    #[test]
    fn warp_identity_and_integer_shift() {
        let x = Tensor::<f32>::from_fn([2, 5, 6], |i| i as f32 * 0.5 - 3.0);
        assert_eq!(warp_by_affine(&x, &Affine::IDENTITY), x);
        let y = warp_by_affine(&x, &Affine::translation(1.0, 0.0));
        for c in 0..2 {
            for r in 0..5 {
                assert_eq!(y.data()[(c * 5 + r) * 6], 0.0);
                for col in 1..6 {
                    assert_eq!(y.data()[(c * 5 + r) * 6 + col], x.data()[(c * 5 + r) * 6 + col - 1]);
                }
            }
        }
    }

    /// Direct bilinear sampling in scalar code.
    fn bilinear_oracle(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let at = |cx: f64, cy: f64| {
            if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                0.0
            } else {
                img[cy as usize * w + cx as usize]
            }
        };
        at(x0, y0) * (1.0 - fx) * (1.0 - fy)
            + at(x0 + 1.0, y0) * fx * (1.0 - fy)
            + at(x0, y0 + 1.0) * (1.0 - fx) * fy
            + at(x0 + 1.0, y0 + 1.0) * fx * fy
    }

    #[test]
    fn warp_matches_scalar_oracle_on_impulse() {
        let mut img = vec![0f64; 25];
        img[2 * 5 + 2] = 1.0;
        let a = Affine([[0.9, -0.3, 0.7], [0.25, 1.1, -0.4]]);
        let inv = a.inverse().unwrap();
        let x = Tensor::<f32>::new([1, 5, 5], img.iter().map(|&v| v as f32).collect());
        let y = warp_by_affine(&x, &a);
        for r in 0..5 {
            for c in 0..5 {
                let (sx, sy) = inv.apply(c as f64, r as f64);
                let want = bilinear_oracle(&img, 5, 5, sx, sy);
                assert!((y.data()[r * 5 + c] as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn warp_then_inverse_recovers_interior() {
        let x = Tensor::<f32>::from_fn([1, 24, 24], |i| {
            let (r, c) = ((i / 24) as f32, (i % 24) as f32);
            (r * 0.3).sin() + (c * 0.2).cos()
        });
        let a = Affine([[1.0, 0.0, 2.0], [0.0, 1.0, 1.0]]);
        let back = warp_by_affine(&warp_by_affine(&x, &a), &a.inverse().unwrap());
        for r in 2..22 {
            for c in 2..22 {
                let i = r * 24 + c;
                assert!((back.data()[i] - x.data()[i]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn masks_cover_their_parts() {
        let pose = test_pose();
        let layout = BodyPartLayout::default();
        let m = part_masks(&pose, &layout, 64, 64, 3.0);
        assert_eq!(m.shape(), &[10, 64, 64]);
        for (p, part) in layout.parts.iter().enumerate() {
            let k = pose.keypoints[part.keypoints[0]];
            let v = m.data()[(p * 64 + k.y.round() as usize) * 64 + k.x.round() as usize];
            assert!(v > 0.9, "part {} mask at its keypoint = {v}", part.name);
        }
        let region = figure_region(&pose, &layout, 64, 64, 4.0);
        assert!(region.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
