use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posekit::{Keypoint, Pose, NUM_KEYPOINTS};

/// Back-to-front drawing order over body-part indices: far-side limbs,
/// torso, head, near-side limbs.
pub const DRAW_ORDER: [usize; 10] = [4, 5, 8, 9, 1, 0, 6, 7, 2, 3];

// Segment lengths and radii at 64x64.
const TORSO: f64 = 14.0;
const HEAD_OFFSET: f64 = 6.0;
const SHOULDER_HALF: f64 = 4.0;
const HIP_HALF: f64 = 3.0;
const UPPER_ARM: f64 = 8.0;
const LOWER_ARM: f64 = 7.0;
const THIGH: f64 = 9.0;
const SHIN: f64 = 9.0;
const R_TORSO: f64 = 5.5;
const R_HEAD: f64 = 4.5;
const R_ARM: f64 = 2.0;
const R_LEG: f64 = 2.5;

/// `angle(t) = base + amplitude * sin(2 pi t / period + phase)`, radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTrack {
    pub base: f64,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
}

impl JointTrack {
    pub fn fixed(base: f64) -> Self {
        JointTrack { base, amplitude: 0.0, period: 1.0, phase: 0.0 }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.base + self.amplitude * (TAU * t / self.period + self.phase).sin()
    }
}

/// Joint-angle trajectories plus root motion. Joint order: torso lean,
/// head tilt, right shoulder, right elbow, left shoulder, left elbow,
/// right hip, right knee, left hip, left knee.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionProgram {
    /// Pelvis position at t = 0 in pixels.
    pub root_start: (f64, f64),
    /// Pelvis translation in pixels per frame.
    pub root_velocity: (f64, f64),
    /// Vertical bob amplitude in pixels at 64x64.
    pub bob_amplitude: f64,
    pub bob_period: f64,
    pub joints: [JointTrack; 10],
}

/// Rigid placement of a part: `world = origin + R(angle) local`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rigid {
    pub origin: (f64, f64),
    pub angle: f64,
}

impl Rigid {
    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        (self.origin.0 + c * lx - s * ly, self.origin.1 + s * lx + c * ly)
    }

    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.origin.0, y - self.origin.1);
        (c * dx + s * dy, -s * dx + c * dy)
    }
}

/// A capsule between `a` and `b` attached to a rigid frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartGeometry {
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub radius: f64,
    pub frame: Rigid,
}

impl PartGeometry {
    fn distance(&self, x: f64, y: f64) -> f64 {
        let (vx, vy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = vx * vx + vy * vy;
        let t = if len2 > 0.0 { (((x - self.a.0) * vx + (y - self.a.1) * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        ((x - self.a.0 - t * vx).powi(2) + (y - self.a.1 - t * vy).powi(2)).sqrt()
    }

    /// Anti-aliased coverage of the pixel centered at `(x, y)`.
    pub fn coverage(&self, x: f64, y: f64) -> f64 {
        (self.radius + 0.5 - self.distance(x, y)).clamp(0.0, 1.0)
    }

    /// Pixel range `[x0, x1) x [y0, y1)` that can have nonzero coverage.
    pub fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let e = self.radius + 0.5;
        let lo = |v: f64| (v - e).floor().max(0.0) as usize;
        let hi = |v: f64, n: usize| ((v + e).ceil() + 1.0).clamp(0.0, n as f64) as usize;
        (
            lo(self.a.0.min(self.b.0)),
            hi(self.a.0.max(self.b.0), w),
            lo(self.a.1.min(self.b.1)),
            hi(self.a.1.max(self.b.1), h),
        )
    }
}

/// Reason the figure leaves the frame, if it does.
pub(super) fn off_frame(geom: &[PartGeometry; 10], h: usize, w: usize) -> Option<String> {
    for (p, g) in geom.iter().enumerate() {
        let e = g.radius + 0.5;
        for &(x, y) in &[g.a, g.b] {
            if x - e < 0.0 || y - e < 0.0 || x + e > (w - 1) as f64 || y + e > (h - 1) as f64 {
                return Some(format!("body part {p} reaches ({x:.2}, {y:.2}) outside the {w}x{h} frame"));
            }
        }
    }
    None
}

impl MotionProgram {
    /// A motionless figure centered in a 64-scaled frame.
    pub fn standing(height: usize, width: usize) -> MotionProgram {
        let mut joints = [JointTrack::fixed(0.0); 10];
        joints[2] = JointTrack::fixed(0.3);
        joints[4] = JointTrack::fixed(-0.3);
        MotionProgram {
            root_start: (width as f64 / 2.0, height as f64 * 0.56),
            root_velocity: (0.0, 0.0),
            bob_amplitude: 0.0,
            bob_period: 8.0,
            joints,
        }
    }

    /// Same starting pose with all motion removed.
    pub fn frozen(&self) -> MotionProgram {
        let mut out = self.clone();
        out.root_velocity = (0.0, 0.0);
        out.bob_amplitude = 0.0;
        for j in out.joints.iter_mut() {
            *j = JointTrack::fixed(j.at(0.0));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.root_start.0, self.root_start.1, self.root_velocity.0, self.root_velocity.1, self.bob_amplitude]
            .iter()
            .chain(self.joints.iter().flat_map(|j| [j.base, j.amplitude, j.phase].into_iter()).collect::<Vec<_>>().iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("motion program has non-finite parameters".into()));
        }
        if !(self.bob_period > 0.0) || self.joints.iter().any(|j| !(j.period > 0.0)) {
            return Err(Error::Config("motion periods must be positive".into()));
        }
        Ok(())
    }

    /// Gait-like motion: arms swing against legs with a shared period.
    pub fn random(rng: &mut impl Rng, num_frames: usize, height: usize, width: usize, speed: f64) -> MotionProgram {
        let scale = height.min(width) as f64 / 64.0;
        let period = rng.random_range(8.0..16.0);
        let phase = rng.random_range(0.0..TAU);
        let vx = rng.random_range(-0.6..0.6) * speed * scale;
        let travel = vx * (num_frames.saturating_sub(1)) as f64;
        let cx = width as f64 / 2.0 + rng.random_range(-3.0..3.0) * scale - travel / 2.0;
        let cy = height as f64 * 0.56 + rng.random_range(-1.0..1.0) * scale;
        let mut track = |base: f64, amp: f64, ph: f64| JointTrack {
            base,
            amplitude: amp * rng.random_range(0.5..1.0),
            period,
            phase: phase + ph,
        };
        let arm = 0.5;
        let leg = 0.3;
        let joints = [
            track(0.0, 0.05, 0.0),
            track(0.0, 0.15, 0.5),
            track(0.35, arm, 0.0),
            track(0.3, 0.3, 0.3),
            track(-0.35, arm, std::f64::consts::PI),
            track(-0.3, 0.3, std::f64::consts::PI + 0.3),
            track(0.1, leg, std::f64::consts::PI),
            track(-0.15, 0.2, std::f64::consts::PI + 0.4),
            track(-0.1, leg, 0.0),
            track(0.15, 0.2, 0.4),
        ];
        MotionProgram {
            root_start: (cx, cy),
            root_velocity: (vx, rng.random_range(-0.05..0.05) * speed * scale),
            bob_amplitude: rng.random_range(0.0..0.8),
            bob_period: period / 2.0,
            joints,
        }
    }

    fn keypoints(&self, t: f64, s: f64) -> [(f64, f64); NUM_KEYPOINTS] {
        let j: Vec<f64> = self.joints.iter().map(|j| j.at(t)).collect();
        let pelvis = (
            self.root_start.0 + self.root_velocity.0 * t,
            self.root_start.1 + self.root_velocity.1 * t + self.bob_amplitude * s * (TAU * t / self.bob_period).sin(),
        );
        let torso = Rigid { origin: pelvis, angle: j[0] };
        let neck = torso.to_world(0.0, -TORSO * s);
        let head = Rigid { origin: neck, angle: j[0] + j[1] }.to_world(0.0, -HEAD_OFFSET * s);
        let r_sh = torso.to_world(-SHOULDER_HALF * s, -TORSO * s);
        let l_sh = torso.to_world(SHOULDER_HALF * s, -TORSO * s);
        let r_hip = torso.to_world(-HIP_HALF * s, 0.0);
        let l_hip = torso.to_world(HIP_HALF * s, 0.0);
        let limb = |from: (f64, f64), angle: f64, len: f64| Rigid { origin: from, angle }.to_world(0.0, len * s);
        let r_el = limb(r_sh, j[0] + j[2], UPPER_ARM);
        let r_wr = limb(r_el, j[0] + j[2] + j[3], LOWER_ARM);
        let l_el = limb(l_sh, j[0] + j[4], UPPER_ARM);
        let l_wr = limb(l_el, j[0] + j[4] + j[5], LOWER_ARM);
        let r_kn = limb(r_hip, j[6], THIGH);
        let r_an = limb(r_kn, j[6] + j[7], SHIN);
        let l_kn = limb(l_hip, j[8], THIGH);
        let l_an = limb(l_kn, j[8] + j[9], SHIN);
        [head, neck, r_sh, r_el, r_wr, l_sh, l_el, l_wr, r_hip, r_kn, r_an, l_hip, l_kn, l_an]
    }

    /// Keypoints by forward kinematics; `s` scales the 64x64 skeleton.
    pub fn pose(&self, t: f64, s: f64) -> Pose {
        let k = self.keypoints(t, s);
        let mut out = [Keypoint::hidden(); NUM_KEYPOINTS];
        for (o, &(x, y)) in out.iter_mut().zip(&k) {
            *o = Keypoint::new(x as f32, y as f32);
        }
        Pose::new(out)
    }

    pub fn geometry(&self, t: f64, s: f64) -> [PartGeometry; 10] {
        let k = self.keypoints(t, s);
        let j: Vec<f64> = self.joints.iter().map(|j| j.at(t)).collect();
        let seg = |a: usize, b: usize, radius: f64, angle: f64| PartGeometry {
            a: k[a],
            b: k[b],
            radius: radius * s,
            frame: Rigid { origin: k[a], angle },
        };
        let pelvis = ((k[8].0 + k[11].0) / 2.0, (k[8].1 + k[11].1) / 2.0);
        [
            PartGeometry { a: k[0], b: k[0], radius: R_HEAD * s, frame: Rigid { origin: k[1], angle: j[0] + j[1] } },
            PartGeometry { a: pelvis, b: k[1], radius: R_TORSO * s, frame: Rigid { origin: pelvis, angle: j[0] } },
            seg(2, 3, R_ARM, j[0] + j[2]),
            seg(3, 4, R_ARM, j[0] + j[2] + j[3]),
            seg(5, 6, R_ARM, j[0] + j[4]),
            seg(6, 7, R_ARM, j[0] + j[4] + j[5]),
            seg(8, 9, R_LEG, j[6]),
            seg(9, 10, R_LEG, j[6] + j[7]),
            seg(11, 12, R_LEG, j[8]),
            seg(12, 13, R_LEG, j[8] + j[9]),
        ]
    }
}
