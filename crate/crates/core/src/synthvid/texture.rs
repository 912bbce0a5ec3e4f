use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Procedural static background, colors in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Uniform { color: [f32; 3] },
    /// Linear ramp along `angle` (radians) across the frame.
    Gradient { from: [f32; 3], to: [f32; 3], angle: f64 },
    Checker { a: [f32; 3], b: [f32; 3], cell: f64 },
    /// Multi-octave value noise blending two colors.
    Noise { a: [f32; 3], b: [f32; 3], cell: f64, octaves: u32, seed: u64 },
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f64) -> [f32; 3] {
    let t = t as f32;
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn lattice(seed: u64, ix: i64, iy: i64) -> f64 {
    // splitmix64 finalizer over the cell coordinates
    let mut z = seed ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (fx, fy) = (smooth(x - x0), smooth(y - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let top = lattice(seed, ix, iy) * (1.0 - fx) + lattice(seed, ix + 1, iy) * fx;
    let bottom = lattice(seed, ix, iy + 1) * (1.0 - fx) + lattice(seed, ix + 1, iy + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

impl Texture {
    pub fn gray(level: f32) -> Texture {
        Texture::Uniform { color: [level; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        let colors: Vec<[f32; 3]> = match self {
            Texture::Uniform { color } => vec![*color],
            Texture::Gradient { from, to, .. } => vec![*from, *to],
            Texture::Checker { a, b, cell } | Texture::Noise { a, b, cell, .. } => {
                if !(*cell > 0.0) {
                    return Err(Error::Config(format!("texture cell size must be positive, got {cell}")));
                }
                vec![*a, *b]
            }
        };
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("texture colors must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn random(rng: &mut impl Rng) -> Texture {
        let mut color = || [rng.random_range(0.0f32..1.0), rng.random_range(0.0f32..1.0), rng.random_range(0.0f32..1.0)];
        let (a, b) = (color(), color());
        match rng.random_range(0..3) {
            0 => Texture::Gradient { from: a, to: b, angle: rng.random_range(0.0..std::f64::consts::TAU) },
            1 => Texture::Checker { a, b, cell: rng.random_range(4.0..12.0) },
            _ => Texture::Noise { a, b, cell: rng.random_range(6.0..16.0), octaves: 3, seed: rng.random() },
        }
    }

    /// Color at pixel center `(x, y)` in an `h x w` frame.
    pub fn sample(&self, x: f64, y: f64, h: usize, w: usize) -> [f32; 3] {
        match self {
            Texture::Uniform { color } => *color,
            Texture::Gradient { from, to, angle } => {
                let (s, c) = angle.sin_cos();
                let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
                let extent = (cx * c.abs() + cy * s.abs()).max(1.0);
                let t = (((x - cx) * c + (y - cy) * s) / extent + 1.0) / 2.0;
                lerp3(*from, *to, t.clamp(0.0, 1.0))
            }
            Texture::Checker { a, b, cell } => {
                let parity = ((x / cell).floor() as i64 + (y / cell).floor() as i64).rem_euclid(2);
                if parity == 0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Noise { a, b, cell, octaves, seed } => {
                let (mut total, mut amp, mut norm, mut freq) = (0.0, 1.0, 0.0, 1.0 / cell);
                for o in 0..*octaves {
                    total += amp * value_noise(seed.wrapping_add(o as u64), x * freq, y * freq);
                    norm += amp;
                    amp *= 0.5;
                    freq *= 2.0;
                }
                lerp3(*a, *b, total / norm.max(1e-12))
            }
        }
    }
}
