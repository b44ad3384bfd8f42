//! Synthetic gray-scale sequences: advected textures with brightness drift
//! and growing blobs. Output is a pure function of the spec (seed included).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FrameSequence;
use crate::error::{Error, Result};
use crate::grid::{sample_bilinear, ScalarField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    /// Periodic sum of Fourier modes in a mid-frequency band; advected with wrap-around.
    #[default]
    BandlimitedNoise,
    /// Gaussian blobs on a dark background; radii grow by `growth_rate` per frame.
    GaussianBlobs,
    /// `1/f` noise, advected with replicate borders.
    AdvectedFractal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    /// Pixels per frame.
    pub velocity: (f32, f32),
    pub texture: Texture,
    /// Added to every pixel once per frame.
    pub brightness_drift: f32,
    /// Blob radius increase per frame, in pixels.
    pub growth_rate: f32,
    pub seed: u64,
    pub cadence_minutes: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            velocity: (0.0, 0.0),
            texture: Texture::BandlimitedNoise,
            brightness_drift: 0.0,
            growth_rate: 0.0,
            seed: 0,
            cadence_minutes: 2.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidDimensions {
                width: self.width,
                height: self.height,
                reason: "synthetic frames need both dimensions >= 2",
            });
        }
        let finite = [
            self.velocity.0,
            self.velocity.1,
            self.brightness_drift,
            self.growth_rate,
        ];
        if finite.iter().any(|v| !v.is_finite())
            || self.cadence_minutes.is_nan()
            || self.cadence_minutes <= 0.0
        {
            return Err(Error::InvalidParams(
                "synthetic spec values must be finite and cadence > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One Fourier mode: spatial frequency in cycles/pixel, amplitude, phase.
#[derive(Debug, Clone, Copy)]
struct Mode {
    fx: f32,
    fy: f32,
    amp: f32,
    phase: f32,
}

fn render_modes(w: usize, h: usize, modes: &[Mode]) -> Vec<f32> {
    let tau = std::f32::consts::TAU;
    let mut out: Vec<f32> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f32, (i / w) as f32);
            modes
                .iter()
                .map(|m| m.amp * (tau * (m.fx * x + m.fy * y) + m.phase).cos())
                .sum()
        })
        .collect();
    // rescale into [0.25, 0.75], leaving headroom for brightness drift
    let lo = out.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = out.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    out.iter_mut()
        .for_each(|v| *v = 0.25 + 0.5 * (*v - lo) / span);
    out
}

fn bandlimited_modes(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<Mode> {
    let kmax = (w.min(h) / 8).max(3) as i32;
    let kmin = 2.0f32;
    let mut modes = Vec::new();
    while modes.len() < 48 {
        let kx = rng.gen_range(-kmax..=kmax);
        let ky = rng.gen_range(-kmax..=kmax);
        let k = ((kx * kx + ky * ky) as f32).sqrt();
        if k < kmin || k > kmax as f32 {
            continue;
        }
        modes.push(Mode {
            fx: kx as f32 / w as f32,
            fy: ky as f32 / h as f32,
            amp: rng.gen_range(0.5f32..1.0),
            phase: rng.gen_range(0.0..std::f32::consts::TAU),
        });
    }
    modes
}

fn fractal_modes(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<Mode> {
    let kmax = (w.min(h) / 4).max(2) as f32;
    (0..160)
        .map(|_| {
            // log-uniform radial frequency, amplitude ~ 1/k
            let k = (rng.gen_range(0.0f32..1.0) * kmax.ln()).exp();
            let ang = rng.gen_range(0.0..std::f32::consts::TAU);
            Mode {
                fx: k * ang.cos() / w as f32,
                fy: k * ang.sin() / h as f32,
                amp: 1.0 / k,
                phase: rng.gen_range(0.0..std::f32::consts::TAU),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f32,
    cy: f32,
    radius: f32,
    amp: f32,
}

fn blobs(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let n = rng.gen_range(6..=12);
    let m = w.min(h) as f32;
    (0..n)
        .map(|_| Blob {
            cx: rng.gen_range(0.0..w as f32),
            cy: rng.gen_range(0.0..h as f32),
            radius: rng.gen_range(m / 16.0..m / 6.0).max(1.0),
            amp: rng.gen_range(0.15f32..0.35),
        })
        .collect()
}

fn sample_periodic(f: &ScalarField, x: f32, y: f32) -> f32 {
    let (w, h) = (f.width() as f32, f.height() as f32);
    let x = x.rem_euclid(w);
    let y = y.rem_euclid(h);
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let xi = x0 as usize % f.width();
    let yi = y0 as usize % f.height();
    let xj = (xi + 1) % f.width();
    let yj = (yi + 1) % f.height();
    let top = f.get(xi, yi) * (1.0 - fx) + f.get(xj, yi) * fx;
    let bot = f.get(xi, yj) * (1.0 - fx) + f.get(xj, yj) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Frame `k` is the base texture moved by `k * velocity`, brightened by
/// `k * brightness_drift` and clamped to `[0, 1]`.
pub fn generate_synthetic(spec: &SyntheticSpec, n_frames: usize) -> Result<FrameSequence> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (vx, vy) = spec.velocity;

    let frames: Vec<ScalarField> = match spec.texture {
        Texture::BandlimitedNoise | Texture::AdvectedFractal => {
            let periodic = spec.texture == Texture::BandlimitedNoise;
            let modes = if periodic {
                bandlimited_modes(w, h, &mut rng)
            } else {
                fractal_modes(w, h, &mut rng)
            };
            let base = ScalarField::new(w, h, render_modes(w, h, &modes))?;
            (0..n_frames)
                .map(|k| {
                    let (dx, dy) = (k as f32 * vx, k as f32 * vy);
                    let drift = k as f32 * spec.brightness_drift;
                    ScalarField::from_fn(w, h, |x, y| {
                        let (sx, sy) = (x as f32 - dx, y as f32 - dy);
                        let v = if periodic {
                            sample_periodic(&base, sx, sy)
                        } else {
                            sample_bilinear(&base, sx, sy)
                        };
                        (v + drift).clamp(0.0, 1.0)
                    })
                })
                .collect::<Result<_>>()?
        }
        Texture::GaussianBlobs => {
            let bs = blobs(w, h, &mut rng);
            (0..n_frames)
                .map(|k| {
                    let kf = k as f32;
                    let drift = kf * spec.brightness_drift;
                    ScalarField::from_fn(w, h, |x, y| {
                        let mut v = 0.15;
                        for b in &bs {
                            let r = (b.radius + kf * spec.growth_rate).max(0.5);
                            let dx = x as f32 - (b.cx + kf * vx);
                            let dy = y as f32 - (b.cy + kf * vy);
                            v += b.amp * (-(dx * dx + dy * dy) / (2.0 * r * r)).exp();
                        }
                        (v + drift).clamp(0.0, 1.0)
                    })
                })
                .collect::<Result<_>>()?
        }
    };

    FrameSequence::new(
        frames,
        spec.cadence_minutes,
        format!("synthetic:{:?}:seed{}", spec.texture, spec.seed),
    )
}
