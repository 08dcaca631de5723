//! Deterministic synthetic liveness data.
//!
//! Real tracks show a textured face-like blob moving smoothly over a static
//! background. Fake tracks keep the scene frozen: print-like fakes are one
//! blurred, low-contrast still; replay-like fakes carry a faint screen
//! pattern and a global intensity flicker. Every frame gets fresh Gaussian
//! sensor noise and fixed black side bands (letterboxing), so border removal
//! has something to remove.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{write_protocol, Frame, Label, ProtocolSplit, Track};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};

/// Distribution shift applied to the test split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestShift {
    /// Multiplies the real-track motion amplitude.
    pub motion_scale: f64,
    /// Moves the skin-tone draw towards darker (positive) or lighter tones.
    pub tone_shift: f64,
    /// Test prints are sharp and high-contrast instead of blurred.
    pub unseen_print_style: bool,
}

impl Default for TestShift {
    fn default() -> Self {
        TestShift {
            motion_scale: 1.0,
            tone_shift: 0.0,
            unseen_print_style: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_real: usize,
    pub n_fake: usize,
    pub frames_per_track: usize,
    pub image_size: usize,
    /// Peak speed of real-track motion, pixels per frame.
    pub motion_amplitude: f64,
    pub texture_seed: u64,
    pub noise_sigma: f64,
    pub test_shift: TestShift,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_real: 8,
            n_fake: 8,
            frames_per_track: 16,
            image_size: 128,
            motion_amplitude: 0.5,
            texture_seed: 0,
            noise_sigma: 0.01,
            test_shift: TestShift::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_real == 0 || self.n_fake == 0 {
            return Err(Error::SingleLabel("train set".into()));
        }
        if self.frames_per_track < 16 {
            return Err(Error::InvalidArgument(format!(
                "frames_per_track must be >= 16, got {}",
                self.frames_per_track
            )));
        }
        if self.image_size < 32 {
            return Err(Error::InvalidArgument(format!(
                "image_size must be >= 32, got {}",
                self.image_size
            )));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.motion_amplitude)
            || !finite_nonneg(self.noise_sigma)
            || !finite_nonneg(self.test_shift.motion_scale)
            || !self.test_shift.tone_shift.is_finite()
        {
            return Err(Error::InvalidArgument(
                "motion, noise and shift parameters must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackKind {
    Real,
    Print,
    SharpPrint,
    Replay,
}

#[derive(Clone, Copy)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

/// Smooth random field: a sum of plane waves.
struct Texture {
    waves: Vec<Wave>,
}

impl Texture {
    fn random(rng: &mut Rng, n: usize, min_wavelength: f64, max_wavelength: f64) -> Self {
        let waves = (0..n)
            .map(|_| {
                let wl = rng.random_range(min_wavelength..max_wavelength);
                let theta = rng.random_range(0.0..TAU);
                Wave {
                    fx: theta.cos() / wl,
                    fy: theta.sin() / wl,
                    phase: rng.random_range(0.0..TAU),
                    amp: 1.0 / (n as f64).sqrt(),
                }
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|w| w.amp * (TAU * (w.fx * x + w.fy * y) + w.phase).sin())
            .sum()
    }
}

/// Everything about a subject that does not change over time.
struct Scene {
    size: usize,
    border: usize,
    tone: [f64; 3],
    face: Texture,
    background: Texture,
    bg_tint: [f64; 3],
    eye_dx: f64,
    eye_dy: f64,
    radius_x: f64,
    radius_y: f64,
}

impl Scene {
    fn random(rng: &mut Rng, size: usize, tone_shift: f64) -> Self {
        let s = size as f64;
        let t = (rng.random_range(0.0..1.0) + tone_shift).clamp(0.0, 1.0);
        let light = [0.95, 0.78, 0.66];
        let dark = [0.52, 0.36, 0.27];
        let tone = std::array::from_fn(|c| light[c] + (dark[c] - light[c]) * t);
        let g = rng.random_range(0.25..0.4);
        let bg_tint = [
            g + rng.random_range(-0.05..0.05),
            g + rng.random_range(-0.05..0.05),
            g + rng.random_range(-0.05..0.05),
        ];
        Scene {
            size,
            border: size / 10,
            tone,
            face: Texture::random(rng, 12, s / 16.0, s / 4.0),
            background: Texture::random(rng, 6, s / 8.0, s / 2.0),
            bg_tint,
            eye_dx: s * rng.random_range(0.10..0.14),
            eye_dy: s * rng.random_range(0.06..0.10),
            radius_x: s * rng.random_range(0.24..0.30),
            radius_y: s * rng.random_range(0.31..0.37),
        }
    }

    /// Renders the scene with the face shifted by `(dx, dy)` pixels.
    fn render(&self, dx: f64, dy: f64) -> Vec<f64> {
        let n = self.size;
        let c0 = (n as f64 - 1.0) / 2.0;
        let mut out = vec![0.0; 3 * n * n];
        for y in 0..n {
            for x in self.border..n - self.border {
                let (xf, yf) = (x as f64, y as f64);
                let bg = 1.0 + 0.5 * self.background.at(xf, yf);
                // face-local coordinates
                let (lx, ly) = (xf - c0 - dx, yf - c0 - dy);
                let r = (lx / self.radius_x).powi(2) + (ly / self.radius_y).powi(2);
                let mask = 1.0 / (1.0 + ((r - 1.0) * 12.0).exp());
                let mut shade = 1.0 + 0.3 * self.face.at(lx, ly);
                for ex in [-self.eye_dx, self.eye_dx] {
                    let d2 = (lx - ex).powi(2) + (ly + self.eye_dy).powi(2);
                    shade -= 0.55 * (-d2 / (2.0 * (0.03 * n as f64).powi(2))).exp();
                }
                let mouth = (lx / (0.1 * n as f64)).powi(2) + ((ly - 1.6 * self.eye_dy) / (0.025 * n as f64)).powi(2);
                shade -= 0.4 * (-mouth).exp();
                for c in 0..3 {
                    let v = mask * self.tone[c] * shade + (1.0 - mask) * self.bg_tint[c] * bg;
                    out[(c * n + y) * n + x] = v;
                }
            }
        }
        out
    }

    fn blur(&self, img: &mut [f64]) {
        let n = self.size;
        let mut tmp = img.to_vec();
        for c in 0..3 {
            let p = c * n * n;
            for _ in 0..2 {
                for y in 0..n {
                    for x in self.border..n - self.border {
                        let lo = x.saturating_sub(1).max(self.border);
                        let hi = (x + 1).min(n - self.border - 1);
                        let s: f64 = (lo..=hi).map(|xx| img[p + y * n + xx]).sum();
                        tmp[p + y * n + x] = s / (hi - lo + 1) as f64;
                    }
                }
                for y in 0..n {
                    for x in self.border..n - self.border {
                        let lo = y.saturating_sub(1);
                        let hi = (y + 1).min(n - 1);
                        let s: f64 = (lo..=hi).map(|yy| tmp[p + yy * n + x]).sum();
                        img[p + y * n + x] = s / (hi - lo + 1) as f64;
                    }
                }
            }
        }
    }

    fn contrast(&self, img: &mut [f64], k: f64, pivot: f64) {
        let n = self.size;
        for c in 0..3 {
            for y in 0..n {
                for x in self.border..n - self.border {
                    let v = &mut img[(c * n + y) * n + x];
                    *v = pivot + k * (*v - pivot);
                }
            }
        }
    }

    /// Adds noise, clamps, and forces the side bands to exact black.
    fn finish(&self, img: &[f64], gain: f64, noise: &Normal<f64>, rng: &mut Rng) -> Frame {
        let n = self.size;
        let mut data = vec![0.0f32; 3 * n * n];
        for c in 0..3 {
            for y in 0..n {
                for x in self.border..n - self.border {
                    let i = (c * n + y) * n + x;
                    data[i] = (img[i] * gain + noise.sample(rng)).clamp(0.0, 1.0) as f32;
                }
            }
        }
        Frame::new(n, n, 3, data).expect("synthetic frame is well formed")
    }
}

/// Renders one track of the given kind. `amplitude` is the real-track peak
/// speed in pixels per frame.
pub fn render_track(
    kind: TrackKind,
    cfg: &SynthConfig,
    amplitude: f64,
    tone_shift: f64,
    seed: u64,
    id: &str,
) -> Track {
    let mut rng = rng_from_seed(derive_seed(cfg.texture_seed ^ seed, id, &[]));
    let scene = Scene::random(&mut rng, cfg.image_size, tone_shift);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated noise sigma");
    let n_frames = cfg.frames_per_track;
    let frames = match kind {
        TrackKind::Real => {
            // a sweep over at most half a sine period: smooth, with displacement
            // growing monotonically from the first frame
            let period = 2.0 * n_frames as f64 * rng.random_range(1.0..1.5);
            let w = TAU / period;
            let theta = rng.random_range(0.0..TAU);
            let start = -std::f64::consts::FRAC_PI_2 + rng.random_range(-0.3..0.3);
            let (rx, ry) = (amplitude / w * theta.cos(), 0.6 * amplitude / w * theta.sin());
            (0..n_frames)
                .map(|t| {
                    let s = (w * t as f64 + start).sin() - start.sin();
                    scene.finish(&scene.render(rx * s, ry * s), 1.0, &noise, &mut rng)
                })
                .collect()
        }
        TrackKind::Print | TrackKind::SharpPrint => {
            let (dx, dy) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let mut still = scene.render(dx, dy);
            if kind == TrackKind::Print {
                scene.blur(&mut still);
                scene.contrast(&mut still, 0.75, 0.5);
            } else {
                scene.contrast(&mut still, 1.15, 0.45);
            }
            (0..n_frames)
                .map(|_| scene.finish(&still, 1.0, &noise, &mut rng))
                .collect()
        }
        TrackKind::Replay => {
            let (dx, dy) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let mut still = scene.render(dx, dy);
            let theta = rng.random_range(0.0..TAU);
            let wl = rng.random_range(3.0..5.0);
            let n = cfg.image_size;
            for c in 0..3 {
                for y in 0..n {
                    for x in scene.border..n - scene.border {
                        let phase = (x as f64 * theta.cos() + y as f64 * theta.sin()) / wl;
                        still[(c * n + y) * n + x] += 0.04 * (TAU * phase).sin();
                    }
                }
            }
            let flicker_period = rng.random_range(6.0..12.0);
            let flicker_phase = rng.random_range(0.0..TAU);
            (0..n_frames)
                .map(|t| {
                    let gain = 1.0 + 0.08 * (TAU * t as f64 / flicker_period + flicker_phase).sin();
                    scene.finish(&still, gain, &noise, &mut rng)
                })
                .collect()
        }
    };
    let label = if kind == TrackKind::Real {
        Label::Real
    } else {
        Label::Fake
    };
    Track::new(frames, label, id).expect("synthetic frames share dimensions")
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Train,
    Dev,
    Test,
}

/// 50/25/25 split of `n` items; index → part.
fn part_of(i: usize, n: usize) -> Part {
    let train = n.div_ceil(2);
    let dev = (n - train).div_ceil(2);
    if i < train {
        Part::Train
    } else if i < train + dev {
        Part::Dev
    } else {
        Part::Test
    }
}

/// Generates a full protocol split in memory.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<ProtocolSplit> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for i in 0..cfg.n_real {
        jobs.push((TrackKind::Real, format!("real/{:04}", i + 1), part_of(i, cfg.n_real)));
    }
    for i in 0..cfg.n_fake {
        let part = part_of(i, cfg.n_fake);
        let kind = match (i % 2, part) {
            (0, Part::Test) if cfg.test_shift.unseen_print_style => TrackKind::SharpPrint,
            (0, _) => TrackKind::Print,
            _ => TrackKind::Replay,
        };
        jobs.push((kind, format!("fake/{:04}", i + 1), part));
    }
    let tracks: Vec<(Part, Track)> = jobs
        .into_par_iter()
        .map(|(kind, id, part)| {
            let (amp, tone) = if part == Part::Test {
                (
                    cfg.motion_amplitude * cfg.test_shift.motion_scale,
                    cfg.test_shift.tone_shift,
                )
            } else {
                (cfg.motion_amplitude, 0.0)
            };
            (part, render_track(kind, cfg, amp, tone, seed, &id))
        })
        .collect();
    let mut split = ProtocolSplit {
        protocol_id: 0,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for (part, t) in tracks {
        match part {
            Part::Train => split.train.push(t),
            Part::Dev => split.dev.push(t),
            Part::Test => split.test.push(t),
        }
    }
    Ok(split)
}

/// Paths of the protocol lists written by [`materialize`].
#[derive(Clone, Debug)]
pub struct MaterializedSplit {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
}

/// Writes every track as `<out>/<id>/NNNN.png` plus `train.txt`, `dev.txt`
/// and `test.txt` lists next to them.
pub fn materialize(split: &ProtocolSplit, out: &Path) -> Result<MaterializedSplit> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let all: Vec<&Track> = split.train.iter().chain(&split.dev).chain(&split.test).collect();
    all.par_iter().try_for_each(|t| -> Result<()> {
        let dir = out.join(&t.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, f) in t.frames().iter().enumerate() {
            f.save(&dir.join(format!("{:04}.png", i + 1)))?;
        }
        Ok(())
    })?;
    let write = |name: &str, tracks: &[Track]| -> Result<PathBuf> {
        let path = out.join(name);
        let entries: Vec<_> = tracks.iter().map(|t| (PathBuf::from(&t.id), t.label)).collect();
        write_protocol(&path, &entries)?;
        Ok(path)
    };
    Ok(MaterializedSplit {
        train: write("train.txt", &split.train)?,
        dev: write("dev.txt", &split.dev)?,
        test: write("test.txt", &split.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_real: 4,
            n_fake: 4,
            frames_per_track: 16,
            image_size: 64,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_synthetic(&small(), 7).unwrap();
        let b = generate_synthetic(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_sizes_and_labels() {
        let s = generate_synthetic(&small(), 1).unwrap();
        assert_eq!(s.train.len(), 4);
        assert_eq!(s.dev.len(), 2);
        assert_eq!(s.test.len(), 2);
        s.validate().unwrap();
    }

    #[test]
    fn real_tracks_move_and_prints_do_not() {
        let cfg = SynthConfig {
            image_size: 112,
            ..small()
        };
        // difference of two independent noise draws has std sqrt(2)*sigma; its
        // maximum over ~37k pixels stays well under 9 sigma
        let noise_floor = 9.0 * cfg.noise_sigma as f32;
        let real = render_track(TrackKind::Real, &cfg, cfg.motion_amplitude, 0.0, 7, "r");
        assert!(real.frames()[0].max_abs_diff(&real.frames()[15]) > noise_floor);
        let print = render_track(TrackKind::Print, &cfg, cfg.motion_amplitude, 0.0, 7, "p");
        for f in &print.frames()[1..] {
            assert!(f.max_abs_diff(&print.frames()[0]) <= noise_floor);
        }
    }

    #[test]
    fn side_bands_are_black() {
        let cfg = small();
        let t = render_track(TrackKind::Replay, &cfg, 1.0, 0.0, 3, "x");
        let f = &t.frames()[0];
        for c in 0..3 {
            for y in 0..64 {
                assert_eq!(f.get(c, y, 0), 0.0);
                assert_eq!(f.get(c, y, 63), 0.0);
            }
        }
    }

    #[test]
    fn rejects_missing_label() {
        let cfg = SynthConfig {
            n_real: 0,
            ..small()
        };
        assert!(matches!(generate_synthetic(&cfg, 0), Err(Error::SingleLabel(_))));
    }
}
