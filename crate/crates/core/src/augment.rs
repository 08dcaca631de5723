//! Sequence augmentation and the per-track preprocessing chain:
//! sequence augmentation → border removal → square padding → equal color
//! jitter → per-frame perturbation. Only the geometric normalization (border
//! removal, padding) runs at evaluation time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trackio::{Frame, Label, Track};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub sa_probability: f64,
    /// Track-wide gain drawn from `[1 - g, 1 + g]` per channel.
    pub equal_gain: f32,
    /// Track-wide bias drawn from `[-b, b]` per channel.
    pub equal_bias: f32,
    pub rotation_deg: f32,
    pub shift_px: u32,
    pub frame_gain: f32,
    pub frame_bias: f32,
    pub target_size: usize,
    /// Pixels whose brightest channel is at or below this count as border.
    pub border_threshold: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sa_probability: 0.5,
            equal_gain: 0.4,
            equal_bias: 0.1,
            rotation_deg: 5.0,
            shift_px: 3,
            frame_gain: 0.1,
            frame_bias: 0.03,
            target_size: 112,
            border_threshold: 2.0 / 255.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sa_probability) {
            return Err(Error::InvalidArgument(format!(
                "sa_probability must lie in [0, 1], got {}",
                self.sa_probability
            )));
        }
        let ranges = [
            self.equal_gain,
            self.equal_bias,
            self.rotation_deg,
            self.frame_gain,
            self.frame_bias,
            self.border_threshold,
        ];
        if ranges.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("augmentation ranges must be nonnegative".into()));
        }
        if self.target_size == 0 {
            return Err(Error::InvalidArgument("target_size must be positive".into()));
        }
        Ok(())
    }

    /// Same geometry, no randomness.
    pub fn without_perturbation(&self) -> Self {
        AugmentConfig {
            sa_probability: 0.0,
            equal_gain: 0.0,
            equal_bias: 0.0,
            rotation_deg: 0.0,
            shift_px: 0,
            frame_gain: 0.0,
            frame_bias: 0.0,
            ..self.clone()
        }
    }
}

/// Replaces every frame with a copy of one randomly chosen frame and marks
/// the track fake.
pub fn sequence_augment<R: Rng + ?Sized>(track: &Track, rng: &mut R) -> Result<Track> {
    if track.is_empty() {
        return Err(Error::Empty("sequence augmentation of an empty track".into()));
    }
    let pick = rng.random_range(0..track.len());
    Ok(still_track(track, pick))
}

/// `len` copies of frame `index`, labelled fake.
pub fn still_track(track: &Track, index: usize) -> Track {
    let frames = vec![track.frames()[index].clone(); track.len()];
    Track::new(frames, Label::Fake, track.id.clone()).expect("copies share dimensions")
}

/// Crops to the bounding box of pixels brighter than `threshold` in their
/// brightest channel. All-dark frames come back unchanged.
pub fn remove_black_borders(frame: &Frame, threshold: f32) -> Frame {
    let (h, w, ch) = frame.dims();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..h {
        for x in 0..w {
            let bright = (0..ch).map(|c| frame.get(c, y, x)).fold(f32::MIN, f32::max);
            if bright > threshold {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return frame.clone();
    }
    if (y0, x0, y1, x1) == (0, 0, h - 1, w - 1) {
        return frame.clone();
    }
    crop(frame, y0, x0, y1 - y0 + 1, x1 - x0 + 1)
}

pub fn crop(frame: &Frame, y0: usize, x0: usize, h: usize, w: usize) -> Frame {
    let ch = frame.channels();
    let mut out = Frame::zeros(h, w, ch);
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, frame.get(c, y0 + y, x0 + x));
            }
        }
    }
    out
}

/// Bilinear sample of one plane with zero outside the image.
#[inline]
pub(crate) fn sample_zero(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let (fy, fx) = (y.floor(), x.floor());
    let (ay, ax) = (y - fy, x - fx);
    let (iy, ix) = (fy as isize, fx as isize);
    let at = |yy: isize, xx: isize| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    (1.0 - ay) * ((1.0 - ax) * at(iy, ix) + ax * at(iy, ix + 1))
        + ay * ((1.0 - ax) * at(iy + 1, ix) + ax * at(iy + 1, ix + 1))
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(frame: &Frame, out_h: usize, out_w: usize) -> Frame {
    let (h, w, ch) = frame.dims();
    if (h, w) == (out_h, out_w) {
        return frame.clone();
    }
    let (sy, sx) = (h as f32 / out_h as f32, w as f32 / out_w as f32);
    let mut out = Frame::zeros(out_h, out_w, ch);
    for c in 0..ch {
        let src = frame.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..out_h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ay = fy - y0 as f32;
            for x in 0..out_w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let ax = fx - x0 as f32;
                let top = (1.0 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1];
                let bot = (1.0 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1];
                dst[y * out_w + x] = (1.0 - ay) * top + ay * bot;
            }
        }
    }
    out
}

/// Scales the longer side to `size` and zero-pads the shorter one
/// symmetrically (extra row/column goes to the bottom/right).
pub fn pad_square(frame: &Frame, size: usize) -> Frame {
    let (h, w, ch) = frame.dims();
    let long = h.max(w) as f64;
    let scale = size as f64 / long;
    let nh = ((h as f64 * scale).round() as usize).clamp(1, size);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, size);
    let scaled = resize_bilinear(frame, nh, nw);
    if (nh, nw) == (size, size) {
        return scaled;
    }
    let (top, left) = ((size - nh) / 2, (size - nw) / 2);
    let mut out = Frame::zeros(size, size, ch);
    for c in 0..ch {
        for y in 0..nh {
            for x in 0..nw {
                out.set(c, top + y, left + x, scaled.get(c, y, x));
            }
        }
    }
    out
}

/// Per-channel affine color transform `clamp(gain * x + bias, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorAffine {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
}

impl ColorAffine {
    pub const IDENTITY: ColorAffine = ColorAffine {
        gain: [1.0; 3],
        bias: [0.0; 3],
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, gain: f32, bias: f32) -> Self {
        let mut draw = |r: f32| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let g = [1.0 + draw(gain), 1.0 + draw(gain), 1.0 + draw(gain)];
        let b = [draw(bias), draw(bias), draw(bias)];
        ColorAffine { gain: g, bias: b }
    }

    pub fn apply(&self, frame: &Frame) -> Result<Frame> {
        if frame.channels() != 3 {
            return Err(Error::Shape(format!(
                "color jitter needs 3 channels, got {}",
                frame.channels()
            )));
        }
        let mut out = frame.clone();
        for c in 0..3 {
            let (g, b) = (self.gain[c], self.bias[c]);
            for v in out.plane_mut(c) {
                *v = (g * *v + b).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}

/// Applies one color transform to every frame of the track.
pub fn apply_equal_color(track: &Track, color: &ColorAffine) -> Result<Track> {
    let frames = track
        .frames()
        .iter()
        .map(|f| color.apply(f))
        .collect::<Result<Vec<_>>>()?;
    track.with_frames(frames)
}

/// Draws one color transform and applies it to the whole track.
pub fn equal_color_jitter<R: Rng + ?Sized>(
    track: &Track,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Track> {
    let color = ColorAffine::sample(rng, cfg.equal_gain, cfg.equal_bias);
    apply_equal_color(track, &color)
}

/// Rotates about the image center by `degrees` (counter-clockwise in image
/// coordinates), bilinear, zero fill.
pub fn rotate(frame: &Frame, degrees: f32) -> Frame {
    if degrees == 0.0 {
        return frame.clone();
    }
    let (h, w, ch) = frame.dims();
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut out = Frame::zeros(h, w, ch);
    for k in 0..ch {
        let src = frame.plane(k);
        let dst = out.plane_mut(k);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                // inverse rotation maps output to source
                let sx = c * dx + s * dy + cx;
                let sy = -s * dx + c * dy + cy;
                dst[y * w + x] = sample_zero(src, h, w, sy, sx);
            }
        }
    }
    out
}

/// Integer translation: content moves `dx` columns right and `dy` rows down;
/// uncovered pixels are zero.
pub fn shift(frame: &Frame, dx: i32, dy: i32) -> Frame {
    if dx == 0 && dy == 0 {
        return frame.clone();
    }
    let (h, w, ch) = frame.dims();
    let mut out = Frame::zeros(h, w, ch);
    for c in 0..ch {
        for y in 0..h as i32 {
            let sy = y - dy;
            if sy < 0 || sy >= h as i32 {
                continue;
            }
            for x in 0..w as i32 {
                let sx = x - dx;
                if sx >= 0 && sx < w as i32 {
                    out.set(c, y as usize, x as usize, frame.get(c, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

/// Independent rotation, color jitter and integer shift for one frame.
pub fn per_frame_perturb<R: Rng + ?Sized>(
    frame: &Frame,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Frame> {
    let r = cfg.rotation_deg;
    let angle = if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let color = ColorAffine::sample(rng, cfg.frame_gain, cfg.frame_bias);
    let s = cfg.shift_px as i32;
    let (dx, dy) = if s > 0 {
        (rng.random_range(-s..=s), rng.random_range(-s..=s))
    } else {
        (0, 0)
    };
    let mut out = rotate(frame, angle);
    if out.channels() == 3 && color != ColorAffine::IDENTITY {
        out = color.apply(&out)?;
    }
    Ok(shift(&out, dx, dy))
}

/// Border removal and square padding for every frame.
pub fn normalize_geometry(track: &Track, cfg: &AugmentConfig) -> Result<Track> {
    let frames = track
        .frames()
        .iter()
        .map(|f| pad_square(&remove_black_borders(f, cfg.border_threshold), cfg.target_size))
        .collect();
    track.with_frames(frames)
}

/// Full training-time chain on an already selected track. Returns the
/// augmented track and whether sequence augmentation fired.
pub fn augment_track<R: Rng + ?Sized>(
    track: &Track,
    cfg: &AugmentConfig,
    sequence_augmentation: bool,
    rng: &mut R,
) -> Result<(Track, bool)> {
    let fire = sequence_augmentation && rng.random_bool(cfg.sa_probability);
    let base = if fire {
        sequence_augment(track, rng)?
    } else {
        track.clone()
    };
    let mut out = normalize_geometry(&base, cfg)?;
    if out.dims().2 == 3 {
        out = equal_color_jitter(&out, cfg, rng)?;
    }
    let frames = out
        .frames()
        .iter()
        .map(|f| per_frame_perturb(f, cfg, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((out.with_frames(frames)?, fire))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn smooth(h: usize, w: usize) -> Frame {
        let mut f = Frame::zeros(h, w, 3);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.2 * ((x as f32) * 0.11 + c as f32).sin()
                        + 0.2 * ((y as f32) * 0.07).cos();
                    f.set(c, y, x, v);
                }
            }
        }
        f
    }

    fn counting_track(n: usize) -> Track {
        let frames = (0..n)
            .map(|i| Frame::new(2, 2, 3, vec![i as f32 / n as f32; 12]).unwrap())
            .collect();
        Track::new(frames, Label::Real, "t").unwrap()
    }

    #[test]
    fn sequence_augmentation_copies_one_frame() {
        let t = counting_track(16);
        let s = still_track(&t, 4);
        assert_eq!(s.label, Label::Fake);
        assert_eq!(s.len(), 16);
        assert!(s.frames().iter().all(|f| f == &t.frames()[4]));

        let mut rng = rng_from_seed(3);
        let fake = Track::new(t.frames().to_vec(), Label::Fake, "f").unwrap();
        let once = sequence_augment(&fake, &mut rng).unwrap();
        assert_eq!(once.label, Label::Fake);
        let twice = sequence_augment(&once, &mut rng).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn border_crop_finds_content_box() {
        let mut f = Frame::zeros(112, 112, 3);
        for y in 10..=90 {
            for x in 20..=100 {
                f.set(1, y, x, 0.5);
            }
        }
        let c = remove_black_borders(&f, 2.0 / 255.0);
        assert_eq!(c.dims(), (81, 81, 3));
        assert_eq!(c.get(1, 0, 0), 0.5);

        let full = smooth(40, 30);
        assert_eq!(remove_black_borders(&full, 2.0 / 255.0), full);
        let black = Frame::zeros(12, 9, 3);
        assert_eq!(remove_black_borders(&black, 2.0 / 255.0), black);
    }

    #[test]
    fn pad_square_scales_then_pads() {
        let f = Frame::new(81, 108, 3, vec![0.7; 81 * 108 * 3]).unwrap();
        let p = pad_square(&f, 112);
        assert_eq!(p.dims(), (112, 112, 3));
        // 81 * 112 / 108 = 84 rows of content, 14 zero rows above and below
        for y in 0..112 {
            let expected = if (14..98).contains(&y) { 0.7 } else { 0.0 };
            assert!((p.get(0, y, 50) - expected).abs() < 1e-6, "row {y}");
        }
        let sq = smooth(112, 112);
        assert_eq!(pad_square(&sq, 112), sq);
        let big = smooth(224, 224);
        let down = pad_square(&big, 112);
        assert_eq!(down.dims(), (112, 112, 3));
        // 2x bilinear with half-pixel centers averages each 2x2 block
        let avg = (big.get(0, 20, 30) + big.get(0, 20, 31) + big.get(0, 21, 30) + big.get(0, 21, 31)) / 4.0;
        assert!((down.get(0, 10, 15) - avg).abs() < 1e-5);
    }

    #[test]
    fn equal_jitter_semantics() {
        let t = counting_track(4);
        assert_eq!(apply_equal_color(&t, &ColorAffine::IDENTITY).unwrap(), t);

        let constant = Track::new(vec![smooth(8, 8); 5], Label::Real, "c").unwrap();
        let mut rng = rng_from_seed(11);
        let j = equal_color_jitter(&constant, &AugmentConfig::default(), &mut rng).unwrap();
        assert!(j.frames().iter().all(|f| f == &j.frames()[0]));

        let px = Frame::new(1, 1, 3, vec![0.9; 3]).unwrap();
        let boost = ColorAffine {
            gain: [1.4; 3],
            bias: [0.0; 3],
        };
        assert_eq!(boost.apply(&px).unwrap().data(), &[1.0, 1.0, 1.0]);

        let gray = Track::new(vec![Frame::zeros(2, 2, 1); 2], Label::Real, "g").unwrap();
        assert!(equal_color_jitter(&gray, &AugmentConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn equal_jitter_commutes_with_reordering() {
        let t = counting_track(6);
        let mut rev_frames = t.frames().to_vec();
        rev_frames.reverse();
        let rev = t.with_frames(rev_frames).unwrap();
        let cfg = AugmentConfig::default();
        let a = equal_color_jitter(&t, &cfg, &mut rng_from_seed(5)).unwrap();
        let b = equal_color_jitter(&rev, &cfg, &mut rng_from_seed(5)).unwrap();
        let mut a_rev = a.frames().to_vec();
        a_rev.reverse();
        assert_eq!(a_rev, b.frames());
    }

    #[test]
    fn zero_magnitude_perturbation_is_identity() {
        let f = smooth(32, 32);
        let cfg = AugmentConfig::default().without_perturbation();
        let mut rng = rng_from_seed(0);
        assert_eq!(per_frame_perturb(&f, &cfg, &mut rng).unwrap(), f);
    }

    #[test]
    fn shift_moves_impulse() {
        let mut f = Frame::zeros(112, 112, 3);
        f.set(0, 56, 56, 1.0);
        let s = shift(&f, 3, 0);
        assert_eq!(s.get(0, 56, 59), 1.0);
        assert_eq!(s.data().iter().filter(|v| **v != 0.0).count(), 1);
    }

    #[test]
    fn rotation_round_trip_in_interior() {
        let f = smooth(112, 112);
        let back = rotate(&rotate(&f, 5.0), -5.0);
        let mut worst = 0.0f32;
        for c in 0..3 {
            for y in 16..96 {
                for x in 16..96 {
                    worst = worst.max((back.get(c, y, x) - f.get(c, y, x)).abs());
                }
            }
        }
        assert!(worst < 0.05, "max interior error {worst}");
    }

    #[test]
    fn augmented_chain_outputs_target_size() {
        let frames = vec![smooth(90, 70); 16];
        let t = Track::new(frames, Label::Real, "x").unwrap();
        let mut rng = rng_from_seed(9);
        let (out, _) = augment_track(&t, &AugmentConfig::default(), true, &mut rng).unwrap();
        assert_eq!(out.dims(), (112, 112, 3));
        assert_eq!(out.len(), 16);
    }

    #[test]
    fn sa_frequency_matches_probability() {
        let t = Track::new(vec![smooth(8, 8); 4], Label::Real, "x").unwrap();
        let cfg = AugmentConfig {
            target_size: 8,
            ..AugmentConfig::default()
        };
        let n = 2000;
        let mut rng = rng_from_seed(123);
        let mut fired = 0;
        for _ in 0..n {
            let (out, f) = augment_track(&t, &cfg, true, &mut rng).unwrap();
            if f {
                fired += 1;
                assert_eq!(out.label, Label::Fake);
            }
        }
        let p = cfg.sa_probability;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((fired as f64 - n as f64 * p).abs() <= 3.0 * sigma, "fired {fired}/{n}");
    }

    proptest::proptest! {
        #[test]
        fn pad_square_always_square(h in 1usize..200, w in 1usize..200) {
            let f = Frame::new(h, w, 3, vec![0.5; h * w * 3]).unwrap();
            let p = pad_square(&f, 112);
            proptest::prop_assert_eq!(p.dims(), (112, 112, 3));
            // the scaled content is present in full: its area matches the scaled dims
            let long = h.max(w) as f64;
            let nh = ((h as f64 * 112.0 / long).round() as usize).clamp(1, 112);
            let nw = ((w as f64 * 112.0 / long).round() as usize).clamp(1, 112);
            let lit = p.plane(0).iter().filter(|v| (**v - 0.5).abs() < 1e-5).count();
            proptest::prop_assert_eq!(lit, nh * nw);
        }
    }
}
