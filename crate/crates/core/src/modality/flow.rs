//! Coarse-to-fine variational optical flow.
//!
//! Minimizes `sum phi((I_b(x + w) - I_a(x))^2) + alpha * sum phi(|grad u|^2 + |grad v|^2)`
//! with the Charbonnier penalty `phi(s^2) = sqrt(s^2 + eps^2)`. Each pyramid
//! level warps the second image by the current flow, linearizes the data term
//! and solves for an increment with lagged-nonlinearity SOR sweeps. Images
//! are converted to luma on a 0..255 scale before anything else.

use serde::{Deserialize, Serialize};

use crate::augment::resize_bilinear;
use crate::error::{Error, Result};
use crate::trackio::Frame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub pyramid_scale: f64,
    /// Upper bound; levels are dropped until the coarsest side is >= 16 px.
    pub levels: usize,
    pub warps_per_level: usize,
    pub smoothness_alpha: f32,
    pub charbonnier_eps: f32,
    pub solver_iters: usize,
    /// Stop sweeping once the largest increment change drops below this (px).
    pub solver_tol: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_scale: 0.5,
            levels: 4,
            warps_per_level: 3,
            smoothness_alpha: 20.0,
            charbonnier_eps: 1e-3,
            solver_iters: 50,
            solver_tol: 1e-4,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "pyramid_scale must lie in (0, 1), got {}",
                self.pyramid_scale
            )));
        }
        if self.levels == 0 || self.warps_per_level == 0 || self.solver_iters == 0 {
            return Err(Error::InvalidArgument("flow iteration counts must be positive".into()));
        }
        if !(self.smoothness_alpha > 0.0 && self.charbonnier_eps > 0.0 && self.solver_tol >= 0.0) {
            return Err(Error::InvalidArgument("flow weights must be positive".into()));
        }
        Ok(())
    }
}

/// Minimum side of the coarsest pyramid level.
pub const MIN_LEVEL_SIZE: usize = 16;

/// Level sizes from finest to coarsest.
pub fn pyramid_sizes(height: usize, width: usize, p: &FlowParams) -> Vec<(usize, usize)> {
    let mut sizes = vec![(height, width)];
    for k in 1..p.levels {
        let s = p.pyramid_scale.powi(k as i32);
        let (h, w) = (
            (height as f64 * s).round() as usize,
            (width as f64 * s).round() as usize,
        );
        if h.min(w) < MIN_LEVEL_SIZE {
            break;
        }
        sizes.push((h, w));
    }
    sizes
}

/// Per-pixel displacement from frame `a` to frame `b`, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub params: FlowParams,
}

impl FlowField {
    pub fn mean_magnitude(&self) -> f64 {
        let s: f64 = self
            .u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| f64::from(u.hypot(*v)))
            .sum();
        s / self.u.len() as f64
    }

    pub fn max_abs(&self) -> f32 {
        self.u.iter().chain(&self.v).fold(0.0f32, |m, x| m.max(x.abs()))
    }
}

/// Single-channel image plane.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    d: Vec<f32>,
}

impl Plane {
    fn zeros(h: usize, w: usize) -> Self {
        Plane {
            h,
            w,
            d: vec![0.0; h * w],
        }
    }

    #[inline]
    fn at(&self, y: isize, x: isize) -> f32 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.d[y * self.w + x]
    }

    /// Bilinear sample with edge clamping.
    #[inline]
    fn sample(&self, y: f32, x: f32) -> f32 {
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.h - 1), (x0 + 1).min(self.w - 1));
        let (ay, ax) = (y - y0 as f32, x - x0 as f32);
        let r0 = self.d[y0 * self.w + x0] * (1.0 - ax) + self.d[y0 * self.w + x1] * ax;
        let r1 = self.d[y1 * self.w + x0] * (1.0 - ax) + self.d[y1 * self.w + x1] * ax;
        r0 * (1.0 - ay) + r1 * ay
    }

    /// Separable binomial [1 4 6 4 1]/16 smoothing with edge clamping.
    fn smooth5(&self) -> Plane {
        const K: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        self.separable(&K)
    }

    fn separable(&self, k: &[f32]) -> Plane {
        let r = (k.len() / 2) as isize;
        let mut tmp = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    s += kv * self.at(y as isize, x as isize + i as isize - r);
                }
                tmp.d[y * self.w + x] = s;
            }
        }
        let mut out = Plane::zeros(self.h, self.w);
        for y in 0..self.h {
            for x in 0..self.w {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    s += kv * tmp.at(y as isize + i as isize - r, x as isize);
                }
                out.d[y * self.w + x] = s;
            }
        }
        out
    }

    fn resize(&self, h: usize, w: usize) -> Plane {
        let f = Frame::new(self.h, self.w, 1, self.d.clone()).expect("finite plane");
        Plane {
            h,
            w,
            d: resize_bilinear(&f, h, w).into_data(),
        }
    }

    /// Five-point central derivatives `(d/dx, d/dy)`.
    fn gradients(&self) -> (Plane, Plane) {
        let mut gx = Plane::zeros(self.h, self.w);
        let mut gy = Plane::zeros(self.h, self.w);
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let i = y as usize * self.w + x as usize;
                gx.d[i] = (self.at(y, x - 2) - 8.0 * self.at(y, x - 1) + 8.0 * self.at(y, x + 1)
                    - self.at(y, x + 2))
                    / 12.0;
                gy.d[i] = (self.at(y - 2, x) - 8.0 * self.at(y - 1, x) + 8.0 * self.at(y + 1, x)
                    - self.at(y + 2, x))
                    / 12.0;
            }
        }
        (gx, gy)
    }
}

fn gray_plane(f: &Frame) -> Plane {
    Plane {
        h: f.height(),
        w: f.width(),
        d: f.luma().into_iter().map(|v| v * 255.0).collect(),
    }
}

#[inline]
fn charbonnier(s2: f32, eps: f32) -> f32 {
    (s2 + eps * eps).sqrt()
}

/// Derivative of the Charbonnier penalty with respect to its squared argument.
#[inline]
fn charbonnier_weight(s2: f32, eps: f32) -> f32 {
    0.5 / (s2 + eps * eps).sqrt()
}

/// Increment solver state for one warp.
struct Linearized<'a> {
    ix: &'a [f32],
    iy: &'a [f32],
    it: &'a [f32],
    valid: &'a [bool],
}

/// Gauss-Seidel state: total flow `u + du` and the SOR relaxation data.
struct Sor<'a> {
    w: usize,
    u: &'a [f32],
    v: &'a [f32],
    lin: &'a Linearized<'a>,
    psi_d: Vec<f32>,
    wr: Vec<f32>,
    wd: Vec<f32>,
    ut: Vec<f32>,
    vt: Vec<f32>,
}

impl Sor<'_> {
    const OMEGA: f32 = 1.8;

    /// Relaxes pixel `i` given the neighbor weight sum and weighted sums of
    /// the neighbors' total flow. Returns the largest change.
    #[inline(always)]
    fn relax(&mut self, i: usize, sw: f32, su: f32, sv: f32) -> f32 {
        assert!(i < self.ut.len() && i < self.vt.len() && i < self.psi_d.len());
        assert!(i < self.u.len() && i < self.v.len());
        assert!(i < self.lin.ix.len() && i < self.lin.iy.len() && i < self.lin.it.len());
        let pd = self.psi_d[i];
        let (gx, gy, gt) = (self.lin.ix[i], self.lin.iy[i], self.lin.it[i]);
        let (u0, v0) = (self.u[i], self.v[i]);
        let (mut ut, mut vt) = (self.ut[i], self.vt[i]);
        let mut cu = 0.0;
        let den_u = pd * gx * gx + sw;
        if den_u > 0.0 {
            let new_du = (su - sw * u0 - pd * gx * (gt + gy * (vt - v0))) / den_u;
            cu = Self::OMEGA * (new_du - (ut - u0));
            ut += cu;
        }
        let mut cv = 0.0;
        let den_v = pd * gy * gy + sw;
        if den_v > 0.0 {
            let new_dv = (sv - sw * v0 - pd * gy * (gt + gx * (ut - u0))) / den_v;
            cv = Self::OMEGA * (new_dv - (vt - v0));
            vt += cv;
        }
        self.ut[i] = ut;
        self.vt[i] = vt;
        cu.abs().max(cv.abs())
    }

    /// Pixel with any subset of its four neighbors.
    #[inline]
    fn relax_edge(&mut self, i: usize, x: usize, y: usize, h: usize) -> f32 {
        let w = self.w;
        let (mut sw, mut su, mut sv) = (0.0f32, 0.0f32, 0.0f32);
        let mut nb = |j: usize, wt: f32| {
            sw += wt;
            su += wt * self.ut[j];
            sv += wt * self.vt[j];
        };
        if x > 0 {
            nb(i - 1, self.wr[i - 1]);
        }
        if x + 1 < w {
            nb(i + 1, self.wr[i]);
        }
        if y > 0 {
            nb(i - w, self.wd[i - w]);
        }
        if y + 1 < h {
            nb(i + w, self.wd[i]);
        }
        self.relax(i, sw, su, sv)
    }

    #[inline(always)]
    fn relax_interior(&mut self, i: usize) -> f32 {
        let w = self.w;
        assert!(i >= w && i + w < self.ut.len());
        assert!(self.vt.len() == self.ut.len() && self.wr.len() == self.ut.len() && self.wd.len() == self.ut.len());
        // SAFETY: the asserts above bound every index used below.
        let (sw, su, sv) = unsafe {
            let (a, b) = (*self.wr.get_unchecked(i - 1), *self.wr.get_unchecked(i));
            let (c, d) = (*self.wd.get_unchecked(i - w), *self.wd.get_unchecked(i));
            let ut = &self.ut;
            let vt = &self.vt;
            (
                a + b + c + d,
                a * ut.get_unchecked(i - 1) + b * ut.get_unchecked(i + 1) + c * ut.get_unchecked(i - w) + d * ut.get_unchecked(i + w),
                a * vt.get_unchecked(i - 1) + b * vt.get_unchecked(i + 1) + c * vt.get_unchecked(i - w) + d * vt.get_unchecked(i + w),
            )
        };
        self.relax(i, sw, su, sv)
    }

    fn sweep(&mut self, h: usize) -> f32 {
        let w = self.w;
        let mut change = 0.0f32;
        for y in 0..h {
            if y == 0 || y + 1 == h || w < 3 {
                for x in 0..w {
                    change = change.max(self.relax_edge(y * w + x, x, y, h));
                }
                continue;
            }
            change = change.max(self.relax_edge(y * w, 0, y, h));
            for i in y * w + 1..y * w + w - 1 {
                change = change.max(self.relax_interior(i));
            }
            change = change.max(self.relax_edge(y * w + w - 1, w - 1, y, h));
        }
        change
    }

    /// Recomputes the Charbonnier weights of data and smoothness terms.
    fn relinearize(&mut self, h: usize, p: &FlowParams, psi_s: &mut [f32]) {
        let w = self.w;
        let eps = p.charbonnier_eps;
        let alpha = p.smoothness_alpha;
        for i in 0..h * w {
            self.psi_d[i] = if self.lin.valid[i] {
                let r = self.lin.it[i] + self.lin.ix[i] * (self.ut[i] - self.u[i]) + self.lin.iy[i] * (self.vt[i] - self.v[i]);
                charbonnier_weight(r * r, eps)
            } else {
                0.0
            };
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (mut ux, mut vx, mut uy, mut vy) = (0.0, 0.0, 0.0, 0.0);
                if x + 1 < w {
                    ux = self.ut[i + 1] - self.ut[i];
                    vx = self.vt[i + 1] - self.vt[i];
                }
                if y + 1 < h {
                    uy = self.ut[i + w] - self.ut[i];
                    vy = self.vt[i + w] - self.vt[i];
                }
                psi_s[i] = charbonnier_weight(ux * ux + uy * uy + vx * vx + vy * vy, eps);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                self.wr[i] = if x + 1 < w { alpha * 0.5 * (psi_s[i] + psi_s[i + 1]) } else { 0.0 };
                self.wd[i] = if y + 1 < h { alpha * 0.5 * (psi_s[i] + psi_s[i + w]) } else { 0.0 };
            }
        }
    }
}

/// SOR on the warp increment; updates `u` and `v` in place.
fn solve_increment(h: usize, w: usize, u: &mut [f32], v: &mut [f32], lin: &Linearized, p: &FlowParams) {
    const RELINEARIZE_EVERY: usize = 5;
    let n = h * w;
    let mut psi_s = vec![0.0f32; n];
    let mut sor = Sor {
        w,
        u,
        v,
        lin,
        psi_d: vec![0.0; n],
        wr: vec![0.0; n],
        wd: vec![0.0; n],
        ut: u.to_vec(),
        vt: v.to_vec(),
    };
    for iter in 0..p.solver_iters {
        if iter % RELINEARIZE_EVERY == 0 {
            sor.relinearize(h, p, &mut psi_s);
        }
        let change = sor.sweep(h);
        if change < p.solver_tol && iter % RELINEARIZE_EVERY == RELINEARIZE_EVERY - 1 {
            break;
        }
    }
    let (ut, vt) = (sor.ut, sor.vt);
    u.copy_from_slice(&ut);
    v.copy_from_slice(&vt);
}

fn check_pair(a: &Frame, b: &Frame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "flow frames differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Estimates the flow `w` such that `b(x + w(x)) ~ a(x)`.
pub fn optical_flow(a: &Frame, b: &Frame, p: &FlowParams) -> Result<FlowField> {
    check_pair(a, b)?;
    p.validate()?;
    let (h, w) = (a.height(), a.width());
    let sizes = pyramid_sizes(h, w, p);
    let mut pa = vec![gray_plane(a).smooth5()];
    let mut pb = vec![gray_plane(b).smooth5()];
    for &(lh, lw) in &sizes[1..] {
        let (prev_a, prev_b) = (pa.last().unwrap(), pb.last().unwrap());
        let (na, nb) = (prev_a.smooth5().resize(lh, lw), prev_b.smooth5().resize(lh, lw));
        pa.push(na);
        pb.push(nb);
    }

    let (ch, cw) = *sizes.last().unwrap();
    let mut u = Plane::zeros(ch, cw);
    let mut v = Plane::zeros(ch, cw);
    for level in (0..sizes.len()).rev() {
        let (lh, lw) = sizes[level];
        if (u.h, u.w) != (lh, lw) {
            let (sy, sx) = (lh as f32 / u.h as f32, lw as f32 / u.w as f32);
            u = u.resize(lh, lw);
            v = v.resize(lh, lw);
            u.d.iter_mut().for_each(|x| *x *= sx);
            v.d.iter_mut().for_each(|x| *x *= sy);
        }
        let (ia, ib) = (&pa[level], &pb[level]);
        let (ax, ay) = ia.gradients();
        let (bx, by) = ib.gradients();
        let n = lh * lw;
        let mut ix = vec![0.0f32; n];
        let mut iy = vec![0.0f32; n];
        let mut it = vec![0.0f32; n];
        let mut valid = vec![false; n];
        for _ in 0..p.warps_per_level {
            for y in 0..lh {
                for x in 0..lw {
                    let i = y * lw + x;
                    let (sy, sx) = (y as f32 + v.d[i], x as f32 + u.d[i]);
                    valid[i] = sx >= 0.0 && sy >= 0.0 && sx <= (lw - 1) as f32 && sy <= (lh - 1) as f32;
                    ix[i] = 0.5 * (bx.sample(sy, sx) + ax.d[i]);
                    iy[i] = 0.5 * (by.sample(sy, sx) + ay.d[i]);
                    it[i] = ib.sample(sy, sx) - ia.d[i];
                }
            }
            let lin = Linearized {
                ix: &ix,
                iy: &iy,
                it: &it,
                valid: &valid,
            };
            solve_increment(lh, lw, &mut u.d, &mut v.d, &lin, p);
        }
    }
    if u.d.iter().chain(&v.d).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("optical flow".into()));
    }
    Ok(FlowField {
        height: h,
        width: w,
        u: u.d,
        v: v.d,
        params: p.clone(),
    })
}

/// Energy of a flow field on the finest level (same luma conversion and
/// pre-smoothing as the solver, forward differences for the smoothness term).
pub fn flow_energy(a: &Frame, b: &Frame, flow: &FlowField) -> Result<f64> {
    check_pair(a, b)?;
    let (ia, ib) = (gray_plane(a).smooth5(), gray_plane(b).smooth5());
    let (h, w) = (ia.h, ia.w);
    if (flow.height, flow.width) != (h, w) {
        return Err(Error::Shape("flow field does not match frames".into()));
    }
    let eps = flow.params.charbonnier_eps;
    let alpha = f64::from(flow.params.smoothness_alpha);
    let (u, v) = (&flow.u, &flow.v);
    let mut data = 0.0f64;
    let mut smooth = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r = ib.sample(y as f32 + v[i], x as f32 + u[i]) - ia.d[i];
            data += f64::from(charbonnier(r * r, eps));
            let (mut g2, mut dx, mut dy) = (0.0f32, 0.0f32, 0.0f32);
            if x + 1 < w {
                dx = u[i + 1] - u[i];
                g2 += (v[i + 1] - v[i]).powi(2);
            }
            if y + 1 < h {
                dy = u[i + w] - u[i];
                g2 += (v[i + w] - v[i]).powi(2);
            }
            smooth += f64::from(charbonnier(g2 + dx * dx + dy * dy, eps));
        }
    }
    Ok(data + alpha * smooth)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth texture sampled at `x - dx` (content shifted right by `dx`).
    pub(crate) fn texture(size: usize, dx: f32, dy: f32) -> Frame {
        let mut f = Frame::zeros(size, size, 3);
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f32 - dx, y as f32 - dy);
                let v = 0.5
                    + 0.15 * (xf * 0.21 + 0.3).sin() * (yf * 0.17).cos()
                    + 0.12 * (xf * 0.09 - yf * 0.13 + 1.0).sin()
                    + 0.08 * (yf * 0.31 + xf * 0.05).cos();
                for c in 0..3 {
                    f.set(c, y, x, v);
                }
            }
        }
        f
    }

    fn median(mut v: Vec<f32>) -> f32 {
        v.sort_by(f32::total_cmp);
        v[v.len() / 2]
    }

    fn interior(f: &FlowField, vals: &[f32]) -> Vec<f32> {
        let m = (f.width - 80) / 2;
        (m..m + 80)
            .flat_map(|y| (m..m + 80).map(move |x| (y, x)))
            .map(|(y, x)| vals[y * f.width + x])
            .collect()
    }

    #[test]
    fn pyramid_respects_minimum_size() {
        let p = FlowParams::default();
        assert_eq!(pyramid_sizes(112, 112, &p), vec![(112, 112), (56, 56), (28, 28)]);
        let deep = FlowParams {
            levels: 10,
            ..p.clone()
        };
        let sizes = pyramid_sizes(300, 200, &deep);
        assert!(sizes.last().unwrap().0.min(sizes.last().unwrap().1) >= MIN_LEVEL_SIZE);
        assert_eq!(pyramid_sizes(20, 20, &p), vec![(20, 20)]);
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let a = texture(112, 0.0, 0.0);
        let f = optical_flow(&a, &a, &FlowParams::default()).unwrap();
        assert!(f.max_abs() <= 1e-6);
    }

    #[test]
    fn recovers_horizontal_translation() {
        let a = texture(112, 0.0, 0.0);
        let b = texture(112, 2.0, 0.0);
        let p = FlowParams::default();
        let f = optical_flow(&a, &b, &p).unwrap();
        let mu = median(interior(&f, &f.u));
        let mv = median(interior(&f, &f.v));
        assert!((1.75..=2.25).contains(&mu), "median u {mu}");
        assert!((-0.25..=0.25).contains(&mv), "median v {mv}");

        let back = optical_flow(&b, &a, &p).unwrap();
        let bu = median(interior(&back, &back.u));
        let bv = median(interior(&back, &back.v));
        assert!((bu + mu).abs() <= 0.25, "forward {mu}, backward {bu}");
        assert!((bv + mv).abs() <= 0.25);
    }

    #[test]
    fn returned_flow_beats_zero_flow() {
        let a = texture(64, 0.0, 0.0);
        let b = texture(64, 1.5, -1.0);
        let p = FlowParams::default();
        let f = optical_flow(&a, &b, &p).unwrap();
        let zero = FlowField {
            u: vec![0.0; f.u.len()],
            v: vec![0.0; f.v.len()],
            ..f.clone()
        };
        assert!(flow_energy(&a, &b, &f).unwrap() < flow_energy(&a, &b, &zero).unwrap());

        let same = optical_flow(&a, &a, &p).unwrap();
        assert_eq!(
            flow_energy(&a, &a, &same).unwrap(),
            flow_energy(&a, &a, &zero).unwrap()
        );
    }

    #[test]
    fn rejects_shape_mismatch() {
        let a = texture(32, 0.0, 0.0);
        let b = texture(40, 0.0, 0.0);
        assert!(optical_flow(&a, &b, &FlowParams::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let a = texture(48, 0.0, 0.0);
        let b = texture(48, 1.0, 0.5);
        let p = FlowParams::default();
        assert_eq!(optical_flow(&a, &b, &p).unwrap(), optical_flow(&a, &b, &p).unwrap());
    }
}
