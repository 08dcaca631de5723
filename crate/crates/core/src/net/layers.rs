//! Batched layers on `[batch, channels, height, width]` tensors. Forward
//! passes return whatever the backward pass needs; parameters stay immutable
//! during both.

use rand::Rng;

use super::scalar::{gemm, Mat};
use super::{Scalar, Tensor};

/// Train mode normalizes with batch statistics; eval mode with running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Square 2-D convolution, stride 1, symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-uniform (fan-in, ReLU gain) weights, zero bias.
    pub fn new<R: Rng + ?Sized>(in_c: usize, out_c: usize, k: usize, pad: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = (0..out_c * in_c * k * k)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        Conv2d {
            weight: Tensor::from_vec(&[out_c, in_c, k, k], w).expect("shape"),
            bias: Tensor::zeros(&[out_c]),
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (h + 2 * self.pad + 1 - k, w + 2 * self.pad + 1 - k)
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (c_in, k, pad) = (self.in_channels(), self.kernel(), self.pad as isize);
        let (ho, wo) = self.out_size(h, w);
        let mut row = 0;
        for c in 0..c_in {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pad;
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            out.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = ox as isize + kx as isize - pad;
                            *o = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (c_in, k, pad) = (self.in_channels(), self.kernel(), self.pad as isize);
        let (ho, wo) = self.out_size(h, w);
        let mut row = 0;
        for c in 0..c_in {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [b, c, h, w] = dims4(x);
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.out_size(h, w);
        let (oc, kdim) = (self.out_channels(), c * self.kernel() * self.kernel());
        let mut out = Tensor::zeros(&[b, oc, ho, wo]);
        let mut cols = vec![T::zero(); kdim * ho * wo];
        let wmat = Mat::new(self.weight.data(), oc, kdim);
        for s in 0..b {
            self.im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], h, w, &mut cols);
            let y = &mut out.data_mut()[s * oc * ho * wo..(s + 1) * oc * ho * wo];
            for (o, chunk) in y.chunks_mut(ho * wo).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.data()[o]);
            }
            gemm(wmat, Mat::new(&cols, kdim, ho * wo), y, T::one());
        }
        out
    }

    /// Returns `(dx, dweight, dbias)`; `dx` is skipped when not needed.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
        let [b, c, h, w] = dims4(x);
        let (ho, wo) = self.out_size(h, w);
        let (oc, kdim) = (self.out_channels(), c * self.kernel() * self.kernel());
        let mut dw = Tensor::zeros(self.weight.shape());
        let mut db = Tensor::zeros(&[oc]);
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        let mut cols = vec![T::zero(); kdim * ho * wo];
        let mut dcols = vec![T::zero(); kdim * ho * wo];
        let wmat = Mat::new(self.weight.data(), oc, kdim);
        for s in 0..b {
            let g = &dy.data()[s * oc * ho * wo..(s + 1) * oc * ho * wo];
            for (o, chunk) in g.chunks(ho * wo).enumerate() {
                db.data_mut()[o] += chunk.iter().copied().sum::<T>();
            }
            self.im2col(&x.data()[s * c * h * w..(s + 1) * c * h * w], h, w, &mut cols);
            gemm(
                Mat::new(g, oc, ho * wo),
                Mat::new(&cols, kdim, ho * wo).t(),
                dw.data_mut(),
                T::one(),
            );
            if let Some(dx) = dx.as_mut() {
                gemm(wmat.t(), Mat::new(g, oc, ho * wo), &mut dcols, T::zero());
                self.col2im(&dcols, h, w, &mut dx.data_mut()[s * c * h * w..(s + 1) * c * h * w]);
            }
        }
        (dx, dw, db)
    }
}

pub(crate) fn dims4<T: Scalar>(x: &Tensor<T>) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    [s[0], s[1], s[2], s[3]]
}

/// Per-channel batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// What the batch-norm backward pass needs.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[c], T::one()),
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: Tensor::full(&[c], T::one()),
        }
    }

    /// Returns the normalized-and-scaled output and, in train mode, the cache.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Option<BnCache<T>>) {
        let [b, c, h, w] = dims4(x);
        let hw = h * w;
        let n = b * hw;
        let eps = T::of(BN_EPS);
        let (mean, var, unbiased): (Vec<T>, Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mut unb = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for sidx in 0..b {
                        let off = (sidx * c + ch) * hw;
                        s += x.data()[off..off + hw].iter().map(|v| v.to_f64_lossy()).sum::<f64>();
                    }
                    let m = s / n as f64;
                    let mut q = 0.0f64;
                    for sidx in 0..b {
                        let off = (sidx * c + ch) * hw;
                        q += x.data()[off..off + hw]
                            .iter()
                            .map(|v| (v.to_f64_lossy() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::of(m);
                    var[ch] = T::of(q / n as f64);
                    unb[ch] = T::of(if n > 1 { q / (n - 1) as f64 } else { 0.0 });
                }
                (mean, var, unb)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
                Vec::new(),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for sidx in 0..b {
            for ch in 0..c {
                let off = (sidx * c + ch) * hw;
                let (m, is) = (mean[ch], inv_std[ch]);
                let (g, bt) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let src = &x.data()[off..off + hw];
                let xh = &mut x_hat.data_mut()[off..off + hw];
                for (o, v) in xh.iter_mut().zip(src) {
                    *o = (*v - m) * is;
                }
                for (o, v) in y.data_mut()[off..off + hw].iter_mut().zip(xh.iter()) {
                    *o = g * *v + bt;
                }
            }
        }
        let cache = (mode == Mode::Train).then(|| BnCache {
            x_hat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: unbiased,
        });
        (y, cache)
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BnCache<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let [b, c, h, w] = dims4(dy);
        let hw = h * w;
        let n = T::of((b * hw) as f64);
        let mut dgamma = Tensor::zeros(&[c]);
        let mut dbeta = Tensor::zeros(&[c]);
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let (mut sdy, mut sdyx) = (T::zero(), T::zero());
            for sidx in 0..b {
                let off = (sidx * c + ch) * hw;
                for (g, xh) in dy.data()[off..off + hw].iter().zip(&cache.x_hat.data()[off..off + hw]) {
                    sdy += *g;
                    sdyx += *g * *xh;
                }
            }
            dgamma.data_mut()[ch] = sdyx;
            dbeta.data_mut()[ch] = sdy;
            let k = self.gamma.data()[ch] * cache.inv_std[ch] / n;
            for sidx in 0..b {
                let off = (sidx * c + ch) * hw;
                let g = &dy.data()[off..off + hw];
                let xh = &cache.x_hat.data()[off..off + hw];
                for ((o, gv), xv) in dx.data_mut()[off..off + hw].iter_mut().zip(g).zip(xh) {
                    *o = k * (n * *gv - sdy - *xv * sdyx);
                }
            }
        }
        (dx, dgamma, dbeta)
    }

    pub fn update_running(&mut self, batch_mean: &[T], batch_var_unbiased: &[T]) {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(batch_var_unbiased) {
            *r = keep * *r + m * *b;
        }
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// 2x2 stride-2 max pooling (odd trailing row/column dropped). Returns the
/// output and, per output cell, the winning offset `dy * 2 + dx` inside its
/// window; ties go to the first position in row-major order.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u8>) {
    let [b, c, h, w] = dims4(x);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut arg = vec![0u8; b * c * ho * wo];
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo];
        let am = &mut arg[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = 2 * oy * w + 2 * ox;
                let cand = [src[base], src[base + 1], src[base + w], src[base + w + 1]];
                let mut best = 0;
                for k in 1..4 {
                    if cand[k] > cand[best] {
                        best = k;
                    }
                }
                dst[oy * wo + ox] = cand[best];
                am[oy * wo + ox] = best as u8;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u8], in_shape: &[usize]) -> Tensor<T> {
    let [_, _, ho, wo] = dims4(dy);
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    let planes = in_shape[0] * in_shape[1];
    for p in 0..planes {
        let g = &dy.data()[p * ho * wo..(p + 1) * ho * wo];
        let am = &arg[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let k = am[oy * wo + ox] as usize;
                dst[(2 * oy + k / 2) * w + 2 * ox + k % 2] += g[oy * wo + ox];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [b, c, h, w] = dims4(x);
        let (oc, k, pad) = (conv.out_channels(), conv.kernel(), conv.pad as isize);
        let (ho, wo) = conv.out_size(h, w);
        let mut out = Tensor::zeros(&[b, oc, ho, wo]);
        for s in 0..b {
            for o in 0..oc {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.data()[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad;
                                    let ix = ox as isize + kx as isize - pad;
                                    if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                        acc += conv.weight.data()[((o * c + ci) * k + ky) * k + kx]
                                            * x.data()[((s * c + ci) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * oc + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rng_from_seed(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = rng_from_seed(1);
        for (k, pad) in [(3, 1), (5, 0), (1, 0)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, pad, &mut rng);
            conv.bias = random(&[4], 9);
            let x = random(&[2, 3, 7, 6], 2);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_normalizes_batch() {
        let bn = BatchNorm2d::<f64>::new(3);
        let mut x = random(&[8, 3, 5, 5], 4);
        x.data_mut().iter_mut().for_each(|v| *v = *v * 3.0 + 2.0);
        let (_, cache) = bn.forward(&x, Mode::Train);
        let cache = cache.unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..8)
                .flat_map(|s| cache.x_hat.data()[(s * 3 + ch) * 25..(s * 3 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let (_, cache) = bn.forward(&x, Mode::Train);
        let cache = cache.unwrap();
        bn.update_running(&cache.batch_mean, &cache.batch_var_unbiased);
        // mean 4, unbiased var 20/3
        assert!((bn.running_mean.data()[0] - 0.4).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn maxpool_routes_gradient_to_first_max() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 2.0, 5.0, 0.0, 2.0, 2.0]).unwrap();
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data(), &[5.0, 2.0]);
        assert_eq!(arg, vec![1, 0]);
        let dy = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        let dx = maxpool2_backward(&dy, &arg, x.shape());
        assert_eq!(dx.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
