use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{dims4, maxpool2, maxpool2_backward, relu_inplace, BatchNorm2d, BnCache, Conv2d, Mode};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backbone shape. The default is the four-block 16/32/64/128 network with a
/// 5x5 head producing 256 features; smaller shapes exist for tests.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetShape {
    pub widths: Vec<usize>,
    pub head_kernel: usize,
    pub embed_dim: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        NetShape {
            widths: vec![16, 32, 64, 128],
            head_kernel: 5,
            embed_dim: 256,
        }
    }
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.head_kernel == 0 || self.embed_dim == 0 {
            return Err(Error::InvalidArgument("network widths, head kernel and embedding must be positive".into()));
        }
        Ok(())
    }

    /// Side length of the head output for a square input, if positive.
    pub fn head_side(&self, input: usize) -> Option<usize> {
        let mut s = input;
        for _ in &self.widths {
            s /= 2;
        }
        (s >= self.head_kernel).then(|| s + 1 - self.head_kernel)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

/// Conv-BN-ReLU-MaxPool blocks, a valid convolution, then global average
/// pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct SimpleNet<T> {
    pub blocks: Vec<Block<T>>,
    pub head: Conv2d<T>,
}

/// FNV-1a over bytes.
pub(crate) struct Fnv(pub u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, b: u8) {
        self.0 = (self.0 ^ b as u64).wrapping_mul(0x100_0000_01b3);
    }
}

/// Per-channel batch mean and unbiased variance of one BatchNorm layer.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

pub struct SimpleNetCache<T> {
    inputs: Vec<Tensor<T>>,
    bn: Vec<BnCache<T>>,
    pool_args: Vec<Vec<u8>>,
    pool_in_shapes: Vec<Vec<usize>>,
    head_input: Tensor<T>,
    head_hw: usize,
}

impl<T: Scalar> SimpleNetCache<T> {
    /// Feeds every ReLU on/off decision and max-pool winner into `h`.
    pub(crate) fn fingerprint(&self, net: &SimpleNet<T>, h: &mut Fnv) {
        for ((block, bc), args) in net.blocks.iter().zip(&self.bn).zip(&self.pool_args) {
            let [_, c, hh, w] = dims4(&bc.x_hat);
            for (p, chunk) in bc.x_hat.data().chunks(hh * w).enumerate() {
                let ch = p % c;
                let (g, be) = (block.bn.gamma.data()[ch], block.bn.beta.data()[ch]);
                for x in chunk {
                    h.write(u8::from(g * *x + be > T::zero()));
                }
            }
            args.iter().for_each(|a| h.write(*a));
        }
    }

    pub fn batch_stats(&self) -> Vec<BatchStats<T>> {
        self.bn
            .iter()
            .map(|c| BatchStats {
                mean: c.batch_mean.clone(),
                var_unbiased: c.batch_var_unbiased.clone(),
            })
            .collect()
    }
}

impl<T: Scalar> SimpleNet<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, shape: &NetShape, rng: &mut R) -> Self {
        let mut c = in_channels;
        let blocks = shape
            .widths
            .iter()
            .map(|&w| {
                let b = Block {
                    conv: Conv2d::new(c, w, 3, 1, rng),
                    bn: BatchNorm2d::new(w),
                };
                c = w;
                b
            })
            .collect();
        let head = Conv2d::new(c, shape.embed_dim, shape.head_kernel, 0, rng);
        SimpleNet { blocks, head }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].conv.in_channels()
    }

    pub fn embed_dim(&self) -> usize {
        self.head.out_channels()
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            widths: self.blocks.iter().map(|b| b.conv.out_channels()).collect(),
            head_kernel: self.head.kernel(),
            embed_dim: self.embed_dim(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels() || s[0] == 0 {
            return Err(Error::Shape(format!(
                "backbone expects [batch, {}, h, w], got {s:?}",
                self.in_channels()
            )));
        }
        let (mut h, mut w) = (s[2], s[3]);
        for _ in &self.blocks {
            h /= 2;
            w /= 2;
        }
        if h < self.head.kernel() || w < self.head.kernel() {
            return Err(Error::Shape(format!("input {}x{} too small for this backbone", s[2], s[3])));
        }
        Ok(())
    }

    /// `[batch, embed_dim]` embeddings and, in train mode, the backward cache.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Option<SimpleNetCache<T>>)> {
        self.check_input(x)?;
        let train = mode == Mode::Train;
        let mut cache = SimpleNetCache {
            inputs: Vec::new(),
            bn: Vec::new(),
            pool_args: Vec::new(),
            pool_in_shapes: Vec::new(),
            head_input: Tensor::zeros(&[0]),
            head_hw: 0,
        };
        let mut cur = x.clone();
        for block in &self.blocks {
            let z = block.conv.forward(&cur);
            let (mut y, bn_cache) = block.bn.forward(&z, mode);
            drop(z);
            relu_inplace(&mut y);
            let (pooled, args) = maxpool2(&y);
            if train {
                cache.inputs.push(std::mem::replace(&mut cur, pooled));
                cache.bn.push(bn_cache.expect("train mode cache"));
                cache.pool_args.push(args);
                cache.pool_in_shapes.push(y.shape().to_vec());
            } else {
                cur = pooled;
            }
        }
        let z = self.head.forward(&cur);
        let [b, d, ho, wo] = dims4(&z);
        let hw = ho * wo;
        let inv = T::one() / T::of(hw as f64);
        let emb: Vec<T> = z.data().chunks(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let emb = Tensor::from_vec(&[b, d], emb)?;
        if !train {
            return Ok((emb, None));
        }
        cache.head_input = cur;
        cache.head_hw = hw;
        Ok((emb, Some(cache)))
    }

    /// Parameter gradients, in [`SimpleNet::trainable`] order, given the
    /// gradient of the loss with respect to the embeddings.
    pub fn backward(&self, cache: &SimpleNetCache<T>, d_emb: &Tensor<T>) -> Vec<Tensor<T>> {
        let [b, d] = [d_emb.shape()[0], d_emb.shape()[1]];
        let hw = cache.head_hw;
        let inv = T::one() / T::of(hw as f64);
        let side_h = cache.head_input.shape()[2] + 1 - self.head.kernel();
        let side_w = cache.head_input.shape()[3] + 1 - self.head.kernel();
        let mut dz = Tensor::zeros(&[b, d, side_h, side_w]);
        for (chunk, g) in dz.data_mut().chunks_mut(hw).zip(d_emb.data()) {
            chunk.iter_mut().for_each(|v| *v = *g * inv);
        }
        let (dx, dw_head, db_head) = self.head.backward(&cache.head_input, &dz, true);
        let mut grad = dx.expect("requested");
        let mut per_block: Vec<[Tensor<T>; 4]> = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let mut dy = maxpool2_backward(&grad, &cache.pool_args[i], &cache.pool_in_shapes[i]);
            let bc = &cache.bn[i];
            // ReLU mask from the recomputed BN output.
            let [_, c, h, w] = dims4(&dy);
            for (p, chunk) in dy.data_mut().chunks_mut(h * w).enumerate() {
                let ch = p % c;
                let (g, be) = (block.bn.gamma.data()[ch], block.bn.beta.data()[ch]);
                let xh = &bc.x_hat.data()[p * h * w..(p + 1) * h * w];
                for (v, x) in chunk.iter_mut().zip(xh) {
                    if !(g * *x + be > T::zero()) {
                        *v = T::zero();
                    }
                }
            }
            let (dz, dgamma, dbeta) = block.bn.backward(bc, &dy);
            let (dx, dw, db) = block.conv.backward(&cache.inputs[i], &dz, i > 0);
            per_block.push([dw, db, dgamma, dbeta]);
            if let Some(dx) = dx {
                grad = dx;
            }
        }
        let mut out: Vec<Tensor<T>> = per_block.into_iter().rev().flatten().collect();
        out.push(dw_head);
        out.push(db_head);
        out
    }

    /// Running statistics follow the batch statistics of a train-mode pass.
    pub fn update_running(&mut self, stats: &[BatchStats<T>]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            block.bn.update_running(&s.mean, &s.var_unbiased);
        }
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([&b.conv.weight, &b.conv.bias, &b.bn.gamma, &b.bn.beta]);
        }
        v.extend([&self.head.weight, &self.head.bias]);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend([&mut b.conv.weight, &mut b.conv.bias, &mut b.bn.gamma, &mut b.bn.beta]);
        }
        v.extend([&mut self.head.weight, &mut self.head.bias]);
        v
    }

    /// Every tensor including running statistics, with stable names.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (j, b) in self.blocks.iter().enumerate() {
            let p = format!("{prefix}.block{j}");
            v.push((format!("{p}.conv.weight"), &b.conv.weight));
            v.push((format!("{p}.conv.bias"), &b.conv.bias));
            v.push((format!("{p}.bn.gamma"), &b.bn.gamma));
            v.push((format!("{p}.bn.beta"), &b.bn.beta));
            v.push((format!("{p}.bn.running_mean"), &b.bn.running_mean));
            v.push((format!("{p}.bn.running_var"), &b.bn.running_var));
        }
        v.push((format!("{prefix}.head.weight"), &self.head.weight));
        v.push((format!("{prefix}.head.bias"), &self.head.bias));
        v
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        for (j, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}.block{j}");
            v.push((format!("{p}.conv.weight"), &mut b.conv.weight));
            v.push((format!("{p}.conv.bias"), &mut b.conv.bias));
            v.push((format!("{p}.bn.gamma"), &mut b.bn.gamma));
            v.push((format!("{p}.bn.beta"), &mut b.bn.beta));
            v.push((format!("{p}.bn.running_mean"), &mut b.bn.running_mean));
            v.push((format!("{p}.bn.running_var"), &mut b.bn.running_var));
        }
        v.push((format!("{prefix}.head.weight"), &mut self.head.weight));
        v.push((format!("{prefix}.head.bias"), &mut self.head.bias));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn default_shape_gives_256_features() {
        let mut rng = rng_from_seed(0);
        let net = SimpleNet::<f32>::new(3, &NetShape::default(), &mut rng);
        let x = Tensor::full(&[1, 3, 112, 112], 0.3f32);
        let (e, _) = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(e.shape(), &[1, 256]);
        assert_eq!(NetShape::default().head_side(112), Some(3));
    }

    #[test]
    fn spatial_trace() {
        let mut s = 112;
        let mut trace = Vec::new();
        for _ in 0..4 {
            s /= 2;
            trace.push(s);
        }
        trace.push(s + 1 - 5);
        assert_eq!(trace, vec![56, 28, 14, 7, 3]);
    }

    #[test]
    fn zero_input_zero_embedding() {
        let mut rng = rng_from_seed(1);
        let net = SimpleNet::<f32>::new(2, &NetShape::default(), &mut rng);
        let x = Tensor::zeros(&[2, 2, 112, 112]);
        for mode in [Mode::Eval, Mode::Train] {
            let (e, _) = net.forward(&x, mode).unwrap();
            assert!(e.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = rng_from_seed(1);
        let net = SimpleNet::<f32>::new(3, &NetShape::default(), &mut rng);
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 2, 112, 112]), Mode::Eval), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&Tensor::zeros(&[1, 3, 64, 64]), Mode::Eval), Err(Error::Shape(_))));
    }
}
