use rand::Rng;
use rayon::prelude::*;

use super::layers::Mode;
use super::simplenet::{BatchStats, Fnv, NetShape, SimpleNet, SimpleNetCache};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Numerically stable binary cross-entropy on a logit.
pub fn bce_loss<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Max, mean and min over the modality axis, concatenated. The mean sums
/// the sorted values so that the result does not depend on modality order.
pub fn fuse<T: Scalar>(embeddings: &[&[T]]) -> Vec<T> {
    let m = embeddings.len();
    let d = embeddings[0].len();
    let mut out = vec![T::zero(); 3 * d];
    let mut col = Vec::with_capacity(m);
    let inv = T::one() / T::of(m as f64);
    for j in 0..d {
        col.clear();
        col.extend(embeddings.iter().map(|e| e[j]));
        col.sort_by(|a, b| a.partial_cmp(b).expect("finite embeddings"));
        out[j] = col[m - 1];
        out[d + j] = col.iter().copied().sum::<T>() * inv;
        out[2 * d + j] = col[0];
    }
    out
}

/// First modality holding the maximum and the minimum at one position.
fn extreme_indices<T: Scalar>(embeddings: &[Tensor<T>], at: usize) -> (usize, usize) {
    let (mut imax, mut imin) = (0, 0);
    for k in 1..embeddings.len() {
        let v = embeddings[k].data()[at];
        if v > embeddings[imax].data()[at] {
            imax = k;
        }
        if v < embeddings[imin].data()[at] {
            imin = k;
        }
    }
    (imax, imin)
}

/// Backbones (one per modality) feeding a pooled fully connected head.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet<T> {
    pub backbones: Vec<SimpleNet<T>>,
    pub fc_weight: Tensor<T>,
    pub fc_bias: Tensor<T>,
}

pub struct FusionCache<T> {
    backbones: Vec<SimpleNetCache<T>>,
    embeddings: Vec<Tensor<T>>,
    fused: Vec<Vec<T>>,
    logits: Vec<T>,
    targets: Vec<T>,
}

/// Output of a forward pass through the fusion network.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub logits: Vec<T>,
    pub fused: Vec<Vec<T>>,
}

impl<T: Scalar> FusionNet<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: &[usize], shape: &NetShape, rng: &mut R) -> Self {
        let backbones = in_channels.iter().map(|&c| SimpleNet::new(c, shape, rng)).collect();
        let fan_in = 3 * shape.embed_dim;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        FusionNet {
            backbones,
            fc_weight: Tensor::from_vec(&[1, fan_in], w).expect("shape"),
            fc_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn in_channels(&self) -> Vec<usize> {
        self.backbones.iter().map(|b| b.in_channels()).collect()
    }

    pub fn shape(&self) -> NetShape {
        self.backbones[0].shape()
    }

    fn check_inputs(&self, inputs: &[Tensor<T>]) -> Result<usize> {
        if inputs.len() != self.backbones.len() {
            return Err(Error::Shape(format!(
                "{} inputs for {} backbones",
                inputs.len(),
                self.backbones.len()
            )));
        }
        let batch = inputs[0].shape().first().copied().unwrap_or(0);
        if inputs.iter().any(|x| x.shape().first() != Some(&batch)) {
            return Err(Error::Shape("inputs disagree on batch size".into()));
        }
        Ok(batch)
    }

    /// Logit from already computed embeddings, one slice per modality.
    pub fn head(&self, embeddings: &[&[T]]) -> (Vec<T>, T) {
        let fused = fuse(embeddings);
        let mut z = self.fc_bias.data()[0];
        for (w, f) in self.fc_weight.data().iter().zip(&fused) {
            z += *w * *f;
        }
        (fused, z)
    }

    fn run(&self, inputs: &[Tensor<T>], mode: Mode) -> Result<(Forward<T>, Vec<Tensor<T>>, Vec<Option<SimpleNetCache<T>>>)> {
        let batch = self.check_inputs(inputs)?;
        let outs: Vec<_> = self
            .backbones
            .par_iter()
            .zip(inputs.par_iter())
            .map(|(net, x)| net.forward(x, mode))
            .collect::<Result<Vec<_>>>()?;
        let (embeddings, caches): (Vec<_>, Vec<_>) = outs.into_iter().unzip();
        let d = embeddings[0].shape()[1];
        let mut fwd = Forward {
            logits: Vec::with_capacity(batch),
            fused: Vec::with_capacity(batch),
        };
        for s in 0..batch {
            let rows: Vec<&[T]> = embeddings.iter().map(|e| &e.data()[s * d..(s + 1) * d]).collect();
            let (fused, z) = self.head(&rows);
            fwd.logits.push(z);
            fwd.fused.push(fused);
        }
        Ok((fwd, embeddings, caches))
    }

    /// Inference with running statistics.
    pub fn forward_eval(&self, inputs: &[Tensor<T>]) -> Result<Forward<T>> {
        Ok(self.run(inputs, Mode::Eval)?.0)
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        let mut v: Vec<&Tensor<T>> = self.backbones.iter().flat_map(|b| b.trainable()).collect();
        v.extend([&self.fc_weight, &self.fc_bias]);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = self.backbones.iter_mut().flat_map(|b| b.trainable_mut()).collect();
        v.extend([&mut self.fc_weight, &mut self.fc_bias]);
        v
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (i, b) in self.backbones.iter().enumerate() {
            v.extend(
                b.named(&format!("backbone{i}"))
                    .into_iter()
                    .map(|(n, _)| n)
                    .filter(|n| !n.contains("running")),
            );
        }
        v.extend(["fc.weight".to_string(), "fc.bias".to_string()]);
        v
    }

    /// All tensors, running statistics included.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<_> = self
            .backbones
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.named(&format!("backbone{i}")))
            .collect();
        v.push(("fc.weight".into(), &self.fc_weight));
        v.push(("fc.bias".into(), &self.fc_bias));
        v
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<_> = self
            .backbones
            .iter_mut()
            .enumerate()
            .flat_map(|(i, b)| b.named_mut(&format!("backbone{i}")))
            .collect();
        v.push(("fc.weight".into(), &mut self.fc_weight));
        v.push(("fc.bias".into(), &mut self.fc_bias));
        v
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Records one train-mode forward pass for the following backward pass.
pub struct Tape<T> {
    record: Option<FusionCache<T>>,
    batch_stats: Option<Vec<Vec<BatchStats<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape {
            record: None,
            batch_stats: None,
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Train-mode forward; returns the mean BCE loss and the logits.
    pub fn forward(&mut self, net: &FusionNet<T>, inputs: &[Tensor<T>], targets: &[T]) -> Result<(T, Vec<T>)> {
        let (fwd, embeddings, caches) = net.run(inputs, Mode::Train)?;
        if targets.len() != fwd.logits.len() {
            return Err(Error::Shape("one target per sample required".into()));
        }
        let n = T::of(targets.len() as f64);
        let loss = fwd
            .logits
            .iter()
            .zip(targets)
            .map(|(z, y)| bce_loss(*z, *y))
            .sum::<T>()
            / n;
        let caches: Vec<SimpleNetCache<T>> = caches.into_iter().map(|c| c.expect("train mode")).collect();
        self.batch_stats = Some(caches.iter().map(|c| c.batch_stats()).collect());
        self.record = Some(FusionCache {
            backbones: caches,
            embeddings,
            fused: fwd.fused,
            logits: fwd.logits.clone(),
            targets: targets.to_vec(),
        });
        Ok((loss, fwd.logits))
    }

    /// Hash of every piecewise-linear branch taken in the recorded pass:
    /// ReLU signs, max-pool winners and the modality picked by max and min
    /// fusion. Two passes with equal fingerprints lie on the same smooth
    /// piece of the loss.
    pub fn fingerprint(&self, net: &FusionNet<T>) -> Option<u64> {
        let rec = self.record.as_ref()?;
        let mut h = Fnv::new();
        for (b, c) in net.backbones.iter().zip(&rec.backbones) {
            c.fingerprint(b, &mut h);
        }
        let d = rec.embeddings[0].shape()[1];
        for s in 0..rec.logits.len() {
            for j in 0..d {
                let (imax, imin) = extreme_indices(&rec.embeddings, s * d + j);
                h.write(imax as u8);
                h.write(imin as u8);
            }
        }
        Some(h.0)
    }

    /// Moves BatchNorm running statistics towards the recorded batch
    /// statistics. Does nothing without a recorded pass.
    pub fn update_running(&mut self, net: &mut FusionNet<T>) {
        if let Some(stats) = self.batch_stats.take() {
            for (b, s) in net.backbones.iter_mut().zip(&stats) {
                b.update_running(s);
            }
        }
    }

    /// Gradients of `scale` times the recorded mean loss, in
    /// [`FusionNet::trainable`] order. Consumes the recorded pass.
    pub fn backward(&mut self, net: &FusionNet<T>, scale: T) -> Result<Vec<Tensor<T>>> {
        let rec = self.record.take().ok_or(Error::BackwardBeforeForward)?;
        let batch = rec.logits.len();
        let m = net.backbones.len();
        let d = rec.embeddings[0].shape()[1];
        let n = T::of(batch as f64);
        let dz: Vec<T> = rec
            .logits
            .iter()
            .zip(&rec.targets)
            .map(|(z, y)| scale * (sigmoid(*z) - *y) / n)
            .collect();
        let mut dw = Tensor::zeros(net.fc_weight.shape());
        let mut db = Tensor::zeros(&[1]);
        let mut d_emb: Vec<Tensor<T>> = (0..m).map(|_| Tensor::zeros(&[batch, d])).collect();
        let inv_m = T::one() / T::of(m as f64);
        let w = net.fc_weight.data();
        for s in 0..batch {
            db.data_mut()[0] += dz[s];
            for (g, f) in dw.data_mut().iter_mut().zip(&rec.fused[s]) {
                *g += dz[s] * *f;
            }
            for j in 0..d {
                let (imax, imin) = extreme_indices(&rec.embeddings, s * d + j);
                let g_avg = dz[s] * w[d + j] * inv_m;
                for e in d_emb.iter_mut() {
                    e.data_mut()[s * d + j] += g_avg;
                }
                d_emb[imax].data_mut()[s * d + j] += dz[s] * w[j];
                d_emb[imin].data_mut()[s * d + j] += dz[s] * w[2 * d + j];
            }
        }
        let per_backbone: Vec<Vec<Tensor<T>>> = net
            .backbones
            .par_iter()
            .zip(rec.backbones.par_iter())
            .zip(d_emb.par_iter())
            .map(|((b, c), g)| b.backward(c, g))
            .collect();
        let mut grads: Vec<Tensor<T>> = per_backbone.into_iter().flatten().collect();
        grads.push(dw);
        grads.push(db);
        Ok(grads)
    }
}
