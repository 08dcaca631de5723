use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::fusion::{bce_loss, sigmoid, FusionNet, Tape};
use super::simplenet::NetShape;
use super::Tensor;
use crate::augment::{augment_track, normalize_geometry, AugmentConfig};
use crate::error::{Error, Result};
use crate::eval::{confusion_at, rates, select_threshold, ScoredSet, ThresholdRule};
use crate::modality::{ModalityConfig, ModalitySet};
use crate::rng::{derive_seed, rng_from_seed};
use crate::trackio::{has_both_labels, select_uniform, Frame, Track};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Shuffled passes over the training set per epoch.
    pub passes_per_epoch: usize,
    pub lr: f64,
    /// Mean training loss is logged every this many steps.
    pub log_every: usize,
    pub modalities: ModalitySet,
    pub sequence_augmentation: bool,
    pub net: NetShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 5,
            passes_per_epoch: 20,
            lr: 1e-4,
            log_every: 100,
            modalities: ModalitySet::Full,
            sequence_augmentation: true,
            net: NetShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || self.passes_per_epoch == 0 || self.log_every == 0 {
            return Err(Error::InvalidArgument("training counts must be positive".into()));
        }
        self.adam().validate()?;
        self.net.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogSplit {
    Train,
    Dev,
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: LogSplit,
    pub loss: f64,
    pub acer: Option<f64>,
}

pub const LOG_HEADER: &str = "step,epoch,split,loss,acer";

impl LogRecord {
    pub fn csv_line(&self) -> String {
        let split = match self.split {
            LogSplit::Train => "train",
            LogSplit::Dev => "dev",
        };
        let acer = self.acer.map(|a| a.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.step, self.epoch, split, self.loss, acer)
    }
}

pub struct TrainOutcome {
    pub net: FusionNet<f32>,
    pub adam: AdamState<f32>,
    pub log: Vec<LogRecord>,
}

/// Network inputs of one track without augmentation: uniform frame
/// selection, border removal and padding, then modality extraction.
pub fn eval_inputs(track: &Track, aug: &AugmentConfig, mcfg: &ModalityConfig, set: ModalitySet) -> Result<Vec<Frame>> {
    let run = || {
        let t = select_uniform(track, mcfg.frames)?;
        let t = normalize_geometry(&t, aug)?;
        set.extract(&t, mcfg)
    };
    run().map_err(|e| e.in_track(&track.id))
}

/// Stacks per-sample modality lists into one `[batch, c, h, w]` tensor per
/// modality.
pub fn stack_inputs(samples: &[&[Frame]]) -> Result<Vec<Tensor<f32>>> {
    let first = samples.first().ok_or_else(|| Error::Empty("empty batch".into()))?;
    (0..first.len())
        .map(|m| {
            let (h, w, c) = first[m].dims();
            let mut data = Vec::with_capacity(samples.len() * c * h * w);
            for s in samples {
                if s.len() != first.len() || s[m].dims() != (h, w, c) {
                    return Err(Error::Shape("batch samples differ in modality shapes".into()));
                }
                data.extend_from_slice(s[m].data());
            }
            Tensor::from_vec(&[samples.len(), c, h, w], data)
        })
        .collect()
}

/// Eval-mode logits, batch by batch.
pub fn logits(net: &FusionNet<f32>, inputs: &[Vec<Frame>], batch: usize) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let refs: Vec<&[Frame]> = chunk.iter().map(|v| v.as_slice()).collect();
        out.extend(net.forward_eval(&stack_inputs(&refs)?)?.logits);
    }
    if out.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logit".into()));
    }
    Ok(out)
}

/// Real-class probabilities in eval mode.
pub fn score_inputs(net: &FusionNet<f32>, inputs: &[Vec<Frame>], batch: usize) -> Result<Vec<f64>> {
    Ok(logits(net, inputs, batch)?.into_iter().map(|z| sigmoid(z) as f64).collect())
}

pub fn scored_set(tracks: &[Track], scores: &[f64]) -> Result<ScoredSet> {
    ScoredSet::from_parts(tracks.iter().zip(scores).map(|(t, s)| (t.id.clone(), *s, t.label)))
}

/// Mean BCE and lowest achievable ACER of the dev set.
fn dev_metrics(net: &FusionNet<f32>, dev: &[Track], inputs: &[Vec<Frame>], batch: usize) -> Result<(f64, f64)> {
    let z = logits(net, inputs, batch)?;
    let loss = z
        .iter()
        .zip(dev)
        .map(|(z, t)| bce_loss(*z as f64, t.label.target::<f64>()))
        .sum::<f64>()
        / dev.len() as f64;
    let scores: Vec<f64> = z.iter().map(|z| sigmoid(*z) as f64).collect();
    let set = scored_set(dev, &scores)?;
    let thr = select_threshold(&set, ThresholdRule::MinAcer)?;
    Ok((loss, rates(&confusion_at(&set, thr)?)?.acer))
}

/// Trains a fusion network from scratch. Every random draw derives from
/// `seed` and the sample's position in the schedule, so the result does not
/// depend on the number of worker threads.
pub fn train(
    train: &[Track],
    dev: &[Track],
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    mcfg: &ModalityConfig,
    seed: u64,
    on_log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()?;
    mcfg.validate()?;
    if !has_both_labels(train) {
        return Err(Error::SingleLabel("train set".into()));
    }
    if !has_both_labels(dev) {
        return Err(Error::SingleLabel("dev set".into()));
    }
    let mut init_rng = rng_from_seed(derive_seed(seed, "init", &[]));
    let mut net = FusionNet::<f32>::new(&cfg.modalities.input_channels(), &cfg.net, &mut init_rng);
    let mut adam = AdamState::new(cfg.adam(), &net.trainable());
    let selected = train
        .iter()
        .map(|t| select_uniform(t, mcfg.frames).map_err(|e| e.in_track(&t.id)))
        .collect::<Result<Vec<_>>>()?;
    let dev_inputs = dev
        .par_iter()
        .map(|t| eval_inputs(t, aug, mcfg, cfg.modalities))
        .collect::<Result<Vec<_>>>()?;

    let mut log = Vec::new();
    let mut emit = |r: LogRecord, log: &mut Vec<LogRecord>| {
        on_log(&r);
        log.push(r);
    };
    let mut tape = Tape::new();
    let mut step: u64 = 0;
    let (mut window, mut window_n) = (0.0f64, 0usize);
    for epoch in 0..cfg.epochs {
        for pass in 0..cfg.passes_per_epoch {
            let mut order: Vec<usize> = (0..selected.len()).collect();
            order.shuffle(&mut rng_from_seed(derive_seed(seed, "shuffle", &[epoch as u64, pass as u64])));
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let samples = chunk
                    .par_iter()
                    .enumerate()
                    .map(|(j, &ti)| {
                        let pos = (bi * cfg.batch_size + j) as u64;
                        let mut rng = rng_from_seed(derive_seed(seed, "augment", &[epoch as u64, pass as u64, pos]));
                        let track = &selected[ti];
                        let mut run = || {
                            let (t, _) = augment_track(track, aug, cfg.sequence_augmentation, &mut rng)?;
                            Ok((cfg.modalities.extract(&t, mcfg)?, t.label.target::<f32>()))
                        };
                        run().map_err(|e: Error| e.in_track(&track.id))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&[Frame]> = samples.iter().map(|(x, _)| x.as_slice()).collect();
                let targets: Vec<f32> = samples.iter().map(|(_, y)| *y).collect();
                let inputs = stack_inputs(&refs)?;
                let (loss, _) = tape.forward(&net, &inputs, &targets)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at step {}", step + 1)));
                }
                let grads = tape.backward(&net, 1.0)?;
                adam.update(net.trainable_mut(), &grads)?;
                tape.update_running(&mut net);
                step += 1;
                window += loss as f64;
                window_n += 1;
                if step % cfg.log_every as u64 == 0 {
                    let r = LogRecord {
                        step,
                        epoch,
                        split: LogSplit::Train,
                        loss: window / window_n as f64,
                        acer: None,
                    };
                    emit(r, &mut log);
                    (window, window_n) = (0.0, 0);
                }
            }
        }
        if !net.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        if window_n > 0 && epoch + 1 == cfg.epochs {
            let r = LogRecord {
                step,
                epoch,
                split: LogSplit::Train,
                loss: window / window_n as f64,
                acer: None,
            };
            emit(r, &mut log);
            (window, window_n) = (0.0, 0);
        }
        let (loss, acer) = dev_metrics(&net, dev, &dev_inputs, cfg.batch_size)?;
        emit(
            LogRecord {
                step,
                epoch,
                split: LogSplit::Dev,
                loss,
                acer: Some(acer),
            },
            &mut log,
        );
    }
    Ok(TrainOutcome { net, adam, log })
}
