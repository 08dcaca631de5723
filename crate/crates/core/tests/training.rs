use amod_core::augment::AugmentConfig;
use amod_core::modality::{ModalityConfig, ModalitySet};
use amod_core::net::*;
use amod_core::trackio::{generate_synthetic, ProtocolSplit, SynthConfig};
use amod_core::Error;

fn small_split(seed: u64) -> ProtocolSplit {
    let cfg = SynthConfig {
        n_real: 8,
        n_fake: 8,
        frames_per_track: 16,
        image_size: 40,
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, seed).unwrap()
}

fn small_configs() -> (TrainConfig, AugmentConfig, ModalityConfig) {
    let train = TrainConfig {
        batch_size: 4,
        epochs: 5,
        passes_per_epoch: 2,
        lr: 3e-3,
        log_every: 2,
        net: NetShape {
            widths: vec![4, 8],
            head_kernel: 5,
            embed_dim: 8,
        },
        ..TrainConfig::default()
    };
    let aug = AugmentConfig {
        target_size: 32,
        ..AugmentConfig::default()
    };
    let modality = ModalityConfig {
        size: 32,
        frames: 8,
        ..ModalityConfig::default()
    };
    (train, aug, modality)
}

#[test]
fn loss_decreases() {
    let split = small_split(1);
    let (cfg, aug, mcfg) = small_configs();
    let out = train(&split.train, &split.dev, &cfg, &aug, &mcfg, 3, &mut |_| {}).unwrap();
    let losses: Vec<f64> = out.log.iter().filter(|r| r.split == LogSplit::Train).map(|r| r.loss).collect();
    assert!(losses.len() >= 5);
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    let dev: Vec<_> = out.log.iter().filter(|r| r.split == LogSplit::Dev).collect();
    assert_eq!(dev.len(), cfg.epochs);
    assert!(dev.iter().all(|r| r.acer.is_some_and(|a| (0.0..=1.0).contains(&a))));
}

#[test]
fn zero_lr_keeps_parameters() {
    let split = small_split(2);
    let (mut cfg, aug, mcfg) = small_configs();
    cfg.lr = 0.0;
    cfg.epochs = 1;
    let out = train(&split.train, &split.dev, &cfg, &aug, &mcfg, 4, &mut |_| {}).unwrap();
    let mut rng = amod_core::rng::rng_from_seed(amod_core::rng::derive_seed(4, "init", &[]));
    let init = FusionNet::<f32>::new(&cfg.modalities.input_channels(), &cfg.net, &mut rng);
    assert_eq!(out.net.trainable(), init.trainable());
    assert!(out.adam.step > 0);
}

#[test]
fn fixed_seed_reproduces_log_and_weights() {
    let split = small_split(3);
    let (mut cfg, aug, mcfg) = small_configs();
    cfg.epochs = 2;
    let a = train(&split.train, &split.dev, &cfg, &aug, &mcfg, 9, &mut |_| {}).unwrap();
    let b = train(&split.train, &split.dev, &cfg, &aug, &mcfg, 9, &mut |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    write_checkpoint(&mut ca, &a.net, Some(&a.adam)).unwrap();
    write_checkpoint(&mut cb, &b.net, Some(&b.adam)).unwrap();
    assert_eq!(ca, cb);
    let c = train(&split.train, &split.dev, &cfg, &aug, &mcfg, 10, &mut |_| {}).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn raw_pair_ablation_trains() {
    let split = small_split(4);
    let (mut cfg, aug, mcfg) = small_configs();
    cfg.modalities = ModalitySet::RawPair;
    cfg.epochs = 1;
    let out = train(&split.train, &split.dev, &cfg, &aug, &mcfg, 1, &mut |_| {}).unwrap();
    assert_eq!(out.net.in_channels(), vec![6]);
}

#[test]
fn single_label_training_set_rejected() {
    let split = small_split(5);
    let (cfg, aug, mcfg) = small_configs();
    let reals: Vec<_> = split.train.iter().filter(|t| t.label.as_u8() == 1).cloned().collect();
    let err = train(&reals, &split.dev, &cfg, &aug, &mcfg, 1, &mut |_| {}).err().unwrap();
    assert!(matches!(err, Error::SingleLabel(_)));
    assert_eq!(err.to_string(), "train set must contain both labels");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let split = small_split(6);
    let (mut cfg, aug, mcfg) = small_configs();
    cfg.epochs = 1;
    let out = train(&split.train, &split.dev, &cfg, &aug, &mcfg, 2, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fusn");
    save_checkpoint(&path, &out.net, Some(&out.adam)).unwrap();
    let (net, adam) = load_checkpoint(&path).unwrap();
    assert_eq!(net, out.net);
    assert_eq!(adam.as_ref(), Some(&out.adam));
    let inputs: Vec<_> = split
        .test
        .iter()
        .map(|t| eval_inputs(t, &aug, &mcfg, cfg.modalities).unwrap())
        .collect();
    let a = logits(&out.net, &inputs, 4).unwrap();
    let b = logits(&net, &inputs, 4).unwrap();
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());

    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"FUSN");
    bytes.truncate(bytes.len() - 3);
    assert!(read_checkpoint(&mut bytes.as_slice()).is_err());
    let mut no_adam = Vec::new();
    write_checkpoint(&mut no_adam, &net, None).unwrap();
    assert!(read_checkpoint(&mut no_adam.as_slice()).unwrap().1.is_none());
}
