use std::path::Path;
use std::process::{Command, Output};

use amod_cli::RunConfig;
use amod_core::net::NetShape;

fn amod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amod")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth.tracks.n_real = 4;
    cfg.synth.tracks.n_fake = 4;
    cfg.synth.tracks.frames_per_track = 16;
    cfg.synth.tracks.image_size = 40;
    cfg.augment.target_size = 32;
    cfg.modality.size = 32;
    cfg.modality.frames = 8;
    cfg.train.epochs = 1;
    cfg.train.passes_per_epoch = 2;
    cfg.train.batch_size = 4;
    cfg.train.log_every = 1;
    cfg.train.net = NetShape {
        widths: vec![4, 8],
        head_kernel: 5,
        embed_dim: 8,
    };
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn full_pipeline_on_tiny_data() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &str| root.join(p).to_string_lossy().into_owned();
    let cfg = write_config(root, &tiny_config());

    let o = amod(&["--config", &cfg, "--seed", "3", "synth", "--out", &s("data")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("config sha256 "));
    assert!(stdout.contains("protocol 3: train 2+2, dev 1+1, test 1+1"));
    for id in 1..=3 {
        for split in ["train", "dev", "test"] {
            assert!(root.join(format!("data/p{id}/{split}.txt")).is_file());
        }
    }
    let data_cfg = s("data/config.toml");
    let written = RunConfig::load(Path::new(&data_cfg)).unwrap();
    assert_eq!(written.seed, 3);
    assert_eq!(written.data.protocols.len(), 3);

    let o = amod(&["--config", &data_cfg, "extract", "--split", "dev", "--protocol", "1", "--out", &s("bundles")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let bundles: Vec<_> = walk(&root.join("bundles/p1/dev"));
    assert_eq!(bundles.len(), 2);
    assert!(bundles.iter().all(|p| p.extension().unwrap() == "amod"));

    let o = amod(&["--config", &data_cfg, "train", "--protocol", "1", "--out", &s("models")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("final dev ACER"));
    assert!(root.join("models/p1/model.fusn").is_file());
    let log = std::fs::read_to_string(root.join("models/p1/train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,epoch,split,loss,acer"));
    assert_eq!(lines.count(), 3);

    let o = amod(&["--config", &data_cfg, "eval", "--protocol", "1", "--models", &s("models"), "--out", &s("report")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "report.txt", "p1/dev_scores.csv", "p1/test_scores.csv"] {
        assert!(root.join("report").join(f).is_file(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("report/report.json")).unwrap()).unwrap();
    assert_eq!(report["protocols"][0]["protocol_id"], 1);
    let acer = report["mean"]["acer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acer));

    let track = root.join("data/p1/real/0001");
    let o = amod(&["--config", &data_cfg, "visualize", "--track", &track.to_string_lossy(), "--out", &s("vis")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = walk(&root.join("vis"))
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 8 + 4);
    for n in ["flow_far.png", "flow_near.png", "rp_c1.png", "rp_c1000.png", "frame_01.png", "frame_08.png"] {
        assert!(names.iter().any(|x| x == n), "{n} in {names:?}");
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&amod(&["frobnicate"])), 1);
    assert_eq!(code(&amod(&["train", "--modalities", "depth"])), 1);
    assert_eq!(code(&amod(&["--help"])), 0);
}

#[test]
fn missing_protocol_lists_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"
[[data.protocols]]
id = 1
train = "nope/train.txt"
dev = "nope/dev.txt"
test = "nope/test.txt"
"#;
    let path = tmp.path().join("c.toml");
    std::fs::write(&path, cfg).unwrap();
    let o = amod(&["--config", &path.to_string_lossy(), "train", "--out", &tmp.path().join("o").to_string_lossy()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.txt"));
}

#[test]
fn bad_config_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.toml");
    std::fs::write(&path, "seed = 1\nbogus = 2\n").unwrap();
    assert_eq!(code(&amod(&["--config", &path.to_string_lossy(), "synth"])), 1);
    let o = Command::new(env!("CARGO_BIN_EXE_amod"))
        .env("AMOD_THREADS", "zero")
        .arg("synth")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let s = |p: &str| root.join(p).to_string_lossy().into_owned();
    let cfg = write_config(root, &tiny_config());
    assert_eq!(code(&amod(&["--config", &cfg, "synth", "--out", &s("data")])), 0);
    let o = amod(&["--config", &s("data/config.toml"), "eval", "--models", &s("none"), "--out", &s("r")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn visualize_rejects_missing_track() {
    let tmp = tempfile::tempdir().unwrap();
    let o = amod(&["visualize", "--track", &tmp.path().join("absent").to_string_lossy(), "--out", &tmp.path().to_string_lossy()]);
    assert_eq!(code(&o), 2);
}
