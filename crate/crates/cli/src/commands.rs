//! The five pipeline commands. Each is deterministic given its config.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use amod_core::augment::normalize_geometry;
use amod_core::eval::{evaluate_protocol, evaluate_protocols, write_scores, EvalReport, ScoredSet};
use amod_core::modality::{
    flow_to_color, make_bundle, optical_flow, rank_pool_many, write_bundle, ModalitySet,
};
use amod_core::net::{
    eval_inputs, load_checkpoint, save_checkpoint, score_inputs, scored_set, train, FusionNet, LogRecord,
    LOG_HEADER,
};
use amod_core::rng::derive_seed;
use amod_core::trackio::{
    generate_synthetic, load_track, load_tracks, materialize, select_uniform, Label, ProtocolSplit, Track,
};
use amod_core::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ProtocolPaths, RunConfig};
use crate::error::{CliError, CliResult};

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn protocol_dir(out: &Path, id: u32) -> PathBuf {
    out.join(format!("p{id}"))
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthSummary {
    pub protocol_id: u32,
    pub train: (usize, usize),
    pub dev: (usize, usize),
    pub test: (usize, usize),
}

fn counts(tracks: &[Track]) -> (usize, usize) {
    let real = tracks.iter().filter(|t| t.label == Label::Real).count();
    (real, tracks.len() - real)
}

/// Writes every synthetic protocol under `out/p<id>` and a ready-to-use
/// `out/config.toml` pointing at them.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> CliResult<Vec<SynthSummary>> {
    if cfg.synth.protocols.is_empty() {
        return Err(CliError::Config("no [[synth.protocols]] configured".into()));
    }
    cfg.synth.tracks.validate()?;
    create_dir(out)?;
    let mut written = cfg.clone();
    written.data.protocols.clear();
    let mut summary = Vec::new();
    for p in &cfg.synth.protocols {
        let mut tracks = cfg.synth.tracks.clone();
        tracks.test_shift = p.shift.clone();
        let mut split = generate_synthetic(&tracks, derive_seed(cfg.seed, "synth", &[p.id as u64]))?;
        split.protocol_id = p.id;
        let dir = protocol_dir(out, p.id);
        materialize(&split, &dir)?;
        let rel = PathBuf::from(format!("p{}", p.id));
        written.data.protocols.push(ProtocolPaths {
            id: p.id,
            train: rel.join("train.txt"),
            dev: rel.join("dev.txt"),
            test: rel.join("test.txt"),
        });
        let s = SynthSummary {
            protocol_id: p.id,
            train: counts(&split.train),
            dev: counts(&split.dev),
            test: counts(&split.test),
        };
        println!(
            "protocol {}: train {}+{}, dev {}+{}, test {}+{} (real+fake)",
            s.protocol_id, s.train.0, s.train.1, s.dev.0, s.dev.1, s.test.0, s.test.1
        );
        summary.push(s);
    }
    write_file(&out.join("config.toml"), written.to_toml().as_bytes())?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitSel {
    All,
    Train,
    Dev,
    Test,
}

impl SplitSel {
    fn names(self) -> &'static [&'static str] {
        match self {
            SplitSel::All => &["train", "dev", "test"],
            SplitSel::Train => &["train"],
            SplitSel::Dev => &["dev"],
            SplitSel::Test => &["test"],
        }
    }
}

fn list_of<'a>(p: &'a ProtocolPaths, split: &str) -> &'a Path {
    match split {
        "train" => &p.train,
        "dev" => &p.dev,
        _ => &p.test,
    }
}

/// Writes one AMOD bundle per track, augmentation disabled, to
/// `out/p<id>/<split>/<track id>.amod`. Returns the number of files.
pub fn cmd_extract(cfg: &RunConfig, split: SplitSel, only: Option<u32>, out: &Path) -> CliResult<usize> {
    cfg.validate()?;
    let mut n = 0;
    for p in cfg.protocols(only)? {
        for name in split.names() {
            let tracks = load_tracks(list_of(&p, name))?;
            let dir = protocol_dir(out, p.id).join(name);
            let files = tracks
                .par_iter()
                .map(|t| -> CliResult<(PathBuf, Vec<u8>)> {
                    let run = || {
                        let sel = select_uniform(t, cfg.modality.frames)?;
                        make_bundle(&normalize_geometry(&sel, &cfg.augment)?, &cfg.modality)
                    };
                    let bundle = run().map_err(|e| e.in_track(&t.id))?;
                    let mut bytes = Vec::new();
                    write_bundle(&mut bytes, &bundle)?;
                    Ok((dir.join(format!("{}.amod", t.id)), bytes))
                })
                .collect::<CliResult<Vec<_>>>()?;
            for (path, bytes) in &files {
                create_dir(path.parent().expect("file has a parent"))?;
                write_file(path, bytes)?;
            }
            println!("protocol {} {name}: {} bundles", p.id, files.len());
            n += files.len();
        }
    }
    Ok(n)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub protocol_id: u32,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub final_dev_acer: f64,
}

fn load_split(p: &ProtocolPaths) -> CliResult<ProtocolSplit> {
    Ok(ProtocolSplit::load(p.id, &p.train, &p.dev, &p.test)?)
}

/// Trains one model per protocol into `out/p<id>/model.fusn` with its log
/// in `out/p<id>/train_log.csv`.
pub fn cmd_train(cfg: &RunConfig, only: Option<u32>, out: &Path) -> CliResult<Vec<TrainSummary>> {
    cfg.validate()?;
    let mut summaries = Vec::new();
    for p in cfg.protocols(only)? {
        let split = load_split(&p)?;
        let dir = protocol_dir(out, p.id);
        create_dir(&dir)?;
        let log_path = dir.join("train_log.csv");
        let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
        writeln!(log, "{LOG_HEADER}").map_err(io_err(&log_path))?;
        let mut write_err = None;
        let mut on_log = |r: &LogRecord| {
            let res = writeln!(log, "{}", r.csv_line()).and_then(|_| log.flush());
            if let Err(e) = res {
                write_err.get_or_insert(e);
            }
            match r.acer {
                Some(a) => println!(
                    "protocol {} epoch {} step {}: dev loss {:.4}, dev ACER {:.2}%",
                    p.id,
                    r.epoch + 1,
                    r.step,
                    r.loss,
                    a * 100.0
                ),
                None => println!("protocol {} epoch {} step {}: train loss {:.4}", p.id, r.epoch + 1, r.step, r.loss),
            }
        };
        let seed = derive_seed(cfg.seed, "train", &[p.id as u64]);
        let outcome = train(&split.train, &split.dev, &cfg.train, &cfg.augment, &cfg.modality, seed, &mut on_log)?;
        if let Some(e) = write_err {
            return Err(io_err(&log_path)(e));
        }
        let ckpt = dir.join("model.fusn");
        save_checkpoint(&ckpt, &outcome.net, Some(&outcome.adam))?;
        let final_dev_acer = outcome
            .log
            .iter()
            .rev()
            .find_map(|r| r.acer)
            .expect("every epoch logs dev ACER");
        println!("protocol {}: final dev ACER {:.2}%", p.id, final_dev_acer * 100.0);
        summaries.push(TrainSummary {
            protocol_id: p.id,
            checkpoint: ckpt,
            log: log_path,
            final_dev_acer,
        });
    }
    Ok(summaries)
}

fn modalities_of(net: &FusionNet<f32>) -> CliResult<ModalitySet> {
    let chans = net.in_channels();
    [ModalitySet::Full, ModalitySet::RawPair]
        .into_iter()
        .find(|m| m.input_channels() == chans)
        .ok_or_else(|| CliError::Core(Error::Format(format!("checkpoint inputs {chans:?} match no modality set"))))
}

fn score_split(cfg: &RunConfig, net: &FusionNet<f32>, set: ModalitySet, tracks: &[Track]) -> CliResult<ScoredSet> {
    if tracks.is_empty() {
        return Err(CliError::Core(Error::Empty("protocol list".into())));
    }
    let inputs = tracks
        .par_iter()
        .map(|t| eval_inputs(t, &cfg.augment, &cfg.modality, set))
        .collect::<Result<Vec<_>, _>>()?;
    let scores = score_inputs(net, &inputs, cfg.eval.batch_size)?;
    Ok(scored_set(tracks, &scores)?)
}

/// Scores dev and test with `models/p<id>/model.fusn`, picks each threshold
/// on dev and writes scores, `report.json` and `report.txt` to `out`.
pub fn cmd_eval(cfg: &RunConfig, models: &Path, only: Option<u32>, out: &Path) -> CliResult<EvalReport> {
    cfg.validate()?;
    let protocols = cfg.protocols(only)?;
    let mut results = Vec::new();
    for p in &protocols {
        let ckpt = protocol_dir(models, p.id).join("model.fusn");
        if !ckpt.is_file() {
            return Err(CliError::Core(Error::MissingDirectory(ckpt)));
        }
        let (net, _) = load_checkpoint(&ckpt)?;
        let set = modalities_of(&net)?;
        let dev = load_tracks(&p.dev)?;
        let test = load_tracks(&p.test)?;
        let dev_scores = score_split(cfg, &net, set, &dev)?;
        let test_scores = score_split(cfg, &net, set, &test)?;
        let dir = protocol_dir(out, p.id);
        create_dir(&dir)?;
        for (name, s) in [("dev_scores.csv", &dev_scores), ("test_scores.csv", &test_scores)] {
            let path = dir.join(name);
            write_scores(File::create(&path).map_err(io_err(&path))?, s)?;
        }
        results.push(evaluate_protocol(p.id, &dev_scores, &test_scores, cfg.eval.threshold_rule)?);
    }
    let report = evaluate_protocols(results)?;
    create_dir(out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join("report.json"), json.as_bytes())?;
    write_file(&out.join("report.txt"), report.table().as_bytes())?;
    print!("{}", report.table());
    Ok(report)
}

/// Writes the selected frames, both dynamic images and color-coded flows
/// of one track directory. Returns the written paths.
pub fn cmd_visualize(cfg: &RunConfig, track_dir: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    let track = load_track(track_dir, Label::Real)?;
    let run = || -> amod_core::Result<Vec<(String, amod_core::trackio::Frame)>> {
        let sel = normalize_geometry(&select_uniform(&track, cfg.modality.frames)?, &cfg.augment)?;
        let frames = sel.frames();
        let mut images: Vec<(String, _)> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| (format!("frame_{:02}.png", i + 1), f.clone()))
            .collect();
        let pooled = rank_pool_many(frames, &cfg.modality.c_values, &cfg.modality.rank_pool)?;
        for (c, (img, _)) in cfg.modality.c_values.iter().zip(pooled) {
            images.push((format!("rp_c{c}.png"), img));
        }
        let far = optical_flow(&frames[0], &frames[frames.len() - 1], &cfg.modality.flow)?;
        let near = optical_flow(&frames[0], &frames[1], &cfg.modality.flow)?;
        images.push(("flow_far.png".into(), flow_to_color(&far)));
        images.push(("flow_near.png".into(), flow_to_color(&near)));
        Ok(images)
    };
    let images = run().map_err(|e| e.in_track(&track.id))?;
    create_dir(out)?;
    let mut paths = Vec::new();
    for (name, img) in images {
        let path = out.join(name);
        img.save(&path)?;
        paths.push(path);
    }
    println!("wrote {} images to {}", paths.len(), out.display());
    Ok(paths)
}
