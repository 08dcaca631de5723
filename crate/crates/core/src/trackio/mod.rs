//! Track loading, uniform frame selection, protocol lists and the synthetic
//! dataset generator.

mod frame;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub use frame::Frame;
pub use synth::{
    generate_synthetic, materialize, render_track, MaterializedSplit, SynthConfig, TestShift, TrackKind,
};

use crate::error::{Error, Result};

/// Binary liveness label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Fake = 0,
    Real = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Fake),
            1 => Some(Label::Real),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn target<T: num_traits::Float>(self) -> T {
        match self {
            Label::Fake => T::zero(),
            Label::Real => T::one(),
        }
    }
}

/// An ordered run of aligned face frames with one label.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    frames: Vec<Frame>,
    pub label: Label,
    pub id: String,
}

impl Track {
    pub fn new(frames: Vec<Frame>, label: Label, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if frames.is_empty() {
            return Err(Error::Empty(format!("track {id} has no frames")));
        }
        let dims = frames[0].dims();
        if let Some(f) = frames.iter().find(|f| f.dims() != dims) {
            return Err(Error::InconsistentDimensions {
                path: PathBuf::from(&id),
                expected: dims,
                got: f.dims(),
            });
        }
        Ok(Track { frames, label, id })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width, channels)` shared by every frame.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.frames[0].dims()
    }

    /// Replaces the frames, keeping label and id.
    pub fn with_frames(&self, frames: Vec<Frame>) -> Result<Track> {
        Track::new(frames, self.label, self.id.clone())
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}

fn frame_index(path: &Path) -> Option<u64> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    if ext != "png" && ext != "ppm" {
        return None;
    }
    let stem = path.file_stem()?.to_str()?;
    if stem.is_empty() || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    stem.parse().ok()
}

/// Lists the frame files of a track directory in numeric order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if let Some(idx) = frame_index(&path) {
            found.push((idx, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Loads every `NNNN.png` / `NNNN.ppm` frame in `dir`. The track id is the
/// directory path as given.
pub fn load_track(dir: &Path, label: Label) -> Result<Track> {
    load_track_with_id(dir, label, dir.to_string_lossy().into_owned())
}

pub fn load_track_with_id(dir: &Path, label: Label, id: String) -> Result<Track> {
    let paths = list_frames(dir)?;
    if paths.len() < 2 {
        return Err(Error::TooFewFrames {
            path: dir.to_path_buf(),
            found: paths.len(),
        });
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = Frame::load(p)?;
        if let Some(first) = frames.first().map(Frame::dims) {
            if f.dims() != first {
                return Err(Error::InconsistentDimensions {
                    path: p.clone(),
                    expected: first,
                    got: f.dims(),
                });
            }
        }
        frames.push(f);
    }
    Track::new(frames, label, id)
}

/// Indices `floor(j * T / L)` for `j = 0..L`. For `T < L` some frames repeat.
pub fn uniform_indices(total: usize, count: usize) -> Vec<usize> {
    (0..count).map(|j| (j * total / count).min(total - 1)).collect()
}

/// Picks `count` frames spread uniformly over the track.
pub fn select_uniform(track: &Track, count: usize) -> Result<Track> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!(
            "uniform selection needs at least 2 frames, got {count}"
        )));
    }
    let frames = uniform_indices(track.len(), count)
        .into_iter()
        .map(|i| track.frames[i].clone())
        .collect();
    track.with_frames(frames)
}

/// One `(track dir, label)` entry of a protocol list.
pub type ProtocolEntry = (PathBuf, Label);

/// Parses a protocol list: one `"<dir> <label>"` per line, `#` comments,
/// blank lines ignored.
pub fn load_protocol(list_path: &Path) -> Result<Vec<ProtocolEntry>> {
    let text = fs::read_to_string(list_path).map_err(|e| Error::io(list_path, e))?;
    parse_protocol(&text, list_path)
}

pub fn parse_protocol(text: &str, origin: &Path) -> Result<Vec<ProtocolEntry>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            message,
        };
        let (dir, label) = line
            .rsplit_once(char::is_whitespace)
            .ok_or_else(|| err(format!("expected \"<dir> <label>\", got {line:?}")))?;
        let label = label
            .parse::<u8>()
            .ok()
            .and_then(Label::from_u8)
            .ok_or_else(|| err(format!("label must be 0 or 1, got {label:?}")))?;
        out.push((PathBuf::from(dir.trim_end()), label));
    }
    Ok(out)
}

pub fn format_protocol(entries: &[ProtocolEntry]) -> String {
    entries
        .iter()
        .map(|(p, l)| format!("{} {}\n", p.display(), l.as_u8()))
        .collect()
}

pub fn write_protocol(list_path: &Path, entries: &[ProtocolEntry]) -> Result<()> {
    let mut f = fs::File::create(list_path).map_err(|e| Error::io(list_path, e))?;
    f.write_all(format_protocol(entries).as_bytes())
        .map_err(|e| Error::io(list_path, e))
}

/// Loads every track named in a protocol list. Track directories resolve
/// against the list file's directory; ids are the relative paths.
pub fn load_tracks(list_path: &Path) -> Result<Vec<Track>> {
    let base = list_path.parent().unwrap_or(Path::new("."));
    load_protocol(list_path)?
        .into_iter()
        .map(|(rel, label)| {
            let id = rel.to_string_lossy().into_owned();
            load_track_with_id(&base.join(&rel), label, id.clone()).map_err(|e| e.in_track(&id))
        })
        .collect()
}

/// Train/dev/test tracks of one evaluation protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSplit {
    pub protocol_id: u32,
    pub train: Vec<Track>,
    pub dev: Vec<Track>,
    pub test: Vec<Track>,
}

pub fn has_both_labels(tracks: &[Track]) -> bool {
    tracks.iter().any(|t| t.label == Label::Real) && tracks.iter().any(|t| t.label == Label::Fake)
}

impl ProtocolSplit {
    pub fn load(protocol_id: u32, train: &Path, dev: &Path, test: &Path) -> Result<Self> {
        let split = ProtocolSplit {
            protocol_id,
            train: load_tracks(train)?,
            dev: load_tracks(dev)?,
            test: load_tracks(test)?,
        };
        split.validate()?;
        Ok(split)
    }

    /// Checks that the three lists are disjoint by id and that dev and test
    /// hold both labels.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in self.train.iter().chain(&self.dev).chain(&self.test) {
            if !seen.insert(t.id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "track {} appears in more than one list",
                    t.id
                )));
            }
        }
        if !has_both_labels(&self.dev) {
            return Err(Error::SingleLabel(format!("protocol {} dev set", self.protocol_id)));
        }
        if !has_both_labels(&self.test) {
            return Err(Error::SingleLabel(format!("protocol {} test set", self.protocol_id)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn numbered_track(n: usize) -> Track {
        let frames = (0..n)
            .map(|i| Frame::new(1, 1, 1, vec![i as f32]).unwrap())
            .collect();
        Track::new(frames, Label::Real, "t").unwrap()
    }

    fn picked(t: &Track) -> Vec<usize> {
        t.frames().iter().map(|f| f.data()[0] as usize).collect()
    }

    #[test]
    fn every_third_of_48() {
        let s = select_uniform(&numbered_track(48), 16).unwrap();
        assert_eq!(picked(&s), (0..16).map(|j| 3 * j).collect::<Vec<_>>());
    }

    #[test]
    fn identity_when_lengths_match() {
        let s = select_uniform(&numbered_track(16), 16).unwrap();
        assert_eq!(picked(&s), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn twenty_frames_floor_formula() {
        // floor(j * 20 / 16), evaluated by hand.
        let expected = [0, 1, 2, 3, 5, 6, 7, 8, 10, 11, 12, 13, 15, 16, 17, 18];
        assert_eq!(uniform_indices(20, 16), expected);
        let s = select_uniform(&numbered_track(20), 16).unwrap();
        assert_eq!(picked(&s), expected);
    }

    #[test]
    fn short_tracks_repeat_frames() {
        let s = select_uniform(&numbered_track(5), 16).unwrap();
        let idx = picked(&s);
        assert_eq!(idx.len(), 16);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(*idx.last().unwrap(), 4);
    }

    #[test]
    fn rejects_tiny_selection() {
        assert!(select_uniform(&numbered_track(8), 1).is_err());
    }

    #[test]
    fn protocol_parsing() {
        let p = Path::new("list.txt");
        let got = parse_protocol("real/001 1\nfake/002 0\n", p).unwrap();
        assert_eq!(
            got,
            vec![
                (PathBuf::from("real/001"), Label::Real),
                (PathBuf::from("fake/002"), Label::Fake)
            ]
        );
        assert!(parse_protocol("", p).unwrap().is_empty());
        assert!(parse_protocol("# header\n\n  \n", p).unwrap().is_empty());
        match parse_protocol("real/001 2", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_protocol("a 1\n# c\nnolabel\n", p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn selection_is_idempotent_and_ordered(total in 1usize..200, count in 2usize..40) {
            let t = numbered_track(total);
            let once = select_uniform(&t, count).unwrap();
            let twice = select_uniform(&once, count).unwrap();
            prop_assert_eq!(&once, &twice);
            let idx = picked(&once);
            if total >= count {
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            } else {
                prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            }
        }

        #[test]
        fn protocol_text_round_trips(entries in prop::collection::vec(("[a-z0-9_/]{1,12}", any::<bool>()), 0..20)) {
            let entries: Vec<ProtocolEntry> = entries
                .into_iter()
                .map(|(p, r)| (PathBuf::from(p), if r { Label::Real } else { Label::Fake }))
                .collect();
            let text = format_protocol(&entries);
            prop_assert_eq!(parse_protocol(&text, Path::new("x")).unwrap(), entries);
        }
    }
}
