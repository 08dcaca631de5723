use serde::{Deserialize, Serialize};

use super::svr::{time_varying_mean, FeatureSequence, SvrOptions, SvrProblem, SvrSolution};
use crate::error::{Error, Result};
use crate::trackio::Frame;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankPoolConfig {
    pub epsilon: f64,
    /// Time-varying-mean preprocessing of the frame vectors.
    pub time_varying_mean: bool,
    pub solver: SvrOptions,
}

impl Default for RankPoolConfig {
    fn default() -> Self {
        RankPoolConfig {
            epsilon: 0.1,
            time_varying_mean: true,
            solver: SvrOptions::default(),
        }
    }
}

pub fn pooling_features(frames: &[Frame], cfg: &RankPoolConfig) -> Result<FeatureSequence> {
    if cfg.time_varying_mean {
        time_varying_mean(frames)
    } else {
        FeatureSequence::from_frames(frames)
    }
}

/// Rescales each channel of a `channels x h x w` weight vector to `[0, 1]`.
/// Channels with no spread map to 0.5.
pub fn normalize_channels(u: &[f64], channels: usize, h: usize, w: usize) -> Result<Frame> {
    let n = h * w;
    let mut data = vec![0.5f32; channels * n];
    for c in 0..channels {
        let chan = &u[c * n..(c + 1) * n];
        let (lo, hi) = chan
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if hi > lo {
            for (o, &x) in data[c * n..(c + 1) * n].iter_mut().zip(chan) {
                *o = ((x - lo) / (hi - lo)) as f32;
            }
        }
    }
    Frame::new(h, w, channels, data)
}

/// Dynamic images for several `C` values, sharing one feature sequence.
pub fn rank_pool_many(frames: &[Frame], cs: &[f64], cfg: &RankPoolConfig) -> Result<Vec<(Frame, SvrSolution)>> {
    let (h, w, ch) = frames
        .first()
        .map(Frame::dims)
        .ok_or_else(|| Error::Empty("no frames to pool".into()))?;
    if ch != 3 {
        return Err(Error::Shape(format!("rank pooling expects 3 channels, got {ch}")));
    }
    let fs = pooling_features(frames, cfg)?;
    let problem = SvrProblem::new(&fs);
    cs.iter()
        .map(|&c| {
            let sol = problem.solve(c, cfg.epsilon, &cfg.solver)?;
            let img = normalize_channels(&sol.u, ch, h, w)?;
            Ok((img, sol))
        })
        .collect()
}

/// Dynamic image of a track at regularization `c`.
pub fn rank_pool(frames: &[Frame], c: f64, cfg: &RankPoolConfig) -> Result<Frame> {
    Ok(rank_pool_many(frames, &[c], cfg)?.remove(0).0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_track_gives_mid_gray() {
        let f = Frame::new(4, 4, 3, (0..48).map(|i| (i as f32 * 0.37).sin() * 0.5 + 0.5).collect()).unwrap();
        let frames = vec![f; 16];
        for c in [1.0, 1000.0] {
            let img = rank_pool(&frames, c, &RankPoolConfig::default()).unwrap();
            assert!(img.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn output_in_unit_range() {
        let frames: Vec<Frame> = (0..16)
            .map(|t| Frame::new(5, 5, 3, (0..75).map(|i| ((i * 7 + t * 3) % 11) as f32 / 10.0).collect()).unwrap())
            .collect();
        let img = rank_pool(&frames, 1.0, &RankPoolConfig::default()).unwrap();
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(img.data().iter().any(|&v| v == 0.0));
        assert!(img.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn rejects_gray_frames() {
        let frames = vec![Frame::zeros(3, 3, 1); 4];
        assert!(rank_pool(&frames, 1.0, &RankPoolConfig::default()).is_err());
    }
}
