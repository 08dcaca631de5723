//! Artificial modalities: dynamic images from rank pooling at two
//! regularization strengths and optical flow over a far and a near frame
//! pair, plus the raw first/last frame pair used as an ablation baseline.

mod amod;
pub mod flow;
mod rankpool;
pub mod svr;
mod wheel;

use serde::{Deserialize, Serialize};

pub use amod::{read_bundle, write_bundle, AMOD_MAGIC, AMOD_VERSION};
pub use flow::{flow_energy, optical_flow, pyramid_sizes, FlowField, FlowParams};
pub use rankpool::{normalize_channels, pooling_features, rank_pool, rank_pool_many, RankPoolConfig};
pub use svr::{
    centered_targets, primal_objective, solve_linear_svr, time_varying_mean, FeatureSequence, SvrOptions,
    SvrProblem, SvrSolution,
};
pub use wheel::flow_to_color;

use crate::error::{Error, Result};
use crate::trackio::{Frame, Label, Track};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalityConfig {
    /// Frames per track after uniform selection.
    pub frames: usize,
    pub size: usize,
    /// Regularization for the two dynamic images, in bundle order.
    pub c_values: [f64; 2],
    pub rank_pool: RankPoolConfig,
    pub flow: FlowParams,
    /// Pixel displacement that maps to 1.0 in the network input.
    pub flow_range_px: f32,
}

impl Default for ModalityConfig {
    fn default() -> Self {
        ModalityConfig {
            frames: 16,
            size: 112,
            c_values: [1000.0, 1.0],
            rank_pool: RankPoolConfig::default(),
            flow: FlowParams::default(),
            flow_range_px: 8.0,
        }
    }
}

impl ModalityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.size == 0 {
            return Err(Error::InvalidArgument("modality frames >= 2 and size > 0 required".into()));
        }
        if self.c_values.iter().any(|c| !(*c > 0.0)) || !(self.rank_pool.epsilon >= 0.0) {
            return Err(Error::InvalidArgument("C must be positive and epsilon nonnegative".into()));
        }
        if !(self.flow_range_px > 0.0) {
            return Err(Error::InvalidArgument("flow_range_px must be positive".into()));
        }
        self.flow.validate()
    }

    fn check_track(&self, track: &Track) -> Result<()> {
        if track.len() != self.frames {
            return Err(Error::Shape(format!(
                "expected {} frames, got {}",
                self.frames,
                track.len()
            )));
        }
        let dims = track.dims();
        if dims != (self.size, self.size, 3) {
            return Err(Error::Shape(format!(
                "expected {0}x{0}x3 frames, got {1:?}",
                self.size, dims
            )));
        }
        Ok(())
    }
}

/// The four per-track network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityBundle {
    pub rp_c1000: Frame,
    pub rp_c1: Frame,
    pub flow_far: Frame,
    pub flow_near: Frame,
    pub label: Label,
    pub id: String,
}

impl ModalityBundle {
    pub fn tensors(&self) -> [&Frame; 4] {
        [&self.rp_c1000, &self.rp_c1, &self.flow_far, &self.flow_near]
    }

    pub fn into_tensors(self) -> Vec<Frame> {
        vec![self.rp_c1000, self.rp_c1, self.flow_far, self.flow_near]
    }
}

/// Two-channel network input `(u, v) / range`, clamped to `[-1, 1]`.
pub fn flow_tensor(flow: &FlowField, range_px: f32) -> Frame {
    let scale = |x: &f32| (x / range_px).clamp(-1.0, 1.0);
    let data = flow.u.iter().map(scale).chain(flow.v.iter().map(scale)).collect();
    Frame::new(flow.height, flow.width, 2, data).expect("flow is finite")
}

/// Computes all four modalities of a preprocessed track.
pub fn make_bundle(track: &Track, cfg: &ModalityConfig) -> Result<ModalityBundle> {
    cfg.check_track(track)?;
    let frames = track.frames();
    let mut pooled = rank_pool_many(frames, &cfg.c_values, &cfg.rank_pool)?.into_iter();
    let (rp_c1000, _) = pooled.next().expect("two C values");
    let (rp_c1, _) = pooled.next().expect("two C values");
    let far = optical_flow(&frames[0], &frames[frames.len() - 1], &cfg.flow)?;
    let near = optical_flow(&frames[0], &frames[1], &cfg.flow)?;
    Ok(ModalityBundle {
        rp_c1000,
        rp_c1,
        flow_far: flow_tensor(&far, cfg.flow_range_px),
        flow_near: flow_tensor(&near, cfg.flow_range_px),
        label: track.label,
        id: track.id.clone(),
    })
}

/// First and last frames stacked into one six-channel tensor.
pub fn raw_pair_concat(track: &Track, cfg: &ModalityConfig) -> Result<Frame> {
    cfg.check_track(track)?;
    let frames = track.frames();
    let (first, last) = (&frames[0], &frames[frames.len() - 1]);
    let data = first.data().iter().chain(last.data()).copied().collect();
    Frame::new(cfg.size, cfg.size, 6, data)
}

/// Which artificial modalities feed the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalitySet {
    /// Two dynamic images and two flow fields.
    #[default]
    Full,
    /// First and last raw frames, channel-concatenated.
    RawPair,
}

impl ModalitySet {
    /// Channel count of each network input, in order.
    pub fn input_channels(self) -> Vec<usize> {
        match self {
            ModalitySet::Full => vec![3, 3, 2, 2],
            ModalitySet::RawPair => vec![6],
        }
    }

    pub fn extract(self, track: &Track, cfg: &ModalityConfig) -> Result<Vec<Frame>> {
        match self {
            ModalitySet::Full => Ok(make_bundle(track, cfg)?.into_tensors()),
            ModalitySet::RawPair => Ok(vec![raw_pair_concat(track, cfg)?]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trackio::{render_track, select_uniform, SynthConfig, TrackKind};
    use crate::augment::{normalize_geometry, AugmentConfig};

    fn synthetic(kind: TrackKind) -> Track {
        let cfg = SynthConfig::default();
        let t = render_track(kind, &cfg, cfg.motion_amplitude, 0.0, 7, "t");
        let t = select_uniform(&t, 16).unwrap();
        normalize_geometry(&t, &AugmentConfig::default()).unwrap()
    }

    #[test]
    fn bundle_shapes() {
        let b = make_bundle(&synthetic(TrackKind::Real), &ModalityConfig::default()).unwrap();
        let dims: Vec<_> = b.tensors().iter().map(|f| (f.channels(), f.height(), f.width())).collect();
        assert_eq!(dims, vec![(3, 112, 112), (3, 112, 112), (2, 112, 112), (2, 112, 112)]);
        assert!(b.tensors().iter().all(|f| f.data().iter().all(|v| v.is_finite())));
    }

    #[test]
    fn static_fake_has_small_flow_and_real_moves_more_over_time() {
        let cfg = ModalityConfig::default();
        let still = make_bundle(&synthetic(TrackKind::Print), &cfg).unwrap();
        let mean_abs = |f: &Frame| f.data().iter().map(|v| v.abs() as f64).sum::<f64>() / f.data().len() as f64;
        // noise-only motion: well under a tenth of a pixel on average
        assert!(mean_abs(&still.flow_far) * 8.0 < 0.1, "{}", mean_abs(&still.flow_far) * 8.0);
        assert!(mean_abs(&still.flow_near) * 8.0 < 0.1);

        let real = make_bundle(&synthetic(TrackKind::Real), &cfg).unwrap();
        assert!(mean_abs(&real.flow_far) > mean_abs(&real.flow_near));
    }

    #[test]
    fn c_values_give_different_dynamic_images() {
        let b = make_bundle(&synthetic(TrackKind::Real), &ModalityConfig::default()).unwrap();
        let d2: f64 = b
            .rp_c1000
            .data()
            .iter()
            .zip(b.rp_c1.data())
            .map(|(a, c)| f64::from(a - c).powi(2))
            .sum();
        assert!(d2 > 0.0);
        let spread = b.rp_c1000.data().iter().fold(0.0f32, |m, v| m.max(*v))
            - b.rp_c1000.data().iter().fold(1.0f32, |m, v| m.min(*v));
        assert!(spread > 0.5);
    }

    #[test]
    fn raw_pair_layout() {
        let cfg = ModalityConfig::default();
        let real = synthetic(TrackKind::Real);
        let pair = raw_pair_concat(&real, &cfg).unwrap();
        assert_eq!(pair.dims(), (112, 112, 6));
        let n = 3 * 112 * 112;
        assert_ne!(&pair.data()[..n], &pair.data()[n..]);

        let still = real.with_frames(vec![real.frames()[3].clone(); 16]).unwrap();
        let pair = raw_pair_concat(&still, &cfg).unwrap();
        assert_eq!(&pair.data()[..n], &pair.data()[n..]);
    }

    #[test]
    fn bundle_is_pure() {
        let t = synthetic(TrackKind::Replay);
        let cfg = ModalityConfig::default();
        assert_eq!(make_bundle(&t, &cfg).unwrap(), make_bundle(&t, &cfg).unwrap());
    }

    #[test]
    fn rejects_wrong_shapes() {
        let cfg = ModalityConfig::default();
        let t = synthetic(TrackKind::Real);
        let short = t.with_frames(t.frames()[..8].to_vec()).unwrap();
        assert!(make_bundle(&short, &cfg).is_err());
        assert!(raw_pair_concat(&short, &cfg).is_err());
    }
}
