//! Inputs shared by the benchmarks.

use amod_core::trackio::{generate_synthetic, SynthConfig, Track};

/// One moving synthetic track of 16 frames at `size x size`.
pub fn real_track(size: usize) -> Track {
    let cfg = SynthConfig {
        n_real: 1,
        n_fake: 1,
        frames_per_track: 16,
        image_size: size,
        ..SynthConfig::default()
    };
    let split = generate_synthetic(&cfg, 1).expect("valid config");
    split
        .train
        .into_iter()
        .chain(split.dev)
        .chain(split.test)
        .find(|t| t.label == amod_core::trackio::Label::Real)
        .expect("one real track")
}
