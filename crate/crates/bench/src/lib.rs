//! Shared fixtures for the benchmarks.

use vseg_core::synth::{generate, Rect};
use vseg_core::{SceneSpec, VideoBundle};

/// Moving rectangle scene at `height x width` with `n_frames` frames.
pub fn scene(height: usize, width: usize, n_frames: usize, feature_dim: usize) -> VideoBundle {
    let rect = Rect {
        top: height / 4,
        left: width / 4,
        height: height / 3,
        width: width / 3,
    };
    let mut spec = SceneSpec::moving_square(height, width, n_frames, rect, [1, 1]);
    spec.feature_dim = feature_dim;
    spec.feature_noise = 0.2;
    spec.flow_noise = 0.3;
    spec.seed = 7;
    generate(&spec).expect("valid benchmark scene")
}
