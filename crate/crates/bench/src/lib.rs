//! Shared fixtures for the criterion benches.

use cht_core::neuralnet::kernels::ConvGeom;
use cht_core::synthscene::{gen_truth, synth_sample, SceneConfig};
use cht_core::SampleArchive;

/// Deterministic, non-trivial fill without pulling in an RNG.
pub fn ramp(n: usize, modulus: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|i| ((i * 7919) % modulus) as f32 * scale - 0.5).collect()
}

/// Layer shapes of the default 3D and 2D networks on a 32×32 crop, batch 8:
/// `(name, in_channels, out_channels, time, kernel, padding)`.
pub fn layer_cases() -> Vec<(&'static str, ConvGeom)> {
    let g = |c, o, t, k: [usize; 3], p: [usize; 3]| ConvGeom::new(8, c, o, [t, 32, 32], k, [1, 1, 1], p).expect("valid geometry");
    vec![
        ("3d-first", g(16, 8, 12, [3, 3, 3], [1, 1, 1])),
        ("3d-inner", g(8, 8, 12, [3, 3, 3], [1, 1, 1])),
        ("3d-collapse", g(8, 8, 12, [12, 3, 3], [0, 1, 1])),
        ("2d-stack-first", g(148, 8, 1, [1, 3, 3], [0, 1, 1])),
    ]
}

/// Yearly samples of one square synthetic scene.
pub fn scene_samples(seed: u64, size_px: usize) -> Vec<SampleArchive> {
    let mut c = SceneConfig::new(seed);
    c.size_px = size_px;
    let truth = gen_truth(&c).expect("valid scene");
    c.years
        .iter()
        .map(|&y| synth_sample(&truth, y, &c, &format!("bench_{y}")).expect("renders"))
        .collect()
}
