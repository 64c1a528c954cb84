//! Small seeded reference networks and images.
//!
//! These back the bundled fixtures, the benches and the test suites. Weights
//! come from a ChaCha stream so they are identical on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{GraphBuilder, Task};
use crate::tensor::Tensor;
use crate::visual::ImageBuffer;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-scale, scale)`.
pub fn uniform(rng: &mut impl Rng, dims: &[usize], scale: f32) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("positive dims")
}

pub const TOY_LABELS: [&str; 3] = ["cat", "dog", "flamingo"];

/// 3×8×8 classifier over [`TOY_LABELS`]:
/// conv3×3 → relu → maxpool2 → conv3×3 (target) → relu → gap → flatten →
/// linear → softmax.
pub fn toy_classifier(seed: u64) -> GraphBuilder {
    let mut r = rng(seed);
    GraphBuilder::new("toy-classifier", Task::Classification, [3, 8, 8])
        .normalization(vec![0.5; 3], vec![0.25; 3])
        .class_labels(TOY_LABELS)
        .conv2d(
            "conv1",
            "input",
            uniform(&mut r, &[4, 3, 3, 3], 0.5),
            Some(uniform(&mut r, &[4], 0.1)),
            1,
            1,
        )
        .relu("relu1", "conv1")
        .maxpool2d("pool1", "relu1", 2, 2, 0)
        .conv2d(
            "conv2",
            "pool1",
            uniform(&mut r, &[6, 4, 3, 3], 0.5),
            Some(uniform(&mut r, &[6], 0.1)),
            1,
            1,
        )
        .relu("relu2", "conv2")
        .global_avgpool("gap", "relu2")
        .flatten("flat", "gap")
        .linear(
            "fc",
            "flat",
            uniform(&mut r, &[3, 6], 1.0),
            Some(uniform(&mut r, &[3], 0.1)),
        )
        .softmax("prob", "fc")
        .target_layer("conv2")
}

/// 3×8×8 patch quality regressor with scores around 0.5:
/// conv3×3 → relu → conv3×3 (target) → relu → gap → flatten → linear.
pub fn toy_iqa(seed: u64) -> GraphBuilder {
    let mut r = rng(seed);
    GraphBuilder::new("toy-iqa", Task::Regression, [3, 8, 8])
        .normalization(vec![0.5; 3], vec![0.25; 3])
        .output_range(0.0, 1.0)
        .conv2d(
            "conv1",
            "input",
            uniform(&mut r, &[4, 3, 3, 3], 0.5),
            Some(uniform(&mut r, &[4], 0.1)),
            1,
            1,
        )
        .relu("relu1", "conv1")
        .conv2d(
            "conv2",
            "relu1",
            uniform(&mut r, &[4, 4, 3, 3], 0.5),
            Some(uniform(&mut r, &[4], 0.1)),
            1,
            1,
        )
        .relu("relu2", "conv2")
        .global_avgpool("gap", "relu2")
        .flatten("flat", "gap")
        .linear(
            "score",
            "flat",
            uniform(&mut r, &[1, 4], 0.5),
            Some(Tensor::new([1], vec![0.5]).expect("bias")),
        )
        .target_layer("conv2")
}

/// Deterministic RGB test card: smooth gradients plus a bright disc.
pub fn sample_image(width: usize, height: usize) -> ImageBuffer {
    let mut px = Vec::with_capacity(3 * width * height);
    let (cx, cy) = (width as f64 * 0.65, height as f64 * 0.35);
    let radius = width.min(height) as f64 * 0.2;
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64 / width.max(2) as f64;
            let fy = y as f64 / height.max(2) as f64;
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let disc = if d < radius { 120.0 } else { 0.0 };
            px.push((40.0 + 150.0 * fx + disc).min(255.0) as u8);
            px.push((30.0 + 180.0 * fy).min(255.0) as u8);
            px.push((200.0 - 120.0 * fx * fy + disc * 0.3).min(255.0) as u8);
        }
    }
    ImageBuffer::new(width, height, px).expect("sample image dims")
}
