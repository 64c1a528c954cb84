//! Hand-built models and helpers shared by the integration suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use contrastcam::model::{GraphBuilder, ModelGraph, Task};
use contrastcam::toy::{rng, uniform};
use contrastcam::Tensor;
use rand::Rng;

pub fn t(dims: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

/// Moves every value at least `margin` away from zero, keeping its sign.
pub fn away_from_zero(x: &Tensor, margin: f32) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v < 0.0 { v - margin } else { v + margin })
        .collect();
    Tensor::new(x.dims().to_vec(), data).unwrap()
}

fn positive(r: &mut impl Rng, n: usize, lo: f32, hi: f32) -> Tensor {
    Tensor::new([n], (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn bn_stats(r: &mut impl Rng, c: usize) -> [Tensor; 4] {
    [
        positive(r, c, 0.5, 1.5),
        uniform(r, &[c], 0.2),
        uniform(r, &[c], 0.2),
        positive(r, c, 0.5, 1.5),
    ]
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

/// A 3×8×8 classifier that contains every supported node kind, including a
/// non-square strided kernel and padded pools.
pub fn node_zoo(seed: u64) -> ModelGraph {
    let mut r = rng(seed);
    GraphBuilder::new("zoo", Task::Classification, [3, 8, 8])
        .class_labels(labels(3))
        .conv2d(
            "conv1",
            "input",
            uniform(&mut r, &[4, 3, 3, 3], 0.5),
            Some(uniform(&mut r, &[4], 0.1)),
            1,
            1,
        )
        .batchnorm("bn", "conv1", bn_stats(&mut r, 4), 1e-5)
        .relu("relu", "bn")
        .maxpool2d("mpool", "relu", 3, 2, 1)
        .avgpool2d("apool", "mpool", 3, 1, 1)
        .add("sum", "apool", "mpool")
        .identity("ident", "sum")
        .conv2d("conv2", "ident", uniform(&mut r, &[5, 4, 2, 3], 0.5), None, 2, 0)
        .global_avgpool("gap", "conv2")
        .flatten("flat", "gap")
        .linear(
            "fc",
            "flat",
            uniform(&mut r, &[3, 5], 1.0),
            Some(uniform(&mut r, &[3], 0.1)),
        )
        .softmax("prob", "fc")
        .target_layer("conv2")
        .build()
        .unwrap()
}

/// Randomized small CNNs (at most five nodes, 3×8×8 input).
pub fn random_cnns(seed: u64) -> Vec<ModelGraph> {
    let mut r = rng(seed);
    let pooled = GraphBuilder::new("conv-pool-linear", Task::Classification, [3, 8, 8])
        .class_labels(labels(3))
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
        .flatten("flat", "pool1")
        .linear(
            "fc",
            "flat",
            uniform(&mut r, &[3, 64], 0.3),
            Some(uniform(&mut r, &[3], 0.1)),
        )
        .target_layer("conv1");
    let two_conv = GraphBuilder::new("two-conv", Task::Classification, [3, 8, 8])
        .class_labels(labels(5))
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
            uniform(&mut r, &[5, 4, 3, 3], 0.5),
            Some(uniform(&mut r, &[5], 0.1)),
            2,
            1,
        )
        .global_avgpool("gap", "conv2")
        .flatten("flat", "gap")
        .target_layer("conv2");
    let normed = GraphBuilder::new("conv-bn", Task::Classification, [3, 8, 8])
        .class_labels(labels(6))
        .conv2d("conv1", "input", uniform(&mut r, &[6, 3, 3, 3], 0.5), None, 1, 0)
        .batchnorm("bn", "conv1", bn_stats(&mut r, 6), 1e-5)
        .relu("relu", "bn")
        .global_avgpool("gap", "relu")
        .flatten("flat", "gap")
        .target_layer("conv1");
    let residual = GraphBuilder::new("residual", Task::Classification, [3, 8, 8])
        .class_labels(labels(4))
        .conv2d(
            "conv1",
            "input",
            uniform(&mut r, &[4, 3, 3, 3], 0.5),
            Some(uniform(&mut r, &[4], 0.1)),
            1,
            1,
        )
        .conv2d("conv2", "conv1", uniform(&mut r, &[4, 4, 3, 3], 0.5), None, 1, 1)
        .add("sum", "conv1", "conv2")
        .global_avgpool("gap", "sum")
        .flatten("flat", "gap")
        .target_layer("conv1");
    let regressor = GraphBuilder::new("regressor", Task::Regression, [3, 8, 8])
        .output_range(-10.0, 10.0)
        .conv2d(
            "conv1",
            "input",
            uniform(&mut r, &[4, 3, 3, 3], 0.5),
            Some(uniform(&mut r, &[4], 0.1)),
            1,
            1,
        )
        .relu("relu1", "conv1")
        .avgpool2d("pool1", "relu1", 2, 2, 0)
        .flatten("flat", "pool1")
        .linear("score", "flat", uniform(&mut r, &[1, 64], 0.3), None)
        .target_layer("conv1");
    [pooled, two_conv, normed, residual, regressor]
        .into_iter()
        .map(|b| b.build().unwrap())
        .collect()
}

/// Two-class colour detector over 3×16×16 inputs: a red channel detector and
/// a green one feed identical weights for the green evidence, so the classes
/// differ only in how much red they want.
pub fn quadrant_model() -> ModelGraph {
    // Centre tap: red − green (channel 0) and green − red (channel 1), plus a
    // faint 3×3 blur so evidence bleeds across the quadrant edge.
    let mut w = vec![0.0f32; 2 * 3 * 3 * 3];
    let at = |o: usize, i: usize, ky: usize, kx: usize| ((o * 3 + i) * 3 + ky) * 3 + kx;
    for ky in 0..3 {
        for kx in 0..3 {
            let tap = if ky == 1 && kx == 1 { 1.0 } else { 0.05 };
            w[at(0, 0, ky, kx)] = tap;
            w[at(0, 1, ky, kx)] = -tap;
            w[at(1, 1, ky, kx)] = tap;
            w[at(1, 0, ky, kx)] = -tap;
        }
    }
    GraphBuilder::new("quadrant", Task::Classification, [3, 16, 16])
        .class_labels(["red-corner", "plain"])
        .conv2d("conv", "input", t(&[2, 3, 3, 3], &w), None, 1, 1)
        .relu("relu", "conv")
        .global_avgpool("gap", "relu")
        .flatten("flat", "gap")
        .linear("fc", "flat", t(&[2, 2], &[3.0, 1.0, 0.0, 1.0]), None)
        .target_layer("conv")
        .build()
        .unwrap()
}

/// Green 16×16 image with a red top-left 8×8 quadrant and mild noise.
pub fn quadrant_image(seed: u64) -> Tensor {
    let mut r = rng(seed);
    let (h, w) = (16, 16);
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let red = y < 8 && x < 8;
            let (cr, cg) = if red { (1.0, 0.0) } else { (0.0, 1.0) };
            data[y * w + x] = cr + r.gen_range(-0.05..0.05);
            data[h * w + y * w + x] = cg + r.gen_range(-0.05..0.05);
            data[2 * h * w + y * w + x] = r.gen_range(-0.05..0.05);
        }
    }
    Tensor::new([1, 3, h, w], data).unwrap()
}

/// 2×2×2 input, 1×1 conv target layer with a 1×2×2×2 output, relu, global
/// pooling and a linear head whose columns each have one non-zero weight.
pub fn closed_form_model() -> ModelGraph {
    GraphBuilder::new("closed-form", Task::Classification, [2, 2, 2])
        .class_labels(["a", "b"])
        .conv2d("conv", "input", t(&[2, 2, 1, 1], &[1.0, 1.0, 0.0, -1.0]), None, 1, 0)
        .relu("relu", "conv")
        .global_avgpool("gap", "relu")
        .flatten("flat", "gap")
        .linear("fc", "flat", t(&[2, 2], &[2.0, 0.0, 0.0, -1.0]), None)
        .softmax("prob", "fc")
        .target_layer("conv")
        .build()
        .unwrap()
}

/// Single-channel 1×4 patch regressor: identity target layer, then a linear
/// sum of the four pixels. On an all-ones patch with Q = 3.5 every patch
/// map is exactly 1.
pub fn unit_patch_model() -> ModelGraph {
    GraphBuilder::new("unit-patch", Task::Regression, [1, 1, 4])
        .output_range(0.0, 8.0)
        .identity("feat", "input")
        .flatten("flat", "feat")
        .linear("score", "flat", t(&[1, 4], &[1.0; 4]), None)
        .target_layer("feat")
        .build()
        .unwrap()
}

/// Writes a model's manifest and blob store into `dir`.
pub fn write_model(dir: &Path, stem: &str, builder: GraphBuilder) -> (PathBuf, PathBuf) {
    let (manifest, blobs) = builder.into_parts();
    let m = dir.join(format!("{stem}.json"));
    let b = dir.join(format!("{stem}.bin"));
    std::fs::write(&m, manifest.to_json()).unwrap();
    std::fs::write(&b, blobs.to_bytes()).unwrap();
    (m, b)
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}
