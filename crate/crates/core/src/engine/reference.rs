//! Straightforward `f64` evaluation of single nodes and graph suffixes.
//!
//! This is the numeric side of the gradient checks. It shares no indexing
//! code with the production kernels and never rounds to `f32`, so finite
//! differences taken through it are limited by truncation error rather than
//! by output rounding.

// Explicit index loops keep this readable against the textbook formulas.
#![allow(clippy::needless_range_loop)]

use crate::model::{ModelGraph, Node, Op, Window};
use crate::tensor::Tensor;

/// Dense `f64` values with the dims of the corresponding graph slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Values64 {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&Tensor> for Values64 {
    fn from(t: &Tensor) -> Self {
        Values64 {
            dims: t.dims().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

fn w64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Index of input row `o·stride + k − pad`, or `None` inside padding.
fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (o * stride + k) as i64 - pad as i64;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

/// Visits every pooling window: `(channel, out_y, out_x, [(in_y, in_x)])`.
fn windows(
    c: usize,
    h: usize,
    w: usize,
    win: Window,
    out_hw: (usize, usize),
    mut f: impl FnMut(usize, usize, usize, &[(usize, usize)]),
) {
    let mut cells = Vec::new();
    for ch in 0..c {
        for oy in 0..out_hw.0 {
            for ox in 0..out_hw.1 {
                cells.clear();
                for ky in 0..win.kernel.0 {
                    for kx in 0..win.kernel.1 {
                        if let (Some(y), Some(x)) = (
                            source(oy, ky, win.stride.0, win.padding.0, h),
                            source(ox, kx, win.stride.1, win.padding.1, w),
                        ) {
                            cells.push((y, x));
                        }
                    }
                }
                f(ch, oy, ox, &cells);
            }
        }
    }
}

/// Evaluates one node. `out_dims` is the statically inferred output shape.
pub fn eval_node(node: &Node, inputs: &[&Values64], out_dims: &[usize]) -> Values64 {
    let x = inputs[0];
    let numel: usize = out_dims.iter().product();
    let mut out = vec![0.0f64; numel];
    let chw = |d: &[usize]| (d[1], d[2], d[3]);
    match node.op {
        Op::Conv2d(win) => {
            let (ci, h, w) = chw(&x.dims);
            let (co, oh, ow) = chw(out_dims);
            let k = w64(&node.weights[0]);
            let bias = node.weights.get(1).map(w64);
            let (kh, kw) = win.kernel;
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.as_ref().map_or(0.0, |b| b[o]);
                        for i in 0..ci {
                            for ky in 0..kh {
                                let Some(y) = source(oy, ky, win.stride.0, win.padding.0, h) else {
                                    continue;
                                };
                                for kx in 0..kw {
                                    let Some(xx) = source(ox, kx, win.stride.1, win.padding.1, w) else {
                                        continue;
                                    };
                                    acc += k[((o * ci + i) * kh + ky) * kw + kx] * x.data[(i * h + y) * w + xx];
                                }
                            }
                        }
                        out[(o * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Op::Relu => {
            for (o, &v) in out.iter_mut().zip(&x.data) {
                *o = v.max(0.0);
            }
        }
        Op::MaxPool2d(win) | Op::AvgPool2d(win) => {
            let (c, h, w) = chw(&x.dims);
            let (oh, ow) = (out_dims[2], out_dims[3]);
            let area = (win.kernel.0 * win.kernel.1) as f64;
            let is_max = matches!(node.op, Op::MaxPool2d(_));
            windows(c, h, w, win, (oh, ow), |ch, oy, ox, cells| {
                let vals = cells.iter().map(|&(y, xx)| x.data[(ch * h + y) * w + xx]);
                out[(ch * oh + oy) * ow + ox] = if is_max {
                    vals.fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.sum::<f64>() / area
                };
            });
        }
        Op::GlobalAvgPool => {
            let (c, h, w) = chw(&x.dims);
            for ch in 0..c {
                out[ch] = x.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64;
            }
        }
        Op::Linear => {
            let k = w64(&node.weights[0]);
            let bias = node.weights.get(1).map(w64);
            let (n_out, n_in) = (out_dims[1], x.dims[1]);
            for o in 0..n_out {
                let dot: f64 = (0..n_in).map(|i| k[o * n_in + i] * x.data[i]).sum();
                out[o] = dot + bias.as_ref().map_or(0.0, |b| b[o]);
            }
        }
        Op::Flatten | Op::Identity => out.copy_from_slice(&x.data),
        Op::Softmax => {
            let n = *out_dims.last().expect("rank ≥ 1");
            for (row, dst) in x.data.chunks(n).zip(out.chunks_mut(n)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for (d, v) in dst.iter_mut().zip(row) {
                    *d = (v - m).exp() / total;
                }
            }
        }
        Op::BatchNormEval { epsilon } => {
            let (c, h, w) = chw(&x.dims);
            let [g, b, m, v] = [0, 1, 2, 3].map(|i| w64(&node.weights[i]));
            for ch in 0..c {
                let scale = g[ch] / (v[ch] + epsilon as f64).sqrt();
                for i in ch * h * w..(ch + 1) * h * w {
                    out[i] = (x.data[i] - m[ch]) * scale + b[ch];
                }
            }
        }
        Op::Add => {
            for ((o, a), b) in out.iter_mut().zip(&x.data).zip(&inputs[1].data) {
                *o = a + b;
            }
        }
    }
    Values64 {
        dims: out_dims.to_vec(),
        data: out,
    }
}

/// ReLU gates and max-pool winners (first position attaining the maximum,
/// row-major) for one node; empty for other kinds.
pub fn gate_pattern(node: &Node, inputs: &[&Values64], out_dims: &[usize]) -> Vec<u32> {
    let x = inputs[0];
    match node.op {
        Op::Relu => x.data.iter().map(|&v| (v > 0.0) as u32).collect(),
        Op::MaxPool2d(win) => {
            let (c, h, w) = (x.dims[1], x.dims[2], x.dims[3]);
            let mut winners = Vec::new();
            windows(c, h, w, win, (out_dims[2], out_dims[3]), |ch, _, _, cells| {
                let mut best = cells[0];
                for &cell in &cells[1..] {
                    if x.data[(ch * h + cell.0) * w + cell.1] > x.data[(ch * h + best.0) * w + best.1] {
                        best = cell;
                    }
                }
                winners.push(((ch * h + best.0) * w + best.1) as u32);
            });
            winners
        }
        _ => Vec::new(),
    }
}

/// Re-evaluates every node after `slot` with `replacement` at `slot`.
///
/// Slots at or before `slot` keep their cached values. Returns all slot
/// values and the concatenated gate pattern of the re-evaluated nodes.
pub fn eval_suffix(
    graph: &ModelGraph,
    cached: &[Tensor],
    slot: usize,
    replacement: Values64,
) -> (Vec<Values64>, Vec<u32>) {
    let mut values: Vec<Values64> = cached[..slot].iter().map(Values64::from).collect();
    values.push(replacement);
    let mut pattern = Vec::new();
    for (i, node) in graph.nodes().iter().enumerate().skip(slot) {
        let dims = graph.slot_shape(i + 1).dims();
        let y = {
            let ins: Vec<&Values64> = node.inputs.iter().map(|&s| &values[s]).collect();
            pattern.extend(gate_pattern(node, &ins, dims));
            eval_node(node, &ins, dims)
        };
        values.push(y);
    }
    (values, pattern)
}
