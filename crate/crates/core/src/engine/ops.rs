//! Forward evaluation and vector-Jacobian products for every node kind.
//!
//! Every multiply-accumulate runs in `f64` in a fixed loop order and is
//! rounded to `f32` once per output element.

use crate::error::{Error, Result};
use crate::model::{Node, Op, Window};
use crate::tensor::{spatial_mean, Tensor};

fn check_inputs(node: &Node, inputs: &[&Tensor]) -> Result<()> {
    if inputs.len() != node.op.arity() {
        return Err(Error::shape(format!(
            "node `{}`: {} takes {} input(s), got {}",
            node.id,
            node.op.kind(),
            node.op.arity(),
            inputs.len()
        )));
    }
    Ok(())
}

/// Evaluates one node on concrete inputs.
pub fn node_forward(node: &Node, inputs: &[&Tensor]) -> Result<Tensor> {
    check_inputs(node, inputs)?;
    let shapes: Vec<_> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = node.op.output_shape(&node.id, &shapes, &node.weights)?;
    let x = inputs[0];
    let data = match node.op {
        Op::Conv2d(win) => conv2d_forward(x, &node.weights[0], node.weights.get(1), win, out_shape.dims()),
        Op::Relu => x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        Op::MaxPool2d(win) => maxpool_forward(x, win, out_shape.dims()),
        Op::AvgPool2d(win) => avgpool_forward(x, win, out_shape.dims()),
        Op::GlobalAvgPool => spatial_mean(x)?.into_data(),
        Op::Linear => linear_forward(x, &node.weights[0], node.weights.get(1)),
        Op::Flatten | Op::Identity => x.data().to_vec(),
        Op::Softmax => softmax_rows(x),
        Op::BatchNormEval { epsilon } => batchnorm_forward(x, &node.weights, epsilon),
        Op::Add => x.data().iter().zip(inputs[1].data()).map(|(a, b)| a + b).collect(),
    };
    Ok(Tensor::from_shape(out_shape, data))
}

/// Gradient with respect to each node input, given the gradient with
/// respect to the node output and the cached forward values.
pub fn node_vjp(node: &Node, upstream: &Tensor, inputs: &[&Tensor], output: &Tensor) -> Result<Vec<Tensor>> {
    check_inputs(node, inputs)?;
    if upstream.dims() != output.dims() {
        return Err(Error::shape(format!(
            "node `{}`: upstream gradient shape {} differs from output shape {}",
            node.id,
            upstream.shape(),
            output.shape()
        )));
    }
    let x = inputs[0];
    let g = upstream.data();
    let grad = match node.op {
        Op::Conv2d(win) => conv2d_vjp(x, &node.weights[0], g, win, output.dims()),
        Op::Relu => x
            .data()
            .iter()
            .zip(g)
            .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
            .collect(),
        Op::MaxPool2d(win) => maxpool_vjp(x, g, win, output.dims()),
        Op::AvgPool2d(win) => avgpool_vjp(x, g, win, output.dims()),
        Op::GlobalAvgPool => {
            let (_, _, h, w) = x.nchw()?;
            let area = (h * w) as f64;
            g.iter()
                .flat_map(|&gv| std::iter::repeat_n((gv as f64 / area) as f32, h * w))
                .collect()
        }
        Op::Linear => linear_vjp(x, &node.weights[0], g),
        Op::Flatten | Op::Identity => g.to_vec(),
        Op::Softmax => softmax_vjp(output, g),
        Op::BatchNormEval { epsilon } => {
            let (gamma, var) = (&node.weights[0], &node.weights[3]);
            let per_channel: Vec<f64> = gamma
                .data()
                .iter()
                .zip(var.data())
                .map(|(&ga, &v)| ga as f64 / (v as f64 + epsilon as f64).sqrt())
                .collect();
            channel_map(x, |c, i| (g[i] as f64 * per_channel[c]) as f32)
        }
        Op::Add => return Ok(vec![upstream.clone(), upstream.clone()]),
    };
    Ok(vec![x.with_data(grad)])
}

fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, win: Window, out: &[usize]) -> Vec<f32> {
    let (xd, wd) = (x.data(), w.data());
    let (ci, h, wi) = (x.dims()[1], x.dims()[2], x.dims()[3]);
    let (n, co, oh, ow) = (out[0], out[1], out[2], out[3]);
    let (kh, kw) = win.kernel;
    let mut res = Vec::with_capacity(n * co * oh * ow);
    for b in 0..n {
        for o in 0..co {
            let b0 = bias.map_or(0.0, |t| t.data()[o] as f64);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b0;
                    for c in 0..ci {
                        let plane = &xd[(b * ci + c) * h * wi..][..h * wi];
                        let kern = &wd[(o * ci + c) * kh * kw..][..kh * kw];
                        for ky in 0..kh {
                            let Some(y) = tap(oy, ky, win.stride.0, win.padding.0, h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(xx) = tap(ox, kx, win.stride.1, win.padding.1, wi) else {
                                    continue;
                                };
                                acc += kern[ky * kw + kx] as f64 * plane[y * wi + xx] as f64;
                            }
                        }
                    }
                    res.push(acc as f32);
                }
            }
        }
    }
    res
}

fn conv2d_vjp(x: &Tensor, w: &Tensor, g: &[f32], win: Window, out: &[usize]) -> Vec<f32> {
    let wd = w.data();
    let (ci, h, wi) = (x.dims()[1], x.dims()[2], x.dims()[3]);
    let (n, co, oh, ow) = (out[0], out[1], out[2], out[3]);
    let (kh, kw) = win.kernel;
    let mut acc = vec![0.0f64; x.numel()];
    for b in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let gv = g[((b * co + o) * oh + oy) * ow + ox] as f64;
                    if gv == 0.0 {
                        continue;
                    }
                    for c in 0..ci {
                        let kern = &wd[(o * ci + c) * kh * kw..][..kh * kw];
                        let base = (b * ci + c) * h * wi;
                        for ky in 0..kh {
                            let Some(y) = tap(oy, ky, win.stride.0, win.padding.0, h) else {
                                continue;
                            };
                            for kx in 0..kw {
                                let Some(xx) = tap(ox, kx, win.stride.1, win.padding.1, wi) else {
                                    continue;
                                };
                                acc[base + y * wi + xx] += kern[ky * kw + kx] as f64 * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Input coordinate for output `o`, kernel offset `k`, or `None` inside padding.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad).filter(|&i| i < len)
}

/// Calls `visit(out_index, input_positions)` for each output cell of a
/// pooling window. Positions inside padding are skipped.
fn for_each_window(x: &Tensor, win: Window, out: &[usize], mut visit: impl FnMut(usize, &[usize])) {
    let (h, w) = (x.dims()[2], x.dims()[3]);
    let planes = out[0] * out[1];
    let (oh, ow) = (out[2], out[3]);
    let mut taps = Vec::with_capacity(win.kernel.0 * win.kernel.1);
    for p in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                taps.clear();
                for ky in 0..win.kernel.0 {
                    let Some(y) = tap(oy, ky, win.stride.0, win.padding.0, h) else {
                        continue;
                    };
                    for kx in 0..win.kernel.1 {
                        let Some(xx) = tap(ox, kx, win.stride.1, win.padding.1, w) else {
                            continue;
                        };
                        taps.push(p * h * w + y * w + xx);
                    }
                }
                visit((p * oh + oy) * ow + ox, &taps);
            }
        }
    }
}

/// First row-major position holding the window maximum.
fn window_argmax(xd: &[f32], taps: &[usize]) -> usize {
    let mut best = taps[0];
    for &t in &taps[1..] {
        if xd[t] > xd[best] {
            best = t;
        }
    }
    best
}

fn maxpool_forward(x: &Tensor, win: Window, out: &[usize]) -> Vec<f32> {
    let xd = x.data();
    let mut res = vec![0.0; out.iter().product()];
    for_each_window(x, win, out, |o, taps| res[o] = xd[window_argmax(xd, taps)]);
    res
}

/// Winning input position of every max-pool window.
pub(crate) fn maxpool_winners(x: &Tensor, win: Window) -> Vec<usize> {
    let d = x.dims();
    let (oh, ow) = win.output_hw("maxpool", d[2], d[3]).expect("validated pool geometry");
    let out = [d[0], d[1], oh, ow];
    let xd = x.data();
    let mut res = vec![0; out.iter().product()];
    for_each_window(x, win, &out, |o, taps| res[o] = window_argmax(xd, taps));
    res
}

fn maxpool_vjp(x: &Tensor, g: &[f32], win: Window, out: &[usize]) -> Vec<f32> {
    let xd = x.data();
    let mut acc = vec![0.0f64; x.numel()];
    for_each_window(x, win, out, |o, taps| acc[window_argmax(xd, taps)] += g[o] as f64);
    acc.into_iter().map(|v| v as f32).collect()
}

// Padding counts toward the divisor.
fn avgpool_forward(x: &Tensor, win: Window, out: &[usize]) -> Vec<f32> {
    let xd = x.data();
    let area = (win.kernel.0 * win.kernel.1) as f64;
    let mut res = vec![0.0; out.iter().product()];
    for_each_window(x, win, out, |o, taps| {
        let sum: f64 = taps.iter().map(|&t| xd[t] as f64).sum();
        res[o] = (sum / area) as f32;
    });
    res
}

fn avgpool_vjp(x: &Tensor, g: &[f32], win: Window, out: &[usize]) -> Vec<f32> {
    let area = (win.kernel.0 * win.kernel.1) as f64;
    let mut acc = vec![0.0f64; x.numel()];
    for_each_window(x, win, out, |o, taps| {
        let share = g[o] as f64 / area;
        for &t in taps {
            acc[t] += share;
        }
    });
    acc.into_iter().map(|v| v as f32).collect()
}

fn linear_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Vec<f32> {
    let (n, fin) = (x.dims()[0], x.dims()[1]);
    let fout = w.dims()[0];
    let mut res = Vec::with_capacity(n * fout);
    for row in x.data().chunks_exact(fin) {
        for o in 0..fout {
            let wrow = &w.data()[o * fin..][..fin];
            let mut acc = bias.map_or(0.0, |b| b.data()[o] as f64);
            for (a, b) in wrow.iter().zip(row) {
                acc += *a as f64 * *b as f64;
            }
            res.push(acc as f32);
        }
    }
    debug_assert_eq!(res.len(), n * fout);
    res
}

fn linear_vjp(x: &Tensor, w: &Tensor, g: &[f32]) -> Vec<f32> {
    let fin = x.dims()[1];
    let fout = w.dims()[0];
    let mut res = Vec::with_capacity(x.numel());
    for grow in g.chunks_exact(fout) {
        for i in 0..fin {
            let mut acc = 0.0f64;
            for (o, &gv) in grow.iter().enumerate() {
                acc += w.data()[o * fin + i] as f64 * gv as f64;
            }
            res.push(acc as f32);
        }
    }
    res
}

/// Row-wise softmax over the last dimension, shifted by the row max.
pub(crate) fn softmax_rows(x: &Tensor) -> Vec<f32> {
    let last = *x.dims().last().unwrap();
    let mut res = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(last) {
        res.extend(softmax_f64(row).into_iter().map(|v| v as f32));
    }
    res
}

pub(crate) fn softmax_f64(row: &[f32]) -> Vec<f64> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax_vjp(y: &Tensor, g: &[f32]) -> Vec<f32> {
    let last = *y.dims().last().unwrap();
    let mut res = Vec::with_capacity(y.numel());
    for (srow, grow) in y.data().chunks_exact(last).zip(g.chunks_exact(last)) {
        let dot: f64 = srow.iter().zip(grow).map(|(&s, &gv)| s as f64 * gv as f64).sum();
        res.extend(
            srow.iter()
                .zip(grow)
                .map(|(&s, &gv)| (s as f64 * (gv as f64 - dot)) as f32),
        );
    }
    res
}

/// Applies `f(channel, flat_index)` over a tensor whose dim 1 is channels.
fn channel_map(x: &Tensor, mut f: impl FnMut(usize, usize) -> f32) -> Vec<f32> {
    let d = x.dims();
    let c = d[1];
    let inner: usize = d[2..].iter().product();
    (0..x.numel()).map(|i| f((i / inner) % c, i)).collect()
}

fn batchnorm_forward(x: &Tensor, stats: &[Tensor], epsilon: f32) -> Vec<f32> {
    let [gamma, beta, mean, var] = [&stats[0], &stats[1], &stats[2], &stats[3]].map(|t| t.data());
    let xd = x.data();
    channel_map(x, |c, i| {
        let inv = 1.0 / (var[c] as f64 + epsilon as f64).sqrt();
        ((xd[i] as f64 - mean[c] as f64) * inv * gamma[c] as f64 + beta[c] as f64) as f32
    })
}
