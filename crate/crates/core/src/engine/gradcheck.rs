//! Central finite differences and the analytic-vs-numeric comparisons built
//! on them.
//!
//! The numeric side only ever calls forward evaluation: node checks re-run a
//! single node, layer checks perturb a cached activation and re-run the rest
//! of the graph. Both go through the `f64` reference evaluator; with `f32`
//! outputs the rounding noise of a central difference (about `ulp(y)/eps`)
//! swamps a 1e-3 relative tolerance on small gradient entries. Coordinates whose perturbation flips a ReLU gate or a
//! max-pool winner are non-differentiable there and are skipped (counted in
//! the report).

use std::collections::BTreeMap;

use rand::Rng;

use super::forward::ForwardTrace;
use super::ops::{maxpool_winners, node_forward, node_vjp};
use super::reference::{self, Values64};
use crate::error::Result;
use crate::model::{ModelGraph, Node, Op};
use crate::tensor::Tensor;

/// Maximum accepted relative error between analytic and numeric gradients.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Default perturbation size.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Denominator floor for relative error, as a fraction of the largest
/// numeric gradient magnitude in the tensor being compared.
pub const RELATIVE_FLOOR: f64 = 1e-2;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (actual step)` for every coordinate.
///
/// The step is measured after rounding the perturbed coordinate to `f32`.
pub fn finite_diff_gradient<F>(mut f: F, point: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut probe = point.clone();
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let x = point.data()[i];
        let (plus, minus) = ((x as f64 + eps) as f32, (x as f64 - eps) as f32);
        probe.data_mut()[i] = plus;
        let fp = f(&probe)?;
        probe.data_mut()[i] = minus;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x;
        out.push(((fp - fm) / (plus as f64 - minus as f64)) as f32);
    }
    Ok(point.with_data(out))
}

/// Outcome of one analytic-vs-numeric comparison.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradComparison {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl GradComparison {
    pub fn merge(self, other: GradComparison) -> GradComparison {
        GradComparison {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }

    pub fn passes(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares elementwise, skipping coordinates flagged in `skip`.
pub fn compare(analytic: &Tensor, numeric: &[f64], skip: &[bool]) -> GradComparison {
    let scale = numeric
        .iter()
        .zip(skip)
        .filter(|(_, &s)| !s)
        .fold(0.0f64, |m, (v, _)| m.max(v.abs()));
    let floor = (scale * RELATIVE_FLOOR).max(1e-12);
    let mut cmp = GradComparison::default();
    for ((&a, &n), &s) in analytic.data().iter().zip(numeric).zip(skip) {
        if s {
            cmp.skipped += 1;
            continue;
        }
        cmp.checked += 1;
        cmp.max_rel_error = cmp.max_rel_error.max(relative_error(a as f64, n, floor));
    }
    cmp
}

/// Gate and routing decisions of a node: ReLU signs and max-pool winners.
fn node_pattern(node: &Node, inputs: &[&Tensor]) -> Vec<u32> {
    match node.op {
        Op::Relu => inputs[0].data().iter().map(|&v| (v > 0.0) as u32).collect(),
        Op::MaxPool2d(win) => maxpool_winners(inputs[0], win).into_iter().map(|w| w as u32).collect(),
        _ => Vec::new(),
    }
}

fn trace_pattern(trace: &ForwardTrace<'_>, after: usize) -> Vec<u32> {
    let graph = trace.graph();
    graph.nodes()[after..]
        .iter()
        .flat_map(|node| {
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&s| trace.value(s)).collect();
            node_pattern(node, &inputs)
        })
        .collect()
}

/// Central difference of `f` along coordinate `i` of `point`, in `f64`.
fn central_difference(
    point: &Values64,
    i: usize,
    eps: f64,
    mut f: impl FnMut(&Values64) -> (f64, bool),
) -> (f64, bool) {
    let mut probe = point.clone();
    probe.data[i] = point.data[i] + eps;
    let (fp, same_p) = f(&probe);
    probe.data[i] = point.data[i] - eps;
    let (fm, same_m) = f(&probe);
    ((fp - fm) / (2.0 * eps), same_p && same_m)
}

/// Checks `node_vjp` against finite differences of `Σ r ⊙ node(x)` for a
/// random cotangent `r`, for every input of the node.
///
/// The numeric side evaluates the node in `f64` through an independent
/// reference implementation.
pub fn check_node<R: Rng>(node: &Node, inputs: &[&Tensor], rng: &mut R, eps: f64) -> Result<GradComparison> {
    let output = node_forward(node, inputs)?;
    let cotangent = output.with_data((0..output.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let analytic = node_vjp(node, &cotangent, inputs, &output)?;
    let base_pattern = node_pattern(node, inputs);
    let out_dims = output.dims();
    let points: Vec<Values64> = inputs.iter().map(|t| Values64::from(*t)).collect();

    let mut result = GradComparison::default();
    for (which, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.numel());
        let mut skip = Vec::with_capacity(grad.numel());
        for i in 0..grad.numel() {
            let (d, same) = central_difference(&points[which], i, eps, |probe| {
                let mut args: Vec<&Values64> = points.iter().collect();
                args[which] = probe;
                let y = reference::eval_node(node, &args, out_dims);
                let dot = y.data.iter().zip(cotangent.data()).map(|(&a, &b)| a * b as f64).sum();
                (dot, reference::gate_pattern(node, &args, out_dims) == base_pattern)
            });
            numeric.push(d);
            skip.push(!same);
        }
        result = result.merge(compare(grad, &numeric, &skip));
    }
    Ok(result)
}

/// Checks an analytic activation gradient at `layer_slot` against central
/// differences of `loss`, which reads the values at `loss_slot` after the
/// graph suffix is re-run in `f64` on the perturbed activation.
pub fn check_layer_gradient<L>(
    trace: &ForwardTrace<'_>,
    layer_slot: usize,
    analytic: &Tensor,
    loss_slot: usize,
    loss: L,
    eps: f64,
) -> Result<GradComparison>
where
    L: Fn(&[f64]) -> f64,
{
    let graph = trace.graph();
    let base_pattern = trace_pattern(trace, layer_slot);
    let point = Values64::from(trace.value(layer_slot));
    let mut numeric = Vec::with_capacity(point.data.len());
    let mut skip = Vec::with_capacity(point.data.len());
    for i in 0..point.data.len() {
        let (d, same) = central_difference(&point, i, eps, |probe| {
            let (values, pattern) = reference::eval_suffix(graph, trace.values(), layer_slot, probe.clone());
            (loss(&values[loss_slot].data), pattern == base_pattern)
        });
        numeric.push(d);
        skip.push(!same);
    }
    Ok(compare(analytic, &numeric, &skip))
}

/// Cross-entropy of `logits` against class `q`, evaluated independently of
/// the seed code.
pub fn reference_cross_entropy(logits: &[f64], q: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    -(logits[q] - m - total.ln())
}

/// Per-kind node checks plus a target-layer check for one model and input.
#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub per_kind: BTreeMap<&'static str, GradComparison>,
    pub target_layer: Option<GradComparison>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_kind
            .values()
            .chain(self.target_layer.iter())
            .fold(0.0, |m, c| m.max(c.max_rel_error))
    }

    pub fn passes(&self) -> bool {
        self.max_rel_error() < GRADCHECK_TOLERANCE
    }
}

/// Runs node checks on every node's actual cached inputs, then checks the
/// contrast gradient at the target layer (cross-entropy against the
/// runner-up class, or squared error against the middle of the range).
pub fn gradcheck_model<R: Rng>(graph: &ModelGraph, input: &Tensor, rng: &mut R, eps: f64) -> Result<GradcheckReport> {
    use crate::contrast::{contrast_seed, ContrastTarget};
    use crate::engine::{backward_between, forward, predict, Prediction};

    let trace = forward(graph, input)?;
    let mut report = GradcheckReport::default();
    for node in graph.nodes() {
        let inputs: Vec<&Tensor> = node.inputs.iter().map(|&s| trace.value(s)).collect();
        let cmp = check_node(node, &inputs, rng, eps)?;
        let entry = report.per_kind.entry(node.op.kind()).or_default();
        *entry = entry.merge(cmp);
    }

    let target = match predict(&trace) {
        Prediction::Class { index, .. } => ContrastTarget::Class((index + 1) % graph.num_outputs()),
        Prediction::Value(_) => {
            let (lo, hi) = graph.output_range().expect("regression range");
            ContrastTarget::Scalar(0.5 * (lo + hi))
        }
    };
    let seeded = contrast_seed(&trace, target)?;
    let layer = graph.target_slot();
    let analytic = backward_between(&trace, seeded.slot, &seeded.seed.output_grad, layer)?;
    let loss = move |out: &[f64]| -> f64 {
        match seeded.target {
            ContrastTarget::Class(q) => reference_cross_entropy(out, q),
            ContrastTarget::Scalar(q) => (out[0] - q as f64).powi(2),
            ContrastTarget::Predicted => unreachable!("resolved above"),
        }
    };
    report.target_layer = Some(check_layer_gradient(&trace, layer, &analytic, seeded.slot, loss, eps)?);
    Ok(report)
}
