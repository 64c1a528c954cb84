//! Validated computation graph.
//!
//! Values live in numbered slots: slot 0 is the graph input and slot
//! `i + 1` holds the output of `nodes[i]`. Nodes may only read slots that
//! precede them, so manifest order is a topological order and cycles are
//! impossible by construction.

use std::collections::HashMap;

use indexmap::IndexMap;

use super::blob::TensorBlobStore;
use super::manifest::{InputSpec, ModelManifest, NodeParams, NodeSpec, Task, GRAPH_INPUT};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Kernel geometry shared by convolution and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Window {
    /// `floor((in + 2·pad − kernel) / stride) + 1` per spatial axis.
    pub fn output_hw(&self, node: &str, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |input: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let span = input as i64 + 2 * p as i64 - k as i64;
            let out = span.div_euclid(s as i64) + 1;
            if out < 1 {
                return Err(Error::shape(format!(
                    "node `{node}`: inferred spatial dimension {out} from input {input}, \
                     kernel {k}, stride {s}, padding {p}"
                )));
            }
            Ok(out as usize)
        };
        Ok((
            axis(h, self.kernel.0, self.stride.0, self.padding.0)?,
            axis(w, self.kernel.1, self.stride.1, self.padding.1)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Conv2d(Window),
    Relu,
    MaxPool2d(Window),
    AvgPool2d(Window),
    GlobalAvgPool,
    Linear,
    Flatten,
    Softmax,
    BatchNormEval { epsilon: f32 },
    Add,
    Identity,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv2d(_) => "conv2d",
            Op::Relu => "relu",
            Op::MaxPool2d(_) => "maxpool2d",
            Op::AvgPool2d(_) => "avgpool2d",
            Op::GlobalAvgPool => "global_avgpool",
            Op::Linear => "linear",
            Op::Flatten => "flatten",
            Op::Softmax => "softmax",
            Op::BatchNormEval { .. } => "batchnorm_eval",
            Op::Add => "add",
            Op::Identity => "identity",
        }
    }

    pub fn arity(&self) -> usize {
        if matches!(self, Op::Add) {
            2
        } else {
            1
        }
    }

    fn from_spec(spec: &NodeSpec) -> Result<Op> {
        let p = &spec.params;
        let id = spec.id.as_str();
        let op = match spec.kind.as_str() {
            "conv2d" => Op::Conv2d(window(id, p, false)?),
            "relu" => Op::Relu,
            "maxpool2d" => Op::MaxPool2d(window(id, p, true)?),
            "avgpool2d" => Op::AvgPool2d(window(id, p, true)?),
            "global_avgpool" => {
                if let Some(size) = p.output_size {
                    if size.hw() != (1, 1) {
                        return Err(Error::validation(id, "global_avgpool supports output_size 1 only"));
                    }
                }
                Op::GlobalAvgPool
            }
            "linear" => Op::Linear,
            "flatten" => Op::Flatten,
            "softmax" => Op::Softmax,
            "batchnorm_eval" => {
                let epsilon = p.epsilon.unwrap_or(1e-5);
                if !(epsilon > 0.0) {
                    return Err(Error::validation(id, "epsilon must be positive"));
                }
                Op::BatchNormEval { epsilon }
            }
            "add" => Op::Add,
            "identity" => Op::Identity,
            other => {
                return Err(Error::UnsupportedNode {
                    node: spec.id.clone(),
                    kind: other.to_string(),
                })
            }
        };
        let allowed = match op {
            Op::Conv2d(_) | Op::MaxPool2d(_) | Op::AvgPool2d(_) => p.epsilon.is_none() && p.output_size.is_none(),
            Op::BatchNormEval { .. } => {
                p.kernel_size.is_none() && p.stride.is_none() && p.padding.is_none() && p.output_size.is_none()
            }
            Op::GlobalAvgPool => {
                p.kernel_size.is_none() && p.stride.is_none() && p.padding.is_none() && p.epsilon.is_none()
            }
            _ => p.is_empty(),
        };
        if !allowed {
            return Err(Error::validation(
                id,
                format!("parameters {p:?} do not apply to {}", spec.kind),
            ));
        }
        Ok(op)
    }

    /// Names of the weight tensors this op expects, `(required, optional)`.
    fn weight_arity(&self) -> (usize, usize) {
        match self {
            Op::Conv2d(_) | Op::Linear => (1, 1),
            Op::BatchNormEval { .. } => (4, 0),
            _ => (0, 0),
        }
    }

    /// Infers the output shape and checks weight shapes against the inputs.
    pub fn output_shape(&self, node: &str, inputs: &[&Shape], weights: &[Tensor]) -> Result<Shape> {
        let shape_err = |msg: String| Error::shape(format!("node `{node}`: {msg}"));
        let first = inputs[0];
        let want_rank4 = |s: &Shape| -> Result<(usize, usize, usize, usize)> {
            match s.dims() {
                &[n, c, h, w] => Ok((n, c, h, w)),
                _ => Err(shape_err(format!("expected rank-4 input, got shape {s}"))),
            }
        };
        let out = match self {
            Op::Conv2d(win) => {
                let (n, c, h, w) = want_rank4(first)?;
                let wt = &weights[0];
                let &[o, i, kh, kw] = wt.dims() else {
                    return Err(Error::shape(format!(
                        "node `{node}`: conv weight must be rank 4, got shape {}",
                        wt.shape()
                    )));
                };
                if i != c || (kh, kw) != win.kernel {
                    return Err(shape_err(format!(
                        "conv weight shape {} does not match {c} input channels and kernel {:?}",
                        wt.shape(),
                        win.kernel
                    )));
                }
                check_bias(node, weights.get(1), o)?;
                let (oh, ow) = win.output_hw(node, h, w)?;
                vec![n, o, oh, ow]
            }
            Op::MaxPool2d(win) | Op::AvgPool2d(win) => {
                let (n, c, h, w) = want_rank4(first)?;
                let (oh, ow) = win.output_hw(node, h, w)?;
                vec![n, c, oh, ow]
            }
            Op::GlobalAvgPool => {
                let (n, c, _, _) = want_rank4(first)?;
                vec![n, c, 1, 1]
            }
            Op::Linear => {
                let &[n, features] = first.dims() else {
                    return Err(shape_err(format!("linear expects a rank-2 input, got {first}")));
                };
                let wt = &weights[0];
                let &[o, i] = wt.dims() else {
                    return Err(Error::shape(format!(
                        "node `{node}`: linear weight must be rank 2, got shape {}",
                        wt.shape()
                    )));
                };
                if i != features {
                    return Err(shape_err(format!(
                        "linear weight shape {} does not accept {features} input features",
                        wt.shape()
                    )));
                }
                check_bias(node, weights.get(1), o)?;
                vec![n, o]
            }
            Op::Flatten => {
                let d = first.dims();
                if d.len() < 2 {
                    return Err(shape_err(format!("flatten needs rank ≥ 2, got {first}")));
                }
                vec![d[0], d[1..].iter().product()]
            }
            Op::BatchNormEval { .. } => {
                let d = first.dims();
                if d.len() < 2 {
                    return Err(shape_err(format!("batchnorm needs rank ≥ 2, got {first}")));
                }
                for t in weights {
                    if t.dims() != [d[1]] {
                        return Err(shape_err(format!(
                            "batchnorm statistics must have shape [{}], got {}",
                            d[1],
                            t.shape()
                        )));
                    }
                }
                d.to_vec()
            }
            Op::Add => {
                if inputs[0] != inputs[1] {
                    return Err(shape_err(format!(
                        "add operands differ: {} vs {}",
                        inputs[0], inputs[1]
                    )));
                }
                first.dims().to_vec()
            }
            Op::Relu | Op::Softmax | Op::Identity => first.dims().to_vec(),
        };
        Shape::new(out)
    }
}

fn check_bias(node: &str, bias: Option<&Tensor>, outputs: usize) -> Result<()> {
    match bias {
        Some(b) if b.dims() != [outputs] => Err(Error::shape(format!(
            "node `{node}`: bias must have shape [{outputs}], got {}",
            b.shape()
        ))),
        _ => Ok(()),
    }
}

fn window(node: &str, p: &NodeParams, pooling: bool) -> Result<Window> {
    let kernel = p
        .kernel_size
        .ok_or_else(|| Error::validation(node, "missing parameter kernel_size"))?
        .hw();
    let stride = match p.stride {
        Some(s) => s.hw(),
        None if pooling => kernel,
        None => (1, 1),
    };
    let padding = p.padding.map(|s| s.hw()).unwrap_or((0, 0));
    if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::validation(node, "kernel_size and stride must be positive"));
    }
    if pooling && (2 * padding.0 > kernel.0 || 2 * padding.1 > kernel.1) {
        return Err(Error::validation(
            node,
            "pooling padding must be at most half the kernel",
        ));
    }
    Ok(Window {
        kernel,
        stride,
        padding,
    })
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub op: Op,
    /// Slot indices read by this node.
    pub inputs: Vec<usize>,
    pub weights: Vec<Tensor>,
}

/// A loaded, validated network. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    manifest: ModelManifest,
    nodes: Vec<Node>,
    shapes: Vec<Shape>,
    slot_by_id: HashMap<String, usize>,
    target_slot: usize,
}

/// Parses and validates a manifest plus blob store into a graph.
pub fn load_model(manifest_bytes: &[u8], blob_bytes: &[u8]) -> Result<ModelGraph> {
    if manifest_bytes.is_empty() {
        return Err(Error::Parse {
            line: 0,
            column: 0,
            message: "manifest is empty".into(),
        });
    }
    if blob_bytes.is_empty() {
        return Err(Error::Blob {
            offset: 0,
            message: "blob file is empty".into(),
        });
    }
    let manifest = ModelManifest::from_json(manifest_bytes)?;
    let blobs = TensorBlobStore::from_bytes(blob_bytes)?;
    ModelGraph::build(manifest, &blobs)
}

/// Per-node output shapes keyed by node id, in evaluation order, with the
/// graph input first under [`GRAPH_INPUT`].
pub fn infer_shapes(graph: &ModelGraph) -> IndexMap<String, Shape> {
    std::iter::once(GRAPH_INPUT.to_string())
        .chain(graph.nodes.iter().map(|n| n.id.clone()))
        .zip(graph.shapes.iter().cloned())
        .collect()
}

impl ModelGraph {
    pub fn build(manifest: ModelManifest, blobs: &TensorBlobStore) -> Result<ModelGraph> {
        let spec = &manifest.input_spec;
        validate_input_spec(spec)?;
        let input_shape = Shape::new([1, spec.channels(), spec.height(), spec.width()])?;

        let mut slot_by_id = HashMap::new();
        slot_by_id.insert(GRAPH_INPUT.to_string(), 0usize);
        let declared: HashMap<&str, usize> = manifest
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let mut nodes = Vec::with_capacity(manifest.nodes.len());
        let mut shapes = vec![input_shape];

        for (index, ns) in manifest.nodes.iter().enumerate() {
            if ns.id.is_empty() {
                return Err(Error::validation("", "empty node id"));
            }
            if slot_by_id.contains_key(&ns.id) {
                return Err(Error::validation(&ns.id, "duplicate node id"));
            }
            let op = Op::from_spec(ns)?;
            if ns.inputs.len() != op.arity() {
                return Err(Error::validation(
                    &ns.id,
                    format!("{} takes {} input(s), got {}", ns.kind, op.arity(), ns.inputs.len()),
                ));
            }
            let mut inputs = Vec::with_capacity(ns.inputs.len());
            for name in &ns.inputs {
                match slot_by_id.get(name) {
                    Some(&slot) => inputs.push(slot),
                    None if declared.get(name.as_str()).is_some_and(|&j| j >= index) => {
                        return Err(Error::validation(
                            &ns.id,
                            format!("input `{name}` is not computed before this node (cycle or out-of-order)"),
                        ))
                    }
                    None => return Err(Error::validation(&ns.id, format!("input `{name}` does not exist"))),
                }
            }
            let (required, optional) = op.weight_arity();
            if ns.weight_refs.len() < required || ns.weight_refs.len() > required + optional {
                return Err(Error::validation(
                    &ns.id,
                    format!(
                        "{} expects {required}..={} weight refs, got {}",
                        ns.kind,
                        required + optional,
                        ns.weight_refs.len()
                    ),
                ));
            }
            let weights = ns
                .weight_refs
                .iter()
                .map(|r| blobs.get(r).cloned())
                .collect::<Result<Vec<_>>>()?;
            let in_shapes: Vec<&Shape> = inputs.iter().map(|&s| &shapes[s]).collect();
            let out = op.output_shape(&ns.id, &in_shapes, &weights)?;
            shapes.push(out);
            slot_by_id.insert(ns.id.clone(), index + 1);
            nodes.push(Node {
                id: ns.id.clone(),
                op,
                inputs,
                weights,
            });
        }

        let Some(last) = nodes.last() else {
            return Err(Error::validation("", "graph has no nodes"));
        };
        let out_shape = &shapes[nodes.len()];
        match manifest.task {
            Task::Classification => {
                let labels = manifest.class_labels.as_deref().unwrap_or(&[]);
                if labels.len() < 2 {
                    return Err(Error::validation(
                        &last.id,
                        "classification needs at least 2 class_labels",
                    ));
                }
                if out_shape.numel() != labels.len() {
                    return Err(Error::shape(format!(
                        "node `{}`: output shape {out_shape} does not match {} class labels",
                        last.id,
                        labels.len()
                    )));
                }
            }
            Task::Regression => {
                let Some([lo, hi]) = manifest.output_range else {
                    return Err(Error::validation(&last.id, "regression needs output_range"));
                };
                if !(lo < hi) {
                    return Err(Error::validation(
                        &last.id,
                        format!("output_range [{lo}, {hi}] is empty"),
                    ));
                }
                if out_shape.numel() != 1 {
                    return Err(Error::shape(format!(
                        "node `{}`: regression output must be a scalar, got {out_shape}",
                        last.id
                    )));
                }
            }
        }

        let target_slot = *slot_by_id
            .get(&manifest.target_layer)
            .ok_or_else(|| Error::Lookup(manifest.target_layer.clone()))?;
        if shapes[target_slot].rank() != 4 {
            return Err(Error::validation(
                &manifest.target_layer,
                format!("target layer output must be rank 4, got {}", shapes[target_slot]),
            ));
        }

        Ok(ModelGraph {
            manifest,
            nodes,
            shapes,
            slot_by_id,
            target_slot,
        })
    }

    pub fn manifest(&self) -> &ModelManifest {
        &self.manifest
    }

    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn task(&self) -> Task {
        self.manifest.task
    }

    pub fn input_spec(&self) -> &InputSpec {
        &self.manifest.input_spec
    }

    pub fn class_labels(&self) -> Option<&[String]> {
        self.manifest.class_labels.as_deref()
    }

    pub fn output_range(&self) -> Option<(f32, f32)> {
        self.manifest.output_range.map(|[a, b]| (a, b))
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Slot of the final node.
    pub fn output_slot(&self) -> usize {
        self.nodes.len()
    }

    /// Number of outputs (classes, or 1 for regression).
    pub fn num_outputs(&self) -> usize {
        self.shapes[self.output_slot()].numel()
    }

    pub fn slot_shape(&self, slot: usize) -> &Shape {
        &self.shapes[slot]
    }

    pub fn input_shape(&self) -> &Shape {
        &self.shapes[0]
    }

    pub fn slot_of(&self, id: &str) -> Result<usize> {
        self.slot_by_id
            .get(id)
            .copied()
            .ok_or_else(|| Error::Lookup(id.to_string()))
    }

    pub fn slot_name(&self, slot: usize) -> &str {
        if slot == 0 {
            GRAPH_INPUT
        } else {
            &self.nodes[slot - 1].id
        }
    }

    pub fn target_slot(&self) -> usize {
        self.target_slot
    }

    pub fn target_layer(&self) -> &str {
        &self.manifest.target_layer
    }

    /// Slot that carries logits: the input of a terminal softmax, otherwise
    /// the output slot.
    pub fn logits_slot(&self) -> usize {
        let last = self.nodes.last().expect("graph has nodes");
        if last.op == Op::Softmax {
            last.inputs[0]
        } else {
            self.output_slot()
        }
    }
}

fn validate_input_spec(spec: &InputSpec) -> Result<()> {
    let c = spec.channels();
    if spec.shape.contains(&0) {
        return Err(Error::validation(
            GRAPH_INPUT,
            format!("input shape {:?} has a zero dimension", spec.shape),
        ));
    }
    if spec.mean.len() != c || spec.std.len() != c {
        return Err(Error::validation(
            GRAPH_INPUT,
            format!("mean/std need {c} entries, got {}/{}", spec.mean.len(), spec.std.len()),
        ));
    }
    if spec.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::validation(GRAPH_INPUT, "std entries must be positive"));
    }
    Ok(())
}
