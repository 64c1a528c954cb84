use super::ops::node_forward;
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Task};
use crate::tensor::Tensor;

/// Every value computed during one forward pass, indexed by graph slot.
#[derive(Debug, Clone)]
pub struct ForwardTrace<'g> {
    graph: &'g ModelGraph,
    values: Vec<Tensor>,
}

impl<'g> ForwardTrace<'g> {
    pub fn graph(&self) -> &'g ModelGraph {
        self.graph
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.values[slot]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    /// Cached output of the node with this id (or the graph input).
    pub fn activation(&self, id: &str) -> Result<&Tensor> {
        Ok(&self.values[self.graph.slot_of(id)?])
    }

    pub fn input(&self) -> &Tensor {
        &self.values[0]
    }

    pub fn output(&self) -> &Tensor {
        &self.values[self.graph.output_slot()]
    }

    pub fn logits(&self) -> &Tensor {
        &self.values[self.graph.logits_slot()]
    }
}

/// Runs every node once in manifest order.
pub fn forward<'g>(graph: &'g ModelGraph, input: &Tensor) -> Result<ForwardTrace<'g>> {
    if input.shape() != graph.input_shape() {
        return Err(Error::shape(format!(
            "input shape {} does not match model input {}",
            input.shape(),
            graph.input_shape()
        )));
    }
    let mut values = Vec::with_capacity(graph.nodes().len() + 1);
    values.push(input.clone());
    for node in graph.nodes() {
        let out = {
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&s| &values[s]).collect();
            node_forward(node, &inputs)?
        };
        values.push(out);
    }
    Ok(ForwardTrace { graph, values })
}

/// Re-executes every node after `slot` with that slot's value replaced.
/// Earlier values are reused from `trace`.
pub fn forward_from<'g>(trace: &ForwardTrace<'g>, slot: usize, replacement: Tensor) -> Result<ForwardTrace<'g>> {
    let graph = trace.graph;
    if replacement.shape() != graph.slot_shape(slot) {
        return Err(Error::shape(format!(
            "replacement for `{}` has shape {}, expected {}",
            graph.slot_name(slot),
            replacement.shape(),
            graph.slot_shape(slot)
        )));
    }
    let mut values = trace.values[..slot].to_vec();
    values.push(replacement);
    for node in &graph.nodes()[slot..] {
        let out = {
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&s| &values[s]).collect();
            node_forward(node, &inputs)?
        };
        values.push(out);
    }
    Ok(ForwardTrace { graph, values })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Class { index: usize, score: f32 },
    Value(f32),
}

impl Prediction {
    pub fn class_index(&self) -> Option<usize> {
        match *self {
            Prediction::Class { index, .. } => Some(index),
            Prediction::Value(_) => None,
        }
    }

    pub fn score(&self) -> f32 {
        match *self {
            Prediction::Class { score, .. } => score,
            Prediction::Value(v) => v,
        }
    }
}

/// Argmax of the final output (lowest index wins ties), or the scalar output
/// for regression.
pub fn predict(trace: &ForwardTrace<'_>) -> Prediction {
    let y = trace.output().data();
    match trace.graph.task() {
        Task::Regression => Prediction::Value(y[0]),
        Task::Classification => {
            let mut index = 0;
            for (i, &v) in y.iter().enumerate() {
                if v > y[index] {
                    index = i;
                }
            }
            Prediction::Class { index, score: y[index] }
        }
    }
}
