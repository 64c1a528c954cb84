use super::forward::ForwardTrace;
use super::ops::node_vjp;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient of the seeded scalar with respect to the output of `layer`,
/// seeded with `output_grad` at the final output.
pub fn backward_to_layer(trace: &ForwardTrace<'_>, output_grad: &Tensor, layer: &str) -> Result<Tensor> {
    let graph = trace.graph();
    let target = graph.slot_of(layer)?;
    backward_between(trace, graph.output_slot(), output_grad, target)
}

/// Propagates `grad`, given at slot `from`, back to slot `to`.
///
/// Only nodes on some path from `to` to `from` are visited. If `to` does not
/// feed `from` the gradient is zero.
pub fn backward_between(trace: &ForwardTrace<'_>, from: usize, grad: &Tensor, to: usize) -> Result<Tensor> {
    let graph = trace.graph();
    let nodes = graph.nodes();
    if grad.shape() != graph.slot_shape(from) {
        return Err(Error::shape(format!(
            "seed gradient shape {} does not match `{}` output {}",
            grad.shape(),
            graph.slot_name(from),
            graph.slot_shape(from)
        )));
    }
    if to > from {
        return Tensor::zeros(graph.slot_shape(to).dims().to_vec());
    }

    // slots downstream of `to`
    let mut reached = vec![false; from + 1];
    reached[to] = true;
    for slot in to + 1..=from {
        reached[slot] = nodes[slot - 1].inputs.iter().any(|&i| reached[i]);
    }
    // slots upstream of `from`
    let mut needed = vec![false; from + 1];
    needed[from] = true;
    for slot in (to + 1..=from).rev() {
        if needed[slot] {
            for &i in &nodes[slot - 1].inputs {
                if i >= to {
                    needed[i] = true;
                }
            }
        }
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; from + 1];
    grads[from] = Some(grad.clone());
    for slot in (to + 1..=from).rev() {
        if !(reached[slot] && needed[slot]) {
            continue;
        }
        let Some(upstream) = grads[slot].take() else {
            continue;
        };
        let node = &nodes[slot - 1];
        let inputs: Vec<&Tensor> = node.inputs.iter().map(|&s| trace.value(s)).collect();
        let input_grads = node_vjp(node, &upstream, &inputs, trace.value(slot))?;
        for (&src, g) in node.inputs.iter().zip(input_grads) {
            if src < to || !reached[src] {
                continue;
            }
            grads[src] = Some(match grads[src].take() {
                None => g,
                Some(acc) => {
                    let sum = acc.data().iter().zip(g.data()).map(|(a, b)| a + b).collect();
                    acc.with_data(sum)
                }
            });
        }
    }
    match grads[to].take() {
        Some(g) => Ok(g),
        None => Tensor::zeros(graph.slot_shape(to).dims().to_vec()),
    }
}
