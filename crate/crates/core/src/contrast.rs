//! Contrast losses and the output-gradient seeds that start backpropagation.
//!
//! For classification the loss between the network output and a contrast
//! class `Q` is cross-entropy against one-hot `Q`, evaluated on the logits
//! (a terminal softmax node is skipped). For regression it is the squared
//! error between the predicted score and a scalar `Q`. With `Q` equal to the
//! prediction the classification seed is exactly the training-loss gradient.

use std::fmt;

use crate::engine::{predict, ForwardTrace, Prediction};
use crate::error::{Error, Result};
use crate::model::{ModelGraph, Task};
use crate::tensor::Tensor;

/// The "rather than Q" half of a contrastive question.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContrastTarget {
    Class(usize),
    Scalar(f32),
    /// Q = P, whatever the network predicts.
    Predicted,
}

impl fmt::Display for ContrastTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContrastTarget::Class(q) => write!(f, "class {q}"),
            ContrastTarget::Scalar(q) => write!(f, "{q}"),
            ContrastTarget::Predicted => f.write_str("P"),
        }
    }
}

impl ContrastTarget {
    /// Checks the target against the graph's task and resolves
    /// [`ContrastTarget::Predicted`] to a concrete class or value.
    pub fn resolve(self, graph: &ModelGraph, prediction: Prediction) -> Result<ContrastTarget> {
        match (graph.task(), self) {
            (_, ContrastTarget::Predicted) => Ok(match prediction {
                Prediction::Class { index, .. } => ContrastTarget::Class(index),
                Prediction::Value(v) => ContrastTarget::Scalar(v),
            }),
            (Task::Classification, ContrastTarget::Class(q)) => {
                let n = graph.num_outputs();
                if q >= n {
                    return Err(Error::Target(format!("class {q} is outside 0..{n}")));
                }
                Ok(self)
            }
            (Task::Regression, ContrastTarget::Scalar(q)) => {
                let (lo, hi) = graph.output_range().expect("regression graphs declare a range");
                check_in_range(q, (lo, hi))?;
                Ok(self)
            }
            (Task::Classification, ContrastTarget::Scalar(_)) => {
                Err(Error::Target("classification models need a class target".into()))
            }
            (Task::Regression, ContrastTarget::Class(_)) => {
                Err(Error::Target("regression models need a scalar target".into()))
            }
        }
    }
}

fn check_in_range(q: f32, (lo, hi): (f32, f32)) -> Result<()> {
    if !(q >= lo && q <= hi) {
        return Err(Error::Target(format!(
            "value {q} is outside the output range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Scalar loss plus its gradient with respect to the seeded output.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSeed {
    pub loss: f64,
    pub output_grad: Tensor,
}

/// `−log softmax(logits)[q]` and its gradient `softmax(logits) − onehot(q)`.
pub fn cross_entropy_seed(logits: &Tensor, q: usize) -> Result<LossSeed> {
    let z = logits.data();
    if q >= z.len() {
        return Err(Error::Target(format!("class {q} is outside 0..{}", z.len())));
    }
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = m + z.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    let grad = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (v as f64 - lse).exp();
            (if i == q { p - 1.0 } else { p }) as f32
        })
        .collect();
    Ok(LossSeed {
        loss: lse - z[q] as f64,
        output_grad: logits.with_data(grad),
    })
}

/// Squared error `(y − q)²` with gradient `2(y − q)`.
pub fn mse_seed(output: &Tensor, q: f32, range: (f32, f32)) -> Result<LossSeed> {
    check_in_range(q, range)?;
    if output.numel() != 1 {
        return Err(Error::shape(format!(
            "mse expects a scalar output, got {}",
            output.shape()
        )));
    }
    let diff = output.data()[0] as f64 - q as f64;
    Ok(LossSeed {
        loss: diff * diff,
        output_grad: output.with_data(vec![(2.0 * diff) as f32]),
    })
}

/// Plain Grad-CAM seed: one-hot on the chosen class score.
pub fn class_score_seed(logits: &Tensor, class_index: usize) -> Result<LossSeed> {
    let n = logits.numel();
    if class_index >= n {
        return Err(Error::Target(format!("class {class_index} is outside 0..{n}")));
    }
    let mut grad = vec![0.0; n];
    grad[class_index] = 1.0;
    Ok(LossSeed {
        loss: logits.data()[class_index] as f64,
        output_grad: logits.with_data(grad),
    })
}

/// Seed for a contrast target together with the slot it applies to.
#[derive(Debug, Clone)]
pub struct SeedAt {
    pub slot: usize,
    pub seed: LossSeed,
    pub target: ContrastTarget,
}

/// Cross-entropy at the logits for classification, squared error at the
/// output for regression. `target` is resolved against the prediction.
pub fn contrast_seed(trace: &ForwardTrace<'_>, target: ContrastTarget) -> Result<SeedAt> {
    let graph = trace.graph();
    let target = target.resolve(graph, predict(trace))?;
    match target {
        ContrastTarget::Class(q) => {
            let slot = graph.logits_slot();
            Ok(SeedAt {
                slot,
                seed: cross_entropy_seed(trace.value(slot), q)?,
                target,
            })
        }
        ContrastTarget::Scalar(q) => {
            let range = graph.output_range().expect("regression graphs declare a range");
            Ok(SeedAt {
                slot: graph.output_slot(),
                seed: mse_seed(trace.output(), q, range)?,
                target,
            })
        }
        ContrastTarget::Predicted => unreachable!("resolve() removes Predicted"),
    }
}
