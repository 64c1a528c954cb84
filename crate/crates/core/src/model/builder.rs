use super::blob::TensorBlobStore;
use super::graph::ModelGraph;
use super::manifest::{InputSpec, ModelManifest, NodeParams, NodeSpec, SizePair, Task, FORMAT_VERSION};
use crate::error::Result;
use crate::tensor::Tensor;

/// Assembles a manifest and its blob store node by node.
///
/// Weight tensors are stored under `<id>.weight`, `<id>.bias`, and for
/// batchnorm `<id>.gamma`/`.beta`/`.running_mean`/`.running_var`.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    manifest: ModelManifest,
    blobs: TensorBlobStore,
}

impl GraphBuilder {
    pub fn new(name: &str, task: Task, input_shape: [usize; 3]) -> Self {
        let c = input_shape[0];
        GraphBuilder {
            manifest: ModelManifest {
                format_version: FORMAT_VERSION,
                name: name.to_string(),
                task,
                input_spec: InputSpec {
                    shape: input_shape,
                    mean: vec![0.0; c],
                    std: vec![1.0; c],
                },
                class_labels: None,
                output_range: None,
                nodes: Vec::new(),
                target_layer: String::new(),
            },
            blobs: TensorBlobStore::new(),
        }
    }

    pub fn normalization(mut self, mean: Vec<f32>, std: Vec<f32>) -> Self {
        self.manifest.input_spec.mean = mean;
        self.manifest.input_spec.std = std;
        self
    }

    pub fn class_labels<S: Into<String>>(mut self, labels: impl IntoIterator<Item = S>) -> Self {
        self.manifest.class_labels = Some(labels.into_iter().map(Into::into).collect());
        self
    }

    pub fn output_range(mut self, lo: f32, hi: f32) -> Self {
        self.manifest.output_range = Some([lo, hi]);
        self
    }

    pub fn target_layer(mut self, id: &str) -> Self {
        self.manifest.target_layer = id.to_string();
        self
    }

    fn push(&mut self, id: &str, kind: &str, inputs: &[&str], params: NodeParams, weights: Vec<(&str, Tensor)>) {
        let mut refs = Vec::new();
        for (suffix, t) in weights {
            let name = format!("{id}.{suffix}");
            self.blobs
                .insert(name.clone(), t)
                .expect("builder weight names are unique per node id");
            refs.push(name);
        }
        self.manifest.nodes.push(NodeSpec {
            id: id.to_string(),
            kind: kind.to_string(),
            params,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weight_refs: refs,
        });
    }

    /// Convolution; the kernel size is read from the weight's last two dims.
    pub fn conv2d(
        mut self,
        id: &str,
        input: &str,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    ) -> Self {
        let d = weight.dims().to_vec();
        let kernel = if d.len() == 4 {
            SizePair::Rect([d[2], d[3]])
        } else {
            SizePair::Square(1)
        };
        let params = NodeParams {
            kernel_size: Some(kernel),
            stride: Some(SizePair::Square(stride)),
            padding: Some(SizePair::Square(padding)),
            ..NodeParams::default()
        };
        let mut w = vec![("weight", weight)];
        if let Some(b) = bias {
            w.push(("bias", b));
        }
        self.push(id, "conv2d", &[input], params, w);
        self
    }

    pub fn linear(mut self, id: &str, input: &str, weight: Tensor, bias: Option<Tensor>) -> Self {
        let mut w = vec![("weight", weight)];
        if let Some(b) = bias {
            w.push(("bias", b));
        }
        self.push(id, "linear", &[input], NodeParams::default(), w);
        self
    }

    fn pool(mut self, kind: &str, id: &str, input: &str, kernel: usize, stride: usize, padding: usize) -> Self {
        let params = NodeParams {
            kernel_size: Some(SizePair::Square(kernel)),
            stride: Some(SizePair::Square(stride)),
            padding: Some(SizePair::Square(padding)),
            ..NodeParams::default()
        };
        self.push(id, kind, &[input], params, vec![]);
        self
    }

    pub fn maxpool2d(self, id: &str, input: &str, kernel: usize, stride: usize, padding: usize) -> Self {
        self.pool("maxpool2d", id, input, kernel, stride, padding)
    }

    pub fn avgpool2d(self, id: &str, input: &str, kernel: usize, stride: usize, padding: usize) -> Self {
        self.pool("avgpool2d", id, input, kernel, stride, padding)
    }

    pub fn batchnorm(mut self, id: &str, input: &str, stats: [Tensor; 4], epsilon: f32) -> Self {
        let [gamma, beta, mean, var] = stats;
        let params = NodeParams {
            epsilon: Some(epsilon),
            ..NodeParams::default()
        };
        self.push(
            id,
            "batchnorm_eval",
            &[input],
            params,
            vec![
                ("gamma", gamma),
                ("beta", beta),
                ("running_mean", mean),
                ("running_var", var),
            ],
        );
        self
    }

    pub fn add(mut self, id: &str, a: &str, b: &str) -> Self {
        self.push(id, "add", &[a, b], NodeParams::default(), vec![]);
        self
    }

    /// Any parameterless kind: relu, flatten, softmax, global_avgpool, identity.
    pub fn unary(mut self, id: &str, kind: &str, input: &str) -> Self {
        self.push(id, kind, &[input], NodeParams::default(), vec![]);
        self
    }

    pub fn relu(self, id: &str, input: &str) -> Self {
        self.unary(id, "relu", input)
    }

    pub fn flatten(self, id: &str, input: &str) -> Self {
        self.unary(id, "flatten", input)
    }

    pub fn softmax(self, id: &str, input: &str) -> Self {
        self.unary(id, "softmax", input)
    }

    pub fn global_avgpool(self, id: &str, input: &str) -> Self {
        self.unary(id, "global_avgpool", input)
    }

    pub fn identity(self, id: &str, input: &str) -> Self {
        self.unary(id, "identity", input)
    }

    pub fn into_parts(self) -> (ModelManifest, TensorBlobStore) {
        (self.manifest, self.blobs)
    }

    pub fn build(self) -> Result<ModelGraph> {
        ModelGraph::build(self.manifest, &self.blobs)
    }
}
