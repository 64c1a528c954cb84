//! Model manifest, tensor blob store, and the validated graph built from them.

mod blob;
mod builder;
mod graph;
mod manifest;

pub use blob::{TensorBlobStore, BLOB_VERSION, MAGIC};
pub use builder::GraphBuilder;
pub use graph::{infer_shapes, load_model, ModelGraph, Node, Op, Window};
pub use manifest::{InputSpec, ModelManifest, NodeParams, NodeSpec, SizePair, Task, FORMAT_VERSION, GRAPH_INPUT};
