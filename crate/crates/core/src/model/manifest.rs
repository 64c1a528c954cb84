//! JSON model manifest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Reserved identifier a node uses to read the graph input.
pub const GRAPH_INPUT: &str = "input";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    /// `[channels, height, width]`
    pub shape: [usize; 3],
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InputSpec {
    pub fn channels(&self) -> usize {
        self.shape[0]
    }
    pub fn height(&self) -> usize {
        self.shape[1]
    }
    pub fn width(&self) -> usize {
        self.shape[2]
    }
}

/// A size attribute given either as one integer or as `[height, width]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizePair {
    Square(usize),
    Rect([usize; 2]),
}

impl SizePair {
    pub fn hw(self) -> (usize, usize) {
        match self {
            SizePair::Square(v) => (v, v),
            SizePair::Rect([h, w]) => (h, w),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<SizePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<SizePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<SizePair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<SizePair>,
}

impl NodeParams {
    pub fn is_empty(&self) -> bool {
        *self == NodeParams::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "NodeParams::is_empty")]
    pub params: NodeParams,
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weight_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub format_version: u32,
    pub name: String,
    pub task: Task,
    pub input_spec: InputSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_range: Option<[f32; 2]>,
    pub nodes: Vec<NodeSpec>,
    pub target_layer: String,
}

impl ModelManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let manifest: ModelManifest = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
