use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_graph, LayerId, LayerKind, LayerSpec, Matrix, NetworkGraph};
use crate::interval::byte_offset;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    format_version: u32,
    input_dim: usize,
    layers: Vec<RawLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    id: LayerId,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inputs: Option<Vec<LayerId>>,
}

pub(crate) fn json_error(text: &str, e: serde_json::Error) -> Error {
    use serde_json::error::Category;
    match e.classify() {
        Category::Syntax | Category::Eof | Category::Io => Error::Syntax {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        },
        Category::Data => Error::Schema(e.to_string()),
    }
}

fn field_error(layer: LayerId, what: &str) -> Error {
    Error::Schema(format!("layer {layer}: {what}"))
}

impl RawLayer {
    fn into_spec(self) -> Result<LayerSpec> {
        let id = self.id;
        match self.kind.as_str() {
            "Input" => {
                if self.weights.is_some() || self.bias.is_some() {
                    return Err(field_error(id, "Input layer takes no `weights` or `bias`"));
                }
                if self.inputs.as_ref().is_some_and(|v| !v.is_empty()) {
                    return Err(field_error(id, "Input layer takes no `inputs`"));
                }
                // The dimension is filled in from `input_dim` by the caller.
                Ok(LayerSpec {
                    id,
                    kind: LayerKind::Input { dim: 0 },
                    inputs: Vec::new(),
                })
            }
            "Gemm" => {
                let rows = self.weights.ok_or_else(|| field_error(id, "missing field `weights`"))?;
                let bias = self.bias.ok_or_else(|| field_error(id, "missing field `bias`"))?;
                let inputs = self.inputs.ok_or_else(|| field_error(id, "missing field `inputs`"))?;
                let weights = Matrix::from_rows(&rows).ok_or_else(|| Error::DimensionMismatch {
                    layer: id,
                    detail: "weight rows have different lengths".into(),
                })?;
                Ok(LayerSpec::gemm(id, weights, bias, inputs))
            }
            "ReLU" => {
                if self.weights.is_some() {
                    return Err(field_error(id, "ReLU layer takes no `weights`"));
                }
                if self.bias.is_some() {
                    return Err(field_error(id, "ReLU layer takes no `bias`"));
                }
                let inputs = self.inputs.ok_or_else(|| field_error(id, "missing field `inputs`"))?;
                if inputs.len() != 1 {
                    return Err(Error::InvalidLayer {
                        layer: id,
                        detail: format!("ReLU needs exactly one input, got {}", inputs.len()),
                    });
                }
                Ok(LayerSpec::relu(id, inputs[0]))
            }
            other => Err(field_error(
                id,
                &format!("unknown kind {other:?} (expected \"Gemm\" or \"ReLU\")"),
            )),
        }
    }
}

/// Parses the JSON network format and validates it with [`build_graph`].
pub fn parse_network_json(text: &str) -> Result<NetworkGraph> {
    let raw: RawNetwork = serde_json::from_str(text).map_err(|e| json_error(text, e))?;
    if raw.format_version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported format_version {} (expected {FORMAT_VERSION})",
            raw.format_version
        )));
    }
    if raw.layers.is_empty() {
        return Err(Error::Schema("field `layers` is empty".into()));
    }
    let mut specs = Vec::with_capacity(raw.layers.len());
    for layer in raw.layers {
        let mut spec = layer.into_spec()?;
        if let LayerKind::Input { dim } = &mut spec.kind {
            *dim = raw.input_dim;
        }
        specs.push(spec);
    }
    build_graph(specs, raw.input_dim)
}

/// Canonical serialization: fixed key order, layers in topological order, Input omitted.
pub fn emit_network_json(net: &NetworkGraph) -> String {
    let layers = net
        .layers()
        .iter()
        .filter_map(|l| match &l.kind {
            LayerKind::Input { .. } => None,
            LayerKind::Gemm { weights, bias } => Some(RawLayer {
                id: l.id,
                kind: "Gemm".into(),
                weights: Some(weights.to_rows()),
                bias: Some(bias.clone()),
                inputs: Some(l.inputs.clone()),
            }),
            LayerKind::Relu => Some(RawLayer {
                id: l.id,
                kind: "ReLU".into(),
                weights: None,
                bias: None,
                inputs: Some(l.inputs.clone()),
            }),
        })
        .collect();
    let raw = RawNetwork {
        format_version: FORMAT_VERSION,
        input_dim: net.input_dim(),
        layers,
    };
    let mut out = serde_json::to_string_pretty(&raw).expect("network serializes");
    out.push('\n');
    out
}
