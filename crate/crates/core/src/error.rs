use thiserror::Error;

use crate::graph::LayerId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("cycle detected among layers {0:?}")]
    CycleDetected(Vec<LayerId>),

    #[error("dimension mismatch at layer {layer}: {detail}")]
    DimensionMismatch { layer: LayerId, detail: String },

    #[error("layer {layer} references unknown layer {missing}")]
    DanglingReference { layer: LayerId, missing: LayerId },

    #[error("duplicate layer id {0}")]
    DuplicateLayerId(LayerId),

    #[error("invalid layer {layer}: {detail}")]
    InvalidLayer { layer: LayerId, detail: String },

    #[error("invalid window (s={s}, t={t}) on a network with {depth} Gemm layers")]
    InvalidWindow { s: usize, t: usize, depth: usize },

    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("input variable X_{0} is not bounded on both sides")]
    UnboundedInputBox(usize),

    #[error("nonlinear term: {0}")]
    NonlinearTerm(String),

    #[error("atom mixes input and output variables: {0}")]
    MixedVariableAtom(String),

    #[error("infeasible bounds at layer {layer}, neuron {neuron}: [{lo}, {hi}]")]
    InfeasibleBounds {
        layer: usize,
        neuron: usize,
        lo: f64,
        hi: f64,
    },

    #[error("variable {0} has an infinite bound; big-M constant undefined")]
    UnboundedVariable(String),

    #[error("value {value} outside bounds [{lo}, {hi}] of variable {var}")]
    ValueOutOfBounds {
        var: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
