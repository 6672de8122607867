use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::graph::{LayerId, SiteId};

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Everything that can go wrong inside the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    InvalidShape {
        op: &'static str,
        reason: String,
    },
    NonFinite {
        index: usize,
    },
    EmptyTensor,
    Divisibility {
        op: &'static str,
        what: &'static str,
        value: usize,
        divisor: usize,
    },
    InvalidAxis {
        axis: usize,
        rank: usize,
    },
    ChannelMismatch {
        expected: usize,
        found: usize,
    },
    InvalidParams(String),
    TapeEmpty,
    UnknownNode(usize),
    /// A failure while executing a specific layer.
    Layer {
        id: LayerId,
        source: Box<Error>,
    },
    UnknownLayer(LayerId),
    InvalidGraph(String),
    MissingParams(SiteId),
    UnknownSite(SiteId),
    Bridge(String),
    MissingCache(String),
    InvalidSpec(String),
}

impl Error {
    pub(crate) fn in_layer(self, id: LayerId) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                id,
                source: Box::new(e),
            },
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::InvalidShape { op, reason } => write!(f, "{op}: {reason}"),
            Error::NonFinite { index } => write!(f, "non-finite value at flat index {index}"),
            Error::EmptyTensor => write!(f, "tensor is empty"),
            Error::Divisibility {
                op,
                what,
                value,
                divisor,
            } => write!(f, "{op}: {what} {value} is not divisible by {divisor}"),
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} is out of range for rank {rank}")
            }
            Error::ChannelMismatch { expected, found } => write!(
                f,
                "per-channel parameters cover {expected} channels but tensor has {found}"
            ),
            Error::InvalidParams(msg) => write!(f, "invalid quantization parameters: {msg}"),
            Error::TapeEmpty => write!(f, "tape is empty"),
            Error::UnknownNode(id) => write!(f, "unknown tape node {id}"),
            Error::Layer { id, source } => write!(f, "layer {id}: {source}"),
            Error::UnknownLayer(id) => write!(f, "unknown layer id {id}"),
            Error::InvalidGraph(msg) => write!(f, "invalid graph: {msg}"),
            Error::MissingParams(site) => write!(f, "missing quantization parameters for {site}"),
            Error::UnknownSite(site) => write!(f, "{site} is not a declared quantization site"),
            Error::Bridge(msg) => write!(f, "invalid bridge block annotation: {msg}"),
            Error::MissingCache(msg) => write!(f, "calibration cache incomplete: {msg}"),
            Error::InvalidSpec(msg) => write!(f, "invalid fixture spec: {msg}"),
        }
    }
}

impl core::error::Error for Error {
    fn source(&self) -> Option<&(dyn core::error::Error + 'static)> {
        match self {
            Error::Layer { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}
