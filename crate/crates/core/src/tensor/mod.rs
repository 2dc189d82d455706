//! A small reverse-mode autodiff engine over dense `f64` tensors.
//!
//! Forward computations are recorded on a [`Graph`]; parameters live in a
//! [`ParamStore`] and are bound to a graph per step. Convolutions can run
//! through an 8-bit multiplier table ([`ExecMode::Quant8`]) while their
//! gradients always follow the real-valued path.

mod blocks;
mod checkpoint;
mod conv;
mod graph;
mod optim;
mod params;
#[allow(clippy::module_inception)]
mod tensor;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::mult::MultiplierSpec;

pub use blocks::{
    BatchNorm, Conv, ConvBn, CountKind, DilConv, FactorizedReduce, LayerCount, Linear, ReluConvBn,
    SepConv, Session, BN_MOMENTUM,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use conv::{
    conv2d_backward_bias, conv2d_backward_input, conv2d_backward_weight, conv2d_forward,
    conv2d_quant, conv_out_len, lut_lookups, reset_lut_lookups, ConvGeometry, QuantConvOutput,
};
pub use graph::{BnMode, Gradients, Graph, PoolGeometry, Var, BN_EPS};
pub use optim::{cosine_lr, Adam, AdamConfig, Sgd, SgdConfig};
pub use params::{Buffer, BufferId, Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;

/// Arithmetic backend for convolutions.
#[derive(Debug, Clone, Default)]
pub enum ExecMode {
    /// Real-valued arithmetic.
    #[default]
    Fp32Exact,
    /// 8-bit quantized operands multiplied through a product table.
    Quant8(Arc<MultiplierSpec>),
}

impl ExecMode {
    pub fn quant8(m: MultiplierSpec) -> Self {
        ExecMode::Quant8(Arc::new(m))
    }

    pub fn is_quant(&self) -> bool {
        matches!(self, ExecMode::Quant8(_))
    }

    pub fn multiplier(&self) -> Option<&MultiplierSpec> {
        match self {
            ExecMode::Fp32Exact => None,
            ExecMode::Quant8(m) => Some(m),
        }
    }
}

/// Candidate operations on a cell edge, in the order of the coordinates of
/// every architecture-weight vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "sep_conv_3x3")]
    SepConv3x3,
    #[serde(rename = "sep_conv_5x5")]
    SepConv5x5,
    #[serde(rename = "dil_conv_3x3")]
    DilConv3x3,
    #[serde(rename = "dil_conv_5x5")]
    DilConv5x5,
    #[serde(rename = "max_pool_3x3")]
    MaxPool3x3,
    #[serde(rename = "avg_pool_3x3")]
    AvgPool3x3,
    #[serde(rename = "skip_connect")]
    SkipConnect,
    #[serde(rename = "zero")]
    Zero,
}

impl OpKind {
    pub const COUNT: usize = 8;

    pub const ALL: [OpKind; 8] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SkipConnect,
        OpKind::Zero,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SkipConnect => "skip_connect",
            OpKind::Zero => "zero",
        }
    }

    /// Whether the operation contains convolutions that run through the
    /// multiplier.
    pub fn is_approximable(self) -> bool {
        matches!(
            self,
            OpKind::SepConv3x3 | OpKind::SepConv5x5 | OpKind::DilConv3x3 | OpKind::DilConv5x5
        )
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Genotype(format!("unknown operation `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_order_is_stable() {
        assert_eq!(OpKind::ALL.len(), OpKind::COUNT);
        for (i, k) in OpKind::ALL.iter().enumerate() {
            assert_eq!(k.index(), i);
            assert_eq!(OpKind::from_index(i), Some(*k));
            assert_eq!(k.name().parse::<OpKind>().unwrap(), *k);
        }
        assert_eq!(
            serde_json::to_string(&OpKind::DilConv5x5).unwrap(),
            "\"dil_conv_5x5\""
        );
        assert!("conv_7x7".parse::<OpKind>().is_err());
    }
}
