use rand::Rng;

use crate::error::Result;
use crate::tensor::{DilConv, FactorizedReduce, OpKind, ParamStore, SepConv, Session, Var};

/// An instantiated candidate operation on one edge.
#[derive(Debug, Clone)]
pub enum CandidateOp {
    Sep(Box<SepConv>),
    Dil(Box<DilConv>),
    MaxPool { name: String, stride: usize },
    AvgPool { name: String, stride: usize },
    Identity,
    Reduce(FactorizedReduce),
    Zero { stride: usize },
}

impl CandidateOp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: OpKind,
        channels: usize,
        stride: usize,
        affine: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let c = channels;
        match kind {
            OpKind::SepConv3x3 => CandidateOp::Sep(Box::new(SepConv::new(
                store, name, c, c, 3, stride, affine, rng,
            ))),
            OpKind::SepConv5x5 => CandidateOp::Sep(Box::new(SepConv::new(
                store, name, c, c, 5, stride, affine, rng,
            ))),
            OpKind::DilConv3x3 => CandidateOp::Dil(Box::new(DilConv::new(
                store, name, c, c, 3, stride, affine, rng,
            ))),
            OpKind::DilConv5x5 => CandidateOp::Dil(Box::new(DilConv::new(
                store, name, c, c, 5, stride, affine, rng,
            ))),
            OpKind::MaxPool3x3 => CandidateOp::MaxPool {
                name: name.to_string(),
                stride,
            },
            OpKind::AvgPool3x3 => CandidateOp::AvgPool {
                name: name.to_string(),
                stride,
            },
            OpKind::SkipConnect if stride == 1 => CandidateOp::Identity,
            OpKind::SkipConnect => {
                CandidateOp::Reduce(FactorizedReduce::new(store, name, c, c, affine, rng))
            }
            OpKind::Zero => CandidateOp::Zero { stride },
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, CandidateOp::Identity)
    }

    /// Applies the op; `None` stands for an identically zero output.
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Option<Var>> {
        Ok(Some(match self {
            CandidateOp::Sep(op) => op.forward(s, x)?,
            CandidateOp::Dil(op) => op.forward(s, x)?,
            CandidateOp::MaxPool { name, stride } => s.max_pool3(name, x, *stride)?,
            CandidateOp::AvgPool { name, stride } => s.avg_pool3(name, x, *stride)?,
            CandidateOp::Identity => x,
            CandidateOp::Reduce(op) => op.forward(s, x)?,
            CandidateOp::Zero { .. } => return Ok(None),
        }))
    }

    /// Like [`forward`](Self::forward) but materializes the zero op.
    pub fn forward_dense(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        match self {
            CandidateOp::Zero { stride } => s.zeros_strided(x, *stride),
            _ => Ok(self.forward(s, x)?.expect("non-zero op")),
        }
    }
}
