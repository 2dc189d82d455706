//! The weight-sharing supernet: every edge carries all candidate operations
//! mixed by the softmax of its architecture logits.

use rand::Rng;

use super::arch::{cell_plan, ArchParams, CellTopology, STEM_MULTIPLIER};
use super::ops::CandidateOp;
use crate::error::{shape_err, Result};
use crate::tensor::{
    ConvBn, ConvGeometry, ExecMode, FactorizedReduce, Graph, Linear, OpKind, ParamGroup, ParamId,
    ParamStore, ReluConvBn, Session, Tensor, Var,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SupernetConfig {
    pub cells: usize,
    pub intermediate_nodes: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Route the 1×1 cell-preprocessing convolutions through the multiplier.
    pub approximate_preprocessing: bool,
}

/// All eight candidate operations of one edge.
#[derive(Debug, Clone)]
pub struct MixedOp {
    ops: Vec<CandidateOp>,
}

impl MixedOp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let ops = OpKind::ALL
            .iter()
            .map(|&k| {
                CandidateOp::new(
                    store,
                    &format!("{name}.{}", k.name()),
                    k,
                    channels,
                    stride,
                    false,
                    rng,
                )
            })
            .collect();
        MixedOp { ops }
    }

    /// `Σ_k weights[offset + k] · op_k(x)` with `weights` the flattened
    /// softmax of the logits.
    pub fn forward(&self, s: &mut Session<'_>, x: Var, weights: Var, offset: usize) -> Result<Var> {
        let outs = self
            .ops
            .iter()
            .map(|op| op.forward(s, x))
            .collect::<Result<Vec<_>>>()?;
        s.graph.weighted_sum(&outs, weights, offset)
    }
}

/// Aligns a cell input to the cell's channel count (and resolution).
#[derive(Debug, Clone)]
pub enum Preprocess {
    Reduce(FactorizedReduce),
    Conv(ReluConvBn),
}

impl Preprocess {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        reduce: bool,
        affine: bool,
        approximable: bool,
        rng: &mut impl Rng,
    ) -> Self {
        if reduce {
            Preprocess::Reduce(FactorizedReduce::new(store, name, c_in, c_out, affine, rng))
        } else {
            Preprocess::Conv(ReluConvBn::new(
                store,
                name,
                c_in,
                c_out,
                1,
                ConvGeometry::default(),
                affine,
                approximable,
                rng,
            ))
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        match self {
            Preprocess::Reduce(op) => op.forward(s, x),
            Preprocess::Conv(op) => op.forward(s, x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchCell {
    name: String,
    topology: CellTopology,
    reduction: bool,
    pre0: Preprocess,
    pre1: Preprocess,
    edges: Vec<MixedOp>,
}

impl SearchCell {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        topology: CellTopology,
        c_prev_prev: usize,
        c_prev: usize,
        channels: usize,
        reduction: bool,
        reduction_prev: bool,
        approximate_preprocessing: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let pre0 = Preprocess::new(
            store,
            &format!("{name}.pre0"),
            c_prev_prev,
            channels,
            reduction_prev,
            false,
            approximate_preprocessing,
            rng,
        );
        let pre1 = Preprocess::new(
            store,
            &format!("{name}.pre1"),
            c_prev,
            channels,
            false,
            false,
            approximate_preprocessing,
            rng,
        );
        let edges = topology
            .edges()
            .into_iter()
            .map(|(src, dst)| {
                let stride = if reduction && src < 2 { 2 } else { 1 };
                MixedOp::new(
                    store,
                    &format!("{name}.edge{src}_{dst}"),
                    channels,
                    stride,
                    rng,
                )
            })
            .collect();
        SearchCell {
            name: name.to_string(),
            topology,
            reduction,
            pre0,
            pre1,
            edges,
        }
    }

    pub fn is_reduction(&self) -> bool {
        self.reduction
    }

    /// `weights` is the flattened `[edges, 8]` mixing matrix of this cell kind.
    pub fn forward(&self, s: &mut Session<'_>, s0: Var, s1: Var, weights: Var) -> Result<Var> {
        let mut states = vec![self.pre0.forward(s, s0)?, self.pre1.forward(s, s1)?];
        for node in 0..self.topology.intermediate_nodes() {
            let mut terms = Vec::with_capacity(node + 2);
            for (src, &state) in states.iter().enumerate() {
                let e = self.topology.edge_index(node, src);
                terms.push(self.edges[e].forward(s, state, weights, e * OpKind::COUNT)?);
            }
            let first = s.graph.shape(terms[0]).to_vec();
            if let Some(&bad) = terms
                .iter()
                .find(|&&t| s.graph.shape(t) != first.as_slice())
            {
                return Err(shape_err!(
                    "{} node {node}: summands {:?} and {:?}",
                    self.name,
                    first,
                    s.graph.shape(bad)
                ));
            }
            let name = format!("{}.node{node}", self.name);
            states.push(s.add(&name, &terms)?);
        }
        s.graph.concat(&states[2..])
    }
}

/// Layers of a supernet; parameters live in [`Supernet::store`].
#[derive(Debug, Clone)]
pub struct SupernetLayers {
    stem: ConvBn,
    cells: Vec<SearchCell>,
    classifier: Linear,
    alpha_normal: ParamId,
    alpha_reduce: ParamId,
}

impl SupernetLayers {
    pub fn forward(&self, s: &mut Session<'_>, images: Var) -> Result<Var> {
        let an = s.param(self.alpha_normal);
        let wn = s.graph.softmax_rows(an)?;
        let ar = s.param(self.alpha_reduce);
        let wr = s.graph.softmax_rows(ar)?;
        let stem = self.stem.forward(s, images)?;
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let w = if cell.is_reduction() { wr } else { wn };
            let out = cell.forward(s, s0, s1, w)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = s.global_avg_pool("global_pool", s1)?;
        self.classifier.forward(s, pooled)
    }
}

#[derive(Debug, Clone)]
pub struct Supernet {
    pub store: ParamStore,
    pub layers: SupernetLayers,
    topology: CellTopology,
}

impl Supernet {
    pub fn topology(&self) -> CellTopology {
        self.topology
    }

    pub fn alpha_ids(&self) -> [ParamId; 2] {
        [self.layers.alpha_normal, self.layers.alpha_reduce]
    }

    pub fn arch_params(&self) -> ArchParams {
        ArchParams {
            normal: self.store.value(self.layers.alpha_normal).clone(),
            reduce: self.store.value(self.layers.alpha_reduce).clone(),
        }
    }

    pub fn set_arch_params(&mut self, alphas: &ArchParams) -> Result<()> {
        if alphas.normal.shape() != self.store.value(self.layers.alpha_normal).shape()
            || alphas.reduce.shape() != alphas.normal.shape()
        {
            return Err(shape_err!(
                "architecture logits do not match the supernet topology"
            ));
        }
        *self.store.value_mut(self.layers.alpha_normal) = alphas.normal.clone();
        *self.store.value_mut(self.layers.alpha_reduce) = alphas.reduce.clone();
        Ok(())
    }

    /// Number of network weights (architecture logits excluded).
    pub fn weight_count(&self) -> usize {
        self.store.count(ParamGroup::Weight)
    }

    /// A forward session over this network's parameters.
    pub fn session(
        &mut self,
        graph: Graph,
        mode: ExecMode,
        training: bool,
    ) -> (Session<'_>, &SupernetLayers) {
        (
            Session::new(graph, &mut self.store, mode, training),
            &self.layers,
        )
    }

    /// Logits for a batch of images without gradient tracking.
    pub fn predict(&mut self, images: Tensor, mode: ExecMode, training: bool) -> Result<Tensor> {
        let (mut s, layers) = self.session(Graph::inference(), mode, training);
        let x = s.graph.input(images);
        let logits = layers.forward(&mut s, x)?;
        Ok(s.graph.value(logits).clone())
    }
}

/// Builds the stem, `cells` search cells and the classifier, and draws the
/// initial weights and architecture logits from `rng`.
pub fn build_supernet(cfg: &SupernetConfig, rng: &mut impl Rng) -> Result<Supernet> {
    let topology = CellTopology::new(cfg.intermediate_nodes)?;
    let plan = cell_plan(cfg.cells, cfg.init_channels, cfg.intermediate_nodes)?;
    let mut store = ParamStore::new();
    let alphas = ArchParams::init(topology, rng);
    let alpha_normal = store.add("alpha_normal", alphas.normal, ParamGroup::Arch);
    let alpha_reduce = store.add("alpha_reduce", alphas.reduce, ParamGroup::Arch);
    let stem = ConvBn::new(
        &mut store,
        "stem",
        cfg.in_channels,
        STEM_MULTIPLIER * cfg.init_channels,
        3,
        ConvGeometry::new(1, 1, 1, 1),
        rng,
    );
    let cells = plan
        .iter()
        .enumerate()
        .map(|(i, p)| {
            SearchCell::new(
                &mut store,
                &format!("cell{i}"),
                topology,
                p.c_prev_prev,
                p.c_prev,
                p.channels,
                p.reduction,
                p.reduction_prev,
                cfg.approximate_preprocessing,
                rng,
            )
        })
        .collect();
    let last = plan.last().expect("at least three cells");
    let classifier = Linear::new(
        &mut store,
        "classifier",
        cfg.intermediate_nodes * last.channels,
        cfg.num_classes,
        rng,
    );
    Ok(Supernet {
        store,
        layers: SupernetLayers {
            stem,
            cells,
            classifier,
            alpha_normal,
            alpha_reduce,
        },
        topology,
    })
}
