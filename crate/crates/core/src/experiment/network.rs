//! Discrete networks built from a genotype, their auxiliary head and
//! operation counting.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::augment::drop_path;
use crate::darts::{
    cell_plan, reduction_positions, CandidateOp, Genotype, Preprocess, STEM_MULTIPLIER,
};
use crate::error::{Error, Result};
use crate::tensor::{
    conv_out_len, BatchNorm, Conv, ConvBn, ConvGeometry, ExecMode, Graph, LayerCount, Linear,
    ParamGroup, ParamStore, PoolGeometry, Session, Tensor, Var,
};

/// Drop-path probability and the generator that draws its masks.
pub struct DropState {
    pub prob: f64,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub cells: usize,
    pub init_channels: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Spatial side of the input images, used to size the auxiliary head.
    pub image_size: usize,
    pub auxiliary: bool,
    pub approximate_preprocessing: bool,
}

#[derive(Debug, Clone)]
struct EvalCell {
    name: String,
    pre0: Preprocess,
    pre1: Preprocess,
    /// Two `(source state, op)` pairs per node.
    nodes: Vec<[(usize, CandidateOp); 2]>,
}

impl EvalCell {
    fn forward(
        &self,
        s: &mut Session<'_>,
        s0: Var,
        s1: Var,
        mut drop: Option<&mut DropState>,
    ) -> Result<Var> {
        let mut states = vec![self.pre0.forward(s, s0)?, self.pre1.forward(s, s1)?];
        for (j, inputs) in self.nodes.iter().enumerate() {
            let mut terms = [states[0]; 2];
            for (slot, (src, op)) in inputs.iter().enumerate() {
                let mut h = op.forward_dense(s, states[*src])?;
                if !op.is_identity() {
                    if let Some(d) = drop.as_deref_mut() {
                        h = drop_path(&mut s.graph, h, d.prob, &mut d.rng, s.training)?;
                    }
                }
                terms[slot] = h;
            }
            let name = format!("{}.node{j}", self.name);
            states.push(s.add(&name, &terms)?);
        }
        s.graph.concat(&states[2..])
    }
}

/// Auxiliary classifier on the output of the second reduction cell.
#[derive(Debug, Clone)]
struct AuxHead {
    pool: PoolGeometry,
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    classifier: Linear,
}

const AUX_MID: usize = 128;
const AUX_OUT: usize = 768;

impl AuxHead {
    fn new(
        store: &mut ParamStore,
        c_in: usize,
        side: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let pool = if side >= 8 {
            PoolGeometry {
                kernel: 5,
                stride: 3,
                padding: 0,
            }
        } else {
            PoolGeometry {
                kernel: side.div_ceil(2),
                stride: (side / 2).max(1),
                padding: 0,
            }
        };
        let pooled = conv_out_len(side, pool.kernel, pool.stride, 0, 1)?;
        Ok(AuxHead {
            pool,
            conv1: Conv::new(
                store,
                "aux.conv1",
                c_in,
                AUX_MID,
                1,
                ConvGeometry::default(),
                false,
                rng,
            ),
            bn1: BatchNorm::new(store, "aux.bn1", AUX_MID, true),
            conv2: Conv::new(
                store,
                "aux.conv2",
                AUX_MID,
                AUX_OUT,
                pooled,
                ConvGeometry::default(),
                false,
                rng,
            ),
            bn2: BatchNorm::new(store, "aux.bn2", AUX_OUT, true),
            classifier: Linear::new(store, "aux.classifier", AUX_OUT, classes, rng),
        })
    }

    fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let y = s.relu("aux", x)?;
        let y = s.graph.avg_pool(y, self.pool)?;
        let y = self.conv1.forward(s, y, &ExecMode::Fp32Exact)?;
        let y = self.bn1.forward(s, y)?;
        let y = s.relu("aux", y)?;
        let y = self.conv2.forward(s, y, &ExecMode::Fp32Exact)?;
        let y = self.bn2.forward(s, y)?;
        let y = s.relu("aux", y)?;
        let n = s.graph.shape(y)[0];
        let y = s.graph.reshape(y, &[n, AUX_OUT])?;
        self.classifier.forward(s, y)
    }
}

#[derive(Debug, Clone)]
pub struct NetworkLayers {
    stem: ConvBn,
    cells: Vec<EvalCell>,
    aux_after: usize,
    aux: Option<AuxHead>,
    classifier: Linear,
}

impl NetworkLayers {
    /// Returns the main logits and, in training with an auxiliary head, the
    /// auxiliary logits.
    pub fn forward(
        &self,
        s: &mut Session<'_>,
        images: Var,
        mut drop: Option<&mut DropState>,
    ) -> Result<(Var, Option<Var>)> {
        let stem = self.stem.forward(s, images)?;
        let (mut s0, mut s1) = (stem, stem);
        let mut aux_logits = None;
        for (i, cell) in self.cells.iter().enumerate() {
            let out = cell.forward(s, s0, s1, drop.as_deref_mut())?;
            s0 = s1;
            s1 = out;
            if i == self.aux_after && s.training {
                if let Some(aux) = &self.aux {
                    aux_logits = Some(aux.forward(s, s1)?);
                }
            }
        }
        let pooled = s.global_avg_pool("global_pool", s1)?;
        Ok((self.classifier.forward(s, pooled)?, aux_logits))
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub store: ParamStore,
    pub layers: NetworkLayers,
    cfg: NetworkConfig,
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn session(
        &mut self,
        graph: Graph,
        mode: ExecMode,
        training: bool,
    ) -> (Session<'_>, &NetworkLayers) {
        (
            Session::new(graph, &mut self.store, mode, training),
            &self.layers,
        )
    }

    /// Number of weights excluding the auxiliary head.
    pub fn param_count(&self) -> usize {
        self.store
            .params()
            .iter()
            .filter(|p| p.group == ParamGroup::Weight && !p.name.starts_with("aux."))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Inference logits.
    pub fn predict(&mut self, images: Tensor, mode: ExecMode) -> Result<Tensor> {
        let (mut s, layers) = self.session(Graph::inference(), mode, false);
        let x = s.graph.input(images);
        let (logits, _) = layers.forward(&mut s, x, None)?;
        Ok(s.graph.value(logits).clone())
    }

    /// Per-layer operation counts of one inference pass on a single image.
    pub fn count_macs(&mut self) -> Result<Vec<LayerCount>> {
        let c = &self.cfg;
        let probe = Tensor::zeros([1, c.in_channels, c.image_size, c.image_size]);
        let (s, layers) = self.session(Graph::inference(), ExecMode::Fp32Exact, false);
        let mut s = s.with_counting();
        let x = s.graph.input(probe);
        layers.forward(&mut s, x, None)?;
        Ok(s.take_counts())
    }
}

/// Builds the stacked network of a genotype with the same stem, reduction
/// placement and channel doubling as the supernet.
pub fn build_network(
    genotype: &Genotype,
    cfg: &NetworkConfig,
    rng: &mut impl Rng,
) -> Result<Network> {
    genotype.validate()?;
    let nodes = genotype.intermediate_nodes();
    let plan = cell_plan(cfg.cells, cfg.init_channels, nodes)?;
    let mut store = ParamStore::new();
    let stem = ConvBn::new(
        &mut store,
        "stem",
        cfg.in_channels,
        STEM_MULTIPLIER * cfg.init_channels,
        3,
        ConvGeometry::new(1, 1, 1, 1),
        rng,
    );
    let aux_after = reduction_positions(cfg.cells)[1];
    let mut side = cfg.image_size;
    let mut aux = None;
    let mut cells = Vec::with_capacity(cfg.cells);
    for (i, p) in plan.iter().enumerate() {
        let name = format!("cell{i}");
        let pre0 = Preprocess::new(
            &mut store,
            &format!("{name}.pre0"),
            p.c_prev_prev,
            p.channels,
            p.reduction_prev,
            true,
            cfg.approximate_preprocessing,
            rng,
        );
        let pre1 = Preprocess::new(
            &mut store,
            &format!("{name}.pre1"),
            p.c_prev,
            p.channels,
            false,
            true,
            cfg.approximate_preprocessing,
            rng,
        );
        let spec = if p.reduction {
            &genotype.reduce
        } else {
            &genotype.normal
        };
        let node_ops = spec
            .iter()
            .enumerate()
            .map(|(j, inputs)| {
                let make = |slot: usize, store: &mut ParamStore, rng: &mut _| {
                    let (src, kind) = inputs[slot];
                    let stride = if p.reduction && src < 2 { 2 } else { 1 };
                    let op = CandidateOp::new(
                        store,
                        &format!("{name}.node{j}.in{slot}.{}", kind.name()),
                        kind,
                        p.channels,
                        stride,
                        true,
                        rng,
                    );
                    (src, op)
                };
                let a = make(0, &mut store, rng);
                let b = make(1, &mut store, rng);
                [a, b]
            })
            .collect();
        cells.push(EvalCell {
            name,
            pre0,
            pre1,
            nodes: node_ops,
        });
        if p.reduction {
            side = side.div_ceil(2);
        }
        if i == aux_after && cfg.auxiliary {
            aux = Some(AuxHead::new(
                &mut store,
                nodes * p.channels,
                side,
                cfg.num_classes,
                rng,
            )?);
        }
    }
    let last = plan
        .last()
        .ok_or_else(|| Error::Config("no cells".into()))?;
    let classifier = Linear::new(
        &mut store,
        "classifier",
        nodes * last.channels,
        cfg.num_classes,
        rng,
    );
    Ok(Network {
        store,
        layers: NetworkLayers {
            stem,
            cells,
            aux_after,
            aux,
            classifier,
        },
        cfg: cfg.clone(),
    })
}

/// Totals of a per-layer count list: `(approximable MACs, exact operations)`.
pub fn summarize_counts(counts: &[LayerCount]) -> (u64, u64) {
    counts
        .iter()
        .fold((0, 0), |(a, e), c| (a + c.approx_macs, e + c.exact_flops))
}
