use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{OpKind, Tensor};

/// Standard deviation of the initial architecture logits.
pub const ALPHA_INIT_STD: f64 = 1e-3;

/// Number of edges in a dense cell with `intermediate_nodes` nodes: node `j`
/// receives one edge from each of the two inputs and every earlier node.
pub fn num_edges(intermediate_nodes: usize) -> usize {
    (0..intermediate_nodes).map(|j| j + 2).sum()
}

/// Dense cell DAG.
///
/// States are indexed `0` (output of the cell two back), `1` (previous cell)
/// and `2 + j` for intermediate node `j`. Edges are ordered by destination
/// node, then by source state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellTopology {
    intermediate_nodes: usize,
}

impl CellTopology {
    pub fn new(intermediate_nodes: usize) -> Result<Self> {
        if intermediate_nodes == 0 {
            return Err(Error::Config(
                "a cell needs at least one intermediate node".into(),
            ));
        }
        Ok(CellTopology { intermediate_nodes })
    }

    /// Recovers the topology from an edge count.
    pub fn from_edges(edges: usize) -> Result<Self> {
        (1..=edges)
            .find(|&i| num_edges(i) == edges)
            .map(|i| CellTopology {
                intermediate_nodes: i,
            })
            .ok_or_else(|| Error::Genotype(format!("{edges} edges do not form a dense cell")))
    }

    pub fn intermediate_nodes(&self) -> usize {
        self.intermediate_nodes
    }

    pub fn num_edges(&self) -> usize {
        num_edges(self.intermediate_nodes)
    }

    /// Row of the edge from state `src` into intermediate node `node`.
    pub fn edge_index(&self, node: usize, src: usize) -> usize {
        debug_assert!(src < node + 2);
        node * (node + 3) / 2 + src
    }

    /// `(source state, destination state)` pairs in row order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.intermediate_nodes)
            .flat_map(|j| (0..j + 2).map(move |src| (src, j + 2)))
            .collect()
    }

    /// State indices concatenated into the cell output.
    pub fn concat(&self) -> Vec<usize> {
        (2..2 + self.intermediate_nodes).collect()
    }
}

/// Architecture logits, one row of [`OpKind::COUNT`] per edge, shared by all
/// cells of the same kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchParams {
    pub normal: Tensor,
    pub reduce: Tensor,
}

impl ArchParams {
    pub fn zeros(topology: CellTopology) -> Self {
        let shape = [topology.num_edges(), OpKind::COUNT];
        ArchParams {
            normal: Tensor::zeros(shape),
            reduce: Tensor::zeros(shape),
        }
    }

    /// Near-zero Gaussian initialization, so the initial mixture is close to
    /// uniform.
    pub fn init(topology: CellTopology, rng: &mut impl Rng) -> Self {
        let normal_dist = Normal::new(0.0, ALPHA_INIT_STD).expect("valid std");
        let shape = [topology.num_edges(), OpKind::COUNT];
        let normal = Tensor::from_fn(shape, |_| normal_dist.sample(rng));
        let reduce = Tensor::from_fn(shape, |_| normal_dist.sample(rng));
        ArchParams { normal, reduce }
    }

    pub fn topology(&self) -> Result<CellTopology> {
        let [rows, cols] = self.normal.dims2()?;
        if cols != OpKind::COUNT || self.reduce.shape() != self.normal.shape() {
            return Err(Error::Genotype(format!(
                "architecture logits must be [edges, {}] for both cell kinds",
                OpKind::COUNT
            )));
        }
        CellTopology::from_edges(rows)
    }
}

/// Numerically stable softmax of one logit row.
pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}


/// Channel bookkeeping of one cell in a stacked network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellPlan {
    pub c_prev_prev: usize,
    pub c_prev: usize,
    pub channels: usize,
    pub reduction: bool,
    pub reduction_prev: bool,
}

pub const STEM_MULTIPLIER: usize = 3;

/// Reduction cells sit at `floor(L/3)` and `floor(2L/3)`.
pub fn reduction_positions(cells: usize) -> [usize; 2] {
    [cells / 3, 2 * cells / 3]
}

/// Per-cell channels: the stem emits `3·C`, every reduction doubles `C`, and
/// each cell emits `nodes·C`.
pub fn cell_plan(
    cells: usize,
    init_channels: usize,
    intermediate_nodes: usize,
) -> Result<Vec<CellPlan>> {
    if cells < 3 {
        return Err(Error::Config(format!(
            "at least 3 cells are required, got {cells}"
        )));
    }
    if init_channels == 0 {
        return Err(Error::Config("init_channels must be positive".into()));
    }
    let reductions = reduction_positions(cells);
    let stem = STEM_MULTIPLIER * init_channels;
    let (mut cpp, mut cp, mut c) = (stem, stem, init_channels);
    let mut reduction_prev = false;
    let mut plan = Vec::with_capacity(cells);
    for i in 0..cells {
        let reduction = reductions.contains(&i);
        if reduction {
            c *= 2;
        }
        plan.push(CellPlan {
            c_prev_prev: cpp,
            c_prev: cp,
            channels: c,
            reduction,
            reduction_prev,
        });
        cpp = cp;
        cp = intermediate_nodes * c;
        reduction_prev = reduction;
    }
    Ok(plan)
}

#[cfg(test)]
mod plan_tests {
    use super::*;

    #[test]
    fn eight_cell_channel_progression() {
        let plan = cell_plan(8, 16, 4).unwrap();
        let chans: Vec<usize> = plan.iter().map(|p| p.channels).collect();
        assert_eq!(chans, vec![16, 16, 32, 32, 32, 64, 64, 64]);
        let red: Vec<usize> = (0..8).filter(|&i| plan[i].reduction).collect();
        assert_eq!(red, vec![2, 5]);
        assert_eq!(plan[0].c_prev, 48);
        assert_eq!(plan[3].c_prev_prev, 4 * 16);
        assert!(plan[3].reduction_prev);
    }

    #[test]
    fn three_cells_reduce_twice() {
        assert_eq!(reduction_positions(3), [1, 2]);
        assert!(cell_plan(2, 16, 4).is_err());
    }
}
