//! Discrete architectures and their JSON files.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::{softmax, ArchParams, CellTopology};
use crate::error::{Error, Result};
use crate::tensor::{OpKind, Tensor};

pub const GENOTYPE_VERSION: u32 = 1;

/// The two retained `(source state, operation)` inputs of one node.
pub type NodeInputs = [(usize, OpKind); 2];

/// Discretized normal and reduction cells sharing one topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub normal: Vec<NodeInputs>,
    pub reduce: Vec<NodeInputs>,
    pub concat: Vec<usize>,
}

impl Genotype {
    pub fn intermediate_nodes(&self) -> usize {
        self.normal.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nodes = self.normal.len();
        if nodes == 0 {
            return Err(Error::Genotype("cells have no intermediate nodes".into()));
        }
        if self.reduce.len() != nodes {
            return Err(Error::Genotype(format!(
                "normal cell has {nodes} nodes, reduction cell has {}",
                self.reduce.len()
            )));
        }
        for (kind, cell) in [("normal", &self.normal), ("reduce", &self.reduce)] {
            for (j, inputs) in cell.iter().enumerate() {
                for &(src, op) in inputs {
                    if op == OpKind::Zero {
                        return Err(Error::Genotype(format!(
                            "{kind} node {j} retains the `zero` op"
                        )));
                    }
                    if src >= j + 2 {
                        return Err(Error::Genotype(format!(
                            "{kind} node {j} reads state {src}, only states below {} exist",
                            j + 2
                        )));
                    }
                }
                if inputs[0].0 == inputs[1].0 {
                    return Err(Error::Genotype(format!(
                        "{kind} node {j} takes both inputs from state {}",
                        inputs[0].0
                    )));
                }
            }
        }
        let expected: Vec<usize> = (2..2 + nodes).collect();
        if self.concat != expected {
            return Err(Error::Genotype(format!(
                "concat must list every intermediate node {expected:?}, got {:?}",
                self.concat
            )));
        }
        Ok(())
    }

    /// All retained operations of both cells.
    pub fn ops(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.normal
            .iter()
            .chain(&self.reduce)
            .flat_map(|n| n.iter().map(|&(_, op)| op))
    }
}

/// Run metadata stored next to a genotype.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub multiplier: String,
    pub multiplier_checksum: String,
    pub seed: u64,
    pub config_hash: String,
}

/// On-disk genotype layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenotypeFile {
    pub version: u32,
    pub normal: Vec<NodeInputs>,
    pub reduce: Vec<NodeInputs>,
    pub concat: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl GenotypeFile {
    pub fn new(genotype: Genotype, provenance: Option<Provenance>) -> Self {
        GenotypeFile {
            version: GENOTYPE_VERSION,
            normal: genotype.normal,
            reduce: genotype.reduce,
            concat: genotype.concat,
            provenance,
        }
    }

    pub fn genotype(&self) -> Genotype {
        Genotype {
            normal: self.normal.clone(),
            reduce: self.reduce.clone(),
            concat: self.concat.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("genotype serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GenotypeFile = serde_json::from_str(text)
            .map_err(|e| Error::Genotype(format!("malformed genotype file: {e}")))?;
        if file.version != GENOTYPE_VERSION {
            return Err(Error::Genotype(format!(
                "unsupported genotype version {}",
                file.version
            )));
        }
        file.genotype().validate()?;
        Ok(file)
    }
}

pub fn write_genotype(path: impl AsRef<Path>, file: &GenotypeFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, file.to_json()).map_err(|e| Error::io(path, e))
}

pub fn read_genotype(path: impl AsRef<Path>) -> Result<GenotypeFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GenotypeFile::from_json(&text)
}

struct Candidate {
    src: usize,
    op: usize,
    strength: f64,
}

/// Keeps, per node, the two incoming edges whose strongest non-`zero`
/// operation has the largest softmax weight.
pub fn derive_genotype(alphas: &ArchParams) -> Result<Genotype> {
    let topology = alphas.topology()?;
    if !alphas.normal.is_finite() || !alphas.reduce.is_finite() {
        return Err(Error::NonFinite("architecture logits"));
    }
    let genotype = Genotype {
        normal: derive_cell(&alphas.normal, topology),
        reduce: derive_cell(&alphas.reduce, topology),
        concat: topology.concat(),
    };
    genotype.validate()?;
    Ok(genotype)
}

fn derive_cell(logits: &Tensor, topology: CellTopology) -> Vec<NodeInputs> {
    let zero = OpKind::Zero.index();
    (0..topology.intermediate_nodes())
        .map(|node| {
            let mut candidates: Vec<Candidate> = (0..node + 2)
                .map(|src| {
                    let row = topology.edge_index(node, src) * OpKind::COUNT;
                    let weights = softmax(&logits.data()[row..row + OpKind::COUNT]);
                    let mut op = 0;
                    for k in 0..OpKind::COUNT {
                        if k != zero && weights[k] > weights[op] {
                            op = k;
                        }
                    }
                    Candidate {
                        src,
                        op,
                        strength: weights[op],
                    }
                })
                .collect();
            candidates.sort_by(|a, b| {
                b.strength
                    .partial_cmp(&a.strength)
                    .unwrap_or(Ordering::Equal)
                    .then(a.op.cmp(&b.op))
                    .then(a.src.cmp(&b.src))
            });
            let pick = |c: &Candidate| (c.src, OpKind::ALL[c.op]);
            [pick(&candidates[0]), pick(&candidates[1])]
        })
        .collect()
}
