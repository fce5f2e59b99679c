//! Code co-occurrence graph over the training split and its GCN embedding.

mod gcn;
mod stats;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClinicalCode, Family, PatientStay};
use crate::error::{Error, Result};
use crate::io;

pub use gcn::{gcn_forward, gcn_forward_tape, Gcn};
pub use stats::{graph_stats, GraphStats, HISTOGRAM_BUCKETS};

const MAGIC: &[u8] = b"PIGKG001\n";

/// Nodes in family order then code order; dense `n × n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MedicalKnowledgeGraph {
    nodes: Vec<ClinicalCode>,
    index: HashMap<ClinicalCode, usize>,
    /// Number of stays in which both codes appear; zero diagonal.
    counts: Vec<f64>,
    /// Row-normalized `counts`.
    adjacency: Vec<f64>,
    /// `(A + I) · D̂⁻¹` with `D̂_jj` the row sums of `A + I`.
    propagation: Vec<f64>,
    pub split_checksum: String,
}

impl MedicalKnowledgeGraph {
    pub fn build(train: &[&PatientStay], split_checksum: impl Into<String>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InsufficientCorpus("cannot build a graph from zero training stays".into()));
        }
        let nodes: Vec<ClinicalCode> = train
            .iter()
            .flat_map(|s| s.codes.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: HashMap<ClinicalCode, usize> = nodes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        let n = nodes.len();
        let mut counts = vec![0.0; n * n];
        for stay in train {
            let ids: BTreeSet<usize> = stay.codes.iter().map(|c| index[c]).collect();
            for &i in &ids {
                for &j in &ids {
                    if i != j {
                        counts[i * n + j] += 1.0;
                    }
                }
            }
        }
        Self::from_counts(nodes, counts, split_checksum.into())
    }

    /// Graph from an explicit symmetric count matrix with zero diagonal.
    pub fn from_counts(nodes: Vec<ClinicalCode>, counts: Vec<f64>, split_checksum: String) -> Result<Self> {
        let n = nodes.len();
        if counts.len() != n * n {
            return Err(Error::DimensionMismatch {
                left: counts.len(),
                right: n * n,
            });
        }
        if counts.iter().any(|&c| !(c >= 0.0) || !c.is_finite()) || (0..n).any(|i| counts[i * n + i] != 0.0) {
            return Err(Error::InvalidData("co-occurrence counts must be finite, non-negative, zero-diagonal".into()));
        }
        let mut adjacency = vec![0.0; n * n];
        for i in 0..n {
            let row = &counts[i * n..(i + 1) * n];
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                for j in 0..n {
                    adjacency[i * n + j] = row[j] / total;
                }
            }
        }
        let mut with_self = adjacency.clone();
        for i in 0..n {
            with_self[i * n + i] += 1.0;
        }
        let degree: Vec<f64> = (0..n).map(|i| with_self[i * n..(i + 1) * n].iter().sum()).collect();
        let mut propagation = with_self;
        for i in 0..n {
            for j in 0..n {
                propagation[i * n + j] /= degree[j];
            }
        }
        let index = nodes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Ok(Self {
            nodes,
            index,
            counts,
            adjacency,
            propagation,
            split_checksum,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[ClinicalCode] {
        &self.nodes
    }

    pub fn node_index(&self, code: &ClinicalCode) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn count(&self, i: usize, j: usize) -> f64 {
        self.counts[i * self.len() + j]
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn adjacency_row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.adjacency[i * n..(i + 1) * n]
    }

    pub fn propagation(&self) -> &[f64] {
        &self.propagation
    }

    pub fn family_count(&self, family: Family) -> usize {
        self.nodes.iter().filter(|c| c.family == family).count()
    }

    /// Node list file: one `family<TAB>code` line per node, in index order.
    pub fn nodes_file(&self) -> String {
        self.nodes.iter().map(|c| format!("{}\t{}\n", c.family, c.code)).collect()
    }

    pub fn matrix_file(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        io::f64s_to_bytes(&self.counts, &mut payload);
        io::f64s_to_bytes(&self.adjacency, &mut payload);
        let header = serde_json::json!({
            "n": self.len(),
            "nodes_checksum": io::sha256_hex(self.nodes_file().as_bytes()),
            "payload_checksum": io::sha256_hex(&payload),
            "split_checksum": self.split_checksum,
        });
        io::frame(MAGIC, header.to_string().as_bytes(), &payload)
    }

    pub fn from_files(nodes_text: &str, matrix: &[u8]) -> Result<Self> {
        #[derive(Deserialize, Serialize)]
        struct Header {
            n: usize,
            nodes_checksum: String,
            payload_checksum: String,
            split_checksum: String,
        }
        let (header, payload) = io::split_framed(matrix, MAGIC, "knowledge graph")?;
        let header: Header = serde_json::from_slice(header)
            .map_err(|e| Error::Incompatible(format!("knowledge graph header: {e}")))?;
        if io::sha256_hex(payload) != header.payload_checksum {
            return Err(Error::Incompatible("knowledge graph checksum mismatch".into()));
        }
        if io::sha256_hex(nodes_text.as_bytes()) != header.nodes_checksum {
            return Err(Error::Incompatible("node list does not match adjacency file".into()));
        }
        let mut nodes = Vec::new();
        for (i, line) in nodes_text.lines().enumerate() {
            let (family, code) = line.split_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected family<TAB>code".into(),
            })?;
            nodes.push(ClinicalCode::new(Family::parse(family)?, code)?);
        }
        let n = header.n;
        let values = io::bytes_to_f64s(payload);
        if nodes.len() != n || values.len() != 2 * n * n {
            return Err(Error::Incompatible("knowledge graph size mismatch".into()));
        }
        let graph = Self::from_counts(nodes, values[..n * n].to_vec(), header.split_checksum)?;
        if graph.adjacency != values[n * n..] {
            return Err(Error::Incompatible("stored adjacency disagrees with counts".into()));
        }
        Ok(graph)
    }

    pub fn save(&self, nodes_path: &Path, matrix_path: &Path) -> Result<()> {
        io::write_atomic(nodes_path, self.nodes_file().as_bytes())?;
        io::write_atomic(matrix_path, &self.matrix_file())
    }

    pub fn load(nodes_path: &Path, matrix_path: &Path) -> Result<Self> {
        Self::from_files(&io::read_string(nodes_path)?, &io::read(matrix_path)?)
    }
}
