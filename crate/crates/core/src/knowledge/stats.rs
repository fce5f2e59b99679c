use serde::Serialize;

use crate::corpus::{ClinicalCode, Family};
use crate::knowledge::MedicalKnowledgeGraph;

/// Labels of the off-diagonal adjacency histogram; the first is exact zero.
pub const HISTOGRAM_BUCKETS: [&str; 6] = ["0", "(0,0.2]", "(0.2,0.4]", "(0.4,0.6]", "(0.6,0.8]", "(0.8,1]"];

#[derive(Debug, Clone, Serialize)]
pub struct GraphStats {
    pub nodes: usize,
    pub family_counts: Vec<(Family, usize)>,
    /// Row sums of the normalized adjacency, per node.
    pub degree_mass: Vec<f64>,
    /// Nodes ranked by total co-occurrence count.
    pub top_nodes: Vec<(ClinicalCode, f64)>,
    pub edge_histogram: Vec<(String, usize)>,
}

impl MedicalKnowledgeGraph {
    /// Other nodes ranked by adjacency weight from `node`, ties by index.
    pub fn top_neighbours(&self, node: usize, k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self
            .adjacency_row(node)
            .iter()
            .copied()
            .enumerate()
            .filter(|&(j, w)| j != node && w > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }
}

pub fn graph_stats(graph: &MedicalKnowledgeGraph, top_k: usize) -> GraphStats {
    let n = graph.len();
    let family_counts = Family::ALL.iter().map(|&f| (f, graph.family_count(f))).collect();
    let degree_mass = (0..n).map(|i| graph.adjacency_row(i).iter().sum()).collect();
    let mut top_nodes: Vec<(ClinicalCode, f64)> = (0..n)
        .map(|i| (graph.nodes()[i].clone(), (0..n).map(|j| graph.count(i, j)).sum()))
        .collect();
    top_nodes.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top_nodes.truncate(top_k);
    let mut hist = vec![0usize; HISTOGRAM_BUCKETS.len()];
    for i in 0..n {
        for (j, &w) in graph.adjacency_row(i).iter().enumerate() {
            if i != j {
                let bucket = if w == 0.0 { 0 } else { ((w * 5.0).ceil() as usize).clamp(1, 5) };
                hist[bucket] += 1;
            }
        }
    }
    GraphStats {
        nodes: n,
        family_counts,
        degree_mass,
        top_nodes,
        edge_histogram: HISTOGRAM_BUCKETS.iter().map(|s| s.to_string()).zip(hist).collect(),
    }
}
