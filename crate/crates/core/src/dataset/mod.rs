//! Interaction graphs, modality features, leave-one-out splits, negative
//! sampling and a synthetic confounded data generator.

mod io;
mod sampling;
mod split;
mod synthetic;

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

pub use io::{
    load_dataset, load_dataset_dir, read_features, read_interactions, read_pairs, sidecar_path,
    write_dataset_dir, write_features, write_interactions, write_pairs, FeatureSidecar,
    DECONFOUNDED_FILE, GROUND_TRUTH_FILE, INTERACTIONS_FILE, TEXTUAL_FILE, VISUAL_FILE,
};
pub use sampling::{sample_bpr_triples, BprSampler, MAX_NEGATIVE_RETRIES};
pub use split::{split_leave_one_out, SplitSet};
pub use synthetic::{generate_synthetic, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Visual => f.write_str("visual"),
            Modality::Textual => f.write_str("textual"),
        }
    }
}

/// Users, items and the observed bipartite interaction edges.
#[derive(Debug, Clone)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    edges: Vec<(usize, usize)>,
    timestamps: Vec<Option<i64>>,
    norm_adjacency: Arc<SparseMatrix>,
}

impl InteractionGraph {
    pub fn new(num_users: usize, num_items: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        let ts = vec![None; edges.len()];
        Self::with_timestamps(num_users, num_items, edges, ts)
    }

    pub fn with_timestamps(
        num_users: usize,
        num_items: usize,
        edges: Vec<(usize, usize)>,
        timestamps: Vec<Option<i64>>,
    ) -> Result<Self> {
        if timestamps.len() != edges.len() {
            return Err(Error::Shape(format!(
                "{} edges but {} timestamps",
                edges.len(),
                timestamps.len()
            )));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for &(u, i) in &edges {
            if u >= num_users || i >= num_items {
                return Err(Error::InvalidArgument(format!(
                    "edge ({u}, {i}) outside {num_users} users × {num_items} items"
                )));
            }
            if !seen.insert((u, i)) {
                return Err(Error::InvalidArgument(format!("duplicate edge ({u}, {i})")));
            }
        }
        let norm_adjacency = Arc::new(bipartite_normalized(num_users, num_items, &edges));
        Ok(InteractionGraph {
            num_users,
            num_items,
            edges,
            timestamps,
            norm_adjacency,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn timestamps(&self) -> &[Option<i64>] {
        &self.timestamps
    }

    /// Symmetrically normalized adjacency over users then items. Both
    /// entries of edge `k` use weight slot `k`.
    pub fn norm_adjacency(&self) -> &Arc<SparseMatrix> {
        &self.norm_adjacency
    }

    /// Item lists per user, in edge order.
    pub fn user_items(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_users];
        for &(u, i) in &self.edges {
            out[u].push(i);
        }
        out
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_users];
        for &(u, _) in &self.edges {
            d[u] += 1;
        }
        d
    }

    pub fn item_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.num_items];
        for &(_, i) in &self.edges {
            d[i] += 1;
        }
        d
    }
}

fn bipartite_normalized(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut du = vec![0.0f64; num_users];
    let mut di = vec![0.0f64; num_items];
    for &(u, i) in edges {
        du[u] += 1.0;
        di[i] += 1.0;
    }
    let n = num_users + num_items;
    let mut adj = SparseMatrix::new(n, n);
    for (k, &(u, i)) in edges.iter().enumerate() {
        let w = 1.0 / (du[u] * di[i]).sqrt();
        adj.push(u, num_users + i, w, k);
        adj.push(num_users + i, u, w, k);
    }
    adj
}

/// Per-item feature matrix for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityFeatures {
    pub modality: Modality,
    pub matrix: Matrix,
}

impl ModalityFeatures {
    pub fn new(modality: Modality, matrix: Matrix) -> Result<Self> {
        if let Some(pos) = matrix.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos / matrix.ncols().max(1), pos % matrix.ncols().max(1));
            return Err(Error::InvalidArgument(format!(
                "{modality} features: non-finite value at row {r}, column {c}"
            )));
        }
        Ok(ModalityFeatures { modality, matrix })
    }

    pub fn num_items(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Everything a training run consumes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub graph: InteractionGraph,
    pub visual: ModalityFeatures,
    pub textual: ModalityFeatures,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Held-out pairs drawn without exposure bias (synthetic data only).
    pub deconfounded_test: Option<Vec<(usize, usize)>>,
    /// Ground-truth confounder stratum per item (synthetic data only).
    pub item_confounder: Option<Vec<usize>>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_items();
        for f in [&self.visual, &self.textual] {
            if f.num_items() != n {
                return Err(Error::Shape(format!(
                    "{} features have {} rows but the graph has {} items",
                    f.modality,
                    f.num_items(),
                    n
                )));
            }
        }
        if self.user_ids.len() != self.graph.num_users() || self.item_ids.len() != n {
            return Err(Error::Shape("id vocabularies do not match graph".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_entries_follow_degrees() {
        // user 0: items 0,1 ; user 1: item 1
        let g = InteractionGraph::new(2, 2, vec![(0, 0), (0, 1), (1, 1)]).unwrap();
        let d = g.norm_adjacency().to_dense();
        // (u0, i1): deg(u0)=2, deg(i1)=2
        assert!((d[[0, 3]] - 0.5).abs() < 1e-15);
        assert!((d[[3, 0]] - 0.5).abs() < 1e-15);
        assert!((d[[0, 2]] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((d[[1, 3]] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(d[[1, 2]], 0.0);
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        assert!(InteractionGraph::new(1, 1, vec![(0, 1)]).is_err());
        assert!(InteractionGraph::new(1, 2, vec![(0, 1), (0, 1)]).is_err());
    }

    #[test]
    fn rejects_non_finite_features() {
        let m = ndarray::array![[1.0, f64::NAN]];
        assert!(ModalityFeatures::new(Modality::Visual, m).is_err());
    }
}
