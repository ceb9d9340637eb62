//! Item–item semantic graph built from modality similarity, and the
//! parameter-free propagation that maps raw item features into the shared
//! semantic space.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::dataset::ModalityFeatures;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Top-k cosine neighbours of every item in one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn num_items(&self) -> usize {
        self.neighbors.len()
    }

    /// Unit-weight directed adjacency `i → neighbour`.
    pub fn adjacency(&self) -> SparseMatrix {
        let n = self.num_items();
        let mut a = SparseMatrix::new(n, n);
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                let slot = a.nnz();
                a.push(i, j, 1.0, slot);
            }
        }
        a
    }
}

#[derive(Debug, Clone)]
pub struct SemanticItemGraph {
    pub visual: KnnGraph,
    pub textual: KnnGraph,
    pub weight_v: f64,
    /// `D^{-1/2} (w·A_v + (1−w)·A_t) D^{-1/2}`.
    pub fused: SparseMatrix,
}

/// Cosine-similarity k-nearest-neighbour graph.
///
/// Neighbours are ordered by descending similarity with ties going to the
/// lower item index. An all-zero row has similarity 0 to every item.
pub fn build_knn_graph(features: &ModalityFeatures, k: usize) -> Result<KnnGraph> {
    let x = &features.matrix;
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "k must satisfy 1 <= k < num_items ({n}), got {k}"
        )));
    }
    let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let zero_rows = norms.iter().filter(|&&v| v == 0.0).count();
    if zero_rows > 0 {
        log::warn!(
            "{} features: {zero_rows} zero-norm rows treated as dissimilar to every item",
            features.modality
        );
    }
    let gram = x.dot(&x.t());
    let neighbors = (0..n)
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let denom = norms[i] * norms[j];
                    let sim = if denom > 0.0 { gram[[i, j]] / denom } else { 0.0 };
                    (sim, j)
                })
                .collect();
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(KnnGraph { k, neighbors })
}

/// Convex combination of the two modality graphs followed by symmetric
/// degree normalization. Entries with zero fused weight are dropped.
pub fn fuse_and_normalize(visual: KnnGraph, textual: KnnGraph, weight_v: f64) -> Result<SemanticItemGraph> {
    if visual.num_items() != textual.num_items() {
        return Err(Error::Shape(format!(
            "visual graph has {} items, textual graph has {}",
            visual.num_items(),
            textual.num_items()
        )));
    }
    if !(0.0..=1.0).contains(&weight_v) {
        return Err(Error::InvalidArgument(format!("weight_v must lie in [0, 1], got {weight_v}")));
    }
    let n = visual.num_items();
    let mut raw = SparseMatrix::new(n, n);
    for (g, w) in [(&visual, weight_v), (&textual, 1.0 - weight_v)] {
        if w == 0.0 {
            continue;
        }
        for (i, nbrs) in g.neighbors.iter().enumerate() {
            for &j in nbrs {
                let slot = raw.nnz();
                raw.push(i, j, w, slot);
            }
        }
    }
    let fused = raw.coalesced().sym_normalized();
    Ok(SemanticItemGraph {
        visual,
        textual,
        weight_v,
        fused,
    })
}

/// `Â^layers · x`.
pub fn propagate_isg(features: &Matrix, graph: &SparseMatrix, layers: usize) -> Result<Matrix> {
    if layers == 0 {
        return Err(Error::InvalidArgument("propagation needs at least one layer".into()));
    }
    if graph.ncols != features.nrows() {
        return Err(Error::Shape(format!(
            "graph over {} items, features have {} rows",
            graph.ncols,
            features.nrows()
        )));
    }
    let mut h = graph.matmul(features);
    for _ in 1..layers {
        h = graph.matmul(&h);
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphCacheHeader {
    pub num_items: usize,
    pub nnz: usize,
    pub k: usize,
    pub weight_v: f64,
}

fn cache_header_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `(i32 row, i32 col, f32 value)` little-endian triples plus a
/// JSON header at `<path>.json`.
pub fn write_graph_cache(path: &Path, graph: &SemanticItemGraph) -> Result<()> {
    let m = &graph.fused;
    let mut bytes = Vec::with_capacity(m.nnz() * 12);
    for k in 0..m.nnz() {
        bytes.extend_from_slice(&(m.rows[k] as i32).to_le_bytes());
        bytes.extend_from_slice(&(m.cols[k] as i32).to_le_bytes());
        bytes.extend_from_slice(&(m.vals[k] as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let header = GraphCacheHeader {
        num_items: m.nrows,
        nnz: m.nnz(),
        k: graph.visual.k,
        weight_v: graph.weight_v,
    };
    let hp = cache_header_path(path);
    fs::write(&hp, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&hp, e))
}

pub fn read_graph_cache(path: &Path) -> Result<(GraphCacheHeader, SparseMatrix)> {
    let hp = cache_header_path(path);
    let text = fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
    let header: GraphCacheHeader = serde_json::from_str(&text)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.nnz * 12 {
        return Err(Error::FeatureFormat {
            path: path.to_path_buf(),
            message: format!("expected {} bytes for {} triples", header.nnz * 12, header.nnz),
        });
    }
    let mut m = SparseMatrix::new(header.num_items, header.num_items);
    for (k, c) in bytes.chunks_exact(12).enumerate() {
        let r = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        let col = i32::from_le_bytes([c[4], c[5], c[6], c[7]]);
        let v = f32::from_le_bytes([c[8], c[9], c[10], c[11]]);
        if r < 0 || col < 0 || r as usize >= header.num_items || col as usize >= header.num_items {
            return Err(Error::FeatureFormat {
                path: path.to_path_buf(),
                message: format!("triple {k} has out-of-range index ({r}, {col})"),
            });
        }
        m.push(r as usize, col as usize, f64::from(v), k);
    }
    Ok((header, m))
}
