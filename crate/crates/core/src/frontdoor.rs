//! Learned edge retention over the user–item graph.
//!
//! Each interaction edge gets a logit from a small MLP over its endpoint
//! embeddings. A relaxed Bernoulli sample of that logit scales the edge in
//! the normalized adjacency, and item embeddings propagated over the masked
//! graph are aligned with the items' modal embeddings by InfoNCE.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::autograd::{sigmoid, Matrix, Var};
use crate::dataset::InteractionGraph;
use crate::error::{Error, Result};
use crate::optim::{xavier_init, BoundParams, ParamStore};
use crate::rng::Rng;
use crate::sparse::SparseMatrix;

/// Two-layer tanh MLP from `[item ; user]` embeddings to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScorer {
    pub prefix: String,
    pub dim: usize,
    pub hidden: usize,
    /// Initial output bias, i.e. the starting logit of every edge.
    pub bias_init: f64,
}

impl EdgeScorer {
    pub fn new(prefix: impl Into<String>, dim: usize, hidden: usize) -> Self {
        EdgeScorer {
            prefix: prefix.into(),
            dim,
            hidden,
            bias_init: 0.0,
        }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn with_bias_init(mut self, bias: f64) -> Self {
        self.bias_init = bias;
        self
    }

    pub fn param_names(&self) -> Vec<String> {
        ["w1", "b1", "w2", "b2"].iter().map(|p| self.name(p)).collect()
    }

    pub fn init_params(&self, params: &mut ParamStore, rng: &mut Rng) {
        params.insert(self.name("w1"), xavier_init(rng, 2 * self.dim, self.hidden));
        params.insert(self.name("b1"), Matrix::zeros((1, self.hidden)));
        params.insert(self.name("w2"), xavier_init(rng, self.hidden, 1));
        params.insert(self.name("b2"), Matrix::from_elem((1, 1), self.bias_init));
    }

    /// One logit per `(user, item)` edge as an `E×1` column.
    pub fn edge_logits<'t>(
        &self,
        p: &BoundParams<'t>,
        item_emb: Var<'t>,
        user_emb: Var<'t>,
        edges: &[(usize, usize)],
    ) -> Var<'t> {
        let users: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let items: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let inp = Var::concat_cols(&[item_emb.rows(&items), user_emb.rows(&users)]);
        inp.matmul(p.get(&self.name("w1")))
            .add_row(p.get(&self.name("b1")))
            .tanh()
            .matmul(p.get(&self.name("w2")))
            .add_row(p.get(&self.name("b2")))
    }
}

/// `ln ε − ln(1 − ε)`; rejects draws on the closed boundary.
pub fn logistic_noise(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("uniform draw {eps} must lie strictly inside (0, 1)")));
    }
    Ok(eps.ln() - (1.0 - eps).ln())
}

/// Scalar concrete sample `σ((logit(ε) + ω)/τ)`.
pub fn concrete_sample(omega: f64, tau: f64, eps: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(sigmoid((logistic_noise(eps)? + omega) / tau))
}

/// Relaxed Bernoulli mask for an `E×1` logit column; differentiable in ω.
pub fn sample_mask<'t>(omega: Var<'t>, tau: f64, eps: &[f64]) -> Result<Var<'t>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (rows, cols) = omega.shape();
    if cols != 1 || rows != eps.len() {
        return Err(Error::Shape(format!(
            "{} uniform draws for a {rows}×{cols} logit column",
            eps.len()
        )));
    }
    let noise = eps.iter().map(|&e| logistic_noise(e)).collect::<Result<Vec<_>>>()?;
    let noise = omega
        .tape()
        .leaf(Matrix::from_shape_vec((rows, 1), noise).expect("length checked"));
    Ok((omega + noise).scale(1.0 / tau).sigmoid())
}

/// Uniform draws on the open interval (0, 1).
pub fn draw_uniform_open(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let e: f64 = rng.random();
            if e > 0.0 {
                break e;
            }
        })
        .collect()
}

/// Temperature after `epoch` rounds of multiplicative decay, floored.
pub fn annealed_tau(start: f64, decay: f64, floor: f64, epoch: usize) -> f64 {
    (start * decay.powi(epoch as i32)).max(floor)
}

/// An interaction graph with one retention value per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalSubgraph {
    pub rho: Vec<f64>,
    /// Normalized bipartite adjacency with each edge's two entries scaled
    /// by its ρ.
    pub adjacency: SparseMatrix,
}

pub fn build_causal_subgraph(graph: &InteractionGraph, rho: &[f64]) -> Result<CausalSubgraph> {
    if rho.len() != graph.edges().len() {
        return Err(Error::Shape(format!(
            "{} mask values for {} edges",
            rho.len(),
            graph.edges().len()
        )));
    }
    if let Some(r) = rho.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidArgument(format!("mask value {r} outside [0, 1]")));
    }
    Ok(CausalSubgraph {
        rho: rho.to_vec(),
        adjacency: graph.norm_adjacency().reweighted(rho),
    })
}

/// Symmetric InfoNCE between row-aligned `x` and `x_star` with cosine
/// similarity; the other rows of the batch are the negatives.
pub fn infonce_pairs_loss<'t>(x: Var<'t>, x_star: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    if x.shape() != x_star.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), x_star.shape())));
    }
    let b = x.shape().0;
    if b < 2 {
        return Err(Error::InvalidArgument("InfoNCE needs at least two rows for negatives".into()));
    }
    let sims = x
        .normalize_rows()
        .matmul(x_star.normalize_rows().t())
        .scale(1.0 / temperature);
    let diag: Vec<usize> = (0..b).collect();
    let fwd = sims.softmax_cross_entropy(&diag);
    let bwd = sims.t().softmax_cross_entropy(&diag);
    Ok((fwd + bwd).scale(0.5))
}

/// Writes `user<TAB>item<TAB>rho` lines using the dataset's raw ids.
pub fn write_pruned_graph(
    path: &Path,
    edges: &[(usize, usize)],
    rho: &[f64],
    user_ids: &[String],
    item_ids: &[String],
) -> Result<()> {
    if edges.len() != rho.len() {
        return Err(Error::Shape(format!("{} edges, {} mask values", edges.len(), rho.len())));
    }
    let mut out = String::new();
    for (&(u, i), r) in edges.iter().zip(rho) {
        writeln!(out, "{}\t{}\t{r}", user_ids[u], item_ids[i]).expect("string write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
