//! Environment codebook: vector quantization of confounder representations
//! into a small set of strata.

use crate::autograd::{softmax_rows, Matrix, Var};
use crate::cluster::{kmeans_best_of, kmeans_pp_init, sq_dist};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct HardAssignment {
    pub labels: Vec<usize>,
    /// Row `i` is the code assigned to item `i`.
    pub quantized: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment {
    /// `num_items × K`, rows sum to one.
    pub probs: Matrix,
    /// Probability-weighted blend of the codes.
    pub quantized: Matrix,
}

impl SoftAssignment {
    pub fn argmax(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &p) in r.iter().enumerate() {
                    if p > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn check_dims(h: &Matrix, codebook: &Matrix) -> Result<()> {
    if codebook.nrows() == 0 {
        return Err(Error::InvalidArgument("codebook is empty".into()));
    }
    if h.ncols() != codebook.ncols() {
        return Err(Error::Shape(format!(
            "representation dim {} vs codebook dim {}",
            h.ncols(),
            codebook.ncols()
        )));
    }
    Ok(())
}

fn sq_distances(h: &Matrix, codebook: &Matrix) -> Matrix {
    Matrix::from_shape_fn((h.nrows(), codebook.nrows()), |(i, j)| {
        sq_dist(h.row(i), codebook.row(j))
    })
}

/// Nearest code per row, ties to the lowest code index.
pub fn assign_hard(h: &Matrix, codebook: &Matrix) -> Result<HardAssignment> {
    check_dims(h, codebook)?;
    let labels = crate::cluster::nearest(h, codebook);
    let quantized = codebook.select(ndarray::Axis(0), &labels);
    Ok(HardAssignment { labels, quantized })
}

/// `softmax_j(−‖h_i − e_j‖² / temperature)` and the blended codes.
pub fn assign_soft(h: &Matrix, codebook: &Matrix, temperature: f64) -> Result<SoftAssignment> {
    check_dims(h, codebook)?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let logits = sq_distances(h, codebook).mapv(|d| -d / temperature);
    let probs = softmax_rows(&logits);
    let quantized = probs.dot(codebook);
    Ok(SoftAssignment { probs, quantized })
}

/// `‖sg(h) − e_k‖² + β‖h − sg(e_k)‖²`, summed over dims and averaged over
/// rows. The first term moves the codes, the second commits the encoder.
pub fn vq_loss<'t>(h: Var<'t>, codebook: Var<'t>, labels: &[usize], commitment_weight: f64) -> Var<'t> {
    let n = labels.len().max(1) as f64;
    let q = codebook.rows(labels);
    let codebook_term = (h.detach() - q).square().sum();
    let commit_term = (h - q.detach()).square().sum();
    (codebook_term + commit_term.scale(commitment_weight)).scale(1.0 / n)
}

/// Forward value of `quantized`, gradient routed to `h` unchanged.
pub fn straight_through<'t>(h: Var<'t>, quantized: Var<'t>) -> Var<'t> {
    h + (quantized - h).detach()
}

/// Codebook from the best of several k-means++-seeded k-means runs over
/// `h`. Fails when `h` has fewer than `k` distinct rows, since the codebook
/// would contain duplicate codes.
pub fn init_codebook(h: &Matrix, k: usize, rng: &mut Rng) -> Result<Matrix> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("codebook needs at least 2 codes, got {k}")));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "codebook initialization input".into(),
            step: 0,
        });
    }
    let mut distinct: Vec<Vec<u64>> = h
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.to_bits()).collect())
        .collect();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} distinct confounder rows cannot seed {k} codes",
            distinct.len()
        )));
    }
    let (centers, _) = kmeans_best_of(h, k, INIT_ITERS, INIT_RESTARTS, rng);
    if has_duplicate_rows(&centers) {
        // Lloyd steps merged two codes; the seeds themselves are distinct
        return Ok(kmeans_pp_init(h, k, rng));
    }
    Ok(centers)
}

const INIT_ITERS: usize = 50;
const INIT_RESTARTS: usize = 10;

fn has_duplicate_rows(m: &Matrix) -> bool {
    let rows: Vec<Vec<u64>> = m.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    (0..rows.len()).any(|i| (i + 1..rows.len()).any(|j| rows[i] == rows[j]))
}
