//! Graph-convolution recommender: layer-mean propagation over the (masked)
//! user–item graph, additive fusion of modal and confounder terms, and the
//! training objective.

mod model;
mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use model::{prepare_inputs, Forward, Inference, MaskMode, Model, ModelInputs};
pub use model::{CODEBOOK, DENOISER_TEXTUAL, DENOISER_VISUAL, EMBEDDING, PROJ_CONFOUNDER, PROJ_TEXTUAL, PROJ_VISUAL};
pub use train::{train, EpochRecord, TrainOutcome, EPOCH_CSV_HEADER};

use crate::autograd::{Matrix, Var};
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Mean of `e⁽⁰⁾ … e⁽ᴸ⁾` with `e⁽ˡ⁺¹⁾ = Â·e⁽ˡ⁾`.
pub fn propagate(adj: &SparseMatrix, e0: &Matrix, layers: usize) -> Matrix {
    let mut cur = e0.clone();
    let mut acc = e0.clone();
    for _ in 0..layers {
        cur = adj.matmul(&cur);
        acc += &cur;
    }
    acc / (layers + 1) as f64
}

/// Tape version of [`propagate`] where layer `l` is produced by
/// `step(l, e⁽ˡ⁾)`, so each layer may use its own edge weights.
pub fn propagate_with<'t>(
    e0: Var<'t>,
    layers: usize,
    mut step: impl FnMut(usize, Var<'t>) -> Result<Var<'t>>,
) -> Result<Var<'t>> {
    let mut cur = e0;
    let mut acc = e0;
    for l in 0..layers {
        cur = step(l, cur)?;
        acc = acc + cur;
    }
    Ok(acc.scale(1.0 / (layers + 1) as f64))
}

/// Unmasked tape propagation.
pub fn propagate_var<'t>(adj: &Arc<SparseMatrix>, e0: Var<'t>, layers: usize) -> Var<'t> {
    propagate_with(e0, layers, |_, e| Ok(crate::autograd::spmm(adj, None, e))).expect("infallible step")
}

/// `proj_v(h_v) + proj_t(h_t)`.
pub fn modal_embedding<'t>(h_visual: Var<'t>, proj_v: Var<'t>, h_textual: Var<'t>, proj_t: Var<'t>) -> Var<'t> {
    h_visual.matmul(proj_v) + h_textual.matmul(proj_t)
}

/// `item_final + modal [+ proj_c(Ĥ_c)]`.
pub fn item_representation<'t>(item_final: Var<'t>, modal: Var<'t>, confounder: Option<(Var<'t>, Var<'t>)>) -> Var<'t> {
    let mut repr = item_final + modal;
    if let Some((hc, proj_c)) = confounder {
        repr = repr + hc.matmul(proj_c);
    }
    repr
}

/// Dot products of aligned rows as an `n×1` column.
pub fn pair_scores<'t>(users: Var<'t>, items: Var<'t>) -> Var<'t> {
    (users * items).row_sum()
}

/// Full `num_users × num_items` score matrix.
pub fn score_matrix(user_final: &Matrix, item_repr: &Matrix) -> Matrix {
    user_final.dot(&item_repr.t())
}

/// `−mean ln σ(s_pos − s_neg)`.
pub fn bpr_loss<'t>(pos: Var<'t>, neg: Var<'t>) -> Var<'t> {
    -(pos - neg).log_sigmoid().mean()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub dm: f64,
    pub vq: f64,
    pub nce: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub diffusion: f64,
    pub vq: f64,
    pub infonce: f64,
    pub l2: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn recompose(&self) -> f64 {
        let w = &self.weights;
        self.bpr + w.dm * self.diffusion + w.vq * self.vq + w.nce * self.infonce + w.reg * self.l2
    }
}

/// Loss terms of one step, on the tape.
pub struct LossTerms<'t> {
    pub bpr: Var<'t>,
    pub diffusion: Option<Var<'t>>,
    pub vq: Option<Var<'t>>,
    pub infonce: Option<Var<'t>>,
    pub l2: Var<'t>,
}

/// Weighted sum of the present terms plus its scalar breakdown. Absent
/// terms count as zero. Fails naming the first non-finite component.
pub fn total_loss<'t>(terms: &LossTerms<'t>, weights: LossWeights) -> Result<(Var<'t>, LossBreakdown)> {
    let value = |v: Option<Var<'t>>| v.map_or(0.0, |v| v.item());
    let mut b = LossBreakdown {
        bpr: terms.bpr.item(),
        diffusion: value(terms.diffusion),
        vq: value(terms.vq),
        infonce: value(terms.infonce),
        l2: terms.l2.item(),
        total: 0.0,
        weights,
    };
    for (name, v) in [
        ("bpr", b.bpr),
        ("diffusion", b.diffusion),
        ("vq", b.vq),
        ("infonce", b.infonce),
        ("l2", b.l2),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("{name} loss"),
                step: 0,
            });
        }
    }
    let mut total = terms.bpr + terms.l2.scale(weights.reg);
    for (t, w) in [
        (terms.diffusion, weights.dm),
        (terms.vq, weights.vq),
        (terms.infonce, weights.nce),
    ] {
        if let Some(t) = t {
            if w != 0.0 {
                total = total + t.scale(w);
            }
        }
    }
    b.total = b.recompose();
    Ok((total, b))
}
