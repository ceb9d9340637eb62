use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape};
use crate::codebook::{init_codebook, vq_loss};
use crate::config::RunConfig;
use crate::dataset::BprSampler;
use crate::diffusion::diffusion_loss;
use crate::error::{Error, Result};
use crate::frontdoor::{annealed_tau, infonce_pairs_loss};
use crate::metrics::evaluate;
use crate::optim::Adam;
use crate::rng::{self, Rng};

use super::model::{MaskMode, CODEBOOK};
use super::{bpr_loss, pair_scores, total_loss, LossTerms, LossWeights, Model, ModelInputs};

pub const EPOCH_CSV_HEADER: &str = "epoch,loss_total,loss_bpr,loss_dm,loss_vq,loss_nce,val_recall@20";

/// Step-averaged losses of one epoch plus validation Recall@20.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_bpr: f64,
    pub loss_dm: f64,
    pub loss_vq: f64,
    pub loss_nce: f64,
    pub val_recall20: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.loss_total, self.loss_bpr, self.loss_dm, self.loss_vq, self.loss_nce, self.val_recall20
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot at the best validation epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_recall20: f64,
    pub epochs: Vec<EpochRecord>,
}

fn diverged(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::NonFinite { what, .. } => Error::Divergence {
            epoch,
            step,
            component: what,
        },
        other => other,
    }
}

struct Streams {
    data: Rng,
    mask: Rng,
    diffusion: Rng,
}

/// Mean diffusion loss of the two channels on one item minibatch.
fn diffusion_term<'t>(
    model: &Model,
    inputs: &ModelInputs,
    p: &crate::optim::BoundParams<'t>,
    tape: &'t Tape,
    rng: &mut Rng,
) -> Result<crate::autograd::Var<'t>> {
    let n = inputs.num_items();
    let size = model.config.train.diffusion_batch.min(n);
    let mut idx = index::sample(rng, n, size).into_vec();
    idx.sort_unstable();
    let schedule = model.schedule.as_ref().expect("diffusion enabled");
    let [dv, dt] = model.denoisers(inputs);
    let rows = |m: &Matrix| m.select(ndarray::Axis(0), &idx);
    let lv = diffusion_loss(
        &rows(&inputs.z_visual),
        tape.leaf(rows(&inputs.cond_for_visual)),
        &dv,
        p,
        schedule,
        rng,
    )?;
    let lt = diffusion_loss(
        &rows(&inputs.z_textual),
        tape.leaf(rows(&inputs.cond_for_textual)),
        &dt,
        p,
        schedule,
        rng,
    )?;
    Ok((lv + lt).scale(0.5))
}

fn steps_per_epoch(cfg: &RunConfig, num_edges: usize) -> usize {
    num_edges.div_ceil(cfg.train.batch_size).max(1)
}

/// Diffusion-only updates before joint training.
fn warm_up(model: &mut Model, inputs: &ModelInputs, adam: &mut Adam, rng: &mut Rng) -> Result<()> {
    let steps = steps_per_epoch(&model.config, inputs.train_graph.edges().len());
    let names: Vec<String> = model
        .denoisers(inputs)
        .iter()
        .flat_map(|d| d.param_names())
        .collect();
    for w in 0..model.config.train.warmup_epochs {
        let mut total = 0.0;
        for s in 0..steps {
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let loss = diffusion_term(model, inputs, &p, &tape, rng)?;
            if !loss.item().is_finite() {
                return Err(Error::Divergence {
                    epoch: 0,
                    step: s,
                    component: "warm-up diffusion loss".into(),
                });
            }
            total += loss.item();
            let grads = tape.backward(loss);
            let mut g = p.gradients(&grads);
            g.retain(|k, _| names.contains(k));
            adam.step(&mut model.params, &g);
        }
        log::debug!("warm-up epoch {}: diffusion loss {:.5}", w + 1, total / steps as f64);
    }
    Ok(())
}

fn refresh_confounder(model: &mut Model, inputs: &ModelInputs) -> Result<()> {
    model.confounder = model.compute_confounder(inputs)?;
    Ok(())
}

/// Validation Recall@20 under deterministic inference.
pub fn validation_recall20(model: &Model, inputs: &ModelInputs, pairs: &[(usize, usize)]) -> Result<f64> {
    let scores = model.infer(inputs)?.scores;
    let report = evaluate(&scores, pairs, &inputs.train_graph.user_items(), &[20])?;
    Ok(report.recall(20).expect("K=20 requested"))
}

/// Trains on `inputs.train_graph`, selecting the epoch with the best
/// validation Recall@20 and stopping after `patience` epochs without
/// improvement.
pub fn train(cfg: &RunConfig, inputs: &ModelInputs, validation: &[(usize, usize)]) -> Result<TrainOutcome> {
    if validation.is_empty() {
        return Err(Error::InvalidArgument(
            "no validation pairs: every user has fewer than three interactions".into(),
        ));
    }
    let mut model = Model::new(cfg, inputs)?;
    let t = &cfg.train;
    let mut adam = Adam::new(t.lr);
    let mut streams = Streams {
        data: rng::stream(cfg.seed, rng::DATA),
        mask: rng::stream(cfg.seed, rng::MASK),
        diffusion: rng::stream(cfg.seed, rng::DIFFUSION),
    };
    let sampler = BprSampler::new(&inputs.train_graph);
    let nu = inputs.num_users();
    let steps = steps_per_epoch(cfg, inputs.train_graph.edges().len());
    let weights = LossWeights {
        dm: if model.uses_diffusion() { t.lambda_dm } else { 0.0 },
        vq: if model.uses_codebook() { t.lambda_vq } else { 0.0 },
        nce: if model.uses_frontdoor() { t.lambda_nce } else { 0.0 },
        reg: t.lambda_reg,
    };

    if model.uses_diffusion() {
        warm_up(&mut model, inputs, &mut adam, &mut streams.diffusion)?;
    }
    if model.uses_codebook() {
        refresh_confounder(&mut model, inputs)?;
        let h = model.confounder.as_ref().expect("codebook path");
        let cb = init_codebook(h, cfg.model.codebook_size, &mut rng::stream(cfg.seed, rng::CODEBOOK))?;
        *model.params.get_mut(CODEBOOK) = cb;
    }

    let mut records = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut stale = 0;
    for epoch in 1..=t.epochs {
        model.tau = annealed_tau(cfg.model.tau_start, cfg.model.tau_decay, cfg.model.tau_min, epoch - 1);
        if model.uses_diffusion() && epoch > 1 {
            refresh_confounder(&mut model, inputs)?;
        }
        let mut sums = [0.0f64; 5];
        for step in 0..steps {
            let triples = sampler.sample(t.batch_size, &mut streams.data)?;
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let f = model
                .forward(&p, inputs, MaskMode::Sample(&mut streams.mask), true)
                .map_err(|e| diverged(e, epoch, step))?;
            let users: Vec<usize> = triples.iter().map(|x| x.0).collect();
            let pos: Vec<usize> = triples.iter().map(|x| x.1).collect();
            let neg: Vec<usize> = triples.iter().map(|x| x.2).collect();
            let u = f.user_final.rows(&users);
            let bpr = bpr_loss(pair_scores(u, f.item_repr.rows(&pos)), pair_scores(u, f.item_repr.rows(&neg)));

            let node_rows: Vec<usize> = users
                .iter()
                .copied()
                .chain(pos.iter().map(|i| nu + i))
                .chain(neg.iter().map(|i| nu + i))
                .collect();
            let l2 = f
                .embedding
                .rows(&node_rows)
                .square()
                .sum()
                .scale(1.0 / triples.len() as f64);

            let vq = match (&model.confounder, &f.labels) {
                (Some(h), Some(labels)) if weights.vq != 0.0 => Some(vq_loss(
                    tape.leaf(h.clone()),
                    p.get(CODEBOOK),
                    labels,
                    cfg.model.commitment_weight,
                )),
                _ => None,
            };

            let infonce = if weights.nce != 0.0 {
                let mut seen = BTreeMap::new();
                for &i in &pos {
                    let next = seen.len();
                    seen.entry(i).or_insert(next);
                }
                let mut items: Vec<(usize, usize)> = seen.into_iter().map(|(i, o)| (o, i)).collect();
                items.sort_unstable();
                let items: Vec<usize> = items.into_iter().take(t.nce_batch).map(|(_, i)| i).collect();
                if items.len() >= 2 {
                    Some(infonce_pairs_loss(f.modal.rows(&items), f.item_final.rows(&items), cfg.model.tau_contrast)?)
                } else {
                    None
                }
            } else {
                None
            };

            let diffusion = if weights.dm != 0.0 {
                Some(diffusion_term(&model, inputs, &p, &tape, &mut streams.diffusion)?)
            } else {
                None
            };

            let terms = LossTerms {
                bpr,
                diffusion,
                vq,
                infonce,
                l2,
            };
            let (loss, breakdown) = total_loss(&terms, weights).map_err(|e| diverged(e, epoch, step))?;
            for (acc, v) in sums.iter_mut().zip([
                breakdown.total,
                breakdown.bpr,
                breakdown.diffusion,
                breakdown.vq,
                breakdown.infonce,
            ]) {
                *acc += v;
            }
            let grads = tape.backward(loss);
            let g = p.gradients(&grads);
            if g.values().any(|m| m.iter().any(|v| !v.is_finite())) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    component: "gradient".into(),
                });
            }
            adam.step(&mut model.params, &g);
        }

        let val = validation_recall20(&model, inputs, validation)?;
        let n = steps as f64;
        let rec = EpochRecord {
            epoch,
            loss_total: sums[0] / n,
            loss_bpr: sums[1] / n,
            loss_dm: sums[2] / n,
            loss_vq: sums[3] / n,
            loss_nce: sums[4] / n,
            val_recall20: val,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (bpr {:.5}) val R@20 {:.4}",
            rec.loss_total,
            rec.loss_bpr,
            val
        );
        records.push(rec);
        if best.as_ref().is_none_or(|b| val > b.2) {
            best = Some((model.clone(), epoch, val));
            stale = 0;
        } else {
            stale += 1;
            if stale >= t.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (model, best_epoch, best_val_recall20) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        best_val_recall20,
        epochs: records,
    })
}
