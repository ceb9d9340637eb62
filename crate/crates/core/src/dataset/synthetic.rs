//! Synthetic data with a known confounder.
//!
//! The generative program:
//!
//! * every item draws a stratum `c` of the confounder;
//! * visual and textual features are independent given `c`: each is the
//!   stratum's per-modality mean mixed with fresh noise, weighted by
//!   `confounder_strength`;
//! * users belong to archetypes. The preference logit of a user for an item
//!   is a genuine archetype–item affinity plus a direct effect of the item's
//!   stratum on that archetype;
//! * observed interactions mix the preference distribution with an
//!   item-exposure distribution unrelated to preference, weighted by
//!   `exposure_bias_strength`;
//! * a deconfounded test set redraws per-user items from the preference
//!   distribution alone.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, InteractionGraph, Modality, ModalityFeatures};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_confounders: usize,
    pub confounder_strength: f64,
    pub exposure_bias_strength: f64,
    pub seed: u64,
    #[serde(default = "defaults::visual_dim")]
    pub visual_dim: usize,
    #[serde(default = "defaults::textual_dim")]
    pub textual_dim: usize,
    /// Scale of the per-item feature noise before mixing.
    #[serde(default = "defaults::noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "defaults::interactions_per_user")]
    pub interactions_per_user: usize,
    #[serde(default = "defaults::num_archetypes")]
    pub num_archetypes: usize,
    #[serde(default = "defaults::preference_dim")]
    pub preference_dim: usize,
    /// Weight of the direct confounder → preference effect.
    #[serde(default = "defaults::confounder_effect")]
    pub confounder_effect: f64,
    /// Log-normal spread of item exposure.
    #[serde(default = "defaults::popularity_skew")]
    pub popularity_skew: f64,
    #[serde(default = "defaults::deconfounded_per_user")]
    pub deconfounded_per_user: usize,
}

mod defaults {
    pub fn visual_dim() -> usize {
        64
    }
    pub fn textual_dim() -> usize {
        64
    }
    pub fn noise_scale() -> f64 {
        2.0
    }
    pub fn interactions_per_user() -> usize {
        15
    }
    pub fn num_archetypes() -> usize {
        8
    }
    pub fn preference_dim() -> usize {
        8
    }
    pub fn confounder_effect() -> f64 {
        1.5
    }
    pub fn popularity_skew() -> f64 {
        1.5
    }
    pub fn deconfounded_per_user() -> usize {
        10
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_users: 500,
            num_items: 300,
            num_confounders: 4,
            confounder_strength: 0.8,
            exposure_bias_strength: 0.5,
            seed: 7,
            visual_dim: defaults::visual_dim(),
            textual_dim: defaults::textual_dim(),
            noise_scale: defaults::noise_scale(),
            interactions_per_user: defaults::interactions_per_user(),
            num_archetypes: defaults::num_archetypes(),
            preference_dim: defaults::preference_dim(),
            confounder_effect: defaults::confounder_effect(),
            popularity_skew: defaults::popularity_skew(),
            deconfounded_per_user: defaults::deconfounded_per_user(),
        }
    }
}

impl SyntheticSpec {
    pub fn new(
        num_users: usize,
        num_items: usize,
        num_confounders: usize,
        confounder_strength: f64,
        exposure_bias_strength: f64,
        seed: u64,
    ) -> Self {
        SyntheticSpec {
            num_users,
            num_items,
            num_confounders,
            confounder_strength,
            exposure_bias_strength,
            seed,
            ..SyntheticSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.num_users == 0 || self.num_items == 0 {
            return bad("num_users and num_items must be positive");
        }
        if self.num_confounders == 0 {
            return bad("num_confounders must be at least 1");
        }
        for (name, v) in [
            ("confounder_strength", self.confounder_strength),
            ("exposure_bias_strength", self.exposure_bias_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(&format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.visual_dim == 0 || self.textual_dim == 0 || self.preference_dim == 0 {
            return bad("feature and preference dimensions must be positive");
        }
        if self.num_archetypes == 0 {
            return bad("num_archetypes must be at least 1");
        }
        if self.interactions_per_user == 0 {
            return bad("interactions_per_user must be at least 1");
        }
        if self.interactions_per_user + self.deconfounded_per_user > self.num_items {
            return bad("interactions_per_user + deconfounded_per_user exceeds num_items");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and non-negative");
        }
        Ok(())
    }
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn modality_features(
    rng: &mut Rng,
    strata: &[usize],
    num_strata: usize,
    dim: usize,
    strength: f64,
    noise_scale: f64,
) -> Array2<f64> {
    let means = gaussian(rng, num_strata, dim);
    let noise = gaussian(rng, strata.len(), dim);
    let mut x = Array2::zeros((strata.len(), dim));
    for (i, &c) in strata.iter().enumerate() {
        for j in 0..dim {
            let v = strength * means[[c, j]] + (1.0 - strength) * noise_scale * noise[[i, j]];
            // stored as f32 on disk; keep in-memory values identical
            x[[i, j]] = f64::from(v as f32);
        }
    }
    x
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Draws `k` distinct indices with probability proportional to `weights`,
/// never returning an index in `exclude`.
fn draw_without_replacement(rng: &mut Rng, weights: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut w = weights.to_vec();
    for &e in exclude {
        w[e] = 0.0;
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = w.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            pick = Some(i);
            if r < wi {
                break;
            }
            r -= wi;
        }
        let pick = pick.expect("enough items with positive weight");
        w[pick] = 0.0;
        out.push(pick);
    }
    out
}

/// Generates a dataset from `spec`. The returned dataset carries the
/// ground-truth stratum of every item and the deconfounded test pairs.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, rng::SYNTH);
    let (nu, ni, g) = (spec.num_users, spec.num_items, spec.num_confounders);

    let strata: Vec<usize> = (0..ni).map(|_| rng.random_range(0..g)).collect();
    let s = spec.confounder_strength;
    let visual = modality_features(&mut rng, &strata, g, spec.visual_dim, s, spec.noise_scale);
    let textual = modality_features(&mut rng, &strata, g, spec.textual_dim, s, spec.noise_scale);

    let r = spec.preference_dim;
    let protos = gaussian(&mut rng, spec.num_archetypes, r);
    let archetype: Vec<usize> = (0..nu).map(|_| rng.random_range(0..spec.num_archetypes)).collect();
    let user_noise = gaussian(&mut rng, nu, r);
    let item_taste = gaussian(&mut rng, ni, r);
    let stratum_affinity = gaussian(&mut rng, spec.num_archetypes, g);
    let exposure_logit: Vec<f64> = (0..ni)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            spec.popularity_skew * z
        })
        .collect();
    let exposure = softmax(&exposure_logit);

    let b = spec.exposure_bias_strength;
    let norm = (r as f64).sqrt();
    let mut edges = Vec::with_capacity(nu * spec.interactions_per_user);
    let mut deconfounded = Vec::with_capacity(nu * spec.deconfounded_per_user);
    for u in 0..nu {
        let a = archetype[u];
        let taste = &protos.row(a) + &(&user_noise.row(u) * 0.5);
        let logits: Vec<f64> = (0..ni)
            .map(|i| {
                taste.dot(&item_taste.row(i)) / norm
                    + spec.confounder_effect * stratum_affinity[[a, strata[i]]]
            })
            .collect();
        let pref = softmax(&logits);
        let observed: Vec<f64> = pref
            .iter()
            .zip(&exposure)
            .map(|(p, e)| (1.0 - b) * p + b * e)
            .collect();
        let items = draw_without_replacement(&mut rng, &observed, &[], spec.interactions_per_user);
        let held = draw_without_replacement(&mut rng, &pref, &items, spec.deconfounded_per_user);
        edges.extend(items.iter().map(|&i| (u, i)));
        deconfounded.extend(held.into_iter().map(|i| (u, i)));
    }

    let graph = InteractionGraph::new(nu, ni, edges)?;
    Ok(Dataset {
        name: "synthetic".into(),
        graph,
        visual: ModalityFeatures::new(Modality::Visual, visual)?,
        textual: ModalityFeatures::new(Modality::Textual, textual)?,
        user_ids: (0..nu).map(|u| format!("u{u}")).collect(),
        item_ids: (0..ni).map(|i| format!("i{i}")).collect(),
        deconfounded_test: Some(deconfounded),
        item_confounder: Some(strata),
    })
}
