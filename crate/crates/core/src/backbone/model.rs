use ndarray::Axis;
use rand_distr::{Distribution, Normal};

use crate::autograd::{spmm, Matrix, Tape, Var};
use crate::codebook::{assign_hard, assign_soft, straight_through, SoftAssignment};
use crate::config::RunConfig;
use crate::dataset::{Dataset, InteractionGraph};
use crate::diffusion::{
    extract_confounders, make_schedule, ConditionalDenoiser, DenoiserShape, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::frontdoor::{draw_uniform_open, sample_mask, EdgeScorer};
use crate::optim::{normal_init, xavier_init, BoundParams, ParamStore};
use crate::rng::{self, Rng};
use crate::semantic_graph::{build_knn_graph, fuse_and_normalize, propagate_isg};

use super::{item_representation, modal_embedding, propagate_with};

pub const EMBEDDING: &str = "embedding";
pub const PROJ_VISUAL: &str = "proj_v";
pub const PROJ_TEXTUAL: &str = "proj_t";
pub const PROJ_CONFOUNDER: &str = "proj_c";
pub const CODEBOOK: &str = "codebook";
pub const DENOISER_VISUAL: &str = "dm_v";
pub const DENOISER_TEXTUAL: &str = "dm_t";

/// Fixed, parameter-free inputs derived from the dataset.
#[derive(Debug, Clone)]
pub struct ModelInputs {
    pub train_graph: InteractionGraph,
    /// Column-standardized semantic-graph outputs per modality.
    pub h_visual: Matrix,
    pub h_textual: Matrix,
    /// Diffusion states: the semantic outputs mapped into the shared
    /// confounder space.
    pub z_visual: Matrix,
    pub z_textual: Matrix,
    /// Conditions: the other modality's standardized raw features.
    pub cond_for_visual: Matrix,
    pub cond_for_textual: Matrix,
}

impl ModelInputs {
    pub fn num_users(&self) -> usize {
        self.train_graph.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.train_graph.num_items()
    }

    /// Mean of the two undiffused states, used when diffusion is ablated.
    pub fn semantic_confounder(&self) -> Matrix {
        (&self.z_visual + &self.z_textual) * 0.5
    }
}

fn standardize_columns(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let n = x.nrows() as f64;
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        col.mapv_inplace(|v| v - mean);
        let std = (col.dot(&col) / n).sqrt();
        if std > 0.0 {
            col.mapv_inplace(|v| v / std);
        }
    }
    out
}

/// Identity when `from == to`, otherwise a seeded Gaussian map scaled by
/// `1/√to`.
fn state_projection(from: usize, to: usize, rng: &mut Rng) -> Matrix {
    if from == to {
        return Matrix::eye(from);
    }
    let normal = Normal::new(0.0, 1.0 / (to as f64).sqrt()).expect("valid std");
    Matrix::from_shape_simple_fn((from, to), || normal.sample(rng))
}

pub fn prepare_inputs(ds: &Dataset, train_graph: InteractionGraph, cfg: &RunConfig) -> Result<ModelInputs> {
    ds.validate()?;
    let m = &cfg.model;
    let kv = build_knn_graph(&ds.visual, m.knn_k)?;
    let kt = build_knn_graph(&ds.textual, m.knn_k)?;
    let isg = fuse_and_normalize(kv, kt, m.weight_v)?;
    let h_visual = standardize_columns(&propagate_isg(&ds.visual.matrix, &isg.fused, m.semantic_layers)?);
    let h_textual = standardize_columns(&propagate_isg(&ds.textual.matrix, &isg.fused, m.semantic_layers)?);
    let d = m.confounder_dim();
    let mut prng = rng::stream(cfg.seed, rng::PROJECTION);
    let pv = state_projection(h_visual.ncols(), d, &mut prng);
    let pt = state_projection(h_textual.ncols(), d, &mut prng);
    Ok(ModelInputs {
        train_graph,
        z_visual: h_visual.dot(&pv),
        z_textual: h_textual.dot(&pt),
        h_visual,
        h_textual,
        cond_for_visual: standardize_columns(&ds.textual.matrix),
        cond_for_textual: standardize_columns(&ds.visual.matrix),
    })
}

/// How the edge masks of a forward pass are drawn.
pub enum MaskMode<'r> {
    Sample(&'r mut Rng),
    /// `ε = 0.5`, i.e. `ρ = σ(ω/τ)`.
    Deterministic,
}

/// Tape outputs of one forward pass.
pub struct Forward<'t> {
    pub embedding: Var<'t>,
    pub user_final: Var<'t>,
    pub item_final: Var<'t>,
    /// `proj_v(h_v) + proj_t(h_t)`.
    pub modal: Var<'t>,
    pub item_repr: Var<'t>,
    /// Per-layer edge retention, `E×1` each; empty without the front door.
    pub rho: Vec<Var<'t>>,
    /// Hard code per item when the codebook path is active in training.
    pub labels: Option<Vec<usize>>,
}

/// Parameters plus the frozen per-run state needed for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub params: ParamStore,
    /// Current confounder matrix `H_c`; `None` without the back door.
    pub confounder: Option<Matrix>,
    /// Current concrete temperature.
    pub tau: f64,
    pub schedule: Option<NoiseSchedule>,
}

impl Model {
    pub fn new(config: &RunConfig, inputs: &ModelInputs) -> Result<Self> {
        config.validate()?;
        let mut model = Model {
            config: config.clone(),
            params: ParamStore::new(),
            confounder: None,
            tau: config.model.tau_start,
            schedule: None,
        };
        let m = &config.model;
        let d = m.dim;
        let cd = m.confounder_dim();
        let init = |part: &str| rng::stream(config.seed, &format!("{}.{part}", rng::INIT));
        let mut r = init("embedding");
        model.params.insert(
            EMBEDDING,
            normal_init(&mut r, inputs.num_users() + inputs.num_items(), d, 0.1),
        );
        let mut r = init("modal");
        model
            .params
            .insert(PROJ_VISUAL, xavier_init(&mut r, inputs.h_visual.ncols(), d));
        model
            .params
            .insert(PROJ_TEXTUAL, xavier_init(&mut r, inputs.h_textual.ncols(), d));
        if model.uses_codebook() {
            let mut r = init("confounder");
            model.params.insert(PROJ_CONFOUNDER, xavier_init(&mut r, cd, d));
            // seeded from the first confounder pass during training
            model
                .params
                .insert(CODEBOOK, Matrix::zeros((m.codebook_size, cd)));
        }
        if model.uses_frontdoor() {
            let mut r = init("edge");
            for s in model.scorers() {
                s.init_params(&mut model.params, &mut r);
            }
        }
        if model.uses_diffusion() {
            model.schedule = Some(make_schedule(m.diffusion_steps, m.beta_start, m.beta_end, m.schedule)?);
            let mut r = init("denoiser");
            for net in model.denoisers(inputs) {
                net.init_params(&mut model.params, &mut r);
            }
        }
        Ok(model)
    }

    pub fn uses_codebook(&self) -> bool {
        !self.config.ablation.disable_backdoor
    }

    pub fn uses_frontdoor(&self) -> bool {
        !self.config.ablation.disable_frontdoor
    }

    pub fn uses_diffusion(&self) -> bool {
        self.uses_codebook() && !self.config.ablation.disable_dcd
    }

    /// Edge scorers, one shared or one per layer.
    pub fn scorers(&self) -> Vec<EdgeScorer> {
        let m = &self.config.model;
        if m.per_layer_scorers {
            (0..m.layers)
                .map(|l| EdgeScorer::new(format!("edge{l}"), m.dim, m.dim).with_bias_init(m.mask_logit_init))
                .collect()
        } else {
            vec![EdgeScorer::new("edge", m.dim, m.dim).with_bias_init(m.mask_logit_init)]
        }
    }

    fn scorer_for_layer(&self, scorers: &[EdgeScorer], l: usize) -> EdgeScorer {
        scorers[if scorers.len() == 1 { 0 } else { l }].clone()
    }

    /// Visual channel (conditioned on text), then textual channel.
    pub fn denoisers(&self, inputs: &ModelInputs) -> [ConditionalDenoiser; 2] {
        let m = &self.config.model;
        let shape = |cond_dim| DenoiserShape {
            state_dim: m.confounder_dim(),
            cond_dim,
            time_dim: m.time_embedding_dim,
            hidden: m.denoiser_hidden(),
        };
        [
            ConditionalDenoiser::new(DENOISER_VISUAL, shape(inputs.cond_for_visual.ncols())),
            ConditionalDenoiser::new(DENOISER_TEXTUAL, shape(inputs.cond_for_textual.ncols())),
        ]
    }

    /// Recomputes `H_c`: the diffusion estimate, or the undiffused semantic
    /// states when diffusion is ablated.
    pub fn compute_confounder(&self, inputs: &ModelInputs) -> Result<Option<Matrix>> {
        if !self.uses_codebook() {
            return Ok(None);
        }
        if !self.uses_diffusion() {
            return Ok(Some(inputs.semantic_confounder()));
        }
        let [dv, dt] = self.denoisers(inputs);
        let schedule = self.schedule.as_ref().expect("diffusion enabled");
        let repr = extract_confounders(
            &inputs.z_visual,
            &inputs.z_textual,
            &inputs.cond_for_visual,
            &inputs.cond_for_textual,
            &dv.bind(&self.params),
            &dt.bind(&self.params),
            schedule,
        )?;
        Ok(Some(repr.fused))
    }

    pub fn soft_assignment(&self) -> Result<SoftAssignment> {
        match (&self.confounder, self.params.try_get(CODEBOOK)) {
            (Some(h), Some(cb)) => assign_soft(h, cb, self.config.model.soft_temperature),
            _ => Err(Error::InvalidArgument("model has no environment codebook".into())),
        }
    }

    /// One forward pass over the whole graph. `training` selects hard codes
    /// (straight-through) over the soft blend.
    pub fn forward<'t>(
        &self,
        p: &BoundParams<'t>,
        inputs: &ModelInputs,
        masks: MaskMode<'_>,
        training: bool,
    ) -> Result<Forward<'t>> {
        let tape = p.get(EMBEDDING).tape();
        let nu = inputs.num_users();
        let ni = inputs.num_items();
        let user_idx: Vec<usize> = (0..nu).collect();
        let item_idx: Vec<usize> = (nu..nu + ni).collect();
        let e0 = p.get(EMBEDDING);
        let modal = modal_embedding(
            tape.leaf(inputs.h_visual.clone()),
            p.get(PROJ_VISUAL),
            tape.leaf(inputs.h_textual.clone()),
            p.get(PROJ_TEXTUAL),
        );
        let adj = inputs.train_graph.norm_adjacency();
        let edges = inputs.train_graph.edges();

        let mut rho = Vec::new();
        let final_emb = if self.uses_frontdoor() {
            let scorers = self.scorers();
            let mut masks = masks;
            propagate_with(e0, self.config.model.layers, |l, e| {
                let scorer = self.scorer_for_layer(&scorers, l);
                let items_l = e.rows(&item_idx) + modal;
                let users_l = e.rows(&user_idx);
                let omega = scorer.edge_logits(p, items_l, users_l, edges);
                let eps = match &mut masks {
                    MaskMode::Sample(r) => draw_uniform_open(edges.len(), r),
                    MaskMode::Deterministic => vec![0.5; edges.len()],
                };
                let r = sample_mask(omega, self.tau, &eps)?;
                rho.push(r);
                Ok(spmm(adj, Some(r), e))
            })?
        } else {
            propagate_with(e0, self.config.model.layers, |_, e| Ok(spmm(adj, None, e)))?
        };
        let user_final = final_emb.rows(&user_idx);
        let item_final = final_emb.rows(&item_idx);

        let mut labels = None;
        let confounder = match (&self.confounder, self.uses_codebook()) {
            (Some(h), true) => {
                let cb = p.get(CODEBOOK);
                let hc = if training {
                    let hard = assign_hard(h, &cb.value())?;
                    let q = straight_through(tape.leaf(h.clone()), cb.rows(&hard.labels));
                    labels = Some(hard.labels);
                    q
                } else {
                    let soft = assign_soft(h, &cb.value(), self.config.model.soft_temperature)?;
                    tape.leaf(soft.quantized)
                };
                Some((hc, p.get(PROJ_CONFOUNDER)))
            }
            _ => None,
        };
        let item_repr = item_representation(item_final, modal, confounder);
        Ok(Forward {
            embedding: e0,
            user_final,
            item_final,
            modal,
            item_repr,
            rho,
            labels,
        })
    }

    /// Deterministic inference: full score matrix and per-layer retention.
    pub fn infer(&self, inputs: &ModelInputs) -> Result<Inference> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let f = self.forward(&p, inputs, MaskMode::Deterministic, false)?;
        let scores = super::score_matrix(&f.user_final.value(), &f.item_repr.value());
        let rho = f
            .rho
            .iter()
            .map(|r| r.value().index_axis(Axis(1), 0).to_vec())
            .collect();
        Ok(Inference { scores, rho })
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub scores: Matrix,
    pub rho: Vec<Vec<f64>>,
}
