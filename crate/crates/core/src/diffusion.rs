//! Cross-modal conditional diffusion over item representations.
//!
//! One channel corrupts a modality's semantic representation with the
//! Gaussian forward kernel and learns to recover it conditioned on the
//! other modality's raw features. The recovered clean state is the
//! channel's estimate of the shared confounder; the two channels are
//! averaged into one confounder matrix.
//!
//! The denoiser predicts the clean state `ĥ₀` directly. The reverse mean is
//! still the noise-parameterized form `(h_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t`, with
//! `ε̂ = (h_t − √ᾱ_t·ĥ₀)/√(1−ᾱ_t)` recovered from the prediction.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::optim::{xavier_init, BoundParams, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// β, ᾱ and posterior variances for steps `1..=T` (stored at `t − 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step β values.
    pub fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidArgument(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut prod = 1.0;
        for b in &beta {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(NoiseSchedule {
            kind,
            beta,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn posterior_var_at(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {t} outside 0..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Monotone β from `beta_start` to `beta_end` over `steps` steps. The
/// cosine kind eases in and out along a half cosine between the endpoints.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let beta = (0..steps)
        .map(|i| {
            let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
            let w = match kind {
                ScheduleKind::Linear => frac,
                ScheduleKind::Cosine => (1.0 - (std::f64::consts::PI * frac).cos()) / 2.0,
            };
            beta_start + (beta_end - beta_start) * w
        })
        .collect();
    NoiseSchedule::from_betas(kind, beta)
}

/// `h_t = √ᾱ_t·h₀ + √(1−ᾱ_t)·noise`. Step 0 returns `h₀`.
pub fn forward_diffuse(h0: &Matrix, t: usize, noise: &Matrix, schedule: &NoiseSchedule) -> Result<Matrix> {
    schedule.check_step(t)?;
    if h0.dim() != noise.dim() {
        return Err(Error::Shape(format!("state {:?} vs noise {:?}", h0.dim(), noise.dim())));
    }
    let ab = schedule.alpha_bar_at(t);
    Ok(h0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
}

/// Sinusoidal embedding of integer steps, `[sin(t·f_k) | cos(t·f_k)]`.
pub fn time_embedding(steps: &[usize], dim: usize) -> Matrix {
    let half = dim / 2;
    let mut out = Array2::zeros((steps.len(), dim));
    for (r, &t) in steps.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[[r, k]] = a.sin();
            out[[r, half + k]] = a.cos();
        }
    }
    out
}

/// Anything that predicts the clean state from `(h_t, t, condition)`.
pub trait X0Predictor {
    fn predict_x0(&self, h_t: &Matrix, t: usize, cond: &Matrix) -> Matrix;
}

impl<F> X0Predictor for F
where
    F: Fn(&Matrix, usize, &Matrix) -> Matrix,
{
    fn predict_x0(&self, h_t: &Matrix, t: usize, cond: &Matrix) -> Matrix {
        self(h_t, t, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserShape {
    pub state_dim: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub hidden: usize,
}

/// Two-layer MLP over `[h_t ‖ time embedding ‖ condition·W_c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDenoiser {
    pub prefix: String,
    pub shape: DenoiserShape,
}

impl ConditionalDenoiser {
    pub fn new(prefix: impl Into<String>, shape: DenoiserShape) -> Self {
        ConditionalDenoiser {
            prefix: prefix.into(),
            shape,
        }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    pub fn init_params(&self, params: &mut ParamStore, rng: &mut Rng) {
        let s = self.shape;
        let input = 2 * s.state_dim + s.time_dim;
        params.insert(self.name("cond_w"), xavier_init(rng, s.cond_dim, s.state_dim));
        params.insert(self.name("w1"), xavier_init(rng, input, s.hidden));
        params.insert(self.name("b1"), Matrix::zeros((1, s.hidden)));
        params.insert(self.name("w2"), xavier_init(rng, s.hidden, s.state_dim));
        params.insert(self.name("b2"), Matrix::zeros((1, s.state_dim)));
    }

    pub fn param_names(&self) -> Vec<String> {
        ["cond_w", "w1", "b1", "w2", "b2"].iter().map(|p| self.name(p)).collect()
    }

    /// Predicted clean state, one row per input row; `steps[r]` is row r's
    /// diffusion step.
    pub fn forward<'t>(&self, p: &BoundParams<'t>, h_t: Var<'t>, steps: &[usize], cond: Var<'t>) -> Var<'t> {
        let tape = h_t.tape();
        let temb = tape.leaf(time_embedding(steps, self.shape.time_dim));
        let cond_p = cond.matmul(p.get(&self.name("cond_w")));
        let inp = Var::concat_cols(&[h_t, temb, cond_p]);
        let hid = inp
            .matmul(p.get(&self.name("w1")))
            .add_row(p.get(&self.name("b1")))
            .silu();
        hid.matmul(p.get(&self.name("w2")))
            .add_row(p.get(&self.name("b2")))
    }

    pub fn bind<'a>(&'a self, params: &'a ParamStore) -> BoundDenoiser<'a> {
        BoundDenoiser { net: self, params }
    }
}

/// A denoiser paired with concrete parameter values for inference.
pub struct BoundDenoiser<'a> {
    net: &'a ConditionalDenoiser,
    params: &'a ParamStore,
}

impl X0Predictor for BoundDenoiser<'_> {
    fn predict_x0(&self, h_t: &Matrix, t: usize, cond: &Matrix) -> Matrix {
        let tape = Tape::new();
        let mut store = ParamStore::new();
        for name in self.net.param_names() {
            store.insert(name.clone(), self.params.get(&name).clone());
        }
        let p = store.bind(&tape);
        let steps = vec![t; h_t.nrows()];
        let out = self
            .net
            .forward(&p, tape.leaf(h_t.clone()), &steps, tape.leaf(cond.clone()));
        out.value().as_ref().clone()
    }
}

/// Reverse-kernel mean for step `t` given a clean-state prediction.
pub fn mean_from_x0(h_t: &Matrix, x0_hat: &Matrix, t: usize, schedule: &NoiseSchedule) -> Matrix {
    let ab = schedule.alpha_bar_at(t);
    let beta = schedule.beta_at(t);
    let alpha = 1.0 - beta;
    let s = (1.0 - ab).sqrt();
    let eps_hat = (h_t - &(x0_hat * ab.sqrt())) / s;
    (h_t - &(eps_hat * (beta / s))) / alpha.sqrt()
}

/// `μ_θ(h_t, t, condition)`.
pub fn denoise_mean(
    h_t: &Matrix,
    t: usize,
    cond: &Matrix,
    denoiser: &dyn X0Predictor,
    schedule: &NoiseSchedule,
) -> Result<Matrix> {
    if t == 0 {
        return Err(Error::InvalidArgument("reverse step must be at least 1".into()));
    }
    schedule.check_step(t)?;
    let x0 = denoiser.predict_x0(h_t, t, cond);
    Ok(mean_from_x0(h_t, &x0, t, schedule))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseMode {
    Stochastic,
    Deterministic,
}

/// Runs the reverse chain from step `start` down to 1 and returns `ĥ₀`.
///
/// Deterministic mode follows the mean; stochastic mode adds
/// `σ_t·z` at each step and needs `rng`.
pub fn reverse_denoise(
    h_start: &Matrix,
    start: usize,
    cond: &Matrix,
    denoiser: &dyn X0Predictor,
    schedule: &NoiseSchedule,
    mode: ReverseMode,
    mut rng: Option<&mut Rng>,
) -> Result<Matrix> {
    schedule.check_step(start)?;
    if mode == ReverseMode::Stochastic && rng.is_none() {
        return Err(Error::InvalidArgument("stochastic reverse pass needs an rng".into()));
    }
    let mut h = h_start.clone();
    for t in (1..=start).rev() {
        let mut next = denoise_mean(&h, t, cond, denoiser, schedule)?;
        if mode == ReverseMode::Stochastic {
            let sigma = schedule.posterior_var_at(t).sqrt();
            if sigma > 0.0 {
                let r = rng.as_deref_mut().expect("checked above");
                next.mapv_inplace(|v| {
                    let z: f64 = StandardNormal.sample(r);
                    v + sigma * z
                });
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "reverse diffusion state".into(),
                step: t,
            });
        }
        h = next;
    }
    Ok(h)
}

/// Draws per-row steps uniform in `1..=T` and standard normal noise.
pub fn sample_steps_and_noise(rows: usize, dim: usize, schedule: &NoiseSchedule, rng: &mut Rng) -> (Vec<usize>, Matrix) {
    let steps = (0..rows)
        .map(|_| rng.random_range(1..=schedule.steps()))
        .collect();
    let noise = Array2::from_shape_simple_fn((rows, dim), || StandardNormal.sample(rng));
    (steps, noise)
}

/// Per-row forward diffusion with a different step per row.
pub fn diffuse_rows(h0: &Matrix, steps: &[usize], noise: &Matrix, schedule: &NoiseSchedule) -> Matrix {
    let mut out = h0.clone();
    for (r, &t) in steps.iter().enumerate() {
        let ab = schedule.alpha_bar_at(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut row = out.row_mut(r);
        row *= a;
        row.scaled_add(b, &noise.row(r));
    }
    out
}

/// `mean_i ‖h₀_i − f_θ(h_t_i, t_i, cond_i)‖²` on the tape.
pub fn diffusion_loss<'t>(
    h0: &Matrix,
    cond: Var<'t>,
    denoiser: &ConditionalDenoiser,
    params: &BoundParams<'t>,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Var<'t>> {
    let rows = h0.nrows();
    if rows == 0 {
        return Err(Error::InvalidArgument("diffusion loss needs a nonempty batch".into()));
    }
    let (steps, noise) = sample_steps_and_noise(rows, h0.ncols(), schedule, rng);
    let h_t = diffuse_rows(h0, &steps, &noise, schedule);
    let tape = cond.tape();
    let pred = denoiser.forward(params, tape.leaf(h_t), &steps, cond);
    let target = tape.leaf(h0.clone());
    Ok((target - pred).square().sum().scale(1.0 / rows as f64))
}

/// Per-channel recovered clean states and their elementwise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderRepr {
    /// Visual channel: visual state recovered under textual conditioning.
    pub visual: Matrix,
    /// Textual channel: textual state recovered under visual conditioning.
    pub textual: Matrix,
    pub fused: Matrix,
}

impl ConfounderRepr {
    pub fn from_channels(visual: Matrix, textual: Matrix) -> Result<Self> {
        if visual.dim() != textual.dim() {
            return Err(Error::Shape(format!(
                "channel outputs {:?} and {:?} differ",
                visual.dim(),
                textual.dim()
            )));
        }
        let fused = (&visual + &textual) * 0.5;
        Ok(ConfounderRepr {
            visual,
            textual,
            fused,
        })
    }
}

/// Diffuses each channel's state to step `T` along its noise-free mean
/// (`√ᾱ_T·h₀`), runs the deterministic reverse chain under the other
/// modality's condition, and averages the two recovered states.
pub fn extract_confounders(
    h_visual: &Matrix,
    h_textual: &Matrix,
    cond_for_visual: &Matrix,
    cond_for_textual: &Matrix,
    visual_denoiser: &dyn X0Predictor,
    textual_denoiser: &dyn X0Predictor,
    schedule: &NoiseSchedule,
) -> Result<ConfounderRepr> {
    let t = schedule.steps();
    let scale = schedule.alpha_bar_at(t).sqrt();
    let run = |h0: &Matrix, cond: &Matrix, den: &dyn X0Predictor| {
        reverse_denoise(&(h0 * scale), t, cond, den, schedule, ReverseMode::Deterministic, None)
    };
    let v = run(h_visual, cond_for_visual, visual_denoiser)?;
    let tx = run(h_textual, cond_for_textual, textual_denoiser)?;
    ConfounderRepr::from_channels(v, tx)
}
