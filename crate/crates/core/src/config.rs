//! Run configuration: TOML with defaults for every field, dotted-key
//! overrides, and a stable content hash.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SyntheticSpec;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory in the standard dataset layout. When unset the synthetic
    /// spec is generated in memory.
    pub dir: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Propagation layers over the interaction graph.
    pub layers: usize,
    /// Codebook size `K`.
    pub codebook_size: usize,
    /// Shared confounder width `D`; 0 uses `dim`.
    pub confounder_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    /// Denoiser hidden width; 0 uses `4·D`.
    pub denoiser_hidden: usize,
    pub time_embedding_dim: usize,
    pub knn_k: usize,
    pub weight_v: f64,
    pub semantic_layers: usize,
    pub commitment_weight: f64,
    /// Softmax temperature of the inference-time soft assignment.
    pub soft_temperature: f64,
    pub tau_start: f64,
    pub tau_decay: f64,
    pub tau_min: f64,
    /// InfoNCE temperature.
    pub tau_contrast: f64,
    pub per_layer_scorers: bool,
    /// Starting edge logit; positive values start from mostly retained
    /// edges.
    pub mask_logit_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            layers: 2,
            codebook_size: 8,
            confounder_dim: 0,
            diffusion_steps: 20,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule: ScheduleKind::Linear,
            denoiser_hidden: 0,
            time_embedding_dim: 16,
            knn_k: 10,
            weight_v: 0.5,
            semantic_layers: 1,
            commitment_weight: 0.25,
            soft_temperature: 1.0,
            tau_start: 0.5,
            tau_decay: 0.98,
            tau_min: 0.1,
            tau_contrast: 0.2,
            per_layer_scorers: false,
            mask_logit_init: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn confounder_dim(&self) -> usize {
        if self.confounder_dim == 0 {
            self.dim
        } else {
            self.confounder_dim
        }
    }

    pub fn denoiser_hidden(&self) -> usize {
        if self.denoiser_hidden == 0 {
            4 * self.confounder_dim()
        } else {
            self.denoiser_hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub warmup_epochs: usize,
    pub lambda_dm: f64,
    pub lambda_vq: f64,
    pub lambda_nce: f64,
    pub lambda_reg: f64,
    /// Cap on the items per InfoNCE batch.
    pub nce_batch: usize,
    /// Items per diffusion-loss minibatch.
    pub diffusion_batch: usize,
    pub eval_ks: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-3,
            batch_size: 2048,
            patience: 20,
            warmup_epochs: 5,
            lambda_dm: 0.1,
            lambda_vq: 0.1,
            lambda_nce: 0.05,
            lambda_reg: 1e-4,
            nce_batch: 256,
            diffusion_batch: 256,
            eval_ks: vec![10, 20],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub disable_backdoor: bool,
    pub disable_frontdoor: bool,
    pub disable_dcd: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; relative paths resolve against the output root.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            output_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(value)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Deserializes `table` layered over the defaults, so partially
    /// specified sections (such as a single synthetic field) stay valid.
    fn from_table(table: toml::Table) -> Result<Self> {
        let mut base = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        merge(&mut base, table);
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults) and applies `key.path=value`
    /// overrides in order. Values parse as TOML, falling back to a bare
    /// string.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        Self::from_table(table)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.dim == 0 || m.codebook_size < 2 || m.diffusion_steps == 0 || m.semantic_layers == 0 {
            return bad("model.dim, model.diffusion_steps and model.semantic_layers must be positive and model.codebook_size at least 2".into());
        }
        if !(m.beta_start > 0.0 && m.beta_start <= m.beta_end && m.beta_end < 1.0) {
            return bad(format!("need 0 < beta_start <= beta_end < 1, got {}..{}", m.beta_start, m.beta_end));
        }
        if !(0.0..=1.0).contains(&m.weight_v) {
            return bad(format!("model.weight_v must lie in [0, 1], got {}", m.weight_v));
        }
        for (name, v) in [
            ("model.tau_start", m.tau_start),
            ("model.tau_min", m.tau_min),
            ("model.tau_contrast", m.tau_contrast),
            ("model.soft_temperature", m.soft_temperature),
            ("model.tau_decay", m.tau_decay),
            ("train.lr", t.lr),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if m.time_embedding_dim % 2 != 0 {
            return bad("model.time_embedding_dim must be even".into());
        }
        if t.batch_size == 0 || t.diffusion_batch == 0 || t.nce_batch < 2 || t.epochs == 0 {
            return bad("train.epochs, train.batch_size and train.diffusion_batch must be positive and train.nce_batch at least 2".into());
        }
        if t.eval_ks.is_empty() || t.eval_ks.contains(&0) {
            return bad(format!("train.eval_ks must be nonempty positive values, got {:?}", t.eval_ks));
        }
        if !t.eval_ks.contains(&20) {
            return bad("train.eval_ks must include 20 (model selection uses Recall@20)".into());
        }
        Ok(())
    }

    /// Hex sha256 of the canonical (key-sorted) JSON form, ignoring the
    /// output directory.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
