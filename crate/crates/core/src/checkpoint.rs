//! On-disk model snapshots: a JSON manifest plus one flat little-endian
//! `f64` tensor file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Matrix;
use crate::backbone::{Model, ModelInputs};
use crate::config::RunConfig;
use crate::diffusion::ScheduleKind;
use crate::error::{Error, Result};
use crate::optim::ParamStore;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const FORMAT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param.";
const CONFOUNDER_TENSOR: &str = "state.confounder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in `f64` elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserEntry {
    pub name: String,
    pub state_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub epoch: usize,
    pub validation_recall20: f64,
    pub tau: f64,
    pub num_users: usize,
    pub num_items: usize,
    pub denoisers: Vec<DenoiserEntry>,
    pub tensors: Vec<TensorEntry>,
    pub tensors_sha256: String,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &Model,
    inputs: &ModelInputs,
    epoch: usize,
    validation_recall20: f64,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut named: Vec<(String, &Matrix)> = model
        .params
        .iter()
        .map(|(k, v)| (format!("{PARAM_PREFIX}{k}"), v))
        .collect();
    if let Some(h) = &model.confounder {
        named.push((CONFOUNDER_TENSOR.to_string(), h));
    }
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, m) in named {
        tensors.push(TensorEntry {
            name,
            shape: [m.nrows(), m.ncols()],
            offset,
        });
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += m.len();
    }
    let denoisers = if model.uses_diffusion() {
        let m = &model.config.model;
        model
            .denoisers(inputs)
            .iter()
            .map(|d| DenoiserEntry {
                name: d.prefix.clone(),
                state_dim: d.shape.state_dim,
                cond_dim: d.shape.cond_dim,
                hidden: d.shape.hidden,
                time_dim: d.shape.time_dim,
                steps: m.diffusion_steps,
                schedule: m.schedule,
                beta_start: m.beta_start,
                beta_end: m.beta_end,
            })
            .collect()
    } else {
        Vec::new()
    };
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: model.config.hash(),
        config: model.config.clone(),
        epoch,
        validation_recall20,
        tau: model.tau,
        num_users: inputs.num_users(),
        num_items: inputs.num_items(),
        denoisers,
        tensors,
        tensors_sha256: hex::encode(Sha256::digest(&bytes)),
    };
    let tp = dir.join(TENSORS_FILE);
    fs::write(&tp, &bytes).map_err(|e| Error::io(&tp, e))?;
    let mp = dir.join(MANIFEST_FILE);
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

/// Reads and integrity-checks a checkpoint without building a model.
pub fn read_checkpoint(dir: &Path) -> Result<(Manifest, Vec<(String, Matrix)>)> {
    let mp = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: malformed manifest: {e}", mp.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint("config hash does not match the embedded config".into()));
    }
    let tp = dir.join(TENSORS_FILE);
    let bytes = fs::read(&tp).map_err(|e| Error::io(&tp, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.tensors_sha256 {
        return Err(Error::Checkpoint(format!("{} does not match its recorded sha256", tp.display())));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let len = t.shape[0] * t.shape[1];
        let (start, end) = (t.offset * 8, (t.offset + len) * 8);
        if end > bytes.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` runs past the end of {TENSORS_FILE}", t.name)));
        }
        let values: Vec<f64> = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let m = Matrix::from_shape_vec((t.shape[0], t.shape[1]), values).expect("length checked");
        tensors.push((t.name.clone(), m));
    }
    Ok((manifest, tensors))
}

/// Rebuilds the model for `inputs`, checking every tensor's name and shape
/// against a freshly configured model.
pub fn load_model(dir: &Path, inputs: &ModelInputs) -> Result<(Manifest, Model)> {
    let (manifest, tensors) = read_checkpoint(dir)?;
    if (manifest.num_users, manifest.num_items) != (inputs.num_users(), inputs.num_items()) {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained on {} users × {} items, dataset has {} users × {} items",
            manifest.num_users,
            manifest.num_items,
            inputs.num_users(),
            inputs.num_items()
        )));
    }
    let mut model = Model::new(&manifest.config, inputs)?;
    let mut params = ParamStore::new();
    let mut confounder = None;
    for (name, m) in tensors {
        if name == CONFOUNDER_TENSOR {
            confounder = Some(m);
            continue;
        }
        let pname = name
            .strip_prefix(PARAM_PREFIX)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        let expected = model
            .params
            .try_get(pname)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{pname}`")))?;
        if expected.dim() != m.dim() {
            return Err(Error::Checkpoint(format!(
                "parameter `{pname}` has shape {:?} in the checkpoint, model expects {:?}",
                m.dim(),
                expected.dim()
            )));
        }
        params.insert(pname, m);
    }
    if let Some(missing) = model.params.names().find(|n| !params.contains(n)) {
        return Err(Error::Checkpoint(format!("parameter `{missing}` missing")));
    }
    if model.uses_codebook() != confounder.is_some() {
        return Err(Error::Checkpoint("confounder state does not match the ablation flags".into()));
    }
    if let Some(h) = &confounder {
        let cd = manifest.config.model.confounder_dim();
        if h.dim() != (inputs.num_items(), cd) {
            return Err(Error::Checkpoint(format!(
                "confounder state has shape {:?}, expected {:?}",
                h.dim(),
                (inputs.num_items(), cd)
            )));
        }
    }
    model.params = params;
    model.confounder = confounder;
    model.tau = manifest.tau;
    Ok((manifest, model))
}
