use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, InteractionGraph, Modality, ModalityFeatures};
use crate::error::{Error, Result};

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const VISUAL_FILE: &str = "visual.f32";
pub const TEXTUAL_FILE: &str = "textual.f32";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const DECONFOUNDED_FILE: &str = "deconfounded_test.tsv";

/// JSON header stored next to a raw feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub num_items: usize,
    pub dim: usize,
    pub item_order: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroundTruth {
    item_confounder: Vec<usize>,
}

/// `visual.f32` → `visual.items.json`.
pub fn sidecar_path(feature_path: &Path) -> PathBuf {
    let stem = feature_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    feature_path.with_file_name(format!("{stem}.items.json"))
}

/// Reads `user<TAB>item[<TAB>timestamp]` rows. Blank lines are skipped.
pub fn read_interactions(path: &Path) -> Result<Vec<(String, String, Option<i64>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 {
            return Err(parse_err(format!(
                "expected 2 or 3 tab-separated columns, found {}",
                cols.len()
            )));
        }
        let (user, item) = (cols[0].trim(), cols[1].trim());
        if user.is_empty() || item.is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        let ts = match cols.get(2).map(|s| s.trim()) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<i64>()
                    .map_err(|_| parse_err(format!("timestamp `{s}` is not an integer")))?,
            ),
        };
        rows.push((user.to_string(), item.to_string(), ts));
    }
    Ok(rows)
}

/// Reads a little-endian `f32` row-major matrix and its sidecar.
pub fn read_features(path: &Path) -> Result<(FeatureSidecar, Array2<f64>)> {
    let side_path = sidecar_path(path);
    let side_text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let sidecar: FeatureSidecar =
        serde_json::from_str(&side_text).map_err(|e| Error::FeatureFormat {
            path: side_path.clone(),
            message: e.to_string(),
        })?;
    if sidecar.item_order.len() != sidecar.num_items {
        return Err(Error::FeatureFormat {
            path: side_path,
            message: format!(
                "num_items is {} but item_order lists {} ids",
                sidecar.num_items,
                sidecar.item_order.len()
            ),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = sidecar.num_items * sidecar.dim * 4;
    if bytes.len() != expected {
        return Err(Error::FeatureFormat {
            path: path.to_path_buf(),
            message: format!(
                "expected {expected} bytes for {}×{} f32, found {}",
                sidecar.num_items,
                sidecar.dim,
                bytes.len()
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let m = Array2::from_shape_vec((sidecar.num_items, sidecar.dim), values)
        .expect("length checked above");
    Ok((sidecar, m))
}

/// Loads an interaction log plus both feature matrices.
///
/// Item indices follow the row order of the visual sidecar; textual rows
/// are permuted to match. Users are numbered by first appearance. Repeated
/// `(user, item)` rows collapse to one edge carrying the latest timestamp.
pub fn load_dataset(interactions: &Path, visual: &Path, textual: &Path) -> Result<Dataset> {
    let (vside, vmat) = read_features(visual)?;
    let (tside, tmat) = read_features(textual)?;

    let mut item_index: HashMap<&str, usize> = HashMap::with_capacity(vside.num_items);
    for (i, id) in vside.item_order.iter().enumerate() {
        if item_index.insert(id.as_str(), i).is_some() {
            return Err(Error::FeatureFormat {
                path: sidecar_path(visual),
                message: format!("item `{id}` listed twice"),
            });
        }
    }
    let trows: HashMap<&str, usize> = tside
        .item_order
        .iter()
        .enumerate()
        .map(|(r, id)| (id.as_str(), r))
        .collect();
    let mut taligned = Array2::zeros((vside.num_items, tside.dim));
    for (i, id) in vside.item_order.iter().enumerate() {
        let r = *trows.get(id.as_str()).ok_or_else(|| Error::MissingFeatureRow {
            item: id.clone(),
            path: textual.to_path_buf(),
        })?;
        taligned.row_mut(i).assign(&tmat.row(r));
    }

    let rows = read_interactions(interactions)?;
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut edge_pos: HashMap<(usize, usize), usize> = HashMap::new();
    let mut edges = Vec::new();
    let mut stamps: Vec<Option<i64>> = Vec::new();
    for (user, item, ts) in rows {
        let i = *item_index
            .get(item.as_str())
            .ok_or_else(|| Error::MissingFeatureRow {
                item: item.clone(),
                path: visual.to_path_buf(),
            })?;
        let u = *user_index.entry(user.clone()).or_insert_with(|| {
            user_ids.push(user);
            user_ids.len() - 1
        });
        match edge_pos.get(&(u, i)) {
            Some(&k) => {
                stamps[k] = match (stamps[k], ts) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                }
            }
            None => {
                edge_pos.insert((u, i), edges.len());
                edges.push((u, i));
                stamps.push(ts);
            }
        }
    }

    let graph = InteractionGraph::with_timestamps(user_ids.len(), vside.num_items, edges, stamps)?;
    let name = interactions
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(Dataset {
        name,
        graph,
        visual: ModalityFeatures::new(Modality::Visual, vmat)?,
        textual: ModalityFeatures::new(Modality::Textual, taligned)?,
        user_ids,
        item_ids: vside.item_order,
        deconfounded_test: None,
        item_confounder: None,
    })
}

/// Loads a directory in the standard layout, including the optional
/// synthetic extras.
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let mut ds = load_dataset(
        &dir.join(INTERACTIONS_FILE),
        &dir.join(VISUAL_FILE),
        &dir.join(TEXTUAL_FILE),
    )?;
    let gt = dir.join(GROUND_TRUTH_FILE);
    if gt.exists() {
        let text = fs::read_to_string(&gt).map_err(|e| Error::io(&gt, e))?;
        let parsed: GroundTruth = serde_json::from_str(&text)?;
        if parsed.item_confounder.len() != ds.graph.num_items() {
            return Err(Error::Shape(format!(
                "{} lists {} items, dataset has {}",
                gt.display(),
                parsed.item_confounder.len(),
                ds.graph.num_items()
            )));
        }
        ds.item_confounder = Some(parsed.item_confounder);
    }
    let dt = dir.join(DECONFOUNDED_FILE);
    if dt.exists() {
        ds.deconfounded_test = Some(read_pairs(&dt, &ds.user_ids, &ds.item_ids)?);
    }
    Ok(ds)
}

pub fn write_interactions(path: &Path, ds: &Dataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let ts = ds.graph.timestamps();
    for (k, &(u, i)) in ds.graph.edges().iter().enumerate() {
        let stamp = ts[k].map(|t| t.to_string()).unwrap_or_default();
        writeln!(w, "{}\t{}\t{}", ds.user_ids[u], ds.item_ids[i], stamp)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `features` as `f32` little-endian plus its sidecar.
pub fn write_features(path: &Path, features: &ModalityFeatures, item_ids: &[String]) -> Result<()> {
    let mut bytes = Vec::with_capacity(features.matrix.len() * 4);
    for &v in features.matrix.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let side = FeatureSidecar {
        num_items: features.num_items(),
        dim: features.dim(),
        item_order: item_ids.to_vec(),
    };
    let side_path = sidecar_path(path);
    fs::write(&side_path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&side_path, e))
}

pub fn write_pairs(path: &Path, pairs: &[(usize, usize)], user_ids: &[String], item_ids: &[String]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &(u, i) in pairs {
        writeln!(w, "{}\t{}", user_ids[u], item_ids[i]).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `user<TAB>item` pairs against existing vocabularies.
pub fn read_pairs(path: &Path, user_ids: &[String], item_ids: &[String]) -> Result<Vec<(usize, usize)>> {
    let users: HashMap<&str, usize> = user_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let items: HashMap<&str, usize> = item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut out = Vec::new();
    for (n, (user, item, _)) in read_interactions(path)?.into_iter().enumerate() {
        let lookup = |map: &HashMap<&str, usize>, id: &str, kind: &str| {
            map.get(id).copied().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                message: format!("unknown {kind} `{id}`"),
            })
        };
        out.push((lookup(&users, &user, "user")?, lookup(&items, &item, "item")?));
    }
    Ok(out)
}

pub fn write_dataset_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_interactions(&dir.join(INTERACTIONS_FILE), ds)?;
    write_features(&dir.join(VISUAL_FILE), &ds.visual, &ds.item_ids)?;
    write_features(&dir.join(TEXTUAL_FILE), &ds.textual, &ds.item_ids)?;
    if let Some(labels) = &ds.item_confounder {
        let p = dir.join(GROUND_TRUTH_FILE);
        let gt = GroundTruth {
            item_confounder: labels.clone(),
        };
        fs::write(&p, serde_json::to_string(&gt)?).map_err(|e| Error::io(&p, e))?;
    }
    if let Some(pairs) = &ds.deconfounded_test {
        write_pairs(&dir.join(DECONFOUNDED_FILE), pairs, &ds.user_ids, &ds.item_ids)?;
    }
    Ok(())
}
