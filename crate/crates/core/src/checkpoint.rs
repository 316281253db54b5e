//! Checkpoint directories: `meta.json` plus little-endian f32 tensor files.
//!
//! `created_at` in `meta.json` is the only wall-clock value written; every
//! other byte is a function of the config and seed.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Result, SaeError};
use crate::model::SaeParams;
use crate::optimizer::{AdamWConfig, AdamWState, Moments};
use crate::sparsifiers::AllocationPolicy;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const TENSORS_FILE: &str = "tensors.bin";
pub const OPTIM_FILE: &str = "optim.bin";
pub const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset within the tensor file.
    pub offset: u64,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub file: String,
    pub t: u64,
    pub config: AdamWConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub created_at: String,
    pub d_model: usize,
    pub features: usize,
    pub policy: AllocationPolicy,
    pub budgets_clamped_to_one: usize,
    pub steps_completed: usize,
    pub tensors_file: String,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimMeta>,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: SaeParams,
    pub optimizer: Option<AdamWState>,
}

/// Writes `bytes` to `path` through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| SaeError::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let io = |e| SaeError::io(&tmp, e);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| SaeError::io(path, e))
}

fn pack(blocks: &[(&str, Vec<usize>, &[f64])]) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (name, shape, data) in blocks {
        entries.push(TensorEntry {
            name: (*name).to_string(),
            shape: shape.clone(),
            offset: bytes.len() as u64,
            len: data.len(),
        });
        for &v in data.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    (bytes, entries)
}

fn unpack(bytes: &[u8], entry: &TensorEntry, path: &Path) -> Result<Vec<f64>> {
    let start = entry.offset as usize;
    let end = start + entry.len * 4;
    if entry.shape.iter().product::<usize>() != entry.len {
        return Err(SaeError::invalid(format!(
            "tensor {} shape/len disagree",
            entry.name
        )));
    }
    if end > bytes.len() {
        return Err(SaeError::Truncated {
            expected: end as u64,
            found: bytes.len() as u64,
        });
    }
    let out: Vec<f64> = bytes[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(SaeError::NonFinite {
            location: format!("{} in {}", entry.name, path.display()),
        });
    }
    Ok(out)
}

fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| SaeError::invalid(format!("checkpoint has no tensor '{name}'")))
}

pub struct SaveRequest<'a> {
    pub params: &'a SaeParams,
    pub policy: &'a AllocationPolicy,
    pub budgets_clamped_to_one: usize,
    pub steps_completed: usize,
    pub optimizer: Option<&'a AdamWState>,
    pub config: &'a RunConfig,
}

pub fn save_checkpoint(dir: &Path, req: &SaveRequest<'_>) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).map_err(|e| SaeError::io(dir, e))?;
    let p = req.params;
    let (f, n) = (p.features(), p.d_model());
    let slice = |a: &[f64]| a.to_vec();
    let blocks = [
        (
            "W_enc",
            vec![f, n],
            slice(p.w_enc.as_slice().expect("contiguous")),
        ),
        ("b_enc", vec![f], p.b_enc.to_vec()),
        (
            "W_dec",
            vec![f, n],
            slice(p.w_dec.as_slice().expect("contiguous")),
        ),
        ("b_pre", vec![n], p.b_pre.to_vec()),
    ];
    let refs: Vec<(&str, Vec<usize>, &[f64])> = blocks
        .iter()
        .map(|(a, s, d)| (*a, s.clone(), d.as_slice()))
        .collect();
    let (bytes, tensors) = pack(&refs);
    write_atomic(&dir.join(TENSORS_FILE), &bytes)?;

    let optimizer = match req.optimizer {
        Some(state) => {
            let shapes = [vec![f, n], vec![f], vec![f, n], vec![n]];
            let names = ["W_enc", "b_enc", "W_dec", "b_pre"];
            let mut flat: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
            for ((name, shape), mom) in names.iter().zip(&shapes).zip(state.blocks()) {
                flat.push((format!("{name}.m"), shape.clone(), &mom.m));
                flat.push((format!("{name}.v"), shape.clone(), &mom.v));
            }
            let refs: Vec<(&str, Vec<usize>, &[f64])> = flat
                .iter()
                .map(|(a, s, d)| (a.as_str(), s.clone(), *d))
                .collect();
            let (bytes, tensors) = pack(&refs);
            write_atomic(&dir.join(OPTIM_FILE), &bytes)?;
            Some(OptimMeta {
                file: OPTIM_FILE.into(),
                t: state.t,
                config: state.config.clone(),
                tensors,
            })
        }
        None => None,
    };

    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        d_model: n,
        features: f,
        policy: req.policy.clone(),
        budgets_clamped_to_one: req.budgets_clamped_to_one,
        steps_completed: req.steps_completed,
        tensors_file: TENSORS_FILE.into(),
        dtype: "f32-le".into(),
        tensors,
        optimizer,
        config: req.config.clone(),
    };
    write_atomic(
        &dir.join(META_FILE),
        serde_json::to_string_pretty(&meta)?.as_bytes(),
    )?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| SaeError::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(SaeError::VersionMismatch {
            found: meta.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let tpath = dir.join(&meta.tensors_file);
    let bytes = fs::read(&tpath).map_err(|e| SaeError::io(&tpath, e))?;
    let (f, n) = (meta.features, meta.d_model);
    let get = |name: &str| unpack(&bytes, find(&meta.tensors, name)?, &tpath);
    let shape_err = |e: ndarray::ShapeError| SaeError::invalid(format!("tensor shape: {e}"));
    let params = SaeParams::from_parts(
        Array2::from_shape_vec((f, n), get("W_enc")?).map_err(shape_err)?,
        Array1::from(get("b_enc")?),
        Array2::from_shape_vec((f, n), get("W_dec")?).map_err(shape_err)?,
        Array1::from(get("b_pre")?),
    )?;

    let optimizer = match &meta.optimizer {
        Some(om) => {
            let opath = dir.join(&om.file);
            let obytes = fs::read(&opath).map_err(|e| SaeError::io(&opath, e))?;
            let moments = |name: &str| -> Result<Moments> {
                Ok(Moments {
                    m: unpack(&obytes, find(&om.tensors, &format!("{name}.m"))?, &opath)?,
                    v: unpack(&obytes, find(&om.tensors, &format!("{name}.v"))?, &opath)?,
                })
            };
            Some(AdamWState {
                config: om.config.clone(),
                t: om.t,
                w_enc: moments("W_enc")?,
                b_enc: moments("b_enc")?,
                w_dec: moments("W_dec")?,
                b_pre: moments("b_pre")?,
            })
        }
        None => None,
    };
    Ok(Checkpoint {
        meta,
        params,
        optimizer,
    })
}
