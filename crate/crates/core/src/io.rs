//! On-disk formats: datasets, checkpoints, critics, calibration results,
//! CSV reports and run manifests.
//!
//! Arrays are flat little-endian files next to a JSON metadata document.
//! Every metadata document carries [`FORMAT_VERSION`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::CalibrationResult;
use crate::data::{Dataset, DatasetLabels, Standardization};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::labeling::Critic;
use crate::model::{PolicyDims, TrainConfig, TwoHeadPolicy};
use crate::schedule::{Schedule, ScheduleParams};

pub const FORMAT_VERSION: u32 = 1;

fn need(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingFile(path.to_path_buf()))
    }
}

fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    need(path)?;
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_f32(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_f64(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

fn read_exact_len(path: &Path, width: usize, expected: usize) -> Result<Vec<u8>> {
    need(path)?;
    let bytes = fs::read(path)?;
    if bytes.len() != expected * width {
        return Err(Error::LengthMismatch {
            file: file_name(path),
            expected,
            found: bytes.len() / width,
        });
    }
    Ok(bytes)
}

pub fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = read_exact_len(path, 4, expected)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
}

pub fn read_f64(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = read_exact_len(path, 8, expected)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect())
}

pub fn read_u8(path: &Path, expected: usize) -> Result<Vec<u8>> {
    read_exact_len(path, 1, expected)
}

fn check_version(found: u32) -> Result<()> {
    if found == FORMAT_VERSION {
        Ok(())
    } else {
        Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub rows: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub env: EnvSpec,
    pub seed: u64,
    pub stats: Option<Standardization>,
    pub labeled: bool,
    pub kappa: Option<f64>,
    pub p: Option<f64>,
    pub has_modes: bool,
}

/// Writes `meta.json` plus one array file per column into `dir`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let meta = DatasetMeta {
        version: FORMAT_VERSION,
        rows: ds.len(),
        state_dim: ds.state_dim,
        action_dim: ds.action_dim,
        env: ds.env.clone(),
        seed: ds.seed,
        stats: ds.stats.clone(),
        labeled: ds.labels.is_some(),
        kappa: ds.labels.as_ref().map(|l| l.kappa),
        p: ds.labels.as_ref().map(|l| l.p),
        has_modes: ds.modes.is_some(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    write_f32(&dir.join("states.f32"), &ds.states)?;
    write_f32(&dir.join("actions.f32"), &ds.actions)?;
    write_f32(&dir.join("rewards.f32"), &ds.rewards)?;
    write_f32(&dir.join("next_states.f32"), &ds.next_states)?;
    fs::write(dir.join("dones.u8"), &ds.dones)?;
    if let Some(m) = &ds.modes {
        fs::write(dir.join("modes.u8"), m)?;
    }
    if let Some(l) = &ds.labels {
        write_f32(&dir.join("advantages.f32"), &l.advantages)?;
        fs::write(dir.join("labels.u8"), &l.labels)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
    check_version(meta.version)?;
    let n = meta.rows;
    let labels = if meta.labeled {
        Some(DatasetLabels {
            advantages: read_f32(&dir.join("advantages.f32"), n)?,
            labels: read_u8(&dir.join("labels.u8"), n)?,
            kappa: meta.kappa.ok_or_else(|| Error::invalid("labeled dataset without kappa"))?,
            p: meta.p.ok_or_else(|| Error::invalid("labeled dataset without p"))?,
        })
    } else {
        None
    };
    let ds = Dataset {
        env: meta.env,
        seed: meta.seed,
        state_dim: meta.state_dim,
        action_dim: meta.action_dim,
        states: read_f32(&dir.join("states.f32"), n * meta.state_dim)?,
        actions: read_f32(&dir.join("actions.f32"), n * meta.action_dim)?,
        rewards: read_f32(&dir.join("rewards.f32"), n)?,
        next_states: read_f32(&dir.join("next_states.f32"), n * meta.state_dim)?,
        dones: read_u8(&dir.join("dones.u8"), n)?,
        modes: if meta.has_modes {
            Some(read_u8(&dir.join("modes.u8"), n)?)
        } else {
            None
        },
        stats: meta.stats,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub version: u32,
    pub dims: PolicyDims,
    /// Layer sizes of `(backbone, head)`; the head is stored twice.
    pub layers: Vec<Vec<usize>>,
    pub activation: String,
    pub schedule: ScheduleParams,
    pub param_count: usize,
    pub train_config_digest: Option<String>,
    pub content_hash: String,
}

fn digest_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(v)?)))
}

/// Writes `model.json` and `weights.f32`. The policy must be frozen so the
/// file is an exact image of the parameters.
pub fn save_policy(policy: &TwoHeadPolicy, schedule: &Schedule, train: Option<&TrainConfig>, dir: &Path) -> Result<ModelMeta> {
    if !policy.is_frozen() {
        return Err(Error::invalid("only frozen policies can be checkpointed"));
    }
    fs::create_dir_all(dir)?;
    let dims = policy.dims().clone();
    let mut backbone = vec![dims.state_dim + dims.action_dim + dims.time_embed];
    backbone.extend_from_slice(&dims.hidden);
    let head = vec![*dims.hidden.last().expect("hidden layers"), dims.action_dim];
    let meta = ModelMeta {
        version: FORMAT_VERSION,
        layers: vec![backbone, head],
        activation: "silu".into(),
        schedule: schedule.params(),
        param_count: policy.params().len(),
        train_config_digest: train.map(digest_json).transpose()?,
        content_hash: policy.content_hash(),
        dims,
    };
    let weights: Vec<f32> = policy.params().iter().map(|&p| p as f32).collect();
    write_f32(&dir.join("weights.f32"), &weights)?;
    write_json(&dir.join("model.json"), &meta)?;
    Ok(meta)
}

/// Loads a frozen policy and its schedule, verifying count and hash.
pub fn load_policy(dir: &Path) -> Result<(TwoHeadPolicy, Schedule, ModelMeta)> {
    let meta: ModelMeta = read_json(&dir.join("model.json"))?;
    check_version(meta.version)?;
    let implied = TwoHeadPolicy::param_count_for(&meta.dims);
    if implied != meta.param_count {
        return Err(Error::LengthMismatch {
            file: "model.json".into(),
            expected: implied,
            found: meta.param_count,
        });
    }
    let weights = read_f32(&dir.join("weights.f32"), implied)?;
    let policy = TwoHeadPolicy::from_params(meta.dims.clone(), weights.iter().map(|&w| w as f64).collect(), true)?;
    let computed = policy.content_hash();
    if computed != meta.content_hash {
        return Err(Error::HashMismatch {
            expected: meta.content_hash.clone(),
            computed,
        });
    }
    let schedule = Schedule::from_params(&meta.schedule)?;
    Ok((policy, schedule, meta))
}

#[derive(Serialize, Deserialize)]
struct CriticFile {
    version: u32,
    content_hash: String,
    critic: Critic,
}

pub fn save_critic(critic: &Critic, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_json(
        path,
        &CriticFile {
            version: FORMAT_VERSION,
            content_hash: critic.content_hash(),
            critic: critic.clone(),
        },
    )
}

pub fn load_critic(path: &Path) -> Result<Critic> {
    let f: CriticFile = read_json(path)?;
    check_version(f.version)?;
    let computed = f.critic.content_hash();
    if computed != f.content_hash {
        return Err(Error::HashMismatch {
            expected: f.content_hash,
            computed,
        });
    }
    Ok(f.critic)
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    version: u32,
    #[serde(flatten)]
    result: CalibrationResult,
    h0_llrs_file: String,
    h0_llrs_len: usize,
}

/// Writes `calibration.json` and the retained sample as `h0_llrs.f64`.
pub fn save_calibration(result: &CalibrationResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_f64(&dir.join("h0_llrs.f64"), &result.h0_llrs)?;
    write_json(
        &dir.join("calibration.json"),
        &CalibrationFile {
            version: FORMAT_VERSION,
            result: result.clone(),
            h0_llrs_file: "h0_llrs.f64".into(),
            h0_llrs_len: result.h0_llrs.len(),
        },
    )
}

pub fn load_calibration(dir: &Path) -> Result<CalibrationResult> {
    let f: CalibrationFile = read_json(&dir.join("calibration.json"))?;
    check_version(f.version)?;
    let mut result = f.result;
    result.h0_llrs = read_f64(&dir.join(&f.h0_llrs_file), f.h0_llrs_len)?;
    Ok(result)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    need(path)?;
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

/// Everything needed to re-run a command bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub fingerprints: BTreeMap<String, String>,
    pub parallel: bool,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            args: std::env::args().collect(),
            seed,
            config,
            inputs: BTreeMap::new(),
            fingerprints: BTreeMap::new(),
            parallel: cfg!(feature = "parallel"),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("manifest.json"), self)
    }
}
