//! Checkpoint directories: a plain-text manifest, one parameter archive per
//! network, optional optimizer state and a CSV metrics log.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Component};
use crate::channel::LinkConfig;
use crate::codec::{CodecConfig, Model, ModelShape};
use crate::error::{Error, Result};
use crate::protocols::{Protocol, ProtocolSpec};
use crate::signal::RelayNormStats;
use crate::training::EpochRecord;

pub const MANIFEST: &str = "manifest.toml";
pub const OPTIMIZER: &str = "optimizer.json";
pub const METRICS: &str = "metrics.csv";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub steps: u64,
    pub best_val_loss: f64,
    pub seed: u64,
    #[serde(default)]
    pub note: String,
    /// The fixed link the relay statistics were tracked at; `None` for link-adaptive runs.
    #[serde(default)]
    pub trained_link: Option<LinkConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub protocol: ProtocolSpec,
    pub relay_stats: RelayNormStats,
    pub training: TrainingMeta,
    pub shape: ModelShape,
    pub codec: CodecConfig,
    pub components: Vec<Component>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub protocol: Protocol,
    pub relay_stats: RelayNormStats,
    pub meta: TrainingMeta,
    pub optimizer: Option<Adam>,
}

fn archive(dir: &Path, c: Component) -> PathBuf {
    dir.join(format!("{}.json", c.name()))
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

pub fn save(
    dir: &Path,
    model: &Model,
    protocol: &Protocol,
    stats: RelayNormStats,
    meta: &TrainingMeta,
    optimizer: Option<&Adam>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let components = model.params.components();
    let manifest = Manifest {
        version: FORMAT_VERSION,
        protocol: protocol.spec(),
        relay_stats: stats,
        training: meta.clone(),
        shape: crate::training::model_shape_of(model),
        codec: model.cfg.clone(),
        components: components.clone(),
    };
    for c in components {
        fs::write(archive(dir, c), serde_json::to_vec(&model.params.subset(c))?)?;
    }
    if let Some(opt) = optimizer {
        fs::write(dir.join(OPTIMIZER), serde_json::to_vec(opt)?)?;
    }
    fs::write(dir.join(MANIFEST), toml::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| ckpt_err(&path, format!("cannot read manifest: {e}")))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| ckpt_err(&path, e.to_string()))?;
    if m.version != FORMAT_VERSION {
        return Err(ckpt_err(&path, format!("unsupported checkpoint version {}", m.version)));
    }
    Ok(m)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let m = read_manifest(dir)?;
    let protocol = m.protocol.resolve(&m.codec)?;
    if protocol.model_shape(&m.codec) != m.shape {
        return Err(ckpt_err(dir, "manifest shape does not match its protocol"));
    }
    let mut model = Model::new(&m.codec, m.shape, m.training.seed)?;
    for &c in &m.components {
        let path = archive(dir, c);
        let bytes = fs::read(&path).map_err(|e| ckpt_err(&path, format!("missing archive: {e}")))?;
        let subset = serde_json::from_slice(&bytes).map_err(|e| ckpt_err(&path, e.to_string()))?;
        model.params.load_subset(&subset).map_err(|e| ckpt_err(&path, e))?;
    }
    let opt_path = dir.join(OPTIMIZER);
    let optimizer = if opt_path.exists() {
        Some(serde_json::from_slice(&fs::read(&opt_path)?).map_err(|e| ckpt_err(&opt_path, e.to_string()))?)
    } else {
        None
    };
    Ok(Checkpoint { model, protocol, relay_stats: m.relay_stats, meta: m.training, optimizer })
}

pub fn write_metrics(dir: &Path, history: &[EpochRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in history {
        out.push_str(&format!("{},{:.10e},{:.10e},{:.6e}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    fs::write(dir.join(METRICS), out)?;
    Ok(())
}
