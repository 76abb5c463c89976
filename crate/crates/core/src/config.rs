//! Experiment configuration: one TOML document describing a reproducible run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{LinkConfig, LinkState};
use crate::codec::{CodecConfig, Model};
use crate::data::DatasetSpec;
use crate::error::{config_err, Error, Result};
use crate::protocols::{Mode, Protocol, ProtocolSpec};
use crate::training::TrainConfig;

/// Name of the resolved config written into every run directory.
pub const RUN_CONFIG: &str = "config.toml";

/// Grid of link conditions for evaluation; every combination of `c_sr_db`
/// and `c_rd_db` is visited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkGrid {
    pub c_sr_db: Vec<f64>,
    pub c_rd_db: Vec<f64>,
    #[serde(default)]
    pub c_sd_db: f64,
    pub p_s_db: f64,
    pub p_r_db: f64,
    #[serde(default)]
    pub fading: bool,
}

impl LinkGrid {
    /// The `{0, 10/3, 20/3, 10}` dB grid at power `p_db`.
    pub fn standard(p_db: f64) -> Self {
        let pts = vec![0.0, 10.0 / 3.0, 20.0 / 3.0, 10.0];
        Self { c_sr_db: pts.clone(), c_rd_db: pts, c_sd_db: 0.0, p_s_db: p_db, p_r_db: p_db, fading: false }
    }

    pub fn single(link: LinkConfig) -> Self {
        Self {
            c_sr_db: vec![link.c_sr_db],
            c_rd_db: vec![link.c_rd_db],
            c_sd_db: link.c_sd_db,
            p_s_db: link.p_s_db,
            p_r_db: link.p_r_db,
            fading: link.fading,
        }
    }

    pub fn points(&self) -> Vec<LinkConfig> {
        let mut out = Vec::with_capacity(self.c_sr_db.len() * self.c_rd_db.len());
        for &c_sr_db in &self.c_sr_db {
            for &c_rd_db in &self.c_rd_db {
                out.push(LinkConfig {
                    c_sr_db,
                    c_rd_db,
                    c_sd_db: self.c_sd_db,
                    p_s_db: self.p_s_db,
                    p_r_db: self.p_r_db,
                    fading: self.fading,
                    seed: 0,
                });
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_sr_db.is_empty() || self.c_rd_db.is_empty() {
            return config_err("grid", "c_sr_db and c_rd_db need at least one value each");
        }
        for p in self.points() {
            p.to_link()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Seed of the evaluation channel noise.
    pub seed: u64,
    pub grid: Option<LinkGrid>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 64, seed: 1, grid: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Seeds model initialization and training; overrides `train.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub protocol: ProtocolSpec,
    pub link: LinkConfig,
    pub codec: CodecConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Desk-scale experiment for `protocol` on synthetic 8×8 images at
    /// `c_sr = c_rd = 10` dB, `c_sd = 0` dB and `P_s = P_r = 3` dB.
    pub fn toy(protocol: ProtocolSpec) -> Self {
        Self {
            name: String::new(),
            seed: 0,
            output_dir: PathBuf::from("runs"),
            protocol,
            link: LinkConfig { c_sr_db: 10.0, c_rd_db: 10.0, c_sd_db: 0.0, p_s_db: 3.0, p_r_db: 3.0, fading: false, seed: 0 },
            codec: CodecConfig::toy(),
            train: TrainConfig::toy(),
            dataset: DatasetSpec::toy(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(&self.resolved())?)
    }

    /// The config with derived fields filled in, as written to run directories.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = self.seed;
        c.train.fading |= c.link.fading;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.train.validate()?;
        self.link_state()?;
        self.protocol()?;
        let shape = self.dataset.image_shape();
        if shape != self.codec.image {
            return config_err("dataset", format!("image shape {:?} does not match codec.image {:?}", shape, self.codec.image));
        }
        if self.train.adaptive.is_some() && !self.codec.la_enabled {
            return config_err("train.adaptive", "adaptive training requires codec.la_enabled = true");
        }
        if self.train.fading && matches!(self.protocol.mode, Mode::HdAf | Mode::FdAf) {
            log::warn!("amplify-and-forward under fading scales the relay signal empirically");
        }
        if self.eval.batch_size == 0 {
            return config_err("eval.batch_size", "must be positive");
        }
        if let Some(g) = &self.eval.grid {
            g.validate()?;
        }
        Ok(())
    }

    pub fn link_state(&self) -> Result<LinkState> {
        self.link.to_link()
    }

    pub fn protocol(&self) -> Result<Protocol> {
        self.protocol.resolve(&self.codec)
    }

    pub fn train_config(&self) -> TrainConfig {
        self.resolved().train
    }

    pub fn build_model(&self) -> Result<Model> {
        let p = self.protocol()?;
        Model::new(&self.codec, p.model_shape(&self.codec), self.seed)
    }

    /// SHA-256 of the resolved config with `name`, `output_dir` and `eval` cleared, so
    /// runs that would train identically share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.name.clear();
        c.output_dir = PathBuf::new();
        c.eval = EvalConfig::default();
        let text = toml::to_string(&c).expect("experiment configs always serialize");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Label used for run directories.
    pub fn label(&self) -> String {
        let stem = if self.name.is_empty() { self.protocol.mode.name().to_string() } else { self.name.clone() };
        format!("{stem}-{}", &self.hash()[..12])
    }
}

/// Creates a fresh run directory under `root` named after `cfg`; an existing
/// directory is never reused, a numeric suffix is appended instead.
pub fn fresh_run_dir(root: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    fresh_dir(root, &cfg.label())
}

/// Creates `root/base`, or `root/base-N` for the first free `N`.
pub fn fresh_dir(root: &Path, base: &str) -> Result<PathBuf> {
    fs::create_dir_all(root)?;
    for i in 0.. {
        let name = if i == 0 { base.to_string() } else { format!("{base}-{i}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_hash() {
        let cfg = ExperimentConfig::toy(ProtocolSpec::fd(Mode::FdPf, 3, Some(1)));
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg.resolved());
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.output_dir = "elsewhere".into();
        other.name = "x".into();
        assert_eq!(other.hash(), cfg.hash());
        other.seed = 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn field_errors_name_the_field() {
        let mut cfg = ExperimentConfig::toy(ProtocolSpec::new(Mode::Direct));
        cfg.train.lr_decay = 1.5;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("lr_decay"), "{e}");
        let text = ExperimentConfig::toy(ProtocolSpec::new(Mode::Direct)).to_toml().unwrap().replace("seed = 0\n", "seed = 0\nbogus = 1\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn grid_points_and_fresh_dirs() {
        assert_eq!(LinkGrid::standard(3.0).points().len(), 16);
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::toy(ProtocolSpec::new(Mode::Direct));
        let a = fresh_run_dir(dir.path(), &cfg).unwrap();
        let b = fresh_run_dir(dir.path(), &cfg).unwrap();
        assert_ne!(a, b);
    }
}
