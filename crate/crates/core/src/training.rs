//! End-to-end training of the source, relay and destination networks.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Component, Graph, Tensor, Unary};
use crate::channel::{FadingCoeffs, LinkConfig, LinkState};
use crate::checkpoint::{self, TrainingMeta};
use crate::codec::{image_to_sequence, Model};
use crate::config::{ExperimentConfig, RUN_CONFIG};
use crate::data::Datasets;
use crate::error::{config_err, Error, Result};
use crate::par::Execution;
use crate::protocols::{rollout, Conditions, Protocol, RelayNorm};
use crate::signal::{ImageBatch, NormStatsTracker, RelayNormStats};
use crate::channel::ChannelRng;

/// Uniform sampling ranges (dB) for link-adaptive training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveRanges {
    pub c_min_db: f64,
    pub c_max_db: f64,
    pub p_min_db: f64,
    pub p_max_db: f64,
}

impl AdaptiveRanges {
    fn validate(&self) -> Result<()> {
        if !(self.c_min_db <= self.c_max_db) || !(self.p_min_db <= self.p_max_db) {
            return config_err("adaptive", "range minimum exceeds maximum");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_decay: f64,
    /// Epochs without validation improvement before the learning rate decays.
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Per-batch link sampling; `None` trains at the fixed link.
    pub adaptive: Option<AdaptiveRanges>,
    /// Cap on optimizer steps per epoch (`None`: one pass over the data).
    pub steps_per_epoch: Option<usize>,
    /// Decay of the relay statistics moving average.
    pub stats_decay: f64,
    /// Train over block-fading channels.
    pub fading: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_decay: 0.9,
            lr_patience: 20,
            early_stop_patience: 60,
            max_epochs: 2000,
            batch_size: 64,
            seed: 0,
            adaptive: None,
            steps_per_epoch: None,
            stats_decay: 0.999,
            fading: false,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule used with [`crate::codec::CodecConfig::toy`].
    pub fn toy() -> Self {
        Self {
            lr_init: 2e-3,
            lr_patience: 4,
            early_stop_patience: 10,
            max_epochs: 30,
            batch_size: 32,
            steps_per_epoch: Some(40),
            stats_decay: 0.99,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0) {
            return config_err("lr_init", "learning rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return config_err("lr_decay", format!("must lie in (0, 1), got {}", self.lr_decay));
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return config_err("patience", "patience values must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return config_err("batch_size", "batch size and epoch count must be positive");
        }
        if !(self.stats_decay > 0.0 && self.stats_decay < 1.0) {
            return config_err("stats_decay", "must lie in (0, 1)");
        }
        if let Some(r) = &self.adaptive {
            r.validate()?;
        }
        Ok(())
    }
}

/// Scalar loss and gradients of a single batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub relay_stats: Option<RelayNormStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub link: LinkState,
    /// L2 norm of the gradient per network.
    pub grad_norms: Vec<(Component, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: u64,
}

/// Mean squared error between reconstructed and original pixel tokens.
fn mse(g: &mut Graph, recon: crate::autodiff::Var, target: Tensor) -> crate::autodiff::Var {
    let t = g.constant(target);
    let d = g.sub(recon, t);
    let sq = g.unary(d, Unary::Square);
    g.mean_all(sq)
}

pub struct Trainer {
    pub model: Model,
    pub protocol: Protocol,
    pub link: LinkState,
    pub cfg: TrainConfig,
    pub opt: Adam,
    pub tracker: NormStatsTracker,
    pub steps: u64,
    pub exec: Execution,
    /// Statistics pinned by [`fit`] or a checkpoint; cleared by the next step.
    pub pinned_stats: Option<RelayNormStats>,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, protocol: Protocol, link: LinkState, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        link.validate()?;
        if protocol.model_shape(&model.cfg) != model_shape_of(&model) {
            return config_err("protocol", format!("model networks do not match {}", protocol.mode().name()));
        }
        if cfg.adaptive.is_some() && !model.cfg.la_enabled {
            log::warn!("adaptive training without link adaptation: the networks never see the sampled link");
        }
        let opt = Adam::new(&model.params, cfg.lr_init);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_5eed);
        let tracker = NormStatsTracker::new(cfg.stats_decay);
        Ok(Self { model, protocol, link, cfg, opt, tracker, steps: 0, exec: Execution::default(), pinned_stats: None, rng })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    /// The fixed training link in dB, or `None` when links are sampled per batch.
    pub fn trained_link(&self) -> Option<LinkConfig> {
        use crate::channel::power_to_db;
        let l = &self.link;
        self.cfg.adaptive.is_none().then(|| LinkConfig {
            c_sr_db: power_to_db(l.c_sr * l.c_sr),
            c_rd_db: power_to_db(l.c_rd * l.c_rd),
            c_sd_db: power_to_db(l.c_sd * l.c_sd),
            p_s_db: power_to_db(l.p_s),
            p_r_db: power_to_db(l.p_r),
            fading: self.cfg.fading,
            seed: 0,
        })
    }

    /// Link for the next batch: the fixed link, or a uniform draw in dB.
    pub fn sample_link(&mut self) -> LinkState {
        let Some(r) = self.cfg.adaptive else {
            return self.link;
        };
        let mut draw = |lo: f64, hi: f64| if hi > lo { self.rng.random_range(lo..hi) } else { lo };
        let c_sr = draw(r.c_min_db, r.c_max_db);
        let c_rd = draw(r.c_min_db, r.c_max_db);
        let p_s = draw(r.p_min_db, r.p_max_db);
        let p_r = draw(r.p_min_db, r.p_max_db);
        let mut l = self.link;
        l.c_sr = crate::channel::db_to_gain(c_sr);
        l.c_rd = crate::channel::db_to_gain(c_rd);
        l.p_s = crate::channel::db_to_power(p_s);
        l.p_r = crate::channel::db_to_power(p_r);
        l
    }

    fn fading_draws(&self, n: usize, seed: u64) -> Option<Vec<FadingCoeffs>> {
        self.cfg.fading.then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xfad1);
            (0..n).map(|_| FadingCoeffs::sample(&mut r)).collect()
        })
    }

    /// Loss and parameter gradients with batch relay statistics.
    pub fn gradients(&self, batch: &ImageBatch, link: &LinkState, noise_seed: u64) -> Result<BatchGradients> {
        let mut g = Graph::with_execution(self.exec);
        let vars = self.model.bind(&mut g, true);
        let fading = self.fading_draws(batch.n, noise_seed);
        let cond = Conditions { link, fading: fading.as_deref() };
        let mut rng = ChannelRng::new(noise_seed);
        let out = rollout(&mut g, &vars, &self.model, &self.protocol, batch, cond, RelayNorm::Batch, &mut rng)?;
        let target = image_to_sequence(batch, self.model.cfg.p)?;
        let loss = mse(&mut g, out.recon, target);
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss);
        let grads = self.model.params.collect_grads(&vars, &mut grads);
        Ok(BatchGradients { loss: value, grads, relay_stats: out.diagnostics.relay_stats })
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &ImageBatch) -> Result<StepOutcome> {
        let link = self.sample_link();
        let noise_seed = self.rng.random();
        let bg = self.gradients(batch, &link, noise_seed)?;
        if !bg.loss.is_finite() || bg.grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { step: self.steps, loss: bg.loss });
        }
        if let Some(s) = bg.relay_stats {
            self.tracker.update(s);
            self.pinned_stats = None;
        }
        let mut norms: Vec<(Component, f64)> = Vec::new();
        for (id, gr) in self.model.params.ids().zip(&bg.grads) {
            let c = self.model.params.component(id);
            match norms.iter_mut().find(|(k, _)| *k == c) {
                Some((_, v)) => *v += gr.sum_sq(),
                None => norms.push((c, gr.sum_sq())),
            }
        }
        for (_, v) in &mut norms {
            *v = v.sqrt();
        }
        self.opt.step(&mut self.model.params, &bg.grads);
        self.steps += 1;
        Ok(StepOutcome { loss: bg.loss, link, grad_norms: norms })
    }

    /// Relay statistics used for inference.
    pub fn relay_stats(&self) -> RelayNormStats {
        if let Some(s) = self.pinned_stats {
            s
        } else if self.tracker.steps() == 0 {
            RelayNormStats::default()
        } else {
            self.tracker.current()
        }
    }

    /// Mean MSE over `data` with frozen relay statistics and noise seeded by `seed`.
    pub fn evaluate_loss(&self, data: &ImageBatch, link: &LinkState, seed: u64) -> Result<f64> {
        let stats = self.relay_stats();
        let bs = self.cfg.batch_size.max(1);
        let mut total = 0.0;
        for (i, start) in (0..data.n).step_by(bs).enumerate() {
            let batch = data.range(start, (start + bs).min(data.n));
            let mut g = Graph::with_execution(self.exec);
            let vars = self.model.bind(&mut g, false);
            let batch_seed = seed.wrapping_add(i as u64);
            let fading = self.fading_draws(batch.n, batch_seed);
            let cond = Conditions { link, fading: fading.as_deref() };
            let mut rng = ChannelRng::new(batch_seed);
            let out = rollout(&mut g, &vars, &self.model, &self.protocol, &batch, cond, RelayNorm::Frozen(stats), &mut rng)?;
            let target = image_to_sequence(&batch, self.model.cfg.p)?;
            let l = mse(&mut g, out.recon, target);
            total += g.value(l).data()[0] * batch.n as f64;
        }
        Ok(total / data.n as f64)
    }

    /// One epoch over shuffled mini-batches; returns the mean training loss.
    pub fn epoch(&mut self, train: &ImageBatch) -> Result<f64> {
        let mut idx: Vec<usize> = (0..train.n).collect();
        idx.shuffle(&mut self.rng);
        let bs = self.cfg.batch_size.min(train.n);
        let mut batches: Vec<&[usize]> = idx.chunks(bs).filter(|c| c.len() == bs).collect();
        if let Some(cap) = self.cfg.steps_per_epoch {
            batches.truncate(cap);
        }
        let mut sum = 0.0;
        for b in &batches {
            let out = self.step(&train.select(b))?;
            sum += out.loss;
        }
        Ok(sum / batches.len().max(1) as f64)
    }
}

pub(crate) fn model_shape_of(model: &Model) -> crate::codec::ModelShape {
    crate::codec::ModelShape {
        relay: model.relay.as_ref().map(|s| (s.in_width, s.out_width)),
        parity: model.parity.as_ref().map(|s| (s.in_width, s.out_width)),
        source_out: (model.source.out_width != model.cfg.c_star).then_some(model.source.out_width),
        relay_skip: model.relay.as_ref().and_then(|s| s.bypass.map(|b| b.width)),
    }
}

/// Builds the model an experiment describes and trains it with [`fit`],
/// writing the resolved config, checkpoint and metrics into `run_dir`.
pub fn train_experiment(cfg: &ExperimentConfig, data: &Datasets, run_dir: Option<&Path>) -> Result<(Trainer, TrainReport)> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg.build_model()?, cfg.protocol()?, cfg.link_state()?, cfg.train_config())?;
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RUN_CONFIG), cfg.to_toml()?)?;
    }
    let report = fit(&mut trainer, &data.train, &data.val, run_dir)?;
    Ok((trainer, report))
}

/// Seed of the fixed validation noise.
pub const VALIDATION_SEED: u64 = 0x0da7_a5e7;

/// Trains with plateau learning-rate decay and early stopping. On return the
/// trainer holds the best-validation parameters and relay statistics; when
/// `run_dir` is given the best checkpoint and a metrics log are written there.
pub fn fit(trainer: &mut Trainer, train: &ImageBatch, val: &ImageBatch, run_dir: Option<&Path>) -> Result<TrainReport> {
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, trainer.model.params.clone(), trainer.relay_stats());
    let mut since_best = 0;
    let mut since_decay = 0;
    let mut stopped_early = false;
    let val_link = trainer.link;
    for epoch in 1..=trainer.cfg.max_epochs {
        let t0 = Instant::now();
        let train_loss = match trainer.epoch(train) {
            Ok(l) => l,
            Err(e) => {
                if let (Error::Diverged { step, loss }, Some(dir)) = (&e, run_dir) {
                    let dump = serde_json::json!({
                        "step": step,
                        "loss": loss,
                        "epoch": epoch,
                        "lr": trainer.opt.lr,
                        "link": val_link,
                        "relay_stats": trainer.relay_stats(),
                    });
                    std::fs::create_dir_all(dir)?;
                    std::fs::write(dir.join("divergence.json"), serde_json::to_string_pretty(&dump)?)?;
                }
                log::error!("training aborted at epoch {epoch}: {e}");
                return Err(e);
            }
        };
        let val_loss = trainer.evaluate_loss(val, &val_link, VALIDATION_SEED)?;
        let rec = EpochRecord { epoch, train_loss, val_loss, lr: trainer.opt.lr, seconds: t0.elapsed().as_secs_f64() };
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {:.2e}", trainer.opt.lr);
        history.push(rec);
        if val_loss < best.0 {
            best = (val_loss, epoch, trainer.model.params.clone(), trainer.relay_stats());
            since_best = 0;
            since_decay = 0;
            if let Some(dir) = run_dir {
                let meta = TrainingMeta { epoch, steps: trainer.steps, best_val_loss: val_loss, seed: trainer.cfg.seed, note: String::new(), trained_link: trainer.trained_link() };
                checkpoint::save(dir, &trainer.model, &trainer.protocol, best.3, &meta, Some(&trainer.opt))?;
            }
        } else {
            since_best += 1;
            since_decay += 1;
            if since_decay >= trainer.cfg.lr_patience {
                trainer.opt.lr *= trainer.cfg.lr_decay;
                since_decay = 0;
            }
            if since_best >= trainer.cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
        if let Some(dir) = run_dir {
            checkpoint::write_metrics(dir, &history)?;
        }
    }
    trainer.model.params = best.2;
    if trainer.protocol.uses_relay_stats() {
        trainer.pinned_stats = Some(best.3);
    }
    Ok(TrainReport { history, best_epoch: best.1, best_val_loss: best.0, stopped_early, steps: trainer.steps })
}
