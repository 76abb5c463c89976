//! Reconstruction metrics with confidence intervals, the power-split and
//! correlation estimators, parameter sweeps and timing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::channel::{ChannelRng, FadingCoeffs, LinkConfig};
use crate::checkpoint::{self, Checkpoint};
use crate::codec::{CodecConfig, Model};
use crate::config::{ExperimentConfig, LinkGrid, RUN_CONFIG};
use crate::data::Datasets;
use crate::error::{arg_err, config_err, Error, Result};
use crate::par::Execution;
use crate::protocols::{transmit, Conditions, Diagnostics, Mode, Protocol, ProtocolSpec};
use crate::signal::{psnr_per_image, ssim_per_image, ImageBatch, RelayNormStats};
use crate::training::train_experiment;

/// Mean and 95% normal-approximation half-width `1.96·s/√N`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR was clamped at the cap (exact reconstruction).
    pub capped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSummary {
    pub source_power: f64,
    pub relay_power: f64,
    pub gamma: Option<f64>,
    pub beta: Option<f64>,
    pub beta_magnitude: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: ProtocolSpec,
    pub link: LinkConfig,
    pub n: usize,
    pub psnr_mean: f64,
    pub psnr_ci95: f64,
    pub ssim_mean: f64,
    pub ssim_ci95: f64,
    pub records: Vec<ImageRecord>,
    pub diagnostics: Option<DiagnosticSummary>,
}

impl EvalReport {
    pub fn from_records(protocol: ProtocolSpec, link: LinkConfig, records: Vec<ImageRecord>) -> Self {
        let p: Vec<f64> = records.iter().map(|r| r.psnr).collect();
        let s: Vec<f64> = records.iter().map(|r| r.ssim).collect();
        let (psnr_mean, psnr_ci95) = mean_ci95(&p);
        let (ssim_mean, ssim_ci95) = mean_ci95(&s);
        Self { protocol, link, n: records.len(), psnr_mean, psnr_ci95, ssim_mean, ssim_ci95, records, diagnostics: None }
    }
}

/// Running energy sums behind γ̂ and β̂.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyTotals {
    pub x_s1: f64,
    pub x_s: f64,
    pub x_s2: f64,
    pub x_r: f64,
    /// `Σ x_r† x_s^(2)`.
    pub cross: Complex64,
    pub source_power: f64,
    pub relay_power: f64,
    pub images: usize,
}

fn energy(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// `x† y` for interleaved (re, im) rows.
fn inner(x: &Tensor, y: &Tensor) -> Result<Complex64> {
    if x.shape() != y.shape() {
        return arg_err(format!("signal shapes differ: {:?} vs {:?}", x.shape(), y.shape()));
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for (a, b) in x.data().chunks_exact(2).zip(y.data().chunks_exact(2)) {
        let (a, b) = (Complex64::new(a[0], a[1]), Complex64::new(b[0], b[1]));
        acc += a.conj() * b;
    }
    Ok(acc)
}

impl EnergyTotals {
    pub fn add(&mut self, d: &Diagnostics) -> Result<()> {
        let n = d.x_s.rows();
        self.x_s += energy(&d.x_s);
        if let Some(x1) = &d.x_s1 {
            self.x_s1 += energy(x1);
        }
        if let (Some(x2), Some(xr)) = (&d.x_s2, &d.x_r) {
            self.x_s2 += energy(x2);
            self.x_r += energy(xr);
            self.cross += inner(xr, x2)?;
        }
        self.source_power += d.source_power().iter().sum::<f64>();
        self.relay_power += d.relay_power().iter().sum::<f64>();
        self.images += n;
        Ok(())
    }

    pub fn gamma(&self) -> Result<f64> {
        if !(self.x_s > 0.0) {
            return Err(Error::Degenerate("source signal has zero energy".into()));
        }
        Ok(self.x_s1 / self.x_s)
    }

    pub fn beta(&self) -> Result<Complex64> {
        if !(self.x_s2 > 0.0 && self.x_r > 0.0) {
            return Err(Error::Degenerate("x_r or x_s^(2) has zero energy".into()));
        }
        Ok(self.cross / (self.x_s2 * self.x_r).sqrt())
    }
}

fn totals_of(diags: &[Diagnostics]) -> Result<EnergyTotals> {
    if diags.is_empty() {
        return arg_err("no diagnostics recorded");
    }
    let mut t = EnergyTotals::default();
    for d in diags {
        t.add(d)?;
    }
    Ok(t)
}

/// `γ̂ = E‖x_s^(1)‖² / E‖x_s‖²` over half-duplex diagnostics.
pub fn estimate_gamma(diags: &[Diagnostics]) -> Result<f64> {
    if diags.iter().any(|d| d.x_s1.is_none()) {
        return arg_err("γ needs half-duplex diagnostics with a recorded x_s^(1)");
    }
    totals_of(diags)?.gamma()
}

/// Complex normalized correlation between the relay signal and `x_s^(2)`.
pub fn estimate_beta_complex(diags: &[Diagnostics]) -> Result<Complex64> {
    if diags.iter().any(|d| d.x_s2.is_none() || d.x_r.is_none()) {
        return arg_err("β needs recorded x_r and x_s^(2)");
    }
    totals_of(diags)?.beta()
}

/// Real part of the normalized correlation; the magnitude is logged.
pub fn estimate_beta(diags: &[Diagnostics]) -> Result<f64> {
    let b = estimate_beta_complex(diags)?;
    log::debug!("beta = {:.6}{:+.6}i, |beta| = {:.6}", b.re, b.im, b.norm());
    Ok(b.re)
}

/// `γ̂` for a single pair of interleaved symbol matrices.
pub fn gamma_of(x_s1: &Tensor, x_s: &Tensor) -> Result<f64> {
    EnergyTotals { x_s1: energy(x_s1), x_s: energy(x_s), ..Default::default() }.gamma()
}

/// `β̂` for a single pair of interleaved symbol matrices.
pub fn beta_of(x_r: &Tensor, x_s2: &Tensor) -> Result<Complex64> {
    EnergyTotals { x_s2: energy(x_s2), x_r: energy(x_r), cross: inner(x_r, x_s2)?, ..Default::default() }.beta()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub seed: u64,
    pub exec: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 64, seed: 1, exec: Execution::default() }
    }
}

fn fading_for(n: usize, seed: u64) -> Vec<FadingCoeffs> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xfad1);
    (0..n).map(|_| FadingCoeffs::sample(&mut r)).collect()
}

/// Runs `protocol` over every image of `data` at `link` and scores the
/// reconstructions. Batch `i` uses channel seed `opts.seed + i`.
pub fn evaluate(
    model: &Model,
    protocol: &Protocol,
    stats: RelayNormStats,
    data: &ImageBatch,
    link: &LinkConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if data.n == 0 {
        return arg_err("evaluation set is empty");
    }
    let state = link.to_link()?;
    let bs = opts.batch_size.max(1);
    let mut records = Vec::with_capacity(data.n);
    let mut totals = EnergyTotals::default();
    let mut diag_ok = true;
    for (i, start) in (0..data.n).step_by(bs).enumerate() {
        let batch = data.range(start, (start + bs).min(data.n));
        let seed = opts.seed.wrapping_add(i as u64);
        let fading = link.fading.then(|| fading_for(batch.n, seed));
        let cond = Conditions { link: &state, fading: fading.as_deref() };
        let (recon, diag) = transmit(model, protocol, &batch, cond, stats, &mut ChannelRng::new(seed), opts.exec)?;
        let psnr = psnr_per_image(&batch, &recon)?;
        let ssim = ssim_per_image(&batch, &recon)?;
        for (j, (p, s)) in psnr.into_iter().zip(ssim).enumerate() {
            records.push(ImageRecord { index: start + j, psnr: p.value, ssim: s, capped: p.flagged });
        }
        diag_ok &= totals.add(&diag).is_ok();
    }
    let mut report = EvalReport::from_records(protocol.spec(), *link, records);
    if diag_ok {
        let hd = matches!(protocol.mode(), Mode::HdAf | Mode::HdPf | Mode::HdPfSystematic);
        let beta = if hd { totals.beta().ok() } else { None };
        report.diagnostics = Some(DiagnosticSummary {
            source_power: totals.source_power / totals.images as f64,
            relay_power: totals.relay_power / totals.images as f64,
            gamma: if hd { totals.gamma().ok() } else { None },
            beta: beta.map(|b| b.re),
            beta_magnitude: beta.map(|b| b.norm()),
        });
    }
    Ok(report)
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &ImageBatch, link: &LinkConfig, opts: &EvalOptions) -> Result<EvalReport> {
    let stats = relay_stats_for(ckpt, data, link, opts)?;
    evaluate(&ckpt.model, &ckpt.protocol, stats, data, link, opts)
}

const CALIBRATION_SEED: u64 = 0x00ca_11b8;

fn same_link(a: &LinkConfig, b: &LinkConfig) -> bool {
    let close = |x: f64, y: f64| (x - y).abs() < 1e-9;
    close(a.c_sr_db, b.c_sr_db)
        && close(a.c_rd_db, b.c_rd_db)
        && close(a.c_sd_db, b.c_sd_db)
        && close(a.p_s_db, b.p_s_db)
        && close(a.p_r_db, b.p_r_db)
        && a.fading == b.fading
}

/// Relay statistics for scoring at `link`.
///
/// The tracked statistics are kept at the link they were tracked at. Anywhere
/// else (and for link-adaptive runs) they are re-measured at `link` by
/// [`calibrate_relay_stats`] and frozen for the scored pass.
pub fn relay_stats_for(ckpt: &Checkpoint, data: &ImageBatch, link: &LinkConfig, opts: &EvalOptions) -> Result<RelayNormStats> {
    if !ckpt.protocol.uses_relay_stats() || ckpt.meta.trained_link.is_some_and(|t| same_link(&t, link)) {
        return Ok(ckpt.relay_stats);
    }
    calibrate_relay_stats(&ckpt.model, &ckpt.protocol, data, link, opts)
}

/// Pooled mean and standard deviation of the raw relay outputs over `data` at `link`.
pub fn calibrate_relay_stats(
    model: &Model,
    protocol: &Protocol,
    data: &ImageBatch,
    link: &LinkConfig,
    opts: &EvalOptions,
) -> Result<RelayNormStats> {
    if !protocol.uses_relay_stats() {
        return arg_err(format!("{} has no relay statistics", protocol.mode().name()));
    }
    if data.n == 0 {
        return arg_err("calibration set is empty");
    }
    let state = link.to_link()?;
    let bs = opts.batch_size.max(1);
    let (mut n, mut sum, mut sum_sq) = (0usize, 0.0, 0.0);
    for (i, start) in (0..data.n).step_by(bs).enumerate() {
        let batch = data.range(start, (start + bs).min(data.n));
        let seed = (opts.seed ^ CALIBRATION_SEED).wrapping_add(i as u64);
        let fading = link.fading.then(|| fading_for(batch.n, seed));
        let cond = Conditions { link: &state, fading: fading.as_deref() };
        let (_, diag) = transmit(model, protocol, &batch, cond, RelayNormStats::default(), &mut ChannelRng::new(seed), opts.exec)?;
        let raw = diag.relay_raw.ok_or_else(|| Error::Degenerate("relay produced no outputs".into()))?;
        n += raw.data().len();
        sum += raw.data().iter().sum::<f64>();
        sum_sq += raw.data().iter().map(|v| v * v).sum::<f64>();
    }
    let mu = sum / n as f64;
    let var = (sum_sq / n as f64 - mu * mu).max(0.0);
    RelayNormStats::new(mu, var.sqrt().max(crate::signal::SIGMA_FLOOR))
}

/// One report per grid point, in `c_sr`-major order.
pub fn evaluate_grid(ckpt: &Checkpoint, data: &ImageBatch, grid: &LinkGrid, opts: &EvalOptions) -> Result<Vec<EvalReport>> {
    grid.validate()?;
    grid.points().iter().map(|l| evaluate_checkpoint(ckpt, data, l, opts)).collect()
}

pub const REPORT_CSV_HEADER: &str =
    "protocol,c_sr_db,c_rd_db,c_sd_db,p_s_db,p_r_db,fading,n,psnr_mean,psnr_ci95,ssim_mean,ssim_ci95,gamma,beta";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn reports_csv(reports: &[EvalReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        let l = &r.link;
        let d = r.diagnostics;
        out.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.protocol.mode.name(),
            l.c_sr_db,
            l.c_rd_db,
            l.c_sd_db,
            l.p_s_db,
            l.p_r_db,
            l.fading,
            r.n,
            r.psnr_mean,
            r.psnr_ci95,
            r.ssim_mean,
            r.ssim_ci95,
            opt(d.and_then(|d| d.gamma)),
            opt(d.and_then(|d| d.beta)),
        ));
    }
    out
}

#[derive(Serialize)]
struct RecordLine<'a> {
    protocol: &'a str,
    c_sr_db: f64,
    c_rd_db: f64,
    p_s_db: f64,
    p_r_db: f64,
    #[serde(flatten)]
    record: &'a ImageRecord,
}

/// Per-image records as JSON lines.
pub fn records_jsonl(reports: &[EvalReport]) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        for rec in &r.records {
            let line = RecordLine {
                protocol: r.protocol.mode.name(),
                c_sr_db: r.link.c_sr_db,
                c_rd_db: r.link.c_rd_db,
                p_s_db: r.link.p_s_db,
                p_r_db: r.link.p_r_db,
                record: rec,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Trained checkpoints keyed by experiment hash.
#[derive(Debug, Clone)]
pub struct RunCache {
    pub root: PathBuf,
}

impl RunCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dir_for(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.root.join(cfg.hash())
    }

    /// Loads the checkpoint for `cfg`, training it first when absent.
    pub fn train_or_load(&self, cfg: &ExperimentConfig, data: &Datasets) -> Result<Checkpoint> {
        let dir = self.dir_for(cfg);
        if dir.join(checkpoint::MANIFEST).exists() {
            log::info!("reusing cached run {}", dir.display());
            return checkpoint::load(&dir);
        }
        fs::create_dir_all(&self.root)?;
        let tmp = self.root.join(format!(".partial-{}-{}", cfg.hash(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        train_experiment(cfg, data, Some(&tmp))?;
        fs::rename(&tmp, &dir)?;
        checkpoint::load(&dir)
    }
}

/// Trains (or loads) without touching the disk when `cache` is `None`.
pub fn obtain(cfg: &ExperimentConfig, data: &Datasets, cache: Option<&RunCache>) -> Result<Checkpoint> {
    match cache {
        Some(c) => c.train_or_load(cfg, data),
        None => {
            let (t, report) = train_experiment(cfg, data, None)?;
            let stats = t.relay_stats();
            let meta = checkpoint::TrainingMeta {
                epoch: report.best_epoch,
                steps: report.steps,
                best_val_loss: report.best_val_loss,
                seed: cfg.seed,
                note: String::new(),
                trained_link: t.trained_link(),
            };
            Ok(Checkpoint { model: t.model, protocol: t.protocol, relay_stats: stats, meta, optimizer: None })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub parameter: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Row with the highest mean PSNR (the earliest on ties).
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().fold(None, |b: Option<&SweepRow>, r| match b {
            Some(b) if b.report.psnr_mean >= r.report.psnr_mean => Some(b),
            _ => Some(r),
        })
    }

    pub fn argmax(&self) -> Option<f64> {
        self.best().map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{},psnr_mean,psnr_ci95,ssim_mean,ssim_ci95,gamma,beta\n", self.parameter);
        for r in &self.rows {
            let d = r.report.diagnostics;
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.value,
                r.report.psnr_mean,
                r.report.psnr_ci95,
                r.report.ssim_mean,
                r.report.ssim_ci95,
                opt(d.and_then(|d| d.gamma)),
                opt(d.and_then(|d| d.beta)),
            ));
        }
        out
    }
}

/// Trains one model per protocol variant of `base` and evaluates each on the
/// test set at the base link.
pub fn sweep(
    parameter: &str,
    base: &ExperimentConfig,
    data: &Datasets,
    variants: &[(f64, ProtocolSpec)],
    cache: Option<&RunCache>,
    opts: &EvalOptions,
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for (value, spec) in variants {
        let mut cfg = base.clone();
        cfg.protocol = *spec;
        cfg.validate()?;
        let ckpt = obtain(&cfg, data, cache)?;
        let report = evaluate_checkpoint(&ckpt, &data.test, &cfg.link, opts)?;
        log::info!("{parameter} = {value}: {:.3} ± {:.3} dB", report.psnr_mean, report.psnr_ci95);
        rows.push(SweepRow { value: *value, report });
    }
    Ok(SweepTable { parameter: parameter.to_string(), rows })
}

pub fn sweep_alpha(
    base: &ExperimentConfig,
    data: &Datasets,
    alphas: &[f64],
    cache: Option<&RunCache>,
    opts: &EvalOptions,
) -> Result<SweepTable> {
    let variants: Vec<(f64, ProtocolSpec)> = alphas.iter().map(|&a| (a, ProtocolSpec::hd(Mode::HdPf, a))).collect();
    sweep("alpha", base, data, &variants, cache, opts)
}

pub fn sweep_blocks(
    base: &ExperimentConfig,
    data: &Datasets,
    blocks: &[usize],
    cache: Option<&RunCache>,
    opts: &EvalOptions,
) -> Result<SweepTable> {
    let variants: Vec<(f64, ProtocolSpec)> = blocks.iter().map(|&b| (b as f64, ProtocolSpec::fd(Mode::FdPf, b, None))).collect();
    sweep("B", base, data, &variants, cache, opts)
}

pub fn sweep_memory(
    base: &ExperimentConfig,
    data: &Datasets,
    blocks: usize,
    memories: &[usize],
    cache: Option<&RunCache>,
    opts: &EvalOptions,
) -> Result<SweepTable> {
    let variants: Vec<(f64, ProtocolSpec)> =
        memories.iter().map(|&t| (t as f64, ProtocolSpec::fd(Mode::FdPf, blocks, Some(t)))).collect();
    sweep("t", base, data, &variants, cache, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    /// Mean wall-clock seconds per image; `None` when the stage has no network.
    pub seconds_per_image: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub protocol: ProtocolSpec,
    pub images: usize,
    pub rows: Vec<TimingRow>,
    pub complexity: String,
}

impl TimingReport {
    pub fn seconds(&self, stage: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.stage == stage).and_then(|r| r.seconds_per_image)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,seconds_per_image\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.stage, r.seconds_per_image.map_or(String::new(), |s| format!("{s:.6e}"))));
        }
        out
    }
}

fn side_var(g: &mut Graph, model: &Model, n: usize, link: &LinkConfig) -> Result<Option<crate::autodiff::Var>> {
    if !model.cfg.la_enabled {
        return Ok(None);
    }
    let s = link.to_link()?.side_info().u;
    Ok(Some(g.constant(Tensor::from_vec(n, 4, (0..n).flat_map(|_| s).collect()))))
}

fn time_stage<F>(reps: usize, mut f: F) -> Result<f64>
where
    F: FnMut() -> Result<()>,
{
    f()?;
    let t0 = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(t0.elapsed().as_secs_f64() / reps.max(1) as f64)
}

/// Per-image wall-clock time of the source encoder, one relay network call
/// and the destination decoder over `data`, averaged over `reps` passes.
pub fn timing_report(model: &Model, protocol: &Protocol, data: &ImageBatch, link: &LinkConfig, reps: usize) -> Result<TimingReport> {
    if data.n == 0 {
        return arg_err("timing needs at least one image");
    }
    let cfg = &model.cfg;
    let n = data.n;
    let rows = n * cfg.tokens();
    let per = |s: f64| s / n as f64;

    let encode = time_stage(reps, || {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let u = side_var(&mut g, model, n, link)?;
        model.source_encode(&mut g, &vars, data, u).map(|_| ())
    })?;
    let relay = match &model.relay {
        Some(r) => Some(time_stage(reps, || {
            let mut g = Graph::new();
            let vars = model.bind(&mut g, false);
            let u = side_var(&mut g, model, n, link)?;
            let x = g.constant(Tensor::from_vec(rows, r.in_width, vec![0.1; rows * r.in_width]));
            let skip = r.bypass.map(|b| g.constant(Tensor::from_vec(rows, b.width, vec![0.1; rows * b.width])));
            model.relay_process(&mut g, &vars, x, skip, u).map(|_| ())
        })?),
        None => None,
    };
    let decode = time_stage(reps, || {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let u = side_var(&mut g, model, n, link)?;
        let y = g.constant(Tensor::from_vec(rows, cfg.c_star, vec![0.1; rows * cfg.c_star]));
        model.destination_decode(&mut g, &vars, y, u).map(|_| ())
    })?;
    let complexity = format!(
        "O(N_e·c²·M²/N_t²) per encode: N_e = {}, c = {}, M = {}, N_t = {} (attention over {} tokens)",
        cfg.n_e,
        cfg.c,
        cfg.pixels(),
        cfg.token_len(),
        cfg.tokens()
    );
    Ok(TimingReport {
        protocol: protocol.spec(),
        images: n,
        rows: vec![
            TimingRow { stage: "encode".into(), seconds_per_image: Some(per(encode)) },
            TimingRow { stage: "relay".into(), seconds_per_image: relay.map(per) },
            TimingRow { stage: "decode".into(), seconds_per_image: Some(per(decode)) },
        ],
        complexity,
    })
}

/// Per-image encode time of a freshly initialized source encoder for `cfg`.
pub fn encode_seconds(cfg: &CodecConfig, images: usize, reps: usize) -> Result<f64> {
    let model = Model::new(cfg, Default::default(), 0)?;
    let data = crate::data::synthetic(images, cfg.image, 0);
    let link = LinkConfig { c_sr_db: 5.0, c_rd_db: 5.0, c_sd_db: 0.0, p_s_db: 3.0, p_r_db: 3.0, fading: false, seed: 0 };
    let r = timing_report(&model, &Protocol::Direct, &data, &link, reps)?;
    Ok(r.seconds("encode").expect("encode row is always present"))
}

/// Writes `reports` as `<stem>.csv`, per-image `<stem>.jsonl` and the full
/// reports as `<stem>.json` under `dir`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[EvalReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.csv")), reports_csv(reports))?;
    fs::write(dir.join(format!("{stem}.jsonl")), records_jsonl(reports)?)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

/// Rejects a checkpoint whose codec or protocol differs from `cfg`.
pub fn check_matches(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<()> {
    let c = &ckpt.model.cfg;
    if c.la_enabled != cfg.codec.la_enabled {
        return config_err(
            "codec.la_enabled",
            format!("config says {} but the checkpoint was trained with {}", cfg.codec.la_enabled, c.la_enabled),
        );
    }
    if *c != cfg.codec {
        return config_err("codec", "config does not match the checkpoint architecture");
    }
    if ckpt.protocol.spec() != cfg.protocol()?.spec() {
        return config_err(
            "protocol",
            format!("config describes {:?} but the checkpoint holds {:?}", cfg.protocol, ckpt.protocol.spec()),
        );
    }
    Ok(())
}

/// Loads a run directory: its checkpoint and, when present, its config.
pub fn load_run(dir: &Path) -> Result<(Checkpoint, Option<ExperimentConfig>)> {
    let ckpt = checkpoint::load(dir)?;
    let cfg_path = dir.join(RUN_CONFIG);
    let cfg = if cfg_path.exists() { Some(ExperimentConfig::load(&cfg_path)?) } else { None };
    Ok((ckpt, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_of_constant_and_known_values() {
        assert_eq!(mean_ci95(&[2.0; 5]), (2.0, 0.0));
        let (m, ci) = mean_ci95(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-12);
        let s = (5.0f64 / 3.0).sqrt();
        assert!((ci - 1.96 * s / 2.0).abs() < 1e-12);
    }

    #[test]
    fn best_row_prefers_earliest_tie() {
        let link = LinkConfig { c_sr_db: 0.0, c_rd_db: 0.0, c_sd_db: 0.0, p_s_db: 0.0, p_r_db: 0.0, fading: false, seed: 0 };
        let rec = |p: f64| EvalReport::from_records(ProtocolSpec::new(Mode::Direct), link, vec![ImageRecord { index: 0, psnr: p, ssim: 0.5, capped: false }]);
        let t = SweepTable {
            parameter: "alpha".into(),
            rows: vec![
                SweepRow { value: 0.25, report: rec(20.0) },
                SweepRow { value: 0.5, report: rec(21.0) },
                SweepRow { value: 0.75, report: rec(21.0) },
            ],
        };
        assert_eq!(t.argmax(), Some(0.5));
        assert!(t.to_csv().starts_with("alpha,psnr_mean"));
    }
}
