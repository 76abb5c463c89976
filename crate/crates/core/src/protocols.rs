//! Transmission protocols over the relay channel.
//!
//! Every protocol is expressed as a rollout on an autodiff [`Graph`], so the
//! same code path serves training (parameters bound as trainable leaves) and
//! inference (parameters bound as constants). Channel noise is drawn from a
//! [`ChannelRng`] with the same substreams and ordering as the value-level
//! functions in [`crate::channel`].

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::channel::{effective_sr, mmse_weight, ChannelRng, FadingCoeffs, LinkState};
use crate::codec::{CodecConfig, Model, ModelShape};
use crate::error::{arg_err, config_err, shape_err, Error, Result};
use crate::par::Execution;
use crate::signal::{self, ImageBatch, RelayNormStats};

const ALPHA_TOL: f64 = 1e-9;

/// Time split of a half-duplex frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfDuplexPlan {
    pub alpha: f64,
    pub k: usize,
    /// Column widths `(α·c*, (1−α)·c*)` of the code matrix.
    pub split: (usize, usize),
}

impl HalfDuplexPlan {
    pub fn new(alpha: f64, cfg: &CodecConfig) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return config_err("alpha", format!("alpha must lie in (0, 1), got {alpha}"));
        }
        let w1 = alpha * cfg.c_star as f64;
        if (w1 - w1.round()).abs() > ALPHA_TOL {
            return config_err("alpha", format!("alpha·c* = {w1} is not an integer (c* = {})", cfg.c_star));
        }
        let w1 = w1.round() as usize;
        if w1 == 0 || w1 == cfg.c_star {
            return config_err("alpha", "both periods need at least one column");
        }
        if (w1 * cfg.tokens()) % 2 != 0 || ((cfg.c_star - w1) * cfg.tokens()) % 2 != 0 {
            return config_err("alpha", "each period must hold a whole number of complex symbols");
        }
        Ok(Self { alpha, k: cfg.k(), split: (w1, cfg.c_star - w1) })
    }

    /// Complex symbols `(αk, (1−α)k)` in each period.
    pub fn symbols(&self, cfg: &CodecConfig) -> (usize, usize) {
        (self.split.0 * cfg.tokens() / 2, self.split.1 * cfg.tokens() / 2)
    }
}

/// Block schedule of a full-duplex frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullDuplexPlan {
    pub blocks: usize,
    pub memory: usize,
    pub k: usize,
}

impl FullDuplexPlan {
    /// `blocks = 1` is the degenerate direct schedule (the relay never transmits).
    pub fn new(blocks: usize, memory: usize, cfg: &CodecConfig) -> Result<Self> {
        if blocks == 0 {
            return config_err("B", "need at least one block");
        }
        if cfg.c_star % blocks != 0 {
            return config_err("B", format!("c* = {} columns cannot be split into {blocks} equal blocks", cfg.c_star));
        }
        if (cfg.c_star / blocks * cfg.tokens()) % 2 != 0 {
            return config_err("B", "each block must hold a whole number of complex symbols");
        }
        if blocks >= 2 && !(1..blocks).contains(&memory) {
            return config_err("t", format!("memory must lie in [1, {}], got {memory}", blocks - 1));
        }
        Ok(Self { blocks, memory: if blocks == 1 { 0 } else { memory }, k: cfg.k() })
    }

    /// Untruncated memory `t = B − 1`.
    pub fn full_memory(blocks: usize, cfg: &CodecConfig) -> Result<Self> {
        Self::new(blocks, blocks.saturating_sub(1).max(1), cfg)
    }

    /// Code-matrix columns per block, `c*/B`.
    pub fn width(&self, cfg: &CodecConfig) -> usize {
        cfg.c_star / self.blocks
    }

    pub fn block_symbols(&self) -> usize {
        self.k / self.blocks
    }

    /// Knowledge matrix width `2·c*·(B−1)/B`.
    pub fn knowledge_cols(&self, cfg: &CodecConfig) -> usize {
        2 * self.width(cfg) * (self.blocks - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    HdAf,
    HdPf,
    HdPfSystematic,
    FdAf,
    FdPf,
    Direct,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::HdAf => "hd_af",
            Mode::HdPf => "hd_pf",
            Mode::HdPfSystematic => "hd_pf_systematic",
            Mode::FdAf => "fd_af",
            Mode::FdPf => "fd_pf",
            Mode::Direct => "direct",
        }
    }
}

/// Serializable protocol choice (the `[protocol]` config section).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, rename = "B", alias = "b", skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
}

impl ProtocolSpec {
    pub fn new(mode: Mode) -> Self {
        Self { mode, alpha: None, blocks: None, t: None }
    }

    pub fn hd(mode: Mode, alpha: f64) -> Self {
        Self { mode, alpha: Some(alpha), blocks: None, t: None }
    }

    pub fn fd(mode: Mode, blocks: usize, t: Option<usize>) -> Self {
        Self { mode, alpha: None, blocks: Some(blocks), t }
    }

    pub fn resolve(&self, cfg: &CodecConfig) -> Result<Protocol> {
        let need_b = || self.blocks.ok_or_else(|| Error::Config { field: "B".into(), message: format!("{} needs B", self.mode.name()) });
        Ok(match self.mode {
            Mode::Direct => Protocol::Direct,
            Mode::HdAf => {
                if let Some(a) = self.alpha {
                    if (a - 0.5).abs() > ALPHA_TOL {
                        return config_err("alpha", "amplify-and-forward uses alpha = 1/2");
                    }
                }
                Protocol::HdAf(HalfDuplexPlan::new(0.5, cfg)?)
            }
            Mode::HdPf | Mode::HdPfSystematic => {
                let alpha = self.alpha.ok_or_else(|| Error::Config { field: "alpha".into(), message: "half-duplex PF needs alpha".into() })?;
                let plan = HalfDuplexPlan::new(alpha, cfg)?;
                if self.mode == Mode::HdPf {
                    Protocol::HdPf(plan)
                } else {
                    Protocol::HdPfSystematic(plan)
                }
            }
            Mode::FdAf => {
                let b = need_b()?;
                if b < 2 {
                    return config_err("B", "full-duplex AF needs B >= 2");
                }
                Protocol::FdAf(FullDuplexPlan::full_memory(b, cfg)?)
            }
            Mode::FdPf => {
                let b = need_b()?;
                let t = self.t.unwrap_or(b.saturating_sub(1).max(1));
                Protocol::FdPf(FullDuplexPlan::new(b, t, cfg)?)
            }
        })
    }
}

/// A resolved protocol with its schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Protocol {
    Direct,
    HdAf(HalfDuplexPlan),
    HdPf(HalfDuplexPlan),
    HdPfSystematic(HalfDuplexPlan),
    FdAf(FullDuplexPlan),
    FdPf(FullDuplexPlan),
}

impl Protocol {
    pub fn mode(&self) -> Mode {
        match self {
            Protocol::Direct => Mode::Direct,
            Protocol::HdAf(_) => Mode::HdAf,
            Protocol::HdPf(_) => Mode::HdPf,
            Protocol::HdPfSystematic(_) => Mode::HdPfSystematic,
            Protocol::FdAf(_) => Mode::FdAf,
            Protocol::FdPf(_) => Mode::FdPf,
        }
    }

    pub fn spec(&self) -> ProtocolSpec {
        match *self {
            Protocol::Direct => ProtocolSpec::new(Mode::Direct),
            Protocol::HdAf(p) | Protocol::HdPf(p) | Protocol::HdPfSystematic(p) => ProtocolSpec::hd(self.mode(), p.alpha),
            Protocol::FdAf(p) => ProtocolSpec::fd(Mode::FdAf, p.blocks, None),
            Protocol::FdPf(p) => ProtocolSpec::fd(Mode::FdPf, p.blocks, Some(p.memory)),
        }
    }

    /// Networks needed by this protocol.
    pub fn model_shape(&self, cfg: &CodecConfig) -> ModelShape {
        match *self {
            Protocol::Direct | Protocol::HdAf(_) | Protocol::FdAf(_) => ModelShape::default(),
            Protocol::HdPf(p) => {
                ModelShape { relay: Some((p.split.0, p.split.1)), relay_skip: Some(p.split.0), ..ModelShape::default() }
            }
            Protocol::HdPfSystematic(p) => ModelShape {
                relay: Some((p.split.0, p.split.1)),
                parity: Some((p.split.0, p.split.1)),
                source_out: Some(p.split.0),
                relay_skip: Some(p.split.0),
            },
            Protocol::FdPf(p) if p.blocks >= 2 => ModelShape {
                relay: Some((p.knowledge_cols(cfg), p.width(cfg))),
                relay_skip: Some(p.width(cfg)),
                ..ModelShape::default()
            },
            Protocol::FdPf(_) => ModelShape::default(),
        }
    }

    /// Whether the relay output is standardized with recorded statistics.
    pub fn uses_relay_stats(&self) -> bool {
        matches!(self, Protocol::FdPf(p) if p.blocks >= 2)
    }
}

/// Relay's accumulated block observations and transmissions.
///
/// Slot `j ∈ [1, B−1]` of the `Y` half sits at columns `(j−1)·w`, slot `j`
/// of the `X` half at `(B−1)·w + (j−1)·w`. Empty slots are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeMatrix<S> {
    blocks: usize,
    memory: usize,
    rows: usize,
    width: usize,
    y: Vec<Option<S>>,
    x: Vec<Option<S>>,
    filled: usize,
}

impl<S: Clone> KnowledgeMatrix<S> {
    pub fn new(blocks: usize, memory: usize, rows: usize, width: usize) -> Result<Self> {
        if blocks < 2 {
            return arg_err("knowledge matrix needs B >= 2");
        }
        if !(1..blocks).contains(&memory) {
            return arg_err(format!("memory must lie in [1, {}], got {memory}", blocks - 1));
        }
        Ok(Self { blocks, memory, rows, width, y: vec![None; blocks - 1], x: vec![None; blocks - 1], filled: 0 })
    }

    pub fn cols(&self) -> usize {
        2 * self.width * (self.blocks - 1)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Index `b` of the block this matrix will be used for (`T^(b)`).
    pub fn block(&self) -> usize {
        self.filled + 1
    }

    /// Stores block `b`'s observation and transmission, producing `T^(b+1)`.
    pub fn update(&mut self, b: usize, y_rb: S, x_rb: S) -> Result<()> {
        if b == 0 || b >= self.blocks {
            return arg_err(format!("knowledge update index b = {b} outside [1, {}]", self.blocks - 1));
        }
        self.y[b - 1] = Some(y_rb);
        self.x[b - 1] = Some(x_rb);
        self.filled = b;
        // T_t^(b+1) keeps slots j with j ≥ b + 1 − t.
        for j in 1..self.blocks {
            if j + self.memory < b + 1 {
                self.y[j - 1] = None;
                self.x[j - 1] = None;
            }
        }
        Ok(())
    }

    /// Non-empty `(Y, X)` slot indices (1-based).
    pub fn occupied(&self) -> Vec<usize> {
        (1..self.blocks).filter(|&j| self.y[j - 1].is_some()).collect()
    }
}

impl KnowledgeMatrix<Tensor> {
    pub fn values(&self) -> Tensor {
        let zero = Tensor::zeros(self.rows, self.width);
        let parts: Vec<&Tensor> =
            self.y.iter().chain(&self.x).map(|s| s.as_ref().unwrap_or(&zero)).collect();
        Tensor::concat_cols(&parts)
    }
}

impl KnowledgeMatrix<Var> {
    pub fn assemble(&self, g: &mut Graph) -> Var {
        let zero = g.zeros(self.rows, self.width);
        let parts: Vec<Var> = self.y.iter().chain(&self.x).map(|s| s.unwrap_or(zero)).collect();
        g.concat_cols(&parts)
    }
}

/// Value-level knowledge update: writes `Y_{r,b}`, `X_{r,b}` (each `p²×c*/B`)
/// into `T^(b)` and returns `T^(b+1)`.
pub fn update_knowledge(
    mut t: KnowledgeMatrix<Tensor>,
    y_rb: &Tensor,
    x_rb: &Tensor,
    b: usize,
) -> Result<KnowledgeMatrix<Tensor>> {
    for m in [y_rb, x_rb] {
        if m.shape() != (t.rows, t.width) {
            return shape_err(format!("knowledge slot must be {}×{}, got {:?}", t.rows, t.width, m.shape()));
        }
    }
    t.update(b, y_rb.clone(), x_rb.clone())?;
    Ok(t)
}

/// How the full-duplex PF relay output is standardized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RelayNorm {
    /// Differentiable statistics of the current batch (training).
    Batch,
    /// Recorded statistics (inference / validation).
    Frozen(RelayNormStats),
}

/// One step of the signal flow, recorded for structural comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    SourceEncode,
    ParityEncode,
    /// Source symbols observed by the relay in slot `b`.
    RelayReceive { slot: usize },
    /// Destination observation in slot `b`; `relay_active` if the relay transmitted.
    DestinationReceive { slot: usize, relay_active: bool },
    RelayNetwork { slot: usize },
    RelayAmplify { slot: usize },
    Decode,
}

/// Per-run signals kept for diagnostics. Each matrix has one row per image
/// holding interleaved `(re, im)` reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub protocol: Mode,
    pub k: usize,
    /// Transmitted source symbols before any fading precoder (`N×2k`).
    pub x_s: Tensor,
    pub x_s1: Option<Tensor>,
    pub x_s2: Option<Tensor>,
    /// Relay transmissions from active slots, concatenated (pre-precoder).
    pub x_r: Option<Tensor>,
    /// Raw relay network outputs before standardization (full-duplex PF).
    pub relay_raw: Option<Tensor>,
    /// Relay observations, concatenated over slots (after equalization under fading).
    pub y_r: Option<Tensor>,
    pub y_d: Tensor,
    /// Per-block signals (full-duplex): relay transmissions with the silent first block included.
    pub relay_blocks: Vec<Tensor>,
    pub relay_stats: Option<RelayNormStats>,
    pub trace: Vec<TraceEvent>,
}

impl Diagnostics {
    /// Per-image `(1/k)‖x_s‖²`.
    pub fn source_power(&self) -> Vec<f64> {
        row_powers(&self.x_s, self.k)
    }

    /// Per-image `(1/k)‖x_r‖²`, or zeros when the relay is silent.
    pub fn relay_power(&self) -> Vec<f64> {
        match &self.x_r {
            Some(x) => row_powers(x, self.k),
            None => vec![0.0; self.x_s.rows()],
        }
    }
}

fn row_powers(x: &Tensor, k: usize) -> Vec<f64> {
    (0..x.rows()).map(|r| x.row(r).iter().map(|v| v * v).sum::<f64>() / k as f64).collect()
}

/// Channel conditions for one rollout.
#[derive(Debug, Clone, Copy)]
pub struct Conditions<'a> {
    pub link: &'a LinkState,
    /// Per-image fading coefficients (block fading); `None` for the static channel.
    pub fading: Option<&'a [FadingCoeffs]>,
}

impl<'a> Conditions<'a> {
    pub fn fixed(link: &'a LinkState) -> Self {
        Self { link, fading: None }
    }
}

/// Graph nodes produced by a rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// `(N·p²)×N_t` reconstructed pixel tokens.
    pub recon: Var,
    /// Graph-side batch statistics of the relay output, when computed.
    pub batch_stats: Option<(Var, Var)>,
    pub diagnostics: Diagnostics,
}

struct Ctx<'a> {
    model: &'a Model,
    vars: &'a [Var],
    link: &'a LinkState,
    fading: Option<&'a [FadingCoeffs]>,
    u: Option<Var>,
    n: usize,
    trace: Vec<TraceEvent>,
}

impl Ctx<'_> {
    fn tokens(&self) -> usize {
        self.model.cfg.tokens()
    }

    /// `(N·p²)×w` tokens to `N×(p²·w)` symbol rows.
    fn to_rows(&self, g: &mut Graph, x: Var) -> Var {
        let (r, c) = g.shape(x);
        g.reshape(x, self.n, r * c / self.n)
    }

    fn to_tokens(&self, g: &mut Graph, x: Var) -> Var {
        let (_, c) = g.shape(x);
        let t = self.tokens();
        g.reshape(x, self.n * t, c / t)
    }

    fn coeffs(&self, f: impl Fn(&FadingCoeffs) -> Complex64) -> Option<Vec<(f64, f64)>> {
        self.fading.map(|h| h.iter().map(|c| f(c)).map(|z| (z.re, z.im)).collect())
    }

    fn noise(&self, g: &mut Graph, cols: usize, relay: bool, rng: &mut ChannelRng) -> Var {
        let complex = self.n * cols / 2;
        let data = if relay {
            rng.relay_noise(complex, self.link.noise_var_r)
        } else {
            rng.dest_noise(complex, self.link.noise_var_d)
        };
        g.constant(Tensor::from_vec(self.n, cols, data))
    }

    /// Source precoding `h_sd*/|h_sd|` (identity on the static channel).
    fn precode_source(&self, g: &mut Graph, x: Var) -> Var {
        match self.coeffs(|h| h.h_sd.conj() / h.h_sd.norm()) {
            Some(c) => g.complex_scale_rows(x, c),
            None => x,
        }
    }

    fn precode_relay(&self, g: &mut Graph, x: Var) -> Var {
        match self.coeffs(|h| h.h_rd.conj() / h.h_rd.norm()) {
            Some(c) => g.complex_scale_rows(x, c),
            None => x,
        }
    }

    fn gain(&self, g: &mut Graph, x: Var, c: f64, h: impl Fn(&FadingCoeffs) -> Complex64) -> Var {
        match self.coeffs(|f| h(f) * c) {
            Some(coeffs) => g.complex_scale_rows(x, coeffs),
            None => g.scale(x, c),
        }
    }

    /// Relay observation of precoded source rows; equalized under fading.
    fn relay_receive(&mut self, g: &mut Graph, x: Var, slot: usize, rng: &mut ChannelRng) -> Result<Var> {
        self.trace.push(TraceEvent::RelayReceive { slot });
        let cols = g.shape(x).1;
        let s = self.gain(g, x, self.link.c_sr, |h| h.h_sr);
        let nz = self.noise(g, cols, true, rng);
        let y = g.add(s, nz);
        match self.fading {
            None => Ok(y),
            Some(h) => {
                let w = h
                    .iter()
                    .map(|c| mmse_weight(effective_sr(self.link, c), self.link.noise_var_r, self.link.p_s).map(|z| (z.re, z.im)))
                    .collect::<Result<Vec<_>>>()?;
                Ok(g.complex_scale_rows(y, w))
            }
        }
    }

    /// Destination observation of precoded source rows and optional relay rows.
    fn dest_receive(&mut self, g: &mut Graph, xs: Var, xr: Option<Var>, slot: usize, rng: &mut ChannelRng) -> Var {
        self.trace.push(TraceEvent::DestinationReceive { slot, relay_active: xr.is_some() });
        let cols = g.shape(xs).1;
        let mut s = self.gain(g, xs, self.link.c_sd, |h| h.h_sd);
        if let Some(xr) = xr {
            let r = self.gain(g, xr, self.link.c_rd, |h| h.h_rd);
            s = g.add(s, r);
        }
        let nz = self.noise(g, cols, false, rng);
        g.add(s, nz)
    }

    fn encode(&mut self, g: &mut Graph, images: &ImageBatch) -> Result<Var> {
        self.trace.push(TraceEvent::SourceEncode);
        self.model.source_encode(g, self.vars, images, self.u)
    }

    fn decode(&mut self, g: &mut Graph, y_tokens: Var) -> Result<Var> {
        self.trace.push(TraceEvent::Decode);
        self.model.destination_decode(g, self.vars, y_tokens, self.u)
    }
}

/// Runs `protocol` on `images` and returns the graph nodes plus diagnostics.
///
/// `norm` is only consulted by full-duplex PF with `B ≥ 2`.
pub fn rollout(
    g: &mut Graph,
    vars: &[Var],
    model: &Model,
    protocol: &Protocol,
    images: &ImageBatch,
    cond: Conditions<'_>,
    norm: RelayNorm,
    rng: &mut ChannelRng,
) -> Result<Rollout> {
    cond.link.validate()?;
    if let Some(h) = cond.fading {
        if h.len() != images.n {
            return shape_err(format!("{} fading draws for {} images", h.len(), images.n));
        }
        if h.iter().any(|c| c.h_sd.norm() == 0.0 || c.h_rd.norm() == 0.0) {
            return Err(Error::Degenerate("zero fading coefficient".into()));
        }
    }
    let expected = protocol.model_shape(&model.cfg);
    let actual = ModelShape {
        relay: model.relay.as_ref().map(|s| (s.in_width, s.out_width)),
        parity: model.parity.as_ref().map(|s| (s.in_width, s.out_width)),
        source_out: (model.source.out_width != model.cfg.c_star).then_some(model.source.out_width),
        relay_skip: model.relay.as_ref().and_then(|s| s.bypass.map(|b| b.width)),
    };
    if expected != actual {
        return config_err("protocol", format!("model was built for {actual:?} but {} needs {expected:?}", protocol.mode().name()));
    }
    let u = model.cfg.la_enabled.then(|| {
        let side = cond.link.side_info().u;
        let data: Vec<f64> = (0..images.n).flat_map(|_| side).collect();
        g.constant(Tensor::from_vec(images.n, 4, data))
    });
    let mut ctx = Ctx { model, vars, link: cond.link, fading: cond.fading, u, n: images.n, trace: Vec::new() };
    match *protocol {
        Protocol::Direct => run_direct(g, &mut ctx, images, rng),
        Protocol::HdAf(plan) => run_hd(g, &mut ctx, images, plan, HdRelay::Amplify, rng),
        Protocol::HdPf(plan) => run_hd(g, &mut ctx, images, plan, HdRelay::Network, rng),
        Protocol::HdPfSystematic(plan) => run_hd(g, &mut ctx, images, plan, HdRelay::Systematic, rng),
        Protocol::FdAf(plan) => run_fd(g, &mut ctx, images, plan, FdRelay::Amplify, norm, rng),
        Protocol::FdPf(plan) => run_fd(g, &mut ctx, images, plan, FdRelay::Network, norm, rng),
    }
}

fn run_direct(g: &mut Graph, ctx: &mut Ctx<'_>, images: &ImageBatch, rng: &mut ChannelRng) -> Result<Rollout> {
    let k = ctx.model.cfg.k();
    let x = ctx.encode(g, images)?;
    let rows = ctx.to_rows(g, x);
    let xs = signal::power_normalize_rows(g, rows, ctx.link.p_s, k);
    let xp = ctx.precode_source(g, xs);
    let yd = ctx.dest_receive(g, xp, None, 1, rng);
    let yt = ctx.to_tokens(g, yd);
    let recon = ctx.decode(g, yt)?;
    let trace = std::mem::take(&mut ctx.trace);
    let d = Diagnostics {
        protocol: Mode::Direct,
        k,
        x_s: g.value(xs).clone(),
        x_s1: None,
        x_s2: None,
        x_r: None,
        relay_raw: None,
        y_r: None,
        y_d: g.value(yd).clone(),
        relay_blocks: Vec::new(),
        relay_stats: None,
        trace,
    };
    Ok(Rollout { recon, batch_stats: None, diagnostics: d })
}

#[derive(Clone, Copy, PartialEq)]
enum HdRelay {
    Amplify,
    Network,
    Systematic,
}

#[derive(Clone, Copy, PartialEq)]
enum FdRelay {
    Amplify,
    Network,
}

fn run_hd(
    g: &mut Graph,
    ctx: &mut Ctx<'_>,
    images: &ImageBatch,
    plan: HalfDuplexPlan,
    relay: HdRelay,
    rng: &mut ChannelRng,
) -> Result<Rollout> {
    let cfg = &ctx.model.cfg;
    let k = cfg.k();
    let (w1, _) = plan.split;
    let (k1, k2) = plan.symbols(cfg);
    let x_tok = match relay {
        HdRelay::Systematic => {
            let x1 = ctx.encode(g, images)?;
            let x1r = ctx.to_rows(g, x1);
            let dir = signal::power_normalize_rows(g, x1r, 1.0, k1);
            let dir = ctx.to_tokens(g, dir);
            ctx.trace.push(TraceEvent::ParityEncode);
            let x2 = ctx.model.parity_encode(g, ctx.vars, dir, ctx.u)?;
            g.concat_cols(&[x1, x2])
        }
        _ => ctx.encode(g, images)?,
    };
    let x_rows = ctx.to_rows(g, x_tok);
    let xs = signal::power_normalize_rows(g, x_rows, ctx.link.p_s, k);
    let xs_tok = ctx.to_tokens(g, xs);
    let c_star = g.shape(xs_tok).1;
    let x1_tok = g.slice_cols(xs_tok, 0, w1);
    let x2_tok = g.slice_cols(xs_tok, w1, c_star);
    let x1 = ctx.to_rows(g, x1_tok);
    let x2 = ctx.to_rows(g, x2_tok);

    // relay-receive period
    let x1p = ctx.precode_source(g, x1);
    let yr = ctx.relay_receive(g, x1p, 1, rng)?;
    let yd1 = ctx.dest_receive(g, x1p, None, 1, rng);

    let mut relay_raw = None;
    let xr = match relay {
        HdRelay::Amplify => {
            ctx.trace.push(TraceEvent::RelayAmplify { slot: 2 });
            let target = ctx.link.p_r * k as f64 / k2 as f64;
            let scale = if ctx.fading.is_some() {
                empirical_scale(g, yr, target, k1)
            } else {
                // η = sqrt(P_r'/(P_s^(1)·c_sr² + σ²)) with P_s^(1) measured per image.
                let sq = g.unary(x1, crate::autodiff::Unary::Square);
                let e = g.row_sum(sq);
                let c2 = ctx.link.c_sr * ctx.link.c_sr;
                let den = g.affine(e, c2 / k1 as f64, ctx.link.noise_var_r);
                let inv = g.unary(den, crate::autodiff::Unary::Recip);
                let inv = g.scale(inv, target);
                g.unary(inv, crate::autodiff::Unary::Sqrt)
            };
            g.mul_col(yr, scale)
        }
        HdRelay::Network | HdRelay::Systematic => {
            ctx.trace.push(TraceEvent::RelayNetwork { slot: 2 });
            let yr_tok = ctx.to_tokens(g, yr);
            let raw = ctx.model.relay_process(g, ctx.vars, yr_tok, Some(yr_tok), ctx.u)?;
            let raw_rows = ctx.to_rows(g, raw);
            relay_raw = Some(raw_rows);
            signal::power_normalize_rows(g, raw_rows, ctx.link.p_r, k)
        }
    };

    // relay-transmit period
    let x2p = ctx.precode_source(g, x2);
    let xrp = ctx.precode_relay(g, xr);
    let yd2 = ctx.dest_receive(g, x2p, Some(xrp), 2, rng);

    let y1 = ctx.to_tokens(g, yd1);
    let y2 = ctx.to_tokens(g, yd2);
    let yt = g.concat_cols(&[y1, y2]);
    let recon = ctx.decode(g, yt)?;
    let yd = g.concat_cols(&[yd1, yd2]);
    let mode = match relay {
        HdRelay::Amplify => Mode::HdAf,
        HdRelay::Network => Mode::HdPf,
        HdRelay::Systematic => Mode::HdPfSystematic,
    };
    let trace = std::mem::take(&mut ctx.trace);
    let d = Diagnostics {
        protocol: mode,
        k,
        x_s: Tensor::concat_cols(&[g.value(x1), g.value(x2)]),
        x_s1: Some(g.value(x1).clone()),
        x_s2: Some(g.value(x2).clone()),
        x_r: Some(g.value(xr).clone()),
        relay_raw: relay_raw.map(|v| g.value(v).clone()),
        y_r: Some(g.value(yr).clone()),
        y_d: g.value(yd).clone(),
        relay_blocks: Vec::new(),
        relay_stats: None,
        trace,
    };
    Ok(Rollout { recon, batch_stats: None, diagnostics: d })
}

/// Per-row gain giving `target` average power per symbol over `k` symbols.
fn empirical_scale(g: &mut Graph, x: Var, target: f64, k: usize) -> Var {
    let sq = g.unary(x, crate::autodiff::Unary::Square);
    let e = g.row_sum(sq);
    let e = g.clamp_min(e, 1e-12);
    let inv = g.unary(e, crate::autodiff::Unary::Recip);
    let inv = g.scale(inv, target * k as f64);
    g.unary(inv, crate::autodiff::Unary::Sqrt)
}

fn run_fd(
    g: &mut Graph,
    ctx: &mut Ctx<'_>,
    images: &ImageBatch,
    plan: FullDuplexPlan,
    relay: FdRelay,
    norm: RelayNorm,
    rng: &mut ChannelRng,
) -> Result<Rollout> {
    let cfg = &ctx.model.cfg;
    let k = cfg.k();
    let nb = plan.blocks;
    let w = plan.width(cfg);
    let kb = plan.block_symbols();

    let x = ctx.encode(g, images)?;
    let x_rows = ctx.to_rows(g, x);
    let xs = signal::power_normalize_rows(g, x_rows, ctx.link.p_s, k);
    let xs_tok = ctx.to_tokens(g, xs);
    let blocks: Vec<Var> = (0..nb)
        .map(|b| {
            let tok = g.slice_cols(xs_tok, b * w, (b + 1) * w);
            ctx.to_rows(g, tok)
        })
        .collect();
    let precoded: Vec<Var> = blocks.iter().map(|&b| ctx.precode_source(g, b)).collect();

    // The relay observes blocks 1..B−1; its observations depend only on the source.
    let yr_blocks = (1..nb)
        .map(|b| ctx.relay_receive(g, precoded[b - 1], b, rng))
        .collect::<Result<Vec<_>>>()?;
    let raw_out: Vec<Var> = match relay {
        FdRelay::Amplify => yr_blocks.clone(),
        FdRelay::Network if nb >= 2 => {
            let y_tok: Vec<Var> = yr_blocks.iter().map(|&y| ctx.to_tokens(g, y)).collect();
            relay_chain(g, ctx.model, ctx.vars, plan, &y_tok, ctx.u)?.into_iter().map(|r| ctx.to_rows(g, r)).collect()
        }
        FdRelay::Network => Vec::new(),
    };

    let mut batch_stats = None;
    let mut used_stats = None;
    let relay_tx: Vec<Var> = match relay {
        FdRelay::Amplify => {
            let target = ctx.link.p_r * nb as f64 / (nb - 1) as f64;
            let c2 = ctx.link.c_sr * ctx.link.c_sr;
            let eta = (target / (c2 * ctx.link.p_s + ctx.link.noise_var_r)).sqrt();
            raw_out
                .iter()
                .map(|&r| {
                    if ctx.fading.is_some() {
                        let s = empirical_scale(g, r, target, kb);
                        g.mul_col(r, s)
                    } else {
                        g.scale(r, eta)
                    }
                })
                .collect()
        }
        FdRelay::Network if raw_out.is_empty() => Vec::new(),
        FdRelay::Network => {
            let all = g.concat_cols(&raw_out);
            match norm {
                RelayNorm::Batch => {
                    let (mu, sd) = signal::batch_norm_stats(g, all);
                    batch_stats = Some((mu, sd));
                    used_stats = Some(RelayNormStats { mu: g.value(mu).data()[0], sigma: g.value(sd).data()[0] });
                    raw_out.iter().map(|&r| signal::standardize(g, r, mu, sd, ctx.link.p_r)).collect()
                }
                RelayNorm::Frozen(stats) => {
                    if !(stats.sigma >= signal::SIGMA_FLOOR) {
                        return arg_err(format!("relay sigma {} below floor", stats.sigma));
                    }
                    used_stats = Some(stats);
                    raw_out.iter().map(|&r| signal::standardize_frozen(g, r, stats, ctx.link.p_r)).collect()
                }
            }
        }
    };

    let mut yd_blocks = Vec::with_capacity(nb);
    for b in 1..=nb {
        let xrp = (b >= 2).then(|| ctx.precode_relay(g, relay_tx[b - 2]));
        yd_blocks.push(ctx.dest_receive(g, precoded[b - 1], xrp, b, rng));
    }

    // Record the schedule in channel-use order.
    ctx.trace.truncate(1);
    for b in 1..=nb {
        if b >= 2 {
            ctx.trace.push(match relay {
                FdRelay::Amplify => TraceEvent::RelayAmplify { slot: b },
                FdRelay::Network => TraceEvent::RelayNetwork { slot: b },
            });
        }
        if b < nb {
            ctx.trace.push(TraceEvent::RelayReceive { slot: b });
        }
        ctx.trace.push(TraceEvent::DestinationReceive { slot: b, relay_active: b >= 2 });
    }

    let y_tok: Vec<Var> = yd_blocks.iter().map(|&y| ctx.to_tokens(g, y)).collect();
    let yt = if y_tok.len() == 1 { y_tok[0] } else { g.concat_cols(&y_tok) };
    let recon = ctx.decode(g, yt)?;

    let mode = if relay == FdRelay::Amplify { Mode::FdAf } else { Mode::FdPf };
    let trace = std::mem::take(&mut ctx.trace);
    let value_cat = |g: &Graph, v: &[Var]| {
        let refs: Vec<&Tensor> = v.iter().map(|&x| g.value(x)).collect();
        Tensor::concat_cols(&refs)
    };
    let mut relay_blocks = vec![Tensor::zeros(ctx.n, 2 * kb)];
    relay_blocks.extend(relay_tx.iter().map(|&v| g.value(v).clone()));
    let active = nb >= 2;
    let d = Diagnostics {
        protocol: mode,
        k,
        x_s: value_cat(g, &blocks),
        x_s1: None,
        x_s2: None,
        x_r: active.then(|| value_cat(g, &relay_tx)),
        relay_raw: (active && relay == FdRelay::Network).then(|| value_cat(g, &raw_out)),
        y_r: active.then(|| value_cat(g, &yr_blocks)),
        y_d: value_cat(g, &yd_blocks),
        relay_blocks,
        relay_stats: used_stats,
        trace,
    };
    Ok(Rollout { recon, batch_stats, diagnostics: d })
}

/// Raw relay network outputs `x̃_{r,2..B}` (token layout, `(N·p²)×w` each)
/// from the relay's block observations `Y_{r,1..B−1}`.
///
/// The output for block `b` is computed from `T^(b)`, which only holds
/// observations and transmissions of blocks before `b`.
pub fn relay_chain(
    g: &mut Graph,
    model: &Model,
    vars: &[Var],
    plan: FullDuplexPlan,
    y_tok: &[Var],
    u: Option<Var>,
) -> Result<Vec<Var>> {
    let nb = plan.blocks;
    if y_tok.len() != nb - 1 {
        return shape_err(format!("relay chain needs {} observations, got {}", nb - 1, y_tok.len()));
    }
    let w = plan.width(&model.cfg);
    let rows = g.shape(y_tok[0]).0;
    let mut t = KnowledgeMatrix::<Var>::new(nb, plan.memory, rows, w)?;
    let mut out = Vec::with_capacity(nb - 1);
    let mut x_prev: Option<Var> = None;
    for b in 1..nb {
        let x_b = x_prev.unwrap_or_else(|| g.zeros(rows, w));
        t.update(b, y_tok[b - 1], x_b)?;
        let tm = t.assemble(g);
        let x_next = model.relay_process(g, vars, tm, Some(y_tok[b - 1]), u)?;
        out.push(x_next);
        x_prev = Some(x_next);
    }
    Ok(out)
}

/// Value-level [`relay_chain`] for inspection: observations are
/// `(N·p²)×w` token matrices.
pub fn relay_outputs(model: &Model, plan: FullDuplexPlan, y_tok: &[Tensor], side: Option<&LinkState>) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let ys: Vec<Var> = y_tok.iter().map(|y| g.constant(y.clone())).collect();
    let n = y_tok.first().map_or(0, |y| y.rows() / model.cfg.tokens());
    let u = match (model.cfg.la_enabled, side) {
        (true, Some(link)) => {
            let s = link.side_info().u;
            Some(g.constant(Tensor::from_vec(n, 4, (0..n).flat_map(|_| s).collect())))
        }
        (true, None) => return arg_err("side information required when link adaptation is enabled"),
        (false, _) => None,
    };
    let out = relay_chain(&mut g, model, &vars, plan, &ys, u)?;
    Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Inference run: returns the reconstruction and diagnostics.
pub fn transmit(
    model: &Model,
    protocol: &Protocol,
    images: &ImageBatch,
    cond: Conditions<'_>,
    stats: RelayNormStats,
    rng: &mut ChannelRng,
    exec: Execution,
) -> Result<(ImageBatch, Diagnostics)> {
    let mut g = Graph::with_execution(exec);
    let vars = model.bind(&mut g, false);
    let out = rollout(&mut g, &vars, model, protocol, images, cond, RelayNorm::Frozen(stats), rng)?;
    let recon = model.tokens_to_images(g.value(out.recon))?;
    Ok((recon, out.diagnostics))
}

fn check_mode(protocol: &Protocol, want: Mode) -> Result<()> {
    if protocol.mode() != want {
        return config_err("protocol", format!("expected {} but got {}", want.name(), protocol.mode().name()));
    }
    Ok(())
}

pub fn hd_af_transmit(model: &Model, images: &ImageBatch, link: &LinkState, rng: &mut ChannelRng) -> Result<(ImageBatch, Diagnostics)> {
    let plan = HalfDuplexPlan::new(0.5, &model.cfg)?;
    transmit(model, &Protocol::HdAf(plan), images, Conditions::fixed(link), RelayNormStats::default(), rng, Execution::default())
}

pub fn hd_pf_transmit(
    model: &Model,
    images: &ImageBatch,
    link: &LinkState,
    plan: HalfDuplexPlan,
    rng: &mut ChannelRng,
) -> Result<(ImageBatch, Diagnostics)> {
    transmit(model, &Protocol::HdPf(plan), images, Conditions::fixed(link), RelayNormStats::default(), rng, Execution::default())
}

pub fn hd_pf_systematic_transmit(
    model: &Model,
    images: &ImageBatch,
    link: &LinkState,
    plan: HalfDuplexPlan,
    rng: &mut ChannelRng,
) -> Result<(ImageBatch, Diagnostics)> {
    let p = Protocol::HdPfSystematic(plan);
    transmit(model, &p, images, Conditions::fixed(link), RelayNormStats::default(), rng, Execution::default())
}

pub fn fd_pf_transmit(
    model: &Model,
    images: &ImageBatch,
    cond: Conditions<'_>,
    plan: FullDuplexPlan,
    stats: RelayNormStats,
    rng: &mut ChannelRng,
) -> Result<(ImageBatch, Diagnostics)> {
    transmit(model, &Protocol::FdPf(plan), images, cond, stats, rng, Execution::default())
}

pub fn fd_af_transmit(
    model: &Model,
    images: &ImageBatch,
    cond: Conditions<'_>,
    plan: FullDuplexPlan,
    rng: &mut ChannelRng,
) -> Result<(ImageBatch, Diagnostics)> {
    if plan.blocks < 2 {
        return config_err("B", "full-duplex AF needs B >= 2");
    }
    let p = Protocol::FdAf(plan);
    check_mode(&p, Mode::FdAf)?;
    transmit(model, &p, images, cond, RelayNormStats::default(), rng, Execution::default())
}

pub fn direct_transmit(model: &Model, images: &ImageBatch, cond: Conditions<'_>, rng: &mut ChannelRng) -> Result<(ImageBatch, Diagnostics)> {
    transmit(model, &Protocol::Direct, images, cond, RelayNormStats::default(), rng, Execution::default())
}

/// Closed-form half-duplex AF gain `sqrt(2P_r/(P_s^(1)·c_sr² + 1))`.
pub fn hd_af_eta(p_s1: f64, c_sr: f64, p_r: f64) -> f64 {
    (2.0 * p_r / (p_s1 * c_sr * c_sr + 1.0)).sqrt()
}

/// Full-duplex AF gain `sqrt(P_r·B/((B−1)(c_sr²P_s + 1)))`.
pub fn fd_af_eta(blocks: usize, p_s: f64, c_sr: f64, p_r: f64) -> Result<f64> {
    if blocks < 2 {
        return config_err("B", "full-duplex AF needs B >= 2");
    }
    Ok((p_r * blocks as f64 / ((blocks - 1) as f64 * (c_sr * c_sr * p_s + 1.0))).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> CodecConfig {
        CodecConfig::toy()
    }

    #[test]
    fn plans_validate_splits() {
        let cfg = toy();
        let p = HalfDuplexPlan::new(0.5, &cfg).unwrap();
        assert_eq!(p.split, (3, 3));
        assert_eq!(p.symbols(&cfg), (24, 24));
        assert!(HalfDuplexPlan::new(1.0 / 6.0, &cfg).is_ok());
        assert!(HalfDuplexPlan::new(0.25, &cfg).is_err());
        assert!(HalfDuplexPlan::new(1.0, &cfg).is_err());

        let cifar = CodecConfig::cifar();
        let p = HalfDuplexPlan::new(0.5, &cifar).unwrap();
        assert_eq!(p.split, (12, 12));
        assert_eq!(p.symbols(&cifar).0, 384);
        let f = FullDuplexPlan::full_memory(6, &cifar).unwrap();
        assert_eq!(f.block_symbols(), 128);
        assert_eq!(f.knowledge_cols(&cifar), 40);
        assert!(FullDuplexPlan::new(5, 4, &cifar).is_err());
        assert!(FullDuplexPlan::new(6, 6, &cifar).is_err());
        assert!(FullDuplexPlan::new(6, 0, &cifar).is_err());
    }

    #[test]
    fn knowledge_matrix_examples() {
        let mut t = KnowledgeMatrix::<Tensor>::new(6, 5, 4, 2).unwrap();
        assert!(t.values().data().iter().all(|&v| v == 0.0));
        let y1 = Tensor::filled(4, 2, 1.0);
        t = update_knowledge(t, &y1, &Tensor::zeros(4, 2), 1).unwrap();
        let v = t.values();
        assert_eq!(v.slice_cols(0, 2), y1);
        assert!(v.slice_cols(2, 20).data().iter().all(|&x| x == 0.0));

        let mut t = KnowledgeMatrix::<Tensor>::new(6, 1, 4, 2).unwrap();
        for b in 1..=3 {
            t = update_knowledge(t, &Tensor::filled(4, 2, b as f64), &Tensor::filled(4, 2, -(b as f64)), b).unwrap();
        }
        assert_eq!(t.block(), 4);
        assert_eq!(t.occupied(), vec![3]);
        let v = t.values();
        assert_eq!(v.slice_cols(4, 6), Tensor::filled(4, 2, 3.0));
        assert_eq!(v.slice_cols(10 + 4, 10 + 6), Tensor::filled(4, 2, -3.0));
        assert_eq!(v.data().iter().filter(|&&x| x != 0.0).count(), 16);

        let t = KnowledgeMatrix::<Tensor>::new(3, 2, 4, 2).unwrap();
        assert!(update_knowledge(t.clone(), &y1, &y1, 0).is_err());
        assert!(update_knowledge(t.clone(), &y1, &y1, 3).is_err());
        assert!(update_knowledge(t, &Tensor::zeros(4, 3), &y1, 1).is_err());
    }

    #[test]
    fn eta_examples() {
        assert!((hd_af_eta(1.0, 1.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((hd_af_eta(1.0, 0.0, 2.0) - 2.0).abs() < 1e-15);
        assert!((fd_af_eta(2, 1.0, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(fd_af_eta(1, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn spec_resolution() {
        let cfg = toy();
        let p = ProtocolSpec::fd(Mode::FdPf, 3, None).resolve(&cfg).unwrap();
        assert_eq!(p, Protocol::FdPf(FullDuplexPlan { blocks: 3, memory: 2, k: 48 }));
        assert!(ProtocolSpec::new(Mode::HdPf).resolve(&cfg).is_err());
        assert!(ProtocolSpec::fd(Mode::FdAf, 1, None).resolve(&cfg).is_err());
        assert!(ProtocolSpec::hd(Mode::HdAf, 1.0 / 3.0).resolve(&cfg).is_err());
        let text = toml::to_string(&ProtocolSpec::fd(Mode::FdPf, 6, Some(2))).unwrap();
        assert!(text.contains("mode = \"fd_pf\""));
        let back: ProtocolSpec = toml::from_str(&text).unwrap();
        assert_eq!(back.blocks, Some(6));
    }
}
