//! Primitive signal operations shared by every protocol: real/complex symbol
//! mapping, power normalization at the source and relay, and reconstruction
//! metrics.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Unary, Var};
use crate::error::{arg_err, shape_err, Error, Result};

/// Floor applied to the relay's recorded standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Reported PSNR when the reconstruction is exact.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Power-constrained vector of complex channel symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexSignal {
    pub symbols: Vec<Complex64>,
    /// Average power per complex symbol the signal was normalized to (unit noise reference).
    pub power_budget: f64,
}

impl ComplexSignal {
    pub fn new(symbols: Vec<Complex64>, power_budget: f64) -> Self {
        Self { symbols, power_budget }
    }

    pub fn zeros(n: usize) -> Self {
        Self { symbols: vec![Complex64::new(0.0, 0.0); n], power_budget: 0.0 }
    }

    /// Builds a signal from interleaved `(re, im)` reals.
    pub fn from_interleaved(reals: &[f64], power_budget: f64) -> Result<Self> {
        if reals.len() % 2 != 0 {
            return shape_err(format!("interleaved length {} is odd", reals.len()));
        }
        let symbols = reals.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect();
        Ok(Self { symbols, power_budget })
    }

    pub fn to_interleaved(&self) -> Vec<f64> {
        self.symbols.iter().flat_map(|z| [z.re, z.im]).collect()
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.symbols.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Average power over a normalization horizon of `k` complex symbols.
    pub fn average_power(&self, k: usize) -> f64 {
        self.energy() / k as f64
    }
}

/// Pairs consecutive row-major reals of a `p²×m` matrix into complex symbols.
pub fn symbol_map(matrix: &Tensor) -> Result<ComplexSignal> {
    if matrix.cols() % 2 != 0 {
        return shape_err(format!("symbol_map needs an even column count, got {}", matrix.cols()));
    }
    ComplexSignal::from_interleaved(matrix.data(), 0.0)
}

/// Inverse of [`symbol_map`] for a matrix with `rows` rows.
pub fn symbol_demap(signal: &ComplexSignal, rows: usize) -> Result<Tensor> {
    let reals = 2 * signal.len();
    if rows == 0 || reals % rows != 0 {
        return shape_err(format!("{} complex symbols cannot fill {rows} rows", signal.len()));
    }
    Ok(Tensor::from_vec(rows, reals / rows, signal.to_interleaved()))
}

/// Scales `raw` so that `(1/k)·‖x‖² = power` exactly, then maps to symbols.
pub fn power_normalize(raw: &[f64], power: f64, k: usize) -> Result<ComplexSignal> {
    if k == 0 {
        return arg_err("normalization horizon k must be positive");
    }
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate("cannot power-normalize a zero-norm latent".into()));
    }
    let s = (k as f64 * power).sqrt() / norm;
    let scaled: Vec<f64> = raw.iter().map(|v| v * s).collect();
    ComplexSignal::from_interleaved(&scaled, power)
}

/// Mean and standard deviation of the relay's raw outputs, recorded over
/// blocks `2..=B` and applied block-wise at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelayNormStats {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for RelayNormStats {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 1.0 }
    }
}

impl RelayNormStats {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma >= SIGMA_FLOOR) || !mu.is_finite() {
            return arg_err(format!("relay statistics need finite mu and sigma >= {SIGMA_FLOOR}, got ({mu}, {sigma})"));
        }
        Ok(Self { mu, sigma })
    }
}

/// Empirical mean/std over every entry of the given relay blocks.
pub fn record_norm_stats<B: AsRef<[f64]>>(blocks: &[B]) -> Result<RelayNormStats> {
    let n: usize = blocks.iter().map(|b| b.as_ref().len()).sum();
    if n == 0 {
        return arg_err("record_norm_stats needs at least one non-empty block");
    }
    let mu = blocks.iter().flat_map(|b| b.as_ref().iter()).sum::<f64>() / n as f64;
    let var = blocks.iter().flat_map(|b| b.as_ref().iter()).map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
    Ok(RelayNormStats { mu, sigma: var.sqrt().max(SIGMA_FLOOR) })
}

/// `sqrt(P_r/2)·(block − μ)/σ`, mapped to symbols.
pub fn relay_block_normalize(block: &[f64], stats: RelayNormStats, relay_power: f64) -> Result<ComplexSignal> {
    if !(stats.sigma >= SIGMA_FLOOR) {
        return arg_err(format!("relay sigma {} below floor {SIGMA_FLOOR}", stats.sigma));
    }
    let a = (relay_power / 2.0).sqrt() / stats.sigma;
    let out: Vec<f64> = block.iter().map(|v| a * (v - stats.mu)).collect();
    ComplexSignal::from_interleaved(&out, relay_power)
}

/// Exponential moving average of relay statistics with start-up bias
/// correction, so early estimates are not pulled towards zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStatsTracker {
    pub decay: f64,
    mu_acc: f64,
    second_acc: f64,
    steps: u64,
}

impl NormStatsTracker {
    pub fn new(decay: f64) -> Self {
        Self { decay, mu_acc: 0.0, second_acc: 0.0, steps: 0 }
    }

    pub fn update(&mut self, batch: RelayNormStats) {
        let d = self.decay;
        self.mu_acc = d * self.mu_acc + (1.0 - d) * batch.mu;
        self.second_acc = d * self.second_acc + (1.0 - d) * batch.sigma * batch.sigma;
        self.steps += 1;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Current bias-corrected estimate; defaults to `(0, 1)` before any update.
    pub fn current(&self) -> RelayNormStats {
        if self.steps == 0 {
            return RelayNormStats::default();
        }
        let corr = 1.0 - self.decay.powi(self.steps.min(i32::MAX as u64) as i32);
        let mu = self.mu_acc / corr;
        let sigma = (self.second_acc / corr).sqrt().max(SIGMA_FLOOR);
        RelayNormStats { mu, sigma }
    }
}

// ---------------------------------------------------------------------------
// Differentiable counterparts used inside the training graph.
// Rows are images; columns are interleaved (re, im) reals.
// ---------------------------------------------------------------------------

/// Per-row exact power normalization: `x·sqrt(kP)/‖x‖`.
pub fn power_normalize_rows(g: &mut Graph, x: Var, power: f64, k: usize) -> Var {
    let sq = g.unary(x, Unary::Square);
    let energy = g.row_sum(sq);
    let norm = g.unary(energy, Unary::Sqrt);
    let inv = g.unary(norm, Unary::Recip);
    let s = g.scale(inv, (k as f64 * power).sqrt());
    g.mul_col(x, s)
}

/// Statistics over every entry of `x`, computed inside the graph.
pub fn batch_norm_stats(g: &mut Graph, x: Var) -> (Var, Var) {
    let mu = g.mean_all(x);
    let neg_mu = g.scale(mu, -1.0);
    let centered = g.shift_by(x, neg_mu);
    let sq = g.unary(centered, Unary::Square);
    let var = g.mean_all(sq);
    let sd = g.unary(var, Unary::Sqrt);
    let sd = g.clamp_min(sd, SIGMA_FLOOR);
    (mu, sd)
}

/// `sqrt(P/2)·(x − μ)/σ` with graph-valued statistics.
pub fn standardize(g: &mut Graph, x: Var, mu: Var, sigma: Var, relay_power: f64) -> Var {
    let neg_mu = g.scale(mu, -1.0);
    let centered = g.shift_by(x, neg_mu);
    let inv = g.unary(sigma, Unary::Recip);
    let inv = g.scale(inv, (relay_power / 2.0).sqrt());
    g.scale_by(centered, inv)
}

/// Same as [`standardize`] with frozen statistics.
pub fn standardize_frozen(g: &mut Graph, x: Var, stats: RelayNormStats, relay_power: f64) -> Var {
    let a = (relay_power / 2.0).sqrt() / stats.sigma;
    g.affine(x, a, -a * stats.mu)
}

// ---------------------------------------------------------------------------
// Images and metrics
// ---------------------------------------------------------------------------

/// Batch of images, `[N, C, H, W]` row-major, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBatch {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

impl ImageBatch {
    pub fn new(n: usize, c: usize, h: usize, w: usize, pixels: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return shape_err(format!("image batch dimensions must be positive, got [{n}, {c}, {h}, {w}]"));
        }
        if pixels.len() != n * c * h * w {
            return shape_err(format!("expected {} pixels for [{n}, {c}, {h}, {w}], got {}", n * c * h * w, pixels.len()));
        }
        Ok(Self { n, c, h, w, pixels })
    }

    /// Pixels per image (`M = C·H·W`).
    pub fn pixels_per_image(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let m = self.pixels_per_image();
        &self.pixels[i * m..(i + 1) * m]
    }

    pub fn same_shape(&self, other: &ImageBatch) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    /// Selects images by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> ImageBatch {
        let m = self.pixels_per_image();
        let mut pixels = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            pixels.extend_from_slice(self.image(i));
        }
        ImageBatch { n: idx.len(), c: self.c, h: self.h, w: self.w, pixels }
    }

    pub fn range(&self, start: usize, end: usize) -> ImageBatch {
        let m = self.pixels_per_image();
        ImageBatch { n: end - start, c: self.c, h: self.h, w: self.w, pixels: self.pixels[start * m..end * m].to_vec() }
    }

    /// Zero-pads height and width up to multiples of `p`.
    pub fn padded_to(&self, p: usize) -> ImageBatch {
        let h2 = self.h.div_ceil(p) * p;
        let w2 = self.w.div_ceil(p) * p;
        if h2 == self.h && w2 == self.w {
            return self.clone();
        }
        let mut pixels = vec![0.0; self.n * self.c * h2 * w2];
        for i in 0..self.n {
            for ch in 0..self.c {
                for y in 0..self.h {
                    let src = ((i * self.c + ch) * self.h + y) * self.w;
                    let dst = ((i * self.c + ch) * h2 + y) * w2;
                    pixels[dst..dst + self.w].copy_from_slice(&self.pixels[src..src + self.w]);
                }
            }
        }
        ImageBatch { n: self.n, c: self.c, h: h2, w: w2, pixels }
    }

    pub fn variance(&self) -> f64 {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().sum::<f64>() / n;
        self.pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
    }
}

/// A metric value, flagged when it was clamped (e.g. exact reconstruction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: f64,
    pub flagged: bool,
}

/// PSNR of one image using `‖S‖∞²` as the peak.
pub fn psnr_image(s: &[f64], s_hat: &[f64]) -> Metric {
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mse = s.iter().zip(s_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.len() as f64;
    if mse == 0.0 {
        return Metric { value: PSNR_CAP_DB, flagged: true };
    }
    Metric { value: 10.0 * (peak * peak / mse).log10(), flagged: false }
}

/// Global-statistics SSIM of one image.
pub fn ssim_image(s: &[f64], s_hat: &[f64]) -> f64 {
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    let n = s.len() as f64;
    let mu_s = s.iter().sum::<f64>() / n;
    let mu_h = s_hat.iter().sum::<f64>() / n;
    let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    let var_s = cov(s, mu_s, s, mu_s);
    let var_h = cov(s_hat, mu_h, s_hat, mu_h);
    let cov_sh = cov(s, mu_s, s_hat, mu_h);
    ((2.0 * mu_s * mu_h + C1) * (2.0 * cov_sh + C2)) / ((mu_s * mu_s + mu_h * mu_h + C1) * (var_s + var_h + C2))
}

fn check_pair(s: &ImageBatch, s_hat: &ImageBatch) -> Result<()> {
    if !s.same_shape(s_hat) {
        return shape_err(format!(
            "metric inputs differ in shape: [{}, {}, {}, {}] vs [{}, {}, {}, {}]",
            s.n, s.c, s.h, s.w, s_hat.n, s_hat.c, s_hat.h, s_hat.w
        ));
    }
    Ok(())
}

pub fn psnr_per_image(s: &ImageBatch, s_hat: &ImageBatch) -> Result<Vec<Metric>> {
    check_pair(s, s_hat)?;
    Ok((0..s.n).map(|i| psnr_image(s.image(i), s_hat.image(i))).collect())
}

/// Batch-average PSNR (dB); flagged if any image was capped.
pub fn psnr(s: &ImageBatch, s_hat: &ImageBatch) -> Result<Metric> {
    let per = psnr_per_image(s, s_hat)?;
    let value = per.iter().map(|m| m.value).sum::<f64>() / per.len() as f64;
    Ok(Metric { value, flagged: per.iter().any(|m| m.flagged) })
}

pub fn ssim_per_image(s: &ImageBatch, s_hat: &ImageBatch) -> Result<Vec<f64>> {
    check_pair(s, s_hat)?;
    Ok((0..s.n).map(|i| ssim_image(s.image(i), s_hat.image(i))).collect())
}

pub fn ssim(s: &ImageBatch, s_hat: &ImageBatch) -> Result<f64> {
    let per = ssim_per_image(s, s_hat)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
