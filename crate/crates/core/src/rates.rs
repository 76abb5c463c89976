//! Achievable rates of decode-and-forward and compress-and-forward relaying,
//! used to size the bit budget of the separation-based digital baseline.
//!
//! Rates are in bits per real channel use (`½·log₂(1 + SNR)` per complex
//! use), with unit noise variance at both receivers.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::channel::{gain_to_db, power_to_db, LinkState};
use crate::error::{arg_err, Result};
use crate::par::{self, Execution};

fn half_log(snr: f64) -> f64 {
    0.5 * (1.0 + snr).log2()
}

/// Relay power during its half-duplex transmit period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelayPower {
    /// `P_r' = P_r/(1−α)`: the relay's energy budget `kP_r` spent in `(1−α)k` uses.
    #[default]
    Concentrated,
    /// `P_r' = P_r`.
    Average,
}

impl RelayPower {
    pub fn per_symbol(self, p_r: f64, alpha: f64) -> f64 {
        match self {
            RelayPower::Concentrated => p_r / (1.0 - alpha),
            RelayPower::Average => p_r,
        }
    }
}

/// Combination of the two cut-set terms in the full-duplex DF rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdDfForm {
    #[default]
    Min,
    Sum,
}

/// Rate direct transmission achieves, `½log₂(1 + c_sd²P_s)`.
pub fn c_direct(link: &LinkState) -> f64 {
    half_log(link.c_sd * link.c_sd * link.p_s)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return arg_err(format!("{name} must lie in (0, 1), got {v}"));
    }
    Ok(())
}

/// Per-symbol source powers `(γP_s/α, (1−γ)P_s/(1−α))` of the two periods.
pub fn split_powers(alpha: f64, gamma: f64, p_s: f64) -> (f64, f64) {
    (gamma * p_s / alpha, (1.0 - gamma) * p_s / (1.0 - alpha))
}

/// Half-duplex decode-and-forward rate for a fixed time split `α`, source
/// power split `γ` and relay/source correlation `β`.
pub fn rate_hd_df(alpha: f64, beta: f64, gamma: f64, link: &LinkState, power: RelayPower) -> Result<f64> {
    check_unit("alpha", alpha)?;
    check_unit("beta", beta)?;
    check_unit("gamma", gamma)?;
    Ok(hd_df(alpha, beta, gamma, link, power))
}

fn hd_df(alpha: f64, beta: f64, gamma: f64, link: &LinkState, power: RelayPower) -> f64 {
    let (p1, p2) = split_powers(alpha, gamma, link.p_s);
    let pr = power.per_symbol(link.p_r, alpha);
    let (sr2, rd2, sd2) = (link.c_sr * link.c_sr, link.c_rd * link.c_rd, link.c_sd * link.c_sd);
    let c1 = alpha * half_log(sr2 * p1) + (1.0 - alpha) * half_log((1.0 - beta) * sd2 * p2);
    let coherent = 2.0 * link.c_sd * link.c_rd * (beta * p2 * pr).sqrt();
    let c2 = alpha * half_log(sd2 * p1) + (1.0 - alpha) * half_log(sd2 * p2 + rd2 * pr + coherent);
    c1.min(c2)
}

/// Outcome of a compress-and-forward evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfRate {
    pub rate: f64,
    /// The compression term degenerated and the two-period direct rate was returned.
    pub floored: bool,
}

/// Half-duplex compress-and-forward rate.
pub fn rate_hd_cf(alpha: f64, gamma: f64, link: &LinkState, power: RelayPower) -> Result<CfRate> {
    check_unit("alpha", alpha)?;
    check_unit("gamma", gamma)?;
    Ok(hd_cf(alpha, gamma, link, power))
}

fn hd_cf(alpha: f64, gamma: f64, link: &LinkState, power: RelayPower) -> CfRate {
    let (p1, p2) = split_powers(alpha, gamma, link.p_s);
    let pr = power.per_symbol(link.p_r, alpha);
    let (sr2, rd2, sd2) = (link.c_sr * link.c_sr, link.c_rd * link.c_rd, link.c_sd * link.c_sd);
    let floor = alpha * half_log(sd2 * p1) + (1.0 - alpha) * half_log(sd2 * p2);
    let growth = (1.0 + rd2 * pr / (1.0 + sd2 * p2)).powf(1.0 / alpha - 1.0) - 1.0;
    let sigma_w = (sr2 * p1 + sd2 * p1 + 1.0) / ((sd2 * p1 + 1.0) * growth);
    let rate = alpha * half_log(sd2 * p1 + sr2 * p1 / (1.0 + sigma_w)) + (1.0 - alpha) * half_log(sd2 * p2);
    if !(growth > 0.0) || !rate.is_finite() {
        return CfRate { rate: floor, floored: true };
    }
    CfRate { rate, floored: false }
}

/// Full-duplex DF rate for a fixed `β`.
pub fn rate_fd_df(beta: f64, link: &LinkState, form: FdDfForm) -> f64 {
    let (sr2, rd2, sd2) = (link.c_sr * link.c_sr, link.c_rd * link.c_rd, link.c_sd * link.c_sd);
    let a = half_log((1.0 - beta) * sr2 * link.p_s);
    let b = half_log(sd2 * link.p_s + rd2 * link.p_r + 2.0 * link.c_sd * link.c_rd * (beta * link.p_s * link.p_r).sqrt());
    match form {
        FdDfForm::Min => a.min(b),
        FdDfForm::Sum => a + b,
    }
}

/// Full-duplex CF rate.
pub fn rate_fd_cf(link: &LinkState) -> f64 {
    let (sr2, rd2, sd2) = (link.c_sr * link.c_sr, link.c_rd * link.c_rd, link.c_sd * link.c_sd);
    let relay = rd2 * link.p_r;
    if !(relay > 0.0) {
        return c_direct(link);
    }
    let sigma = (sd2 * link.p_s + sr2 * link.p_s + 1.0) / relay;
    half_log(sd2 * link.p_s + sr2 * link.p_s / (1.0 + sigma))
}

/// Search grid over the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub step: f64,
    pub alpha: (f64, f64),
    pub beta: (f64, f64),
    pub gamma: (f64, f64),
    /// Coarse pass step for coarse-to-fine search; `None` searches the fine grid exhaustively.
    pub coarse: Option<f64>,
    #[serde(default)]
    pub relay_power: RelayPower,
    #[serde(default)]
    pub fd_form: FdDfForm,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            step: 1e-3,
            alpha: (0.0, 1.0),
            beta: (0.0, 1.0),
            gamma: (0.0, 1.0),
            coarse: Some(1e-2),
            relay_power: RelayPower::default(),
            fd_form: FdDfForm::default(),
        }
    }
}

impl GridSpec {
    pub fn with_step(step: f64) -> Self {
        Self { step, ..Self::default() }
    }

    pub fn exhaustive(step: f64) -> Self {
        Self { step, coarse: None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= 0.1) {
            return arg_err(format!("grid step must lie in (0, 0.1], got {}", self.step));
        }
        if let Some(c) = self.coarse {
            if !(c >= self.step && c <= 0.25) {
                return arg_err(format!("coarse step {c} must lie in [step, 0.25]"));
            }
        }
        for (name, (lo, hi)) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return arg_err(format!("{name} range ({lo}, {hi}) is not inside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Multiples of `step` lying strictly inside `(0, 1)` and inside `[lo, hi]`.
fn axis(step: f64, (lo, hi): (f64, f64)) -> Vec<f64> {
    let n = (1.0 / step).round() as i64;
    (1..n.max(2))
        .map(|i| i as f64 * step)
        .filter(|&v| v > 0.0 && v < 1.0 && v >= lo - 1e-12 && v <= hi + 1e-12)
        .collect()
}

fn window(center: f64, half: f64, range: (f64, f64)) -> (f64, f64) {
    ((center - half).max(range.0), (center + half).min(range.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub r_df: f64,
    pub r_cf: f64,
    pub r_star: f64,
    /// DF maximizer `(α, β, γ)`; `α`, `γ` are `None` in full duplex.
    pub df_argmax: (Option<f64>, f64, Option<f64>),
    /// CF maximizer `(α, γ)`; `None` in full duplex.
    pub cf_argmax: Option<(f64, f64)>,
    /// The CF search hit the degenerate-compression floor at its maximizer.
    pub cf_floored: bool,
}

impl RateResult {
    /// Maximizer of the winning scheme as `(α, β, γ)`.
    pub fn argmax(&self) -> (Option<f64>, Option<f64>, Option<f64>) {
        if self.r_df >= self.r_cf {
            (self.df_argmax.0, Some(self.df_argmax.1), self.df_argmax.2)
        } else {
            match self.cf_argmax {
                Some((a, g)) => (Some(a), None, Some(g)),
                None => (None, None, None),
            }
        }
    }
}

#[derive(Clone, Copy)]
struct Best {
    value: f64,
    at: [f64; 3],
    flag: bool,
}

impl Best {
    const NONE: Best = Best { value: f64::NEG_INFINITY, at: [f64::NAN; 3], flag: false };

    fn fold(self, other: Best) -> Best {
        // Ties keep the earlier point so the result does not depend on scheduling.
        if other.value > self.value {
            other
        } else {
            self
        }
    }
}

fn search_df(link: &LinkState, grid: &GridSpec, step: f64, ranges: [(f64, f64); 3], exec: Execution) -> Best {
    let alphas = axis(step, ranges[0]);
    let betas = axis(step, ranges[1]);
    let gammas = axis(step, ranges[2]);
    let slices = par::map_slice(exec, &alphas, |&a| {
        let mut best = Best::NONE;
        for &g in &gammas {
            for &b in &betas {
                let v = hd_df(a, b, g, link, grid.relay_power);
                best = best.fold(Best { value: v, at: [a, b, g], flag: false });
            }
        }
        best
    });
    slices.into_iter().fold(Best::NONE, Best::fold)
}

fn search_cf(link: &LinkState, grid: &GridSpec, step: f64, ranges: [(f64, f64); 2], exec: Execution) -> Best {
    let alphas = axis(step, ranges[0]);
    let gammas = axis(step, ranges[1]);
    let slices = par::map_slice(exec, &alphas, |&a| {
        let mut best = Best::NONE;
        for &g in &gammas {
            let r = hd_cf(a, g, link, grid.relay_power);
            best = best.fold(Best { value: r.rate, at: [a, g, f64::NAN], flag: r.floored });
        }
        best
    });
    slices.into_iter().fold(Best::NONE, Best::fold)
}

/// Best half-duplex DF and CF rates over the grid.
pub fn optimize_hd_rate(link: &LinkState, grid: &GridSpec) -> Result<RateResult> {
    optimize_hd_rate_with(link, grid, Execution::default())
}

pub fn optimize_hd_rate_with(link: &LinkState, grid: &GridSpec, exec: Execution) -> Result<RateResult> {
    link.validate()?;
    grid.validate()?;
    let full = [grid.alpha, grid.beta, grid.gamma];
    let (df, cf) = match grid.coarse {
        None => (search_df(link, grid, grid.step, full, exec), search_cf(link, grid, grid.step, [grid.alpha, grid.gamma], exec)),
        Some(c) => {
            let df0 = search_df(link, grid, c, full, exec);
            let cf0 = search_cf(link, grid, c, [grid.alpha, grid.gamma], exec);
            let w = |i: usize, b: &Best, r: (f64, f64)| window(b.at[i], c, r);
            let df1 = search_df(link, grid, grid.step, [w(0, &df0, grid.alpha), w(1, &df0, grid.beta), w(2, &df0, grid.gamma)], exec);
            let cf1 = search_cf(link, grid, grid.step, [w(0, &cf0, grid.alpha), w(1, &cf0, grid.gamma)], exec);
            (df0.fold(df1), cf0.fold(cf1))
        }
    };
    if !df.value.is_finite() || !cf.value.is_finite() {
        return arg_err("rate grid is empty");
    }
    let r_df = df.value.max(0.0);
    let r_cf = cf.value.max(0.0);
    Ok(RateResult {
        r_df,
        r_cf,
        r_star: r_df.max(r_cf),
        df_argmax: (Some(df.at[0]), df.at[1], Some(df.at[2])),
        cf_argmax: Some((cf.at[0], cf.at[1])),
        cf_floored: cf.flag,
    })
}

/// Best full-duplex DF (over `β`) and CF rates.
pub fn rate_fd(link: &LinkState, grid: &GridSpec) -> Result<RateResult> {
    link.validate()?;
    grid.validate()?;
    let scan = |step: f64, range: (f64, f64)| {
        axis(step, range)
            .into_iter()
            .map(|b| Best { value: rate_fd_df(b, link, grid.fd_form), at: [f64::NAN, b, f64::NAN], flag: false })
            .fold(Best::NONE, Best::fold)
    };
    let df = match grid.coarse {
        None => scan(grid.step, grid.beta),
        Some(c) => {
            let b0 = scan(c, grid.beta);
            b0.fold(scan(grid.step, window(b0.at[1], c, grid.beta)))
        }
    };
    if !df.value.is_finite() {
        return arg_err("rate grid is empty");
    }
    let r_df = df.value.max(0.0);
    let r_cf = rate_fd_cf(link).max(0.0);
    Ok(RateResult { r_df, r_cf, r_star: r_df.max(r_cf), df_argmax: (None, df.at[1], None), cf_argmax: None, cf_floored: false })
}

/// Bits available per image: `⌊2·M·ρ·R*⌋` for `M` real source values.
pub fn bit_budget(m: usize, rho: f64, r_star: f64) -> u64 {
    (2.0 * m as f64 * rho * r_star).floor().max(0.0) as u64
}

/// One row of a rate table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub link: LinkState,
    pub result: RateResult,
}

pub const CSV_HEADER: &str = "c_sr_db,c_rd_db,p_s_db,p_r_db,r_df,r_cf,r_star,alpha,beta,gamma";

pub fn rates_csv(rows: &[RateRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let (a, b, g) = r.result.argmax();
        let _ = writeln!(
            out,
            "{:.3},{:.3},{:.3},{:.3},{:.6},{:.6},{:.6},{},{},{}",
            gain_to_db(r.link.c_sr),
            gain_to_db(r.link.c_rd),
            power_to_db(r.link.p_s),
            power_to_db(r.link.p_r),
            r.result.r_df,
            r.result.r_cf,
            r.result.r_star,
            opt(a),
            opt(b),
            opt(g)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(p: f64) -> LinkState {
        LinkState::new(1.0, 1.0, 1.0, p, p).unwrap()
    }

    #[test]
    fn argument_ranges() {
        let l = ones(2.0);
        assert!(rate_hd_df(0.0, 0.5, 0.5, &l, RelayPower::default()).is_err());
        assert!(rate_hd_df(0.5, 1.0, 0.5, &l, RelayPower::default()).is_err());
        assert!(rate_hd_cf(0.5, 1.2, &l, RelayPower::default()).is_err());
        assert!(GridSpec::with_step(0.2).validate().is_err());
        assert!(GridSpec::with_step(1e-3).validate().is_ok());
    }

    #[test]
    fn budget_formula() {
        assert_eq!(bit_budget(3072, 1.0 / 6.0, 0.0), 0);
        assert_eq!(bit_budget(3072, 1.0 / 6.0, 1.5), 1536);
        assert_eq!(bit_budget(3072, 1.0 / 3.0, 1.5), 2 * bit_budget(3072, 1.0 / 6.0, 1.5));
    }

    #[test]
    fn axis_points() {
        assert_eq!(axis(0.25, (0.0, 1.0)), vec![0.25, 0.5, 0.75]);
        assert_eq!(axis(0.1, (0.3, 0.5)).len(), 3);
        assert_eq!(axis(1e-3, (0.0, 1.0)).len(), 999);
    }

    #[test]
    fn csv_layout() {
        let l = ones(2.0);
        let r = optimize_hd_rate(&l, &GridSpec { step: 0.05, coarse: None, ..GridSpec::default() }).unwrap();
        let text = rates_csv(&[RateRow { link: l, result: r }]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next().unwrap().split(',').count(), 10);
    }
}
