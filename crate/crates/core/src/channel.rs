//! Three-node relay channel: half-duplex broadcast/MAC phases, full-duplex
//! block steps, and the Rayleigh-fading precode/equalize round.
//!
//! All randomness comes from a [`ChannelRng`], which keeps separate seeded
//! substreams for relay-side and destination-side noise. Two runs that draw
//! the same number of destination noise samples therefore see identical
//! destination noise, whatever the relay did.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, config_err, shape_err, Error, Result};
use crate::signal::ComplexSignal;

pub fn db_to_power(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn power_to_db(p: f64) -> f64 {
    10.0 * p.log10()
}

/// Amplitude gain `c` whose square `c²` equals the given dB value.
pub fn db_to_gain(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub fn gain_to_db(c: f64) -> f64 {
    20.0 * c.log10()
}

/// Small-scale fading coefficients of the three links.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadingCoeffs {
    pub h_sr: Complex64,
    pub h_rd: Complex64,
    pub h_sd: Complex64,
}

impl FadingCoeffs {
    pub fn unit() -> Self {
        let one = Complex64::new(1.0, 0.0);
        Self { h_sr: one, h_rd: one, h_sd: one }
    }

    /// Draws each coefficient from CN(0, 1).
    pub fn sample<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        let mut h = || {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
        };
        Self { h_sr: h(), h_rd: h(), h_sd: h() }
    }
}

/// Ground-truth link gains, powers and noise levels (all linear).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkState {
    pub c_sr: f64,
    pub c_rd: f64,
    pub c_sd: f64,
    pub p_s: f64,
    pub p_r: f64,
    pub fading: Option<FadingCoeffs>,
    pub tau: Option<f64>,
    pub noise_var_r: f64,
    pub noise_var_d: f64,
}

impl LinkState {
    pub fn new(c_sr: f64, c_rd: f64, c_sd: f64, p_s: f64, p_r: f64) -> Result<Self> {
        let link = Self { c_sr, c_rd, c_sd, p_s, p_r, fading: None, tau: None, noise_var_r: 1.0, noise_var_d: 1.0 };
        link.validate()?;
        Ok(link)
    }

    /// Gains given as `10·log10(c²)` and powers in dB.
    pub fn from_db(c_sr_db: f64, c_rd_db: f64, c_sd_db: f64, p_s_db: f64, p_r_db: f64) -> Result<Self> {
        Self::new(db_to_gain(c_sr_db), db_to_gain(c_rd_db), db_to_gain(c_sd_db), db_to_power(p_s_db), db_to_power(p_r_db))
    }

    /// Large-scale gains from distances, `c = d^{-τ}`.
    pub fn from_distances(d_sr: f64, d_rd: f64, d_sd: f64, tau: f64, p_s: f64, p_r: f64) -> Result<Self> {
        if !(d_sr > 0.0 && d_rd > 0.0 && d_sd > 0.0) {
            return arg_err("distances must be positive");
        }
        let mut link = Self::new(d_sr.powf(-tau), d_rd.powf(-tau), d_sd.powf(-tau), p_s, p_r)?;
        link.tau = Some(tau);
        Ok(link)
    }

    pub fn with_fading(mut self, h: FadingCoeffs) -> Self {
        self.fading = Some(h);
        self
    }

    pub fn with_noise(mut self, var_r: f64, var_d: f64) -> Self {
        self.noise_var_r = var_r;
        self.noise_var_d = var_d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c_sr", self.c_sr), ("c_rd", self.c_rd), ("c_sd", self.c_sd)] {
            if !(v >= 0.0) || !v.is_finite() {
                return config_err(name, format!("link gain must be finite and non-negative, got {v}"));
            }
        }
        for (name, v) in [("p_s", self.p_s), ("p_r", self.p_r)] {
            if !(v > 0.0) || !v.is_finite() {
                return config_err(name, format!("power must be finite and positive, got {v}"));
            }
        }
        for (name, v) in [("noise_var_r", self.noise_var_r), ("noise_var_d", self.noise_var_d)] {
            if !(v >= 0.0) || !v.is_finite() {
                return config_err(name, format!("noise variance must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    pub fn side_info(&self) -> SideInfo {
        SideInfo::from_link(self)
    }
}

/// Plain-text form of a link (a `[link]` config section).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub c_sr_db: f64,
    pub c_rd_db: f64,
    #[serde(default)]
    pub c_sd_db: f64,
    pub p_s_db: f64,
    pub p_r_db: f64,
    #[serde(default)]
    pub fading: bool,
    #[serde(default)]
    pub seed: u64,
}

impl LinkConfig {
    pub fn to_link(&self) -> Result<LinkState> {
        LinkState::from_db(self.c_sr_db, self.c_rd_db, self.c_sd_db, self.p_s_db, self.p_r_db)
    }
}

/// Side information fed to the link-adaptation modules: `[c_sr, c_rd, P_s, P_r]` in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideInfo {
    pub u: [f64; 4],
}

impl SideInfo {
    pub fn from_link(link: &LinkState) -> Self {
        let g = |c: f64| if c > 0.0 { gain_to_db(c) } else { -100.0 };
        Self { u: [g(link.c_sr), g(link.c_rd), power_to_db(link.p_s), power_to_db(link.p_r)] }
    }

    pub fn from_slice(u: &[f64]) -> Result<Self> {
        if u.len() != 4 {
            return shape_err(format!("side information must have 4 entries, got {}", u.len()));
        }
        Ok(Self { u: [u[0], u[1], u[2], u[3]] })
    }
}

/// Seeded noise source with independent relay and destination substreams.
#[derive(Debug, Clone)]
pub struct ChannelRng {
    relay: ChaCha8Rng,
    dest: ChaCha8Rng,
}

impl ChannelRng {
    pub fn new(seed: u64) -> Self {
        let mut relay = ChaCha8Rng::seed_from_u64(seed);
        relay.set_stream(1);
        let mut dest = ChaCha8Rng::seed_from_u64(seed);
        dest.set_stream(2);
        Self { relay, dest }
    }

    /// Interleaved CN(0, var) samples for `n` complex symbols at the relay.
    pub fn relay_noise(&mut self, n: usize, var: f64) -> Vec<f64> {
        sample_cn(&mut self.relay, n, var)
    }

    pub fn dest_noise(&mut self, n: usize, var: f64) -> Vec<f64> {
        sample_cn(&mut self.dest, n, var)
    }
}

fn sample_cn(rng: &mut ChaCha8Rng, n: usize, var: f64) -> Vec<f64> {
    let sd = (var / 2.0).sqrt();
    (0..2 * n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        })
        .collect()
}

fn noisy(terms: &[(f64, &ComplexSignal)], noise: &[f64]) -> ComplexSignal {
    let n = terms[0].1.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut re = terms[0].0 * terms[0].1.symbols[i].re;
        let mut im = terms[0].0 * terms[0].1.symbols[i].im;
        for (c, x) in &terms[1..] {
            re += c * x.symbols[i].re;
            im += c * x.symbols[i].im;
        }
        out.push(Complex64::new(re + noise[2 * i], im + noise[2 * i + 1]));
    }
    ComplexSignal::new(out, 0.0)
}

fn same_len(a: &ComplexSignal, b: &ComplexSignal, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return shape_err(format!("{what}: signal lengths differ ({} vs {})", a.len(), b.len()));
    }
    Ok(())
}

/// Relay-receive period: `y_r = c_sr·x1 + n_r`, `y_d1 = c_sd·x1 + n_d`.
pub fn hd_broadcast(x1: &ComplexSignal, link: &LinkState, rng: &mut ChannelRng) -> (ComplexSignal, ComplexSignal) {
    let nr = rng.relay_noise(x1.len(), link.noise_var_r);
    let nd = rng.dest_noise(x1.len(), link.noise_var_d);
    (noisy(&[(link.c_sr, x1)], &nr), noisy(&[(link.c_sd, x1)], &nd))
}

/// Relay-transmit period: `y_d2 = c_sd·x2 + c_rd·x_r + n_d`.
pub fn hd_mac(x2: &ComplexSignal, x_r: &ComplexSignal, link: &LinkState, rng: &mut ChannelRng) -> Result<ComplexSignal> {
    same_len(x2, x_r, "hd_mac")?;
    let nd = rng.dest_noise(x2.len(), link.noise_var_d);
    Ok(noisy(&[(link.c_sd, x2), (link.c_rd, x_r)], &nd))
}

/// One full-duplex block: `y_rb = c_sr·x_sb + n`, `y_db = c_sd·x_sb + c_rd·x_rb + n`.
pub fn fd_step(
    x_sb: &ComplexSignal,
    x_rb: &ComplexSignal,
    link: &LinkState,
    rng: &mut ChannelRng,
) -> Result<(ComplexSignal, ComplexSignal)> {
    same_len(x_sb, x_rb, "fd_step")?;
    let nr = rng.relay_noise(x_sb.len(), link.noise_var_r);
    let nd = rng.dest_noise(x_sb.len(), link.noise_var_d);
    Ok((noisy(&[(link.c_sr, x_sb)], &nr), noisy(&[(link.c_sd, x_sb), (link.c_rd, x_rb)], &nd)))
}

/// Phase precoding `x = (h*/|h|)·x̃`.
pub fn fading_precode(x: &ComplexSignal, h: Complex64) -> Result<ComplexSignal> {
    let mag = h.norm();
    if mag == 0.0 {
        return Err(Error::Degenerate("cannot precode against a zero fading coefficient".into()));
    }
    let w = h.conj() / mag;
    Ok(ComplexSignal::new(x.symbols.iter().map(|z| w * z).collect(), x.power_budget))
}

/// MMSE-style relay equalizer `x̂ = h_eff*/sqrt(|h_eff|² + σ²/P_s)·y`.
pub fn fading_equalize(y: &ComplexSignal, h_eff: Complex64, noise_var: f64, p_s: f64) -> Result<ComplexSignal> {
    let w = mmse_weight(h_eff, noise_var, p_s)?;
    Ok(ComplexSignal::new(y.symbols.iter().map(|z| w * z).collect(), 0.0))
}

pub fn mmse_weight(h_eff: Complex64, noise_var: f64, p_s: f64) -> Result<Complex64> {
    let den = h_eff.norm_sqr() + noise_var / p_s;
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::Degenerate(format!("equalizer denominator is {den}")));
    }
    Ok(h_eff.conj() / den.sqrt())
}

/// Effective S→R coefficient after source precoding.
pub fn effective_sr(link: &LinkState, h: &FadingCoeffs) -> Complex64 {
    h.h_sr * link.c_sr * h.h_sd.conj() / h.h_sd.norm()
}

/// Raw (pre-equalization) outputs of one fading block.
#[derive(Debug, Clone, PartialEq)]
pub struct FadingBlock {
    pub y_r: ComplexSignal,
    pub y_d: ComplexSignal,
}

/// Fading channel for one block: precoded source and relay symbols pass
/// through `h·c` gains plus noise.
pub fn fading_channel(
    x_sb: &ComplexSignal,
    x_rb: &ComplexSignal,
    link: &LinkState,
    rng: &mut ChannelRng,
) -> Result<FadingBlock> {
    same_len(x_sb, x_rb, "fading_channel")?;
    let Some(h) = link.fading else {
        return arg_err("fading round needs fading coefficients on the link");
    };
    let nr = rng.relay_noise(x_sb.len(), link.noise_var_r);
    let nd = rng.dest_noise(x_sb.len(), link.noise_var_d);
    let g_sr = h.h_sr * link.c_sr;
    let g_sd = h.h_sd * link.c_sd;
    let g_rd = h.h_rd * link.c_rd;
    let mut yr = Vec::with_capacity(x_sb.len());
    let mut yd = Vec::with_capacity(x_sb.len());
    for i in 0..x_sb.len() {
        let s = x_sb.symbols[i];
        let r = x_rb.symbols[i];
        yr.push(complex_mul(g_sr, s) + Complex64::new(nr[2 * i], nr[2 * i + 1]));
        yd.push(complex_mul(g_sd, s) + complex_mul(g_rd, r) + Complex64::new(nd[2 * i], nd[2 * i + 1]));
    }
    Ok(FadingBlock { y_r: ComplexSignal::new(yr, 0.0), y_d: ComplexSignal::new(yd, 0.0) })
}

// Written out so that a real unit coefficient reproduces `c·x` bit-for-bit.
fn complex_mul(g: Complex64, x: Complex64) -> Complex64 {
    if g.im == 0.0 {
        Complex64::new(g.re * x.re, g.re * x.im)
    } else {
        g * x
    }
}

/// Full fading round: precode both transmitters, pass the channel, and
/// equalize at the relay. Returns `(x̂_sb at relay, y_db at destination)`.
pub fn fd_fading_round(
    x_tilde_sb: &ComplexSignal,
    x_tilde_rb: &ComplexSignal,
    link: &LinkState,
    rng: &mut ChannelRng,
) -> Result<(ComplexSignal, ComplexSignal)> {
    let Some(h) = link.fading else {
        return arg_err("fd_fading_round needs fading coefficients on the link");
    };
    let x_s = fading_precode(x_tilde_sb, h.h_sd)?;
    let x_r = fading_precode(x_tilde_rb, h.h_rd)?;
    let out = fading_channel(&x_s, &x_r, link, rng)?;
    let x_hat = fading_equalize(&out.y_r, effective_sr(link, &h), link.noise_var_r, link.p_s)?;
    Ok((x_hat, out.y_d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_signal(n: usize, seed: u64) -> ComplexSignal {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                Complex64::new(a, b) * std::f64::consts::FRAC_1_SQRT_2
            })
            .collect();
        ComplexSignal::new(s, 1.0)
    }

    fn unit_link() -> LinkState {
        LinkState::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap()
    }

    fn mean_power(s: &ComplexSignal) -> f64 {
        s.energy() / s.len() as f64
    }

    fn corr(a: &ComplexSignal, b: &ComplexSignal) -> f64 {
        let num: Complex64 = a.symbols.iter().zip(&b.symbols).map(|(x, y)| x.conj() * y).sum();
        num.norm() / (a.energy() * b.energy()).sqrt()
    }

    #[test]
    fn db_conversions() {
        assert!((db_to_gain(20.0) - 10.0).abs() < 1e-12);
        assert!((db_to_power(3.0) - 1.9952623149688795).abs() < 1e-12);
        assert!((gain_to_db(db_to_gain(10.0 / 3.0)) - 10.0 / 3.0).abs() < 1e-12);
        let u = LinkState::from_db(10.0, 0.0, 0.0, 3.0, 3.0).unwrap().side_info();
        assert!((u.u[0] - 10.0).abs() < 1e-12 && (u.u[2] - 3.0).abs() < 1e-12);
        assert!(SideInfo::from_slice(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn link_validation() {
        assert!(LinkState::new(-1.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(LinkState::new(1.0, 1.0, 1.0, 0.0, 1.0).is_err());
        let l = LinkState::from_distances(2.0, 2.0, 4.0, 1.5, 1.0, 1.0).unwrap();
        assert!((l.c_sd - 4f64.powf(-1.5)).abs() < 1e-15);
    }

    #[test]
    fn hd_broadcast_noiseless_and_noise_law() {
        let link = LinkState::new(2.0, 1.0, 1.0, 1.0, 1.0).unwrap().with_noise(0.0, 0.0);
        let x = random_signal(64, 1);
        let (yr, _) = hd_broadcast(&x, &link, &mut ChannelRng::new(0));
        for (a, b) in yr.symbols.iter().zip(&x.symbols) {
            assert_eq!(*a, b * 2.0);
        }

        let zero = ComplexSignal::zeros(100_000);
        let (yr, yd) = hd_broadcast(&zero, &unit_link(), &mut ChannelRng::new(3));
        assert!((mean_power(&yr) - 1.0).abs() < 0.02);
        assert!((mean_power(&yd) - 1.0).abs() < 0.02);
        assert!(corr(&yr, &yd) < 0.01);

        let mut link = unit_link();
        link.c_sr = 0.0;
        let x = random_signal(100_000, 4);
        let (yr, _) = hd_broadcast(&x, &link, &mut ChannelRng::new(5));
        assert!(corr(&yr, &x) < 0.01);
    }

    #[test]
    fn hd_mac_examples() {
        let link = unit_link().with_noise(1.0, 0.0);
        let x2 = random_signal(32, 1);
        let neg = ComplexSignal::new(x2.symbols.iter().map(|z| -z).collect(), 1.0);
        let y = hd_mac(&x2, &neg, &link, &mut ChannelRng::new(0)).unwrap();
        assert!(y.symbols.iter().all(|z| z.norm() == 0.0));

        let y = hd_mac(&x2, &ComplexSignal::zeros(32), &link, &mut ChannelRng::new(0)).unwrap();
        assert_eq!(y.symbols, x2.symbols);

        let a = random_signal(100_000, 7);
        let b = random_signal(100_000, 8);
        let y = hd_mac(&a, &b, &unit_link(), &mut ChannelRng::new(9)).unwrap();
        assert!((mean_power(&y) - 3.0).abs() < 0.06);

        assert!(hd_mac(&a, &ComplexSignal::zeros(3), &link, &mut ChannelRng::new(0)).is_err());
    }

    #[test]
    fn fd_step_examples() {
        let link = unit_link().with_noise(0.0, 0.0);
        let xs = random_signal(16, 1);
        let xr = random_signal(16, 2);
        let (_, yd) = fd_step(&xs, &xr, &link, &mut ChannelRng::new(0)).unwrap();
        for i in 0..16 {
            assert_eq!(yd.symbols[i], xs.symbols[i] + xr.symbols[i]);
        }

        // silent relay: destination sees only the direct link plus noise
        let noisy_link = unit_link();
        let (_, yd) = fd_step(&xs, &ComplexSignal::zeros(16), &noisy_link, &mut ChannelRng::new(1)).unwrap();
        let mut rng = ChannelRng::new(1);
        let _ = rng.relay_noise(16, 1.0);
        let nd = rng.dest_noise(16, 1.0);
        for i in 0..16 {
            assert_eq!(yd.symbols[i], xs.symbols[i] + Complex64::new(nd[2 * i], nd[2 * i + 1]));
        }

        let mut rng = ChannelRng::new(2);
        let mut total = 0;
        for b in 0..6 {
            let (_, yd) = fd_step(&random_signal(128, b), &random_signal(128, 10 + b), &noisy_link, &mut rng).unwrap();
            total += yd.len();
        }
        assert_eq!(total, 768);
    }

    #[test]
    fn channel_is_linear_under_frozen_noise() {
        let link = LinkState::new(0.7, 1.3, 0.4, 1.0, 1.0).unwrap();
        let (x1, x2) = (random_signal(50, 1), random_signal(50, 2));
        let (r1, r2) = (random_signal(50, 3), random_signal(50, 4));
        let (a, b) = (0.6, -1.7);
        let combo = |u: &ComplexSignal, v: &ComplexSignal| {
            ComplexSignal::new(u.symbols.iter().zip(&v.symbols).map(|(p, q)| p * a + q * b).collect(), 1.0)
        };
        let zero_noise = link.with_noise(0.0, 0.0);
        let run = |xs: &ComplexSignal, xr: &ComplexSignal, l: &LinkState| fd_step(xs, xr, l, &mut ChannelRng::new(11)).unwrap();
        // With frozen noise n, out(ax1+bx2) − n = a(out(x1) − n) + b(out(x2) − n).
        let (yr_c, yd_c) = run(&combo(&x1, &x2), &combo(&r1, &r2), &link);
        let (yr_1, yd_1) = run(&x1, &r1, &zero_noise);
        let (yr_2, yd_2) = run(&x2, &r2, &zero_noise);
        let (nr, nd) = run(&ComplexSignal::zeros(50), &ComplexSignal::zeros(50), &link);
        for i in 0..50 {
            let er = yr_c.symbols[i] - (yr_1.symbols[i] * a + yr_2.symbols[i] * b + nr.symbols[i]);
            let ed = yd_c.symbols[i] - (yd_1.symbols[i] * a + yd_2.symbols[i] * b + nd.symbols[i]);
            assert!(er.norm() < 1e-12 && ed.norm() < 1e-12);
        }
    }

    #[test]
    fn precode_examples() {
        let x = random_signal(20, 1);
        let i = Complex64::new(0.0, 1.0);
        let y = fading_precode(&x, i).unwrap();
        for (a, b) in y.symbols.iter().zip(&x.symbols) {
            assert!((a - b * (-i)).norm() < 1e-15);
            assert!((a.norm() - b.norm()).abs() < 1e-15);
        }
        assert_eq!(fading_precode(&x, Complex64::new(2.5, 0.0)).unwrap().symbols, x.symbols);
        let y = fading_precode(&x, Complex64::new(-1.0, 0.0)).unwrap();
        for (a, b) in y.symbols.iter().zip(&x.symbols) {
            assert!((a + b).norm() < 1e-15);
        }
        assert!(fading_precode(&x, Complex64::new(0.0, 0.0)).is_err());
    }

    #[test]
    fn equalize_examples() {
        let y = random_signal(20, 1);
        let one = Complex64::new(1.0, 0.0);
        let out = fading_equalize(&y, one, 0.0, 1.0).unwrap();
        assert_eq!(out.symbols, y.symbols);
        let out = fading_equalize(&y, one, 1.0, 1.0).unwrap();
        for (a, b) in out.symbols.iter().zip(&y.symbols) {
            assert!((a - b / 2f64.sqrt()).norm() < 1e-15);
        }
        let h = Complex64::from_polar(1.0, 0.83);
        let x = random_signal(20, 2);
        let yy = ComplexSignal::new(x.symbols.iter().map(|z| h * z).collect(), 0.0);
        let out = fading_equalize(&yy, h, 0.5, 2.0).unwrap();
        for (a, b) in out.symbols.iter().zip(&x.symbols) {
            let ratio = a / b;
            assert!(ratio.im.abs() < 1e-12 && ratio.re > 0.0);
        }
        assert!(fading_equalize(&y, Complex64::new(0.0, 0.0), 0.0, 1.0).is_err());
    }

    #[test]
    fn fading_reduces_to_static_and_removes_phase() {
        let link = LinkState::new(0.8, 1.2, 0.5, 1.0, 1.5).unwrap();
        let xs = random_signal(40, 1);
        let xr = random_signal(40, 2);
        let faded = link.with_fading(FadingCoeffs::unit());
        let (yr_s, yd_s) = fd_step(&xs, &xr, &link, &mut ChannelRng::new(5)).unwrap();
        let raw = fading_channel(
            &fading_precode(&xs, Complex64::new(1.0, 0.0)).unwrap(),
            &fading_precode(&xr, Complex64::new(1.0, 0.0)).unwrap(),
            &faded,
            &mut ChannelRng::new(5),
        )
        .unwrap();
        assert_eq!(raw.y_r, yr_s);
        assert_eq!(raw.y_d, yd_s);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let h = FadingCoeffs::sample(&mut rng);
            let l = link.with_fading(h).with_noise(0.0, 0.0);
            let (_, yd) = fd_fading_round(&xs, &xr, &l, &mut ChannelRng::new(rng.random())).unwrap();
            let a = h.h_sd.norm() * l.c_sd;
            let b = h.h_rd.norm() * l.c_rd;
            for i in 0..40 {
                assert!((yd.symbols[i] - (xs.symbols[i] * a + xr.symbols[i] * b)).norm() < 1e-6);
            }
        }

        let i = Complex64::new(0.0, 1.0);
        let lp = link.with_noise(0.0, 0.0).with_fading(FadingCoeffs { h_sr: i, h_rd: i, h_sd: i });
        let lu = link.with_noise(0.0, 0.0).with_fading(FadingCoeffs::unit());
        let (_, a) = fd_fading_round(&xs, &xr, &lp, &mut ChannelRng::new(1)).unwrap();
        let (_, b) = fd_fading_round(&xs, &xr, &lu, &mut ChannelRng::new(1)).unwrap();
        for (p, q) in a.symbols.iter().zip(&b.symbols) {
            assert!((p - q).norm() < 1e-12);
        }

        assert!(fd_fading_round(&xs, &xr, &link, &mut ChannelRng::new(0)).is_err());
    }
}
