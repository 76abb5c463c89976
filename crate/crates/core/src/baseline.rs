//! Separation-based digital baseline: an external image compressor driven at
//! the bit budget allowed by an achievable channel rate.

use std::io::ErrorKind;
use std::path::Path;
use std::process::Command;
use std::fs;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::evaluation::{mean_ci95, ImageRecord};
use crate::rates::bit_budget;
use crate::signal::{psnr_image, ssim_image, ImageBatch};

/// Encoder/decoder command templates. `{input}`, `{output}` and `{quality}`
/// are substituted in each whitespace-separated argument.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressorSpec {
    pub encode: String,
    pub decode: String,
    /// Quality value giving the smallest files.
    pub quality_low: i64,
    /// Quality value giving the largest (best) files.
    pub quality_high: i64,
    /// Extension of the compressed file.
    pub extension: String,
}

impl Default for CompressorSpec {
    fn default() -> Self {
        Self::bpg()
    }
}

impl CompressorSpec {
    /// `bpgenc`/`bpgdec`; BPG's quantizer runs from 51 (coarsest) to 0.
    pub fn bpg() -> Self {
        Self {
            encode: "bpgenc -q {quality} -o {output} {input}".into(),
            decode: "bpgdec -o {output} {input}".into(),
            quality_low: 51,
            quality_high: 0,
            extension: "bpg".into(),
        }
    }

    fn program(template: &str) -> &str {
        template.split_whitespace().next().unwrap_or("")
    }

    /// Errors with a remediation hint when either program cannot be run.
    pub fn check_available(&self) -> Result<()> {
        for t in [&self.encode, &self.decode] {
            let prog = Self::program(t);
            if prog.is_empty() {
                return arg_err("empty compressor command template");
            }
            if !program_exists(prog) {
                return Err(Error::CompressorMissing(format!(
                    "`{prog}` was not found; install it (for BPG: libbpg's bpgenc/bpgdec) or pass other encode/decode templates"
                )));
            }
        }
        Ok(())
    }

    fn qualities(&self) -> Vec<i64> {
        let (lo, hi) = (self.quality_low, self.quality_high);
        if lo <= hi {
            (lo..=hi).collect()
        } else {
            (hi..=lo).rev().collect()
        }
    }
}

fn program_exists(prog: &str) -> bool {
    let p = Path::new(prog);
    if p.components().count() > 1 {
        return p.is_file();
    }
    std::env::var_os("PATH").is_some_and(|paths| std::env::split_paths(&paths).any(|d| d.join(prog).is_file()))
}

fn run(template: &str, input: &Path, output: &Path, quality: Option<i64>) -> Result<()> {
    let q = quality.map(|q| q.to_string()).unwrap_or_default();
    let args: Vec<String> = template
        .split_whitespace()
        .map(|a| a.replace("{input}", &input.to_string_lossy()).replace("{output}", &output.to_string_lossy()).replace("{quality}", &q))
        .collect();
    let (prog, rest) = args.split_first().ok_or_else(|| Error::InvalidArgument("empty compressor command".into()))?;
    let out = Command::new(prog).args(rest).output().map_err(|e| match e.kind() {
        ErrorKind::NotFound => Error::CompressorMissing(format!("`{prog}` was not found on PATH")),
        _ => Error::CompressorFailed(format!("{prog}: {e}")),
    })?;
    if !out.status.success() {
        return Err(Error::CompressorFailed(format!("{prog} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim())));
    }
    Ok(())
}

/// Writes one image (`C×H×W` in `[0,1]`, one or three channels) as 8-bit PNG.
pub fn write_png(path: &Path, pixels: &[f64], shape: (usize, usize, usize)) -> Result<()> {
    let (c, h, w) = shape;
    if c != 1 && c != 3 {
        return arg_err(format!("PNG export supports 1 or 3 channels, got {c}"));
    }
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                buf.push(q(pixels[(ch % c) * h * w + y * w + x]));
            }
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

pub fn read_png(path: &Path, shape: (usize, usize, usize)) -> Result<Vec<f64>> {
    let (c, h, w) = shape;
    let img = image::open(path)?.to_rgb8();
    if img.dimensions() != (w as u32, h as u32) {
        return Err(Error::CompressorFailed(format!("decoded image is {:?}, expected {w}×{h}", img.dimensions())));
    }
    let mut out = vec![0.0; c * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..c {
            out[ch * h * w + y as usize * w + x as usize] = p[ch] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Outcome of fitting one image into a bit budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub quality: i64,
    pub bits: u64,
    /// Even the coarsest setting exceeded the budget.
    pub floored: bool,
}

/// Binary search over the quality range for the best setting whose output
/// fits in `budget_bits`, assuming file size grows with quality.
pub fn fit_to_budget(spec: &CompressorSpec, input: &Path, work: &Path, budget_bits: u64) -> Result<Fit> {
    let qs = spec.qualities();
    let size_at = |q: i64| -> Result<u64> {
        let out = work.join(format!("q{q}.{}", spec.extension));
        run(&spec.encode, input, &out, Some(q))?;
        Ok(fs::metadata(&out)?.len() * 8)
    };
    let floor_bits = size_at(qs[0])?;
    if floor_bits > budget_bits {
        return Ok(Fit { quality: qs[0], bits: floor_bits, floored: true });
    }
    // invariant: qs[lo] fits; qs[hi] does not (or hi == len)
    let (mut lo, mut hi) = (0usize, qs.len());
    let mut best_bits = floor_bits;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let bits = size_at(qs[mid])?;
        if bits <= budget_bits {
            lo = mid;
            best_bits = bits;
        } else {
            hi = mid;
        }
    }
    Ok(Fit { quality: qs[lo], bits: best_bits, floored: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRecord {
    pub metrics: ImageRecord,
    pub fit: Fit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub budget_bits: u64,
    pub psnr_mean: f64,
    pub psnr_ci95: f64,
    pub ssim_mean: f64,
    pub ssim_ci95: f64,
    pub floored: usize,
    pub records: Vec<BaselineRecord>,
}

/// Compresses every image at the budget `⌊2·M·ρ·r_star⌋`, decodes it and
/// scores the result; images that cannot fit are scored at the coarsest
/// setting and flagged.
pub fn digital_baseline_eval(data: &ImageBatch, rho: f64, r_star: f64, spec: &CompressorSpec) -> Result<BaselineReport> {
    spec.check_available()?;
    let budget = bit_budget(data.pixels_per_image(), rho, r_star);
    let shape = (data.c, data.h, data.w);
    let dir = tempfile::Builder::new().prefix("relay-jscc-baseline").tempdir()?;
    let mut records = Vec::with_capacity(data.n);
    for i in 0..data.n {
        let work = dir.path().join(i.to_string());
        fs::create_dir_all(&work)?;
        let src = work.join("source.png");
        write_png(&src, data.image(i), shape)?;
        let fit = fit_to_budget(spec, &src, &work, budget)?;
        let enc = work.join(format!("final.{}", spec.extension));
        run(&spec.encode, &src, &enc, Some(fit.quality))?;
        let dec = work.join("decoded.png");
        run(&spec.decode, &enc, &dec, None)?;
        // compare against the 8-bit source the compressor actually saw
        let reference = read_png(&src, shape)?;
        let recon = read_png(&dec, shape)?;
        let p = psnr_image(&reference, &recon);
        let metrics = ImageRecord { index: i, psnr: p.value, ssim: ssim_image(&reference, &recon), capped: p.flagged };
        records.push(BaselineRecord { metrics, fit });
    }
    let p: Vec<f64> = records.iter().map(|r| r.metrics.psnr).collect();
    let s: Vec<f64> = records.iter().map(|r| r.metrics.ssim).collect();
    let (psnr_mean, psnr_ci95) = mean_ci95(&p);
    let (ssim_mean, ssim_ci95) = mean_ci95(&s);
    let floored = records.iter().filter(|r| r.fit.floored).count();
    Ok(BaselineReport { budget_bits: budget, psnr_mean, psnr_ci95, ssim_mean, ssim_ci95, floored, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_compressor_names_the_program() {
        let spec = CompressorSpec { encode: "definitely-not-installed-enc {input}".into(), ..CompressorSpec::bpg() };
        let e = spec.check_available().unwrap_err();
        assert!(matches!(e, Error::CompressorMissing(ref m) if m.contains("definitely-not-installed-enc")));
    }

    #[test]
    fn quality_order_runs_from_coarse_to_fine() {
        assert_eq!(CompressorSpec::bpg().qualities()[..3], [51, 50, 49]);
        let s = CompressorSpec { quality_low: 1, quality_high: 4, ..CompressorSpec::bpg() };
        assert_eq!(s.qualities(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn png_roundtrip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let px: Vec<f64> = (0..3 * 4 * 4).map(|i| (i * 5 % 256) as f64 / 255.0).collect();
        let p = dir.path().join("a.png");
        write_png(&p, &px, (3, 4, 4)).unwrap();
        assert_eq!(read_png(&p, (3, 4, 4)).unwrap(), px);
    }
}
