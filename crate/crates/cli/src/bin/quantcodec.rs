//! Uniform bit-depth image codec: keeps the top `Q` bits of every 8-bit RGB
//! sample. Lossless at `Q = 8`; the file size grows strictly with `Q`.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

const MAGIC: &[u8; 4] = b"QC1\0";
const HEADER: usize = 4 + 4 + 4 + 1;

#[derive(Parser)]
#[command(name = "quantcodec", version, about = "Bit-depth quantizing image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a PNG keeping `q` bits per sample.
    Enc {
        #[arg(value_parser = clap::value_parser!(u8).range(1..=8))]
        q: u8,
        input: PathBuf,
        output: PathBuf,
    },
    /// Decode to PNG.
    Dec { input: PathBuf, output: PathBuf },
}

fn encode(q: u8, samples: &[u8]) -> Vec<u8> {
    let shift = 8 - q as u32;
    let mut out = Vec::with_capacity((samples.len() * q as usize).div_ceil(8));
    let (mut acc, mut filled) = (0u32, 0u32);
    for &s in samples {
        acc = (acc << q) | (s as u32 >> shift);
        filled += q as u32;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    out
}

fn decode(q: u8, bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    if bytes.len() != (count * q as usize).div_ceil(8) {
        bail!("payload holds {} bytes, expected {}", bytes.len(), (count * q as usize).div_ceil(8));
    }
    let shift = 8 - q as u32;
    // reconstruct at the centre of each quantization cell
    let half = if q == 8 { 0 } else { 1u32 << (shift - 1) };
    let mut out = Vec::with_capacity(count);
    let (mut acc, mut filled) = (0u32, 0u32);
    let mut it = bytes.iter();
    while out.len() < count {
        while filled < q as u32 {
            acc = (acc << 8) | *it.next().context("truncated payload")? as u32;
            filled += 8;
        }
        filled -= q as u32;
        let code = (acc >> filled) & ((1 << q) - 1);
        acc &= (1 << filled) - 1;
        out.push(((code << shift) | half) as u8);
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Enc { q, input, output } => {
            let img = image::open(&input).with_context(|| format!("reading {}", input.display()))?.to_rgb8();
            let (w, h) = img.dimensions();
            let mut file = Vec::with_capacity(HEADER);
            file.extend_from_slice(MAGIC);
            file.extend_from_slice(&w.to_le_bytes());
            file.extend_from_slice(&h.to_le_bytes());
            file.push(q);
            file.extend(encode(q, img.as_raw()));
            fs::write(&output, file).with_context(|| format!("writing {}", output.display()))?;
        }
        Command::Dec { input, output } => {
            let file = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            if file.len() < HEADER || &file[..4] != MAGIC {
                bail!("{} is not a quantcodec file", input.display());
            }
            let w = u32::from_le_bytes(file[4..8].try_into()?);
            let h = u32::from_le_bytes(file[8..12].try_into()?);
            let q = file[12];
            if !(1..=8).contains(&q) {
                bail!("invalid bit depth {q}");
            }
            let samples = decode(q, &file[HEADER..], w as usize * h as usize * 3)?;
            let img = image::RgbImage::from_raw(w, h, samples).context("sample count mismatch")?;
            img.save(&output).with_context(|| format!("writing {}", output.display()))?;
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_keeps_top_bits() {
        let s: Vec<u8> = (0..=255).collect();
        for q in 1..=8u8 {
            let back = decode(q, &encode(q, &s), s.len()).unwrap();
            let mask = !((1u16 << (8 - q)) - 1) as u8;
            assert!(s.iter().zip(&back).all(|(a, b)| a & mask == b & mask), "q = {q}");
        }
        assert_eq!(decode(8, &encode(8, &s), 256).unwrap(), s);
        assert_eq!(encode(3, &[0xff; 3]), vec![0xff, 0x80]);
    }
}
