use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use relay_jscc::baseline::{digital_baseline_eval, CompressorSpec};
use relay_jscc::checkpoint::METRICS;
use relay_jscc::codec::Model;
use relay_jscc::config::{fresh_dir, fresh_run_dir, ExperimentConfig, LinkGrid};
use relay_jscc::data::{DatasetSpec, DATA_ROOT_ENV};
use relay_jscc::evaluation::{
    check_matches, evaluate_grid, load_run, sweep_alpha, sweep_blocks, sweep_memory, timing_report, write_reports,
    EvalOptions, EvalReport, RunCache, SweepTable,
};
use relay_jscc::plot;
use relay_jscc::rates::{optimize_hd_rate, rate_fd, rates_csv, GridSpec, RateRow, RelayPower};
use relay_jscc::training::{train_experiment, EpochRecord};

#[derive(Parser)]
#[command(name = "relay-jscc", version, about = "Relay-assisted deep joint source-channel coding experiments")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the experiment described by a config file into a fresh run directory.
    Train(TrainArgs),
    /// Evaluate a trained run over a grid of link conditions.
    Eval(EvalArgs),
    /// Achievable-rate tables for the digital baseline.
    Rates(RatesArgs),
    /// Train and evaluate one half-duplex PF model per split α.
    SweepAlpha(SweepAlphaArgs),
    /// Train and evaluate one full-duplex PF model per block count B.
    SweepB(SweepBArgs),
    /// Train and evaluate full-duplex PF models with truncated relay memory.
    SweepMemory(SweepMemoryArgs),
    /// Per-stage wall-clock timing.
    Timing(TimingArgs),
    /// Draw an SVG from a reports.json, sweep.json or metrics.csv file.
    Plot(PlotArgs),
}

#[derive(Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_init: Option<f64>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    c_sr_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    c_rd_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    c_sd_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    p_s_db: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    p_r_db: Option<f64>,
    /// Train over block-fading channels.
    #[arg(long)]
    fading: bool,
    /// CIFAR-10 root; also read from the environment.
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = &self.name {
            cfg.name = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.max_epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr_init {
            cfg.train.lr_init = v;
        }
        if let Some(v) = self.steps_per_epoch {
            cfg.train.steps_per_epoch = Some(v);
        }
        let l = &mut cfg.link;
        for (dst, src) in [
            (&mut l.c_sr_db, self.c_sr_db),
            (&mut l.c_rd_db, self.c_rd_db),
            (&mut l.c_sd_db, self.c_sd_db),
            (&mut l.p_s_db, self.p_s_db),
            (&mut l.p_r_db, self.p_r_db),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        if self.fading {
            cfg.link.fading = true;
        }
        if let (Some(r), DatasetSpec::Cifar10 { root, .. }) = (&self.data_root, &mut cfg.dataset) {
            if root.is_none() {
                *root = Some(r.clone());
            }
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

/// Parses `1.5`, `-2` or a fraction such as `10/3`.
fn parse_db(s: &str) -> std::result::Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().map_err(|e| format!("{s}: {e}"))?, b.trim().parse().map_err(|e| format!("{s}: {e}"))?);
            a / b
        }
        None => s.parse().map_err(|e| format!("{s}: {e}"))?,
    };
    if !v.is_finite() {
        return Err(format!("{s} is not a finite number"));
    }
    Ok(v)
}

#[derive(Args, Clone, Default)]
struct GridArgs {
    /// The 4×4 grid {0, 10/3, 20/3, 10} dB for both links.
    #[arg(long)]
    standard_grid: bool,
    /// Comma-separated S-R gains in dB.
    #[arg(long, value_delimiter = ',', value_parser = parse_db, allow_hyphen_values = true)]
    c_sr_db: Vec<f64>,
    /// Comma-separated R-D gains in dB.
    #[arg(long, value_delimiter = ',', value_parser = parse_db, allow_hyphen_values = true)]
    c_rd_db: Vec<f64>,
    #[arg(long, value_parser = parse_db, allow_hyphen_values = true)]
    c_sd_db: Option<f64>,
    #[arg(long, value_parser = parse_db, allow_hyphen_values = true)]
    p_s_db: Option<f64>,
    #[arg(long, value_parser = parse_db, allow_hyphen_values = true)]
    p_r_db: Option<f64>,
    /// Evaluate over block-fading channels.
    #[arg(long)]
    fading: bool,
}

impl GridArgs {
    /// Grid from flags layered over `base`.
    fn build(&self, base: LinkGrid) -> Result<LinkGrid> {
        let mut g = if self.standard_grid { LinkGrid { c_sd_db: base.c_sd_db, fading: base.fading, ..LinkGrid::standard(base.p_s_db) } } else { base };
        if self.standard_grid {
            g.p_r_db = g.p_s_db;
        }
        if !self.c_sr_db.is_empty() {
            g.c_sr_db = self.c_sr_db.clone();
        }
        if !self.c_rd_db.is_empty() {
            g.c_rd_db = self.c_rd_db.clone();
        }
        if let Some(v) = self.c_sd_db {
            g.c_sd_db = v;
        }
        if let Some(v) = self.p_s_db {
            g.p_s_db = v;
        }
        if let Some(v) = self.p_r_db {
            g.p_r_db = v;
        }
        g.fading |= self.fading;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Config to evaluate against; defaults to the run's own config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    grid: GridArgs,
    /// Output directory; defaults to a fresh sibling of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate only the first N test images.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Channel-noise seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Duplex {
    Hd,
    Fd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RelayPowerArg {
    /// `P_r/(1−α)` per symbol in the relay's transmit period.
    Concentrated,
    /// `P_r` per symbol.
    Average,
}

#[derive(Args)]
struct RatesArgs {
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long, value_enum, default_value = "hd")]
    duplex: Duplex,
    /// Fine grid step.
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    /// Search the fine grid exhaustively instead of coarse-to-fine.
    #[arg(long)]
    exhaustive: bool,
    #[arg(long, value_enum, default_value = "concentrated")]
    relay_power: RelayPowerArg,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also draw R* against c_rd.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Run the compressor baseline at every R* on this experiment's test images.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Number of test images for the baseline.
    #[arg(long, default_value_t = 20)]
    images: usize,
    /// Encoder template with {input}, {output} and {quality}.
    #[arg(long)]
    encode: Option<String>,
    /// Decoder template with {input} and {output}.
    #[arg(long)]
    decode: Option<String>,
    #[arg(long)]
    quality_low: Option<i64>,
    #[arg(long)]
    quality_high: Option<i64>,
    #[arg(long)]
    extension: Option<String>,
}

#[derive(Args)]
struct SweepCommon {
    #[arg(long, short)]
    config: PathBuf,
    /// Checkpoint cache; defaults to `<output_dir>/cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepAlphaArgs {
    #[command(flatten)]
    common: SweepCommon,
    #[arg(long, value_delimiter = ',', value_parser = parse_db, default_value = "1/6,1/3,1/2,2/3,5/6")]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct SweepBArgs {
    #[command(flatten)]
    common: SweepCommon,
    #[arg(long, value_delimiter = ',', default_value = "2,3,6")]
    blocks: Vec<usize>,
}

#[derive(Args)]
struct SweepMemoryArgs {
    #[command(flatten)]
    common: SweepCommon,
    #[arg(long)]
    blocks: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    memories: Vec<usize>,
}

#[derive(Args)]
struct TimingArgs {
    #[arg(long, short)]
    config: PathBuf,
    /// Time a trained run instead of a fresh model.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Number of test images timed per pass.
    #[arg(long, default_value_t = 64)]
    images: usize,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    input: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    title: Option<String>,
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    // resolve the dataset before anything is written
    let data = cfg.dataset.load()?;
    let dir = fresh_run_dir(&cfg.output_dir, &cfg)?;
    log::info!("training {} into {}", cfg.protocol.mode.name(), dir.display());
    let (_, report) = train_experiment(&cfg, &data, Some(&dir))?;
    plot::training_curves(&dir.join("training.svg"), &cfg.label(), &report.history)?;
    log::info!("best validation loss {:.6} at epoch {}", report.best_val_loss, report.best_epoch);
    println!("{}", dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (ckpt, run_cfg) = load_run(&a.run).with_context(|| format!("loading run {}", a.run.display()))?;
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => run_cfg.with_context(|| format!("{} has no config.toml; pass --config", a.run.display()))?,
    };
    Overrides { data_root: a.data_root.clone(), ..Default::default() }.apply(&mut cfg);
    check_matches(&cfg, &ckpt)?;
    let base = cfg.eval.grid.clone().unwrap_or_else(|| LinkGrid::single(cfg.link));
    let grid = a.grid.build(base)?;
    let mut test = cfg.dataset.load()?.test;
    if let Some(n) = a.limit {
        test = test.range(0, n.min(test.n));
    }
    let opts = EvalOptions {
        batch_size: a.batch_size.unwrap_or(cfg.eval.batch_size),
        seed: a.seed.unwrap_or(cfg.eval.seed),
        ..Default::default()
    };
    let reports = evaluate_grid(&ckpt, &test, &grid, &opts)?;
    let out = match a.out {
        Some(p) => {
            if p.exists() && fs::read_dir(&p)?.next().is_some() {
                bail!("output directory {} is not empty", p.display());
            }
            p
        }
        None => {
            let run = a.run.canonicalize()?;
            let stem = run.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            fresh_dir(run.parent().unwrap_or(Path::new(".")), &format!("{stem}-eval"))?
        }
    };
    write_reports(&out, "reports", &reports)?;
    plot::psnr_grid(&out.join("psnr.svg"), &format!("{} PSNR", cfg.protocol.mode.name()), &reports)?;
    for r in &reports {
        log::info!("c_sr {:.2} c_rd {:.2}: {:.3} ± {:.3} dB", r.link.c_sr_db, r.link.c_rd_db, r.psnr_mean, r.psnr_ci95);
    }
    println!("{}", out.display());
    Ok(())
}

fn rates(a: RatesArgs) -> Result<()> {
    let grid = a.grid.build(LinkGrid::standard(0.0))?;
    let mut spec = if a.exhaustive { GridSpec::exhaustive(a.step) } else { GridSpec::with_step(a.step) };
    spec.relay_power = match a.relay_power {
        RelayPowerArg::Concentrated => RelayPower::Concentrated,
        RelayPowerArg::Average => RelayPower::Average,
    };
    spec.validate()?;
    let mut rows = Vec::new();
    for point in grid.points() {
        let link = point.to_link()?;
        let result = match a.duplex {
            Duplex::Hd => optimize_hd_rate(&link, &spec)?,
            Duplex::Fd => rate_fd(&link, &spec)?,
        };
        rows.push(RateRow { link, result });
    }
    let csv = rates_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.plot {
        plot::rates(p, "achievable rate", &rows)?;
    }
    if let Some(cfg_path) = &a.baseline {
        let cfg = ExperimentConfig::load(cfg_path)?;
        let d = CompressorSpec::default();
        let comp = CompressorSpec {
            encode: a.encode.clone().unwrap_or(d.encode),
            decode: a.decode.clone().unwrap_or(d.decode),
            quality_low: a.quality_low.unwrap_or(d.quality_low),
            quality_high: a.quality_high.unwrap_or(d.quality_high),
            extension: a.extension.clone().unwrap_or(d.extension),
        };
        let test = cfg.dataset.load()?.test;
        let images = test.range(0, a.images.min(test.n));
        let rho = cfg.codec.rho();
        let mut out = String::from("c_sr_db,c_rd_db,r_star,budget_bits,psnr_mean,psnr_ci95,ssim_mean,ssim_ci95,floored\n");
        for (point, row) in grid.points().iter().zip(&rows) {
            let b = digital_baseline_eval(&images, rho, row.result.r_star, &comp)?;
            out.push_str(&format!(
                "{:.3},{:.3},{:.6},{},{:.4},{:.4},{:.4},{:.4},{}\n",
                point.c_sr_db, point.c_rd_db, row.result.r_star, b.budget_bits, b.psnr_mean, b.psnr_ci95, b.ssim_mean, b.ssim_ci95, b.floored
            ));
        }
        match &a.out {
            Some(p) => {
                let bp = p.with_file_name(format!("{}-baseline.csv", p.file_stem().unwrap_or_default().to_string_lossy()));
                fs::write(&bp, out)?;
                eprintln!("{}", bp.display());
            }
            None => print!("{out}"),
        }
    }
    Ok(())
}

fn run_sweep(common: &SweepCommon, kind: &str, f: impl FnOnce(&ExperimentConfig, &relay_jscc::data::Datasets, &RunCache, &EvalOptions) -> relay_jscc::error::Result<SweepTable>) -> Result<()> {
    let cfg = load_config(&common.config, &common.overrides)?;
    let data = cfg.dataset.load()?;
    let cache = RunCache::new(common.cache.clone().unwrap_or_else(|| cfg.output_dir.join("cache")));
    let opts = EvalOptions { batch_size: cfg.eval.batch_size, seed: cfg.eval.seed, ..Default::default() };
    let table = f(&cfg, &data, &cache, &opts)?;
    let dir = fresh_dir(&cfg.output_dir, &format!("{kind}-{}", &cfg.hash()[..12]))?;
    fs::write(dir.join("sweep.csv"), table.to_csv())?;
    fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&table)?)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    plot::sweep(&dir.join("sweep.svg"), kind, &table)?;
    if let Some(best) = table.best() {
        log::info!("best {} = {} ({:.3} dB)", table.parameter, best.value, best.report.psnr_mean);
    }
    print!("{}", table.to_csv());
    println!("{}", dir.display());
    Ok(())
}

fn timing(a: TimingArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    Overrides { data_root: a.data_root.clone(), ..Default::default() }.apply(&mut cfg);
    let (model, protocol): (Model, _) = match &a.run {
        Some(dir) => {
            let (ck, _) = load_run(dir)?;
            check_matches(&cfg, &ck)?;
            (ck.model, ck.protocol)
        }
        None => (cfg.build_model()?, cfg.protocol()?),
    };
    let test = cfg.dataset.load()?.test;
    let images = test.range(0, a.images.min(test.n).max(1));
    let r = timing_report(&model, &protocol, &images, &cfg.link, a.reps)?;
    print!("{}", r.to_csv());
    println!("# {}", r.complexity);
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 4 {
            bail!("{}:{}: expected epoch,train_loss,val_loss,lr", path.display(), i + 1);
        }
        out.push(EpochRecord { epoch: f[0].parse()?, train_loss: f[1].parse()?, val_loss: f[2].parse()?, lr: f[3].parse()?, seconds: 0.0 });
    }
    Ok(out)
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let name = a.input.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let title = a.title.clone().unwrap_or_else(|| name.clone());
    if a.input.is_dir() || name == METRICS {
        let path = if a.input.is_dir() { a.input.join(METRICS) } else { a.input.clone() };
        plot::training_curves(&a.out, &title, &read_metrics(&path)?)?;
        return Ok(());
    }
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if let Ok(reports) = serde_json::from_str::<Vec<EvalReport>>(&text) {
        plot::psnr_grid(&a.out, &title, &reports)?;
    } else if let Ok(table) = serde_json::from_str::<SweepTable>(&text) {
        plot::sweep(&a.out, &title, &table)?;
    } else {
        bail!("{} is not a reports.json, sweep.json or metrics.csv file", a.input.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Rates(a) => rates(a),
        Command::SweepAlpha(a) => run_sweep(&a.common, "sweep-alpha", |c, d, k, o| sweep_alpha(c, d, &a.alphas, Some(k), o)),
        Command::SweepB(a) => run_sweep(&a.common, "sweep-b", |c, d, k, o| sweep_blocks(c, d, &a.blocks, Some(k), o)),
        Command::SweepMemory(a) => {
            run_sweep(&a.common, "sweep-memory", |c, d, k, o| sweep_memory(c, d, a.blocks, &a.memories, Some(k), o))
        }
        Command::Timing(a) => timing(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
