use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use relay_jscc::config::ExperimentConfig;
use relay_jscc::data::DatasetSpec;
use relay_jscc::protocols::{Mode, ProtocolSpec};
use relay_jscc::rates::CSV_HEADER;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_relay-jscc"));
    c.env_remove("RELAY_JSCC_DATA").env("RUST_LOG", "warn");
    c
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn last_line(s: &str) -> PathBuf {
    PathBuf::from(s.lines().last().unwrap().trim())
}

fn tiny(spec: ProtocolSpec, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy(spec);
    cfg.output_dir = out.to_path_buf();
    cfg.train.max_epochs = 2;
    cfg.train.steps_per_epoch = Some(3);
    cfg.train.batch_size = 16;
    cfg.dataset = DatasetSpec::Synthetic { train: 96, val: 32, test: 24, seed: 1, shape: (3, 8, 8) };
    cfg
}

fn write_cfg(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

/// File name → contents for every file below `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn train(cfg_path: &Path) -> PathBuf {
    last_line(&ok(bin().args(["train", "--config"]).arg(cfg_path)))
}

#[test]
fn train_writes_a_loadable_reproducible_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(ProtocolSpec::hd(Mode::HdPf, 0.5), &tmp.path().join("runs"));
    let path = write_cfg(tmp.path(), "exp.toml", &cfg);
    let a = train(&path);
    for f in ["manifest.toml", "metrics.csv", "config.toml", "source.json", "relay.json", "decoder.json", "training.svg"] {
        assert!(a.join(f).exists(), "missing {f}");
    }
    let resolved = ExperimentConfig::load(&a.join("config.toml")).unwrap();
    assert_eq!(resolved.hash(), cfg.hash());
    let before = snapshot(&a);
    let b = train(&a.join("config.toml"));
    assert_ne!(a, b);
    assert_eq!(snapshot(&a), before, "rerun touched the first run");
    let metrics = |d: &Path| fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b));
    assert_eq!(fs::read(a.join("relay.json")).unwrap(), fs::read(b.join("relay.json")).unwrap());
    assert!(metrics(&a).starts_with("epoch,train_loss,val_loss,lr\n"));
}

#[test]
fn invalid_config_fails_with_the_field_name() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(ProtocolSpec::new(Mode::Direct), &tmp.path().join("runs"));
    let text = cfg.to_toml().unwrap().replace("lr_decay = 0.9", "lr_decay = 1.5");
    fs::write(tmp.path().join("bad.toml"), text).unwrap();
    let out = run(bin().args(["train", "--config"]).arg(tmp.path().join("bad.toml")));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr_decay"));

    let text = cfg.to_toml().unwrap().replace("[train]\n", "[train]\nlearning_rate = 1.0\n");
    fs::write(tmp.path().join("typo.toml"), text).unwrap();
    let out = run(bin().args(["train", "--config"]).arg(tmp.path().join("typo.toml")));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    cfg.codec.la_enabled = false;
    cfg.train.adaptive = Some(relay_jscc::training::AdaptiveRanges { c_min_db: 0.0, c_max_db: 10.0, p_min_db: 0.0, p_max_db: 5.0 });
    let text = toml::to_string(&cfg).unwrap();
    fs::write(tmp.path().join("la.toml"), text).unwrap();
    let out = run(bin().args(["train", "--config"]).arg(tmp.path().join("la.toml")));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.adaptive"));
    assert!(!tmp.path().join("runs").exists());
}

#[test]
fn missing_dataset_leaves_no_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    let mut cfg = tiny(ProtocolSpec::new(Mode::Direct), &runs);
    cfg.codec = relay_jscc::codec::CodecConfig::for_image((3, 32, 32), 8, 0.25, 32, 4, (1, 1, 1), false).unwrap();
    cfg.dataset = DatasetSpec::Cifar10 { root: Some(tmp.path().join("nowhere")), val: 10, train_limit: Some(10), test_limit: Some(10), seed: 0 };
    let path = write_cfg(tmp.path(), "cifar.toml", &cfg);
    let out = run(bin().args(["train", "--config"]).arg(&path));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    assert!(!runs.exists());

    cfg.dataset = DatasetSpec::Cifar10 { root: None, val: 10, train_limit: Some(10), test_limit: Some(10), seed: 0 };
    let path = write_cfg(tmp.path(), "cifar-env.toml", &cfg);
    let out = run(bin().args(["train", "--config"]).arg(&path));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("RELAY_JSCC_DATA"));
    assert!(!runs.exists());
}

#[test]
fn eval_grids_fading_and_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(ProtocolSpec::hd(Mode::HdPf, 0.5), &tmp.path().join("runs"));
    let run_dir = train(&write_cfg(tmp.path(), "exp.toml", &cfg));
    let before = snapshot(&run_dir);

    let grid = last_line(&ok(bin().args(["eval", "--standard-grid", "--run"]).arg(&run_dir)));
    let csv = fs::read_to_string(grid.join("reports.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
    assert_eq!(fs::read_to_string(grid.join("reports.jsonl")).unwrap().lines().count(), 16 * 24);
    assert!(grid.join("psnr.svg").exists());

    let single = last_line(&ok(bin().args(["eval", "--run"]).arg(&run_dir)));
    let rows: Vec<String> = fs::read_to_string(single.join("reports.csv")).unwrap().lines().map(String::from).collect();
    assert_eq!(rows.len(), 2);
    assert_ne!(single, grid);

    let faded = last_line(&ok(bin().args(["eval", "--fading", "--run"]).arg(&run_dir)));
    let frows: Vec<String> = fs::read_to_string(faded.join("reports.csv")).unwrap().lines().map(String::from).collect();
    let col = |r: &str, i: usize| r.split(',').nth(i).unwrap().to_string();
    assert_eq!(col(&frows[1], 6), "true");
    assert_eq!(col(&rows[1], 6), "false");
    assert_ne!(col(&frows[1], 8), col(&rows[1], 8));

    let mut other = cfg.clone();
    other.codec.la_enabled = true;
    let p = write_cfg(tmp.path(), "la.toml", &other);
    let out = run(bin().args(["eval", "--run"]).arg(&run_dir).arg("--config").arg(&p));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("la_enabled"));

    let mut other = cfg.clone();
    other.protocol = ProtocolSpec::hd(Mode::HdPf, 1.0 / 3.0);
    let p = write_cfg(tmp.path(), "alpha.toml", &other);
    assert!(!run(bin().args(["eval", "--run"]).arg(&run_dir).arg("--config").arg(&p)).status.success());

    assert_eq!(snapshot(&run_dir), before, "eval modified the run directory");

    let plot = tmp.path().join("grid.svg");
    ok(bin().arg("plot").arg(grid.join("reports.json")).arg("--out").arg(&plot));
    assert!(fs::read_to_string(&plot).unwrap().contains("<svg"));
    let curves = tmp.path().join("curves.svg");
    ok(bin().arg("plot").arg(run_dir.join("metrics.csv")).arg("--out").arg(&curves));
    assert!(curves.exists());
}

#[test]
fn rates_schema_no_relay_limit_and_speed() {
    let t0 = Instant::now();
    let csv = ok(bin().args(["rates", "--standard-grid", "--p-s-db", "3", "--p-r-db", "3"]));
    assert!(t0.elapsed().as_secs_f64() < 60.0, "16-point grid took {:?}", t0.elapsed());
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 17);

    let csv = ok(bin().args(["rates", "--c-sr-db", "5", "--c-rd-db=-120", "--p-s-db", "3", "--p-r-db=-120", "--c-sd-db", "0"]));
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').take(7).map(|v| v.parse().unwrap()).collect();
    let p_s = 10f64.powf(0.3);
    let c_direct = 0.5 * (1.0 + p_s).log2();
    assert!((row[6] - c_direct).abs() < 1e-3, "r_star {} vs {c_direct}", row[6]);

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fd.csv");
    ok(bin().args(["rates", "--duplex", "fd", "--c-sr-db", "0,10", "--c-rd-db", "0", "--out"]).arg(&out).arg("--plot").arg(tmp.path().join("r.svg")));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 3);
    assert!(tmp.path().join("r.svg").exists());

    assert!(!run(bin().args(["rates", "--step", "0.5"])).status.success());
}

#[test]
fn sweeps_cache_their_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(ProtocolSpec::hd(Mode::HdPf, 0.5), &tmp.path().join("runs"));
    let path = write_cfg(tmp.path(), "exp.toml", &cfg);
    let first = ok(bin().args(["sweep-alpha", "--alphas", "1/2", "--config"]).arg(&path));
    let table: Vec<&str> = first.lines().collect();
    assert!(table[0].starts_with("alpha,psnr_mean"));
    assert_eq!(table.len(), 3);
    let cache = tmp.path().join("runs/cache");
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
    let t0 = Instant::now();
    let second = ok(bin().args(["sweep-alpha", "--alphas", "1/2", "--config"]).arg(&path));
    assert!(t0.elapsed().as_secs_f64() < 30.0);
    assert_eq!(table[..2], second.lines().collect::<Vec<_>>()[..2]);
    assert_ne!(last_line(&first), last_line(&second));

    let b = ok(bin().args(["sweep-b", "--blocks", "1,2", "--config"]).arg(&path));
    assert_eq!(b.lines().count(), 4);
    let m = ok(bin().args(["sweep-memory", "--blocks", "3", "--memories", "1,2", "--config"]).arg(&path));
    assert_eq!(m.lines().count(), 4);
}

#[test]
fn timing_prints_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(ProtocolSpec::fd(Mode::FdPf, 3, None), &tmp.path().join("runs"));
    let path = write_cfg(tmp.path(), "exp.toml", &cfg);
    let out = ok(bin().args(["timing", "--reps", "1", "--images", "4", "--config"]).arg(&path));
    let stages: Vec<&str> = out.lines().skip(1).filter(|l| !l.starts_with('#')).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(stages, ["encode", "relay", "decode"]);
    assert!(out.contains("O(N_e"));
}

fn qc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quantcodec"))
}

#[test]
fn quantcodec_is_lossless_at_eight_bits_and_monotone() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("a.png");
    let img = image::RgbImage::from_fn(13, 7, |x, y| image::Rgb([(x * 19) as u8, (y * 37) as u8, (x * y) as u8]));
    img.save(&src).unwrap();
    let mut sizes = Vec::new();
    for q in 1..=8 {
        let enc = tmp.path().join(format!("{q}.qc"));
        ok(qc().args(["enc", &q.to_string()]).arg(&src).arg(&enc));
        sizes.push(fs::metadata(&enc).unwrap().len());
    }
    assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");
    let dec = tmp.path().join("back.png");
    ok(qc().arg("dec").arg(tmp.path().join("8.qc")).arg(&dec));
    assert_eq!(image::open(&dec).unwrap().to_rgb8(), img);
    assert!(!run(qc().args(["enc", "9"]).arg(&src).arg(tmp.path().join("x.qc"))).status.success());
    assert!(!run(qc().arg("dec").arg(&src).arg(&dec)).status.success());
}
