use proptest::prelude::*;

use relay_jscc::autodiff::Tensor;
use relay_jscc::channel::LinkConfig;
use relay_jscc::checkpoint::{Checkpoint, TrainingMeta};
use relay_jscc::codec::{CodecConfig, Model};
use relay_jscc::config::LinkGrid;
use relay_jscc::data::synthetic;
use relay_jscc::evaluation::*;
use relay_jscc::protocols::{Mode, Protocol, ProtocolSpec};
use relay_jscc::signal::RelayNormStats;

fn row(v: &[f64]) -> Tensor {
    Tensor::from_vec(1, v.len(), v.to_vec())
}

fn link(c_sr: f64, c_rd: f64) -> LinkConfig {
    LinkConfig { c_sr_db: c_sr, c_rd_db: c_rd, c_sd_db: 0.0, p_s_db: 3.0, p_r_db: 3.0, fading: false, seed: 0 }
}

#[test]
fn beta_on_constructed_signals() {
    let x2 = row(&[0.3, -1.2, 0.7, 0.4, -0.5, 2.0]);
    let twice = x2.map(|v| 2.0 * v);
    let neg = x2.map(|v| -v);
    assert!((beta_of(&twice, &x2).unwrap().re - 1.0).abs() < 1e-6);
    assert!((beta_of(&neg, &x2).unwrap().re + 1.0).abs() < 1e-6);
    // (1, i) against (1, -i): conj(1)·1 + conj(-i)·i = 0
    let b = beta_of(&row(&[1.0, 0.0, 0.0, -1.0]), &row(&[1.0, 0.0, 0.0, 1.0])).unwrap();
    assert!(b.norm() < 1e-6);
}

#[test]
fn beta_rejects_zero_energy() {
    assert!(beta_of(&row(&[0.0; 4]), &row(&[1.0, 0.0, 1.0, 0.0])).is_err());
    assert!(beta_of(&row(&[1.0; 4]), &row(&[0.0; 4])).is_err());
}

#[test]
fn gamma_on_synthetic_energies() {
    // ‖x_s^(1)‖² = 3, ‖x_s^(2)‖² = 1
    let x1 = row(&[1.0, 1.0, 1.0, 0.0]);
    let x2 = row(&[0.0, 1.0]);
    let x = Tensor::concat_cols(&[&x1, &x2]);
    assert!((gamma_of(&x1, &x).unwrap() - 0.75).abs() < 1e-12);
    let silent = Tensor::concat_cols(&[&x1, &row(&[0.0, 0.0])]);
    assert!((gamma_of(&x1, &silent).unwrap() - 1.0).abs() < 1e-12);
    assert!(gamma_of(&row(&[0.0; 2]), &row(&[0.0; 2])).is_err());
}

#[test]
fn estimators_need_diagnostics() {
    assert!(estimate_gamma(&[]).is_err());
    assert!(estimate_beta(&[]).is_err());
}

proptest! {
    #[test]
    fn beta_is_bounded_and_orthogonal_projection_vanishes(v in prop::collection::vec(-3.0f64..3.0, 8), w in prop::collection::vec(-3.0f64..3.0, 8)) {
        let (x2, xr) = (row(&v), row(&w));
        prop_assume!(x2.sum_sq() > 1e-3 && xr.sum_sq() > 1e-3);
        let b = beta_of(&xr, &x2).unwrap();
        prop_assert!(b.norm() <= 1.0 + 1e-12);
        prop_assert!(b.re >= -1.0 - 1e-12 && b.re <= 1.0 + 1e-12);
        // remove the complex projection of x_r onto x_s^(2)
        let c = |t: &Tensor| t.data().chunks(2).map(|p| num_complex::Complex64::new(p[0], p[1])).collect::<Vec<_>>();
        let (a, r) = (c(&x2), c(&xr));
        let num: num_complex::Complex64 = a.iter().zip(&r).map(|(a, r)| a.conj() * r).sum();
        let den: f64 = a.iter().map(|a| a.norm_sqr()).sum();
        let k = num / den;
        let orth: Vec<f64> = r.iter().zip(&a).flat_map(|(r, a)| { let o = r - k * a; [o.re, o.im] }).collect();
        let o = row(&orth);
        prop_assume!(o.sum_sq() > 1e-6);
        prop_assert!(beta_of(&o, &x2).unwrap().norm() < 1e-6);
    }

    #[test]
    fn gamma_is_a_fraction(a in prop::collection::vec(-3.0f64..3.0, 6), b in prop::collection::vec(-3.0f64..3.0, 6)) {
        let (x1, x2) = (row(&a), row(&b));
        prop_assume!(x1.sum_sq() + x2.sum_sq() > 1e-9);
        let g = gamma_of(&x1, &Tensor::concat_cols(&[&x1, &x2])).unwrap();
        prop_assert!((0.0..=1.0).contains(&g));
    }
}

fn hd_setup() -> (Model, Protocol) {
    let cfg = CodecConfig::toy();
    let p = ProtocolSpec::hd(Mode::HdPf, 0.5).resolve(&cfg).unwrap();
    (Model::new(&cfg, p.model_shape(&cfg), 3).unwrap(), p)
}

#[test]
fn report_is_reproducible_and_covers_every_image() {
    let (model, p) = hd_setup();
    let data = synthetic(37, (3, 8, 8), 5);
    let opts = EvalOptions { batch_size: 16, ..Default::default() };
    let a = evaluate(&model, &p, RelayNormStats::default(), &data, &link(10.0, 5.0), &opts).unwrap();
    let b = evaluate(&model, &p, RelayNormStats::default(), &data, &link(10.0, 5.0), &opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.n, 37);
    assert_eq!(a.records.len(), 37);
    assert!(a.records.iter().enumerate().all(|(i, r)| r.index == i));
    let d = a.diagnostics.as_ref().unwrap();
    let (g, beta) = (d.gamma.unwrap(), d.beta.unwrap());
    assert!((0.0..=1.0).contains(&g) && (-1.0..=1.0).contains(&beta));
    assert!((d.source_power / 10f64.powf(0.3) - 1.0).abs() < 1e-5);
    let other = evaluate(&model, &p, RelayNormStats::default(), &data, &link(10.0, 5.0), &EvalOptions { seed: 9, ..opts }).unwrap();
    assert_ne!(a.psnr_mean, other.psnr_mean);
}

fn fd_checkpoint(stats: RelayNormStats, trained_link: Option<LinkConfig>) -> Checkpoint {
    let cfg = CodecConfig::toy();
    let p = ProtocolSpec::fd(Mode::FdPf, 3, None).resolve(&cfg).unwrap();
    let model = Model::new(&cfg, p.model_shape(&cfg), 3).unwrap();
    let meta = TrainingMeta { epoch: 0, steps: 0, best_val_loss: 1.0, seed: 0, note: String::new(), trained_link };
    Checkpoint { model, protocol: p, relay_stats: stats, meta, optimizer: None }
}

#[test]
fn relay_stats_are_recalibrated_away_from_the_training_link() {
    let data = synthetic(48, (3, 8, 8), 5);
    let opts = EvalOptions { batch_size: 16, ..Default::default() };
    let stale = RelayNormStats::new(0.3, 40.0).unwrap();
    let budget = 10f64.powf(0.3) * 2.0 / 3.0;
    let relay_power = |ck: &Checkpoint, l: &LinkConfig| evaluate_checkpoint(ck, &data, l, &opts).unwrap().diagnostics.unwrap().relay_power;

    let pinned = fd_checkpoint(stale, Some(link(10.0, 10.0)));
    assert_eq!(relay_stats_for(&pinned, &data, &link(10.0, 10.0), &opts).unwrap(), stale);
    assert!(relay_power(&pinned, &link(10.0, 10.0)) < 0.1 * budget);
    for l in [link(0.0, 5.0), link(10.0, 10.0 + 1e-6)] {
        let p = relay_power(&pinned, &l);
        assert!((p / budget - 1.0).abs() < 0.02, "{l:?}: {p} vs {budget}");
    }
    let adaptive = fd_checkpoint(stale, None);
    let p = relay_power(&adaptive, &link(10.0, 10.0));
    assert!((p / budget - 1.0).abs() < 0.02, "{p} vs {budget}");

    let (model, hd) = hd_setup();
    assert!(calibrate_relay_stats(&model, &hd, &data, &link(10.0, 10.0), &opts).is_err());
}

#[test]
fn fading_reports_differ_from_static() {
    let (model, p) = hd_setup();
    let data = synthetic(8, (3, 8, 8), 5);
    let opts = EvalOptions::default();
    let st = evaluate(&model, &p, RelayNormStats::default(), &data, &link(10.0, 5.0), &opts).unwrap();
    let fl = evaluate(&model, &p, RelayNormStats::default(), &data, &LinkConfig { fading: true, ..link(10.0, 5.0) }, &opts).unwrap();
    assert!(fl.link.fading);
    assert_ne!(st.records, fl.records);
}

#[test]
fn grid_reports_and_csv_schema() {
    let (model, p) = hd_setup();
    let data = synthetic(4, (3, 8, 8), 5);
    let opts = EvalOptions::default();
    let grid = LinkGrid::standard(3.0);
    let reports: Vec<EvalReport> =
        grid.points().iter().map(|l| evaluate(&model, &p, RelayNormStats::default(), &data, l, &opts).unwrap()).collect();
    assert_eq!(reports.len(), 16);
    let csv = reports_csv(&reports);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], REPORT_CSV_HEADER);
    assert_eq!(lines.len(), 17);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == REPORT_CSV_HEADER.split(',').count()));
    let jsonl = records_jsonl(&reports).unwrap();
    assert_eq!(jsonl.lines().count(), 16 * 4);
    for l in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v.get("psnr").is_some() && v.get("c_sr_db").is_some());
    }
}

#[test]
fn timing_has_three_stages() {
    let (model, p) = hd_setup();
    let data = synthetic(4, (3, 8, 8), 5);
    let r = timing_report(&model, &p, &data, &link(5.0, 5.0), 2).unwrap();
    let stages: Vec<&str> = r.rows.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, ["encode", "relay", "decode"]);
    assert!(r.rows.iter().all(|r| r.seconds_per_image.unwrap() > 0.0));
    assert!(r.to_csv().starts_with("stage,seconds_per_image\n"));
    let cfg = CodecConfig::toy();
    let af = ProtocolSpec::new(Mode::HdAf).resolve(&cfg).unwrap();
    let m = Model::new(&cfg, af.model_shape(&cfg), 0).unwrap();
    let r = timing_report(&m, &af, &data, &link(5.0, 5.0), 1).unwrap();
    assert_eq!(r.seconds("relay"), None);
}

#[test]
fn encode_time_is_superlinear_in_image_size() {
    let small = CodecConfig::for_image((3, 8, 8), 4, 0.25, 32, 4, (2, 2, 2), false).unwrap();
    let large = CodecConfig::for_image((3, 16, 16), 8, 0.25, 32, 4, (2, 2, 2), false).unwrap();
    assert_eq!(small.token_len(), large.token_len());
    let t_small = encode_seconds(&small, 16, 5).unwrap();
    let t_large = encode_seconds(&large, 16, 5).unwrap();
    assert!(t_large / t_small > 2.0, "ratio {}", t_large / t_small);
}

#[test]
fn single_value_sweep_is_its_own_argmax() {
    let l = link(10.0, 5.0);
    let rep = EvalReport::from_records(ProtocolSpec::new(Mode::Direct), l, vec![ImageRecord { index: 0, psnr: 20.0, ssim: 0.5, capped: false }]);
    let t = SweepTable { parameter: "alpha".into(), rows: vec![SweepRow { value: 0.5, report: rep }] };
    assert_eq!(t.argmax(), Some(0.5));
}
