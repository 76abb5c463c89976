use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relay_jscc::autodiff::{Graph, Tensor};
use relay_jscc::channel::{hd_broadcast, ChannelRng, FadingCoeffs, LinkState};
use relay_jscc::codec::{CodecConfig, Model};
use relay_jscc::protocols::*;
use relay_jscc::signal::{ComplexSignal, ImageBatch, RelayNormStats};

fn images(n: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * 3 * 64).map(|_| rng.random::<f64>()).collect();
    ImageBatch::new(n, 3, 8, 8, pixels).unwrap()
}

fn model_for(p: &Protocol, seed: u64) -> Model {
    let cfg = CodecConfig::toy();
    Model::new(&cfg, p.model_shape(&cfg), seed).unwrap()
}

fn run(model: &Model, p: &Protocol, imgs: &ImageBatch, link: &LinkState, norm: RelayNorm, seed: u64) -> (Tensor, Diagnostics) {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let mut rng = ChannelRng::new(seed);
    let out = rollout(&mut g, &vars, model, p, imgs, Conditions::fixed(link), norm, &mut rng).unwrap();
    (g.value(out.recon).clone(), out.diagnostics)
}

fn all_protocols(cfg: &CodecConfig) -> Vec<Protocol> {
    vec![
        Protocol::Direct,
        ProtocolSpec::new(Mode::HdAf).resolve(cfg).unwrap(),
        ProtocolSpec::hd(Mode::HdPf, 1.0 / 3.0).resolve(cfg).unwrap(),
        ProtocolSpec::hd(Mode::HdPfSystematic, 0.5).resolve(cfg).unwrap(),
        ProtocolSpec::fd(Mode::FdAf, 3, None).resolve(cfg).unwrap(),
        ProtocolSpec::fd(Mode::FdPf, 3, None).resolve(cfg).unwrap(),
        ProtocolSpec::fd(Mode::FdPf, 1, None).resolve(cfg).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn source_power_is_exact(p_s_db in -5.0f64..20.0, p_r_db in -5.0f64..20.0, c_sr_db in -10.0f64..10.0, seed in 0u64..1000) {
        let cfg = CodecConfig::toy();
        let link = LinkState::from_db(c_sr_db, 0.0, 0.0, p_s_db, p_r_db).unwrap();
        let imgs = images(3, seed);
        for p in all_protocols(&cfg) {
            let model = model_for(&p, seed);
            let (_, d) = run(&model, &p, &imgs, &link, RelayNorm::Batch, seed);
            for pw in d.source_power() {
                prop_assert!((pw / link.p_s - 1.0).abs() < 1e-5, "{:?}: {pw} vs {}", p.mode(), link.p_s);
            }
        }
    }
}

#[test]
fn hd_pf_relay_power_is_exact() {
    let cfg = CodecConfig::toy();
    let link = LinkState::from_db(3.0, 0.0, 0.0, 10.0, 7.0).unwrap();
    for p in [ProtocolSpec::hd(Mode::HdPf, 0.5).resolve(&cfg).unwrap(), ProtocolSpec::hd(Mode::HdPfSystematic, 2.0 / 3.0).resolve(&cfg).unwrap()] {
        let model = model_for(&p, 4);
        let (_, d) = run(&model, &p, &images(4, 1), &link, RelayNorm::Batch, 9);
        let (_, k2) = match p {
            Protocol::HdPf(plan) | Protocol::HdPfSystematic(plan) => plan.symbols(&cfg),
            _ => unreachable!(),
        };
        assert_eq!(d.x_r.as_ref().unwrap().cols(), 2 * k2);
        for pw in d.relay_power() {
            assert!((pw / link.p_r - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn hd_af_relay_power_monte_carlo() {
    let cfg = CodecConfig::toy();
    let p = ProtocolSpec::new(Mode::HdAf).resolve(&cfg).unwrap();
    let model = model_for(&p, 2);
    let link = LinkState::from_db(2.0, 0.0, 0.0, 5.0, 3.0).unwrap();
    // 24 relay symbols per image
    let imgs = images(4200, 3);
    let (_, d) = run(&model, &p, &imgs, &link, RelayNorm::Batch, 5);
    let mean = d.relay_power().iter().sum::<f64>() / imgs.n as f64;
    assert!((mean / link.p_r - 1.0).abs() < 0.02, "relay power {mean} vs {}", link.p_r);
}

#[test]
fn fd_af_relay_energy_and_correlation() {
    let cfg = CodecConfig::toy();
    let p = ProtocolSpec::fd(Mode::FdAf, 3, None).resolve(&cfg).unwrap();
    let model = model_for(&p, 2);
    let imgs = images(3200, 8);
    let link = LinkState::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
    let (_, d) = run(&model, &p, &imgs, &link, RelayNorm::Batch, 5);
    let mean = d.relay_power().iter().sum::<f64>() / imgs.n as f64;
    assert!(mean <= link.p_r * 1.02, "relay power {mean}");
    assert!(d.relay_blocks[0].data().iter().all(|&v| v == 0.0));

    let silent = LinkState::new(0.0, 1.0, 1.0, 1.0, 1.0).unwrap();
    let (_, d) = run(&model, &p, &imgs, &silent, RelayNorm::Batch, 6);
    let mean = d.relay_power().iter().sum::<f64>() / imgs.n as f64;
    assert!((mean / silent.p_r - 1.0).abs() < 0.02);
    let xs = d.x_s.data();
    let width = xs.len() / imgs.n / 3;
    for b in 0..2 {
        let xr = d.relay_blocks[b + 1].data();
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..imgs.n {
            for j in 0..width {
                let a = xs[i * 3 * width + b * width + j];
                let r = xr[i * width + j];
                sxy += a * r;
                sxx += a * a;
                syy += r * r;
            }
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr.abs() < 0.01, "block {b}: corr {corr}");
    }
}

#[test]
fn fd_pf_batch_statistics_meet_power_in_expectation() {
    let cfg = CodecConfig::toy();
    let p = ProtocolSpec::fd(Mode::FdPf, 3, None).resolve(&cfg).unwrap();
    let model = model_for(&p, 11);
    let link = LinkState::from_db(5.0, 5.0, 0.0, 10.0, 6.0).unwrap();
    let imgs = images(64, 2);
    let (_, d) = run(&model, &p, &imgs, &link, RelayNorm::Batch, 1);
    let active: Vec<f64> = d.relay_blocks[1..].iter().flat_map(|b| b.data().to_vec()).collect();
    let mean = active.iter().sum::<f64>() / active.len() as f64;
    let var = active.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / active.len() as f64;
    assert!(mean.abs() < 1e-9);
    assert!((var / (link.p_r / 2.0) - 1.0).abs() < 1e-9);
    let avg = d.relay_power().iter().sum::<f64>() / imgs.n as f64;
    assert!(avg <= link.p_r);
    assert!(d.relay_blocks[0].data().iter().all(|&v| v == 0.0));

    // Frozen statistics from the same batch reproduce the batch-normalized output.
    let stats = d.relay_stats.unwrap();
    let (recon_b, _) = run(&model, &p, &imgs, &link, RelayNorm::Batch, 1);
    let (recon_f, df) = run(&model, &p, &imgs, &link, RelayNorm::Frozen(stats), 1);
    for (a, b) in recon_b.data().iter().zip(recon_f.data()) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(df.relay_stats == Some(stats));
    let bad = RelayNormStats { mu: 0.0, sigma: 0.0 };
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let r = rollout(&mut g, &vars, &model, &p, &imgs, Conditions::fixed(&link), RelayNorm::Frozen(bad), &mut ChannelRng::new(0));
    assert!(r.is_err());
}

#[test]
fn relay_output_is_causal() {
    let cfg = CodecConfig::toy();
    for t in [1, 2, 3] {
        let p = ProtocolSpec::fd(Mode::FdPf, 6, Some(t)).resolve(&cfg).unwrap();
        let Protocol::FdPf(plan) = p else { unreachable!() };
        let model = model_for(&p, 3);
        let n = 2;
        let w = plan.width(&cfg);
        let rows = n * cfg.tokens();
        let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
        let ys: Vec<Tensor> = (0..5).map(|_| Tensor::randn(rows, w, 1.0, &mut rng)).collect();
        let link = LinkState::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
        let base = relay_outputs(&model, plan, &ys, Some(&link)).unwrap();
        assert_eq!(base.len(), 5);
        for b in 1..=5 {
            let mut pert = ys.clone();
            pert[b - 1] = pert[b - 1].map(|v| v + 0.5);
            let out = relay_outputs(&model, plan, &pert, Some(&link)).unwrap();
            // out[i] is the block i + 2 transmission x_{r,i+2}
            for i in 0..5 {
                let block = i + 2;
                if block <= b {
                    assert_eq!(out[i], base[i], "t={t}: x_r,{block} changed after perturbing y_r,{b}");
                }
            }
            assert_ne!(out[b - 1], base[b - 1], "x_r,{} ignores y_r,{b}", b + 1);
        }
    }
}

#[test]
fn full_memory_matches_default_plan() {
    let cfg = CodecConfig::toy();
    let a = ProtocolSpec::fd(Mode::FdPf, 3, Some(2)).resolve(&cfg).unwrap();
    let b = ProtocolSpec::fd(Mode::FdPf, 3, None).resolve(&cfg).unwrap();
    assert_eq!(a, b);
    let model = model_for(&a, 5);
    let link = LinkState::new(1.0, 1.0, 1.0, 10.0, 10.0).unwrap();
    let imgs = images(2, 5);
    assert_eq!(run(&model, &a, &imgs, &link, RelayNorm::Batch, 2).0, run(&model, &b, &imgs, &link, RelayNorm::Batch, 2).0);
}

#[test]
fn single_block_full_duplex_is_direct_transmission() {
    let cfg = CodecConfig::toy();
    let fd1 = ProtocolSpec::fd(Mode::FdPf, 1, None).resolve(&cfg).unwrap();
    let model = model_for(&Protocol::Direct, 21);
    let link = LinkState::from_db(0.0, 0.0, 3.0, 10.0, 10.0).unwrap();
    let imgs = images(5, 21);
    let (ra, da) = run(&model, &Protocol::Direct, &imgs, &link, RelayNorm::Batch, 77);
    let (rb, db) = run(&model, &fd1, &imgs, &link, RelayNorm::Batch, 77);
    assert_eq!(ra, rb);
    assert_eq!(da.y_d, db.y_d);
    assert_eq!(da.x_s, db.x_s);
    assert!(db.x_r.is_none());
}

#[test]
fn two_block_full_duplex_matches_half_duplex_signal_flow() {
    let cfg = CodecConfig::toy();
    let hd = ProtocolSpec::hd(Mode::HdPf, 0.5).resolve(&cfg).unwrap();
    let fd = ProtocolSpec::fd(Mode::FdPf, 2, None).resolve(&cfg).unwrap();
    let hd_model = model_for(&hd, 13);
    let mut fd_model = model_for(&fd, 13);
    fd_model.params.copy_matching_from(&hd_model.params);
    // FD relay sees [Y_1 | X_1]; embed the HD relay with zero rows for X_1.
    let hd_embed = hd_model.relay.as_ref().unwrap().embed.w;
    let fd_embed = fd_model.relay.as_ref().unwrap().embed.w;
    let src = hd_model.params.get(hd_embed).clone();
    let dst = fd_model.params.get_mut(fd_embed);
    dst.data_mut().fill(0.0);
    dst.data_mut()[..src.len()].copy_from_slice(src.data());

    let link = LinkState::from_db(4.0, 2.0, 0.0, 8.0, 6.0).unwrap();
    let imgs = images(3, 4);
    let (_, dh) = run(&hd_model, &hd, &imgs, &link, RelayNorm::Batch, 31);
    let (_, df) = run(&fd_model, &fd, &imgs, &link, RelayNorm::Batch, 31);

    assert_eq!(dh.trace, df.trace);
    assert_eq!(
        dh.trace,
        vec![
            TraceEvent::SourceEncode,
            TraceEvent::RelayReceive { slot: 1 },
            TraceEvent::DestinationReceive { slot: 1, relay_active: false },
            TraceEvent::RelayNetwork { slot: 2 },
            TraceEvent::DestinationReceive { slot: 2, relay_active: true },
            TraceEvent::Decode,
        ]
    );
    assert_eq!(dh.x_s, df.x_s);
    assert_eq!(dh.y_r, df.y_r);
    let half = dh.y_d.cols() / 2;
    assert_eq!(dh.y_d.slice_cols(0, half), df.y_d.slice_cols(0, half));
    let (a, b) = (dh.relay_raw.unwrap(), df.relay_raw.unwrap());
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "relay raw {x} vs {y}");
    }
}

#[test]
fn first_period_matches_value_level_channel() {
    let cfg = CodecConfig::toy();
    let p = ProtocolSpec::hd(Mode::HdPf, 0.5).resolve(&cfg).unwrap();
    let model = model_for(&p, 1);
    let link = LinkState::from_db(1.0, 2.0, 3.0, 4.0, 5.0).unwrap();
    let (_, d) = run(&model, &p, &images(1, 0), &link, RelayNorm::Batch, 42);
    let x1 = ComplexSignal::from_interleaved(d.x_s1.as_ref().unwrap().data(), link.p_s).unwrap();
    let (yr, yd1) = hd_broadcast(&x1, &link, &mut ChannelRng::new(42));
    assert_eq!(yr.to_interleaved(), d.y_r.unwrap().into_vec());
    let half = d.y_d.cols() / 2;
    assert_eq!(yd1.to_interleaved(), d.y_d.slice_cols(0, half).into_vec());
}

#[test]
fn systematic_parity_is_deterministic() {
    let cfg = CodecConfig::toy();
    let p = ProtocolSpec::hd(Mode::HdPfSystematic, 0.5).resolve(&cfg).unwrap();
    let model = model_for(&p, 6);
    let imgs = images(2, 6);
    let link = LinkState::new(1.0, 1.0, 1.0, 10.0, 10.0).unwrap();
    let (_, a) = run(&model, &p, &imgs, &link, RelayNorm::Batch, 1);
    let (_, b) = run(&model, &p, &imgs, &link, RelayNorm::Batch, 2);
    assert_eq!(a.x_s1, b.x_s1);
    assert_eq!(a.x_s2, b.x_s2);
    assert_ne!(a.y_d, b.y_d);
}

#[test]
fn unit_fading_leaves_destination_unchanged() {
    let model = model_for(&Protocol::Direct, 3);
    let link = LinkState::from_db(1.0, 2.0, 3.0, 4.0, 5.0).unwrap();
    let imgs = images(3, 3);
    let unit = vec![FadingCoeffs::unit(); 3];
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let faded = rollout(&mut g, &vars, &model, &Protocol::Direct, &imgs, Conditions { link: &link, fading: Some(&unit) }, RelayNorm::Batch, &mut ChannelRng::new(8)).unwrap();
    let (recon, d) = run(&model, &Protocol::Direct, &imgs, &link, RelayNorm::Batch, 8);
    assert_eq!(faded.diagnostics.y_d, d.y_d);
    assert_eq!(g.value(faded.recon), &recon);
}

#[test]
fn fading_rollouts_run_for_every_protocol() {
    let cfg = CodecConfig::toy();
    let link = LinkState::from_db(3.0, 3.0, 0.0, 10.0, 10.0).unwrap();
    let imgs = images(4, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h: Vec<FadingCoeffs> = (0..4).map(|_| FadingCoeffs::sample(&mut rng)).collect();
    for p in all_protocols(&cfg) {
        let model = model_for(&p, 1);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let out = rollout(&mut g, &vars, &model, &p, &imgs, Conditions { link: &link, fading: Some(&h) }, RelayNorm::Batch, &mut ChannelRng::new(3)).unwrap();
        assert!(g.value(out.recon).data().iter().all(|v| v.is_finite()));
        for pw in out.diagnostics.source_power() {
            assert!((pw / link.p_s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn mismatched_model_is_rejected() {
    let cfg = CodecConfig::toy();
    let model = model_for(&Protocol::Direct, 0);
    let p = ProtocolSpec::hd(Mode::HdPf, 0.5).resolve(&cfg).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let link = LinkState::new(1.0, 1.0, 1.0, 1.0, 1.0).unwrap();
    assert!(rollout(&mut g, &vars, &model, &p, &images(1, 0), Conditions::fixed(&link), RelayNorm::Batch, &mut ChannelRng::new(0)).is_err());
}

#[test]
fn transmit_wrappers_return_images() {
    let cfg = CodecConfig::toy();
    let link = LinkState::new(1.0, 1.0, 1.0, 10.0, 10.0).unwrap();
    let imgs = images(2, 1);
    let plan = HalfDuplexPlan::new(0.5, &cfg).unwrap();
    let m = model_for(&Protocol::HdPf(plan), 0);
    let (out, _) = hd_pf_transmit(&m, &imgs, &link, plan, &mut ChannelRng::new(0)).unwrap();
    assert!(out.same_shape(&imgs));
    assert!(out.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let m = model_for(&Protocol::Direct, 0);
    let (a, _) = direct_transmit(&m, &imgs, Conditions::fixed(&link), &mut ChannelRng::new(0)).unwrap();
    let (b, _) = hd_af_transmit(&m, &imgs, &link, &mut ChannelRng::new(0)).unwrap();
    assert!(a.same_shape(&b));
    let fd = FullDuplexPlan::new(1, 0, &cfg).unwrap();
    assert!(fd_af_transmit(&m, &imgs, Conditions::fixed(&link), fd, &mut ChannelRng::new(0)).is_err());
}
