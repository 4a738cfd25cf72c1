use rand::Rng;

use super::*;
use crate::gpd::{decode_model, Payload, TensorRecord};
use crate::rng::StreamRng;

fn small_cfg(mode: Mode) -> RunConfig {
    RunConfig {
        mode,
        n_clients: 4,
        ratio: 0.5,
        rounds: 2,
        epochs: 1,
        batch: 16,
        lr: 0.05,
        lambda: 1.0,
        seed: 3,
        hidden: Some(vec![16]),
        rep_dim: Some(8),
        raw_threshold: 0,
        data: DataSource::Synth(SynthSpec { n_classes: 4, per_class: 40, shape: [1, 8, 8], noise: 0.2, seed: 1 }),
        min_per_client: 5,
        ..Default::default()
    }
}

fn raw_packet(sender: u32, n: u64, values: &[f64]) -> GpdPacket {
    GpdPacket {
        sender,
        round: 0,
        n_samples: n,
        records: vec![TensorRecord { id: 0, shape: vec![values.len()], payload: Payload::Raw(values.to_vec()) }],
    }
}

#[test]
fn sampling_sizes_and_determinism() {
    assert_eq!(sample_clients(20, 0.10, 1, 1).len(), 2);
    assert_eq!(sample_clients(20, 1.0, 1, 1), (0..20).collect::<Vec<_>>());
    assert_eq!(sample_clients(20, 0.01, 1, 1).len(), 1);
    assert_eq!(sample_clients(20, 0.3, 9, 4), sample_clients(20, 0.3, 9, 4));
    let distinct: std::collections::BTreeSet<Vec<usize>> = (1..20).map(|r| sample_clients(20, 0.3, 9, r)).collect();
    assert!(distinct.len() > 1);
}

#[test]
fn dp_noise_properties() {
    let mut rng = stream(&[1]);
    let values: Vec<f64> = (0..20_000).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = raw_packet(0, 1, &values);
    let same = add_dp_noise(&p, 0.0, &mut stream(&[2]));
    assert_eq!(wire::write_packet(&same), wire::write_packet(&p));

    let tau = 1e-3;
    let noisy = add_dp_noise(&p, tau, &mut stream(&[2]));
    let Payload::Raw(nv) = &noisy.records[0].payload else { unreachable!() };
    let diffs: Vec<f64> = nv.iter().zip(&values).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    assert!(var >= 0.5 * tau * tau && var <= 2.0 * tau * tau, "variance {var}");

    let mut g = Tensor::zeros(&[80, 40]);
    g.data_mut()[0] = 1.0;
    let packet = encode_model(&[g], &CodecConfig { alpha: 0.98, raw_threshold: 0 }).unwrap();
    let noisy = add_dp_noise(&packet, 0.5, &mut stream(&[3]));
    let Payload::Gpd { p, n, .. } = &noisy.records[0].payload else { panic!("expected gpd") };
    assert!(p.s.iter().chain(&n.s).all(|&s| s >= 0.0));
}

#[test]
fn aggregation_examples() {
    let shapes = vec![vec![2]];
    let out = aggregate(&[raw_packet(0, 5, &[1.0, 3.0]), raw_packet(1, 5, &[3.0, 1.0])], &shapes).unwrap();
    assert_eq!(out[0].data(), &[2.0, 2.0]);
    let shapes1 = vec![vec![1]];
    let out = aggregate(&[raw_packet(0, 3, &[0.0]), raw_packet(1, 1, &[4.0])], &shapes1).unwrap();
    assert_eq!(out[0].data(), &[1.0]);
    let out = aggregate(&[raw_packet(7, 2, &[0.25, -9.5])], &shapes).unwrap();
    assert_eq!(out[0].data(), &[0.25, -9.5]);
    assert!(matches!(aggregate(&[], &shapes), Err(Error::Contract(_))));
    let err = aggregate(&[raw_packet(4, 1, &[1.0, 2.0, 3.0])], &shapes).unwrap_err();
    assert!(matches!(err, Error::Protocol { sender: 4, .. }));
}

#[test]
fn aggregation_is_permutation_invariant_and_homogeneous() {
    let mut rng = stream(&[4]);
    let packets: Vec<GpdPacket> = (0..5)
        .map(|k| {
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            raw_packet(k, rng.random_range(1..50), &v)
        })
        .collect();
    let shapes = vec![vec![6]];
    let base = aggregate(&packets, &shapes).unwrap();
    let mut rev = packets.clone();
    rev.reverse();
    rev.swap(0, 2);
    assert_eq!(aggregate(&rev, &shapes).unwrap(), base);

    let scaled: Vec<GpdPacket> = packets
        .iter()
        .map(|p| {
            let Payload::Raw(v) = &p.records[0].payload else { unreachable!() };
            raw_packet(p.sender, p.n_samples, &v.iter().map(|x| 4.0 * x).collect::<Vec<_>>())
        })
        .collect();
    let out = aggregate(&scaled, &shapes).unwrap();
    assert!(out[0].max_abs_diff(&base[0].scale(4.0)) < 1e-12);
}

#[test]
fn evaluation_examples() {
    let cfg = ModelConfig {
        kind: ModelKind::Mlp,
        input: [1, 1, 2],
        hidden: vec![2],
        rep_dim: 2,
        n_classes: 8,
        aux_dim: None,
    };
    // zero weights, bias favoring class 0 → constant prediction
    let mut params: Vec<Tensor> = cfg.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
    params[5].data_mut()[0] = 1.0;
    let x = Tensor::zeros(&[50, 2]);
    assert_eq!(evaluate(&cfg, &params, &x, &[0; 50]).unwrap(), 1.0);

    let mut rng: StreamRng = stream(&[5]);
    let n = 4000;
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..8)).collect();
    let acc = evaluate(&cfg, &params, &Tensor::zeros(&[n, 2]), &labels).unwrap();
    let sigma = (0.125f64 * 0.875 / n as f64).sqrt();
    assert!((acc - 0.125).abs() < 3.0 * sigma, "{acc}");

    // all-zero logits tie everywhere: lowest index wins
    let zero: Vec<Tensor> = cfg.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
    assert_eq!(evaluate(&cfg, &zero, &Tensor::zeros(&[3, 2]), &[0, 0, 0]).unwrap(), 1.0);
    assert!(matches!(evaluate(&cfg, &zero, &Tensor::zeros(&[1, 2]), &[]), Err(Error::Contract(_))));
}

#[test]
fn accuracy_ignores_sample_order() {
    let mut rng = stream(&[6]);
    let logits = Tensor::from_fn(&[30, 4], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..30).map(|_| rng.random_range(0..4)).collect();
    let perm: Vec<usize> = (0..30).rev().collect();
    let permuted = Tensor::from_fn(&[30, 4], |i| logits.at(perm[i / 4], i % 4));
    let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    assert_eq!(accuracy(&logits, &labels), accuracy(&permuted, &plabels));
}

#[test]
fn local_mode_does_not_communicate() {
    let h = run_experiment(&small_cfg(Mode::Local)).unwrap();
    for r in &h {
        assert_eq!((r.upload_bytes, r.download_bytes, r.comm_ratio), (0, 0, 0.0));
        assert!(r.clients.iter().all(|c| c.upload_bytes == 0 && c.download_bytes == 0));
    }
}

#[test]
fn uncompressed_ablation_has_unit_ratio() {
    let h = run_experiment(&small_cfg(Mode::FedMicC)).unwrap();
    assert!(h.iter().all(|r| r.comm_ratio == 1.0));
    let h = run_experiment(&small_cfg(Mode::FedAvg)).unwrap();
    assert!(h.iter().all(|r| r.comm_ratio == 1.0));
}

#[test]
fn compressed_modes_report_consistent_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig { dump_packets: Some(dir.path().to_path_buf()), rounds: 1, ..small_cfg(Mode::FedMic) };
    let h = run_experiment(&cfg).unwrap();
    let r = &h[0];
    let mut up = 0;
    let (mut t, mut f) = (0, 0);
    for k in &r.sampled {
        let p = wire::load_packet(&dir.path().join(format!("round001_client{k:03}_up.gpd"))).unwrap();
        up += wire::encoded_len(&p);
        t += p.transmitted();
        f += p.full();
    }
    let g = wire::load_packet(&dir.path().join("round001_global_down.gpd")).unwrap();
    t += 4 * g.transmitted();
    f += 4 * g.full();
    assert_eq!(r.upload_bytes, up);
    assert_eq!(r.download_bytes, 4 * wire::encoded_len(&g));
    assert_eq!(r.comm_ratio, t as f64 / f as f64);
    assert!(r.comm_ratio < 1.0);
}

#[test]
fn zero_step_round_reproduces_codec_round_trip_of_mean() {
    let cfg = RunConfig { lr: 0.0, ratio: 1.0, rounds: 1, n_clients: 2, ..small_cfg(Mode::FedMic) };
    let mut sim = Simulation::new(&cfg).unwrap();
    let shapes = sim.model_config().param_shapes();
    let codec = cfg.codec();
    let initial: Vec<(Vec<Tensor>, usize)> =
        (0..2).map(|k| (sim.client_models(k).student.clone(), sim.client_train_size(k))).collect();
    sim.run_round().unwrap();

    // independent replay: encode → 32-bit wire → decode → weighted mean → encode → wire → decode
    let total: usize = initial.iter().map(|(_, n)| n).sum();
    let mut mean: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    for (params, n) in &initial {
        let p = wire::through_wire(&encode_model(params, &codec).unwrap()).unwrap();
        for (m, t) in mean.iter_mut().zip(decode_model(&p, &shapes).unwrap()) {
            m.add_assign(&t.scale(*n as f64 / total as f64));
        }
    }
    let expect = decode_model(&wire::through_wire(&encode_model(&mean, &codec).unwrap()).unwrap(), &shapes).unwrap();
    for k in 0..2 {
        for (a, b) in sim.client_models(k).student.iter().zip(&expect) {
            assert!(a.max_abs_diff(b) < 1e-6, "client {k}");
        }
    }
}

#[test]
fn runs_are_deterministic_serial_or_parallel() {
    let cfg = small_cfg(Mode::FedMic);
    let a = run_experiment(&cfg).unwrap();
    assert_eq!(a, run_experiment(&cfg).unwrap());
    let serial = RunConfig { parallel: false, ..cfg };
    assert_eq!(a, run_experiment(&serial).unwrap());
}

#[test]
fn teachers_change_only_through_local_training() {
    let cfg = small_cfg(Mode::FedMic);
    let mut sim = Simulation::new(&cfg).unwrap();
    let before: Vec<Vec<Tensor>> = (0..4).map(|k| sim.client_models(k).teacher.clone()).collect();
    let m = sim.run_round().unwrap();
    for k in 0..4 {
        let same = sim.client_models(k).teacher == before[k];
        assert_eq!(same, !m.sampled.contains(&k), "client {k}");
    }
    // every client now holds the broadcast student
    assert_eq!(sim.client_models(0).student, sim.client_models(3).student);
}

#[test]
fn failed_clients_are_skipped() {
    let cfg = RunConfig { ratio: 1.0, rounds: 1, fail: vec![1], ..small_cfg(Mode::FedAvg) };
    let h = run_experiment(&cfg).unwrap();
    let c1 = &h[0].clients[1];
    assert!(c1.losses.is_none());
    assert_eq!(c1.upload_bytes, 0);
    assert_eq!(h[0].clients.iter().filter(|c| c.losses.is_some()).count(), 3);
}

#[test]
fn every_mode_runs_and_records_metrics() {
    for mode in Mode::ALL {
        let h = run_experiment(&small_cfg(mode)).unwrap();
        assert_eq!(h.len(), 2);
        for r in &h {
            assert_eq!(r.clients.len(), 4);
            assert!((0.0..=1.0).contains(&r.weighted_acc));
            assert_eq!(r.sampled.len(), 2);
            let trained = r.mean_losses().unwrap();
            assert!(trained.task_s > 0.0);
            assert_eq!(trained.task_t > 0.0, mode.is_dual());
        }
    }
}

#[test]
fn config_validation() {
    let ok = small_cfg(Mode::FedMic);
    assert!(ok.validate().is_ok());
    for bad in [
        RunConfig { ratio: 0.0, ..ok.clone() },
        RunConfig { alpha: 1.5, ..ok.clone() },
        RunConfig { n_clients: 1, ..ok.clone() },
        RunConfig { rounds: 0, ..ok.clone() },
        RunConfig { tau: -1.0, ..ok.clone() },
        RunConfig { lambda: 0.0, ..ok.clone() },
        RunConfig { fail: vec![9], ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    assert_eq!("fedmic_b".parse::<Mode>().unwrap(), Mode::FedMicB);
    assert!("fedprox".parse::<Mode>().is_err());
}
