use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::models::{forward_values, init_models, ModelKind};
use crate::rng::stream;

fn tiny() -> ModelConfig {
    ModelConfig { kind: ModelKind::Mlp, input: [1, 2, 3], hidden: vec![5], rep_dim: 4, n_classes: 3, aux_dim: None }
}

fn sample_batch(seed: u64, n: usize, cfg: &ModelConfig) -> (Tensor, Vec<usize>) {
    let mut rng = stream(&[seed, 77]);
    let x = Tensor::from_fn(&[n, cfg.input_len()], |_| rng.random_range(-1.0..1.0));
    let y = (0..n).map(|_| rng.random_range(0..cfg.n_classes)).collect();
    (x, y)
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = Vec::new();
    for i in 0..t.rows() {
        let row = t.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        out.extend(row.iter().map(|v| (v - m).exp() / z));
    }
    Tensor::new(vec![t.rows(), c], out).unwrap()
}

#[test]
fn task_loss_examples() {
    let confident = Tensor::new(vec![2, 3], vec![40.0, 0.0, 0.0, 0.0, 0.0, 40.0]).unwrap();
    assert!(task_loss(&confident, &[0, 2], DEFAULT_EPS_P).unwrap() < 1e-6);
    let uniform = Tensor::zeros(&[5, 8]);
    let l = task_loss(&uniform, &[0, 1, 2, 3, 7], DEFAULT_EPS_P).unwrap();
    assert!((l - 8f64.ln()).abs() < 1e-12);
    assert!(matches!(task_loss(&uniform, &[0, 1, 2, 3, 8], DEFAULT_EPS_P), Err(Error::Contract(_))));
}

#[test]
fn task_loss_matches_scalar_replay() {
    let mut rng = stream(&[31]);
    for _ in 0..10 {
        let logits = Tensor::from_fn(&[6, 4], |_| rng.random_range(-5.0..5.0));
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let p = ((row[y] - m).exp() / z).max(DEFAULT_EPS_P);
            expect -= p.ln();
        }
        expect /= 6.0;
        assert!((task_loss(&logits, &labels, DEFAULT_EPS_P).unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn rep_loss_examples() {
    let mut rng = stream(&[32]);
    let h = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[4, 4], |_| rng.random_range(-1.0..1.0));
    assert_eq!(rep_distill_loss(&h, &h, &w).unwrap(), 0.0);
    let other = Tensor::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
    assert_eq!(rep_distill_loss(&h, &other, &Tensor::zeros(&[4, 4])).unwrap(), 0.0);
    let ones = Tensor::full(&[2, 2], 1.0);
    let l = rep_distill_loss(&ones, &Tensor::zeros(&[2, 2]), &Tensor::eye(2)).unwrap();
    assert_eq!(l, 1.0);
    assert!(matches!(rep_distill_loss(&h, &other, &Tensor::eye(3)), Err(Error::Dimension(_))));
}

#[test]
fn identity_aux_reduces_to_plain_mse() {
    let mut rng = stream(&[33]);
    let hs = Tensor::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0));
    let ht = Tensor::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0));
    let mse = hs.sub(&ht).unwrap().data().iter().map(|d| d * d).sum::<f64>() / 20.0;
    assert_eq!(rep_distill_loss(&hs, &ht, &Tensor::eye(4)).unwrap(), mse);
}

#[test]
fn ddl_rep_examples() {
    assert_eq!(ddl_rep(0.0, 0.3, 0.4, DEFAULT_EPS_D), 0.0);
    assert!((ddl_rep(1.0, 1.0, 1.0, 1e-300) - 0.5).abs() < 1e-15);
    let v = ddl_rep(1.0, 0.0, 0.0, 1e-8);
    assert!(v.is_finite());
    assert!((v - 1e8).abs() < 1e-6);
}

#[test]
fn ddl_dec_examples() {
    let p = softmax_rows(&Tensor::from_fn(&[4, 3], |i| (i as f64).sin()));
    assert_eq!(ddl_dec(&p, &p, 0.5, 0.5, DEFAULT_EPS_P, DEFAULT_EPS_D).unwrap(), (0.0, 0.0));

    let eps = DEFAULT_EPS_P;
    let pt = Tensor::new(vec![1, 2], vec![1.0 - eps, eps]).unwrap();
    let ps = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
    let (_, loss_s) = ddl_dec(&pt, &ps, 0.5, 0.5 - 1e-8, eps, 1e-8).unwrap();
    let expect = (1.0 - eps) * ((1.0 - eps) / 0.5f64).ln() + eps * (eps / 0.5f64).ln();
    assert!((loss_s - expect).abs() < 1e-12);
    assert!((loss_s - 2f64.ln()).abs() < 1e-5);

    let q = softmax_rows(&Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.7).cos()));
    let (a_t, a_s) = ddl_dec(&p, &q, 0.2, 0.3, eps, 1e-8).unwrap();
    let (b_t, b_s) = ddl_dec(&q, &p, 0.2, 0.3, eps, 1e-8).unwrap();
    assert_eq!((a_t, a_s), (b_s, b_t));

    let bad = Tensor::new(vec![1, 2], vec![0.6, 0.6]).unwrap();
    assert!(matches!(ddl_dec(&bad, &ps, 1.0, 1.0, eps, 1e-8), Err(Error::Contract(_))));
}

#[test]
fn adaptive_weights_decrease_with_task_loss() {
    let p = softmax_rows(&Tensor::from_fn(&[3, 4], |i| (i as f64).sin()));
    let q = softmax_rows(&Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.3).cos()));
    let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);
    for sum in [0.01, 0.1, 0.5, 1.0, 3.0] {
        let r = ddl_rep(0.7, sum / 2.0, sum / 2.0, DEFAULT_EPS_D);
        let (t, s) = ddl_dec(&p, &q, sum / 2.0, sum / 2.0, DEFAULT_EPS_P, DEFAULT_EPS_D).unwrap();
        assert!(r < last.0 && t < last.1 && s < last.2);
        last = (r, t, s);
    }
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_losses(0.0, 0.0, 0.0, 0.4, 0.9), (0.4, 0.9));
    assert_eq!(total_losses(0.2, 0.2, 0.3, 1.0, 1.0), (1.5, 1.5));
}

#[test]
fn bundle_recomposes_from_independent_parts() {
    let cfg = tiny();
    let models = init_models(&cfg, 5).unwrap();
    let (x, y) = sample_batch(1, 7, &cfg);
    let lcfg = LocalUpdateConfig::default();
    let b = build_losses(&models, &x, &y, &lcfg).unwrap().bundle();

    let (ht, lt) = forward_values(&cfg, &models.teacher, &x).unwrap();
    let (hs, ls) = forward_values(&cfg, &models.student, &x).unwrap();
    let task_t = task_loss(&lt, &y, lcfg.eps_p).unwrap();
    let task_s = task_loss(&ls, &y, lcfg.eps_p).unwrap();
    let rep = rep_distill_loss(&hs, &ht, &models.aux).unwrap();
    let dec_r = ddl_rep(rep, task_t, task_s, lcfg.eps_d);
    let (dt, ds) = ddl_dec(&softmax_rows(&lt), &softmax_rows(&ls), task_t, task_s, lcfg.eps_p, lcfg.eps_d).unwrap();
    let (tt, ts) = total_losses(dt, ds, dec_r, task_t, task_s);
    for (got, want) in [
        (b.task_t, task_t),
        (b.task_s, task_s),
        (b.rep, rep),
        (b.dec_r, dec_r),
        (b.dec_d_t, dt),
        (b.dec_d_s, ds),
        (b.total_t, tt),
        (b.total_s, ts),
    ] {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert_eq!(b.total_t, b.dec_d_t + b.dec_r + b.task_t);
    assert_eq!(b.total_s, b.dec_d_s + b.dec_r + b.task_s);
}

#[test]
fn no_rep_variant_drops_the_term() {
    let cfg = tiny();
    let models = init_models(&cfg, 6).unwrap();
    let (x, y) = sample_batch(2, 5, &cfg);
    let lcfg = LocalUpdateConfig { variant: DistillVariant::NoRepTerm, ..Default::default() };
    let b = build_losses(&models, &x, &y, &lcfg).unwrap().bundle();
    assert_eq!(b.dec_r, 0.0);
    assert!(b.rep > 0.0);
    assert_eq!(b.total_t, b.dec_d_t + b.task_t);
}

#[test]
fn cross_model_terms_are_detached() {
    let cfg = tiny();
    let models = init_models(&cfg, 7).unwrap();
    let (x, y) = sample_batch(3, 6, &cfg);
    let lg = build_losses(&models, &x, &y, &LocalUpdateConfig::default()).unwrap();
    let gt = lg.graph.backward(lg.total_t).unwrap();
    assert!(lg.student.iter().all(|&id| gt.get(id).is_none()));
    assert!(lg.teacher.iter().all(|&id| gt.get(id).is_some()));
    let gs = lg.graph.backward(lg.total_s).unwrap();
    assert!(lg.teacher.iter().all(|&id| gs.get(id).is_none()));
    assert!(gs.get(lg.aux.unwrap()).is_some() && gt.get(lg.aux.unwrap()).is_some());
}

/// Zero biases put dead units exactly on the ReLU kink; move them off it.
fn with_random_biases(mut m: ClientModels, seed: u64) -> ClientModels {
    let mut rng = stream(&[seed, 78]);
    for p in m.teacher.iter_mut().chain(m.student.iter_mut()).filter(|p| p.ndim() == 1) {
        p.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
    }
    m
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = tiny();
    let lcfg = LocalUpdateConfig::default();
    let h = 1e-5;
    for case in 0..5 {
        let models = with_random_biases(init_models(&cfg, 100 + case).unwrap(), case);
        let (x, y) = sample_batch(case, 6, &cfg);
        let lg = build_losses(&models, &x, &y, &lcfg).unwrap();
        let mut g = lg.graph;
        let both = g.add(lg.total_t, lg.total_s).unwrap();
        let grads = g.backward(both).unwrap();
        let eval = |m: &ClientModels| build_losses(m, &x, &y, &lcfg).unwrap().bundle();
        for (k, &id) in lg.teacher.iter().enumerate() {
            for i in 0..models.teacher[k].len() {
                let (mut plus, mut minus) = (models.clone(), models.clone());
                plus.teacher[k].data_mut()[i] += h;
                minus.teacher[k].data_mut()[i] -= h;
                let fd = (eval(&plus).total_t - eval(&minus).total_t) / (2.0 * h);
                let an = grads.get(id).unwrap().data()[i];
                assert!(rel_err(an, fd) < 1e-5, "teacher {k}[{i}]: {an} vs {fd}");
            }
        }
        for (k, &id) in lg.student.iter().enumerate() {
            for i in 0..models.student[k].len() {
                let (mut plus, mut minus) = (models.clone(), models.clone());
                plus.student[k].data_mut()[i] += h;
                minus.student[k].data_mut()[i] -= h;
                let fd = (eval(&plus).total_s - eval(&minus).total_s) / (2.0 * h);
                let an = grads.get(id).unwrap().data()[i];
                assert!(rel_err(an, fd) < 1e-5, "student {k}[{i}]: {an} vs {fd}");
            }
        }
        let aux_grad = grads.get(lg.aux.unwrap()).unwrap();
        for i in 0..models.aux.len() {
            let (mut plus, mut minus) = (models.clone(), models.clone());
            plus.aux.data_mut()[i] += h;
            minus.aux.data_mut()[i] -= h;
            let (bp, bm) = (eval(&plus), eval(&minus));
            let fd = ((bp.total_t + bp.total_s) - (bm.total_t + bm.total_s)) / (2.0 * h);
            assert!(rel_err(aux_grad.data()[i], fd) < 1e-5, "aux[{i}]");
        }
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = tiny();
    let mut models = init_models(&cfg, 8).unwrap();
    let before = models.clone();
    let (x, y) = sample_batch(4, 20, &cfg);
    let lcfg = LocalUpdateConfig { learning_rate: 0.0, epochs: 2, batch_size: 6, ..Default::default() };
    let hist = local_update(&mut models, &x, &y, &lcfg, &mut stream(&[1])).unwrap();
    assert_eq!(hist.len(), 8);
    assert_eq!(models.teacher, before.teacher);
    assert_eq!(models.student, before.student);
    assert_eq!(models.aux, before.aux);
}

#[test]
fn local_update_is_deterministic_and_keeps_invariants() {
    let cfg = tiny();
    let (x, y) = sample_batch(5, 30, &cfg);
    let lcfg = LocalUpdateConfig { learning_rate: 0.1, epochs: 3, batch_size: 8, ..Default::default() };
    let run = || {
        let mut m = init_models(&cfg, 9).unwrap();
        let h = local_update(&mut m, &x, &y, &lcfg, &mut stream(&[2])).unwrap();
        (m, h)
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    let shapes = |p: &[Tensor]| p.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(&m1.teacher), shapes(&m1.student));
    for j in 0..m1.aux.cols() {
        let norm: f64 = (0..m1.aux.rows()).map(|i| m1.aux.at(i, j).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
    for b in &h1 {
        for v in [b.task_t, b.task_s, b.rep, b.dec_r, b.dec_d_t, b.dec_d_s, b.total_t, b.total_s] {
            assert!(v >= 0.0 && v.is_finite());
        }
    }
}

#[test]
fn empty_shard_is_rejected() {
    let cfg = tiny();
    let mut m = init_models(&cfg, 1).unwrap();
    let x = Tensor::zeros(&[1, 6]);
    let err = local_update(&mut m, &x, &[], &LocalUpdateConfig::default(), &mut stream(&[0])).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn training_reduces_student_loss_on_separable_data() {
    let cfg = ModelConfig { kind: ModelKind::Mlp, input: [1, 1, 4], hidden: vec![8], rep_dim: 4, n_classes: 2, aux_dim: None };
    let mut rng = stream(&[40]);
    let n = 64;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for _ in 0..n {
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        ys.push(usize::from(v[0] + 0.5 * v[1] - 0.3 * v[2] > 0.0));
        xs.extend(v);
    }
    let x = Tensor::new(vec![n, 4], xs).unwrap();
    let mut m = init_models(&cfg, 11).unwrap();
    // 25 epochs of 8 batches = 200 steps
    let lcfg = LocalUpdateConfig { learning_rate: 0.05, epochs: 25, batch_size: 8, ..Default::default() };
    let h = local_update(&mut m, &x, &ys, &lcfg, &mut stream(&[3])).unwrap();
    assert_eq!(h.len(), 200);
    let first: f64 = h[..10].iter().map(|b| b.task_s).sum::<f64>() / 10.0;
    let last: f64 = h[190..].iter().map(|b| b.task_s).sum::<f64>() / 10.0;
    assert!(last < first, "{last} !< {first}");
}

#[test]
fn single_model_training_reports_student_loss() {
    let cfg = tiny();
    let m = init_models(&cfg, 12).unwrap();
    let mut params = m.student.clone();
    let mut opt = SgdState::new(0.0);
    let (x, y) = sample_batch(6, 10, &cfg);
    let lcfg = LocalUpdateConfig { learning_rate: 0.05, epochs: 1, batch_size: 4, ..Default::default() };
    let h = local_update_single(&mut params, &mut opt, &cfg, &x, &y, &lcfg, &mut stream(&[4])).unwrap();
    assert_eq!(h.len(), 3);
    assert!(h.iter().all(|b| b.task_t == 0.0 && b.total_s == b.task_s && b.task_s > 0.0));
    assert_ne!(params, m.student);
}

proptest! {
    #[test]
    fn bundle_components_are_non_negative(seed in 0u64..500, n in 1usize..9) {
        let cfg = tiny();
        let models = init_models(&cfg, seed).unwrap();
        let (x, y) = sample_batch(seed, n, &cfg);
        let b = build_losses(&models, &x, &y, &LocalUpdateConfig::default()).unwrap().bundle();
        for v in [b.task_t, b.task_s, b.rep, b.dec_r, b.dec_d_t, b.dec_d_s, b.total_t, b.total_s] {
            prop_assert!(v >= 0.0 && v.is_finite());
        }
    }
}
