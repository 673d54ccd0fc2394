mod common;

use common::{scale_params, set_param, tiny_config, tiny_model};
use flexattn::data::{CorpusPair, EOS, PAD};
use flexattn::decoding::greedy;
use flexattn::model::{AttentionKind, Model, ModelConfig};
use flexattn::tensor::{grad_check_params, Tensor};
use flexattn::training::*;
use flexattn::Error;
use proptest::prelude::*;

fn pair(source: &[usize], target: &[usize]) -> CorpusPair {
    let mut t = target.to_vec();
    t.push(EOS);
    CorpusPair {
        source: source.to_vec(),
        target: t,
    }
}

fn toy_corpus(n: usize) -> Vec<CorpusPair> {
    (0..n)
        .map(|i| {
            let len = 2 + i % 3;
            let src: Vec<usize> = (0..len).map(|k| 4 + (i * 3 + k * 5) % 6).collect();
            pair(&src, &src)
        })
        .collect()
}

#[test]
fn certain_model_has_zero_loss() {
    let mut m = Model::zeros(tiny_config(AttentionKind::Global)).unwrap();
    let mut b = vec![0.0; 10];
    b[EOS] = 1000.0;
    set_param(&mut m, "out.b", &b);
    let batch = Batch::from_pairs(&[&pair(&[4, 5], &[])]);
    assert_eq!(cross_entropy(&m, &batch).unwrap(), 0.0);
}

#[test]
fn uniform_model_loss_is_t_log_v() {
    let m = Model::zeros(tiny_config(AttentionKind::Local)).unwrap();
    let p = pair(&[4, 5, 6], &[6, 5, 4]);
    let q = pair(&[7], &[7, 8, 9, 4, 5]);
    let batch = Batch::from_pairs(&[&p, &q]);
    let want = (4.0 + 6.0) / 2.0 * (10f64).ln();
    assert!((cross_entropy(&m, &batch).unwrap() - want).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_empty_batch() {
    let m = tiny_model(AttentionKind::Global, 1);
    let batch = Batch::from_pairs(&[]);
    assert!(matches!(cross_entropy(&m, &batch), Err(Error::Empty(_))));
}

#[test]
fn adam_memorizes_a_pair() {
    let mut m = Model::new(ModelConfig::new(12, 12, AttentionKind::Flexible), 4).unwrap();
    let p = pair(&[5, 9, 7, 11], &[5, 9, 7, 11]);
    let batch = Batch::from_pairs(&[&p]);
    let mut adam = AdamState::new(m.params.tensors());
    let first = cross_entropy(&m, &batch).unwrap();
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut g = batch_gradients(&m, &batch, None).unwrap();
        losses.push(g.loss);
        clip_gradients(&mut g.grads, 3.0);
        adam_step(m.params.tensors_mut(), &g.grads, &mut adam, 1e-2).unwrap();
    }
    assert_eq!(losses[0], first);
    assert!(losses[49] < losses[0]);
    assert!(cross_entropy(&m, &batch).unwrap() < 0.1 * first);
    assert_eq!(greedy(&m, &p.source, f64::INFINITY).unwrap().tokens, p.target_tokens());
}

#[test]
fn finetune_objective_arithmetic() {
    assert!((finetune_objective(2.0, &[0.5; 4], 0.1) - 1.95).abs() < 1e-15);
    assert_eq!(finetune_objective(2.0, &[0.5; 4], 0.0), 2.0);
}

#[test]
fn finetune_loss_on_zero_params() {
    // every g(t) is sigmoid(0) = 0.5 and every step is uniform
    let m = Model::zeros(tiny_config(AttentionKind::Flexible)).unwrap();
    let batch = Batch::from_pairs(&[&pair(&[4, 5, 6], &[6, 5, 4])]);
    let ce = cross_entropy(&m, &batch).unwrap();
    assert!((ce - 4.0 * (10f64).ln()).abs() < 1e-12);
    let j = finetune_loss(&m, &batch, 0.1).unwrap();
    assert!((j - finetune_objective(ce, &[0.5; 4], 0.1)).abs() < 1e-12);
    assert!((j - (ce - 0.05)).abs() < 1e-12);
}

#[test]
fn zero_beta_matches_cross_entropy() {
    let m = tiny_model(AttentionKind::Flexible, 6);
    let batch = Batch::from_pairs(&[&pair(&[4, 8, 6], &[8, 4, 6]), &pair(&[5, 7], &[7, 5])]);
    assert_eq!(finetune_loss(&m, &batch, 0.0).unwrap(), cross_entropy(&m, &batch).unwrap());
    let a = batch_gradients(&m, &batch, None).unwrap();
    let b = batch_gradients(&m, &batch, Some(0.0)).unwrap();
    assert_eq!(a.grads, b.grads);
}

#[test]
fn finetune_loss_requires_flexible() {
    for kind in [AttentionKind::Global, AttentionKind::Local] {
        let m = tiny_model(kind, 1);
        let batch = Batch::from_pairs(&[&pair(&[4], &[4])]);
        assert!(matches!(finetune_loss(&m, &batch, 0.1), Err(Error::UnsupportedMode(_))));
        let c = toy_corpus(4);
        let cfg = TrainConfig {
            epochs: 1,
            halve_from_epoch: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(finetune(m, &c, &c, &cfg), Err(Error::UnsupportedMode(_))));
    }
}

#[test]
fn regularizer_pushes_strength_up() {
    let m = tiny_model(AttentionKind::Flexible, 2);
    let batch = Batch::from_pairs(&[&pair(&[4, 8, 6, 5], &[8, 4, 6, 5])]);
    let b_g = m.params.ids().strength.unwrap().b;
    let plain = batch_gradients(&m, &batch, Some(0.0)).unwrap().grads[b_g][0];
    let reg = batch_gradients(&m, &batch, Some(0.1)).unwrap().grads[b_g][0];
    assert!(reg < plain, "{reg} !< {plain}");
    // finite-difference sign of the regularizer's own contribution
    let h = 1e-5;
    let shifted = |delta: f64| {
        let mut m2 = m.clone();
        m2.params.tensors_mut()[b_g].values_mut()[0] += delta;
        finetune_loss(&m2, &batch, 0.1).unwrap() - cross_entropy(&m2, &batch).unwrap()
    };
    assert!((shifted(h) - shifted(-h)) / (2.0 * h) < 0.0);
}

#[test]
fn fine_tuning_objective_gradients() {
    let mut m = tiny_model(AttentionKind::Flexible, 7);
    scale_params(&mut m, 5.0);
    let samples = [pair(&[4, 6, 5], &[6, 4, 5]), pair(&[7, 8], &[8, 7])];
    let err = grad_check_params::<_, Error>(
        |tape| {
            let a = sample_loss(tape, &m, &samples[0].source, &samples[0].target, Some(0.1))?;
            let b = sample_loss(tape, &m, &samples[1].source, &samples[1].target, Some(0.1))?;
            Ok(tape.scale(tape.add(a.loss, b.loss)?, 0.5)?)
        },
        m.params.tensors(),
        1e-5,
        60,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn padding_never_changes_the_loss() {
    let m = tiny_model(AttentionKind::Flexible, 3);
    let p = pair(&[4, 8, 6], &[8, 4, 6]);
    let q = pair(&[5, 7, 9, 4, 6], &[7, 5, 9, 4, 6]);
    let base = Batch::from_pairs(&[&p, &q]);
    let mut padded = base.clone();
    for row in 0..2 {
        for _ in 0..4 {
            padded.source[row].push(PAD);
            padded.source_mask[row].push(false);
            padded.target[row].push(PAD);
            padded.target_mask[row].push(false);
        }
    }
    let a = cross_entropy(&m, &base).unwrap();
    let b = cross_entropy(&m, &padded).unwrap();
    assert!((a - b).abs() < 1e-9);
    assert_eq!(base.sample(0), (p.source.clone(), p.target.clone()));
}

#[test]
fn clip_examples() {
    let mut g = vec![vec![1.2, 0.0], vec![1.6]];
    let before = g.clone();
    assert!((clip_gradients(&mut g, 3.0) - 2.0).abs() < 1e-15);
    assert_eq!(g, before);

    let mut z = vec![vec![0.0; 3], vec![0.0]];
    assert_eq!(clip_gradients(&mut z, 3.0), 0.0);
    assert_eq!(z, vec![vec![0.0; 3], vec![0.0]]);

    let mut g = vec![vec![3.6, 0.0], vec![4.8]];
    assert!((clip_gradients(&mut g, 3.0) - 6.0).abs() < 1e-12);
    assert!((g[0][0] - 1.8).abs() < 1e-12 && (g[1][0] - 2.4).abs() < 1e-12);
}

proptest! {
    #[test]
    fn clipped_norm_is_bounded(vals in prop::collection::vec(-100.0f64..100.0, 1..40), clip in 0.1f64..10.0) {
        let mut g = vec![vals];
        clip_gradients(&mut g, clip);
        let n = g[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(n <= clip + 1e-9);
    }
}

#[test]
fn adam_examples() {
    let mut p = vec![Tensor::vector(vec![0.5, -1.0]).unwrap()];
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[vec![0.0, 0.0]], &mut st, 1e-3).unwrap();
    assert_eq!(p[0].values(), &[0.5, -1.0]);
    assert_eq!(st.m, vec![vec![0.0, 0.0]]);
    assert_eq!(st.v, vec![vec![0.0, 0.0]]);

    let mut p = vec![Tensor::scalar(0.0)];
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[vec![1.0]], &mut st, 1e-4).unwrap();
    let d1 = p[0].values()[0];
    assert!((d1 + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
    assert!((d1 + 1e-4).abs() < 1e-11);
    adam_step(&mut p, &[vec![1.0]], &mut st, 1e-4).unwrap();
    let d2 = p[0].values()[0] - d1;
    assert!(d2 < 0.0 && d2.abs() <= d1.abs());
    assert_eq!(st.step, 2);

    let mut bad = vec![Tensor::scalar(0.0)];
    assert!(adam_step(&mut bad, &[vec![1.0, 2.0]], &mut AdamState::new(&[Tensor::scalar(0.0)]), 1e-3).is_err());
}

#[test]
fn batches_follow_the_sorting_rule() {
    let lens = [5, 2, 9, 2];
    let corpus: Vec<CorpusPair> = lens.iter().map(|&l| pair(&vec![4; l], &[4])).collect();
    let batches = make_batches(&corpus, 2, 3).unwrap();
    let mut groups: Vec<Vec<usize>> = batches.iter().map(|b| (0..b.len()).map(|i| b.sample(i).0.len()).collect()).collect();
    groups.sort();
    assert_eq!(groups, vec![vec![2, 2], vec![5, 9]]);
    for b in &batches {
        let w = b.source[0].len();
        assert!(b.source.iter().all(|r| r.len() == w));
    }

    let one = make_batches(&corpus, 10, 3).unwrap();
    assert_eq!(one.len(), 1);
    let sorted: Vec<usize> = (0..4).map(|i| one[0].sample(i).0.len()).collect();
    assert_eq!(sorted, vec![2, 2, 5, 9]);
    assert_eq!(one[0].source[0], vec![4, 4, PAD, PAD, PAD, PAD, PAD, PAD, PAD]);

    let big = toy_corpus(40);
    assert_eq!(make_batches(&big, 3, 11).unwrap(), make_batches(&big, 3, 11).unwrap());
    assert!(make_batches(&[], 3, 1).is_err());
}

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig {
        lr: 4e-4,
        epochs: 3,
        halve_from_epoch: 2,
        ..TrainConfig::default()
    };
    let lrs: Vec<f64> = (1..=3).map(|e| cfg.epoch_lr(e)).collect();
    assert_eq!(lrs, vec![4e-4, 2e-4, 1e-4]);
    assert_eq!(cfg.final_lr(), 1e-4);
    assert_eq!(TrainConfig { halve_from_epoch: 4, ..cfg.clone() }.final_lr(), 4e-4);
    assert!(TrainConfig { halve_from_epoch: 0, ..cfg.clone() }.validate().is_err());
    assert!(TrainConfig { lr: 0.0, ..cfg }.validate().is_err());
}

fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        lr: 1e-2,
        epochs,
        halve_from_epoch: epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn training_logs_and_is_deterministic() {
    let corpus = toy_corpus(24);
    let model = tiny_model(AttentionKind::Flexible, 5);
    let a = train(model.clone(), &corpus, &corpus[..6], &quick_config(3)).unwrap();
    let b = train(model, &corpus, &corpus[..6], &quick_config(3)).unwrap();
    assert_eq!(a.log.len(), 3);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.last().unwrap().train_loss.to_bits(), b.log.last().unwrap().train_loss.to_bits());
    assert_eq!(a.model.params.tensors(), b.model.params.tensors());
    let lrs: Vec<f64> = a.log.iter().map(|l| l.lr).collect();
    assert_eq!(lrs, vec![1e-2, 1e-2, 5e-3]);
    let line = a.log[0].to_json();
    for key in ["\"epoch\":1", "\"lr\":", "\"train_loss\":", "\"dev_bleu\":", "\"dev_mean_g\":"] {
        assert!(line.contains(key), "{line}");
    }
    let best = a.log.iter().map(|l| l.dev_bleu).fold(f64::MIN, f64::max);
    assert_eq!(a.log[a.best_epoch - 1].dev_bleu, best);
}

#[test]
fn trainer_resumes_exactly() {
    let corpus = toy_corpus(20);
    let model = tiny_model(AttentionKind::Global, 9);
    let cfg = quick_config(3);
    let full = train(model.clone(), &corpus, &corpus[..5], &cfg).unwrap();

    let mut t = Trainer::new(model, cfg.clone()).unwrap();
    t.step_epoch(&corpus, &corpus[..5]).unwrap();
    let (m, adam, best) = (t.model.clone(), t.adam.clone(), t.best.clone());
    let mut resumed = Trainer {
        model: m,
        adam,
        config: cfg,
        epoch: 1,
        best,
        log: t.log.clone(),
    };
    resumed.run(&corpus, &corpus[..5], |_| Ok(())).unwrap();
    assert_eq!(resumed.log, full.log);
    assert_eq!(resumed.model.params.tensors(), full.last.params.tensors());
}

#[test]
fn divergence_is_reported() {
    let mut m = tiny_model(AttentionKind::Global, 1);
    m.params.get_mut("out.w").unwrap().values_mut()[0] = f64::NAN;
    let corpus = toy_corpus(4);
    let err = train(m, &corpus, &corpus, &quick_config(1)).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
}

#[test]
fn finetune_with_zero_beta_is_plain_training() {
    let corpus = toy_corpus(12);
    let model = tiny_model(AttentionKind::Flexible, 4);
    let cfg = TrainConfig { beta: 0.0, ..quick_config(2) };
    let ft = finetune(model.clone(), &corpus, &corpus[..4], &cfg).unwrap();
    let mut manual = model;
    let mut adam = AdamState::new(manual.params.tensors());
    train_epoch(&mut manual, &mut adam, &corpus, &cfg, cfg.epochs + 1, cfg.final_lr(), None).unwrap();
    assert_eq!(ft.model.params.tensors(), manual.params.tensors());
    assert_eq!(ft.log[0].lr, cfg.final_lr());
}

#[test]
fn finetune_raises_held_out_strength() {
    let corpus = toy_corpus(32);
    let model = tiny_model(AttentionKind::Flexible, 8);
    let cfg = TrainConfig { beta: 0.1, ..quick_config(1) };
    let ft = finetune(model, &corpus, &corpus[..8], &cfg).unwrap();
    assert!(ft.mean_g_after > ft.mean_g_before, "{} -> {}", ft.mean_g_before, ft.mean_g_after);
}

#[test]
fn config_keys_round_trip() {
    let cfg = TrainConfig::default();
    let mut back = TrainConfig {
        lr: 9.0,
        ..TrainConfig::default()
    };
    for (k, v) in cfg.to_pairs() {
        back.set(k, &v).unwrap();
    }
    assert_eq!(back, cfg);
    assert!(back.set("learning_rate", "1").is_err());
}
