use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, GradCheckConfig};
use crate::data::{gen_corpus, SynthConfig};
use crate::nn::ModelConfig;
use crate::proxy::{LossSet, MaskConfig};
use crate::sampling::{Scheme, StepConfig};
use crate::train::{pretrain, RunFiles, TrainConfig};

fn tiny_data(seed: u64, n_train: usize, n_test: usize) -> (TaskData, TaskData) {
    let c = gen_corpus(&SynthConfig::for_model(&ModelConfig::tiny()), seed, n_train, 0, n_test).unwrap();
    (TaskData::from_items(&c.train), TaskData::from_items(&c.test))
}

fn tiny_model(seed: u64) -> TdenModel {
    TdenModel::new(ModelConfig::tiny(), seed).unwrap()
}

fn quick(steps: u64) -> FinetuneConfig {
    FinetuneConfig {
        steps,
        batch_size: 4,
        retrieval_pool: 10,
        ..FinetuneConfig::default()
    }
}

fn joint_feature(m: &TdenModel, head: &TaskHead, data: &TaskData) -> Vec<f64> {
    let TaskHead::Classification { pool, .. } = head else {
        panic!("classification head expected")
    };
    let mut g = m.frozen_graph();
    let f = pool
        .forward(&mut g, m, &question_tokens(&data.annotations[0]), &data.records[0].regions)
        .unwrap();
    assert_eq!(g.shape(f), &[1, m.config.d_model]);
    g.value(f).data().to_vec()
}

#[test]
fn joint_feature_depends_on_encoder_and_decoder() {
    let (_, test) = tiny_data(1, 0, 2);
    let mut m = tiny_model(2);
    let head = TaskHead::attach(&mut m, TaskKind::Classification, 0);
    let base = joint_feature(&m, &head, &test);
    for group in [Group::CrossEncoder, Group::CrossDecoder] {
        let mut p = m.clone();
        let i = p.params.indices_in(group).next().unwrap();
        p.params.tensor_mut(i).data_mut()[0] += 0.1;
        let moved = joint_feature(&p, &head, &test);
        let diff: f64 = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-8, "{group:?} has no effect");
    }
}

#[test]
fn joint_feature_gradient_check() {
    let (_, test) = tiny_data(1, 0, 1);
    let mut m = tiny_model(4);
    let head = TaskHead::attach(&mut m, TaskKind::Classification, 1);
    let TaskHead::Classification { pool, output } = &head else {
        unreachable!()
    };
    let (rec, ann) = (&test.records[0], &test.annotations[0]);
    let rep = grad_check(
        |g| {
            let z = classification_logits(g, &m, pool, output, rec, ann)?;
            let mut t = Tensor::zeros(&[1, m.config.n_attributes]);
            t.data_mut()[ann.answer] = 1.0;
            g.bce_with_logits(z, &t)
        },
        m.params.tensors(),
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn untrained_classifier_is_at_chance() {
    let cfg = ModelConfig::desk();
    let c = gen_corpus(&SynthConfig::for_model(&cfg), 3, 0, 0, 240).unwrap();
    let test = TaskData::from_items(&c.test);
    let mut m = TdenModel::new(cfg, 5).unwrap();
    let head = TaskHead::attach(&mut m, TaskKind::Classification, 5);
    let acc = evaluate_task(&m, &head, &test, &FinetuneConfig::default()).unwrap()[0].1;
    let p: f64 = 1.0 / 24.0;
    let sigma = (p * (1.0 - p) / 240.0).sqrt();
    assert!((acc - p).abs() < 4.0 * sigma, "{acc}");
}

#[test]
fn finetuning_is_deterministic() {
    let (train, test) = tiny_data(2, 16, 10);
    let m = tiny_model(1);
    for task in TaskKind::ALL {
        let (a, _, ra) = finetune(&m, task, &train, &test, &quick(3)).unwrap();
        let (b, _, rb) = finetune(&m, task, &train, &test, &quick(3)).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params, b.params);
        assert!(ra.losses.iter().all(|l| l.is_finite()));
    }
}

#[test]
fn finetuning_reduces_training_loss() {
    let (train, test) = tiny_data(4, 8, 10);
    let m = tiny_model(2);
    let cfg = FinetuneConfig {
        steps: 40,
        batch_size: 8,
        adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        head_lr_scale: 1.0,
        retrieval_pool: 10,
        ..FinetuneConfig::default()
    };
    for task in [TaskKind::Classification, TaskKind::Captioning] {
        let (_, _, r) = finetune(&m, task, &train, &test, &cfg).unwrap();
        assert!(r.losses[39] < 0.7 * r.losses[0], "{task:?} {:?}", r.losses);
    }
}

fn brute_force_recall(sim: &[Vec<f64>], k: usize) -> f64 {
    let n = sim.len();
    let mut hits = 0;
    for (i, row) in sim.iter().enumerate() {
        // sort with the paired image placed after every tie
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then((a == i).cmp(&(b == i))));
        if order.iter().position(|&j| j == i).unwrap() < k {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

#[test]
fn recall_matches_sort_oracle_and_is_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50 {
        let n = 10 + trial;
        // coarse values force ties
        let sim: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| (rng.random::<f64>() * 8.0).floor()).collect())
            .collect();
        let r = recall_at(&sim, &[1, 5, 10]).unwrap();
        for (x, k) in r.iter().zip([1, 5, 10]) {
            assert_eq!(*x, brute_force_recall(&sim, k));
        }
        assert!(r[0] <= r[1] && r[1] <= r[2]);
    }
}

#[test]
fn recall_extremes() {
    let n = 100;
    let perfect: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(i == j)).collect()).collect();
    assert_eq!(recall_at(&perfect, &[1]).unwrap()[0], 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut r1, mut r10) = (0.0, 0.0);
    let trials = 200;
    for _ in 0..trials {
        let sim: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random()).collect()).collect();
        let r = recall_at(&sim, &[1, 10]).unwrap();
        r1 += r[0] / trials as f64;
        r10 += r[1] / trials as f64;
    }
    // 20 000 rankings: σ(R@1) ≈ 7e-4, σ(R@10) ≈ 2.1e-3
    assert!((r1 - 0.01).abs() < 0.003, "{r1}");
    assert!((r10 - 0.10).abs() < 0.009, "{r10}");
}

#[test]
fn retrieval_pool_below_ten_is_rejected() {
    let (_, test) = tiny_data(1, 0, 9);
    let m = tiny_model(0);
    assert!(matches!(
        retrieval_similarities(&m, &test.records, 9),
        Err(TdenError::Contract(_))
    ));
    assert!(matches!(
        retrieval_similarities(&m, &test.records, 10),
        Err(TdenError::Contract(_))
    ));
}

#[test]
fn cross_placement_retrieval_matches_batched_similarity() {
    let (_, test) = tiny_data(6, 0, 10);
    let mut cfg = ModelConfig::tiny();
    cfg.ism_placement = IsmPlacement::Cross;
    let m = TdenModel::new(cfg, 2).unwrap();
    let sim = retrieval_similarities(&m, &test.records, 10).unwrap();
    let mut g = m.frozen_graph();
    let (mut s, mut v) = (Vec::new(), Vec::new());
    for r in &test.records {
        s.push(m.encode_sentence(&mut g, &r.tokens(), false).unwrap());
        v.push(m.encode_objects(&mut g, &r.regions).unwrap());
    }
    let full = crate::proxy::ism_similarity(&mut g, &m, &s, &v).unwrap();
    let full = g.value(full).data().to_vec();
    for i in 0..10 {
        for j in 0..10 {
            assert!((sim[i][j] - full[i * 10 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn identical_choices_score_exactly_chance() {
    let (_, mut test) = tiny_data(3, 0, 40);
    for a in &mut test.annotations {
        let c = a.choices[0].clone();
        a.choices = vec![c; 4];
    }
    let mut m = tiny_model(3);
    let head = TaskHead::attach(&mut m, TaskKind::Multichoice, 3);
    let acc = evaluate_task(&m, &head, &test, &FinetuneConfig::default()).unwrap()[0].1;
    assert_eq!(acc, 0.25);
}

#[test]
fn multichoice_scores_match_single_choice_recomputation() {
    let (_, test) = tiny_data(3, 0, 3);
    let mut m = tiny_model(3);
    let head = TaskHead::attach(&mut m, TaskKind::Multichoice, 4);
    let TaskHead::Multichoice { pool, output } = &head else {
        unreachable!()
    };
    for (rec, ann) in test.records.iter().zip(&test.annotations) {
        let mut g = m.frozen_graph();
        let s = multichoice_scores(&mut g, &m, pool, output, rec, ann).unwrap();
        let batched = g.value(s).data().to_vec();
        for (c, &b) in batched.iter().enumerate() {
            let mut g = m.frozen_graph();
            let f = pool.forward(&mut g, &m, &choice_tokens(ann, c), &rec.regions).unwrap();
            let z = output.forward(&mut g, f).unwrap();
            assert_eq!(g.scalar(z), b);
        }
    }
}

#[test]
fn argmax_credit_splits_ties() {
    assert_eq!(argmax_credit(&[0.1, 0.9, 0.3], 1), 1.0);
    assert_eq!(argmax_credit(&[0.1, 0.9, 0.3], 2), 0.0);
    assert_eq!(argmax_credit(&[0.5, 0.5, 0.5, 0.5], 3), 0.25);
}

#[test]
fn beam_of_one_is_greedy_and_outputs_are_clean() {
    let (_, test) = tiny_data(5, 0, 8);
    let m = tiny_model(6);
    for r in &test.records {
        let g = decode(&m, &r.regions, DecodeMode::Greedy, 11).unwrap();
        let b = decode(&m, &r.regions, DecodeMode::Beam(1), 11).unwrap();
        assert_eq!(g, b);
        let caption = generate_caption(&m, &r.regions, DecodeMode::Beam(3)).unwrap();
        assert!(caption.len() <= 11);
        assert!(caption.iter().chain(&g.words).all(|&w| w != MASK && w != CLS && w != IMG && w != SEP));
        let lp = sequence_log_prob(&m, &r.regions, &g.words, g.length > g.words.len()).unwrap();
        assert!((lp - g.log_prob).abs() < 1e-12);
    }
}

/// Best normalized score over every sequence of at most `max_steps` tokens.
fn brute_force(m: &TdenModel, image: &Tensor, max_steps: usize) -> Decoded {
    fn walk(m: &TdenModel, image: &Tensor, prefix: &mut Vec<usize>, lp: f64, left: usize, best: &mut Option<Decoded>) {
        if left == 0 {
            let d = finish(prefix, lp);
            if best.as_ref().is_none_or(|b| d.normalized_score() > b.normalized_score()) {
                *best = Some(d);
            }
            return;
        }
        let next = next_log_probs(m, image, prefix).unwrap();
        for (id, &l) in next.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            prefix.push(id);
            if id == SEP {
                walk(m, image, prefix, lp + l, 0, best);
            } else {
                walk(m, image, prefix, lp + l, left - 1, best);
            }
            prefix.pop();
        }
    }
    let mut best = None;
    walk(m, image, &mut vec![CLS], 0.0, max_steps, &mut best);
    best.unwrap()
}

#[test]
fn beam_search_on_exhaustive_toy() {
    // [CLS] + three words + [SEP] fills a length-5 sequence
    let steps = 4;
    let (_, test) = tiny_data(7, 0, 2);
    let m = tiny_model(8);
    for r in &test.records {
        let image = encode_image(&m, &r.regions).unwrap();
        let oracle = brute_force(&m, &image, steps);
        let wide = decode(&m, &r.regions, DecodeMode::Beam(10_000), steps).unwrap();
        assert_eq!(wide.words, oracle.words);
        assert!((wide.normalized_score() - oracle.normalized_score()).abs() < 1e-12);
        let greedy = decode(&m, &r.regions, DecodeMode::Greedy, steps).unwrap();
        let mut last = greedy.log_prob;
        for k in 2..=5 {
            let b = decode(&m, &r.regions, DecodeMode::Beam(k), steps).unwrap();
            assert!(b.log_prob >= last - 1e-12, "k={k}: {} < {last}", b.log_prob);
            last = b.log_prob;
        }
    }
}

#[test]
fn caption_metrics() {
    let a = vec![vec![4, 9, 10], vec![4, 11, 12]];
    let s = eval_caption(&a, &a).unwrap();
    assert_eq!((s.exact_match, s.token_f1), (1.0, 1.0));
    let s = eval_caption(&[vec![4, 9]], &[vec![10, 11]]).unwrap();
    assert_eq!((s.exact_match, s.token_f1), (0.0, 0.0));
    // overlap {4, 9}: P = 2/3, R = 2/4, F1 = 4/7
    let s = eval_caption(&[vec![4, 9, 10]], &[vec![4, 9, 11, 12]]).unwrap();
    assert_eq!(s.exact_match, 0.0);
    assert!((s.token_f1 - 4.0 / 7.0).abs() < 1e-15);
    // repeated tokens count once per reference occurrence: overlap 1, P = 1/2, R = 1
    assert!((token_f1(&[4, 4], &[4]) - 2.0 / 3.0).abs() < 1e-15);
    assert!(eval_caption(&[vec![1]], &[]).is_err());
}

#[test]
fn separate_pretraining_then_mismatched_finetuning_runs() {
    let c = gen_corpus(&SynthConfig::for_model(&ModelConfig::tiny()), 8, 16, 4, 10).unwrap();
    let recs: Vec<DatasetRecord> = c.train.iter().map(|i| i.record.clone()).collect();
    let val: Vec<DatasetRecord> = c.val.iter().map(|i| i.record.clone()).collect();
    let (train, test) = (TaskData::from_items(&c.train), TaskData::from_items(&c.test));
    let presets = [
        (LossSet { msg: false, ..LossSet::ALL }, TaskKind::Captioning),
        (LossSet { mlm: false, moc: false, ..LossSet::ALL }, TaskKind::Classification),
    ];
    for (losses, task) in presets {
        let mut m = tiny_model(1);
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 4,
            eval_size: 4,
            step: StepConfig {
                scheme: Scheme::None,
                losses,
                ..StepConfig::default()
            },
            mask: MaskConfig::default(),
            ..TrainConfig::default()
        };
        pretrain(&mut m, &recs, &val, &cfg, "", None, &RunFiles::default()).unwrap();
        let (_, _, r) = finetune(&m, task, &train, &test, &quick(2)).unwrap();
        assert!(r.headline().is_finite());
    }
}
