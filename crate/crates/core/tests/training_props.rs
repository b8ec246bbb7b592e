mod common;

use std::collections::BTreeSet;

use common::{cyclic_match, domain, random_samples};
use ctsdg::data::{DomainDataset, Label, SequenceSample};
use ctsdg::eval::accuracy;
use ctsdg::model::{ErmParams, SequenceClassifier};
use ctsdg::nn::ParamSet;
use ctsdg::objective::{cross_entropy, matching_loss, BatchRep, Metric, Reduction};
use ctsdg::tensor::Array2;
use ctsdg::training::*;
use ctsdg::vrnn::VrnnParams;
use ctsdg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn adam_descends_quadratic_bowl() {
    let mut p = ParamSet::new();
    p.push("x", Array2::scalar(5.0));
    let mut st = AdamState::new(&p);
    for _ in 0..2000 {
        let g = Array2::scalar(2.0 * p.get(0).data()[0]);
        adam_step(&mut p, &[g], &mut st, 0.01).unwrap();
    }
    assert!(p.get(0).data()[0].abs() < 1e-3, "{}", p.get(0).data()[0]);
}

fn balanced(id: &str, n: usize, rng: &mut ChaCha8Rng) -> DomainDataset {
    let mut s = random_samples(rng, n, &[id]);
    for x in s.iter_mut() {
        x.sample_id = format!("{id}-{}", x.sample_id);
    }
    domain(id, s)
}

#[test]
fn split_is_stratified_disjoint_and_complete() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = balanced("A", 100, &mut rng);
    let (train, val) = split_train_val(std::slice::from_ref(&d), 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!((train.len(), val.len()), (80, 20));
    let count = |v: &[SequenceSample], y| v.iter().filter(|s| s.y == y).count();
    assert_eq!(count(&val, Label::Pass), 10);
    assert_eq!(count(&train, Label::Yield), 40);
    let t: BTreeSet<&str> = train.iter().map(|s| s.sample_id.as_str()).collect();
    let v: BTreeSet<&str> = val.iter().map(|s| s.sample_id.as_str()).collect();
    assert!(t.is_disjoint(&v));
    let all: BTreeSet<&str> = d.samples.iter().map(|s| s.sample_id.as_str()).collect();
    assert_eq!(t.union(&v).copied().collect::<BTreeSet<_>>(), all);
    let (train2, _) = split_train_val(std::slice::from_ref(&d), 0.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(train, train2);
    assert!(split_train_val(&[d], 0.0, &mut rng).is_err());
}

#[test]
fn missing_class_is_a_data_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut d = balanced("A", 10, &mut rng);
    d.samples.iter_mut().for_each(|s| s.y = Label::Pass);
    assert!(matches!(split_train_val(&[d], 0.2, &mut rng), Err(Error::Data(_))));
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        phase1_threshold: 2,
        batch: 8,
        ..TrainConfig::default()
    }
}

fn two_domains(seed: u64) -> Vec<DomainDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![balanced("A", 20, &mut rng), balanced("B", 20, &mut rng)]
}

#[test]
fn single_phase1_epoch_updates_match_once() {
    let cfg = TrainConfig {
        epochs: 1,
        phase1_threshold: 1,
        ..small_cfg()
    };
    let (_, r) = train_ctsdg(&cfg, &two_domains(3)).unwrap();
    assert_eq!(r.epochs.len(), 1);
    assert_eq!(r.epochs[0].phase, Phase::Contrastive);
    assert!(r.phase1_match_distance.is_some());
    assert!(r.best_val.is_none());
}

#[test]
fn single_source_rejected() {
    let d = two_domains(4);
    assert!(matches!(train_ctsdg(&small_cfg(), &d[..1]), Err(Error::Config(_))));
    train_erm(&small_cfg(), &d[..1]).unwrap();
}

#[test]
fn training_is_deterministic_per_seed() {
    let d = two_domains(5);
    let (m1, r1) = train_ctsdg(&small_cfg(), &d).unwrap();
    let (m2, r2) = train_ctsdg(&small_cfg(), &d).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
    let (_, r3) = train_ctsdg(&TrainConfig { seed: 1, ..small_cfg() }, &d).unwrap();
    assert_ne!(r1.epochs, r3.epochs);
    let (e1, q1) = train_erm(&small_cfg(), &d).unwrap();
    let (e2, q2) = train_erm(&small_cfg(), &d).unwrap();
    assert_eq!((e1, q1), (e2, q2));
}

#[test]
fn zero_epoch_erm_returns_initial_params() {
    let d = two_domains(6);
    let cfg = TrainConfig { epochs: 0, ..small_cfg() };
    let (m, r) = train_erm(&cfg, &d).unwrap();
    assert!(r.epochs.is_empty());
    let init = ErmParams::init(&mut stream_rng(cfg.seed, STREAM_INIT), cfg.init_scale).unwrap();
    assert_eq!(m, init);
}

/// Class-separable toy: the class shifts every feature by ±1.5.
fn separable(id: &str, offset: f64, n: usize, rng: &mut ChaCha8Rng) -> DomainDataset {
    let noise = Normal::new(0.0, 0.5).unwrap();
    let samples = (0..n)
        .map(|i| {
            let y = if i % 2 == 0 { Label::Pass } else { Label::Yield };
            let sign = if y == Label::Pass { 1.5 } else { -1.5 };
            let data = (0..40).map(|_| sign + offset + noise.sample(rng)).collect();
            SequenceSample {
                sample_id: format!("{id}-{i:04}"),
                domain_id: id.to_string(),
                y,
                x: Array2::new(10, 4, data).unwrap(),
            }
        })
        .collect();
    domain(id, samples)
}

#[test]
fn separable_toy_is_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let d = vec![separable("A", 0.0, 100, &mut rng), separable("B", 0.7, 100, &mut rng)];
    let cfg = TrainConfig {
        epochs: 30,
        phase1_threshold: 5,
        ..TrainConfig::default()
    };
    let all: Vec<SequenceSample> = d.iter().flat_map(|x| x.samples.clone()).collect();
    let (v, _) = train_ctsdg(&cfg, &d).unwrap();
    let (e, _) = train_erm(&cfg, &d).unwrap();
    let (av, ae) = (accuracy(&v, &all).unwrap(), accuracy(&e, &all).unwrap());
    assert!(av >= 95.0 && ae >= 95.0, "ctsdg {av} erm {ae}");
}

#[test]
fn early_stopping_restores_best_parameters() {
    // random labels: validation loss soon stops improving
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut train = random_samples(&mut rng, 48, &["A", "B"]);
    let mut val = random_samples(&mut rng, 16, &["A", "B"]);
    val.iter_mut().for_each(|s| s.sample_id = format!("v{}", s.sample_id));
    for s in train.iter_mut().chain(val.iter_mut()) {
        s.y = if rng.gen() { Label::Pass } else { Label::Yield };
    }
    let cfg = TrainConfig {
        epochs: 200,
        phase1_threshold: 2,
        patience: 4,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    for ctsdg in [true, false] {
        let (total, r) = if ctsdg {
            let (m, r) = train_ctsdg_split(&cfg, &train, &val).unwrap();
            (evaluate_losses(&m, &cfg, Phase::Full, &val).unwrap().total, r)
        } else {
            let (m, r) = train_erm_split(&cfg, &train, &val).unwrap();
            (evaluate_losses(&m, &cfg, Phase::Erm, &val).unwrap().total, r)
        };
        assert_eq!(r.stop_reason, StopReason::EarlyStop, "ctsdg={ctsdg}");
        let best = r.best_epoch.unwrap();
        let last = r.epochs.last().unwrap().epoch;
        assert_eq!(last - best, cfg.patience);
        for e in &r.epochs[best + 1..] {
            assert!(e.val.total >= r.best_val.unwrap());
        }
        for (k, e) in r.epochs.iter().enumerate().filter(|(_, e)| e.phase != Phase::Contrastive) {
            if k > best {
                continue;
            }
            let prior_best = r.epochs[..k]
                .iter()
                .filter(|p| p.phase != Phase::Contrastive)
                .map(|p| p.val.total)
                .fold(f64::INFINITY, f64::min);
            if k == best {
                assert!(e.val.total < prior_best);
            }
        }
        assert_eq!(total, r.best_val.unwrap(), "re-evaluated best loss, ctsdg={ctsdg}");
    }
}

fn batch_fixture() -> (VrnnParams, Vec<SequenceSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = VrnnParams::init(&mut rng, 1.0).unwrap();
    (model, random_samples(&mut rng, 8, &["A", "B"]))
}

#[test]
fn no_classification_gradient_in_phase_one() {
    let (model, samples) = batch_fixture();
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let om = cyclic_match(&samples);
    let cfg = TrainConfig {
        no_contrast: true,
        ..TrainConfig::default()
    };
    let out = batch_objective(&model, &cfg, Phase::Contrastive, &refs, &om, None).unwrap();
    let grads = out.grads.unwrap();
    let names = model.params().names();
    let mut saw_head = false;
    for (n, g) in names.iter().zip(&grads) {
        if n.starts_with("hyp") {
            saw_head = true;
            assert!(g.data().iter().all(|v| *v == 0.0), "{n} has gradient");
        }
    }
    assert!(saw_head);
    // with the contrastive term on, the head learns through it alone
    let full = batch_objective(&model, &TrainConfig::default(), Phase::Contrastive, &refs, &om, None).unwrap();
    assert!(full.losses.l_con > 0.0 && full.pairs > 0);
    assert_eq!(full.losses.total, full.losses.l_con + 1e-4 * full.losses.l_v);
}

#[test]
fn ablation_identity_reduces_to_ce_plus_matching() {
    let (model, samples) = batch_fixture();
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let om = cyclic_match(&samples);
    let cfg = TrainConfig {
        no_lv: true,
        no_contrast: true,
        metric: Metric::L2,
        lambda: 0.7,
        ..TrainConfig::default()
    };
    let out = batch_objective(&model, &cfg, Phase::Full, &refs, &om, None).unwrap();
    let preds = ctsdg::model::predict_batch(&model, &refs).unwrap();
    let ce: f64 = preds
        .iter()
        .zip(&samples)
        .map(|(p, s)| cross_entropy(&p.logits, s.y).unwrap())
        .sum::<f64>()
        / samples.len() as f64;
    let reps: Vec<BatchRep> = preds
        .iter()
        .zip(&samples)
        .map(|(p, s)| BatchRep {
            sample_id: s.sample_id.clone(),
            domain_id: s.domain_id.clone(),
            y: s.y,
            c: p.logits.clone(),
        })
        .collect();
    let lr = matching_loss(&reps, &om, Metric::L2).unwrap();
    assert!((out.losses.total - (ce + 0.7 * lr)).abs() < 1e-12);
    assert!((out.losses.l_y - ce).abs() < 1e-12);
    let summed = batch_objective(&model, &TrainConfig { reduction: Reduction::Sum, ..cfg }, Phase::Full, &refs, &om, None).unwrap();
    assert!((summed.losses.l_y - ce * samples.len() as f64).abs() < 1e-9);
}
