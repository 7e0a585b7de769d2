use super::*;
use crate::fusion::SchemeKind;
use crate::harness::{generate_task, DataConfig, ExperimentConfig, Variant};
use crate::integrator::{FusionSite, ModuleRole};
use crate::model::ModelConfig;

fn sample(e: &crate::model::Example, hits: Option<Array>) -> Sample {
    Sample {
        id: e.id,
        tokens: e.tokens.clone(),
        mask_pos: e.mask_pos,
        label: e.label,
        hits,
    }
}

struct Fixture {
    train: Vec<Sample>,
    val: Vec<Sample>,
    test: Vec<Sample>,
}

impl Fixture {
    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            val: &self.val,
            test: &self.test,
            hidden: None,
        }
    }
}

/// Two cleanly separated classes with input-text retrieval hits.
fn separable(seed: u64, k: usize, hidden: usize) -> Fixture {
    let data = DataConfig {
        classes: 2,
        shots: 16,
        test_per_class: 20,
        signal: 1.0,
        cross: 0.0,
        encoder_scale: 10.0,
        ..DataConfig::default()
    };
    let task = generate_task(&data, hidden, seed).unwrap();
    let store = task.build_store().unwrap();
    let prep = |xs: &[crate::model::Example]| -> Vec<Sample> {
        xs.iter()
            .map(|e| {
                let hits = store
                    .top_k(&task.encode(e).unwrap(), k, crate::retriever::Metric::L2, Some(e.id))
                    .unwrap()
                    .matrix();
                sample(e, Some(hits))
            })
            .collect()
    };
    Fixture {
        train: prep(&task.train),
        val: prep(&task.val),
        test: prep(&task.test),
    }
}

fn model(candidates: Vec<SchemeKind>, k: usize, hidden: usize, seed: u64) -> EncoderModel {
    let config = ModelConfig {
        hidden,
        ffn_hidden: 2 * hidden,
        label_tokens: vec![4, 5],
        augmentation: if candidates == [SchemeKind::NoFusion] {
            crate::model::Augmentation::None
        } else {
            crate::model::Augmentation::Fusion
        },
        candidates,
        k,
        ..ModelConfig::default()
    };
    EncoderModel::new(config, &mut RngStream::new(seed)).unwrap()
}

fn all_candidates() -> Vec<SchemeKind> {
    vec![SchemeKind::NoFusion, SchemeKind::Reranker, SchemeKind::OrderedMask]
}

#[test]
fn adamw_matches_hand_computed_steps() {
    let mut params = ParamSet::new();
    let id = params.add("theta", Array::vector(vec![1.0]), ParamGroup::Weights);
    let mut opt = AdamW::new(0.1, 0.9, 0.999, 1e-8, 0.01);
    opt.update(&mut params, &[(id, &[0.5])]);
    assert!((params.get(id).data()[0] - 0.899000002).abs() < 1e-12);
    opt.update(&mut params, &[(id, &[-0.25])]);
    assert!((params.get(id).data()[0] - 0.8714672987058463).abs() < 1e-12);
    assert_eq!(opt.steps_taken(), 2);
}

#[test]
fn tau_schedule_is_linear() {
    let c = TrainConfig {
        tau_end: 0.1,
        ..TrainConfig::default()
    };
    assert_eq!(c.tau_at(0, 11), 1.0);
    assert!((c.tau_at(5, 11) - 0.55).abs() < 1e-12);
    assert!((c.tau_at(10, 11) - 0.1).abs() < 1e-12);
    assert!((c.tau_at(99, 11) - 0.1).abs() < 1e-12);
    assert_eq!(c.search_steps(), 200);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr_weights: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            tau_end: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            search_fraction: 1.5,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn batch_sampler_covers_each_epoch() {
    let mut s = BatchSampler::new(10, RngStream::new(4));
    let mut seen: Vec<usize> = (0..2).flat_map(|_| s.next_batch(5)).collect();
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert_eq!(BatchSampler::new(3, RngStream::new(4)).next_batch(8).len(), 3);
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let f = separable(1, 4, 16);
    let mut m = model(all_candidates(), 4, 16, 1);
    let cfg = TrainConfig {
        lr_weights: 0.0,
        lr_arch: 0.0,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let before = m.params.clone();
    let mut t = Trainer::new(cfg, &RngStream::new(2), f.train.len(), f.val.len(), 10);
    t.lower_step(&mut m, &f.splits()).unwrap();
    t.upper_step(&mut m, &f.splits()).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(m.params.iter()) {
        let same = a
            .value
            .data()
            .iter()
            .zip(b.value.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{} changed", a.name);
    }
}

#[test]
fn freeze_contracts_are_bitwise() {
    let f = separable(2, 4, 16);
    let mut m = model(all_candidates(), 4, 16, 2);
    let cfg = TrainConfig {
        batch_size: 4,
        lr_arch: 0.05,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, &RngStream::new(3), f.train.len(), f.val.len(), 10);
    for _ in 0..3 {
        let arch = m.params.group_bytes(ParamGroup::Arch);
        let weights = m.params.group_bytes(ParamGroup::Weights);
        t.lower_step(&mut m, &f.splits()).unwrap();
        assert_eq!(m.params.group_bytes(ParamGroup::Arch), arch);
        assert_ne!(m.params.group_bytes(ParamGroup::Weights), weights);

        let arch = m.params.group_bytes(ParamGroup::Arch);
        let weights = m.params.group_bytes(ParamGroup::Weights);
        t.upper_step(&mut m, &f.splits()).unwrap();
        assert_eq!(m.params.group_bytes(ParamGroup::Weights), weights);
        assert_ne!(m.params.group_bytes(ParamGroup::Arch), arch);
    }
}

#[test]
fn full_batch_loss_decreases() {
    let f = separable(3, 4, 16);
    let mut m = model(vec![SchemeKind::NoFusion], 4, 16, 3);
    let cfg = TrainConfig {
        batch_size: f.train.len(),
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, &RngStream::new(3), f.train.len(), f.val.len(), 50);
    let losses: Vec<f64> = (0..51).map(|_| t.lower_step(&mut m, &f.splits()).unwrap()).collect();
    let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(decreasing >= 45, "{decreasing}/50 decreasing: {losses:?}");
}

#[test]
fn noisy_candidate_loses_weight() {
    let f = separable(4, 4, 16);
    let mut m = model(all_candidates(), 4, 16, 4);
    assert_eq!(m.set_candidate_noise(SchemeKind::Reranker, 3.0), 4);
    let cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, &RngStream::new(5), f.train.len(), f.val.len(), 100);
    let site = FusionSite {
        layer: 0,
        role: ModuleRole::Key,
    };
    for _ in 0..100 {
        t.upper_step(&mut m, &f.splits()).unwrap();
    }
    let w = &alpha_snapshot(&m)[&site.to_string()];
    assert!(w[1] < 1.0 / 3.0, "{w:?}");
}

#[test]
fn zero_step_search_returns_initial_state() {
    let f = separable(5, 4, 16);
    let mut m = model(all_candidates(), 4, 16, 5);
    let before = m.params.clone();
    let mut t = Trainer::new(
        TrainConfig::default(),
        &RngStream::new(1),
        f.train.len(),
        f.val.len(),
        10,
    );
    let mut log = Vec::new();
    let arch = t.search(&mut m, &f.splits(), 0, &mut log).unwrap();
    assert!(log.is_empty());
    assert_eq!(m.params, before);
    assert!(arch.choices.iter().all(|(_, k)| *k == SchemeKind::NoFusion));
}

#[test]
fn search_log_has_one_entry_per_step() {
    let f = separable(6, 4, 16);
    let mut m = model(all_candidates(), 4, 16, 6);
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg, &RngStream::new(1), f.train.len(), f.val.len(), 7);
    let mut log = Vec::new();
    t.search(&mut m, &f.splits(), 7, &mut log).unwrap();
    assert_eq!(log.len(), 7);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.step, i);
        assert!(r.train_loss.is_finite() && r.val_loss.unwrap().is_finite());
        assert_eq!(r.alpha.len(), 4);
        for w in r.alpha.values() {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
    assert!(log[6].tau < log[0].tau);
}

#[test]
fn all_no_fusion_reduces_to_baseline() {
    let f = separable(7, 4, 16);
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut fused = model(all_candidates(), 4, 16, 7);
    let arch = Architecture {
        choices: fused
            .config
            .fusion_sites
            .iter()
            .map(|s| (*s, SchemeKind::NoFusion))
            .collect(),
    };
    let mut t = Trainer::new(cfg.clone(), &RngStream::new(9), f.train.len(), f.val.len(), 20);
    let mut log = Vec::new();
    let a = finetune_discretized(&mut t, &mut fused, &arch, &f.splits(), 20, &mut log).unwrap();

    let mut plain = model(vec![SchemeKind::NoFusion], 4, 16, 7);
    let mut t = Trainer::new(cfg, &RngStream::new(9), f.train.len(), f.val.len(), 20);
    let mut log_b = Vec::new();
    t.finetune(&mut plain, &f.splits(), 20, &mut log_b).unwrap();
    let b = evaluate(&plain, &f.test, None).unwrap();
    assert_eq!(a, b);
    let losses = |l: &[StepRecord]| l.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&log), losses(&log_b));
}

#[test]
fn metrics_are_well_formed() {
    let f = separable(8, 4, 16);
    let m = model(all_candidates(), 4, 16, 8);
    let metrics = evaluate(&m, &f.test, None).unwrap();
    assert!((0.0..=1.0).contains(&metrics.accuracy));
    assert_eq!(metrics.per_class_total.iter().sum::<usize>(), f.test.len());
    assert_eq!(metrics.per_class_correct.iter().sum::<usize>(), metrics.correct);
}

#[test]
fn non_finite_loss_aborts() {
    let f = separable(9, 4, 16);
    let mut m = model(vec![SchemeKind::NoFusion], 4, 16, 9);
    let id = m.params.find("ln_final.gain").unwrap();
    m.params.get_mut(id).data_mut()[0] = f64::NAN;
    let mut t = Trainer::new(
        TrainConfig::default(),
        &RngStream::new(1),
        f.train.len(),
        f.val.len(),
        10,
    );
    assert!(matches!(
        t.lower_step(&mut m, &f.splits()),
        Err(Error::NonFinite { step: 0, .. })
    ));
}

#[test]
fn separable_task_with_fusion_is_learned() {
    let mut config = ExperimentConfig::default();
    config.seeds = vec![13];
    config.data = DataConfig {
        signal: 0.9,
        cross: 0.0,
        encoder_scale: 10.0,
        ..DataConfig::default()
    };
    let run = crate::harness::run_seed(&config, Variant::RerankerOnly, 13, crate::harness::Stage::Full).unwrap();
    let acc = run.metrics.unwrap().accuracy;
    assert!(acc >= 0.9, "{acc}");
}
