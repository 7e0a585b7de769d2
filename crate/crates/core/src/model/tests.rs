use super::*;
use crate::autodiff::gradcheck::GradCheck;

fn tiny(aug: Augmentation, candidates: Vec<SchemeKind>) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        hidden: 8,
        heads: 2,
        ffn_hidden: 16,
        vocab: 16,
        max_len: 24,
        label_tokens: vec![4, 5],
        augmentation: aug,
        fusion_sites: default_sites(1),
        candidates,
        k: 3,
        ..ModelConfig::default()
    }
}

fn hits(k: usize, d: usize, seed: u64) -> Array {
    let mut rng = RngStream::new(seed);
    Array::new(vec![k, d], (0..k * d).map(|_| rng.normal()).collect()).unwrap()
}

fn example() -> Example {
    Example::from_body(7, &[8, 9, 10, 11], 1)
}

fn logits(model: &EncoderModel, ex: &Example, retrieval: Retrieval<'_>) -> Vec<f64> {
    let input = ModelInput {
        tokens: &ex.tokens,
        mask_pos: ex.mask_pos,
        retrieval,
    };
    model.predict(input, &mut RngStream::new(0), true).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny(Augmentation::None, vec![]);
    let m1 = EncoderModel::new(cfg.clone(), &mut RngStream::new(3)).unwrap();
    let m2 = EncoderModel::new(cfg, &mut RngStream::new(3)).unwrap();
    let ex = example();
    assert_eq!(
        bits(&logits(&m1, &ex, Retrieval::Off)),
        bits(&logits(&m2, &ex, Retrieval::Off))
    );
}

#[test]
fn no_fusion_ignores_hits() {
    let h = hits(3, 8, 1);
    for cfg in [
        tiny(Augmentation::None, vec![]),
        tiny(Augmentation::Fusion, vec![SchemeKind::NoFusion]),
    ] {
        let m = EncoderModel::new(cfg, &mut RngStream::new(5)).unwrap();
        let ex = example();
        assert_eq!(
            bits(&logits(&m, &ex, Retrieval::Off)),
            bits(&logits(&m, &ex, Retrieval::Static(&h)))
        );
    }
}

#[test]
fn fusion_changes_logits_and_needs_hits() {
    let m = EncoderModel::new(
        tiny(Augmentation::Fusion, vec![SchemeKind::Reranker]),
        &mut RngStream::new(5),
    )
    .unwrap();
    let ex = example();
    let h = hits(3, 8, 2);
    let plain = EncoderModel::new(tiny(Augmentation::None, vec![]), &mut RngStream::new(5)).unwrap();
    assert_ne!(
        logits(&m, &ex, Retrieval::Static(&h)),
        logits(&plain, &ex, Retrieval::Off)
    );
    let input = ModelInput {
        tokens: &ex.tokens,
        mask_pos: ex.mask_pos,
        retrieval: Retrieval::Off,
    };
    assert!(m.predict(input, &mut RngStream::new(0), true).is_err());
}

#[test]
fn single_label_loss_is_zero() {
    let mut cfg = tiny(Augmentation::None, vec![]);
    cfg.label_tokens = vec![4];
    let m = EncoderModel::new(cfg, &mut RngStream::new(1)).unwrap();
    let ex = Example::from_body(0, &[8, 9], 0);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, None);
    let input = ModelInput {
        tokens: &ex.tokens,
        mask_pos: ex.mask_pos,
        retrieval: Retrieval::Off,
    };
    let loss = m
        .loss(&mut tape, &b, &[(input, 0)], &mut RngStream::new(0), true)
        .unwrap();
    assert_eq!(tape.value(loss).data()[0], 0.0);
}

#[test]
fn uniform_logits_give_ln2() {
    let mut m = EncoderModel::new(tiny(Augmentation::None, vec![]), &mut RngStream::new(1)).unwrap();
    let emb = m.token_embedding;
    let d = m.config.hidden;
    for &t in &[4usize, 5] {
        m.params.get_mut(emb).data_mut()[t * d..(t + 1) * d].fill(0.0);
    }
    let ex = example();
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, None);
    let input = ModelInput {
        tokens: &ex.tokens,
        mask_pos: ex.mask_pos,
        retrieval: Retrieval::Off,
    };
    let loss = m
        .loss(&mut tape, &b, &[(input, 1)], &mut RngStream::new(0), true)
        .unwrap();
    assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn random_init_loss_near_log_num_labels() {
    let cfg = ModelConfig {
        vocab: 32,
        label_tokens: vec![4, 5, 6, 7],
        ..ModelConfig::default()
    };
    for seed in 0..20 {
        let m = EncoderModel::new(cfg.clone(), &mut RngStream::new(seed)).unwrap();
        let mut data = RngStream::new(1000 + seed);
        let examples: Vec<Example> = (0..32)
            .map(|i| {
                let body: Vec<usize> = (0..6).map(|_| 8 + data.below(24)).collect();
                Example::from_body(i, &body, data.below(4))
            })
            .collect();
        let batch: Vec<(ModelInput<'_>, usize)> = examples
            .iter()
            .map(|e| {
                (
                    ModelInput {
                        tokens: &e.tokens,
                        mask_pos: e.mask_pos,
                        retrieval: Retrieval::Off,
                    },
                    e.label,
                )
            })
            .collect();
        let mut tape = Tape::new();
        let b = m.params.bind(&mut tape, None);
        let loss = m.loss(&mut tape, &b, &batch, &mut RngStream::new(0), true).unwrap();
        let v = tape.value(loss).data()[0];
        assert!((v - 4f64.ln()).abs() <= 0.5, "seed {seed}: {v}");
    }
}

#[test]
fn attention_rows_are_normalized() {
    let m = EncoderModel::new(ModelConfig::default(), &mut RngStream::new(9)).unwrap();
    let ex = Example::from_body(0, &[10, 11, 12, 13, 14], 2);
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, None);
    let input = ModelInput {
        tokens: &ex.tokens,
        mask_pos: ex.mask_pos,
        retrieval: Retrieval::Off,
    };
    let out = m.forward(&mut tape, &b, input, &mut RngStream::new(0), true).unwrap();
    assert_eq!(out.attention.len(), 4);
    for a in out.attention {
        let v = tape.value(a);
        assert_eq!(v.shape(), &[ex.tokens.len(), ex.tokens.len()]);
        for r in 0..v.rows() {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn rejects_overlong_and_bad_mask() {
    let m = EncoderModel::new(tiny(Augmentation::None, vec![]), &mut RngStream::new(0)).unwrap();
    let long = Example::from_body(0, &[8; 30], 0);
    let input = ModelInput {
        tokens: &long.tokens,
        mask_pos: long.mask_pos,
        retrieval: Retrieval::Off,
    };
    assert!(m.predict(input, &mut RngStream::new(0), true).is_err());
    let ex = example();
    let input = ModelInput {
        tokens: &ex.tokens,
        mask_pos: 1,
        retrieval: Retrieval::Off,
    };
    assert!(m.predict(input, &mut RngStream::new(0), true).is_err());
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    c.heads = 3;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.label_tokens = vec![64];
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.max_len = 2;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::default();
    c.fusion_sites.push(c.fusion_sites[0]);
    assert!(c.validate().is_err());
}

#[test]
fn concat_with_zero_k_is_plain_prompt() {
    let ex = example();
    let (tokens, mask) = build_concat_input(&ex, &[vec![12, 13]], 0, 24).unwrap();
    assert_eq!(tokens, ex.tokens);
    assert_eq!(mask, ex.mask_pos);
    let m = EncoderModel::new(tiny(Augmentation::Concat, vec![]), &mut RngStream::new(2)).unwrap();
    let via_concat = m
        .predict(
            ModelInput {
                tokens: &tokens,
                mask_pos: mask,
                retrieval: Retrieval::Off,
            },
            &mut RngStream::new(0),
            true,
        )
        .unwrap();
    assert_eq!(bits(&via_concat), bits(&logits(&m, &ex, Retrieval::Off)));
}

#[test]
fn concat_length_arithmetic() {
    let ex = example();
    let zs = vec![vec![12, 13], vec![14, 15, 9]];
    let (tokens, mask) = build_concat_input(&ex, &zs, 2, 24).unwrap();
    assert_eq!(tokens.len(), ex.tokens.len() + (2 + 1) + (3 + 1));
    assert_eq!(tokens[..7], [CLS, 12, 13, SEP, 14, 15, 9]);
    assert_eq!(tokens[mask], MASK);
}

#[test]
fn concat_truncates_retrievals_not_prompt() {
    let ex = example();
    let zs: Vec<Vec<usize>> = (0..10).map(|i| vec![8 + i % 5; 4]).collect();
    let (tokens, mask) = build_concat_input(&ex, &zs, 10, 16).unwrap();
    assert_eq!(tokens.len(), 16);
    assert_eq!(tokens[0], CLS);
    assert_eq!(&tokens[16 - (ex.tokens.len() - 1)..], &ex.tokens[1..]);
    assert_eq!(tokens[mask], MASK);
    let too_long = Example::from_body(0, &[8; 20], 0);
    assert!(build_concat_input(&too_long, &zs, 1, 16).is_err());
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let cfg = tiny(
        Augmentation::Fusion,
        vec![SchemeKind::NoFusion, SchemeKind::Reranker, SchemeKind::OrderedMask],
    );
    let mut model = EncoderModel::new(cfg, &mut RngStream::new(4)).unwrap();
    model.set_tau(0.7).unwrap();
    for id in model.params.ids_in(ParamGroup::Arch) {
        let a = model.params.get_mut(id);
        a.data_mut().copy_from_slice(&[0.2, -0.1, 0.3]);
    }
    let h = hits(3, 8, 6);
    let ex = example();
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    let inputs: Vec<Array> = ids.iter().map(|&id| model.params.get(id).clone()).collect();
    let report = crate::autodiff::gradcheck::check_gradients(&inputs, GradCheck::default(), |tape, vars| {
        let mut m = model.clone();
        for (i, &id) in ids.iter().enumerate() {
            *m.params.get_mut(id) = tape.value(vars[i]).clone();
        }
        // Re-route the model's parameter handles to the supplied leaves.
        let bound = crate::params::Bound::from_vars(vars.to_vec());
        let input = ModelInput {
            tokens: &ex.tokens,
            mask_pos: ex.mask_pos,
            retrieval: Retrieval::Static(&h),
        };
        let out = m.forward(tape, &bound, input, &mut RngStream::new(77), false)?;
        tape.cross_entropy(out.logits, 1)
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny(Augmentation::Fusion, vec![SchemeKind::NoFusion, SchemeKind::Reranker]);
    let mut m = EncoderModel::new(cfg, &mut RngStream::new(8)).unwrap();
    m.set_tau(0.25).unwrap();
    let bytes = checkpoint::checkpoint_bytes(&m).unwrap();
    let back = checkpoint::checkpoint_from_bytes(&bytes).unwrap();
    assert_eq!(back, m);

    let mut bad = bytes.clone();
    bad[0] = b'Z';
    assert!(matches!(
        checkpoint::checkpoint_from_bytes(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
    assert!(checkpoint::checkpoint_from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn discretized_checkpoint_keeps_architecture() {
    let cfg = tiny(Augmentation::Fusion, vec![SchemeKind::NoFusion, SchemeKind::Reranker]);
    let mut m = EncoderModel::new(cfg, &mut RngStream::new(8)).unwrap();
    let site = m.config.fusion_sites[1];
    if let SiteModule::Mixture(mx) = m.site(site) {
        let id = mx.arch.logits;
        m.params.get_mut(id).data_mut()[1] = 1.0;
    }
    let arch = m.discretize();
    assert_eq!(arch.fusing_sites(), 1);
    m.apply_architecture(&arch).unwrap();
    assert!(matches!(m.site(site), SiteModule::Fused(_)));
    assert!(matches!(m.site(m.config.fusion_sites[0]), SiteModule::Plain(_)));
    let back = checkpoint::checkpoint_from_bytes(&checkpoint::checkpoint_bytes(&m).unwrap()).unwrap();
    assert_eq!(back, m);
}
