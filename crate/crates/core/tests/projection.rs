// SPDX-License-Identifier: MIT OR Apache-2.0

mod support;

use ndarray::Array1;
use patchlens_core::model::ModelHandle;
use patchlens_core::projection::{
    mrr, mrr_of_ranks, project, projection_logits, rank_of, Provenance, Space, TokenProjection,
    TokenTarget,
};
use patchlens_core::toy::{random_model, tiny_config, tiny_config_variant};
use patchlens_core::{CaptureOptions, Error, ModelInput, PositionMap};
use proptest::prelude::*;

use support::*;

#[test]
fn dominant_row_ranks_first() {
    for cfg in [tiny_config(), tiny_config_variant()] {
        let model = random_model(cfg, 1).unwrap();
        for b in [4u32, 50, 99] {
            let e = model.embedding_f64().row(b as usize).to_owned() * 50.0;
            let p = project(&model, e.view(), Space::Embedding, Provenance::Vector).unwrap();
            assert_eq!(p.rank(b).unwrap(), 1);
        }
        // Through the unembedding the final norm rescales but keeps direction.
        let cfg = model.config().clone();
        if matches!(cfg.norm, patchlens_core::model::NormKind::RmsNorm) {
            let b = 33u32;
            let w = &model.weights().final_norm.weight;
            let u = model.unembedding_f64().row(b as usize).to_owned();
            let v: Array1<f64> = u
                .iter()
                .zip(w.iter())
                .map(|(x, g)| x / f64::from(*g))
                .collect::<Array1<f64>>()
                * 20.0;
            let p = project(&model, v.view(), Space::Unembedding, Provenance::Vector).unwrap();
            assert!(p.rank(b).unwrap() <= 3, "rank {}", p.rank(b).unwrap());
        }
    }
}

#[test]
fn rankings_equal_full_sort_oracle() {
    let h = ModelHandle::new(random_model(tiny_config_variant(), 2).unwrap());
    let seq = vec![0u32, 12, 45, 7, 88, 19];
    let trace = h
        .run_traced(
            &ModelInput::text(seq.clone()),
            &PositionMap::text(seq.len()),
            CaptureOptions::default(),
        )
        .unwrap();
    let model = h.model();
    for head in trace.heads() {
        let o = trace.head_output(head).unwrap();
        let p = project(
            model,
            o.view(),
            Space::Unembedding,
            Provenance::HeadOutput { head },
        )
        .unwrap();
        let want_logits = logits_oracle(model, &o.to_vec());
        assert!(max_abs_diff(p.logits(), &want_logits) <= 1e-6);
        let ranks = ranks_by_sort(&want_logits);
        for tok in 0..100u32 {
            assert_eq!(p.rank(tok).unwrap(), ranks[tok as usize]);
        }
        let total: f64 = (0..100u32).map(|t| p.probability(t)).sum();
        assert!((total - 1.0).abs() <= 1e-6);
    }
    for pos in 0..seq.len() {
        let x = trace.residual_at(0, pos).unwrap();
        let p = project(
            model,
            x.view(),
            Space::Embedding,
            Provenance::LayerInput {
                layer: 0,
                position: pos,
            },
        )
        .unwrap();
        let ranks = ranks_by_sort(&embedding_logits_oracle(model, &x.to_vec()));
        for tok in 0..100u32 {
            assert_eq!(p.rank(tok).unwrap(), ranks[tok as usize]);
        }
    }
}

#[test]
fn projection_checks_width() {
    let model = random_model(tiny_config(), 3).unwrap();
    let v = Array1::<f64>::zeros(31);
    assert!(matches!(
        project(&model, v.view(), Space::Unembedding, Provenance::Vector),
        Err(Error::Input(_))
    ));
}

#[test]
fn mrr_matches_definition() {
    let p = |top: u32| {
        let mut logits = vec![0.0; 10];
        logits[top as usize] = 5.0;
        TokenProjection::from_logits(logits, Space::Embedding, Provenance::Vector).unwrap()
    };
    let t = TokenTarget::from_ids("x", [3]).unwrap();
    assert_eq!(mrr(&[p(3), p(3)], &t).unwrap(), 1.0);
    // token 3 sits behind the boosted token and ids 0..=2
    assert_eq!(rank_of(&p(0), &t).unwrap(), 4);
    assert_eq!(mrr(&[p(3), p(0)], &t).unwrap(), (1.0 + 0.25) / 2.0);
    assert!(mrr(&[], &t).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn positive_scaling_keeps_rankings(v in prop::collection::vec(-2.0f64..2.0, 32), c in 0.25f64..8.0) {
        let model = random_model(tiny_config(), 4).unwrap();
        let v = Array1::from(v);
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-2);
        for space in [Space::Embedding, Space::Unembedding] {
            let a = project(&model, v.view(), space, Provenance::Vector).unwrap();
            let scaled = &v * c;
            let b = project(&model, scaled.view(), space, Provenance::Vector).unwrap();
            prop_assert_eq!(a.order(), b.order());
        }
    }

    #[test]
    fn logit_shift_keeps_rankings(logits in prop::collection::vec(-10.0f64..10.0, 60), c in -50.0f64..50.0) {
        let a = TokenProjection::from_logits(logits.clone(), Space::Unembedding, Provenance::Vector).unwrap();
        let b = TokenProjection::from_logits(logits.iter().map(|z| z + c).collect(), Space::Unembedding, Provenance::Vector).unwrap();
        prop_assert_eq!(a.order(), b.order());
    }

    #[test]
    fn mrr_is_bounded_and_monotone(ranks in prop::collection::vec(1usize..200, 1..20), i in 0usize..20) {
        let m = mrr_of_ranks(&ranks).unwrap();
        prop_assert!(m > 0.0 && m <= 1.0);
        let i = i % ranks.len();
        let mut better = ranks.clone();
        better[i] = (better[i] - 1).max(1);
        prop_assert!(mrr_of_ranks(&better).unwrap() >= m);
    }

    #[test]
    fn projection_is_deterministic(v in prop::collection::vec(-2.0f64..2.0, 32)) {
        let model = random_model(tiny_config(), 5).unwrap();
        let v = Array1::from(v);
        let a = projection_logits(&model, v.view(), Space::Unembedding).unwrap();
        let b = projection_logits(&model, v.view(), Space::Unembedding).unwrap();
        prop_assert_eq!(a, b);
    }
}
