// SPDX-License-Identifier: MIT OR Apache-2.0

mod support;

use ndarray::{Array1, Array2};
use patchlens_core::attribution::{
    attribute, average_attention_map, head_importance_profile, log_prob_increase, logit_minus,
    logit_minus_forms, patch_score_map, position_log_prob_increase, top_head_overlap, Attributor,
    HeadProfile, HeadSelection, LogitMinus, MapMethod,
};
use patchlens_core::model::{GridDims, ModelHandle, ModelInput, VisualBlock};
use patchlens_core::toy::{random_model, tiny_config, tiny_config_variant, tiny_vision_config};
use patchlens_core::trace::{Span, VisualSpan};
use patchlens_core::{CaptureOptions, Error, HeadId, PositionMap, Trace};
use proptest::prelude::*;

use support::*;

const SEQ: [u32; 7] = [0, 11, 57, 31, 8, 64, 90];

fn trace_for(cfg: patchlens_core::ModelConfig, seed: u64) -> Trace {
    let h = ModelHandle::new(random_model(cfg, seed).unwrap());
    h.run_traced(
        &ModelInput::text(SEQ.to_vec()),
        &PositionMap::text(SEQ.len()),
        CaptureOptions::default(),
    )
    .unwrap()
}

fn oracle_increase(trace: &Trace, layer: usize, v: &[f64], target: u32) -> f64 {
    let base = last_residual(trace, layer);
    let with: Vec<f64> = base.iter().zip(v).map(|(a, b)| a + b).collect();
    log_prob_oracle(trace.model(), &with, target) - log_prob_oracle(trace.model(), &base, target)
}

#[test]
fn zero_vector_scores_exactly_zero() {
    let trace = trace_for(tiny_config(), 1);
    let attr = Attributor::new(&trace, 42).unwrap();
    for l in 0..trace.n_layers() {
        let zero = Array1::<f64>::zeros(trace.d_model());
        assert_eq!(attr.vector_increase(l, zero.view()).unwrap(), 0.0);
    }
}

#[test]
fn head_scores_match_straight_line_oracle_everywhere() {
    for cfg in [tiny_config(), tiny_config_variant()] {
        let trace = trace_for(cfg, 2);
        for target in [trace.predicted_token(), 5, 77] {
            let attr = Attributor::new(&trace, target).unwrap();
            for head in trace.heads() {
                let want = oracle_increase(
                    &trace,
                    head.layer,
                    &head_output_oracle(&trace, head),
                    target,
                );
                let got = attr.head(head).unwrap();
                assert!((got - want).abs() <= 1e-6, "{head}: {got} vs {want}");
                assert_eq!(got, log_prob_increase(&trace, head, target).unwrap());
            }
        }
    }
}

#[test]
fn position_scores_match_straight_line_oracle_everywhere() {
    for cfg in [tiny_config(), tiny_config_variant()] {
        let trace = trace_for(cfg, 3);
        let target = trace.predicted_token();
        let attr = Attributor::new(&trace, target).unwrap();
        for head in trace.heads() {
            let all = attr.positions(head).unwrap();
            for (p, &batched) in all.iter().enumerate() {
                let v = contribution_oracle(&trace, head, p);
                let want = oracle_increase(&trace, head.layer, &v, target);
                let got = position_log_prob_increase(&trace, head, target, p).unwrap();
                assert!((got - want).abs() <= 1e-6, "{head} p{p}: {got} vs {want}");
                assert!((batched - got).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn bad_head_position_or_token_is_rejected() {
    let trace = trace_for(tiny_config(), 4);
    assert!(matches!(
        log_prob_increase(&trace, HeadId::new(5, 0), 1),
        Err(Error::Index(_))
    ));
    assert!(matches!(
        log_prob_increase(&trace, HeadId::new(0, 0), 100),
        Err(Error::Index(_))
    ));
    assert!(matches!(
        position_log_prob_increase(&trace, HeadId::new(0, 0), 1, 7),
        Err(Error::Index(_))
    ));
}

#[test]
fn logit_minus_matches_oracle_and_vanishes_on_equal_tokens() {
    let trace = trace_for(tiny_config_variant(), 5);
    let model = trace.model();
    for head in trace.heads() {
        let o = trace.head_output(head).unwrap();
        assert_eq!(logit_minus(model, o.view(), 9, 9).unwrap(), 0.0);
        let want =
            log_prob_oracle(model, &o.to_vec(), 12) - log_prob_oracle(model, &o.to_vec(), 40);
        let got = logit_minus_forms(model, o.view(), 12, 40).unwrap();
        assert!((got.log_prob - want).abs() <= 1e-6);
        assert!(got.disagreement() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logit_minus_forms_agree(v in prop::collection::vec(-4.0f64..4.0, 32), b1 in 0u32..100, b2 in 0u32..100) {
        let model = random_model(tiny_config(), 6).unwrap();
        let m = logit_minus_forms(&model, Array1::from(v).view(), b1, b2).unwrap();
        prop_assert!(m.disagreement() <= 1e-6);
    }

    #[test]
    fn logit_shift_leaves_logit_minus_unchanged(
        logits in prop::collection::vec(-10.0f64..10.0, 50),
        c in -100.0f64..100.0,
        b1 in 0u32..50,
        b2 in 0u32..50,
    ) {
        let a = LogitMinus::from_logits(&logits, b1, b2).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|z| z + c).collect();
        let b = LogitMinus::from_logits(&shifted, b1, b2).unwrap();
        prop_assert!((a.log_prob - b.log_prob).abs() <= 1e-9);
        prop_assert!((a.logit - b.logit).abs() <= 1e-9);
    }

    #[test]
    fn profiles_are_probability_vectors(scores in prop::collection::vec(-1.0f64..1.0, 8)) {
        prop_assume!(scores.iter().any(|&s| s > 0.0));
        let p = HeadProfile::from_mean_scores("m", 2, 4, 1, scores).unwrap();
        prop_assert!(p.shares.iter().all(|&s| (0.0..=1.0).contains(&s)));
        prop_assert!((p.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn overlap_is_symmetric_and_bounded(
        a in prop::collection::vec(0.01f64..1.0, 8),
        b in prop::collection::vec(0.01f64..1.0, 8),
        k in 1usize..=8,
    ) {
        let pa = HeadProfile::from_mean_scores("m", 2, 4, 1, a).unwrap();
        let pb = HeadProfile::from_mean_scores("m", 2, 4, 1, b).unwrap();
        let ab = top_head_overlap(&pa, &pb, k).unwrap();
        prop_assert_eq!(ab, top_head_overlap(&pb, &pa, k).unwrap());
        prop_assert!(ab <= k);
        prop_assert_eq!(top_head_overlap(&pa, &pa, k).unwrap(), k);
    }
}

#[test]
fn profile_normalizes_and_rejects_nonpositive_scores() {
    let p = HeadProfile::from_mean_scores("m", 1, 4, 3, vec![2.0, -1.0, 1.0, 1.0]).unwrap();
    assert_eq!(p.shares, vec![0.5, 0.0, 0.25, 0.25]);
    assert_eq!(
        p.top_k(3),
        vec![HeadId::new(0, 0), HeadId::new(0, 2), HeadId::new(0, 3)]
    );
    let err = HeadProfile::from_mean_scores("m", 1, 2, 1, vec![-1.0, 0.0]).unwrap_err();
    assert!(matches!(err, Error::NoPositiveHeads));
    assert_eq!(err.to_string(), "no positively contributing heads");
}

#[test]
fn overlap_edge_cases() {
    let a = HeadProfile::from_mean_scores("m", 2, 2, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let b = HeadProfile::from_mean_scores("m", 2, 2, 1, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
    assert_eq!(top_head_overlap(&a, &b, 2).unwrap(), 0);
    assert!(top_head_overlap(&a, &b, 5).is_err());
    assert!(top_head_overlap(&a, &b, 0).is_err());
    let c = HeadProfile::from_mean_scores("m", 1, 4, 1, vec![1.0; 4]).unwrap();
    assert!(top_head_overlap(&a, &c, 1).is_err());
}

#[test]
fn profile_over_traces_averages_raw_scores() {
    let a = trace_for(tiny_config(), 7);
    let b = trace_for(tiny_config(), 7);
    let (ta, tb) = (a.predicted_token(), 3);
    let p = head_importance_profile(&[(&a, ta), (&b, tb)]).unwrap();
    let sa = Attributor::new(&a, ta).unwrap().all_heads().unwrap();
    let sb = Attributor::new(&b, tb).unwrap().all_heads().unwrap();
    for h in a.heads() {
        assert!((p.mean_score(h) - (sa.get(h) + sb.get(h)) / 2.0).abs() <= 1e-12);
    }
    assert!((p.shares.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    assert!(head_importance_profile(&[]).is_err());
    let other = trace_for(tiny_config_variant(), 7);
    assert!(head_importance_profile(&[(&a, ta), (&other, ta)]).is_err());
}

#[test]
fn attribute_ranks_heads_and_scores_top_positions() {
    let trace = trace_for(tiny_config(), 8);
    let r = attribute(&trace, trace.predicted_token(), 3).unwrap();
    assert_eq!(r.top_heads.len(), 3);
    for w in r.top_heads.windows(2) {
        let (x, y) = (r.scores.get(w[0]), r.scores.get(w[1]));
        assert!(x > y || (x == y && w[0] < w[1]));
    }
    assert_eq!(r.position_scores.len(), 3);
    assert!(r.position_scores.values().all(|v| v.len() == SEQ.len()));
}

#[test]
fn head_policy_parsing() {
    assert_eq!("all".parse::<HeadSelection>().unwrap(), HeadSelection::All);
    assert_eq!(
        "top10".parse::<HeadSelection>().unwrap(),
        HeadSelection::TopK(10)
    );
    assert_eq!(
        "top-3".parse::<HeadSelection>().unwrap(),
        HeadSelection::TopK(3)
    );
    assert_eq!(
        "heads:1_2,0_3".parse::<HeadSelection>().unwrap(),
        HeadSelection::Explicit(vec![HeadId::new(1, 2), HeadId::new(0, 3)])
    );
    assert!("best".parse::<HeadSelection>().is_err());
    let s = HeadSelection::Explicit(vec![HeadId::new(1, 2)]);
    assert_eq!(s.to_string().parse::<HeadSelection>().unwrap(), s);
}

fn visual_trace(uniform: bool) -> (Trace, GridDims) {
    let grid = GridDims::new(3, 4);
    let mut model = random_model(tiny_vision_config(grid), 9).unwrap();
    if uniform {
        let cfg = model.config().clone();
        let vocab = model.vocab().clone();
        let mut w = model.weights().clone();
        for layer in &mut w.layers {
            layer.attn.wq.fill(0.0);
            layer.attn.bq = None;
        }
        model = patchlens_core::Model::new(cfg, vocab, w).unwrap();
    }
    let d = model.config().d_model;
    let n = grid.cells();
    let h = ModelHandle::new(model);
    let mut tokens = vec![0u32, 4];
    tokens.extend(std::iter::repeat_n(3, n));
    tokens.extend([30, 31, 32, 33]);
    let start = 2;
    let map = PositionMap::new(
        tokens.len(),
        Some(VisualSpan { start, grid }),
        Span::new(start + n, tokens.len()),
    )
    .unwrap();
    let block = Array2::from_shape_fn((n, d), |(i, j)| ((i * 13 + j * 7) % 11) as f32 / 11.0 - 0.5);
    let input = ModelInput {
        tokens,
        visual: Some(VisualBlock {
            start,
            embeddings: block,
        }),
    };
    (
        h.run_traced(&input, &map, CaptureOptions::default())
            .unwrap(),
        grid,
    )
}

#[test]
fn patch_map_folds_only_visual_positions() {
    let (trace, grid) = visual_trace(false);
    let target = trace.predicted_token();
    let map = patch_score_map(&trace, target, &HeadSelection::All).unwrap();
    assert_eq!(map.scores.len(), grid.cells());
    assert_eq!(map.method, MapMethod::Logprob);
    let attr = Attributor::new(&trace, target).unwrap();
    for (r, c) in (0..3).flat_map(|r| (0..4).map(move |c| (r, c))) {
        let p = trace.position_map().position_of(r, c).unwrap();
        let want: f64 = trace.heads().map(|h| attr.position(h, p).unwrap()).sum();
        assert!((map.get(r, c) - want).abs() <= 1e-9);
    }
    let top = patch_score_map(&trace, target, &HeadSelection::default()).unwrap();
    assert_eq!(top.heads.len(), 8);
    let json = serde_json::to_value(&top).unwrap();
    assert_eq!(json["schema"], "patch-score-map-v1");
    assert_eq!(json["method"], "logprob");
    assert_eq!(json["heads"].as_array().unwrap().len(), 8);
}

#[test]
fn maps_need_a_visual_span() {
    let trace = trace_for(tiny_config(), 10);
    assert!(matches!(
        patch_score_map(&trace, 1, &HeadSelection::All),
        Err(Error::Input(_))
    ));
    assert!(matches!(
        average_attention_map(&trace),
        Err(Error::Input(_))
    ));
}

#[test]
fn uniform_attention_gives_a_constant_average_map() {
    let (trace, grid) = visual_trace(true);
    let map = average_attention_map(&trace).unwrap();
    let expect = 1.0 / trace.seq_len() as f64;
    for s in &map.scores {
        assert!((s - expect).abs() <= 1e-6);
    }
    assert!(
        map.scaled().iter().all(|&v| v == 0.0)
            || map.normalization.max - map.normalization.min <= 1e-6
    );
    assert_eq!(map.scores.len(), grid.cells());
}

#[test]
fn unrestricted_mean_attention_sums_to_one() {
    let (trace, _) = visual_trace(false);
    let mut total = 0.0;
    let n = (trace.n_layers() * trace.n_heads()) as f64;
    for h in trace.heads() {
        total += trace
            .attention(h)
            .unwrap()
            .iter()
            .map(|&a| a as f64)
            .sum::<f64>()
            / n;
    }
    assert!((total - 1.0).abs() <= 1e-5);
    let map = average_attention_map(&trace).unwrap();
    assert!(map.scores.iter().sum::<f64>() <= 1.0 + 1e-6);
}
