// SPDX-License-Identifier: MIT OR Apache-2.0

mod support;

use std::sync::Arc;

use ndarray::Array2;
use patchlens_core::model::{GridDims, ModelConfig, ModelHandle, ModelInput, VisualBlock};
use patchlens_core::toy::{random_model, tiny_config, tiny_config_variant, tiny_vision_config};
use patchlens_core::trace::{CapturePrecision, Span, Tolerances, VisualSpan};
use patchlens_core::{CaptureOptions, Error, ErrorKind, HeadId, PositionMap, Trace};

use support::*;

fn handle(cfg: ModelConfig, seed: u64) -> ModelHandle {
    ModelHandle::new(random_model(cfg, seed).unwrap())
}

fn run(h: &ModelHandle, tokens: &[u32], options: CaptureOptions) -> Trace {
    let input = ModelInput::text(tokens.to_vec());
    h.run_traced(&input, &PositionMap::text(tokens.len()), options)
        .unwrap()
}

const SIX: [u32; 6] = [0, 17, 42, 8, 99, 23];

#[test]
fn attention_rows_sum_to_one() {
    for cfg in [tiny_config(), tiny_config_variant()] {
        let h = handle(cfg, 1);
        let trace = run(&h, &SIX, CaptureOptions::default());
        for head in trace.heads() {
            let sum: f32 = trace.attention(head).unwrap().sum();
            assert!((sum - 1.0).abs() <= 1e-5, "{head}: {sum}");
        }
    }
}

#[test]
fn residual_identity_holds_at_every_layer() {
    for cfg in [tiny_config(), tiny_config_variant()] {
        let h = handle(cfg, 2);
        let trace = run(&h, &SIX, CaptureOptions::default());
        let errs = trace.decomposition_errors().unwrap();
        assert!(errs.residual <= 1e-4, "{errs:?}");
        assert!(errs.head_sum <= 1e-4, "{errs:?}");
        assert!(errs.position_sum <= 1e-5, "{errs:?}");
        assert!(errs.row_sum <= 1e-5, "{errs:?}");
        assert!(errs.within(&Tolerances::F32));
    }
}

#[test]
fn identical_runs_are_bit_identical() {
    let h = handle(tiny_config(), 3);
    let a = run(&h, &SIX, CaptureOptions::default());
    let b = run(&h, &SIX, CaptureOptions::default());
    assert_eq!(a.logits(), b.logits());
}

#[test]
fn each_traced_run_counts_one_pass() {
    let h = handle(tiny_config(), 4);
    assert_eq!(h.traced_passes(), 0);
    let trace = run(&h, &SIX, CaptureOptions::default());
    assert_eq!(h.traced_passes(), 1);
    for head in trace.heads() {
        trace.head_output(head).unwrap();
        trace.position_contributions(head).unwrap();
    }
    trace.decomposition_errors().unwrap();
    assert_eq!(h.traced_passes(), 1);
    assert_eq!(h.plain_passes(), 0);
}

#[test]
fn final_logits_are_normalized_then_unembedded() {
    let h = handle(tiny_config_variant(), 5);
    let trace = run(&h, &SIX, CaptureOptions::default());
    let last = last_residual(&trace, trace.n_layers());
    let expect = logits_oracle(h.model(), &last);
    let got: Vec<f64> = trace.logits().iter().map(|&v| v as f64).collect();
    assert!(max_abs_diff(&got, &expect) <= 1e-4);
}

#[test]
fn head_output_matches_loop_oracle() {
    for cfg in [tiny_config(), tiny_config_variant()] {
        let h = handle(cfg, 6);
        let trace = run(&h, &SIX, CaptureOptions::default());
        for head in trace.heads() {
            let got = trace.head_output(head).unwrap().to_vec();
            let want = head_output_oracle(&trace, head);
            assert!(
                max_abs_diff(&got, &want) <= 1e-6,
                "{head}: {}",
                max_abs_diff(&got, &want)
            );
        }
    }
}

#[test]
fn position_contribution_matches_loop_oracle() {
    let h = handle(tiny_config(), 7);
    let trace = run(&h, &SIX, CaptureOptions::default());
    for head in trace.heads() {
        let got = trace.position_contribution(head, 3).unwrap().to_vec();
        let want = contribution_oracle(&trace, head, 3);
        assert!(max_abs_diff(&got, &want) <= 1e-6);
    }
}

#[test]
fn heads_sum_to_attention_output() {
    let h = handle(tiny_config_variant(), 8);
    let trace = run(&h, &SIX, CaptureOptions::default());
    for l in 0..trace.n_layers() {
        let mut sum = vec![0.0; trace.d_model()];
        for j in 0..trace.n_heads() {
            for (s, v) in sum
                .iter_mut()
                .zip(trace.head_output(HeadId::new(l, j)).unwrap())
            {
                *s += v;
            }
        }
        let captured: Vec<f64> = trace
            .attention_output(l)
            .unwrap()
            .iter()
            .map(|&v| v as f64)
            .collect();
        assert!(max_abs_diff(&sum, &captured) <= 1e-5);
    }
}

#[test]
fn single_position_input_has_unit_attention() {
    let h = handle(tiny_config_variant(), 9);
    let trace = run(&h, &[5], CaptureOptions::default());
    for head in trace.heads() {
        assert_eq!(trace.attention(head).unwrap()[0], 1.0);
        let out = trace.head_output(head).unwrap().to_vec();
        let vo = trace.value_output(head, 0).unwrap().to_vec();
        assert!(max_abs_diff(&out, &vo) <= 1e-12);
    }
}

#[test]
fn masked_future_position_contributes_nothing() {
    let h = handle(tiny_config(), 10);
    let options = CaptureOptions {
        full_attention: true,
        ..Default::default()
    };
    let trace = run(&h, &SIX, options);
    let head = HeadId::new(1, 2);
    let c = trace.position_contribution_at(head, 2, 4).unwrap();
    assert!(c.iter().all(|&v| v == 0.0));
    // Without full capture only the last query is available.
    let lean = run(&h, &SIX, CaptureOptions::default());
    assert!(matches!(
        lean.position_contribution_at(head, 2, 4),
        Err(Error::Capability(_))
    ));
}

#[test]
fn value_cache_gives_the_same_answers() {
    let h = handle(tiny_config_variant(), 11);
    let lazy = run(&h, &SIX, CaptureOptions::default());
    let eager = run(
        &h,
        &SIX,
        CaptureOptions {
            cache_values: true,
            ..Default::default()
        },
    );
    for head in lazy.heads() {
        let a = lazy.head_output(head).unwrap().to_vec();
        let b = eager.head_output(head).unwrap().to_vec();
        assert!(max_abs_diff(&a, &b) <= 1e-5);
    }
}

#[test]
fn out_of_range_head_and_position_are_index_errors() {
    let h = handle(tiny_config(), 12);
    let trace = run(&h, &SIX, CaptureOptions::default());
    assert!(matches!(
        trace.head_output(HeadId::new(2, 0)),
        Err(Error::Index(_))
    ));
    assert!(matches!(
        trace.head_output(HeadId::new(0, 4)),
        Err(Error::Index(_))
    ));
    let err = trace
        .position_contribution(HeadId::new(0, 0), 6)
        .unwrap_err();
    assert!(matches!(err, Error::Index(_)));
    assert_eq!(err.kind(), ErrorKind::Input);
}

fn vision_handle(grid: GridDims) -> ModelHandle {
    handle(tiny_vision_config(grid), 13)
}

fn visual_input(h: &ModelHandle, grid: GridDims, rows: usize) -> (ModelInput, PositionMap) {
    let d = h.model().config().d_model;
    let n = grid.cells();
    let mut tokens = vec![0u32];
    tokens.extend(std::iter::repeat_n(3, n));
    tokens.extend([20, 21, 22]);
    let block = Array2::from_shape_fn((rows, d), |(i, j)| ((i * 7 + j) % 5) as f32 * 0.1);
    let input = ModelInput {
        tokens: tokens.clone(),
        visual: Some(VisualBlock {
            start: 1,
            embeddings: block,
        }),
    };
    let map = PositionMap::new(
        tokens.len(),
        Some(VisualSpan { start: 1, grid }),
        Span::new(1 + n, tokens.len()),
    )
    .unwrap();
    (input, map)
}

#[test]
fn visual_block_is_placed_verbatim() {
    let grid = GridDims::new(2, 3);
    let h = vision_handle(grid);
    let (input, map) = visual_input(&h, grid, 6);
    let trace = h
        .run_traced(&input, &map, CaptureOptions::default())
        .unwrap();
    let layer0 = trace.layer_input(0).unwrap();
    // Rotary positions leave layer-0 inputs untouched.
    let block = &input.visual.as_ref().unwrap().embeddings;
    for i in 0..6 {
        assert_eq!(layer0.row(1 + i), block.row(i));
    }
    assert!(trace
        .decomposition_errors()
        .unwrap()
        .within(&Tolerances::F32));
}

#[test]
fn visual_block_shape_mismatch_is_an_input_error() {
    let grid = GridDims::new(2, 3);
    let h = vision_handle(grid);
    let (mut input, map) = visual_input(&h, grid, 5);
    let err = h
        .run_traced(&input, &map, CaptureOptions::default())
        .unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Input);
    input.visual.as_mut().unwrap().embeddings = Array2::zeros((6, 31));
    let err = h
        .run_traced(&input, &map, CaptureOptions::default())
        .unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Input);
    assert_eq!(h.traced_passes(), 0);
}

#[test]
fn opaque_models_cannot_be_traced() {
    let cfg = ModelConfig {
        exposes_activations: false,
        ..tiny_config()
    };
    let h = handle(cfg, 14);
    let input = ModelInput::text(SIX.to_vec());
    let err = h
        .run_traced(&input, &PositionMap::text(6), CaptureOptions::default())
        .unwrap_err();
    assert!(matches!(err, Error::Capability(_)));
    assert_eq!(err.kind(), ErrorKind::Model);
    assert!(h.forward(&input).is_ok());
}

#[test]
fn half_precision_errors_stay_within_rounding_bounds() {
    // Half storage perturbs every value by up to 2^-11 of its magnitude.
    let unit = 2f64.powi(-11);
    for seed in 0..5 {
        let h = handle(tiny_config(), 100 + seed);
        let trace = run(
            &h,
            &SIX,
            CaptureOptions {
                precision: CapturePrecision::F16,
                ..Default::default()
            },
        );
        let errs = trace.decomposition_errors().unwrap();
        let tol = trace.tolerances();
        assert!(
            errs.position_sum <= tol.position_sum,
            "seed {seed}: {errs:?}"
        );
        assert!(errs.row_sum <= unit + 1e-6, "seed {seed}: {errs:?}");
        let mut scale: f64 = 1.0;
        for l in 0..=trace.n_layers() {
            scale = scale.max(
                trace
                    .last_residual(l)
                    .unwrap()
                    .iter()
                    .fold(0.0, |m, v| m.max(v.abs())),
            );
        }
        assert!(
            errs.residual <= 4.0 * unit * scale,
            "seed {seed}: {errs:?} scale {scale}"
        );
        assert!(
            errs.head_sum <= 4.0 * unit * scale,
            "seed {seed}: {errs:?} scale {scale}"
        );
    }
}

#[test]
fn trace_archive_round_trip() {
    let h = handle(tiny_config_variant(), 15);
    let trace = run(
        &h,
        &SIX,
        CaptureOptions {
            full_attention: true,
            cache_values: true,
            ..Default::default()
        },
    );
    let mut bytes = Vec::new();
    trace.export(&mut bytes).unwrap();
    let back = Trace::import(&bytes[..], Arc::clone(h.model())).unwrap();
    assert_eq!(back.logits(), trace.logits());
    assert_eq!(back.position_map(), trace.position_map());
    for head in trace.heads() {
        assert_eq!(
            back.attention(head).unwrap(),
            trace.attention(head).unwrap()
        );
        assert_eq!(
            back.head_output(head).unwrap(),
            trace.head_output(head).unwrap()
        );
    }
    let other = random_model(tiny_config(), 15).unwrap();
    assert!(Trace::import(&bytes[..], Arc::new(other)).is_err());
}

#[test]
fn model_archive_round_trip() {
    let model = random_model(tiny_config_variant(), 16).unwrap();
    let mut bytes = Vec::new();
    model.write_to(&mut bytes).unwrap();
    let back = patchlens_core::Model::read_from(&bytes[..]).unwrap();
    let input = ModelInput::text(SIX.to_vec());
    let a = ModelHandle::new(model).forward(&input).unwrap();
    let b = ModelHandle::new(back).forward(&input).unwrap();
    assert_eq!(a, b);
}
