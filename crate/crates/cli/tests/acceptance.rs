// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Prints one line per criterion and exits non-zero if any
//! criterion fails. Run with `cargo test -p patchlens --test acceptance`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use image::RgbImage;
use ndarray::{Array1, Array2};
use patchlens_core::analysis::{analyze, AnalyzeOptions, AnalyzeRequest};
use patchlens_core::attribution::{
    head_importance_profile, log_prob_increase, logit_minus, position_log_prob_increase,
    Attributor, LogitMinus,
};
use patchlens_core::mm::scene::{BACKGROUND, COLORS, IMAGE_ANIMALS};
use patchlens_core::mm::{
    encode_png, ConstantEncoder, ShapeColorEncoder, Templates, BACKGROUND_TOKEN,
};
use patchlens_core::model::ModelHandle;
use patchlens_core::projection::{mrr, project, Provenance, Space, TokenProjection, TokenTarget};
use patchlens_core::toy::induction::{max_attention_head, trace_cases};
use patchlens_core::toy::{
    builtin_color_model, random_model, tiny_config, tiny_config_variant, ColorWorld, InductionTask,
};
use patchlens_core::trace::Tolerances;
use patchlens_core::{CaptureOptions, Model, ModelInput, PositionMap, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn text_trace(model: Model, tokens: &[u32]) -> Trace {
    ModelHandle::new(model)
        .run_traced(
            &ModelInput::text(tokens.to_vec()),
            &PositionMap::text(tokens.len()),
            CaptureOptions::default(),
        )
        .expect("traced pass")
}

fn png(img: &RgbImage) -> Vec<u8> {
    encode_png(img).expect("png")
}

fn blank_png(model: &Model) -> Vec<u8> {
    let (w, h) = model.config().vision.expect("vision").image_size();
    png(&RgbImage::from_pixel(w, h, image::Rgb(BACKGROUND)))
}

fn identities() -> Outcome {
    let mut worst = [0.0f64; 4];
    let mut traces = Vec::new();
    for seed in 0..5 {
        traces.push(text_trace(
            random_model(tiny_config(), seed).unwrap(),
            &[0, 11, 57, 31, 8, 64, 90, 3],
        ));
    }
    let color = builtin_color_model().unwrap();
    let t = Templates::builtin();
    let handle = ModelHandle::new(color);
    let enc = ShapeColorEncoder::for_model(handle.model()).unwrap();
    let world = ColorWorld::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = world.sample_scene(2, &mut rng);
    let requests = [
        AnalyzeRequest {
            question: "What is the color of the dog?".into(),
            context: Some("Cat is red. Dog is blue.".into()),
            ..Default::default()
        },
        AnalyzeRequest {
            question: format!("What is the color of the {}?", scene.objects[0].animal),
            image: Some(png(&scene.render())),
            ..Default::default()
        },
    ];
    for req in &requests {
        traces.push(analyze(&handle, Some(&enc), &t, req).unwrap().trace);
    }
    for tr in &traces {
        let e = tr.decomposition_errors().unwrap();
        worst[0] = worst[0].max(e.residual);
        worst[1] = worst[1].max(e.head_sum);
        worst[2] = worst[2].max(e.position_sum);
        worst[3] = worst[3].max(e.row_sum);
        if !e.within(&Tolerances::F32) {
            return Err(format!("{} exceeds tolerances: {e:?}", tr.model().id()));
        }
    }
    Ok(format!(
        "{} traces (seeded toy x5, trained toy-color text+image); max residual {:.1e}, head sum {:.1e}, position sum {:.1e}, row sum {:.1e}",
        traces.len(),
        worst[0],
        worst[1],
        worst[2],
        worst[3]
    ))
}

fn oracle_increase(trace: &Trace, layer: usize, v: &[f64], target: u32) -> f64 {
    let base = last_residual(trace, layer);
    let with: Vec<f64> = base.iter().zip(v).map(|(a, b)| a + b).collect();
    log_prob_oracle(trace.model(), &with, target) - log_prob_oracle(trace.model(), &base, target)
}

fn oracles() -> Outcome {
    let mut worst = 0.0f64;
    let mut checks = 0usize;
    let mut note = |got: f64, want: f64| {
        worst = worst.max((got - want).abs());
        checks += 1;
    };
    let tokens = [0u32, 12, 45, 7, 88, 19, 63];
    let mut alpha_gap = 0.0f64;
    for cfg in [tiny_config(), tiny_config_variant()] {
        let trace = text_trace(random_model(cfg, 11).unwrap(), &tokens);
        alpha_gap = alpha_gap.max(alpha_recompute_gap(&trace));
        let model = trace.model().clone();
        let vocab = model.config().vocab_size as u32;
        for target in [trace.predicted_token(), 5, 77] {
            for head in trace.heads() {
                let want = oracle_increase(
                    &trace,
                    head.layer,
                    &head_output_oracle(&trace, head),
                    target,
                );
                note(log_prob_increase(&trace, head, target).unwrap(), want);
                for p in 0..trace.seq_len() {
                    let want = oracle_increase(
                        &trace,
                        head.layer,
                        &contribution_oracle(&trace, head, p),
                        target,
                    );
                    note(
                        position_log_prob_increase(&trace, head, target, p).unwrap(),
                        want,
                    );
                }
            }
        }
        for head in trace.heads() {
            let o = trace.head_output(head).unwrap();
            let lp: Vec<f64> = (0..vocab)
                .map(|b| log_prob_oracle(&model, &o.to_vec(), b))
                .collect();
            for b1 in 0..vocab {
                for b2 in 0..vocab {
                    note(
                        logit_minus(&model, o.view(), b1, b2).unwrap(),
                        lp[b1 as usize] - lp[b2 as usize],
                    );
                }
            }
            let p = project(
                &model,
                o.view(),
                Space::Unembedding,
                Provenance::HeadOutput { head },
            )
            .unwrap();
            let ranks = ranks_by_sort(&logits_oracle(&model, &o.to_vec()));
            for tok in 0..vocab {
                if p.rank(tok).unwrap() != ranks[tok as usize] {
                    return Err(format!(
                        "{head}: rank of {tok} differs from the sort oracle"
                    ));
                }
            }
        }
        for layer in 0..trace.n_layers() {
            for pos in 0..trace.seq_len() {
                let x = trace.residual_at(layer, pos).unwrap();
                for (space, logits) in [
                    (
                        Space::Embedding,
                        embedding_logits_oracle(&model, &x.to_vec()),
                    ),
                    (Space::Unembedding, logits_oracle(&model, &x.to_vec())),
                ] {
                    let p = project(
                        &model,
                        x.view(),
                        space,
                        Provenance::LayerInput {
                            layer,
                            position: pos,
                        },
                    )
                    .unwrap();
                    let ranks = ranks_by_sort(&logits);
                    for tok in 0..vocab {
                        if p.rank(tok).unwrap() != ranks[tok as usize] {
                            return Err(format!(
                                "layer {layer} position {pos}: rank of {tok} differs"
                            ));
                        }
                    }
                }
            }
        }
    }
    check(
        worst <= 1e-6 && alpha_gap <= 1e-5,
        format!(
            "{checks} scalar comparisons, max |diff| {worst:.1e}; all rankings equal; captured vs recomputed attention {alpha_gap:.1e}"
        ),
    )
}

fn trivial() -> Outcome {
    let trace = text_trace(
        random_model(tiny_config(), 21).unwrap(),
        &[0, 4, 9, 16, 25, 36],
    );
    let model = trace.model().clone();
    let zero = Array1::<f64>::zeros(trace.d_model());
    for target in 0..100u32 {
        let attr = Attributor::new(&trace, target).unwrap();
        for layer in 0..trace.n_layers() {
            let s = attr.vector_increase(layer, zero.view()).unwrap();
            if s != 0.0 {
                return Err(format!("zero vector scored {s}"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let v: Array1<f64> = (0..32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b = rng.random_range(0..100u32);
        if logit_minus(&model, v.view(), b, b).unwrap() != 0.0 {
            return Err("b1 = b2 gave a non-zero logit minus".into());
        }
        let c = rng.random_range(0.1..10.0);
        for space in [Space::Embedding, Space::Unembedding] {
            let a = project(&model, v.view(), space, Provenance::Vector).unwrap();
            let scaled = &v * c;
            let s = project(&model, scaled.view(), space, Provenance::Vector).unwrap();
            if a.order() != s.order() {
                return Err(format!("scaling by {c:.3} changed the {space:?} ranking"));
            }
        }
        let logits: Vec<f64> = (0..100).map(|_| rng.random_range(-10.0..10.0)).collect();
        let shift = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let (b1, b2) = (rng.random_range(0..100u32), rng.random_range(0..100u32));
        let m0 = LogitMinus::from_logits(&logits, b1, b2).unwrap();
        let m1 = LogitMinus::from_logits(&shifted, b1, b2).unwrap();
        if (m0.log_prob - m1.log_prob).abs() > 1e-9 {
            return Err(format!(
                "logit shift moved M by {:.1e}",
                (m0.log_prob - m1.log_prob).abs()
            ));
        }
        let p0 =
            TokenProjection::from_logits(logits, Space::Unembedding, Provenance::Vector).unwrap();
        let p1 =
            TokenProjection::from_logits(shifted, Space::Unembedding, Provenance::Vector).unwrap();
        if p0.order() != p1.order() {
            return Err("logit shift changed a ranking".into());
        }
        let top = p0.order()[0];
        let t = TokenTarget::from_ids("top", [top]).unwrap();
        if mrr(&[p0.clone(), p1.clone()], &t).unwrap() != 1.0 {
            return Err("rank-1 target did not give MRR 1".into());
        }
    }
    Ok("zero head output S = 0; M(b, b) = 0; rank-1 MRR = 1; scaling and logit shift keep rankings (200 draws)".into())
}

fn induction() -> Outcome {
    let task = InductionTask::default();
    let mut hits = 0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let (model, acc) = task.train(seed).unwrap();
        let handle = ModelHandle::new(model);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cases: Vec<_> = (0..40).map(|_| task.sample_case(&mut rng)).collect();
        let traces = trace_cases(&handle, &cases).unwrap();
        let pairs: Vec<_> = traces
            .iter()
            .zip(&cases)
            .map(|(t, c)| (t, c.target))
            .collect();
        let top = head_importance_profile(&pairs).unwrap().top_k(1)[0];
        let induction_head = max_attention_head(&traces, &cases).unwrap();
        let ok = acc >= 0.95 && top == induction_head;
        hits += usize::from(ok);
        notes.push(format!("{}{}", if ok { "" } else { "!" }, top));
        if !ok {
            notes.push(format!("(acc {acc:.3}, attention head {induction_head})"));
        }
    }
    check(
        hits >= 9,
        format!(
            "{hits}/10 seeds agree at >= 95% accuracy [{}]",
            notes.join(" ")
        ),
    )
}

fn plant_and_recover() -> Outcome {
    let model = builtin_color_model().unwrap();
    let vision = model.config().vision.unwrap();
    let vocab = model.vocab().clone();
    let embed = model.weights().embed.clone();
    let row = |tok: &str| embed.row(vocab.id(tok).expect("token") as usize).to_owned();
    let bg = row(BACKGROUND_TOKEN);
    let image = blank_png(&model);
    let handle = ModelHandle::new(model);
    let templates = Templates::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cells = vision.grid.cells();
    let mut hits = 0;
    let mut misses = Vec::new();
    for trial in 0..50 {
        let cell = rng.random_range(0..cells);
        let color = COLORS[rng.random_range(0..COLORS.len())].name;
        let animal = IMAGE_ANIMALS[rng.random_range(0..IMAGE_ANIMALS.len())].0;
        let mut block = Array2::<f32>::zeros((cells, bg.len()));
        for (i, mut r) in block.rows_mut().into_iter().enumerate() {
            if i == cell {
                r.assign(&(&row(color) + &row(animal)));
            } else {
                r.assign(&bg);
            }
        }
        let enc = ConstantEncoder::new(vision, block).unwrap();
        let req = AnalyzeRequest {
            question: format!("What is the color of the {animal}?"),
            image: Some(image.clone()),
            options: AnalyzeOptions {
                target: Some(color.into()),
                max_new_tokens: 1,
                deterministic: true,
                ..AnalyzeOptions::default()
            },
            ..Default::default()
        };
        let a = analyze(&handle, Some(&enc), &templates, &req).unwrap();
        let (r, c) = a.response.maps.as_ref().unwrap().logprob.argmax();
        if r * vision.grid.cols + c == cell {
            hits += 1;
        } else {
            misses.push(format!(
                "trial {trial}: planted {cell}, argmax {}",
                r * vision.grid.cols + c
            ));
        }
    }
    check(
        hits == 50,
        format!(
            "{hits}/50 argmax cells equal the planted cell {}",
            misses.join("; ")
        ),
    )
}

fn single_pass() -> Outcome {
    let model = ColorWorld::default().reference_geometry_model(0).unwrap();
    let vision = model.config().vision.unwrap();
    let cells = vision.grid.cells();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let block = Array2::from_shape_fn((cells, model.config().d_model), |_| {
        rng.random_range(-1.0f32..1.0)
    });
    let enc = ConstantEncoder::new(vision, block).unwrap();
    let image = blank_png(&model);
    let handle = ModelHandle::new(model);
    let req = AnalyzeRequest {
        question: "What is the color of the dog?".into(),
        image: Some(image),
        options: AnalyzeOptions {
            max_new_tokens: 1,
            deterministic: true,
            ..AnalyzeOptions::default()
        },
        ..Default::default()
    };
    let t0 = Instant::now();
    let a = analyze(&handle, Some(&enc), &Templates::builtin(), &req).unwrap();
    let ours = t0.elapsed();
    let traced = handle.traced_passes();
    let plain = handle.plain_passes();
    let target = a.target();

    // Zero-ablation baseline: one clean pass, then one pass per visual
    // position with that position's embedding zeroed.
    let baseline = ModelHandle::new(ColorWorld::default().reference_geometry_model(0).unwrap());
    let input = a.prepared.input.clone();
    let t1 = Instant::now();
    let clean = baseline.forward(&input).unwrap();
    let clean_lp = patchlens_core::numeric::log_softmax(
        &clean.iter().map(|&z| f64::from(z)).collect::<Vec<_>>(),
    )[target as usize];
    let mut drops = Vec::with_capacity(cells);
    for cell in 0..cells {
        let mut ablated = input.clone();
        ablated
            .visual
            .as_mut()
            .unwrap()
            .embeddings
            .row_mut(cell)
            .fill(0.0);
        let logits = baseline.forward(&ablated).unwrap();
        let lp = patchlens_core::numeric::log_softmax(
            &logits.iter().map(|&z| f64::from(z)).collect::<Vec<_>>(),
        )[target as usize];
        drops.push(clean_lp - lp);
    }
    let theirs = t1.elapsed();
    let baseline_passes = baseline.plain_passes() + baseline.traced_passes();
    check(
        traced == 1 && plain == 0 && baseline_passes == (cells + 1) as u64 && drops.iter().all(|d| d.is_finite()),
        format!(
            "analyze: {traced} traced + {plain} plain pass(es) in {}; zero-ablation baseline: {baseline_passes} passes in {}",
            fmt_duration(ours),
            fmt_duration(theirs)
        ),
    )
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1} ms", d.as_secs_f64() * 1e3)
}

fn cli(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_patchlens"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "`patchlens {}` failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn pipeline_integrity() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    cli(&[
        "synth",
        "--out",
        &p("cases"),
        "--count",
        "20",
        "--seed",
        "4",
    ])?;
    let run = |out: &str| {
        cli(&[
            "experiment",
            "run",
            "--annotations",
            &p("cases/cases.jsonl"),
            "--out",
            &p(out),
            "--deterministic",
            "--seed",
            "1",
        ])
    };
    run("a")?;
    run("b")?;
    let read = |f: &str| std::fs::read(Path::new(&p(f))).map_err(|e| e.to_string());
    let identical = read("a/report.json")? == read("b/report.json")?
        && read("a/report.csv")? == read("b/report.csv")?;
    let json: serde_json::Value =
        serde_json::from_slice(&read("a/report.json")?).map_err(|e| e.to_string())?;
    let reports = json["reports"].as_array().ok_or("no reports")?;
    let mut n = 0;
    for r in reports {
        if r["ingested"] != 20 {
            return Err(format!("{}: ingested {}", r["pipeline"], r["ingested"]));
        }
        for s in r["statistics"].as_array().ok_or("no statistics")? {
            let v = s["value"]
                .as_f64()
                .ok_or_else(|| format!("{} is not a number", s["name"]))?;
            let ok = v.is_finite()
                && match s["kind"].as_str() {
                    Some("mrr") => v > 0.0 && v <= 1.0,
                    Some("attention") => (0.0..=1.0).contains(&v),
                    _ => true,
                };
            if !ok {
                return Err(format!("{} {} = {v}", r["pipeline"], s["name"]));
            }
            n += 1;
        }
    }
    check(
        identical,
        format!("{} reports, {n} statistics finite and in range; deterministic reruns byte-identical: {identical}", reports.len()),
    )
}

/// Name, check and time budget.
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 7] = [
        (
            "decomposition identities",
            identities,
            Duration::from_secs(60),
        ),
        ("oracle equivalence", oracles, Duration::from_secs(300)),
        ("trivial identities", trivial, Duration::from_secs(300)),
        (
            "induction-head recovery",
            induction,
            Duration::from_secs(600),
        ),
        (
            "plant-and-recover heatmap",
            plant_and_recover,
            Duration::from_secs(300),
        ),
        ("single-pass cost", single_pass, Duration::from_secs(300)),
        (
            "pipeline integrity",
            pipeline_integrity,
            Duration::from_secs(300),
        ),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(*run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = t0.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > *budget => {
                Err(format!("{d}; over the {}s budget", budget.as_secs()))
            }
            o => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} [{}] {name} ({:.1}s): {detail}",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!("SKIP [8] full-scale tier: needs a 7B-class multimodal checkpoint and an accelerator, neither available here");
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
