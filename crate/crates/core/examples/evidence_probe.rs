// SPDX-License-Identifier: MIT OR Apache-2.0

//! Runs the evidence pipelines on synthetic cases and prints the statistics.
//!
//! `cargo run --release --example evidence_probe -- model.plm [cases] [seed]`

use patchlens_core::experiments::{
    ingest_annotations, write_synthetic_cases, EvidenceConfig, Experiment,
};
use patchlens_core::mm::{ShapeColorEncoder, Templates};
use patchlens_core::{Model, ModelHandle};

fn main() -> patchlens_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("model path");
    let count: usize = args.next().map_or(20, |s| s.parse().expect("count"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let model = Model::load(&path)?;
    let vision = model.config().vision.expect("vision model");
    let encoder = ShapeColorEncoder::for_model(&model)?;
    let dir = std::env::temp_dir().join(format!("evidence-probe-{seed}"));
    write_synthetic_cases(&dir, vision, count, seed)?;
    let cases = ingest_annotations(dir.join("cases.jsonl"))?.cases;
    let handle = ModelHandle::new(model);
    let templates = Templates::builtin();
    let config = EvidenceConfig::default();
    let exp = Experiment {
        handle: &handle,
        encoder: Some(&encoder),
        templates: &templates,
        config: &config,
    };
    for report in [
        exp.run_tqa(&cases)?,
        exp.run_vqa(&cases)?,
        exp.run_alt_question(&cases)?,
    ] {
        println!(
            "== {} ({} of {} cases, excluded {:?})",
            report.pipeline, report.included, report.ingested, report.exclusions
        );
        for s in &report.statistics {
            println!("  {:44} {:>10.4}  n={}", s.name, s.value, s.cases);
        }
        println!(
            "  top heads: {:?}",
            report
                .top_heads
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
