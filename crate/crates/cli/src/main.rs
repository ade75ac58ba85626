// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use patchlens::config::ServiceConfig;
use patchlens::registry::{load_model, LoadedModel};
use patchlens::{exit_code, plots};
use patchlens_core::analysis::{analyze, AnalyzeOptions, AnalyzeRequest};
use patchlens_core::attribution::{HeadProfile, HeadSelection, MapMethod};
use patchlens_core::experiments::{
    compare_models, ingest_annotations, reports_to_csv, write_synthetic_cases, EvidenceConfig,
    EvidenceReport, Experiment,
};
use patchlens_core::mm::{encode_png, Templates};
use patchlens_core::projection::Space;
use patchlens_core::toy::ColorWorld;
use patchlens_core::trace::CapturePrecision;
use patchlens_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Single-pass head and patch attribution.
#[derive(Parser)]
#[command(name = "patchlens", version)]
struct Cli {
    /// Log filter for stderr (`error`, `warn`, `info`, `debug`).
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze one question, with an image or textual context.
    Analyze(AnalyzeArgs),
    /// Evidence experiments over annotated images.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Overlap and share deltas between head profiles.
    CompareHeads(CompareArgs),
    /// Charts and CSV from an experiment's `report.json`.
    Report(ReportArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
    /// Write a synthetic annotated image set.
    Synth(SynthArgs),
    /// Toy models.
    #[command(subcommand)]
    Toy(ToyCommand),
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run evidence pipelines over an annotation file.
    Run(ExperimentArgs),
}

#[derive(Subcommand)]
enum ToyCommand {
    /// Train the toy color model.
    TrainColor(TrainArgs),
}

#[derive(Args)]
struct Common {
    /// Built-in model id or model archive path.
    #[arg(long, default_value = patchlens_core::toy::TOY_COLOR_ID)]
    model: String,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Omit timings so repeated runs are byte-identical.
    #[arg(long)]
    deterministic: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    capture_precision: Precision,
    /// Prompt templates (TOML); the built-in set otherwise.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F16,
}

impl From<Precision> for CapturePrecision {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => CapturePrecision::F32,
            Precision::F16 => CapturePrecision::F16,
        }
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    question: String,
    #[arg(long, conflicts_with = "context")]
    image: Option<PathBuf>,
    #[arg(long)]
    context: Option<String>,
    /// `topN`, `all`, or `heads:L_H,L_H`.
    #[arg(long)]
    heads_policy: Option<String>,
    /// Token to attribute instead of the prediction (word or `#id`).
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 8)]
    max_new_tokens: usize,
    /// Directory for `response.json` and heatmap PNGs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Pipeline {
    Tqa,
    Vqa,
    Alt,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Embedding,
    Unembedding,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Pipeline::All)]
    pipeline: Pipeline,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    top_positions: usize,
    /// Keep cases the model answers wrongly.
    #[arg(long)]
    no_gate: bool,
    /// Space for projecting layer inputs.
    #[arg(long, value_enum, default_value_t = SpaceArg::Embedding)]
    layer_space: SpaceArg,
    /// Question for the alternate-question probe.
    #[arg(long)]
    alt_question: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// `tag=path/to/profile.json`, at least two.
    #[arg(long = "profile", required = true, num_args = 1..)]
    profiles: Vec<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// `report.json` written by `experiment run`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bind: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = patchlens_core::toy::TOY_COLOR_ID)]
    model: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
}

/// What `experiment run` writes to `report.json`.
#[derive(Serialize, Deserialize)]
struct ReportFile {
    annotations: IngestSummary,
    reports: Vec<EvidenceReport>,
}

#[derive(Serialize, Deserialize)]
struct IngestSummary {
    accepted: usize,
    duplicates: usize,
    errors: Vec<String>,
    warnings: Vec<String>,
}

fn templates(path: &Option<PathBuf>) -> Result<Templates> {
    match path {
        Some(p) => Templates::from_toml(&String::from_utf8_lossy(&read_input("templates", p)?)),
        None => Ok(Templates::builtin()),
    }
}

/// Reads a user-supplied file; failures are input errors.
fn read_input(flag: &str, path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::input(format!("{flag}: {}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes)?;
    tracing::info!(path = %path.display(), "wrote");
    Ok(())
}

fn json_pretty<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn run_analyze(a: AnalyzeArgs) -> Result<()> {
    let loaded = LoadedModel::new(load_model(&a.common.model)?, 1)?;
    let templates = templates(&a.common.templates)?;
    let heads = a
        .heads_policy
        .as_deref()
        .map(str::parse::<HeadSelection>)
        .transpose()?;
    let image = a
        .image
        .as_ref()
        .map(|p| read_input("image", p))
        .transpose()?;
    let mut options = AnalyzeOptions {
        top_k: a.common.top_k,
        heads,
        target: a.target,
        max_new_tokens: a.max_new_tokens,
        deterministic: a.common.deterministic,
        ..AnalyzeOptions::default()
    };
    options.capture.precision = a.common.capture_precision.into();
    let req = AnalyzeRequest {
        question: a.question,
        context: a.context,
        image,
        options,
    };
    let analysis = analyze(&loaded.handle, loaded.encoder(), &templates, &req)?;
    let body = json_pretty(&analysis.response)?;
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write(&dir.join("response.json"), &body)?;
            if let Some(img) = &analysis.prepared.image {
                write(&dir.join("image.png"), encode_png(img)?)?;
                for method in [MapMethod::Logprob, MapMethod::AvgAttention] {
                    if let Some(r) = analysis.heatmap(method, true)? {
                        write(
                            &dir.join(format!("heatmap-{}.png", method.tag())),
                            r.blended_png()?,
                        )?;
                    }
                }
            }
            println!("{}", analysis.response.answer);
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn run_experiment(a: ExperimentArgs) -> Result<()> {
    let loaded = LoadedModel::new(load_model(&a.common.model)?, 1)?;
    let templates = templates(&a.common.templates)?;
    read_input("annotations", &a.annotations)?;
    let ingested = ingest_annotations(&a.annotations)?;
    for e in &ingested.errors {
        eprintln!("{}:{}: {}", a.annotations.display(), e.line, e.message);
    }
    for w in &ingested.warnings {
        eprintln!("warning: {w}");
    }
    let mut config = EvidenceConfig {
        top_heads: a.common.top_k,
        top_positions: a.top_positions,
        seed: a.seed,
        gate_correct: !a.no_gate,
        layer_input_space: match a.layer_space {
            SpaceArg::Embedding => Space::Embedding,
            SpaceArg::Unembedding => Space::Unembedding,
        },
        alt_question: a.alt_question,
        ..EvidenceConfig::default()
    };
    config.capture.precision = a.common.capture_precision.into();
    let exp = Experiment {
        handle: &loaded.handle,
        encoder: loaded.encoder(),
        templates: &templates,
        config: &config,
    };
    let cases = &ingested.cases;
    let mut reports = Vec::new();
    if matches!(a.pipeline, Pipeline::Tqa | Pipeline::All) {
        reports.push(exp.run_tqa(cases)?);
    }
    if matches!(a.pipeline, Pipeline::Vqa | Pipeline::All) {
        reports.push(exp.run_vqa(cases)?);
    }
    if matches!(a.pipeline, Pipeline::Alt | Pipeline::All) {
        reports.push(exp.run_alt_question(cases)?);
    }
    for r in &reports {
        r.validate()?;
    }
    std::fs::create_dir_all(&a.out)?;
    for r in &reports {
        if let Some(p) = &r.profile {
            write(
                &a.out.join(format!("profile-{}.json", r.pipeline)),
                json_pretty(p)?,
            )?;
        }
        eprintln!(
            "{}: {} of {} cases included",
            r.pipeline, r.included, r.ingested
        );
    }
    write(&a.out.join("report.csv"), reports_to_csv(&reports)?)?;
    let file = ReportFile {
        annotations: IngestSummary {
            accepted: ingested.cases.len(),
            duplicates: ingested.duplicates,
            errors: ingested
                .errors
                .iter()
                .map(|e| format!("line {}: {}", e.line, e.message))
                .collect(),
            warnings: ingested.warnings,
        },
        reports,
    };
    write(&a.out.join("report.json"), json_pretty(&file)?)?;
    Ok(())
}

fn run_compare(a: CompareArgs) -> Result<()> {
    let mut profiles = BTreeMap::new();
    for spec in &a.profiles {
        let (tag, path) = spec
            .split_once('=')
            .ok_or_else(|| Error::input(format!("profile: `{spec}` is not `tag=path`")))?;
        let text = read_input("profile", Path::new(path))?;
        let p: HeadProfile =
            serde_json::from_slice(&text).map_err(|e| Error::input(format!("{path}: {e}")))?;
        if profiles.insert(tag.to_owned(), p).is_some() {
            return Err(Error::input(format!("profile: tag `{tag}` given twice")));
        }
    }
    let cmp = compare_models(&profiles, a.k)?;
    let body = json_pretty(&cmp)?;
    match &a.out {
        Some(path) => write(path, &body)?,
        None => print!("{body}"),
    }
    for o in &cmp.overlaps {
        eprintln!("{} vs {}: {} of top {} shared", o.a, o.b, o.overlap, cmp.k);
    }
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<()> {
    let text = read_input("input", &a.input)?;
    let file: ReportFile = serde_json::from_slice(&text)
        .map_err(|e| Error::input(format!("{}: {e}", a.input.display())))?;
    std::fs::create_dir_all(&a.out)?;
    for r in &file.reports {
        r.validate()?;
        write(
            &a.out.join(format!("stats-{}.svg", r.pipeline)),
            plots::statistics_svg(r)?,
        )?;
        if let Some(p) = &r.profile {
            let title = format!("{} head shares ({} cases)", r.pipeline, p.cases);
            write(
                &a.out.join(format!("heads-{}.svg", r.pipeline)),
                plots::head_grid_svg(p, &title)?,
            )?;
        }
    }
    write(&a.out.join("report.csv"), reports_to_csv(&file.reports)?)?;
    Ok(())
}

fn run_serve(a: ServeArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => ServiceConfig::from_toml(&String::from_utf8_lossy(&read_input("config", p)?))?,
        None => ServiceConfig::default(),
    };
    config = config.apply_env(std::env::vars())?;
    if let Some(b) = a.bind {
        config.bind = b;
    }
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(patchlens::server::serve(config))
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let vision = model
        .config()
        .vision
        .ok_or_else(|| Error::Capability(format!("model `{}` has no vision input", a.model)))?;
    let cases = write_synthetic_cases(&a.out, vision, a.count, a.seed)?;
    println!(
        "wrote {} cases to {}",
        cases.len(),
        a.out.join("cases.jsonl").display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut world = ColorWorld::default();
    if let Some(s) = a.steps {
        world.opt.steps = s;
    }
    let (model, acc) = world.train(a.seed, |step, loss| tracing::info!(step, loss, "train"))?;
    println!(
        "accuracy text {:.3} picture-color {:.3} picture-animal {:.3}",
        acc[0], acc[1], acc[2]
    );
    model.save(&a.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let filter = match cli.log.parse::<tracing_subscriber::filter::LevelFilter>() {
        Ok(f) => f,
        Err(_) => {
            eprintln!("error: --log `{}` is not a level", cli.log);
            return ExitCode::from(1);
        }
    };
    tracing_subscriber::fmt()
        .with_max_level(filter)
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Analyze(a) => run_analyze(a),
        Command::Experiment(ExperimentCommand::Run(a)) => run_experiment(a),
        Command::CompareHeads(a) => run_compare(a),
        Command::Report(a) => run_report(a),
        Command::Serve(a) => run_serve(a),
        Command::Synth(a) => run_synth(a),
        Command::Toy(ToyCommand::TrainColor(a)) => run_train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
