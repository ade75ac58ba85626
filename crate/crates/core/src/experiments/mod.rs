// SPDX-License-Identifier: MIT OR Apache-2.0

//! Annotated case sets and the statistics computed over them.

pub mod annotations;
pub mod compare;
pub mod evidence;
pub mod report;
pub mod synth;

pub use annotations::{ingest_annotations, parse_annotations, CaseAnnotation, Ingested, LineError};
pub use compare::{compare_models, ModelComparison};
pub use evidence::{EvidenceConfig, Experiment};
pub use report::{fingerprint, reports_to_csv, EvidenceReport, StatKind, Statistic, REPORT_SCHEMA};
pub use synth::write_synthetic_cases;
