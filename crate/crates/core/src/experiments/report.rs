// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::HeadProfile;
use crate::error::{Error, Result};
use crate::trace::HeadId;

pub const REPORT_SCHEMA: &str = "evidence-report-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatKind {
    /// Mean reciprocal rank, in `(0, 1]`.
    Mrr,
    /// Attention mass, in `[0, 1]`.
    Attention,
    /// Percentage, in `[0, 100]`.
    Percent,
    /// Fraction of cases, in `[0, 1]`.
    Fraction,
    /// Unbounded log-probability or logit difference.
    LogitDiff,
}

impl StatKind {
    fn admits(&self, v: f64) -> bool {
        v.is_finite()
            && match self {
                Self::Mrr => v > 0.0 && v <= 1.0,
                Self::Attention | Self::Fraction => (0.0..=1.0).contains(&v),
                Self::Percent => (0.0..=100.0).contains(&v),
                Self::LogitDiff => true,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    pub kind: StatKind,
    pub value: f64,
    /// Cases that contributed.
    pub cases: usize,
}

/// Statistics of one evidence pipeline over a case set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub schema: String,
    pub pipeline: String,
    pub model_id: String,
    pub fingerprint: String,
    pub ingested: usize,
    pub included: usize,
    pub excluded: usize,
    pub exclusions: BTreeMap<String, usize>,
    pub statistics: Vec<Statistic>,
    /// Mean head profile over included cases, when one exists.
    pub profile: Option<HeadProfile>,
    pub top_heads: Vec<HeadId>,
}

impl EvidenceReport {
    pub fn statistic(&self, name: &str) -> Option<&Statistic> {
        self.statistics.iter().find(|s| s.name == name)
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.statistic(name).map(|s| s.value)
    }

    /// Checks value ranges and case accounting.
    pub fn validate(&self) -> Result<()> {
        if self.included + self.excluded != self.ingested {
            return Err(Error::format(format!(
                "{}: {} included + {} excluded != {} ingested",
                self.pipeline, self.included, self.excluded, self.ingested
            )));
        }
        if self.exclusions.values().sum::<usize>() != self.excluded {
            return Err(Error::format(format!(
                "{}: exclusion reasons do not add up",
                self.pipeline
            )));
        }
        for s in &self.statistics {
            if !s.kind.admits(s.value) {
                return Err(Error::format(format!(
                    "{}: statistic `{}` = {} outside the range of {:?}",
                    self.pipeline, s.name, s.value, s.kind
                )));
            }
            if s.cases == 0 || s.cases > self.included {
                return Err(Error::format(format!(
                    "{}: statistic `{}` counts {} cases of {}",
                    self.pipeline, s.name, s.cases, self.included
                )));
            }
        }
        Ok(())
    }
}

/// Accumulates per-case values; each statistic is a mean over cases.
#[derive(Debug, Clone, Default)]
pub(crate) struct ReportBuilder {
    order: Vec<(String, StatKind)>,
    sums: BTreeMap<String, (f64, usize)>,
    pub included: usize,
    pub exclusions: BTreeMap<String, usize>,
}

impl ReportBuilder {
    pub fn declare(&mut self, name: &str, kind: StatKind) {
        if !self.order.iter().any(|(n, _)| n == name) {
            self.order.push((name.to_owned(), kind));
        }
    }

    pub fn add(&mut self, name: &str, value: f64) {
        debug_assert!(
            self.order.iter().any(|(n, _)| n == name),
            "undeclared statistic {name}"
        );
        let e = self.sums.entry(name.to_owned()).or_insert((0.0, 0));
        e.0 += value;
        e.1 += 1;
    }

    pub fn exclude(&mut self, reason: &str) {
        *self.exclusions.entry(reason.to_owned()).or_insert(0) += 1;
    }

    pub fn finish(
        self,
        pipeline: &str,
        model_id: &str,
        fingerprint: String,
        ingested: usize,
        profile: Option<HeadProfile>,
        top_k: usize,
    ) -> Result<EvidenceReport> {
        let statistics = self
            .order
            .iter()
            .filter_map(|(name, kind)| {
                self.sums.get(name).map(|&(sum, n)| Statistic {
                    name: name.clone(),
                    kind: *kind,
                    value: sum / n as f64,
                    cases: n,
                })
            })
            .collect();
        let top_heads = profile.as_ref().map(|p| p.top_k(top_k)).unwrap_or_default();
        let excluded = self.exclusions.values().sum();
        let report = EvidenceReport {
            schema: REPORT_SCHEMA.into(),
            pipeline: pipeline.into(),
            model_id: model_id.into(),
            fingerprint,
            ingested,
            included: self.included,
            excluded,
            exclusions: self.exclusions,
            statistics,
            profile,
            top_heads,
        };
        report.validate()?;
        Ok(report)
    }
}

/// Hex SHA-256 of the canonical JSON of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("fingerprint input serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Flat CSV: `pipeline,statistic,kind,value,cases`.
pub fn reports_to_csv(reports: &[EvidenceReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pipeline", "statistic", "kind", "value", "cases"])
        .map_err(Error::format)?;
    for r in reports {
        for s in &r.statistics {
            let kind = serde_json::to_value(s.kind)?;
            w.write_record([
                r.pipeline.as_str(),
                s.name.as_str(),
                kind.as_str().unwrap_or_default(),
                &format!("{}", s.value),
                &s.cases.to_string(),
            ])
            .map_err(Error::format)?;
        }
        for (key, value) in [
            ("included", r.included),
            ("excluded", r.excluded),
            ("ingested", r.ingested),
        ] {
            w.write_record([
                r.pipeline.as_str(),
                key,
                "count",
                &value.to_string(),
                &value.to_string(),
            ])
            .map_err(Error::format)?;
        }
    }
    let bytes = w.into_inner().map_err(Error::format)?;
    String::from_utf8(bytes).map_err(Error::format)
}
