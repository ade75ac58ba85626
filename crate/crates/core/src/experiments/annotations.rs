// SPDX-License-Identifier: MIT OR Apache-2.0

//! Case annotations: one JSON object per line.
//!
//! ```text
//! {"image": "img/0.png", "animal": "dog", "color": "brown", "distractor": "cat", "mask": "mask/0.png"}
//! ```
//!
//! `image`, `mask` and `split` are optional. Relative paths resolve against
//! the annotation file's directory. Blank lines and lines starting with `#`
//! are skipped.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
    pub animal: String,
    pub color: String,
    pub distractor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

impl CaseAnnotation {
    fn check(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("animal", &self.animal),
            ("color", &self.color),
            ("distractor", &self.distractor),
        ] {
            if v.trim().is_empty() {
                return Err(format!("`{name}` is empty"));
            }
        }
        if self
            .animal
            .trim()
            .eq_ignore_ascii_case(self.distractor.trim())
        {
            return Err(format!("animal and distractor are both `{}`", self.animal));
        }
        Ok(())
    }

    fn dedup_key(&self) -> (Option<PathBuf>, String, String, String) {
        let a = self.animal.trim().to_lowercase();
        match &self.image {
            Some(img) => (Some(img.clone()), a, String::new(), String::new()),
            None => (
                None,
                a,
                self.color.trim().to_lowercase(),
                self.distractor.trim().to_lowercase(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ingested {
    pub cases: Vec<CaseAnnotation>,
    pub errors: Vec<LineError>,
    pub duplicates: usize,
    pub warnings: Vec<String>,
}

/// Parses annotation text. Invalid lines are reported and skipped; repeated
/// cases keep their first occurrence. With an image, a case is identified by
/// `(image, animal)`; without one by `(animal, color, distractor)`.
pub fn parse_annotations(text: &str, base: Option<&Path>) -> Ingested {
    let mut out = Ingested::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut case: CaseAnnotation = match serde_json::from_str(line) {
            Ok(c) => c,
            Err(e) => {
                out.errors.push(LineError {
                    line: i + 1,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if let Err(message) = case.check() {
            out.errors.push(LineError {
                line: i + 1,
                message,
            });
            continue;
        }
        if let Some(base) = base {
            for p in [&mut case.image, &mut case.mask].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        if seen.insert(case.dedup_key()) {
            out.cases.push(case);
        } else {
            out.duplicates += 1;
        }
    }
    if out.cases.is_empty() {
        out.warnings
            .push("no valid cases in the annotation file".into());
    }
    out
}

pub fn ingest_annotations(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    Ok(parse_annotations(&text, path.parent()))
}

/// One JSON line per case.
pub fn write_annotations(cases: &[CaseAnnotation]) -> String {
    let mut out = String::new();
    for c in cases {
        out.push_str(&serde_json::to_string(c).expect("annotation serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_valid_lines_and_reports_the_rest() {
        let text = r#"
# comment
{"animal": "dog", "color": "brown", "distractor": "cat"}
{"animal": "dog", "color": "brown", "distractor": "dog"}
{"animal": "dog", "color": ""  , "distractor": "cat"}
{"animal": "dog"}
not json
{"animal": "dog", "color": "brown", "distractor": "cat"}
{"image": "a.png", "animal": "dog", "color": "red", "distractor": "cat"}
{"image": "a.png", "animal": "dog", "color": "blue", "distractor": "bird"}
{"image": "a.png", "animal": "cat", "color": "blue", "distractor": "bird"}
"#;
        let got = parse_annotations(text, Some(Path::new("/data")));
        assert_eq!(got.cases.len(), 3);
        assert_eq!(got.duplicates, 2);
        let lines: Vec<usize> = got.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![4, 5, 6, 7]);
        assert!(got.errors[0].message.contains("distractor"));
        assert_eq!(
            got.cases[1].image.as_deref(),
            Some(Path::new("/data/a.png"))
        );
        assert!(got.warnings.is_empty());
    }

    #[test]
    fn empty_input_warns() {
        let got = parse_annotations("", None);
        assert!(got.cases.is_empty() && got.errors.is_empty());
        assert_eq!(got.warnings.len(), 1);
    }

    #[test]
    fn round_trips() {
        let cases: Vec<CaseAnnotation> = (0..1000)
            .map(|i| CaseAnnotation {
                image: None,
                animal: format!("a{i}"),
                color: "red".into(),
                distractor: "cat".into(),
                split: Some("test".into()),
                mask: None,
            })
            .collect();
        let got = parse_annotations(&write_annotations(&cases), None);
        assert_eq!(got.cases, cases);
    }
}
