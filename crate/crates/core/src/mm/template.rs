// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned prompt templates with slot tracking.
//!
//! Rendering tokenizes literal text and slot values separately, so the token
//! range each slot occupies is known exactly.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TokenId, Vocabulary};

const BUILTIN: &str = include_str!("../../assets/templates.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Templates {
    pub version: String,
    pub fact: String,
    pub tqa: String,
    pub vqa: String,
    pub color_question: String,
    pub animal_question: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Templates {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN).expect("bundled templates parse")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: Self = toml::from_str(text).map_err(|e| Error::input(format!("templates: {e}")))?;
        for (name, body) in [
            ("fact", &t.fact),
            ("tqa", &t.tqa),
            ("vqa", &t.vqa),
            ("color_question", &t.color_question),
            ("animal_question", &t.animal_question),
        ] {
            parse(body).map_err(|e| Error::input(format!("template `{name}`: {e}")))?;
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("templates serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment<'a> {
    Literal(&'a str),
    Slot { name: &'a str, cap: bool },
}

fn parse(template: &str) -> std::result::Result<Vec<Segment<'_>>, String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            out.push(Segment::Literal(&rest[..open]));
        }
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| format!("unclosed `{{` in `{template}`"))?
            + open;
        let inner = &rest[open + 1..close];
        let (name, cap) = match inner.split_once('|') {
            None => (inner, false),
            Some((n, "cap")) => (n, true),
            Some((_, f)) => return Err(format!("unknown filter `{f}`")),
        };
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(format!("bad slot name `{name}`"));
        }
        out.push(Segment::Slot { name, cap });
        rest = &rest[close + 1..];
    }
    if rest.contains('}') {
        return Err(format!("stray `}}` in `{template}`"));
    }
    if !rest.is_empty() {
        out.push(Segment::Literal(rest));
    }
    Ok(out)
}

/// Slot names used by a template, in order of first appearance.
pub fn slots(template: &str) -> Result<Vec<String>> {
    let mut names: Vec<String> = Vec::new();
    for seg in parse(template).map_err(Error::Input)? {
        if let Segment::Slot { name, .. } = seg {
            if !names.iter().any(|n| n == name) {
                names.push(name.to_owned());
            }
        }
    }
    Ok(names)
}

/// Tokens of a rendered template plus the token range of every slot.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub tokens: Vec<TokenId>,
    /// First occurrence of each slot, including slots of nested renders.
    pub spans: BTreeMap<String, Range<usize>>,
}

impl Rendered {
    /// Joins renders with a single space; spans keep their first occurrence.
    pub fn join(parts: &[Rendered]) -> Self {
        let mut out = Rendered::default();
        for p in parts {
            if !out.text.is_empty() {
                out.text.push(' ');
            }
            out.absorb(p, None);
        }
        out
    }

    fn absorb(&mut self, inner: &Rendered, as_slot: Option<&str>) {
        let offset = self.tokens.len();
        for (k, r) in &inner.spans {
            self.spans
                .entry(k.clone())
                .or_insert(r.start + offset..r.end + offset);
        }
        if let Some(name) = as_slot {
            self.spans
                .entry(name.to_owned())
                .or_insert(offset..offset + inner.tokens.len());
        }
        self.text.push_str(&inner.text);
        self.tokens.extend_from_slice(&inner.tokens);
    }

    pub fn span(&self, slot: &str) -> Option<Range<usize>> {
        self.spans.get(slot).cloned()
    }
}

/// A slot value: plain text or an already-rendered fragment.
#[derive(Debug, Clone, Copy)]
pub enum Value<'a> {
    Text(&'a str),
    Fragment(&'a Rendered),
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Renders `template`, looking slot values up in `values`. Slots whose values
/// tokenize to nothing are rejected, so every recorded span is non-empty.
pub fn render(
    vocab: &Vocabulary,
    template: &str,
    values: &[(&str, Value<'_>)],
) -> Result<Rendered> {
    let mut out = Rendered::default();
    for seg in parse(template).map_err(Error::Input)? {
        match seg {
            Segment::Literal(text) => {
                out.text.push_str(text);
                out.tokens.extend(vocab.encode(text));
            }
            Segment::Slot { name, cap } => {
                let value = values
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| Error::input(format!("no value for template slot `{name}`")))?;
                let piece = match value {
                    Value::Text(t) => {
                        let text = if cap { capitalize(t) } else { t.to_owned() };
                        Rendered {
                            tokens: vocab.encode(&text),
                            text,
                            spans: BTreeMap::new(),
                        }
                    }
                    Value::Fragment(r) => r.clone(),
                };
                if piece.tokens.is_empty() {
                    return Err(Error::input(format!("template slot `{name}` is empty")));
                }
                out.absorb(&piece, Some(name));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let words = "<bos> <eos> <unk> <img> Q A : . ? is What the color of dog cat brown light";
        Vocabulary::new(words.split(' ').map(str::to_owned).collect()).unwrap()
    }

    #[test]
    fn builtin_templates_parse() {
        let t = Templates::builtin();
        assert_eq!(t.version, "toy-color-v1");
        assert_eq!(Templates::from_toml(&t.to_toml()).unwrap(), t);
        assert_eq!(slots(&t.color_question).unwrap(), vec!["animal"]);
        assert!(slots(&t.animal_question).unwrap().is_empty());
    }

    #[test]
    fn rejects_malformed_templates() {
        assert!(parse("{open").is_err());
        assert!(parse("x}").is_err());
        assert!(parse("{a|upper}").is_err());
        assert!(parse("{}").is_err());
    }

    #[test]
    fn spans_cover_slot_tokens() {
        let v = vocab();
        let r = render(
            &v,
            "{context|cap} is {color}.",
            &[
                ("context", Value::Text("dog")),
                ("color", Value::Text("light brown")),
            ],
        )
        .unwrap();
        assert_eq!(r.text, "Dog is light brown.");
        assert_eq!(r.span("context"), Some(0..1));
        assert_eq!(r.span("color"), Some(2..4));
        let outer = render(&v, "{facts} Q", &[("facts", Value::Fragment(&r))]).unwrap();
        assert_eq!(outer.span("color"), Some(2..4));
        assert_eq!(outer.span("facts"), Some(0..5));
    }

    #[test]
    fn missing_or_empty_values_fail() {
        let v = vocab();
        assert!(render(&v, "{x}", &[]).is_err());
        assert!(render(&v, "{x}", &[("x", Value::Text("  "))]).is_err());
    }
}
