//! Tagging schemes and the spans they encode.
//!
//! Span decoding is total. Chunk boundaries are placed before every `B`, `S`
//! and `O` tag, after every `E`, `S` and `O` tag, and wherever the type
//! changes; every remaining maximal same-type run is one span. On well-formed
//! input this is the usual decoding. On ill-formed model output it repairs,
//! e.g. `[I-LOC, E-LOC]` becomes a single `LOC` span over both tokens.
//! BIO and IOB1 decode identically under this rule, which is also the IOB1
//! repair pass used before conversion.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Iob1,
    Bio,
    Bioes,
}

impl SchemeKind {
    fn prefixes(self) -> &'static [TagPrefix] {
        match self {
            SchemeKind::Iob1 | SchemeKind::Bio => &[TagPrefix::B, TagPrefix::I],
            SchemeKind::Bioes => &[TagPrefix::B, TagPrefix::I, TagPrefix::E, TagPrefix::S],
        }
    }
}

impl FromStr for SchemeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "iob1" | "iob" => Ok(SchemeKind::Iob1),
            "bio" | "iob2" => Ok(SchemeKind::Bio),
            "bioes" | "iobes" => Ok(SchemeKind::Bioes),
            other => Err(Error::Invalid(format!("unknown tagging scheme `{other}`"))),
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::Iob1 => "iob1",
            SchemeKind::Bio => "bio",
            SchemeKind::Bioes => "bioes",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TagPrefix {
    B,
    I,
    E,
    S,
}

impl TagPrefix {
    fn as_char(self) -> char {
        match self {
            TagPrefix::B => 'B',
            TagPrefix::I => 'I',
            TagPrefix::E => 'E',
            TagPrefix::S => 'S',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Outside,
    Chunk(TagPrefix, String),
}

impl Tag {
    pub fn parse(s: &str, kind: SchemeKind) -> Option<Tag> {
        if s == "O" {
            return Some(Tag::Outside);
        }
        let (p, ty) = s.split_once('-')?;
        if ty.is_empty() {
            return None;
        }
        let prefix = match p {
            "B" => TagPrefix::B,
            "I" => TagPrefix::I,
            "E" => TagPrefix::E,
            "S" => TagPrefix::S,
            _ => return None,
        };
        kind.prefixes()
            .contains(&prefix)
            .then(|| Tag::Chunk(prefix, ty.to_string()))
    }

    fn prefix(&self) -> Option<TagPrefix> {
        match self {
            Tag::Outside => None,
            Tag::Chunk(p, _) => Some(*p),
        }
    }

    fn ty(&self) -> Option<&str> {
        match self {
            Tag::Outside => None,
            Tag::Chunk(_, t) => Some(t),
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Outside => f.write_str("O"),
            Tag::Chunk(p, t) => write!(f, "{}-{t}", p.as_char()),
        }
    }
}

/// Inclusive token range carrying a type.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub ty: String,
}

impl Span {
    pub fn new(start: usize, end: usize, ty: impl Into<String>) -> Self {
        Self {
            start,
            end,
            ty: ty.into(),
        }
    }
}

fn parse_all<S: AsRef<str>>(tags: &[S], kind: SchemeKind) -> Result<Vec<Tag>> {
    tags.iter()
        .enumerate()
        .map(|(i, t)| {
            Tag::parse(t.as_ref(), kind).ok_or_else(|| {
                Error::Data(format!(
                    "tag `{}` at position {i} is not a {kind} tag",
                    t.as_ref()
                ))
            })
        })
        .collect()
}

fn spans_of(tags: &[Tag], kind: SchemeKind) -> Vec<Span> {
    let mut out = Vec::new();
    let mut open: Option<(usize, &str)> = None;
    let mut prev_closes = true;
    for (k, tag) in tags.iter().enumerate() {
        let Tag::Chunk(p, ty) = tag else {
            if let Some((s, t)) = open.take() {
                out.push(Span::new(s, k - 1, t));
            }
            prev_closes = true;
            continue;
        };
        let starts = match open {
            None => true,
            Some((_, t)) => t != ty || matches!(p, TagPrefix::B | TagPrefix::S) || prev_closes,
        };
        if starts {
            if let Some((s, t)) = open.take() {
                out.push(Span::new(s, k - 1, t));
            }
            open = Some((k, ty));
        }
        prev_closes = kind == SchemeKind::Bioes && matches!(p, TagPrefix::E | TagPrefix::S);
        if prev_closes {
            let (s, t) = open.take().expect("open span");
            out.push(Span::new(s, k, t));
        }
    }
    if let Some((s, t)) = open {
        out.push(Span::new(s, tags.len() - 1, t));
    }
    out
}

/// Spans encoded by `tags`; ill-formed sequences are repaired.
pub fn to_spans<S: AsRef<str>>(tags: &[S], kind: SchemeKind) -> Result<Vec<Span>> {
    Ok(spans_of(&parse_all(tags, kind)?, kind))
}

/// Canonical tag sequence of length `len` for non-overlapping spans.
pub fn from_spans(spans: &[Span], len: usize, kind: SchemeKind) -> Result<Vec<String>> {
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort_by_key(|s| s.start);
    let mut tags = vec!["O".to_string(); len];
    let mut prev: Option<&Span> = None;
    for s in sorted {
        if s.start > s.end || s.end >= len {
            return Err(Error::Data(format!(
                "span ({}, {}) invalid for length {len}",
                s.start, s.end
            )));
        }
        if let Some(p) = prev {
            if s.start <= p.end {
                return Err(Error::Data(format!(
                    "overlapping spans ({}, {}) and ({}, {})",
                    p.start, p.end, s.start, s.end
                )));
            }
        }
        let adjacent_same = prev.is_some_and(|p| p.end + 1 == s.start && p.ty == s.ty);
        for k in s.start..=s.end {
            let prefix = match kind {
                SchemeKind::Bioes => {
                    if s.start == s.end {
                        'S'
                    } else if k == s.start {
                        'B'
                    } else if k == s.end {
                        'E'
                    } else {
                        'I'
                    }
                }
                SchemeKind::Bio => {
                    if k == s.start {
                        'B'
                    } else {
                        'I'
                    }
                }
                SchemeKind::Iob1 => {
                    if k == s.start && adjacent_same {
                        'B'
                    } else {
                        'I'
                    }
                }
            };
            tags[k] = format!("{prefix}-{}", s.ty);
        }
        prev = Some(s);
    }
    Ok(tags)
}

/// Re-encodes `tags` under another scheme, preserving the span set.
pub fn convert_scheme<S: AsRef<str>>(
    tags: &[S],
    from: SchemeKind,
    to: SchemeKind,
) -> Result<Vec<String>> {
    let spans = to_spans(tags, from)?;
    from_spans(&spans, tags.len(), to)
}

/// Tag inventory: `O` first, then for each type (sorted) its prefixes in
/// `B, I, E, S` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelScheme {
    kind: SchemeKind,
    types: Vec<String>,
    tags: Vec<Tag>,
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelScheme {
    pub fn new<S: Into<String>>(kind: SchemeKind, types: impl IntoIterator<Item = S>) -> Self {
        let set: BTreeSet<String> = types.into_iter().map(Into::into).collect();
        let types: Vec<String> = set.into_iter().collect();
        let mut tags = vec![Tag::Outside];
        for t in &types {
            for &p in kind.prefixes() {
                tags.push(Tag::Chunk(p, t.clone()));
            }
        }
        let names: Vec<String> = tags.iter().map(Tag::to_string).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            kind,
            types,
            tags,
            names,
            index,
        }
    }

    /// Scheme whose types are those appearing in `tags`.
    pub fn infer<'a>(kind: SchemeKind, tags: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut types = BTreeSet::new();
        for (i, t) in tags.into_iter().enumerate() {
            match Tag::parse(t, kind) {
                Some(Tag::Chunk(_, ty)) => {
                    types.insert(ty);
                }
                Some(Tag::Outside) => {}
                None => {
                    return Err(Error::Data(format!(
                        "tag `{t}` (item {i}) is not a {kind} tag"
                    )))
                }
            }
        }
        Ok(Self::new(kind, types))
    }

    pub fn kind(&self) -> SchemeKind {
        self.kind
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    pub fn tag_names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter()
            .enumerate()
            .map(|(i, t)| {
                self.index(t.as_ref()).ok_or_else(|| {
                    Error::Data(format!("tag `{}` at position {i} not in inventory", t.as_ref()))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.names[i].clone()).collect()
    }

    /// Whether `next` may follow `prev`; `None` stands for the sentence
    /// start (as `prev`) or the sentence end (as `next`).
    pub fn transition_allowed(&self, prev: Option<usize>, next: Option<usize>) -> bool {
        let p = prev.map(|i| &self.tags[i]);
        let n = next.map(|i| &self.tags[i]);
        match self.kind {
            SchemeKind::Bioes => {
                let open_after = matches!(p.and_then(Tag::prefix), Some(TagPrefix::B | TagPrefix::I));
                match n {
                    None => !open_after,
                    Some(Tag::Outside) => !open_after,
                    Some(Tag::Chunk(TagPrefix::B | TagPrefix::S, _)) => !open_after,
                    Some(Tag::Chunk(TagPrefix::I | TagPrefix::E, ty)) => {
                        open_after && p.and_then(Tag::ty) == Some(ty.as_str())
                    }
                }
            }
            SchemeKind::Bio => match n {
                Some(Tag::Chunk(TagPrefix::I, ty)) => p.and_then(Tag::ty) == Some(ty.as_str()),
                _ => true,
            },
            SchemeKind::Iob1 => match n {
                Some(Tag::Chunk(TagPrefix::B, ty)) => p.and_then(Tag::ty) == Some(ty.as_str()),
                _ => true,
            },
        }
    }

    pub fn is_valid_sequence(&self, ids: &[usize]) -> bool {
        let mut prev = None;
        for &i in ids {
            if !self.transition_allowed(prev, Some(i)) {
                return false;
            }
            prev = Some(i);
        }
        self.transition_allowed(prev, None)
    }
}
