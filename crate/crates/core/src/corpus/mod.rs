//! Labeled and unlabeled text ingestion.
//!
//! * CoNLL column files: UTF-8, whitespace-separated fields, blank line
//!   between sentences, `-DOCSTART-` lines dropped.
//! * Plain LM corpora: one sentence per line, whitespace tokenized.

mod scheme;
mod vocab;

use std::io::BufRead;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;

pub use scheme::{convert_scheme, from_spans, to_spans, LabelScheme, SchemeKind, Span, Tag, TagPrefix};
pub use vocab::{Vocabulary, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID, RESERVED, UNK, UNK_ID};

use crate::error::{Error, Result};
use crate::rng::RngStream;

static DECIMAL_DIGIT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\p{Nd}").expect("static regex"));

/// Lowercases (Unicode) and replaces every decimal digit with `0`.
pub fn normalize(raw: &str) -> String {
    let lower = raw.to_lowercase();
    DECIMAL_DIGIT.replace_all(&lower, "0").into_owned()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub raw: String,
    pub norm: String,
}

impl Token {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let norm = normalize(&raw);
        Self { raw, norm }
    }

    /// Character ids of the raw (`use_raw`) or normalized form.
    pub fn char_ids(&self, chars: &Vocabulary, use_raw: bool) -> Vec<usize> {
        let s = if use_raw { &self.raw } else { &self.norm };
        s.chars().map(|c| chars.id_of_char(c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<Token>,
    pub tags: Option<Vec<String>>,
}

impl Sentence {
    pub fn new(tokens: Vec<Token>, tags: Option<Vec<String>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Data("empty sentence".into()));
        }
        if let Some(t) = &tags {
            if t.len() != tokens.len() {
                return Err(Error::Data(format!(
                    "{} tags for {} tokens",
                    t.len(),
                    tokens.len()
                )));
            }
        }
        Ok(Self { tokens, tags })
    }

    pub fn from_words(words: &[&str]) -> Self {
        Self::new(words.iter().map(|w| Token::new(*w)).collect(), None).expect("non-empty")
    }

    pub fn labeled(words: &[&str], tags: &[&str]) -> Result<Self> {
        Self::new(
            words.iter().map(|w| Token::new(*w)).collect(),
            Some(tags.iter().map(|t| t.to_string()).collect()),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn norms(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.norm.as_str())
    }

    pub fn raws(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.raw.as_str())
    }

    pub fn tags(&self) -> Option<&[String]> {
        self.tags.as_deref()
    }
}

/// Parses CoNLL columns. `tag_column` is zero-based.
pub fn parse_conll<R: BufRead>(
    reader: R,
    column_count: usize,
    tag_column: usize,
) -> Result<Vec<Sentence>> {
    parse_conll_named(reader, column_count, tag_column, "<input>")
}

pub fn parse_conll_named<R: BufRead>(
    reader: R,
    column_count: usize,
    tag_column: usize,
    source: &str,
) -> Result<Vec<Sentence>> {
    if tag_column >= column_count {
        return Err(Error::Invalid(format!(
            "tag column {tag_column} outside {column_count} columns"
        )));
    }
    let mut out = Vec::new();
    let mut words: Vec<Token> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let flush = |words: &mut Vec<Token>, tags: &mut Vec<String>, out: &mut Vec<Sentence>| {
        if !words.is_empty() {
            out.push(Sentence {
                tokens: std::mem::take(words),
                tags: Some(std::mem::take(tags)),
            });
        }
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            flush(&mut words, &mut tags, &mut out);
            continue;
        }
        if fields[0] == "-DOCSTART-" {
            flush(&mut words, &mut tags, &mut out);
            continue;
        }
        if fields.len() < column_count {
            return Err(Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg: format!("expected {column_count} columns, found {}", fields.len()),
            });
        }
        words.push(Token::new(fields[0]));
        tags.push(fields[tag_column].to_string());
    }
    flush(&mut words, &mut tags, &mut out);
    Ok(out)
}

pub fn read_conll(path: &Path, column_count: usize, tag_column: usize) -> Result<Vec<Sentence>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_conll_named(
        std::io::BufReader::new(f),
        column_count,
        tag_column,
        &path.display().to_string(),
    )
}

/// One sentence per non-blank line.
pub fn parse_plain<R: BufRead>(reader: R) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<plain>", e))?;
        let toks: Vec<Token> = line.split_whitespace().map(Token::new).collect();
        if !toks.is_empty() {
            out.push(Sentence { tokens: toks, tags: None });
        }
    }
    Ok(out)
}

pub fn read_plain(path: &Path) -> Result<Vec<Sentence>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_plain(std::io::BufReader::new(f))
}

/// Draws `floor(fraction · N)` sentences without replacement, keeping their
/// original order.
pub fn subsample(sentences: &[Sentence], fraction: f64, rng: &mut RngStream) -> Result<Vec<Sentence>> {
    let chosen = subsample_indices(sentences.len(), fraction, rng)?;
    Ok(chosen.into_iter().map(|i| sentences[i].clone()).collect())
}

/// Sorted indices of the items `subsample` would keep.
pub fn subsample_indices(n: usize, fraction: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * n as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    if k == n {
        return Ok(idx);
    }
    rng.shuffle(&mut idx);
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("IBM-370"), "ibm-000");
        assert_eq!(normalize("Central"), "central");
        assert_eq!(normalize(""), "");
        // Arabic-Indic digits carry the decimal-digit property too.
        assert_eq!(normalize("A\u{0663}"), "a0");
    }

    #[test]
    fn conll_basic_format() {
        let text = "-DOCSTART- -X- O O\n\nconfidence NN B-NP\nin IN B-PP\n\nthe DT B-NP\n";
        let s = parse_conll(text.as_bytes(), 3, 2).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].tokens[0].raw, "confidence");
        assert_eq!(s[0].tags().unwrap()[0], "B-NP");
        assert_eq!(s[1].len(), 1);
    }

    #[test]
    fn conll_ragged_line_reports_line_number() {
        let text = "a NN B-NP\nb NN\n";
        match parse_conll(text.as_bytes(), 3, 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conll_empty_input() {
        assert!(parse_conll("".as_bytes(), 2, 1).unwrap().is_empty());
    }

    #[test]
    fn plain_lines() {
        let s = parse_plain("a b  c\n\n d\n".as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].tokens[0].raw, "d");
    }

    #[test]
    fn subsample_contract() {
        let sents: Vec<Sentence> = (0..100)
            .map(|i| Sentence::from_words(&[&format!("w{i}")]))
            .collect();
        let mut rng = RngStream::new(3);
        assert_eq!(subsample(&sents, 1.0, &mut rng).unwrap(), sents);
        let one = subsample(&sents, 0.01, &mut RngStream::new(5)).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one, subsample(&sents, 0.01, &mut RngStream::new(5)).unwrap());
        let half = subsample(&sents, 0.5, &mut RngStream::new(9)).unwrap();
        let pos: Vec<usize> = half
            .iter()
            .map(|s| sents.iter().position(|t| t == s).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(subsample(&sents, 0.0, &mut rng).is_err());
        assert!(subsample(&sents, 1.5, &mut rng).is_err());
    }

    proptest::proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC*") {
            let once = normalize(&s);
            proptest::prop_assert_eq!(normalize(&once), once);
        }
    }
}
