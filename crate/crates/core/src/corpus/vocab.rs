use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<S>";
pub const EOS: &str = "</S>";
pub const RESERVED: [&str; 4] = [UNK, PAD, BOS, EOS];
pub const UNK_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

/// Symbol table with four reserved ids (`<unk>`, `<pad>`, `<S>`, `</S>`)
/// followed by symbols ordered by descending count, then lexicographically.
///
/// On disk: one symbol per line, reserved block omitted, so line `i`
/// (zero-based) holds id `i + 4`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_symbols(Vec::<String>::new()).expect("reserved-only vocabulary")
    }
}

impl Vocabulary {
    /// Vocabulary over the given non-reserved symbols, in order.
    pub fn from_symbols<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(symbols.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, s) in all.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary symbol `{s}`")));
            }
        }
        Ok(Self { symbols: all, index })
    }

    /// Counts symbols and keeps those seen at least `min_count` times.
    pub fn build<'a>(symbols: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in symbols {
            if RESERVED.contains(&s) {
                continue;
            }
            *counts.entry(s).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_symbols(kept.into_iter().map(|(s, _)| s.to_string())).expect("unique symbols")
    }

    /// Character vocabulary over the characters of `words`.
    pub fn build_chars<'a>(words: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let chars: Vec<String> = words
            .into_iter()
            .flat_map(|w| w.chars().map(String::from))
            .collect();
        Self::build(chars.iter().map(String::as_str), min_count)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.len() == RESERVED.len()
    }

    pub fn id(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn id_of_char(&self, c: char) -> usize {
        let mut buf = [0u8; 4];
        self.id(c.encode_utf8(&mut buf))
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.index.contains_key(symbol)
    }

    /// Non-reserved symbols in id order.
    pub fn symbols(&self) -> &[String] {
        &self.symbols[RESERVED.len()..]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in self.symbols() {
            writeln!(w, "{s}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut syms = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("<vocab>", e))?;
            syms.push(line);
        }
        Self::from_symbols(syms)
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("write to Vec");
        String::from_utf8(buf).expect("utf-8 symbols")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn min_count_filtering() {
        let v = Vocabulary::build("a a b".split(' '), 1);
        assert_eq!(v.symbols(), &["a", "b"]);
        assert_eq!(v.id("a"), 4);
        let v2 = Vocabulary::build("a a b".split(' '), 2);
        assert_eq!(v2.symbols(), &["a"]);
        assert_eq!(v2.id("b"), UNK_ID);
        let empty = Vocabulary::build(std::iter::empty(), 1);
        assert_eq!(empty.len(), 4);
        assert!(empty.is_empty());
    }

    #[test]
    fn ordering_count_then_lexicographic() {
        let v = Vocabulary::build("c b b a a d".split(' '), 1);
        assert_eq!(v.symbols(), &["a", "b", "c", "d"]);
    }

    #[test]
    fn save_load_round_trip() {
        let v = Vocabulary::build("x y y z z z".split(' '), 1);
        let text = v.to_text();
        let back = Vocabulary::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, v);
        for s in ["x", "y", "z", "q"] {
            assert_eq!(back.id(s), v.id(s));
        }
    }

    #[test]
    fn chars_round_trip_with_unknown() {
        let v = Vocabulary::build_chars(["Abc", "ca"], 1);
        let ids: Vec<usize> = "Abc".chars().map(|c| v.id_of_char(c)).collect();
        let back: String = ids.iter().map(|&i| v.symbol(i).unwrap()).collect();
        assert_eq!(back, "Abc");
        assert_eq!(v.id_of_char('Z'), UNK_ID);
    }
}
