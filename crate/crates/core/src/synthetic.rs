//! Generated corpora with known structure: a first-order Markov chain with a
//! closed-form entropy rate, and a tagging task whose ambiguous token is
//! resolved only by sentence-level context.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Token};
use crate::error::{Error, Result};
use crate::rng::RngStream;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

/// Lowercase word of `syllables` consonant-vowel pairs.
pub fn syllable_word(rng: &mut RngStream, syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS[rng.below(ONSETS.len())], VOWELS[rng.below(VOWELS.len())]))
        .collect()
}

/// `n` distinct words of `syllables` syllables none of which is in `taken`.
/// The new words are added to `taken`.
pub fn distinct_words(rng: &mut RngStream, n: usize, syllables: usize, taken: &mut HashSet<String>) -> Result<Vec<String>> {
    let space = (ONSETS.len() * VOWELS.len()).pow(syllables as u32);
    if n + taken.len() > space / 2 {
        return Err(Error::Invalid(format!("cannot draw {n} distinct {syllables}-syllable words")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = syllable_word(rng, syllables);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Chain over `V` words plus a sentence boundary. Row `i` of `next` gives the
/// successor distribution of word `i` over the `V` words and, last, the
/// boundary; `start` is the distribution of first words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    pub words: Vec<String>,
    pub start: Vec<f64>,
    pub next: Vec<Vec<f64>>,
}

impl MarkovChain {
    /// Each word gets `branching` random successors with random weights,
    /// and ends the sentence with probability `end_prob`.
    pub fn random(vocab: usize, branching: usize, end_prob: f64, rng: &mut RngStream) -> Result<Self> {
        if vocab == 0 || branching == 0 || branching > vocab || !(end_prob > 0.0 && end_prob < 1.0) {
            return Err(Error::Invalid(format!(
                "bad chain shape: vocab {vocab}, branching {branching}, end {end_prob}"
            )));
        }
        let words = distinct_words(rng, vocab, 2, &mut HashSet::new())?;
        let sparse_row = |rng: &mut RngStream| {
            let mut idx: Vec<usize> = (0..vocab).collect();
            rng.shuffle(&mut idx);
            let w: Vec<f64> = (0..branching).map(|_| 0.2 + rng.unit()).collect();
            let total: f64 = w.iter().sum();
            let mut row = vec![0.0; vocab];
            for (k, &i) in idx[..branching].iter().enumerate() {
                row[i] = w[k] / total;
            }
            row
        };
        let start = sparse_row(rng);
        let next = (0..vocab)
            .map(|_| {
                let mut r: Vec<f64> = sparse_row(rng).into_iter().map(|p| p * (1.0 - end_prob)).collect();
                r.push(end_prob);
                r
            })
            .collect();
        Ok(Self { words, start, next })
    }

    pub fn vocab(&self) -> usize {
        self.words.len()
    }

    pub fn sample_sentence(&self, rng: &mut RngStream) -> Sentence {
        let v = self.vocab();
        let mut toks = Vec::new();
        let mut cur = rng.categorical(&self.start);
        while cur < v {
            toks.push(Token::new(self.words[cur].as_str()));
            cur = rng.categorical(&self.next[cur]);
        }
        Sentence::new(toks, None).expect("untagged sentence")
    }

    pub fn sample_corpus(&self, n: usize, rng: &mut RngStream) -> Vec<Sentence> {
        (0..n).map(|_| self.sample_sentence(rng)).collect()
    }

    /// Transition matrix over `V + 1` states, boundary last.
    fn full_matrix(&self) -> Vec<Vec<f64>> {
        let mut m = self.next.clone();
        let mut b = self.start.clone();
        b.push(0.0);
        m.push(b);
        m
    }

    /// Stationary distribution over words and the boundary (last entry),
    /// by power iteration on the lazy chain.
    pub fn stationary(&self) -> Vec<f64> {
        let m = self.full_matrix();
        let s = m.len();
        let mut pi = vec![1.0 / s as f64; s];
        for _ in 0..100_000 {
            let mut nxt = vec![0.0; s];
            for (i, row) in m.iter().enumerate() {
                nxt[i] += 0.5 * pi[i];
                for (j, &p) in row.iter().enumerate() {
                    nxt[j] += 0.5 * pi[i] * p;
                }
            }
            let diff: f64 = nxt.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = nxt;
            if diff < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy in nats per prediction, where each sentence of `N` words
    /// makes `N + 1` predictions (the last one being the end).
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        self.full_matrix()
            .iter()
            .zip(&pi)
            .map(|(row, &p)| p * row.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum::<f64>())
            .sum()
    }

    /// Perplexity of the true chain on `sentences`.
    pub fn perplexity(&self, sentences: &[Sentence]) -> Result<f64> {
        let v = self.vocab();
        let index = |w: &str| {
            self.words
                .iter()
                .position(|x| x == w)
                .ok_or_else(|| Error::Data(format!("`{w}` is not a chain word")))
        };
        let (mut nll, mut count) = (0.0, 0usize);
        for s in sentences {
            let mut row = &self.start;
            for w in s.raws() {
                let i = index(w)?;
                nll -= row[i].ln();
                row = &self.next[i];
            }
            nll -= row.get(v).copied().unwrap_or(0.0).ln();
            count += s.len() + 1;
        }
        Ok((nll / count as f64).exp())
    }
}

/// Shape of the two-grammar tagging task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarTaskConfig {
    pub cues_per_grammar: usize,
    pub fillers: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Chance that a free slot holds a grammar cue rather than a filler.
    pub cue_rate: f64,
    /// Chance that a sentence contains a person name.
    pub name_rate: f64,
    /// Chance that a sentence contains a fresh lowercase word.
    pub junk_rate: f64,
    pub ambiguous: String,
}

impl Default for GrammarTaskConfig {
    fn default() -> Self {
        Self {
            cues_per_grammar: 300,
            fillers: 30,
            min_len: 8,
            max_len: 12,
            cue_rate: 0.35,
            name_rate: 0.6,
            junk_rate: 0.6,
            ambiguous: "bank".into(),
        }
    }
}

/// Sentences drawn from one of two grammars that share fillers but have
/// disjoint cue vocabularies. The ambiguous word, flanked by cues of its
/// sentence's grammar, is a `LOC` under grammar 0 and an `ORG` under
/// grammar 1. Capitalized fresh words are `PER`; fresh lowercase words are
/// `O`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarTask {
    pub config: GrammarTaskConfig,
    pub cues: [Vec<String>; 2],
    pub fillers: Vec<String>,
}

/// Names and fresh lowercase words are long enough to almost never repeat.
const FRESH_SYLLABLES: usize = 4;

pub const GRAMMAR_TYPES: [&str; 2] = ["LOC", "ORG"];

impl GrammarTask {
    pub fn new(config: GrammarTaskConfig, rng: &mut RngStream) -> Result<Self> {
        if config.min_len < 5 || config.max_len < config.min_len {
            return Err(Error::Invalid(format!(
                "sentence lengths {}..={} too short",
                config.min_len, config.max_len
            )));
        }
        let mut taken = HashSet::from([config.ambiguous.clone()]);
        let fillers = distinct_words(rng, config.fillers, 1, &mut taken)
            .or_else(|_| distinct_words(rng, config.fillers, 2, &mut taken))?;
        let a = distinct_words(rng, config.cues_per_grammar, 3, &mut taken)?;
        let b = distinct_words(rng, config.cues_per_grammar, 3, &mut taken)?;
        Ok(Self {
            config,
            cues: [a, b],
            fillers,
        })
    }

    /// One labeled sentence (BIOES tags) and its grammar.
    pub fn sample(&self, rng: &mut RngStream) -> (Sentence, usize) {
        let c = &self.config;
        let grammar = rng.below(2);
        let len = c.min_len + rng.below(c.max_len - c.min_len + 1);
        let cue = |rng: &mut RngStream| self.cues[grammar][rng.below(self.cues[grammar].len())].clone();
        let mut words: Vec<String> = (0..len)
            .map(|_| {
                if rng.bernoulli(c.cue_rate) {
                    cue(rng)
                } else {
                    self.fillers[rng.below(self.fillers.len())].clone()
                }
            })
            .collect();
        let mut tags = vec!["O".to_string(); len];
        let at = 1 + rng.below(len - 2);
        words[at - 1] = cue(rng);
        words[at] = c.ambiguous.clone();
        words[at + 1] = cue(rng);
        tags[at] = format!("S-{}", GRAMMAR_TYPES[grammar]);
        let free: Vec<usize> = (0..len).filter(|&i| i + 1 < at || i > at + 1).collect();
        let mut used = HashSet::new();
        if rng.bernoulli(c.name_rate) {
            let two = rng.bernoulli(0.5);
            let starts: Vec<usize> = free
                .iter()
                .copied()
                .filter(|&i| !two || (free.contains(&(i + 1))))
                .collect();
            if !starts.is_empty() {
                let i = starts[rng.below(starts.len())];
                words[i] = capitalize(&syllable_word(rng, FRESH_SYLLABLES));
                used.insert(i);
                if two {
                    words[i + 1] = capitalize(&syllable_word(rng, FRESH_SYLLABLES));
                    used.insert(i + 1);
                    tags[i] = "B-PER".into();
                    tags[i + 1] = "E-PER".into();
                } else {
                    tags[i] = "S-PER".into();
                }
            }
        }
        if rng.bernoulli(c.junk_rate) {
            let rest: Vec<usize> = free.iter().copied().filter(|i| !used.contains(i)).collect();
            if !rest.is_empty() {
                let i = rest[rng.below(rest.len())];
                words[i] = syllable_word(rng, FRESH_SYLLABLES);
            }
        }
        let toks = words.into_iter().map(Token::new).collect();
        (Sentence::new(toks, Some(tags)).expect("tags match tokens"), grammar)
    }

    pub fn labeled(&self, n: usize, rng: &mut RngStream) -> Vec<Sentence> {
        (0..n).map(|_| self.sample(rng).0).collect()
    }

    /// Same distribution with the tags dropped.
    pub fn unlabeled(&self, n: usize, rng: &mut RngStream) -> Vec<Sentence> {
        (0..n)
            .map(|_| {
                let s = self.sample(rng).0;
                Sentence::new(s.tokens, None).expect("untagged sentence")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{to_spans, SchemeKind};

    #[test]
    fn deterministic_chain_has_zero_entropy() {
        let chain = MarkovChain {
            words: vec!["a".into(), "b".into()],
            start: vec![1.0, 0.0],
            next: vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        };
        assert!(chain.entropy_rate().abs() < 1e-12);
        let pi = chain.stationary();
        for p in pi {
            assert!((p - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn geometric_chain_entropy() {
        // one word repeated, stopping with probability q: every state
        // predicts with the same binary entropy except the deterministic start
        let q: f64 = 0.25;
        let chain = MarkovChain {
            words: vec!["a".into()],
            start: vec![1.0],
            next: vec![vec![1.0 - q, q]],
        };
        let hb = -(q * q.ln() + (1.0 - q) * (1.0 - q).ln());
        // mean length 1/q words, so a fraction q/(1+q) of predictions are
        // from the boundary
        let expect = hb / (1.0 + q);
        assert!((chain.entropy_rate() - expect).abs() < 1e-10);
    }

    #[test]
    fn sampled_perplexity_approaches_entropy_rate() {
        let mut rng = RngStream::new(4);
        let chain = MarkovChain::random(20, 4, 0.15, &mut rng).unwrap();
        let corpus = chain.sample_corpus(20_000, &mut rng);
        let ppl = chain.perplexity(&corpus).unwrap();
        let target = chain.entropy_rate().exp();
        assert!((ppl / target - 1.0).abs() < 0.01, "{ppl} vs {target}");
    }

    #[test]
    fn grammar_sentences_are_well_formed() {
        let mut rng = RngStream::new(2);
        let task = GrammarTask::new(GrammarTaskConfig::default(), &mut rng).unwrap();
        for _ in 0..500 {
            let (s, g) = task.sample(&mut rng);
            let tags = s.tags().unwrap();
            let spans = to_spans(tags, SchemeKind::Bioes).unwrap();
            let amb: Vec<_> = spans.iter().filter(|sp| sp.ty != "PER").collect();
            assert_eq!(amb.len(), 1);
            assert_eq!(amb[0].ty, GRAMMAR_TYPES[g]);
            let at = amb[0].start;
            assert_eq!(s.tokens[at].raw, "bank");
            assert!(task.cues[g].contains(&s.tokens[at - 1].raw));
            assert!(task.cues[g].contains(&s.tokens[at + 1].raw));
            for sp in spans.iter().filter(|sp| sp.ty == "PER") {
                for k in sp.start..=sp.end {
                    assert!(s.tokens[k].raw.chars().next().unwrap().is_uppercase());
                }
            }
        }
    }
}
