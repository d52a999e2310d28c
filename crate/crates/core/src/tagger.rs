//! Hierarchical bi-RNN + CRF tagger with optional LM-embedding injection.
//!
//! ```text
//! x_k  = [c_k ; w_k (; h^LM_k  if input_first)]
//! h1_k = BiRNN1(x)_k   (; h^LM_k  if output_first)
//! h2_k = BiRNN2(h1)_k  (; h^LM_k  if output_second)
//! emissions_k = dropout(h2_k) · W + b            → CRF
//! ```
//! `lm_only` keeps just `emissions_k = h^LM_k · W + b` and the CRF.
//! With `lm_dim = 0` every insertion mode builds exactly the baseline graph.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabelScheme, SchemeKind, Sentence, Vocabulary};
use crate::crf::{self, CrfHead};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::layers::{dropout, BiLayer, CellKind, CharEncoder, CharEncoderConfig, Dense, EmbeddingTable, Phase};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionMode {
    None,
    InputFirst,
    OutputFirst,
    OutputSecond,
    LmOnly,
}

impl InsertionMode {
    pub const ALL: [InsertionMode; 5] = [
        InsertionMode::None,
        InsertionMode::InputFirst,
        InsertionMode::OutputFirst,
        InsertionMode::OutputSecond,
        InsertionMode::LmOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InsertionMode::None => "none",
            InsertionMode::InputFirst => "input_first",
            InsertionMode::OutputFirst => "output_first",
            InsertionMode::OutputSecond => "output_second",
            InsertionMode::LmOnly => "lm_only",
        }
    }

    pub fn uses_lm(self) -> bool {
        self != InsertionMode::None
    }
}

impl fmt::Display for InsertionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InsertionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.replace('-', "_"))
            .ok_or_else(|| Error::Invalid(format!("unknown insertion mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerConfig {
    pub char_encoder: CharEncoderConfig,
    /// Character encoder reads raw token characters (true) or normalized ones.
    #[serde(default = "yes")]
    pub raw_chars: bool,
    pub word_dim: usize,
    pub rnn: CellKind,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Dropout on the input of each task RNN layer.
    pub rnn_dropout: f64,
    /// Dropout on the output of the final RNN layer.
    #[serde(default)]
    pub output_dropout: f64,
    pub mode: InsertionMode,
    #[serde(default)]
    pub lm_dim: usize,
    #[serde(default = "bioes")]
    pub scheme: SchemeKind,
    #[serde(default = "yes")]
    pub constrained: bool,
}

fn yes() -> bool {
    true
}
fn bioes() -> SchemeKind {
    SchemeKind::Bioes
}

/// Input sizes of the layers a config wires together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Wiring {
    pub token_dim: usize,
    /// `None` when the layer is absent (`lm_only`).
    pub rnn1_input: Option<usize>,
    pub rnn2_input: Option<usize>,
    pub projection_input: usize,
}

pub const PRESETS: [&str; 4] = ["conll2003-ner", "conll2000-chunk", "desk-ner", "desk-chunk"];

impl TaggerConfig {
    /// Named baseline configurations; attach an LM with [`Self::with_lm`].
    ///
    /// `desk-*` presets divide every embedding, filter and hidden size of the
    /// full preset by 10 (rounding up) and keep everything else.
    pub fn preset(name: &str) -> Result<Self> {
        let ner = || {
            let mut ch = CharEncoderConfig::rnn(25, 80, 2);
            ch.embed_dropout = 0.25;
            ch.rnn_dropout = 0.25;
            TaggerConfig {
                char_encoder: ch,
                raw_chars: true,
                word_dim: 50,
                rnn: CellKind::Gru,
                hidden1: 300,
                hidden2: 300,
                rnn_dropout: 0.25,
                output_dropout: 0.0,
                mode: InsertionMode::None,
                lm_dim: 0,
                scheme: SchemeKind::Bioes,
                constrained: true,
            }
        };
        let chunk = || {
            let mut ch = CharEncoderConfig::cnn(30, 30, 3);
            ch.embed_dropout = 0.5;
            TaggerConfig {
                char_encoder: ch,
                raw_chars: true,
                word_dim: 50,
                rnn: CellKind::Lstm,
                hidden1: 200,
                hidden2: 200,
                rnn_dropout: 0.5,
                output_dropout: 0.5,
                mode: InsertionMode::None,
                lm_dim: 0,
                scheme: SchemeKind::Bioes,
                constrained: true,
            }
        };
        match name {
            "conll2003-ner" => Ok(ner()),
            "conll2000-chunk" => Ok(chunk()),
            "desk-ner" => Ok(ner().shrunk(10)),
            "desk-chunk" => Ok(chunk().shrunk(10)),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    fn shrunk(mut self, factor: usize) -> Self {
        let s = |x: usize| if x == 0 { 0 } else { x.div_ceil(factor) };
        self.char_encoder.char_dim = s(self.char_encoder.char_dim);
        self.char_encoder.filters = s(self.char_encoder.filters);
        self.char_encoder.hidden = s(self.char_encoder.hidden);
        self.word_dim = s(self.word_dim);
        self.hidden1 = s(self.hidden1);
        self.hidden2 = s(self.hidden2);
        self
    }

    pub fn with_lm(mut self, mode: InsertionMode, lm_dim: usize) -> Self {
        self.mode = mode;
        self.lm_dim = lm_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            InsertionMode::None if self.lm_dim != 0 => {
                return Err(Error::Config(format!(
                    "mode none takes no LM embeddings but lm_dim = {}",
                    self.lm_dim
                )))
            }
            InsertionMode::LmOnly if self.lm_dim == 0 => {
                return Err(Error::Config("mode lm_only needs lm_dim > 0".into()))
            }
            _ => {}
        }
        if self.rnn == CellKind::Lstmp {
            return Err(Error::Config("task RNN layers are gru or lstm".into()));
        }
        for p in [self.rnn_dropout, self.output_dropout, self.char_encoder.embed_dropout, self.char_encoder.rnn_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        if self.mode != InsertionMode::LmOnly {
            self.char_encoder.validate()?;
            if self.word_dim == 0 || self.hidden1 == 0 || self.hidden2 == 0 {
                return Err(Error::Config("word_dim, hidden1 and hidden2 must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn wiring(&self) -> Wiring {
        let lm = |m: InsertionMode| if self.mode == m { self.lm_dim } else { 0 };
        if self.mode == InsertionMode::LmOnly {
            return Wiring {
                token_dim: 0,
                rnn1_input: None,
                rnn2_input: None,
                projection_input: self.lm_dim,
            };
        }
        let token_dim = self.char_encoder.output_dim() + self.word_dim;
        Wiring {
            token_dim,
            rnn1_input: Some(token_dim + lm(InsertionMode::InputFirst)),
            rnn2_input: Some(2 * self.hidden1 + lm(InsertionMode::OutputFirst)),
            projection_input: 2 * self.hidden2 + lm(InsertionMode::OutputSecond),
        }
    }

    /// Exact trainable-parameter count for the given inventory sizes.
    pub fn parameter_count(&self, num_words: usize, num_chars: usize, num_tags: usize) -> usize {
        let w = self.wiring();
        let mut total = Dense::parameter_count(w.projection_input, num_tags) + CrfHead::<f64>::parameter_count(num_tags);
        if let (Some(d1), Some(d2)) = (w.rnn1_input, w.rnn2_input) {
            total += self.char_encoder.parameter_count(num_chars)
                + num_words * self.word_dim
                + BiLayer::parameter_count(self.rnn, d1, self.hidden1, None)
                + BiLayer::parameter_count(self.rnn, d2, self.hidden2, None);
        }
        total
    }

    /// Config with `hidden2` chosen so the parameter count is as close as
    /// possible to `target` (ties go to the smaller size). Counts grow
    /// strictly with `hidden2`, so a binary search finds the crossing.
    pub fn match_parameters(&self, target: usize, num_words: usize, num_chars: usize, num_tags: usize) -> Result<Self> {
        if self.mode == InsertionMode::LmOnly {
            return Err(Error::Config("lm_only has no second RNN layer to resize".into()));
        }
        let count = |h: usize| {
            let mut c = self.clone();
            c.hidden2 = h;
            c.parameter_count(num_words, num_chars, num_tags)
        };
        if target < count(1) {
            return Err(Error::Config(format!(
                "target {target} is below the minimum {} reachable with hidden2 = 1",
                count(1)
            )));
        }
        let (mut lo, mut hi) = (1usize, 2usize);
        while count(hi) < target {
            lo = hi;
            hi *= 2;
        }
        // count(lo) <= target <= count(hi)
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if count(mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let best = if target - count(lo) <= count(hi) - target { lo } else { hi };
        let mut out = self.clone();
        out.hidden2 = best;
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TaggerModel<T: Scalar = f64> {
    pub config: TaggerConfig,
    pub words: Vocabulary,
    pub chars: Vocabulary,
    pub scheme: LabelScheme,
    pub store: ParamStore<T>,
    char_encoder: Option<CharEncoder>,
    word_embed: Option<EmbeddingTable>,
    rnn1: Option<BiLayer>,
    rnn2: Option<BiLayer>,
    projection: Dense,
    pub crf: CrfHead<T>,
}

impl<T: Scalar> TaggerModel<T> {
    /// `pretrained` replaces the random word-embedding initialization.
    pub fn new(
        config: TaggerConfig,
        words: Vocabulary,
        chars: Vocabulary,
        scheme: LabelScheme,
        pretrained: Option<Tensor<T>>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate()?;
        if scheme.kind() != config.scheme {
            return Err(Error::Config(format!(
                "label scheme is {} but the config asks for {}",
                scheme.kind(),
                config.scheme
            )));
        }
        let w = config.wiring();
        let mut store = ParamStore::new();
        let (mut char_encoder, mut word_embed, mut rnn1, mut rnn2) = (None, None, None, None);
        if let (Some(d1), Some(d2)) = (w.rnn1_input, w.rnn2_input) {
            char_encoder = Some(CharEncoder::new(&mut store, "char", &config.char_encoder, chars.len(), rng)?);
            word_embed = Some(match pretrained {
                Some(t) => {
                    if t.shape() != [words.len(), config.word_dim] {
                        return Err(Error::Config(format!(
                            "pre-trained embeddings {:?} do not match vocabulary {} x {}",
                            t.shape(),
                            words.len(),
                            config.word_dim
                        )));
                    }
                    EmbeddingTable::with_values(&mut store, "word.embed", t)?
                }
                None => EmbeddingTable::new(&mut store, "word.embed", words.len(), config.word_dim, rng)?,
            });
            rnn1 = Some(BiLayer::new(&mut store, "rnn1", config.rnn, d1, config.hidden1, None, config.rnn_dropout, rng)?);
            rnn2 = Some(BiLayer::new(&mut store, "rnn2", config.rnn, d2, config.hidden2, None, config.rnn_dropout, rng)?);
        }
        let projection = Dense::new(&mut store, "proj", w.projection_input, scheme.num_tags(), rng)?;
        let crf = CrfHead::new(&mut store, "crf", &scheme, config.constrained)?;
        Ok(Self {
            config,
            words,
            chars,
            scheme,
            store,
            char_encoder,
            word_embed,
            rnn1,
            rnn2,
            projection,
            crf,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_elements()
    }

    fn check_lm(&self, sentence: &Sentence, lm: Option<&Tensor<T>>) -> Result<Option<Tensor<T>>> {
        if self.config.lm_dim == 0 {
            return Ok(None);
        }
        let t = lm.ok_or_else(|| {
            Error::Config(format!("mode {} needs LM embeddings for every sentence", self.config.mode))
        })?;
        if t.shape() != [sentence.len(), self.config.lm_dim] {
            return Err(Error::Data(format!(
                "LM embeddings {:?} do not fit a {}-token sentence with lm_dim {}",
                t.shape(),
                sentence.len(),
                self.config.lm_dim
            )));
        }
        Ok(Some(t.clone()))
    }

    /// Token representations `[N × (char_out + word_dim)]`.
    fn token_reps(&self, g: &mut Graph<'_, T>, sentence: &Sentence, phase: &mut Phase) -> Result<Var> {
        let enc = self.char_encoder.as_ref().expect("token layers present");
        let emb = self.word_embed.as_ref().expect("token layers present");
        let mut rows = Vec::with_capacity(sentence.len());
        for tok in &sentence.tokens {
            let ids = tok.char_ids(&self.chars, self.config.raw_chars);
            rows.push(enc.encode(g, &ids, phase)?);
        }
        let c = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0)? };
        let ids: Vec<usize> = sentence.tokens.iter().map(|t| self.words.id(&t.norm)).collect();
        let w = emb.lookup(g, &ids)?;
        g.concat(&[c, w], 1)
    }

    /// Per-position tag scores `[N × L]`.
    pub fn emissions(
        &self,
        g: &mut Graph<'_, T>,
        sentence: &Sentence,
        lm: Option<&Tensor<T>>,
        phase: &mut Phase,
    ) -> Result<Var> {
        let lm = self.check_lm(sentence, lm)?.map(|t| g.constant(t));
        let mode = self.config.mode;
        let join = |g: &mut Graph<'_, T>, x: Var, at: InsertionMode| -> Result<Var> {
            match lm {
                Some(h) if mode == at => g.concat(&[x, h], 1),
                _ => Ok(x),
            }
        };
        let top = match (&self.rnn1, &self.rnn2) {
            (Some(r1), Some(r2)) => {
                let x = self.token_reps(g, sentence, phase)?;
                let x = join(g, x, InsertionMode::InputFirst)?;
                let h1 = r1.run(g, x, phase)?;
                let h1 = join(g, h1, InsertionMode::OutputFirst)?;
                let h2 = r2.run(g, h1, phase)?;
                let h2 = join(g, h2, InsertionMode::OutputSecond)?;
                dropout(g, h2, self.config.output_dropout, phase)?
            }
            _ => lm.expect("lm_only has LM embeddings"),
        };
        self.projection.forward(g, top)
    }

    /// CRF negative log-likelihood of the sentence's gold tags.
    pub fn loss(&self, g: &mut Graph<'_, T>, sentence: &Sentence, lm: Option<&Tensor<T>>, phase: &mut Phase) -> Result<Var> {
        let tags = sentence
            .tags()
            .ok_or_else(|| Error::Data("training sentence has no tags".into()))?;
        let gold = self.scheme.encode(tags)?;
        let e = self.emissions(g, sentence, lm, phase)?;
        let t = self.crf.transitions_var(g)?;
        crf::nll_loss(g, e, t, &gold)
    }

    /// Viterbi tag ids.
    pub fn predict_ids(&self, sentence: &Sentence, lm: Option<&Tensor<T>>) -> Result<Vec<usize>> {
        let mut g = Graph::with_params(&self.store);
        let e = self.emissions(&mut g, sentence, lm, &mut Phase::Eval)?;
        let trans = self.crf.effective_transitions(&self.store);
        Ok(crf::viterbi(g.value(e), &trans)?.0)
    }

    pub fn predict(&self, sentence: &Sentence, lm: Option<&Tensor<T>>) -> Result<Vec<String>> {
        Ok(self.scheme.decode(&self.predict_ids(sentence, lm)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn tiny(mode: InsertionMode, lm_dim: usize, kind: CellKind) -> TaggerConfig {
        TaggerConfig {
            char_encoder: CharEncoderConfig::cnn(3, 4, 3),
            raw_chars: true,
            word_dim: 3,
            rnn: kind,
            hidden1: 3,
            hidden2: 2,
            rnn_dropout: 0.0,
            output_dropout: 0.0,
            mode,
            lm_dim,
            scheme: SchemeKind::Bioes,
            constrained: true,
        }
    }

    fn inventories() -> (Vocabulary, Vocabulary, LabelScheme) {
        let words = Vocabulary::from_symbols(["john", "lives", "in", "paris", "."]).unwrap();
        let chars = Vocabulary::build_chars(["John", "lives", "in", "Paris", "."], 1);
        (words, chars, LabelScheme::new(SchemeKind::Bioes, ["LOC", "PER"]))
    }

    fn build(cfg: TaggerConfig, seed: u64) -> TaggerModel<f64> {
        let (w, c, s) = inventories();
        TaggerModel::new(cfg, w, c, s, None, &mut RngStream::new(seed)).unwrap()
    }

    fn sentence() -> Sentence {
        Sentence::labeled(
            &["John", "lives", "in", "Paris", "."],
            &["S-PER", "O", "O", "S-LOC", "O"],
        )
        .unwrap()
    }

    fn lm_vectors(n: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = RngStream::new(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect())
    }

    #[test]
    fn wiring_arithmetic() {
        let mut base = TaggerConfig::preset("conll2003-ner").unwrap();
        base.hidden1 = 300;
        let tag = base.clone().with_lm(InsertionMode::OutputFirst, 64);
        assert_eq!(base.wiring().rnn2_input, Some(600));
        assert_eq!(tag.wiring().rnn2_input, Some(664));
        let chunk = TaggerConfig::preset("conll2000-chunk").unwrap();
        assert_eq!(chunk.wiring().token_dim, 80);
        let input = chunk.clone().with_lm(InsertionMode::InputFirst, 64).wiring();
        assert_eq!(input.rnn1_input, Some(144));
        let second = chunk.clone().with_lm(InsertionMode::OutputSecond, 64).wiring();
        assert_eq!(second.projection_input, 464);
        let only = chunk.with_lm(InsertionMode::LmOnly, 64).wiring();
        assert_eq!((only.rnn1_input, only.projection_input), (None, 64));
    }

    #[test]
    fn presets() {
        let ner = TaggerConfig::preset("conll2003-ner").unwrap();
        assert_eq!((ner.rnn, ner.hidden1, ner.hidden2), (CellKind::Gru, 300, 300));
        assert_eq!((ner.char_encoder.char_dim, ner.char_encoder.hidden), (25, 80));
        assert_eq!(ner.char_encoder.output_dim(), 160);
        assert_eq!(ner.rnn_dropout, 0.25);
        let chunk = TaggerConfig::preset("conll2000-chunk").unwrap();
        assert_eq!((chunk.rnn, chunk.hidden1), (CellKind::Lstm, 200));
        assert_eq!((chunk.char_encoder.filters, chunk.char_encoder.width, chunk.char_encoder.char_dim), (30, 3, 30));
        assert_eq!((chunk.rnn_dropout, chunk.output_dropout, chunk.char_encoder.embed_dropout), (0.5, 0.5, 0.5));
        let desk = TaggerConfig::preset("desk-chunk").unwrap();
        assert_eq!((desk.hidden1, desk.char_encoder.filters, desk.word_dim), (20, 3, 5));
        assert!(TaggerConfig::preset("nope").is_err());
    }

    #[test]
    fn mode_and_lm_dim_must_agree() {
        assert!(tiny(InsertionMode::None, 4, CellKind::Gru).validate().is_err());
        assert!(tiny(InsertionMode::LmOnly, 0, CellKind::Gru).validate().is_err());
        assert!(tiny(InsertionMode::OutputFirst, 0, CellKind::Gru).validate().is_ok());
    }

    #[test]
    fn parameter_inventory_matches_formula() {
        let (w, c, s) = inventories();
        for mode in InsertionMode::ALL {
            let d = if mode == InsertionMode::None { 0 } else { 4 };
            for kind in [CellKind::Gru, CellKind::Lstm] {
                let cfg = tiny(mode, d, kind);
                let m = build(cfg.clone(), 1);
                assert_eq!(m.parameter_count(), cfg.parameter_count(w.len(), c.len(), s.num_tags()), "{mode}");
            }
        }
    }

    #[test]
    fn added_parameters_are_second_layer_input_weights() {
        let (w, c, s) = inventories();
        let base = tiny(InsertionMode::None, 0, CellKind::Lstm);
        let tag = tiny(InsertionMode::OutputFirst, 7, CellKind::Lstm);
        let diff = tag.parameter_count(w.len(), c.len(), s.num_tags()) - base.parameter_count(w.len(), c.len(), s.num_tags());
        // two directions × four gates × d_LM × H2
        assert_eq!(diff, 2 * 4 * 7 * base.hidden2);
    }

    #[test]
    fn match_parameters_search() {
        let (w, c, s) = inventories();
        let (nw, nc, nt) = (w.len(), c.len(), s.num_tags());
        let base = tiny(InsertionMode::None, 0, CellKind::Gru);
        let tag = tiny(InsertionMode::OutputFirst, 16, CellKind::Gru);
        let target = tag.parameter_count(nw, nc, nt);
        let matched = base.match_parameters(target, nw, nc, nt).unwrap();
        let got = matched.parameter_count(nw, nc, nt);
        let mut up = matched.clone();
        up.hidden2 += 1;
        let mut down = matched.clone();
        down.hidden2 -= 1;
        let step = up.parameter_count(nw, nc, nt) - got;
        assert!(got.abs_diff(target) <= step);
        assert!(got.abs_diff(target) <= up.parameter_count(nw, nc, nt).abs_diff(target));
        assert!(got.abs_diff(target) <= down.parameter_count(nw, nc, nt).abs_diff(target));
        let same = base.match_parameters(base.parameter_count(nw, nc, nt), nw, nc, nt).unwrap();
        assert_eq!(same, base);
        assert!(base.match_parameters(10, nw, nc, nt).is_err());
    }

    #[test]
    fn zero_lm_dim_reduces_to_baseline() {
        let sent = sentence();
        let base = build(tiny(InsertionMode::None, 0, CellKind::Gru), 3);
        let mut g = Graph::with_params(&base.store);
        let e0 = base.emissions(&mut g, &sent, None, &mut Phase::Eval).unwrap();
        let e0 = g.value(e0).clone();
        for mode in [InsertionMode::InputFirst, InsertionMode::OutputFirst, InsertionMode::OutputSecond] {
            let m = build(tiny(mode, 0, CellKind::Gru), 3);
            let mut g = Graph::with_params(&m.store);
            let e = m.emissions(&mut g, &sent, None, &mut Phase::Eval).unwrap();
            assert_eq!(g.value(e), &e0, "{mode}");
        }
    }

    #[test]
    fn zeroed_extra_weights_reproduce_baseline() {
        let sent = sentence();
        let base = build(tiny(InsertionMode::None, 0, CellKind::Lstm), 4);
        let mut tag = build(tiny(InsertionMode::OutputFirst, 5, CellKind::Lstm), 9);
        let ids: Vec<_> = tag.store.ids().collect();
        for id in ids {
            let name = tag.store.name(id).to_string();
            let src = base.store.by_name(&name).unwrap().clone();
            let dst = tag.store.get_mut(id);
            if dst.shape() == src.shape() {
                *dst = src;
            } else {
                // rnn2.*.w: baseline rows first, LM rows zeroed
                let d = dst.data_mut();
                d.fill(0.0);
                d[..src.len()].copy_from_slice(src.data());
            }
        }
        let lm = lm_vectors(sent.len(), 5, 1);
        let mut g = Graph::with_params(&base.store);
        let e0 = base.emissions(&mut g, &sent, None, &mut Phase::Eval).unwrap();
        let mut h = Graph::with_params(&tag.store);
        let e1 = tag.emissions(&mut h, &sent, Some(&lm), &mut Phase::Eval).unwrap();
        assert_eq!(g.value(e0), h.value(e1));
    }

    #[test]
    fn lm_embeddings_required_and_checked() {
        let m = build(tiny(InsertionMode::OutputFirst, 4, CellKind::Gru), 1);
        let sent = sentence();
        assert!(m.predict(&sent, None).is_err());
        assert!(m.predict(&sent, Some(&lm_vectors(2, 4, 1))).is_err());
        assert_eq!(m.predict(&sent, Some(&lm_vectors(5, 4, 1))).unwrap().len(), 5);
    }

    #[test]
    fn lm_only_uses_dense_and_crf() {
        let m = build(tiny(InsertionMode::LmOnly, 4, CellKind::Gru), 1);
        let names: Vec<&str> = m.store.iter().map(|(_, n, _)| n).collect();
        assert_eq!(names, ["proj.w", "proj.b", "crf.transitions"]);
        let sent = sentence();
        let lm = lm_vectors(5, 4, 2);
        let mut g = Graph::with_params(&m.store);
        let e = m.emissions(&mut g, &sent, Some(&lm), &mut Phase::Eval).unwrap();
        let w = m.store.by_name("proj.w").unwrap();
        let b = m.store.by_name("proj.b").unwrap();
        for k in 0..5 {
            for j in 0..m.scheme.num_tags() {
                let expect: f64 = (0..4).map(|i| lm.at(k, i) * w.at(i, j)).sum::<f64>() + b.at(0, j);
                assert!((g.value(e).at(k, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constrained_predictions_are_legal() {
        for seed in 0..20 {
            let m = build(tiny(InsertionMode::None, 0, CellKind::Gru), seed);
            let ids = m.predict_ids(&sentence(), None).unwrap();
            assert!(m.scheme.is_valid_sequence(&ids));
            let one = Sentence::from_words(&["Paris"]);
            let tag = m.predict(&one, None).unwrap();
            assert!(tag[0] == "O" || tag[0].starts_with("S-"), "{tag:?}");
            assert_eq!(m.predict(&one, None).unwrap(), tag);
        }
    }

    #[test]
    fn every_emission_row_sees_every_token() {
        let m = build(tiny(InsertionMode::None, 0, CellKind::Gru), 5);
        let a = sentence();
        let b = Sentence::from_words(&["John", "lives", "in", "Paris", "!"]);
        let ea = {
            let mut g = Graph::with_params(&m.store);
            let e = m.emissions(&mut g, &a, None, &mut Phase::Eval).unwrap();
            g.value(e).clone()
        };
        let mut g = Graph::with_params(&m.store);
        let e = m.emissions(&mut g, &b, None, &mut Phase::Eval).unwrap();
        for k in 0..5 {
            assert_ne!(g.value(e).row(k), ea.row(k));
        }
    }

    #[test]
    fn end_to_end_gradients() {
        for mode in [InsertionMode::None, InsertionMode::OutputFirst, InsertionMode::LmOnly] {
            let d = if mode == InsertionMode::None { 0 } else { 3 };
            let mut m = build(tiny(mode, d, CellKind::Lstm), 6);
            // move transitions off zero so their gradient is generic
            let t = m.crf.transitions;
            let mut rng = RngStream::new(2);
            for x in m.store.get_mut(t).data_mut() {
                *x = rng.uniform(-0.5, 0.5);
            }
            let sent = sentence();
            let lm = lm_vectors(5, 3, 3);
            let lm = (d > 0).then_some(lm);
            let frozen = m.clone();
            let report = gradcheck::check(&mut m.store, 1e-5, |g| {
                frozen.loss(g, &sent, lm.as_ref(), &mut Phase::Eval)
            })
            .unwrap();
            assert!(report.passes(1e-4), "{mode}: {report:?}");
        }
    }
}
