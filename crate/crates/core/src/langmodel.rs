//! Forward and backward recurrent language models.
//!
//! A sentence `t₁ … t_N` is wrapped as `<S> t₁ … t_N </S>`. The forward LM
//! reads `<S> t₁ … t_N` and predicts `t₁ … t_N </S>`. The backward LM is the
//! same forward scan run over the reversed wrapped sequence: it reads
//! `</S> t_N … t₁` and predicts `t_N … t₁ <S>`. Its outputs are then
//! index-reversed so that row `q` holds the state that has consumed
//! `t_{q+1} … t_N </S>` and predicts wrapped position `q`.
//!
//! The LM embedding of token `k` (1-based) is forward state row `k` and
//! backward state row `k − 1`: each summarizes the token together with all of
//! its left (resp. right) context. Perplexity counts `N + 1` predictions per
//! sentence, one per token plus the closing sentinel.

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, Vocabulary, BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::graph::{clip_gradients, GradBuffer, Graph, ParamStore, Var};
use crate::layers::{CellKind, CharEncoder, CharEncoderConfig, Dense, EmbeddingTable, Phase, RecurrentCell};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::AdamState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" | "fwd" => Ok(Direction::Forward),
            "backward" | "bwd" => Ok(Direction::Backward),
            other => Err(Error::Invalid(format!("unknown LM direction `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmInput {
    TokenEmbedding,
    CharCnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub direction: Direction,
    pub input: LmInput,
    /// Token embedding size, or filter count of the character CNN.
    pub embed_dim: usize,
    pub cell: CellKind,
    pub hidden: usize,
    #[serde(default)]
    pub projection: Option<usize>,
    #[serde(default = "one")]
    pub layers: usize,
    /// Read normalized token forms (words and characters) instead of raw.
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "default_char_dim")]
    pub char_dim: usize,
    #[serde(default = "default_char_width")]
    pub char_width: usize,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_char_dim() -> usize {
    16
}
fn default_char_width() -> usize {
    3
}

impl LmConfig {
    pub fn lstm(direction: Direction, embed_dim: usize, hidden: usize) -> Self {
        Self {
            direction,
            input: LmInput::TokenEmbedding,
            embed_dim,
            cell: CellKind::Lstm,
            hidden,
            projection: None,
            layers: 1,
            normalize: true,
            char_dim: default_char_dim(),
            char_width: default_char_width(),
        }
    }

    pub fn lstmp(direction: Direction, embed_dim: usize, hidden: usize, projection: usize) -> Self {
        Self {
            cell: CellKind::Lstmp,
            projection: Some(projection),
            ..Self::lstm(direction, embed_dim, hidden)
        }
    }

    /// Size of the top-layer state (the LM embedding).
    pub fn output_dim(&self) -> usize {
        match self.cell {
            CellKind::Lstmp => self.projection.unwrap_or(self.hidden),
            _ => self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config(format!("zero-sized language model {self:?}")));
        }
        if (self.cell == CellKind::Lstmp) != self.projection.is_some() {
            return Err(Error::Config("projection size is required for (and only for) lstmp".into()));
        }
        if self.input == LmInput::CharCnn && (self.char_dim == 0 || self.char_width == 0) {
            return Err(Error::Config("character CNN input needs char_dim and char_width".into()));
        }
        Ok(())
    }
}

/// One position of the scanned sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Unit {
    pub id: usize,
    pub chars: Vec<usize>,
}

/// Per-position outputs aligned to the wrapped sentence (see module docs).
#[derive(Clone, Debug, PartialEq)]
pub struct LmOutput<T: Scalar = f64> {
    /// `[(N+1) × d]` top-layer states.
    pub states: Tensor<T>,
    /// `[(N+1) × V]` log-probabilities of the predicted symbol.
    pub log_probs: Tensor<T>,
    /// Vocabulary id predicted by each row.
    pub targets: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LanguageModel<T: Scalar = f64> {
    pub config: LmConfig,
    pub vocab: Vocabulary,
    pub chars: Option<Vocabulary>,
    pub store: ParamStore<T>,
    embed: Option<EmbeddingTable>,
    char_encoder: Option<CharEncoder>,
    layers: Vec<RecurrentCell>,
    output: Dense,
}

impl<T: Scalar> LanguageModel<T> {
    pub fn new(config: LmConfig, vocab: Vocabulary, chars: Option<Vocabulary>, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (embed, char_encoder) = match config.input {
            LmInput::TokenEmbedding => (
                Some(EmbeddingTable::new(&mut store, "lm.embed", vocab.len(), config.embed_dim, rng)?),
                None,
            ),
            LmInput::CharCnn => {
                let cv = chars
                    .as_ref()
                    .ok_or_else(|| Error::Config("character CNN input needs a character vocabulary".into()))?;
                let cc = CharEncoderConfig::cnn(config.char_dim, config.embed_dim, config.char_width);
                (None, Some(CharEncoder::new(&mut store, "lm.chars", &cc, cv.len(), rng)?))
            }
        };
        let mut layers = Vec::with_capacity(config.layers);
        let mut d = config.embed_dim;
        for l in 0..config.layers {
            let cell = RecurrentCell::new(
                &mut store,
                &format!("lm.rnn{l}"),
                config.cell,
                d,
                config.hidden,
                config.projection,
                rng,
            )?;
            d = cell.output_dim();
            layers.push(cell);
        }
        let output = Dense::new(&mut store, "lm.softmax", d, vocab.len(), rng)?;
        Ok(Self {
            config,
            vocab,
            chars,
            store,
            embed,
            char_encoder,
            layers,
            output,
        })
    }

    pub fn direction(&self) -> Direction {
        self.config.direction
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.num_elements()
    }

    /// Same parameters, other reading direction.
    pub fn with_direction(&self, direction: Direction) -> Self {
        let mut m = self.clone();
        m.config.direction = direction;
        m
    }

    /// `<S> t₁ … t_N </S>` in reading order of the sentence.
    pub fn wrapped_units(&self, sentence: &Sentence) -> Vec<Unit> {
        let use_raw = !self.config.normalize;
        let mut units = vec![Unit { id: BOS_ID, chars: vec![BOS_ID] }];
        for tok in &sentence.tokens {
            let form = if use_raw { &tok.raw } else { &tok.norm };
            let chars = match &self.chars {
                Some(cv) if self.config.input == LmInput::CharCnn => tok.char_ids(cv, use_raw),
                _ => Vec::new(),
            };
            units.push(Unit { id: self.vocab.id(form), chars });
        }
        units.push(Unit { id: EOS_ID, chars: vec![EOS_ID] });
        units
    }

    /// Scan order for this model's direction: inputs and the ids they predict.
    fn scan_sequence(&self, sentence: &Sentence) -> (Vec<Unit>, Vec<usize>) {
        let mut units = self.wrapped_units(sentence);
        if self.config.direction == Direction::Backward {
            units.reverse();
        }
        let targets = units[1..].iter().map(|u| u.id).collect();
        units.pop();
        (units, targets)
    }

    fn input_rows(&self, g: &mut Graph<'_, T>, units: &[Unit]) -> Result<Var> {
        match (&self.embed, &self.char_encoder) {
            (Some(e), _) => {
                let ids: Vec<usize> = units.iter().map(|u| u.id).collect();
                e.lookup(g, &ids)
            }
            (None, Some(enc)) => {
                let rows = units
                    .iter()
                    .map(|u| enc.encode(g, &u.chars, &mut Phase::Eval))
                    .collect::<Result<Vec<_>>>()?;
                if rows.len() == 1 {
                    Ok(rows[0])
                } else {
                    g.concat(&rows, 0)
                }
            }
            (None, None) => unreachable!("language model without an input layer"),
        }
    }

    /// Left-to-right scan over `units` regardless of direction: top-layer
    /// states `[M × d]` and next-symbol log-probabilities `[M × V]`.
    pub fn scan(&self, g: &mut Graph<'_, T>, units: &[Unit]) -> Result<(Var, Var)> {
        let mut x = self.input_rows(g, units)?;
        for cell in &self.layers {
            x = cell.scan(g, x, false)?.0;
        }
        let logits = self.output.forward(g, x)?;
        let lp = g.log_softmax(logits)?;
        Ok((x, lp))
    }

    /// Plain-value scan over `units`.
    pub fn scan_values(&self, units: &[Unit]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::with_params(&self.store);
        let (s, lp) = self.scan(&mut g, units)?;
        Ok((g.value(s).clone(), g.value(lp).clone()))
    }

    /// Summed negative log-likelihood of the sentence and the number of
    /// predictions it contains.
    pub fn loss(&self, g: &mut Graph<'_, T>, sentence: &Sentence) -> Result<(Var, usize)> {
        let (units, targets) = self.scan_sequence(sentence);
        let (_, lp) = self.scan(g, &units)?;
        let at: Vec<(usize, usize)> = targets.iter().enumerate().map(|(r, &c)| (r, c)).collect();
        let picked = g.gather(lp, &at)?;
        let total = g.sum(picked);
        Ok((g.scale(total, -T::one()), targets.len()))
    }

    /// Outputs aligned to the wrapped sentence.
    pub fn run(&self, sentence: &Sentence) -> Result<LmOutput<T>> {
        let (units, mut targets) = self.scan_sequence(sentence);
        let (mut states, mut log_probs) = self.scan_values(&units)?;
        if self.config.direction == Direction::Backward {
            states = states.reversed_rows();
            log_probs = log_probs.reversed_rows();
            targets.reverse();
        }
        Ok(LmOutput {
            states,
            log_probs,
            targets,
        })
    }

    /// Frozen top-layer embeddings `[N × d]`, one row per token.
    pub fn embeddings(&self, sentence: &Sentence) -> Result<Tensor<T>> {
        let out = self.run(sentence)?;
        let n = sentence.len();
        let offset = match self.config.direction {
            Direction::Forward => 1,
            Direction::Backward => 0,
        };
        let d = out.states.cols();
        let mut data = Vec::with_capacity(n * d);
        for k in 0..n {
            data.extend_from_slice(out.states.row(k + offset));
        }
        Ok(Tensor::matrix(n, d, data))
    }

    /// Total NLL and prediction count over `sentences`.
    pub fn total_nll(&self, sentences: &[Sentence]) -> Result<(f64, usize)> {
        let mut nll = 0.0;
        let mut count = 0;
        for s in sentences {
            let out = self.run(s)?;
            for (r, &t) in out.targets.iter().enumerate() {
                nll -= out.log_probs.at(r, t).as_f64();
            }
            count += out.targets.len();
        }
        Ok((nll, count))
    }

    /// `exp(total NLL / total predictions)`.
    pub fn perplexity(&self, sentences: &[Sentence]) -> Result<f64> {
        let (nll, count) = self.total_nll(sentences)?;
        if count == 0 {
            return Err(Error::Data("perplexity of an empty corpus".into()));
        }
        Ok((nll / count as f64).exp())
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 16,
            clip: crate::training::CLIP_NORM,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmEpoch {
    pub epoch: usize,
    /// Perplexity accumulated over the epoch's batches, before each update.
    pub train_perplexity: f64,
    pub dev_perplexity: Option<f64>,
}

/// Minimizes mean per-prediction NLL with Adam over shuffled mini-batches.
pub fn train_lm<T: Scalar>(
    model: &mut LanguageModel<T>,
    corpus: &[Sentence],
    dev: Option<&[Sentence]>,
    cfg: &LmTrainConfig,
) -> Result<Vec<LmEpoch>> {
    if corpus.is_empty() {
        return Err(Error::Data("language model corpus is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = RngStream::new(cfg.seed).fork(0x4c4d);
    let mut adam = AdamState::new(&model.store);
    let mut grads = GradBuffer::for_store(&model.store);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut epoch_nll = 0.0;
        let mut epoch_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            let mut count = 0usize;
            for &i in batch {
                let mut g = Graph::with_params(&model.store);
                let (loss, n) = model.loss(&mut g, &corpus[i])?;
                let value = g.value(loss).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite language model loss at epoch {epoch}, sentence {i}"
                    )));
                }
                epoch_nll += value;
                count += n;
                let gr = g.backward(loss)?;
                grads.accumulate(&gr);
            }
            epoch_count += count;
            grads.scale(T::one() / T::from_usize_lossy(count));
            clip_gradients(&model.store, &mut grads, T::lit(cfg.clip))?;
            adam.step(&mut model.store, &grads, cfg.lr)?;
        }
        let dev_perplexity = match dev {
            Some(d) if !d.is_empty() => Some(model.perplexity(d)?),
            _ => None,
        };
        log.push(LmEpoch {
            epoch,
            train_perplexity: (epoch_nll / epoch_count as f64).exp(),
            dev_perplexity,
        });
    }
    Ok(log)
}

/// LM embeddings of one sentence from either or both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct LmEmbeddingSet<T: Scalar = f64> {
    pub forward: Option<Tensor<T>>,
    pub backward: Option<Tensor<T>>,
}

impl<T: Scalar> LmEmbeddingSet<T> {
    /// `[→h ; ←h]` per row.
    pub fn combined(&self) -> Tensor<T> {
        match (&self.forward, &self.backward) {
            (Some(f), Some(b)) => Tensor::hcat(&[f, b]).expect("same row count"),
            (Some(f), None) => f.clone(),
            (None, Some(b)) => b.clone(),
            (None, None) => unreachable!("embedding set without a direction"),
        }
    }

    pub fn dim(&self) -> usize {
        self.forward.as_ref().map_or(0, Tensor::cols) + self.backward.as_ref().map_or(0, Tensor::cols)
    }
}

pub fn extract_embeddings<T: Scalar>(
    forward: Option<&LanguageModel<T>>,
    backward: Option<&LanguageModel<T>>,
    sentence: &Sentence,
) -> Result<LmEmbeddingSet<T>> {
    if forward.is_none() && backward.is_none() {
        return Err(Error::Config("at least one language model direction is required".into()));
    }
    for (m, want) in [(forward, Direction::Forward), (backward, Direction::Backward)] {
        if let Some(m) = m {
            if m.direction() != want {
                return Err(Error::Config(format!("expected a {want:?} language model")));
            }
        }
    }
    Ok(LmEmbeddingSet {
        forward: forward.map(|m| m.embeddings(sentence)).transpose()?,
        backward: backward.map(|m| m.embeddings(sentence)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn vocab() -> Vocabulary {
        Vocabulary::from_symbols(["a", "b", "c", "d", "e", "f"]).unwrap()
    }

    fn model(direction: Direction, seed: u64) -> LanguageModel<f64> {
        LanguageModel::new(LmConfig::lstm(direction, 5, 6), vocab(), None, &mut RngStream::new(seed)).unwrap()
    }

    fn s(text: &str) -> Sentence {
        Sentence::from_words(&text.split(' ').collect::<Vec<_>>())
    }

    #[test]
    fn rows_are_distributions() {
        let m = model(Direction::Forward, 1);
        let out = m.run(&s("a b c")).unwrap();
        assert_eq!(out.log_probs.shape(), &[4, 10]);
        for r in 0..4 {
            let total: f64 = out.log_probs.row(r).iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.targets, vec![4, 5, 6, EOS_ID]);
    }

    #[test]
    fn zero_output_layer_gives_uniform_perplexity() {
        let mut m = model(Direction::Forward, 2);
        for name in ["lm.softmax.w", "lm.softmax.b"] {
            let id = m.store.id_of(name).unwrap();
            m.store.get_mut(id).fill(0.0);
        }
        let ppl = m.perplexity(&[s("a b"), s("c d e f")]).unwrap();
        assert!((ppl - 10.0).abs() < 1e-9);
    }

    #[test]
    fn perplexity_matches_naive_sum() {
        let m = model(Direction::Backward, 3);
        let corpus = [s("a b c"), s("f"), s("d e e d")];
        let mut nll = 0.0;
        let mut n = 0;
        for sent in &corpus {
            let mut g = Graph::with_params(&m.store);
            let (loss, count) = m.loss(&mut g, sent).unwrap();
            nll += g.value(loss).data()[0];
            n += count;
        }
        assert_eq!(n, 3 + 1 + 1 + 1 + 4 + 1);
        assert!((m.perplexity(&corpus).unwrap() - (nll / n as f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn forward_states_are_causal() {
        let m = model(Direction::Forward, 4);
        let a = m.embeddings(&s("a b c d")).unwrap();
        let b = m.embeddings(&s("a b f f")).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn backward_states_are_anticausal() {
        let m = model(Direction::Backward, 5);
        let a = m.embeddings(&s("a b c d")).unwrap();
        let b = m.embeddings(&s("e f c d")).unwrap();
        assert_eq!(a.row(2), b.row(2));
        assert_eq!(a.row(3), b.row(3));
        assert_ne!(a.row(1), b.row(1));
        let single = m.embeddings(&s("a")).unwrap();
        assert_eq!(single.shape(), &[1, 6]);
    }

    #[test]
    fn backward_equals_reversed_forward_scan() {
        let bwd = model(Direction::Backward, 6);
        let fwd = bwd.with_direction(Direction::Forward);
        let sent = s("a c e b");
        let out = bwd.run(&sent).unwrap();
        let mut units = fwd.wrapped_units(&sent);
        units.reverse();
        units.pop();
        let (states, lp) = fwd.scan_values(&units).unwrap();
        assert_eq!(out.states, states.reversed_rows());
        assert_eq!(out.log_probs, lp.reversed_rows());
    }

    #[test]
    fn combined_embedding_dims() {
        let f = LanguageModel::<f64>::new(LmConfig::lstmp(Direction::Forward, 4, 8, 3), vocab(), None, &mut RngStream::new(1)).unwrap();
        let b = model(Direction::Backward, 2);
        let sent = s("a b c");
        let both = extract_embeddings(Some(&f), Some(&b), &sent).unwrap();
        assert_eq!(both.combined().shape(), &[3, 9]);
        assert_eq!(both.dim(), 9);
        let only = extract_embeddings(Some(&f), None, &sent).unwrap();
        assert_eq!(only.combined(), only.forward.clone().unwrap());
        assert!(extract_embeddings::<f64>(None, None, &sent).is_err());
        assert!(extract_embeddings(Some(&b), None, &sent).is_err());
        assert_eq!(extract_embeddings(Some(&f), Some(&b), &sent).unwrap(), both);
    }

    #[test]
    fn char_cnn_input() {
        let chars = Vocabulary::build_chars(["abc", "def"], 1);
        let mut cfg = LmConfig::lstm(Direction::Forward, 4, 5);
        cfg.input = LmInput::CharCnn;
        let m = LanguageModel::<f64>::new(cfg, vocab(), Some(chars), &mut RngStream::new(3)).unwrap();
        let e = m.embeddings(&s("ab fed")).unwrap();
        assert_eq!(e.shape(), &[2, 5]);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let mut m = model(Direction::Forward, 7);
        let before = m.store.clone();
        let log = train_lm(&mut m, &[s("a b")], None, &LmTrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert!(log.is_empty());
        for id in m.store.ids() {
            assert_eq!(m.store.get(id), before.get(id));
        }
    }

    #[test]
    fn memorizes_a_repeated_sentence() {
        let mut m = LanguageModel::<f64>::new(LmConfig::lstm(Direction::Forward, 8, 16), vocab(), None, &mut RngStream::new(8))
            .unwrap();
        let corpus = vec![s("a b c d e f"); 8];
        let cfg = LmTrainConfig { epochs: 200, lr: 1e-2, batch_size: 8, ..Default::default() };
        let log = train_lm(&mut m, &corpus, None, &cfg).unwrap();
        let ppl = m.perplexity(&corpus[..1]).unwrap();
        assert!(ppl <= 1.05, "{ppl}");
        for w in log.windows(2).take(20) {
            assert!(w[1].train_perplexity <= w[0].train_perplexity + 1e-6);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = vec![s("a b c"), s("d e"), s("f a b c")];
        let cfg = LmTrainConfig { epochs: 3, batch_size: 2, ..Default::default() };
        let mut m1 = model(Direction::Backward, 9);
        let mut m2 = model(Direction::Backward, 9);
        let l1 = train_lm(&mut m1, &corpus, Some(&corpus), &cfg).unwrap();
        let l2 = train_lm(&mut m2, &corpus, Some(&corpus), &cfg).unwrap();
        assert_eq!(l1, l2);
        for id in m1.store.ids() {
            assert_eq!(m1.store.get(id), m2.store.get(id));
        }
    }

    #[test]
    fn lstmp_lm_gradients() {
        let mut m = LanguageModel::<f64>::new(LmConfig::lstmp(Direction::Backward, 3, 4, 2), vocab(), None, &mut RngStream::new(10))
            .unwrap();
        let sent = s("a b c");
        let lm = m.clone();
        let report = gradcheck::check(&mut m.store, 1e-5, |g| Ok(lm.loss(g, &sent)?.0)).unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
