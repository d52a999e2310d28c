//! Token encoders over characters.
//!
//! CNN: embed chars, zero-pad `(width − 1) / 2` rows on each side (plus extra
//! rows at the end if still shorter than `width`), convolve, `tanh`, then max
//! over positions. RNN: stacked bidirectional GRUs over chars; output is the
//! final forward state concatenated with the final backward state of the top
//! layer.

use serde::{Deserialize, Serialize};

use super::{dropout, BiLayer, CellKind, EmbeddingTable, Phase};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CharEncoderKind {
    Cnn,
    Rnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharEncoderConfig {
    pub kind: CharEncoderKind,
    pub char_dim: usize,
    #[serde(default)]
    pub filters: usize,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub hidden: usize,
    #[serde(default)]
    pub layers: usize,
    /// Dropout on character embeddings.
    #[serde(default)]
    pub embed_dropout: f64,
    /// Dropout on the input of each character RNN layer above the first.
    #[serde(default)]
    pub rnn_dropout: f64,
}

impl CharEncoderConfig {
    pub fn cnn(char_dim: usize, filters: usize, width: usize) -> Self {
        Self {
            kind: CharEncoderKind::Cnn,
            char_dim,
            filters,
            width,
            hidden: 0,
            layers: 0,
            embed_dropout: 0.0,
            rnn_dropout: 0.0,
        }
    }

    pub fn rnn(char_dim: usize, hidden: usize, layers: usize) -> Self {
        Self {
            kind: CharEncoderKind::Rnn,
            char_dim,
            filters: 0,
            width: 0,
            hidden,
            layers,
            embed_dropout: 0.0,
            rnn_dropout: 0.0,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            CharEncoderKind::Cnn => self.filters,
            CharEncoderKind::Rnn => 2 * self.hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.char_dim > 0
            && match self.kind {
                CharEncoderKind::Cnn => self.filters > 0 && self.width > 0,
                CharEncoderKind::Rnn => self.hidden > 0 && self.layers > 0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("incomplete character encoder config {self:?}")))
        }
    }

    pub fn parameter_count(&self, num_chars: usize) -> usize {
        let embed = num_chars * self.char_dim;
        embed
            + match self.kind {
                CharEncoderKind::Cnn => self.width * self.char_dim * self.filters + self.filters,
                CharEncoderKind::Rnn => (0..self.layers)
                    .map(|l| {
                        let d = if l == 0 { self.char_dim } else { 2 * self.hidden };
                        BiLayer::parameter_count(CellKind::Gru, d, self.hidden, None)
                    })
                    .sum(),
            }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Cnn { w: ParamId, b: ParamId },
    Rnn(Vec<BiLayer>),
}

#[derive(Clone, Debug)]
pub struct CharEncoder {
    pub config: CharEncoderConfig,
    pub embed: EmbeddingTable,
    body: Body,
}

impl CharEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &CharEncoderConfig,
        num_chars: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate()?;
        let embed = EmbeddingTable::new(store, &format!("{name}.embed"), num_chars, config.char_dim, rng)?;
        let body = match config.kind {
            CharEncoderKind::Cnn => {
                let rows = config.width * config.char_dim;
                let w = store.add(format!("{name}.cnn.w"), super::xavier(rows, config.filters, rng))?;
                let b = store.add(format!("{name}.cnn.b"), Tensor::zeros(1, config.filters))?;
                Body::Cnn { w, b }
            }
            CharEncoderKind::Rnn => {
                let mut layers = Vec::with_capacity(config.layers);
                for l in 0..config.layers {
                    let d = if l == 0 { config.char_dim } else { 2 * config.hidden };
                    let p = if l == 0 { 0.0 } else { config.rnn_dropout };
                    layers.push(BiLayer::new(store, &format!("{name}.rnn{l}"), CellKind::Gru, d, config.hidden, None, p, rng)?);
                }
                Body::Rnn(layers)
            }
        };
        Ok(Self {
            config: config.clone(),
            embed,
            body,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Encodes one token's character ids into a `[1 × output_dim]` row.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, chars: &[usize], phase: &mut Phase) -> Result<Var> {
        if chars.is_empty() {
            return Err(Error::Invalid("cannot encode a token with no characters".into()));
        }
        let e = self.embed.lookup(g, chars)?;
        let e = dropout(g, e, self.config.embed_dropout, phase)?;
        match &self.body {
            Body::Cnn { w, b } => {
                let width = self.config.width;
                let side = (width - 1) / 2;
                let after = side + (width.saturating_sub(chars.len() + 2 * side));
                let padded = g.pad_rows(e, side, after)?;
                let windows = g.unfold(padded, width)?;
                let wv = g.param(*w);
                let bv = g.param(*b);
                let conv = g.matmul(windows, wv)?;
                let conv = g.add(conv, bv)?;
                let act = g.tanh(conv);
                g.max_over_axis(act, 0)
            }
            Body::Rnn(layers) => {
                let mut x = e;
                for l in layers {
                    x = l.run(g, x, phase)?;
                }
                let n = chars.len();
                let h = self.config.hidden;
                let last = g.row(x, n - 1)?;
                let fwd = g.slice(last, 1, 0, h)?;
                let first = g.row(x, 0)?;
                let bwd = g.slice(first, 1, h, h)?;
                g.concat(&[fwd, bwd], 1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn one_char_token_cnn_width3() {
        let mut store = ParamStore::<f64>::new();
        let cfg = CharEncoderConfig::cnn(30, 30, 3);
        let enc = CharEncoder::new(&mut store, "ch", &cfg, 10, &mut RngStream::new(1)).unwrap();
        let mut g = Graph::with_params(&store);
        let out = enc.encode(&mut g, &[5], &mut Phase::Eval).unwrap();
        assert_eq!(g.shape(out), (1, 30));
    }

    #[test]
    fn even_width_still_yields_a_window() {
        let mut store = ParamStore::<f64>::new();
        let cfg = CharEncoderConfig::cnn(4, 6, 4);
        let enc = CharEncoder::new(&mut store, "ch", &cfg, 10, &mut RngStream::new(1)).unwrap();
        let mut g = Graph::with_params(&store);
        let out = enc.encode(&mut g, &[5], &mut Phase::Eval).unwrap();
        assert_eq!(g.shape(out), (1, 6));
    }

    #[test]
    fn zero_parameters_give_zero_vector() {
        let mut store = ParamStore::<f64>::new();
        let cfg = CharEncoderConfig::cnn(5, 7, 3);
        let enc = CharEncoder::new(&mut store, "ch", &cfg, 10, &mut RngStream::new(1)).unwrap();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).fill(0.0);
        }
        let mut g = Graph::with_params(&store);
        let out = enc.encode(&mut g, &[4, 5, 6, 7], &mut Phase::Eval).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn birnn_output_is_twice_hidden() {
        let mut store = ParamStore::<f64>::new();
        let cfg = CharEncoderConfig::rnn(25, 80, 1);
        let enc = CharEncoder::new(&mut store, "ch", &cfg, 12, &mut RngStream::new(1)).unwrap();
        let mut g = Graph::with_params(&store);
        let out = enc.encode(&mut g, &[4, 5, 6], &mut Phase::Eval).unwrap();
        assert_eq!(g.shape(out), (1, 160));
        assert_eq!(store.num_elements(), cfg.parameter_count(12));
    }

    #[test]
    fn cnn_gradients_match_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let cfg = CharEncoderConfig::cnn(3, 4, 3);
        let enc = CharEncoder::new(&mut store, "ch", &cfg, 8, &mut RngStream::new(2)).unwrap();
        assert_eq!(store.num_elements(), cfg.parameter_count(8));
        let report = gradcheck::check(&mut store, 1e-5, |g| {
            let a = enc.encode(g, &[4, 5, 6, 4, 7], &mut Phase::Eval)?;
            let b = enc.encode(g, &[6], &mut Phase::Eval)?;
            let ab = g.mul(a, b)?;
            let s = g.sum(ab);
            Ok(g.tanh(s))
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
