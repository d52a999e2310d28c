//! Neural building blocks.
//!
//! Matrices are initialized uniformly in `±sqrt(6 / (fan_in + fan_out))`,
//! biases at zero (LSTM forget gates at `+1`).

mod bilayer;
mod cell;
mod char_encoder;

use std::io::BufRead;
use std::path::Path;

pub use bilayer::BiLayer;
pub use cell::{CellKind, CellState, RecurrentCell};
pub use char_encoder::{CharEncoder, CharEncoderConfig, CharEncoderKind};

use crate::corpus::{normalize, Vocabulary, PAD_ID};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Training phase carries the dropout stream; evaluation needs none.
pub enum Phase<'r> {
    Train(&'r mut RngStream),
    Eval,
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 − p)` at train time so
/// evaluation is the identity.
pub fn dropout<T: Scalar>(g: &mut Graph<'_, T>, x: Var, p: f64, phase: &mut Phase) -> Result<Var> {
    let Phase::Train(rng) = phase else {
        return Ok(x);
    };
    if p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(Error::Invalid(format!("dropout probability {p} must be < 1")));
    }
    let keep = 1.0 - p;
    let scale = T::lit(1.0 / keep);
    let n = g.value(x).len();
    let mask = (0..n)
        .map(|_| if rng.unit() < keep { scale } else { T::zero() })
        .collect();
    g.dropout_mask_apply(x, mask)
}

pub fn xavier<T: Scalar>(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.uniform(-a, a)).collect())
}

/// Affine map `x · W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.w"), xavier(in_dim, out_dim, rng))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim))?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    pub fn parameter_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }
}

/// Lookup table `E(·)`: row `id` is the embedding of symbol `id`.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    /// Randomly initialized table, uniform in `±sqrt(3 / dim)`, padding row
    /// zero.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Self::with_values(store, name, random_embeddings(vocab, dim, rng))
    }

    pub fn with_values<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        values: Tensor<T>,
    ) -> Result<Self> {
        let (vocab, dim) = (values.rows(), values.cols());
        let table = store.add(name.to_string(), values)?;
        Ok(Self { table, vocab, dim })
    }

    pub fn lookup<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding_lookup(t, ids)
    }
}

pub fn random_embeddings<T: Scalar>(vocab: usize, dim: usize, rng: &mut RngStream) -> Tensor<T> {
    let a = (3.0 / dim as f64).sqrt();
    let mut t = Tensor::matrix(vocab, dim, (0..vocab * dim).map(|_| rng.uniform(-a, a)).collect());
    if vocab > PAD_ID {
        t.row_mut(PAD_ID).iter_mut().for_each(|x| *x = T::zero());
    }
    t
}

/// Embedding table initialized from a `word v1 … vd` text file.
#[derive(Clone, Debug)]
pub struct LoadedEmbeddings<T: Scalar> {
    pub table: Tensor<T>,
    pub found: usize,
    /// Fraction of non-reserved vocabulary symbols found in the file.
    pub coverage: f64,
}

/// Reads pre-trained vectors. File words are normalized before matching the
/// vocabulary (which holds normalized forms); the first vector for a
/// normalized word wins. Rows not found keep their random initialization.
pub fn load_embeddings<T: Scalar, R: BufRead>(
    reader: R,
    vocab: &Vocabulary,
    rng: &mut RngStream,
) -> Result<LoadedEmbeddings<T>> {
    let mut vectors: Vec<(usize, Vec<T>)> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<embeddings>", e))?;
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let vals: Vec<T> = fields
            .map(|f| {
                f.parse::<f64>().map(T::lit).map_err(|_| Error::Parse {
                    path: "<embeddings>".into(),
                    line: i + 1,
                    msg: format!("bad number `{f}`"),
                })
            })
            .collect::<Result<_>>()?;
        match dim {
            None if vals.is_empty() => {
                return Err(Error::Parse {
                    path: "<embeddings>".into(),
                    line: i + 1,
                    msg: "no vector components".into(),
                })
            }
            None => dim = Some(vals.len()),
            Some(d) if d != vals.len() => {
                return Err(Error::Parse {
                    path: "<embeddings>".into(),
                    line: i + 1,
                    msg: format!("dimension {} differs from {d}", vals.len()),
                })
            }
            _ => {}
        }
        if let Some(id) = vocab.get(&normalize(word)) {
            if seen.insert(id) {
                vectors.push((id, vals));
            }
        }
    }
    let dim = dim.ok_or_else(|| Error::Data("embedding file is empty".into()))?;
    let mut table = random_embeddings::<T>(vocab.len(), dim, rng);
    let found = vectors
        .iter()
        .filter(|(id, _)| *id >= crate::corpus::RESERVED.len())
        .count();
    for (id, vals) in vectors {
        table.row_mut(id).copy_from_slice(&vals);
    }
    let denom = vocab.symbols().len().max(1);
    Ok(LoadedEmbeddings {
        table,
        found,
        coverage: found as f64 / denom as f64,
    })
}

pub fn load_embeddings_file<T: Scalar>(
    path: &Path,
    vocab: &Vocabulary,
    rng: &mut RngStream,
) -> Result<LoadedEmbeddings<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    load_embeddings(std::io::BufReader::new(f), vocab, rng)
}
